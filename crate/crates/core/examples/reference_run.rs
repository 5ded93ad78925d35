//! End-to-end run of the reference lending simulation, printing the
//! per-step table and the RRM convergence trace.

use std::time::Instant;

use longfair::commands::{cmd_evaluate, cmd_generate, cmd_train};
use longfair::config::RunConfig;

fn main() -> longfair::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = RunConfig::reference_synthetic(seed, std::env::temp_dir().join("longfair_reference"));
    if let Some(path) = args.get(2) {
        cfg = RunConfig::load(path.as_ref())?;
    }
    if let Ok(path) = std::env::var("LONGFAIR_STANDIN_CSV") {
        longfair::datagen::write_credit_standin(path.as_ref(), 30_000, 0)?;
    }
    let clock = Instant::now();
    cmd_generate(&cfg, false)?;
    let out = cmd_train(&cfg, false)?;
    if let Some(tr) = &out.trace {
        for r in &tr.records {
            println!("iter {:2} delta {:.3e} l_u {:.4} l_l {:.4} l_s {:.4} steps {}", r.iteration, r.delta, r.utility, r.longterm, r.shortterm, r.inner_steps);
        }
    }
    for (n, m) in &out.models {
        println!("{n}: {:?}", m.weights);
    }
    cmd_evaluate(&cfg)?;
    print!("{}", std::fs::read_to_string(cfg.output_dir.join("table.csv")).unwrap());
    println!("elapsed {:.1}s", clock.elapsed().as_secs_f64());
    Ok(())
}
