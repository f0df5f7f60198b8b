//! Trains the staged pipeline twice on synthetic data, once as configured and
//! once with the stop-gradient, predictor and EMA removed, and prints the
//! stage-2 histories side by side as TSV.
//!
//! ```text
//! cargo run --release --example collapse_pilot [key=value ...]
//! ```

use ncre::config::RunConfig;
use ncre::pipeline::{self, EpochRecord};

fn stage2_history(rc: &RunConfig) -> ncre::Result<Vec<EpochRecord>> {
    let (table, split) = rc.load_data()?;
    let run = pipeline::run_pipeline::<f64>(&split, &table, &rc.pipeline, None)?;
    Ok(run.stages[1].history.clone())
}

fn main() -> ncre::Result<()> {
    let mut rc = RunConfig {
        synth: true,
        ..RunConfig::default()
    };
    for arg in std::env::args().skip(1) {
        rc.apply_text(&arg)?;
    }
    let byol = stage2_history(&rc)?;
    let mut ablated = rc.clone();
    ablated.pipeline.byol = ablated.pipeline.byol.ablated();
    let collapsed = stage2_history(&ablated)?;

    println!("run\tepoch\tmean_loss\tanisotropy\teffective_rank");
    for (name, history) in [("byol", &byol), ("ablated", &collapsed)] {
        for r in history {
            println!(
                "{name}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch, r.mean_loss, r.anisotropy, r.effective_rank
            );
        }
    }
    Ok(())
}
