//! The staged pipeline on the seconds-scale smoke configuration, with a
//! prompt-source sweep. Artifacts land in a temporary directory.
//!
//! cargo run --release --example run_pipeline

use memlab::config::{RunConfig, Sweep};
use memlab::pipeline::{render_report, run_experiment, Workspace};
use memlab::selfprompt::PromptSource;

fn main() -> memlab::Result<()> {
    let dir = std::env::temp_dir().join("memlab-example-run");
    let mut config = RunConfig::smoke(1);
    config.eval.sweep = Some(Sweep::PromptSource(vec![PromptSource::Domain, PromptSource::Irrelevant, PromptSource::Identical]));
    println!("config hash {}", config.hash());
    let ws = Workspace::new(&dir, config)?;
    let (main, points) = run_experiment(&ws)?;
    print!("{}", render_report(&main));
    for p in &points {
        let point = p.sweep.as_ref().expect("sweep point");
        println!("{} = {}: spv AUC {:.4}", point.axis, point.value, p.methods[&memlab::attack::Method::Spv].metrics.auc);
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}
