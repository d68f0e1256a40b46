//! Runs the desk protocol, caching stage checkpoints in the given directory.

use std::path::PathBuf;

use stenosis::experiment::{run_experiment, Workspace};
use stenosis::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/desk".into()));
    let seeds: Vec<u64> = (0..5).collect();
    let t = std::time::Instant::now();
    let report = run_experiment(
        &PipelineConfig::desk_budget(),
        &seeds,
        &Workspace { dir: Some(dir), reuse: true },
        &mut |m| eprintln!("[{:7.1}s] {m}", t.elapsed().as_secs_f64()),
    )?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
