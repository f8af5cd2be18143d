//! Full pipeline on the default synthetic corpus, comparing supervision
//! modes. Pass `key=value` overrides as arguments, e.g. `source.noise=1.5`.

use stepweld::harness::{run_pipeline, PipelineConfig, ReportFormat};

fn main() -> stepweld::Result<()> {
    let mut overrides: Vec<String> = std::env::args().skip(1).collect();
    if !overrides.iter().any(|o| o.starts_with("assign.compare")) {
        overrides.push(r#"assign.compare=["full", "task_id", "kmeans"]"#.into());
    }
    let config = PipelineConfig::layered(None, &overrides)?;
    let report = run_pipeline(&config)?;
    print!("{}", report.render(ReportFormat::Table)?);
    Ok(())
}
