//! Predict the next step of a video from the steps seen so far. Each task
//! runs its steps in a fixed order here and the features are clean, so the
//! last observed step decides the answer.

use stepweld::harness::{forecast_steps, generate_synthetic, DownstreamConfig, SyntheticSpec};
use stepweld::longterm::{forecast_samples, InputMode, LongtermTrainConfig};

fn main() -> stepweld::Result<()> {
    let data = generate_synthetic(&SyntheticSpec {
        tasks: 6,
        variants: 1,
        noise: 0.2,
        scene: 0.0,
        downstream_per_class: 20,
        ..Default::default()
    })?;
    for fs in forecast_samples(5, 3) {
        println!("history {:?} -> target {}", fs.history, fs.target);
    }
    let seqs = data
        .downstream
        .iter()
        .map(|v| v.sequence(&data.downstream_features))
        .collect::<stepweld::Result<Vec<_>>>()?;
    let cfg = DownstreamConfig {
        history: 4,
        train: LongtermTrainConfig {
            epochs: 20,
            ..Default::default()
        },
        ..Default::default()
    };
    let (_, report) = forecast_steps(&data.downstream, &seqs, data.kb.num_steps(), InputMode::Basic, &cfg)?;
    println!("\nnext-step accuracy {:.1}% over {} test histories", 100.0 * report.accuracy, report.n);
    Ok(())
}
