//! Which of two planted tokens comes first? A transformer with positional
//! embeddings solves it; the same layer with zero positions and a mean
//! pooled linear probe cannot, since every sequence holds the same tokens.

use stepweld::harness::{order_task, OrderTaskSpec};
use stepweld::longterm::{
    evaluate_samples, linear_probe, mean_pool, train_longterm, LongtermTrainConfig, Positional, ProbeConfig,
    TransformerSpec,
};
use stepweld::math::Matrix;
use stepweld::optim::OptimizerConfig;

fn main() -> stepweld::Result<()> {
    let spec = OrderTaskSpec::default();
    let task = order_task(&spec)?;
    let cfg = LongtermTrainConfig {
        optimizer: OptimizerConfig::adamw(3e-3),
        epochs: 30,
        ..Default::default()
    };

    for positional in [Positional::Learned, Positional::Zero] {
        let mut tspec = TransformerSpec::small(2).native(spec.dim);
        tspec.positional = positional;
        let model = train_longterm(tspec, &task.train, &cfg)?.model;
        let acc = evaluate_samples(&model, &task.test)?.accuracy;
        println!("transformer, {positional:?} positions: {:.1}%", 100.0 * acc);
    }

    let null = vec![0.0; spec.dim];
    let pool = |s: &[stepweld::longterm::LongtermSample]| -> stepweld::Result<(Matrix, Vec<Option<usize>>)> {
        let rows: Vec<Vec<f64>> = s.iter().map(|x| mean_pool(&x.tokens, &null)).collect();
        Ok((Matrix::from_rows(&rows)?, s.iter().map(|x| Some(x.label)).collect()))
    };
    let (tx, ty) = pool(&task.train)?;
    let (vx, vy) = pool(&task.test)?;
    let (_, report) = linear_probe(&tx, &ty, &vx, &vy, 2, &ProbeConfig::default())?;
    println!("bag of embeddings:         {:.1}%", 100.0 * report.accuracy);
    Ok(())
}
