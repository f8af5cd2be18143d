//! A linear probe of step identity on raw segment features and on the
//! learned embedding f(x), with few and many labeled examples per step.

use stepweld::assignment::{assign_corpus, AssignmentConfig};
use stepweld::embedding::{embed_keyed, embed_texts, hash_provider};
use stepweld::harness::{generate_synthetic, Split, SyntheticSpec};
use stepweld::longterm::{linear_probe, ProbeConfig};
use stepweld::math::Matrix;
use stepweld::segment_model::{self, SegmentDataset, SegmentModelSpec, SegmentTrainConfig};

fn main() -> stepweld::Result<()> {
    let data = generate_synthetic(&SyntheticSpec {
        downstream_per_class: 10,
        ..Default::default()
    })?;
    let provider = hash_provider(64, 0)?;
    let step_texts: Vec<&str> = data.kb.steps().iter().map(|s| s.text.as_str()).collect();
    let steps = embed_texts(&provider, &step_texts)?;
    let segs: Vec<_> = data.videos.iter().flat_map(|v| &v.segments).collect();
    let texts: Vec<&str> = segs.iter().map(|s| s.text.as_str()).collect();
    let narrs = embed_keyed(&provider, segs.iter().map(|s| s.key()).collect(), &texts)?;
    let assignment = assign_corpus(&data.videos, &narrs, &steps, &data.kb, &AssignmentConfig::default())?;
    let dataset = SegmentDataset::from_assignment(&assignment, &data.features)?;
    let spec = SegmentModelSpec::classifier(data.features.dim(), steps.dim(), data.kb.num_steps());
    let model = segment_model::train(spec, &dataset, Some(&steps), &SegmentTrainConfig::default())?.model;

    let split = |split: Split| -> stepweld::Result<(Matrix, Vec<Option<usize>>)> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for v in data.downstream.iter().filter(|v| v.split == split) {
            let x = v.features(&data.downstream_features)?;
            for (i, &g) in v.steps.as_deref().unwrap_or_default().iter().enumerate() {
                rows.push(x.row(i).to_vec());
                labels.push(Some(g));
            }
        }
        Ok((Matrix::from_rows(&rows)?, labels))
    };
    let (train_x, train_y) = split(Split::Train)?;
    let (test_x, test_y) = split(Split::Test)?;
    let (train_f, test_f) = (model.features(&train_x)?, model.features(&test_x)?);

    println!("{:>6}  {:>8}  {:>8}", "shots", "raw", "f(x)");
    for shots in [Some(1), Some(4), None] {
        let cfg = ProbeConfig { shots, ..Default::default() };
        let classes = data.kb.num_steps();
        let raw = linear_probe(&train_x, &train_y, &test_x, &test_y, classes, &cfg)?.1.accuracy;
        let learned = linear_probe(&train_f, &train_y, &test_f, &test_y, classes, &cfg)?.1.accuracy;
        let label = shots.map_or("all".to_string(), |s| s.to_string());
        println!("{label:>6}  {:>7.1}%  {:>7.1}%", 100.0 * raw, 100.0 * learned);
    }
    Ok(())
}
