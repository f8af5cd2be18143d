//! Train the segment model on the same pseudo-labels with each objective:
//! cross-entropy on the argmax, KL to the top-3 distribution, and NCE
//! regression onto the step embeddings.

use stepweld::assignment::{assign_corpus, AssignmentConfig};
use stepweld::embedding::{embed_keyed, embed_texts, hash_provider};
use stepweld::harness::{generate_synthetic, SyntheticSpec};
use stepweld::math::argmax;
use stepweld::segment_model::{self, Objective, SegmentDataset, SegmentModelSpec, SegmentTrainConfig};

fn main() -> stepweld::Result<()> {
    let data = generate_synthetic(&SyntheticSpec {
        downstream_per_class: 2,
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
    let truth = data.truth.as_ref().expect("synthetic truth");

    for name in ["ce", "kl3", "nce", "nce:8"] {
        let objective: Objective = name.parse()?;
        let d_in = data.features.dim();
        let spec = match objective {
            Objective::StepNce { .. } => SegmentModelSpec::regressor(d_in, steps.dim()),
            _ => SegmentModelSpec::classifier(d_in, steps.dim(), data.kb.num_steps()),
        };
        let cfg = SegmentTrainConfig {
            objective,
            epochs: 15,
            ..Default::default()
        };
        let trained = segment_model::train(spec, &dataset, Some(&steps), &cfg)?;
        // Classifiers predict by head argmax; the regressor by the nearest
        // step embedding to f(x).
        let preds: Vec<usize> = match objective {
            Objective::StepNce { .. } => {
                let f = trained.model.features(&dataset.features)?;
                (0..f.rows())
                    .map(|i| {
                        let sims: Vec<f64> = (0..steps.len())
                            .map(|g| steps.row_f64(g).iter().zip(f.row(i)).map(|(a, b)| a * b).sum())
                            .collect();
                        argmax(&sims)
                    })
                    .collect()
            }
            _ => {
                let out = trained.model.forward(&dataset.features)?;
                out.head_output().iter_rows().map(argmax).collect()
            }
        };
        let hits = preds
            .iter()
            .zip(&dataset.ids)
            .filter(|(p, id)| **p == truth[*id])
            .count();
        println!(
            "{name:<6} loss {:.4} -> {:.4}   step accuracy {:.1}%",
            trained.loss_curve[0],
            trained.loss_curve.last().copied().unwrap_or(f64::NAN),
            100.0 * hits as f64 / preds.len() as f64
        );
    }
    Ok(())
}
