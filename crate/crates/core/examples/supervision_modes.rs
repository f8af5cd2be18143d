//! The four label sources side by side on a corpus whose task ids are
//! partly wrong: steps from the whole KB, steps of the claimed task only,
//! the task id itself, and k-means clusters of the narrations.

use stepweld::assignment::{assign_corpus, recovery_rate, AssignmentConfig, SupervisionMode};
use stepweld::embedding::{embed_keyed, embed_texts, hash_provider};
use stepweld::harness::{generate_synthetic, SyntheticSpec};

fn main() -> stepweld::Result<()> {
    let data = generate_synthetic(&SyntheticSpec {
        task_id_noise: 0.2,
        downstream_per_class: 2,
        ..Default::default()
    })?;
    let provider = hash_provider(256, 0)?;
    let step_texts: Vec<&str> = data.kb.steps().iter().map(|s| s.text.as_str()).collect();
    let steps = embed_texts(&provider, &step_texts)?;
    let segs: Vec<_> = data.videos.iter().flat_map(|v| &v.segments).collect();
    let texts: Vec<&str> = segs.iter().map(|s| s.text.as_str()).collect();
    let narrs = embed_keyed(&provider, segs.iter().map(|s| s.key()).collect(), &texts)?;
    let truth = data.truth.as_ref().expect("synthetic truth");

    let modes = [
        ("full", SupervisionMode::Full),
        ("task_restricted", SupervisionMode::TaskRestricted),
        ("task_id", SupervisionMode::TaskId),
        ("kmeans", SupervisionMode::AsrKmeans { clusters: data.kb.num_steps(), iters: 50, seed: 0 }),
    ];
    for (name, mode) in modes {
        let a = assign_corpus(&data.videos, &narrs, &steps, &data.kb, &AssignmentConfig { k: 3, mode })?;
        let line = match name {
            "full" | "task_restricted" => {
                format!("step recovery {:.1}%", 100.0 * recovery_rate(&a.records, |r| truth[&r.key()]))
            }
            "task_id" => {
                let right = recovery_rate(&a.records, |r| data.kb.steps()[truth[&r.key()]].task_id);
                format!("task label correct for {:.1}% of segments", 100.0 * right)
            }
            _ => String::from("cluster ids carry no step identity"),
        };
        println!("{name:<16} {:?} space, {:>3} classes  {line}", a.label_space, a.num_classes);
    }
    Ok(())
}
