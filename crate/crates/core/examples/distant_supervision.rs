//! Score narrations against every knowledge-base step, keep the top-K of
//! the softmax, and measure how often the pseudo-label hits the hidden step
//! of a synthetic corpus.

use stepweld::assignment::{assign_corpus, recovery_rate, step_distribution, AssignmentConfig};
use stepweld::embedding::{embed_keyed, embed_texts, hash_provider, EmbeddingProvider};
use stepweld::harness::{generate_synthetic, SyntheticSpec};

fn main() -> stepweld::Result<()> {
    let data = generate_synthetic(&SyntheticSpec::default())?;
    let provider = hash_provider(256, 0)?;
    let step_texts: Vec<&str> = data.kb.steps().iter().map(|s| s.text.as_str()).collect();
    let steps = embed_texts(&provider, &step_texts)?;

    let video = &data.videos[0];
    for seg in video.segments.iter().take(3) {
        let narr = provider.embed(&seg.text)?;
        let dist = step_distribution(&narr, &steps, 3, None)?;
        println!("{:?}", seg.text);
        for e in &dist.entries {
            println!("  step {:>3} p={:.3}  {}", e.global_id, e.p, data.kb.steps()[e.global_id].text);
        }
        println!("  kept mass before renormalizing {:.3}", dist.retained_mass);
    }

    let segs: Vec<_> = data.videos.iter().flat_map(|v| &v.segments).collect();
    let keys = segs.iter().map(|s| s.key()).collect();
    let texts: Vec<&str> = segs.iter().map(|s| s.text.as_str()).collect();
    let narrs = embed_keyed(&provider, keys, &texts)?;
    let assignment = assign_corpus(&data.videos, &narrs, &steps, &data.kb, &AssignmentConfig::default())?;
    let truth = data.truth.as_ref().expect("synthetic corpora carry truth");
    let rate = recovery_rate(&assignment.records, |r| truth[&r.key()]);
    println!("\n{} segments labeled, recovery {:.1}%", assignment.processed, 100.0 * rate);
    Ok(())
}
