//! Interleaving each segment feature with the embedding of its matched KB
//! step doubles the sequence length and lets the transformer read clean
//! step identities next to noisy visual features.

use stepweld::harness::{kb_pair_task, KbPairSpec};
use stepweld::longterm::{
    build_input, evaluate_samples, train_longterm, InputMode, LongtermSample, LongtermTrainConfig, TransformerSpec,
};

fn main() -> stepweld::Result<()> {
    let spec = KbPairSpec::default();
    let task = kb_pair_task(&spec)?;
    let cfg = LongtermTrainConfig {
        epochs: 30,
        ..Default::default()
    };
    for input in [InputMode::Basic, InputMode::KbTransfer] {
        let samples = |set: &[(stepweld::longterm::StepEmbeddingSequence, usize)]| {
            set.iter()
                .map(|(s, c)| Ok(LongtermSample { tokens: build_input(s, input)?, label: *c }))
                .collect::<stepweld::Result<Vec<_>>>()
        };
        let (train, test) = (samples(&task.train)?, samples(&task.test)?);
        let tspec = TransformerSpec::small(spec.classes).native(spec.steps);
        let model = train_longterm(tspec, &train, &cfg)?.model;
        let acc = evaluate_samples(&model, &test)?.accuracy;
        println!("{input:?}: {} tokens per sample, accuracy {:.1}%", train[0].tokens.len(), 100.0 * acc);
    }
    Ok(())
}
