//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use stepweld::assignment::{distribution_from_similarities, StepDistribution, StepProb};
use stepweld::gradcheck;
use stepweld::harness::config::AssignConfig;
use stepweld::harness::{
    forecast_steps, generate_synthetic, kb_pair_task, order_task, run_pipeline_with_cache, Cache, DownstreamConfig,
    ExperimentReport, KbPairSpec, ModeName, OrderTaskSpec, PipelineConfig, SourceConfig, SyntheticSpec,
};
use stepweld::longterm::{
    build_input, evaluate_samples, forecast_samples, linear_probe, mean_pool, train_longterm, InputMode,
    LinearProbe, LongtermSample, LongtermTrainConfig, Positional, ProbeConfig, StepEmbeddingSequence, Token,
    Tokens, Transformer, TransformerSpec,
};
use stepweld::math::Matrix;
use stepweld::optim::OptimizerConfig;
use stepweld::segment_model::{
    loss_dist_match, loss_step_ce, loss_step_nce, sample_negatives, LossTarget, Negatives, SegmentModel,
    SegmentModelSpec, Trunk,
};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (&'static str, Option<Duration>, fn() -> Check);

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const RECOVERY_MIN: f64 = 0.90;
const PROBE_GAIN_MIN: f64 = 0.10;

fn gaussian(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let d = Normal::new(0.0, scale).unwrap();
    (0..n).map(|_| d.sample(r)).collect()
}

fn matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, gaussian(r, rows * cols, 1.0)).unwrap()
}

/// Neumaier-compensated sum.
fn exact_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn step_distribution_oracle() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut id_mismatch = 0;
    for trial in 0..1000 {
        let s = if trial % 10 == 0 { 10_588 } else { r.random_range(1..=10_588) };
        let k = r.random_range(1..=10usize.min(s));
        let scale = r.random_range(0.1..20.0);
        let mut sims = gaussian(&mut r, s, scale);
        if trial % 7 == 0 {
            // Coarse grid so that ties occur.
            sims.iter_mut().for_each(|x| *x = (*x * 2.0).round() / 2.0);
        }
        let got = distribution_from_similarities(&sims, 0, k)?;

        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        let top = &order[..k];
        let max = sims[order[0]];
        let kept = exact_sum(top.iter().map(|&i| (sims[i] - max).exp()));
        let total = exact_sum(sims.iter().map(|&x| (x - max).exp()));

        let ids: Vec<usize> = got.entries.iter().map(|e| e.global_id).collect();
        let mut a = ids.clone();
        let mut b = top.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            id_mismatch += 1;
            continue;
        }
        for e in &got.entries {
            let p = (sims[e.global_id] - max).exp() / kept;
            worst = worst.max((e.p - p).abs());
        }
        worst = worst.max((got.retained_mass - kept / total).abs());
    }
    Ok((
        id_mismatch == 0 && worst < 1e-9,
        format!("1000 vectors, S <= 10588: max |dp| {worst:.2e}, top-K id mismatches {id_mismatch}"),
    ))
}

fn random_dist(r: &mut ChaCha8Rng, classes: usize, k: usize) -> StepDistribution {
    let ids = rand::seq::index::sample(r, classes, k).into_vec();
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    StepDistribution {
        entries: ids.into_iter().zip(raw).map(|(global_id, p)| StepProb { global_id, p: p / total }).collect(),
        k,
        retained_mass: 1.0,
    }
}

fn segment_fd(model: &SegmentModel, x: &Matrix, target: &LossTarget) -> f64 {
    let analytic = model.loss_and_grad(x, target).unwrap().grad;
    let spec = *model.spec();
    gradcheck::check(
        |p| SegmentModel::from_params(spec, p.to_vec()).unwrap().loss_and_grad(x, target).unwrap().value,
        model.params(),
        &analytic,
        GRAD_H,
    )
}

fn gradient_suite() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 5];
    for trial in 0..100u64 {
        let kind = (trial % 5) as usize;
        let d_in = r.random_range(2..7);
        let d_emb = r.random_range(2..6);
        let classes = r.random_range(3..8);
        let n = r.random_range(1..5);
        let trunk = if r.random_bool(0.5) { Trunk::Linear } else { Trunk::Mlp { hidden: r.random_range(2..8) } };
        let err = match kind {
            0 | 1 => {
                let m = SegmentModel::new(SegmentModelSpec::classifier(d_in, d_emb, classes).with_trunk(trunk), trial)?;
                let x = matrix(&mut r, n, d_in);
                if kind == 0 {
                    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
                    segment_fd(&m, &x, &LossTarget::Ce(&labels))
                } else {
                    let k = r.random_range(1..=3);
                    let t: Vec<_> = (0..n).map(|_| random_dist(&mut r, classes, k)).collect();
                    segment_fd(&m, &x, &LossTarget::Dist(&t))
                }
            }
            2 => {
                let m = SegmentModel::new(SegmentModelSpec::regressor(d_in, d_emb).with_trunk(trunk), trial)?;
                let x = matrix(&mut r, n, d_in);
                let steps = matrix(&mut r, classes, d_emb);
                let pos: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
                let negatives = if r.random_bool(0.5) {
                    Negatives::All
                } else {
                    let mut nr = stepweld::math::rng(trial);
                    sample_negatives(&mut nr, &pos, classes, r.random_range(1..classes))?
                };
                let t = LossTarget::Nce {
                    positives: &pos,
                    steps: &steps,
                    negatives: &negatives,
                    include_positive: r.random_bool(0.5),
                };
                segment_fd(&m, &x, &t)
            }
            3 => {
                let heads = r.random_range(1..3);
                let spec = TransformerSpec {
                    input_dim: r.random_range(2..8),
                    d_model: heads * r.random_range(1..4),
                    heads,
                    ffn: r.random_range(2..9),
                    max_len: 6,
                    classes,
                    positional: if r.random_bool(0.5) { Positional::Learned } else { Positional::Zero },
                };
                let m = Transformer::new(spec, trial)?;
                let len = r.random_range(1..=spec.max_len);
                let null_at = r.random_bool(0.3).then(|| r.random_range(0..len));
                let tokens = Tokens::new(
                    (0..len)
                        .map(|i| {
                            if Some(i) == null_at && len > 1 {
                                Token::Null
                            } else {
                                Token::Vector(gaussian(&mut r, spec.input_dim, 1.0))
                            }
                        })
                        .collect(),
                );
                let label = r.random_range(0..classes);
                let (_, analytic) = m.loss_and_grad(&tokens, label)?;
                gradcheck::check(
                    |p| Transformer::from_params(spec, p.to_vec()).unwrap().loss_and_grad(&tokens, label).unwrap().0,
                    m.params(),
                    &analytic,
                    GRAD_H,
                )
            }
            _ => {
                let p = LinearProbe::new(classes, d_in, trial)?;
                let x = matrix(&mut r, n, d_in);
                let y: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
                let l2 = r.random_range(0.0..0.1);
                let (_, analytic) = p.loss_and_grad(&x, &y, l2)?;
                gradcheck::check(
                    |params| {
                        let mut q = p.clone();
                        q.params_mut().copy_from_slice(params);
                        q.loss_and_grad(&x, &y, l2).unwrap().0
                    },
                    p.params(),
                    &analytic,
                    GRAD_H,
                )
            }
        };
        worst[kind] = worst[kind].max(err);
    }
    let pass = worst.iter().all(|&e| e < GRAD_TOL);
    Ok((
        pass,
        format!(
            "100 trials, max rel err ce {:.1e} kl {:.1e} nce {:.1e} transformer {:.1e} probe {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    ))
}

fn loss_identities() -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut ce_gap = 0.0f64;
    let mut kl_self = 0.0f64;
    let mut nce_gap = 0.0f64;
    for _ in 0..200 {
        let classes = r.random_range(2..40);
        let n = r.random_range(1..6);
        let mut rows = Vec::new();
        for _ in 0..n {
            let logits = gaussian(&mut r, classes, 3.0);
            rows.push(stepweld::math::softmax(&logits));
        }
        let probs = Matrix::from_rows(&rows)?;
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let one_hot: Vec<_> = labels.iter().map(|&y| StepDistribution::one_hot(y)).collect();
        ce_gap = ce_gap.max((loss_dist_match(&probs, &one_hot)?.value - loss_step_ce(&probs, &labels)?).abs());

        let own: Vec<_> = rows
            .iter()
            .map(|p| StepDistribution {
                entries: p.iter().enumerate().map(|(global_id, &p)| StepProb { global_id, p }).collect(),
                k: classes,
                retained_mass: 1.0,
            })
            .collect();
        kl_self = kl_self.max(loss_dist_match(&probs, &own)?.value.abs());

        let dim = r.random_range(1..10);
        let steps = matrix(&mut r, classes, dim);
        let z = Matrix::zeros(n, dim);
        let nce = loss_step_nce(&z, &labels, &steps, &Negatives::All, false)?;
        nce_gap = nce_gap.max((nce - ((classes - 1) as f64).ln()).abs());
    }
    Ok((
        ce_gap < 1e-12 && kl_self < 1e-12 && nce_gap < 1e-12,
        format!("|KL(one-hot) - CE| {ce_gap:.1e}, |KL(P||P)| {kl_self:.1e}, |NCE(0) - ln(S-1)| {nce_gap:.1e}"),
    ))
}

fn planted_truth() -> Check {
    let report = run_pipeline_with_cache(&PipelineConfig::default(), &Cache::new(None))?;
    let m = report.metrics;
    let recovery = m.assignment_recovery.unwrap_or(0.0);
    let probe = m.probe_accuracy.unwrap_or(0.0);
    let raw = m.raw_probe_accuracy.unwrap_or(1.0);
    Ok((
        recovery >= RECOVERY_MIN && probe - raw >= PROBE_GAIN_MIN,
        format!(
            "recovery {:.1}% (>= {:.0}%), probe f(x) {:.1}% vs raw {:.1}% (gain {:+.1} >= {:.0} points)",
            100.0 * recovery,
            100.0 * RECOVERY_MIN,
            100.0 * probe,
            100.0 * raw,
            100.0 * (probe - raw),
            100.0 * PROBE_GAIN_MIN
        ),
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn supervision_ordering() -> Check {
    let mut per_mode: [Vec<f64>; 3] = Default::default();
    for seed in 0..5 {
        let mut config = PipelineConfig {
            seed,
            source: SourceConfig::Synthetic(SyntheticSpec {
                task_id_noise: 0.2,
                seed,
                ..Default::default()
            }),
            assign: AssignConfig {
                compare: vec![ModeName::Kmeans, ModeName::TaskId],
                ..Default::default()
            },
            ..Default::default()
        };
        config.longterm.forecast = false;
        let report = run_pipeline_with_cache(&config, &Cache::new(None))?;
        for (slot, name) in ["full", "kmeans", "task_id"].iter().enumerate() {
            let row = report
                .comparison
                .iter()
                .find(|c| c.mode == *name)
                .ok_or_else(|| format!("no {name} row"))?;
            per_mode[slot].push(row.task_accuracy);
        }
    }
    let [full, kmeans, task_id] = per_mode.map(median);
    Ok((
        full >= kmeans && full >= task_id,
        format!(
            "median task accuracy over 5 seeds: distant {:.1}%, kmeans {:.1}%, task-id {:.1}%",
            100.0 * full,
            100.0 * kmeans,
            100.0 * task_id
        ),
    ))
}

fn order_sensitivity() -> Check {
    let spec = OrderTaskSpec::default();
    let task = order_task(&spec)?;
    let cfg = LongtermTrainConfig {
        optimizer: OptimizerConfig::adamw(3e-3),
        epochs: 30,
        ..Default::default()
    };
    let mut acc = Vec::new();
    for positional in [Positional::Learned, Positional::Zero] {
        let mut tspec = TransformerSpec::small(2).native(spec.dim);
        tspec.positional = positional;
        let model = train_longterm(tspec, &task.train, &cfg)?.model;
        acc.push(evaluate_samples(&model, &task.test)?.accuracy);
    }
    let null = vec![0.0; spec.dim];
    let pool = |s: &[LongtermSample]| -> stepweld::Result<(Matrix, Vec<Option<usize>>)> {
        let rows: Vec<Vec<f64>> = s.iter().map(|x| mean_pool(&x.tokens, &null)).collect();
        Ok((Matrix::from_rows(&rows)?, s.iter().map(|x| Some(x.label)).collect()))
    };
    let (tx, ty) = pool(&task.train)?;
    let (vx, vy) = pool(&task.test)?;
    let bag = linear_probe(&tx, &ty, &vx, &vy, 2, &ProbeConfig::default())?.1.accuracy;
    Ok((
        acc[0] >= 0.95 && bag <= 0.60 && (acc[1] - 0.5).abs() <= 0.05,
        format!(
            "learned positions {:.1}% (>= 95), bag {:.1}% (<= 60), zero positions {:.1}% (50 +- 5)",
            100.0 * acc[0],
            100.0 * bag,
            100.0 * acc[1]
        ),
    ))
}

fn kb_transfer() -> Check {
    let mut lengths_ok = true;
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in 0..5 {
        let spec = KbPairSpec {
            seed,
            ..Default::default()
        };
        let task = kb_pair_task(&spec)?;
        let cfg = LongtermTrainConfig {
            epochs: 30,
            seed,
            ..Default::default()
        };
        let mut acc = Vec::new();
        for input in [InputMode::Basic, InputMode::KbTransfer] {
            let samples = |set: &[(StepEmbeddingSequence, usize)]| {
                set.iter()
                    .map(|(s, c)| {
                        let tokens = build_input(s, input)?;
                        let expect = if input == InputMode::Basic { s.len() } else { 2 * s.len() };
                        Ok((tokens.len() == expect, LongtermSample { tokens, label: *c }))
                    })
                    .collect::<stepweld::Result<Vec<_>>>()
            };
            let (train, test): (Vec<_>, Vec<_>) = (samples(&task.train)?, samples(&task.test)?);
            lengths_ok &= train.iter().chain(&test).all(|(ok, _)| *ok);
            let train: Vec<_> = train.into_iter().map(|(_, s)| s).collect();
            let test: Vec<_> = test.into_iter().map(|(_, s)| s).collect();
            let model = train_longterm(TransformerSpec::small(spec.classes).native(spec.steps), &train, &cfg)?.model;
            acc.push(evaluate_samples(&model, &test)?.accuracy);
        }
        pass &= acc[1] >= acc[0];
        rows.push(format!("{:.0}/{:.0}", 100.0 * acc[1], 100.0 * acc[0]));
    }
    Ok((
        pass && lengths_ok,
        format!(
            "2L' tokens {}, kb/basic accuracy per seed {}",
            if lengths_ok { "ok" } else { "WRONG" },
            rows.join(" ")
        ),
    ))
}

fn forecasting() -> Check {
    let mut history_ok = true;
    for len in 0..20 {
        for max_history in 0..10 {
            for s in forecast_samples(len, max_history) {
                history_ok &= !s.history.is_empty() && s.history.end == s.target && s.target < len;
            }
        }
    }
    let data = generate_synthetic(&SyntheticSpec {
        tasks: 6,
        variants: 1,
        noise: 0.2,
        scene: 0.0,
        downstream_per_class: 20,
        ..Default::default()
    })?;
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
    Ok((
        history_ok && report.accuracy == 1.0,
        format!(
            "history >= 1 for all samples: {history_ok}, deterministic-order accuracy {:.1}% over {} histories",
            100.0 * report.accuracy,
            report.n
        ),
    ))
}

fn run_cli(cache: &std::path::Path) -> Result<String, Box<dyn std::error::Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_stepweld"))
        .args(["run", "--format", "json"])
        .args(["--set", "source.tasks=4", "--set", "source.videos_per_task=10"])
        .args(["--set", "source.downstream_per_class=10", "--set", "longterm.epochs=4"])
        .args(["--set", "segment.epochs=5"])
        .env("STEPWELD_CACHE_DIR", cache)
        .output()?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned().into());
    }
    let report = ExperimentReport::from_json(&String::from_utf8_lossy(&out.stdout))?;
    Ok(serde_json::to_string(&report.summary())?)
}

fn determinism() -> Check {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let first = run_cli(a.path())?;
    let second = run_cli(b.path())?;
    Ok((first == second, format!("two uncached `stepweld run` summaries identical: {}", first == second)))
}

fn main() -> ExitCode {
    let checks: [Criterion; 9] = [
        ("step distribution oracle", Some(Duration::from_secs(30)), step_distribution_oracle),
        ("gradient suite", Some(Duration::from_secs(120)), gradient_suite),
        ("loss identities", None, loss_identities),
        ("planted-truth recovery", Some(Duration::from_secs(300)), planted_truth),
        ("supervision-mode ordering", None, supervision_ordering),
        ("order sensitivity", None, order_sensitivity),
        ("kb-transfer contract", None, kb_transfer),
        ("forecasting harness", None, forecasting),
        ("determinism", None, determinism),
    ];
    let mut failed = 0;
    for (name, limit, check) in checks {
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok((pass, detail)) => (pass, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = limit.is_none_or(|l| took <= l);
        let limit_note = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
        let ok = pass && in_time;
        failed += usize::from(!ok);
        println!(
            "{} {name}: {detail} [{:.1}s{limit_note}]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
