//! The end-to-end runner: source, embed, assign, segment model, feature
//! extraction, probes, long-term transformer and forecasting.
//!
//! Each stage digest covers its upstream digests and its own config
//! subtree, so editing one section or one input byte only invalidates the
//! stages that depend on it.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{de::DeserializeOwned, Serialize};

use super::cache::{Cache, DigestBuilder};
use super::config::{ModeName, PipelineConfig, SourceConfig};
use super::data::{ExperimentData, Split, EXPERIMENT_FILES};
use super::downstream::{attach_kb, classify_videos, forecast_steps};
use super::report::{rank_modes, ComparisonRow, ExperimentReport, Metrics, StageRecord};
use super::synthetic::generate_synthetic;
use crate::assignment::{assign_corpus, recovery_rate, Assignment, AssignmentConfig, LabelSpace};
use crate::embedding::{embed_keyed, embed_texts, hash_provider, EmbeddingTable};
use crate::error::{Error, Result};
use crate::longterm::{linear_probe, retrieve_step, InputMode, StepEmbeddingSequence};
use crate::math::Matrix;
use crate::segment_model::{self, Objective, SegmentDataset, SegmentModel, SegmentModelSpec, SegmentTrainConfig};

/// Runs with the cache directory from the config or `STEPWELD_CACHE_DIR`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<ExperimentReport> {
    run_pipeline_with_cache(config, &Cache::new(config.resolved_cache_dir()))
}

pub fn run_pipeline_with_cache(config: &PipelineConfig, cache: &Cache) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let mut runner = Runner {
        config,
        cache,
        stages: Vec::new(),
    };
    let (data, source_digest) = runner.source()?;
    let (steps, narrations, embed_digest) = runner.embed(&data, &source_digest)?;
    let raw: Vec<Matrix> = data
        .downstream
        .iter()
        .map(|v| v.features(&data.downstream_features))
        .collect::<Result<_>>()?;
    let ctx = Context {
        data: &data,
        source_digest: &source_digest,
        embed_digest: &embed_digest,
        steps: &steps,
        narrations: &narrations,
        raw: &raw,
    };

    let raw_probe = runner.raw_probe(&ctx)?;
    let modes = config.modes();
    let primary = runner.mode(&ctx, modes[0])?;
    let task_accuracy = runner.longterm(&ctx, &primary, config.longterm.mode)?;
    let forecast_accuracy = if config.longterm.forecast {
        runner.forecast(&ctx, &primary)?
    } else {
        None
    };

    let mut comparison = Vec::new();
    if modes.len() > 1 {
        for (i, &mode) in modes.iter().enumerate() {
            let run = if i == 0 { None } else { Some(runner.mode(&ctx, mode)?) };
            let run = run.as_ref().unwrap_or(&primary);
            let task = if i == 0 && config.longterm.mode == InputMode::Basic {
                task_accuracy
            } else {
                runner.longterm(&ctx, run, InputMode::Basic)?
            };
            comparison.push(ComparisonRow {
                mode: mode.as_str().into(),
                assignment_recovery: run.recovery,
                probe_accuracy: run.probe,
                task_accuracy: task,
            });
        }
    }
    let ranking = rank_modes(&comparison);

    let mut seeds = BTreeMap::new();
    seeds.insert("pipeline".to_string(), config.seed);
    seeds.insert("embed".to_string(), config.embed.seed);
    seeds.insert("probe".to_string(), config.probe.seed);
    if let SourceConfig::Synthetic(s) = &config.source {
        seeds.insert("source".to_string(), s.seed);
    }
    let mut digest_config = config.clone();
    digest_config.cache_dir = None;
    let config_digest = DigestBuilder::new("config")
        .upstream(&source_digest)
        .config(&digest_config)?
        .finish();

    Ok(ExperimentReport {
        config_digest,
        seeds,
        metrics: Metrics {
            assignment_recovery: primary.recovery,
            probe_accuracy: primary.probe,
            raw_probe_accuracy: raw_probe,
            task_accuracy,
            forecast_accuracy,
        },
        comparison,
        ranking,
        stages: runner.stages,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Loads or generates the experiment data named by `config.source`.
pub fn load_source(config: &PipelineConfig) -> Result<ExperimentData> {
    match &config.source {
        SourceConfig::Synthetic(spec) => generate_synthetic(spec),
        SourceConfig::Files { dir } => ExperimentData::load_dir(dir),
    }
}

struct Runner<'a> {
    config: &'a PipelineConfig,
    cache: &'a Cache,
    stages: Vec<StageRecord>,
}

struct Context<'a> {
    data: &'a ExperimentData,
    source_digest: &'a str,
    embed_digest: &'a str,
    steps: &'a EmbeddingTable,
    narrations: &'a EmbeddingTable,
    raw: &'a [Matrix],
}

/// Everything downstream stages need from one supervision mode.
struct ModeRun {
    mode: ModeName,
    label_space: LabelSpace,
    segment_digest: String,
    model: SegmentModel,
    features: Vec<Matrix>,
    recovery: Option<f64>,
    probe: Option<f64>,
}

fn wrap(stage: &str, digest: &str, e: Error) -> Error {
    match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.to_string(),
            digest: digest.to_string(),
            source: Box::new(e),
        },
    }
}

fn json_encode<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(v)?)
}

fn json_decode<T: DeserializeOwned>(b: &[u8]) -> Result<T> {
    Ok(serde_json::from_slice(b)?)
}

impl Runner<'_> {
    fn record(&mut self, stage: &str, digest: &str, cache_hit: bool, t: Instant) {
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            digest: digest.to_string(),
            cache_hit,
            seconds: t.elapsed().as_secs_f64(),
        });
    }

    fn cached<T>(
        &mut self,
        stage: &str,
        digest: &str,
        compute: impl FnOnce() -> Result<T>,
        encode: impl Fn(&T) -> Result<Vec<u8>>,
        decode: impl Fn(&[u8]) -> Result<T>,
    ) -> Result<T> {
        let t = Instant::now();
        let dir = stage.replace(':', "-");
        if let Some(bytes) = self.cache.get(&dir, digest) {
            match decode(&bytes) {
                Ok(v) => {
                    self.record(stage, digest, true, t);
                    return Ok(v);
                }
                Err(e) => log::warn!("stage {stage}: unreadable cache entry ({e}); recomputing"),
            }
        }
        let v = compute().map_err(|e| wrap(stage, digest, e))?;
        let bytes = encode(&v).map_err(|e| wrap(stage, digest, e))?;
        if let Err(e) = self.cache.put(&dir, digest, &bytes) {
            log::warn!("stage {stage}: cache write failed: {e}");
        }
        self.record(stage, digest, false, t);
        Ok(v)
    }

    fn uncached<T>(&mut self, stage: &str, digest: &str, compute: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let v = compute().map_err(|e| wrap(stage, digest, e))?;
        self.record(stage, digest, false, t);
        Ok(v)
    }

    fn source(&mut self) -> Result<(ExperimentData, String)> {
        let mut b = DigestBuilder::new("source").config(&self.config.source)?;
        if let SourceConfig::Files { dir } = &self.config.source {
            for name in EXPERIMENT_FILES {
                let path = dir.join(name);
                if path.exists() {
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    b = b.bytes(name.as_bytes()).bytes(&bytes);
                }
            }
        }
        let digest = b.finish();
        let data = self.uncached("source", &digest, || load_source(self.config))?;
        Ok((data, digest))
    }

    fn embed(&mut self, data: &ExperimentData, source: &str) -> Result<(EmbeddingTable, EmbeddingTable, String)> {
        let cfg = &self.config.embed;
        let mut b = DigestBuilder::new("embed").upstream(source);
        match (&cfg.steps_table, &cfg.narrations_table) {
            (Some(s), Some(n)) => {
                for p in [s, n] {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    b = b.bytes(&bytes);
                }
            }
            _ => b = b.config(&(cfg.dim, cfg.seed))?,
        }
        let digest = b.finish();
        let (steps, narrs) = self.cached(
            "embed",
            &digest,
            || embed_stage(data, cfg),
            |(s, n)| {
                let s = s.to_bytes();
                let mut out = (s.len() as u64).to_le_bytes().to_vec();
                out.extend_from_slice(&s);
                out.extend_from_slice(&n.to_bytes());
                Ok(out)
            },
            |bytes| {
                let len = u64::from_le_bytes(
                    bytes
                        .get(..8)
                        .ok_or_else(|| Error::Format("short embed entry".into()))?
                        .try_into()
                        .expect("8 bytes"),
                ) as usize;
                let body = &bytes[8..];
                if len > body.len() {
                    return Err(Error::Format("short embed entry".into()));
                }
                Ok((EmbeddingTable::from_bytes(&body[..len])?, EmbeddingTable::from_bytes(&body[len..])?))
            },
        )?;
        Ok((steps, narrs, digest))
    }

    fn mode(&mut self, ctx: &Context, mode: ModeName) -> Result<ModeRun> {
        let config = self.config;
        let kb = &ctx.data.kb;
        let supervision = config.assign.supervision(mode, kb.num_steps(), config.seed);
        let assign_cfg = AssignmentConfig {
            k: config.assign.k,
            mode: supervision,
        };
        let stage = format!("assign:{}", mode.as_str());
        let assign_digest = DigestBuilder::new("assign")
            .upstream(ctx.embed_digest)
            .upstream(ctx.source_digest)
            .config(&assign_cfg)?
            .finish();
        let assignment: Assignment = self.cached(
            &stage,
            &assign_digest,
            || assign_corpus(&ctx.data.videos, ctx.narrations, ctx.steps, kb, &assign_cfg),
            json_encode,
            json_decode,
        )?;
        let recovery = match (&ctx.data.truth, assignment.label_space) {
            (Some(truth), LabelSpace::Steps) => Some(recovery_rate(&assignment.records, |r| {
                truth.get(&r.key()).copied().unwrap_or(usize::MAX)
            })),
            _ => None,
        };

        let stage = format!("segment:{}", mode.as_str());
        let segment_digest = DigestBuilder::new("segment")
            .upstream(&assign_digest)
            .upstream(ctx.source_digest)
            .config(&config.segment)?
            .config(&config.seed)?
            .finish();
        let model = self.cached(
            &stage,
            &segment_digest,
            || train_segment(config, ctx, &assignment),
            |m| m.to_bytes(),
            SegmentModel::from_bytes,
        )?;

        let stage = format!("extract:{}", mode.as_str());
        let features = self.uncached(&stage, &segment_digest, || {
            ctx.raw.iter().map(|x| model.features(x)).collect::<Result<Vec<_>>>()
        })?;

        let probe = if ctx.data.downstream.iter().all(|v| v.steps.is_some()) {
            let stage = format!("probe:{}", mode.as_str());
            let digest = DigestBuilder::new("probe")
                .upstream(&segment_digest)
                .upstream(ctx.source_digest)
                .config(&config.probe)?
                .finish();
            Some(self.cached(
                &stage,
                &digest,
                || step_probe(config, ctx.data, &features),
                json_encode,
                json_decode,
            )?)
        } else {
            None
        };

        Ok(ModeRun {
            mode,
            label_space: assignment.label_space,
            segment_digest,
            model,
            features,
            recovery,
            probe,
        })
    }

    fn raw_probe(&mut self, ctx: &Context) -> Result<Option<f64>> {
        if !ctx.data.downstream.iter().all(|v| v.steps.is_some()) {
            return Ok(None);
        }
        let digest = DigestBuilder::new("raw_probe")
            .upstream(ctx.source_digest)
            .config(&self.config.probe)?
            .finish();
        let config = self.config;
        self.cached(
            "raw_probe",
            &digest,
            || step_probe(config, ctx.data, ctx.raw),
            json_encode,
            json_decode,
        )
        .map(Some)
    }

    fn longterm(&mut self, ctx: &Context, run: &ModeRun, input: InputMode) -> Result<f64> {
        let config = self.config;
        let stage = match input {
            InputMode::Basic => format!("longterm:{}", run.mode.as_str()),
            _ => format!("longterm:{}:{}", run.mode.as_str(), input_name(input)),
        };
        let digest = DigestBuilder::new("longterm")
            .upstream(&run.segment_digest)
            .upstream(ctx.embed_digest)
            .upstream(ctx.source_digest)
            .config(&(&config.longterm.preset, config.longterm.window, config.longterm.clips))?
            .config(&(&config.longterm.optimizer, config.longterm.epochs, config.longterm.batch_size))?
            .config(&config.longterm.schedule)?
            .config(&input)?
            .config(&config.seed)?
            .finish();
        self.cached(
            &stage,
            &digest,
            || task_classification(config, ctx, run, input),
            json_encode,
            json_decode,
        )
    }

    fn forecast(&mut self, ctx: &Context, run: &ModeRun) -> Result<Option<f64>> {
        if !ctx.data.downstream.iter().all(|v| v.steps.is_some()) {
            return Ok(None);
        }
        let config = self.config;
        let stage = format!("forecast:{}", run.mode.as_str());
        let digest = DigestBuilder::new("forecast")
            .upstream(&run.segment_digest)
            .upstream(ctx.embed_digest)
            .upstream(ctx.source_digest)
            .config(&config.longterm)?
            .config(&config.seed)?
            .finish();
        self.cached(&stage, &digest, || forecast(config, ctx, run), json_encode, json_decode)
            .map(Some)
    }
}

fn input_name(m: InputMode) -> &'static str {
    match m {
        InputMode::Basic => "basic",
        InputMode::KbTransfer => "kb",
        InputMode::ForecastKb => "forecast_kb",
    }
}

fn embed_stage(data: &ExperimentData, cfg: &super::config::EmbedConfig) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let (steps, narrs) = match (&cfg.steps_table, &cfg.narrations_table) {
        (Some(s), Some(n)) => (EmbeddingTable::load(s)?, EmbeddingTable::load(n)?),
        _ => {
            let provider = hash_provider(cfg.dim, cfg.seed)?;
            let texts: Vec<&str> = data.kb.steps().iter().map(|s| s.text.as_str()).collect();
            let steps = embed_texts(&provider, &texts)?;
            let segments: Vec<_> = data
                .videos
                .iter()
                .flat_map(|v| &v.segments)
                .filter(|s| s.has_text())
                .collect();
            let keys = segments.iter().map(|s| s.key()).collect();
            let texts: Vec<&str> = segments.iter().map(|s| s.text.as_str()).collect();
            (steps, embed_keyed(&provider, keys, &texts)?)
        }
    };
    if steps.len() != data.kb.num_steps() {
        return Err(Error::DimensionMismatch {
            expected: data.kb.num_steps(),
            actual: steps.len(),
        });
    }
    if steps.dim() != narrs.dim() {
        return Err(Error::DimensionMismatch {
            expected: steps.dim(),
            actual: narrs.dim(),
        });
    }
    Ok((steps, narrs))
}

fn train_segment(config: &PipelineConfig, ctx: &Context, assignment: &Assignment) -> Result<SegmentModel> {
    let cfg = &config.segment;
    let objective = cfg.objective()?;
    let dataset = SegmentDataset::from_assignment(assignment, &ctx.data.features)?;
    let input_dim = ctx.data.features.dim();
    let spec = match objective {
        Objective::StepNce { .. } => {
            if assignment.label_space != LabelSpace::Steps {
                return Err(Error::Config("the NCE objective needs step supervision".into()));
            }
            if cfg.embed_dim.is_some_and(|d| d != ctx.steps.dim()) {
                return Err(Error::Config(format!(
                    "NCE regresses onto the {}-wide step table; segment.embed_dim differs",
                    ctx.steps.dim()
                )));
            }
            SegmentModelSpec::regressor(input_dim, ctx.steps.dim())
        }
        _ => SegmentModelSpec::classifier(
            input_dim,
            cfg.embed_dim.unwrap_or(ctx.steps.dim()),
            assignment.num_classes,
        ),
    }
    .with_trunk(cfg.trunk);
    let train_cfg = SegmentTrainConfig {
        objective,
        optimizer: cfg.optimizer,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: config.seed,
        schedule: cfg.schedule.clone(),
        parallel: true,
    };
    Ok(segment_model::train(spec, &dataset, Some(ctx.steps), &train_cfg)?.model)
}

/// Per-segment step probe on downstream features, train split against
/// test split.
fn step_probe(config: &PipelineConfig, data: &ExperimentData, features: &[Matrix]) -> Result<f64> {
    let split_rows = |split: Split| -> Result<(Matrix, Vec<Option<usize>>)> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (v, f) in data.downstream.iter().zip(features) {
            if v.split != split {
                continue;
            }
            let steps = v.steps.as_ref().expect("checked by caller");
            for (i, &g) in steps.iter().enumerate() {
                rows.push(f.row(i).to_vec());
                labels.push(Some(g));
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid(format!("downstream {split:?} split is empty")));
        }
        Ok((Matrix::from_rows(&rows)?, labels))
    };
    let (train_x, train_y) = split_rows(Split::Train)?;
    let (test_x, test_y) = split_rows(Split::Test)?;
    let (_, report) = linear_probe(&train_x, &train_y, &test_x, &test_y, data.kb.num_steps(), &config.probe)?;
    Ok(report.accuracy)
}

/// Downstream sequences of `f(x)`, with KB vectors attached for KB inputs.
fn sequences(ctx: &Context, run: &ModeRun, input: InputMode) -> Result<Vec<StepEmbeddingSequence>> {
    if input != InputMode::Basic && run.label_space != LabelSpace::Steps {
        return Err(Error::Config(format!(
            "{} input retrieves KB steps and needs step supervision, not {}",
            input_name(input),
            run.mode.as_str()
        )));
    }
    let seqs = ctx
        .data
        .downstream
        .iter()
        .zip(&run.features)
        .map(|(v, f)| StepEmbeddingSequence::new(v.video_id.clone(), f.clone()))
        .collect::<Result<Vec<_>>>()?;
    if input == InputMode::Basic {
        return Ok(seqs);
    }
    let matched = ctx
        .raw
        .iter()
        .map(|x| {
            Ok(retrieve_step(&run.model, x, &ctx.data.kb, ctx.steps)?
                .into_iter()
                .map(|r| r.global_id)
                .collect())
        })
        .collect::<Result<Vec<Vec<usize>>>>()?;
    attach_kb(seqs, &matched, &ctx.data.kb, ctx.steps, input)
}

fn task_classification(config: &PipelineConfig, ctx: &Context, run: &ModeRun, input: InputMode) -> Result<f64> {
    let seqs = sequences(ctx, run, input)?;
    let (_, report) = classify_videos(
        &ctx.data.downstream,
        &seqs,
        ctx.data.downstream_classes,
        input,
        &config.downstream(),
    )?;
    Ok(report.accuracy)
}

fn forecast(config: &PipelineConfig, ctx: &Context, run: &ModeRun) -> Result<f64> {
    let input = config.longterm.forecast_mode;
    let seqs = sequences(ctx, run, input)?;
    let (_, report) = forecast_steps(&ctx.data.downstream, &seqs, ctx.data.kb.num_steps(), input, &config.downstream())?;
    Ok(report.accuracy)
}
