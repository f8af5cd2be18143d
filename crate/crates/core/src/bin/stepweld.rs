use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stepweld::assignment::{
    assign_corpus, read_labels_jsonl, write_labels_jsonl, Assignment, AssignmentConfig, LabelSpace, SupervisionMode,
};
use stepweld::corpus::{load_knowledge_base, load_segments, load_transcript_dir, write_segments_jsonl, KnowledgeBase};
use stepweld::embedding::{embed_keyed, hash_provider, load_texts, EmbeddingProvider, EmbeddingTable, LookupProvider};
use stepweld::harness::{
    attach_kb, classify_videos, forecast_steps, generate_synthetic, read_downstream_jsonl, run_pipeline,
    DownstreamConfig, DownstreamVideo, ExperimentReport, PipelineConfig, ReportFormat, SourceConfig,
};
use stepweld::longterm::{retrieve_step, InputMode, LongtermTrainConfig};
use stepweld::math::Matrix;
use stepweld::optim::OptimizerConfig;
use stepweld::segment_model::{self, Objective, SegmentDataset, SegmentModel, SegmentModelSpec, SegmentTrainConfig, Trunk};
use stepweld::{Error, Result};

#[derive(Parser)]
#[command(name = "stepweld", version, about = "Distant supervision of procedural steps in narrated video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a knowledge base and write it as JSONL.
    IngestKb {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a directory of transcripts into segments JSONL.
    IngestAsr {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "srt")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        /// JSONL of `{"video_id", "task_id"}` search-keyword labels.
        #[arg(long)]
        task_ids: Option<PathBuf>,
    },
    /// Embed texts into an EMB1 table.
    Embed {
        #[arg(long, value_enum, default_value_t = Provider::Hash)]
        provider: Provider,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        l2_normalize: bool,
        /// Precomputed table for the file provider.
        #[arg(long, required_if_eq("provider", "file"))]
        table: Option<PathBuf>,
        /// texts.jsonl whose records are the rows of `--table`, in order.
        #[arg(long, required_if_eq("provider", "file"))]
        table_texts: Option<PathBuf>,
    },
    /// Pseudo-label narrated segments against the knowledge base.
    Assign {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        steps: PathBuf,
        #[arg(long)]
        narrs: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "full")]
        mode: String,
        /// Cluster count for kmeans mode; defaults to the number of steps.
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segment model on pseudo-labels.
    TrainSegment {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value = "kl3")]
        objective: String,
        #[arg(long)]
        out: PathBuf,
        /// Step table; required for nce, and sets the default embedding width.
        #[arg(long)]
        steps: Option<PathBuf>,
        /// Knowledge base; sets the class count to its step count.
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
        /// Hidden width of a one-layer MLP trunk; linear when absent.
        #[arg(long)]
        mlp_hidden: Option<usize>,
        #[arg(long, value_enum, default_value_t = Opt::Sgd)]
        optimizer: Opt,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Map raw segment features through a trained segment model.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the long-term transformer and print held-out metrics as JSON.
    TrainLongterm {
        #[arg(long, value_enum, default_value_t = LtMode::Basic)]
        mode: LtMode,
        /// Step-embedding sequences keyed `video#i`.
        #[arg(long)]
        seqs: PathBuf,
        /// Downstream video records with labels and splits.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "small")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long)]
        steps: Option<PathBuf>,
        #[arg(long)]
        segment_model: Option<PathBuf>,
        /// Raw segment features used for step retrieval.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = stepweld::longterm::DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = 4)]
        clips: usize,
        #[arg(long, default_value_t = stepweld::longterm::DEFAULT_WINDOW)]
        history: usize,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment end to end.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `a.b=value` override; repeatable.
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Where to write the full report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Render a saved report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Write a synthetic experiment directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Synthetic spec override such as `tasks=20`; repeatable.
        #[arg(long = "set")]
        sets: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Hash,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adamw,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum LtMode {
    Basic,
    Kb,
    Forecast,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let (kb, report) = load_knowledge_base(path)?;
    if report.rejected_records > 0 {
        log::warn!("{}: rejected {} record(s)", path.display(), report.rejected_records);
    }
    Ok(kb)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::IngestKb { input, out } => {
            let kb = load_kb(&input)?;
            kb.save(&out)?;
            eprintln!("{} tasks, {} steps", kb.num_tasks(), kb.num_steps());
        }
        Command::IngestAsr {
            input,
            format,
            out,
            task_ids,
        } => {
            let (mut videos, warnings) = load_transcript_dir(&input, format.parse()?)?;
            if warnings.replaced_chars > 0 {
                log::warn!("replaced {} invalid UTF-8 sequence(s)", warnings.replaced_chars);
            }
            if let Some(path) = task_ids {
                let ids = read_task_ids(&path)?;
                for v in &mut videos {
                    v.task_id = ids.get(&v.video_id).copied();
                }
            }
            let mut w = create(&out)?;
            write_segments_jsonl(&videos, &mut w)?;
            w.flush()?;
            let n: usize = videos.iter().map(|v| v.segments.len()).sum();
            eprintln!("{} videos, {n} segments", videos.len());
        }
        Command::Embed {
            provider,
            d,
            seed,
            input,
            out,
            l2_normalize,
            table,
            table_texts,
        } => {
            let records = load_texts(&input)?;
            let provider: Box<dyn EmbeddingProvider> = match provider {
                Provider::Hash => Box::new(hash_provider(d, seed)?),
                Provider::File => {
                    let (table, texts) = (table.expect("required by clap"), table_texts.expect("required by clap"));
                    let source = EmbeddingTable::load(&table)?;
                    let texts: Vec<String> = load_texts(&texts)?.into_iter().map(|r| r.text).collect();
                    Box::new(LookupProvider::new(table.display().to_string(), &texts, &source)?)
                }
            };
            let ids = records.iter().map(|r| r.id.clone()).collect();
            let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
            let mut t = embed_keyed(provider.as_ref(), ids, &texts)?;
            if l2_normalize {
                t = t.l2_normalized();
            }
            t.save(&out)?;
            eprintln!("{} rows of width {}", t.len(), t.dim());
        }
        Command::Assign {
            kb,
            steps,
            narrs,
            segments,
            k,
            mode,
            clusters,
            seed,
            out,
        } => {
            let kb = load_kb(&kb)?;
            let steps = EmbeddingTable::load(&steps)?;
            let narrs = EmbeddingTable::load(&narrs)?;
            let videos = load_segments(&segments)?;
            let mode = match mode.as_str() {
                "full" => SupervisionMode::Full,
                "task-restricted" | "task_restricted" => SupervisionMode::TaskRestricted,
                "task-id" | "task_id" => SupervisionMode::TaskId,
                "kmeans" | "asr-kmeans" | "asr_kmeans" => SupervisionMode::AsrKmeans {
                    clusters: clusters.unwrap_or(kb.num_steps()),
                    iters: 50,
                    seed,
                },
                other => return Err(Error::Config(format!("unknown supervision mode {other:?}"))),
            };
            let a = assign_corpus(&videos, &narrs, &steps, &kb, &AssignmentConfig { k, mode })?;
            let mut w = create(&out)?;
            let kb_ref = (a.label_space == LabelSpace::Steps).then_some(&kb);
            write_labels_jsonl(&a.records, kb_ref, &mut w)?;
            w.flush()?;
            eprintln!("{} labeled, {} empty skipped", a.processed, a.skipped_empty);
        }
        Command::TrainSegment {
            labels,
            features,
            objective,
            out,
            steps,
            kb,
            classes,
            embed_dim,
            mlp_hidden,
            optimizer,
            lr,
            epochs,
            batch_size,
            seed,
        } => {
            let records = read_labels_jsonl(File::open(&labels).map_err(|e| Error::io(&labels, e))?)?;
            let features = EmbeddingTable::load(&features)?;
            let steps = steps.map(EmbeddingTable::load).transpose()?;
            let objective: Objective = objective.parse()?;
            let max_label = records
                .iter()
                .flat_map(|r| r.distribution.entries.iter().map(|e| e.global_id))
                .max()
                .map_or(0, |m| m + 1);
            let num_classes = match (classes, kb) {
                (Some(c), _) => c,
                (None, Some(path)) => load_kb(&path)?.num_steps(),
                (None, None) => max_label,
            };
            let assignment = Assignment {
                label_space: LabelSpace::Steps,
                num_classes,
                processed: records.len(),
                records,
                skipped_empty: 0,
            };
            let dataset = SegmentDataset::from_assignment(&assignment, &features)?;
            let language_dim = steps.as_ref().map(|s| s.dim());
            let spec = match objective {
                Objective::StepNce { .. } => {
                    let d = language_dim.ok_or_else(|| Error::Config("nce needs --steps".into()))?;
                    SegmentModelSpec::regressor(features.dim(), d)
                }
                _ => SegmentModelSpec::classifier(
                    features.dim(),
                    embed_dim.or(language_dim).unwrap_or(256),
                    num_classes,
                ),
            }
            .with_trunk(mlp_hidden.map_or(Trunk::Linear, |hidden| Trunk::Mlp { hidden }));
            let optimizer = match optimizer {
                Opt::Sgd => OptimizerConfig::sgd(lr.unwrap_or(0.05)).with_weight_decay(1e-4),
                Opt::Adamw => OptimizerConfig::adamw(lr.unwrap_or(1e-3)),
            };
            let cfg = SegmentTrainConfig {
                objective,
                optimizer,
                batch_size,
                epochs,
                seed,
                parallel: true,
                ..Default::default()
            };
            let trained = segment_model::train(spec, &dataset, steps.as_ref(), &cfg)?;
            trained.model.save(&out)?;
            let summary = serde_json::json!({
                "segments": dataset.len(),
                "final_loss": trained.loss_curve.last(),
                "clamped": trained.clamped,
            });
            println!("{summary}");
        }
        Command::Extract { model, features, out } => {
            let model = SegmentModel::load(&model)?;
            let table = EmbeddingTable::load(&features)?;
            let f = model.features(&table.to_matrix())?;
            let t = EmbeddingTable::from_matrix(table.ids().to_vec(), &f)?;
            t.save(&out)?;
            eprintln!("{} rows of width {}", t.len(), t.dim());
        }
        Command::TrainLongterm {
            mode,
            seqs,
            labels,
            preset,
            out,
            kb,
            steps,
            segment_model,
            features,
            window,
            clips,
            history,
            epochs,
            lr,
            batch_size,
            seed,
        } => {
            let table = EmbeddingTable::load(&seqs)?;
            let (videos, classes) =
                read_downstream_jsonl(File::open(&labels).map_err(|e| Error::io(&labels, e))?)?;
            let seqs = videos
                .iter()
                .map(|v| v.sequence(&table))
                .collect::<Result<Vec<_>>>()?;
            let retrieval = match (kb, steps, segment_model, features) {
                (Some(kb), Some(steps), Some(model), Some(features)) => Some((
                    load_kb(&kb)?,
                    EmbeddingTable::load(&steps)?,
                    SegmentModel::load(&model)?,
                    EmbeddingTable::load(&features)?,
                )),
                (None, None, None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "KB inputs need all of --kb, --steps, --segment-model and --features".into(),
                    ))
                }
            };
            let input = match (mode, &retrieval) {
                (LtMode::Basic, _) | (LtMode::Forecast, None) => InputMode::Basic,
                (LtMode::Kb, _) => InputMode::KbTransfer,
                (LtMode::Forecast, Some(_)) => InputMode::ForecastKb,
            };
            let seqs = match &retrieval {
                Some((kb, steps, model, features)) if input != InputMode::Basic => {
                    let matched = matched_steps(&videos, model, features, kb, steps)?;
                    attach_kb(seqs, &matched, kb, steps, input)?
                }
                None if input != InputMode::Basic => {
                    return Err(Error::Config("--mode kb needs --kb, --steps, --segment-model and --features".into()))
                }
                _ => seqs,
            };
            let cfg = DownstreamConfig {
                preset,
                window,
                clips,
                history,
                train: LongtermTrainConfig {
                    optimizer: OptimizerConfig::adamw(lr),
                    epochs,
                    batch_size,
                    seed,
                    parallel: true,
                    ..Default::default()
                },
            };
            let (model, report) = if mode == LtMode::Forecast {
                let num_steps = match &retrieval {
                    Some((kb, ..)) => kb.num_steps(),
                    None => forecast_classes(&videos),
                };
                forecast_steps(&videos, &seqs, num_steps, input, &cfg)?
            } else {
                classify_videos(&videos, &seqs, classes, input, &cfg)?
            };
            model.save(&out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Run {
            config,
            sets,
            out,
            format,
        } => {
            let format: ReportFormat = format.parse()?;
            let config = match config {
                Some(path) => PipelineConfig::load(&path, &sets)?,
                None => PipelineConfig::layered(None, &sets)?,
            };
            let report = run_pipeline(&config)?;
            if let Some(path) = out {
                report.save(&path)?;
            }
            print!("{}", report.render(format)?);
        }
        Command::Report { input, format } => {
            print!("{}", ExperimentReport::load(&input)?.render(format.parse()?)?);
        }
        Command::Generate { out, sets } => {
            let sets: Vec<String> = sets.iter().map(|s| format!("source.{s}")).collect();
            let config = PipelineConfig::layered(None, &sets)?;
            let SourceConfig::Synthetic(spec) = &config.source else {
                return Err(Error::Config("generate only writes synthetic sources".into()));
            };
            let data = generate_synthetic(spec)?;
            data.write_dir(&out)?;
            eprintln!(
                "{} steps, {} pretraining videos, {} downstream videos",
                data.kb.num_steps(),
                data.videos.len(),
                data.downstream.len()
            );
        }
    }
    Ok(())
}

fn read_task_ids(path: &Path) -> Result<std::collections::HashMap<String, usize>> {
    #[derive(serde::Deserialize)]
    struct Line {
        video_id: String,
        task_id: usize,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: Line = serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok((r.video_id, r.task_id))
        })
        .collect()
}

fn matched_steps(
    videos: &[DownstreamVideo],
    model: &SegmentModel,
    features: &EmbeddingTable,
    kb: &KnowledgeBase,
    steps: &EmbeddingTable,
) -> Result<Vec<Vec<usize>>> {
    videos
        .iter()
        .map(|v| {
            let x: Matrix = v.features(features)?;
            Ok(retrieve_step(model, &x, kb, steps)?
                .into_iter()
                .map(|r| r.global_id)
                .collect())
        })
        .collect()
}

fn forecast_classes(videos: &[DownstreamVideo]) -> usize {
    videos
        .iter()
        .filter_map(|v| v.steps.as_ref())
        .flatten()
        .max()
        .map_or(0, |m| m + 1)
}
