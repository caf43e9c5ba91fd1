//! `iceedit` command-line driver and HTTP service.

pub mod service;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use iceedit_core::engines::LossKind;
use iceedit_core::harness::{
    load_corpus, load_engines, make_corpus, run_cross_validation, run_seed_repeats, run_sequential_experiment,
    run_single_edit_experiment, save_engine, spread_to_csv, train_engines, write_outputs, Aggregation, EngineId,
    ExperimentConfig,
};
use iceedit_core::metrics::{MetricReport, Weighting};
use iceedit_core::phantom::load_case;
use iceedit_core::session::{Session, SessionLog};
use iceedit_core::Error;

#[derive(Parser, Debug)]
#[command(name = "iceedit", version, about = "Scribble-driven editing of sparse volumetric segmentations")]
pub struct Cli {
    /// Experiment config (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the experiment and the corpus seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; corpus, models and reports live below it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic corpus management.
    Corpus {
        #[command(subcommand)]
        action: CorpusCmd,
    },
    /// Train one engine on the training split and save its checkpoint.
    Train(TrainArgs),
    /// Evaluate engines on the test split.
    Eval {
        #[command(subcommand)]
        mode: EvalCmd,
    },
    /// Run the interactive editing service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
pub enum CorpusCmd {
    /// Generate the train/test corpus into `<out>/corpus`.
    Make {
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub loss: LossKind,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct Sources {
    /// Corpus directory (default `<out>/corpus`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint root (default `<out>/models`).
    #[arg(long)]
    pub models: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    /// One edit per test case.
    Single {
        #[command(flatten)]
        sources: Sources,
        /// Comma-separated engine list overriding the config.
        #[arg(long, value_delimiter = ',')]
        engines: Option<Vec<EngineId>>,
        /// Average per-case p95 instead of pooling points.
        #[arg(long)]
        per_case: bool,
        /// Unweighted distances inside each region.
        #[arg(long)]
        raw_distances: bool,
        /// Also run k-fold cross-validation on the training split.
        #[arg(long)]
        cv_folds: Option<usize>,
        /// Also regenerate, retrain and evaluate with this many consecutive
        /// seeds and report the spread.
        #[arg(long)]
        seed_repeats: Option<usize>,
    },
    /// Repeated edits per test case.
    Sequential {
        #[command(flatten)]
        sources: Sources,
        #[arg(long, value_delimiter = ',')]
        engines: Option<Vec<EngineId>>,
        #[arg(long)]
        edits: Option<usize>,
    },
    /// Re-run a recorded session log and print its per-iteration metrics.
    Replay {
        #[command(flatten)]
        sources: Sources,
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, env = "ICEEDIT_BIND", default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Directory of case bundles (default `<out>/corpus`).
    #[arg(long, env = "ICEEDIT_CASES")]
    pub cases: Option<PathBuf>,
    /// Checkpoint root (default `<out>/models`).
    #[arg(long, env = "ICEEDIT_CHECKPOINTS")]
    pub checkpoints: Option<PathBuf>,
    /// Write replayable scribble logs here.
    #[arg(long, env = "ICEEDIT_SESSIONS")]
    pub sessions: Option<PathBuf>,
    /// Static assets served outside `/api`.
    #[arg(long, env = "ICEEDIT_STATIC")]
    pub static_dir: Option<PathBuf>,
}

/// Config errors exit with 2, missing or corrupt artifacts with 3 and
/// numerical failures with 4.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 4,
        Some(
            Error::MissingArtifact(_)
            | Error::MissingMember(_)
            | Error::Checksum(_)
            | Error::Truncated { .. }
            | Error::VersionMismatch { .. },
        ) => 3,
        Some(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => 3,
        Some(Error::Io(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

pub struct Layout {
    pub corpus: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Layout {
    fn new(root: &Path, sources: Option<&Sources>) -> Self {
        Self {
            corpus: sources.and_then(|s| s.corpus.clone()).unwrap_or_else(|| root.join("corpus")),
            models: sources.and_then(|s| s.models.clone()).unwrap_or_else(|| root.join("models")),
            reports: root.join("reports"),
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json_file(p).map_err(|e| match e {
            Error::Io(io) => Error::InvalidParams(format!("cannot read config {}: {io}", p.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.corpus.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_row(out: &mut String, label: &str, r: &MetricReport) {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let _ = writeln!(
        out,
        "{label},{:.6},{:.6},{},{},{},{}",
        r.overall_p95_mm,
        r.overall_mean_mm,
        opt(r.near_p95_mm),
        opt(r.near_mean_mm),
        opt(r.far_p95_mm),
        opt(r.far_mean_mm)
    );
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let root = cfg.output_dir.clone();
    match cli.command {
        Command::Corpus {
            action: CorpusCmd::Make { force },
        } => {
            let layout = Layout::new(&root, None);
            let m = make_corpus(&cfg.corpus, &layout.corpus, force)?;
            println!("wrote {} train and {} test cases to {}", m.train.len(), m.test.len(), layout.corpus.display());
        }
        Command::Train(args) => {
            let layout = Layout::new(
                &root,
                Some(&Sources {
                    corpus: args.corpus,
                    models: None,
                }),
            );
            if let Some(e) = args.epochs {
                cfg.train.epochs = e;
            }
            let id = EngineId::from_loss(args.loss);
            cfg.engines = vec![id];
            cfg.validate()?;
            let (_, corpus) = load_corpus(&layout.corpus)?;
            let mut losses = String::from("epoch,loss\n");
            let engines = train_engines(&cfg, &corpus.train, |_, epoch, loss| {
                tracing::info!(engine = %id, epoch, loss, "epoch done");
                let _ = writeln!(losses, "{epoch},{loss:e}");
            })?;
            save_engine(&cfg, &engines[0], &layout.models)?;
            fs::create_dir_all(&layout.reports)?;
            fs::write(layout.reports.join(format!("train_{id}.csv")), losses)?;
            println!("saved {id} checkpoint to {}", layout.models.join(args.loss.as_str()).display());
        }
        Command::Eval { mode } => match mode {
            EvalCmd::Single {
                sources,
                engines,
                per_case,
                raw_distances,
                cv_folds,
                seed_repeats,
            } => {
                let layout = Layout::new(&root, Some(&sources));
                if let Some(e) = engines {
                    cfg.engines = e;
                }
                if per_case {
                    cfg.aggregation = Aggregation::PerCase;
                }
                if raw_distances {
                    cfg.weighting = Weighting::Hard;
                }
                if let Some(k) = cv_folds {
                    cfg.cv_folds = k;
                }
                cfg.validate()?;
                let (_, corpus) = load_corpus(&layout.corpus)?;
                let engines = load_engines(&cfg, &layout.models)?;
                let result = run_single_edit_experiment(&cfg, &corpus.test, &engines)?;
                write_outputs(&layout.reports, "single_edit", &result.to_csv(), &result)?;
                print!("{}", result.to_csv());
                if cfg.cv_folds > 0 {
                    let folds = run_cross_validation(&cfg, &corpus.train)?;
                    write_outputs(&layout.reports, "single_edit_cv", &spread_to_csv(&folds), &folds)?;
                    print!("{}", spread_to_csv(&folds));
                }
                if let Some(n) = seed_repeats {
                    let runs = run_seed_repeats(&cfg, n)?;
                    write_outputs(&layout.reports, "single_edit_seeds", &spread_to_csv(&runs), &runs)?;
                    print!("{}", spread_to_csv(&runs));
                }
            }
            EvalCmd::Sequential { sources, engines, edits } => {
                let layout = Layout::new(&root, Some(&sources));
                if let Some(e) = engines {
                    cfg.engines = e;
                }
                if let Some(n) = edits {
                    cfg.n_sequential_edits = n;
                }
                cfg.validate()?;
                let (_, corpus) = load_corpus(&layout.corpus)?;
                let engines = load_engines(&cfg, &layout.models)?;
                let result = run_sequential_experiment(&cfg, &corpus.test, &engines)?;
                write_outputs(&layout.reports, "sequential", &result.to_csv(), &result)?;
                let mut summary = String::from("engine,t,median_cas_p95_mm\n");
                for e in &engines {
                    for (t, v) in result.median_curve(e.id).iter().enumerate() {
                        let _ = writeln!(summary, "{},{t},{v:.6}", e.id);
                    }
                }
                fs::write(layout.reports.join("sequential_median.csv"), &summary)?;
                print!("{summary}");
            }
            EvalCmd::Replay { sources, log } => {
                let layout = Layout::new(&root, Some(&sources));
                let log: SessionLog = serde_json::from_slice(
                    &fs::read(&log).with_context(|| format!("reading session log {}", log.display()))?,
                )
                .map_err(Error::from)?;
                let case_dir = layout.corpus.join(&log.case);
                if !case_dir.join("manifest.json").exists() {
                    return Err(Error::MissingArtifact(format!("case {} ({})", log.case, case_dir.display())).into());
                }
                let case = Arc::new(load_case(&case_dir)?);
                cfg.engines = vec![log.engine];
                let engine = load_engines(&cfg, &layout.models)?.remove(0).engine;
                let session = Session::replay(&log, case, Arc::new(engine))?;
                let metrics = session.metrics();
                let mut out =
                    String::from("t,frame_id,overall_p95_mm,overall_mean_mm,near_p95_mm,near_mean_mm,far_p95_mm,far_mean_mm\n");
                for it in &metrics.iterations {
                    report_row(&mut out, &format!("{},{}", it.t, it.frame_id), &it.metrics);
                }
                write_outputs(&layout.reports, "replay", &out, &metrics)?;
                print!("{out}");
            }
        },
        Command::Serve(args) => {
            let layout = Layout::new(&root, None);
            let mut config = service::ServiceConfig::new(args.cases.unwrap_or(layout.corpus));
            config.checkpoint_dir = Some(args.checkpoints.unwrap_or(layout.models));
            config.session_dir = args.sessions;
            config.edit = cfg.edit;
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(service::serve(config, &args.bind, args.static_dir))?;
        }
    }
    Ok(())
}
