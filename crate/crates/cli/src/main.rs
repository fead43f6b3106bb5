use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ecif::contrastive::NegVariant;
use ecif::data::{PairId, SyntheticConfig};
use ecif::influence::{HessianMode, HessianSpec};
use ecif::model::{Anchor, Architecture, EncoderConfig, Temperature, DEFAULT_ANCHOR_GAIN};
use ecif::oracle::{Init, ProbeConfig, TrainConfig};
use ecif::workflow::{
    replay, run_job, DataSource, Format, Job, ModelSource, RetrainStart, ScoreMode, SegSource, Setup, SweepMode, TestSet,
    VerifyOptions,
};
use ecif::Error;

#[derive(Parser)]
#[command(name = "ecif", version, about = "Extended influence functions for contrastive encoders")]
struct Cli {
    /// Seed for data, batching and initialization.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Ridge coefficient for training and for the influence Hessian.
    #[arg(long, global = true, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, global = true, value_enum, default_value_t = VariantArg::FirstOrder)]
    variant: VariantArg,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Paper,
    FirstOrder,
}

impl From<VariantArg> for NegVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Paper => NegVariant::Paper,
            VariantArg::FirstOrder => NegVariant::FirstOrder,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Linear,
    Tanh,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreModeArg {
    Task,
    #[value(name = "self")]
    SelfIs,
    Relative,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepModeArg {
    Valuable,
    Harmful,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum EditArg {
    Remove,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    Gen(GenArgs),
    /// Train encoders and write a checkpoint.
    Train(TrainArgs),
    /// Positive and negative influence of a subset.
    Influence(InfluenceArgs),
    /// Per-pair influence scores.
    Scores(ScoresArgs),
    /// Rank training pairs for misalignment.
    Detect(DetectArgs),
    /// Training pairs most related to a mispredicted test pair.
    Traceback(TracebackArgs),
    /// Compare influence estimates with retraining.
    Verify(VerifyArgs),
    /// Remove top-ranked or random pairs, retrain, record test loss.
    Sweep(SweepArgs),
    /// Re-run the job recorded in a manifest.
    Replay(ReplayArgs),
}

fn parse_ids(list: &str) -> Result<Vec<PairId>, Error> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<PairId>().map_err(|e| Error::InvalidConfig(format!("bad pair id {s:?}: {e}"))))
        .collect()
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d_t: usize,
    #[arg(long, default_value_t = 8)]
    d_i: usize,
    #[arg(long, default_value_t = 4)]
    latent: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Fraction of pairs whose images are permuted and flagged.
    #[arg(long, default_value_t = 0.0)]
    misalign: f64,
    /// Sample stream; a different stream with the same seed shares the latent maps.
    #[arg(long, default_value_t = 0)]
    stream: u64,
    #[arg(long, default_value_t = 0)]
    id_offset: u64,
    /// Output file; defaults to dataset.jsonl in --out.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, value_enum, default_value_t = ArchArg::Linear)]
    arch: ArchArg,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long)]
    bias: bool,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long)]
    trainable_tau: bool,
    #[arg(long, default_value_t = DEFAULT_ANCHOR_GAIN)]
    anchor_gain: f64,
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 1e-7)]
    grad_tol: f64,
    #[arg(long, default_value_t = 50_000)]
    max_iters: usize,
    /// Scale of the Gaussian jitter around zero used as the initial point.
    #[arg(long, default_value_t = 1e-3)]
    init_scale: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    fit: FitArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to segmentation.json beside the checkpoint.
    #[arg(long)]
    segmentation: Option<PathBuf>,
    /// Solve with conjugate gradient instead of a dense factorization.
    #[arg(long)]
    cg: bool,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long, default_value_t = 8)]
    test_batch_size: usize,
}

#[derive(Args)]
struct InfluenceArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated pair ids of the removed subset; may be empty.
    #[arg(long, default_value = "")]
    ids: String,
    #[arg(long, value_enum)]
    edit: Option<EditArg>,
}

#[derive(Args)]
struct ScoresArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = ScoreModeArg::Task)]
    mode: ScoreModeArg,
    /// Test set; the training data itself when omitted.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    test_args: TestArgs,
    /// Comma-separated pairs to score; every training pair when omitted.
    #[arg(long)]
    ids: Option<String>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[command(flatten)]
    test_args: TestArgs,
    /// Rank by self influence instead of validation influence.
    #[arg(long = "self")]
    self_mode: bool,
}

#[derive(Args)]
struct TracebackArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    test_args: TestArgs,
    /// Id of the mispredicted test pair.
    #[arg(long)]
    pair: PairId,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// One removal set, comma-separated; repeat for several.
    #[arg(long = "remove")]
    remove: Vec<String>,
    /// Pairs removed one at a time, comma-separated.
    #[arg(long, value_delimiter = ',')]
    singles: Vec<PairId>,
    #[arg(long)]
    both_variants: bool,
    /// Retrain from the original initialization instead of the checkpoint.
    #[arg(long)]
    cold: bool,
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    test_args: TestArgs,
    #[arg(long)]
    no_bound: bool,
    /// Skip the surrogate retrain and Newton step.
    #[arg(long)]
    no_surrogate: bool,
    #[arg(long, default_value_t = 4)]
    probes: usize,
    #[arg(long, default_value_t = 0.1)]
    radius: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    test_args: TestArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1")]
    fractions: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "valuable,random")]
    modes: Vec<SweepModeArg>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    cold: bool,
}

#[derive(Args)]
struct ReplayArgs {
    manifest: PathBuf,
}

fn absolute(p: &Path) -> Result<PathBuf, Error> {
    std::path::absolute(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn file_source(p: &Path) -> Result<DataSource, Error> {
    Ok(DataSource::File { path: absolute(p)? })
}

impl Cli {
    fn format(&self) -> Format {
        match self.format {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }

    fn hessian(&self, cg: bool) -> HessianSpec {
        HessianSpec {
            mode: if cg { HessianMode::HvpCg } else { HessianMode::Dense },
            ..HessianSpec::with_delta(self.delta)
        }
    }

    fn train_config(&self, o: &OptimArgs) -> TrainConfig {
        TrainConfig {
            delta: self.delta,
            grad_tol: o.grad_tol,
            max_iters: o.max_iters,
            init: Init::Jitter {
                seed: self.seed,
                scale: o.init_scale,
            },
            ..TrainConfig::default()
        }
    }

    fn setup(&self, m: &ModelArgs) -> Result<Setup, Error> {
        let checkpoint = absolute(&m.checkpoint)?;
        let segmentation = match &m.segmentation {
            Some(s) => absolute(s)?,
            None => checkpoint.with_file_name("segmentation.json"),
        };
        Ok(Setup {
            data: file_source(&m.data)?,
            segmentation: SegSource::File { path: segmentation },
            model: ModelSource::Checkpoint { path: checkpoint },
            train: self.train_config(&m.optim),
        })
    }

    fn test_set(&self, path: &Path, t: &TestArgs) -> Result<TestSet, Error> {
        Ok(TestSet {
            data: file_source(path)?,
            batch_size: t.test_batch_size,
            seed: self.seed,
        })
    }

    /// The job and the directory it writes to.
    fn job(&self) -> Result<(Job, PathBuf), Error> {
        let variant: NegVariant = self.variant.into();
        let format = self.format();
        let job = match &self.command {
            Command::Replay(_) => unreachable!("handled by main"),
            Command::Gen(g) => {
                let (dir, file) = match &g.output {
                    Some(path) => {
                        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
                        let file = path
                            .file_name()
                            .ok_or_else(|| Error::InvalidConfig(format!("{} is not a file path", path.display())))?;
                        (dir, file.to_string_lossy().into_owned())
                    }
                    None => (self.out.clone(), "dataset.jsonl".to_string()),
                };
                let config = SyntheticConfig {
                    n: g.n,
                    latent_dim: g.latent,
                    d_t: g.d_t,
                    d_i: g.d_i,
                    noise_sigma: g.noise,
                    misalign_ratio: g.misalign,
                    seed: self.seed,
                    sample_stream: g.stream,
                    id_offset: g.id_offset,
                };
                config.validate()?;
                return Ok((Job::Gen { config, file }, dir));
            }
            Command::Train(t) => {
                let ds = ecif::data::load_jsonl(&t.data)?;
                let f = &t.fit;
                let encoder = EncoderConfig {
                    d_t: ds.d_t(),
                    d_i: ds.d_i(),
                    k: f.k,
                    architecture: match f.arch {
                        ArchArg::Linear => Architecture::Linear,
                        ArchArg::Tanh => Architecture::Tanh { hidden: f.hidden },
                    },
                    bias: f.bias,
                    temperature: if f.trainable_tau {
                        Temperature::Trainable { init: f.tau }
                    } else {
                        Temperature::Fixed { tau: f.tau }
                    },
                    anchor: Anchor::Random {
                        seed: self.seed,
                        gain: f.anchor_gain,
                    },
                };
                encoder.validate()?;
                Job::Train {
                    setup: Setup {
                        data: file_source(&t.data)?,
                        segmentation: SegSource::Shuffled {
                            batch_size: f.batch_size,
                            seed: self.seed,
                        },
                        model: ModelSource::Fit { encoder },
                        train: self.train_config(&t.optim),
                    },
                }
            }
            Command::Influence(a) => Job::Influence {
                setup: self.setup(&a.model)?,
                subset: parse_ids(&a.ids)?,
                variant,
                hessian: self.hessian(a.model.cg),
                edit: a.edit.is_some(),
            },
            Command::Scores(a) => Job::Scores {
                setup: self.setup(&a.model)?,
                mode: match a.mode {
                    ScoreModeArg::Task => ScoreMode::Task,
                    ScoreModeArg::SelfIs => ScoreMode::SelfIs,
                    ScoreModeArg::Relative => ScoreMode::Relative,
                },
                test: a.test.as_deref().map(|p| self.test_set(p, &a.test_args)).transpose()?,
                ids: a.ids.as_deref().map(parse_ids).transpose()?,
                variant,
                hessian: self.hessian(a.model.cg),
                format,
            },
            Command::Detect(a) => Job::Detect {
                setup: self.setup(&a.model)?,
                validation: a.validation.as_deref().map(|p| self.test_set(p, &a.test_args)).transpose()?,
                self_mode: a.self_mode,
                variant,
                hessian: self.hessian(a.model.cg),
                format,
            },
            Command::Traceback(a) => Job::Traceback {
                setup: self.setup(&a.model)?,
                test: self.test_set(&a.test, &a.test_args)?,
                pair: a.pair,
                k: a.k,
                variant,
                hessian: self.hessian(a.model.cg),
                format,
            },
            Command::Verify(a) => {
                let mut removals: Vec<Vec<PairId>> = Vec::new();
                for group in &a.remove {
                    removals.push(parse_ids(group)?);
                }
                removals.extend(a.singles.iter().map(|&id| vec![id]));
                if removals.is_empty() {
                    removals.push(vec![]);
                }
                Job::Verify {
                    setup: self.setup(&a.model)?,
                    removals,
                    variants: if a.both_variants { NegVariant::ALL.to_vec() } else { vec![variant] },
                    hessian: self.hessian(a.model.cg),
                    options: VerifyOptions {
                        start: if a.cold { RetrainStart::Cold } else { RetrainStart::Warm },
                        decomposition: !a.no_surrogate,
                        bound: (!a.no_bound).then_some(ProbeConfig {
                            probes: a.probes,
                            radius: a.radius,
                            seed: self.seed,
                        }),
                    },
                    test: a.test.as_deref().map(|p| self.test_set(p, &a.test_args)).transpose()?,
                }
            }
            Command::Sweep(a) => Job::Sweep {
                setup: self.setup(&a.model)?,
                test: self.test_set(&a.test, &a.test_args)?,
                fractions: a.fractions.clone(),
                modes: a
                    .modes
                    .iter()
                    .map(|m| match m {
                        SweepModeArg::Valuable => SweepMode::Valuable,
                        SweepModeArg::Harmful => SweepMode::Harmful,
                        SweepModeArg::Random => SweepMode::Random,
                    })
                    .collect(),
                seeds: a.seeds.clone(),
                variant,
                hessian: self.hessian(a.model.cg),
                start: if a.cold { RetrainStart::Cold } else { RetrainStart::Warm },
                format,
            },
        };
        Ok((job, self.out.clone()))
    }
}

fn run(cli: &Cli) -> Result<String, Error> {
    let summary = match &cli.command {
        Command::Replay(r) => replay(&r.manifest, &cli.out)?,
        _ => {
            let (job, dir) = cli.job()?;
            run_job(&job, &dir)?
        }
    };
    Ok(summary.message)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
