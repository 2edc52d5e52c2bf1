use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gdaip::cli_io::{self, Adaptation, EvaluateInputs, PipelineConfig, DEFAULT_PCA_DIM};
use gdaip::formats::read_train_config;
use gdaip::synth::{ShiftSpec, SynthSpec};
use gdaip::trainer::TrainConfig;
use gdaip::{GdaipError, Result};

/// Individual cortical parcellation with graph attention networks.
#[derive(Parser)]
#[command(name = "gdaip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted atlases.
    Synth(SynthArgs),
    /// Build the mesh graph, fingerprints and joint-PCA features.
    Graph {
        #[arg(long)]
        mesh: PathBuf,
        /// Source-group time series (repeat or comma-separate).
        #[arg(long, required = true, value_delimiter = ',')]
        source: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PCA_DIM)]
        pca_dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pearson FC of one series, or the group mean of several.
    Fingerprint {
        #[arg(long, required = true, value_delimiter = ',')]
        series: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a graph directory.
    Train(TrainArgs),
    /// Label a graph with a trained checkpoint.
    Predict {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Label the source graph instead of the target.
        #[arg(long)]
        source: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice, homogeneity and consistency reports.
    Evaluate(EvaluateArgs),
    /// Combine left and right hemisphere labels.
    Merge {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// ROI count of the left file (default: max label + 1).
        #[arg(long)]
        n_roi_left: Option<usize>,
        #[arg(long)]
        n_roi_right: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run graph, train, predict and evaluate from one config file.
    Pipeline {
        config: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().subdivisions)]
    subdivisions: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_roi)]
    n_roi: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_subjects)]
    subjects: usize,
    #[arg(long, default_value_t = SynthSpec::default().sessions)]
    sessions: usize,
    #[arg(long, default_value_t = SynthSpec::default().source_subjects)]
    source_subjects: usize,
    #[arg(long, default_value_t = SynthSpec::default().t_len)]
    t_len: usize,
    #[arg(long, default_value_t = SynthSpec::default().signal_dim)]
    signal_dim: usize,
    #[arg(long, default_value_t = SynthSpec::default().vertex_sigma)]
    sigma: f64,
    #[arg(long, default_value_t = SynthSpec::default().perturbation)]
    perturbation: f64,
    /// Disable the target-domain shift.
    #[arg(long)]
    no_shift: bool,
    #[arg(long)]
    shift_sigma: Option<f64>,
    #[arg(long)]
    shift_width: Option<usize>,
    #[arg(long)]
    shift_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        let default_shift = SynthSpec::default().shift.unwrap_or(ShiftSpec::NEUTRAL);
        let shift = (!self.no_shift).then(|| ShiftSpec {
            noise_sigma: self.shift_sigma.unwrap_or(default_shift.noise_sigma),
            smoothing_width: self.shift_width.unwrap_or(default_shift.smoothing_width),
            scale: self.shift_scale.unwrap_or(default_shift.scale),
        });
        SynthSpec {
            subdivisions: self.subdivisions,
            n_roi: self.n_roi,
            n_subjects: self.subjects,
            sessions: self.sessions,
            source_subjects: self.source_subjects,
            t_len: self.t_len,
            signal_dim: self.signal_dim,
            vertex_sigma: self.sigma,
            perturbation: self.perturbation,
            shift,
            seed: self.seed,
        }
    }
}

/// Command-line values win over the config file.
#[derive(Args, Default)]
struct TrainOverrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lambda_mme: Option<f64>,
    #[arg(long)]
    core_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, config: &mut TrainConfig) {
        if let Some(v) = self.steps {
            config.steps = v;
        }
        if let Some(v) = self.lr0 {
            config.lr0 = v;
        }
        if let Some(v) = self.lambda_mme {
            config.lambda_mme = v;
        }
        if let Some(v) = self.core_fraction {
            config.core_fraction = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `graph`.
    #[arg(long)]
    graph: PathBuf,
    /// Reference atlas labels for the source graph.
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    n_roi: Option<usize>,
    /// key=value training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train without target labels or entropy term.
    #[arg(long)]
    source_only: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    series: Option<PathBuf>,
    /// `subject:session:labels_path`, repeatable.
    #[arg(long = "session")]
    sessions: Vec<String>,
    #[arg(long)]
    n_roi: Option<usize>,
    /// JSON report path; the CSV export goes next to it.
    #[arg(long)]
    out: PathBuf,
}

fn parse_session(s: &str) -> Result<(String, String, PathBuf)> {
    let mut parts = s.splitn(3, ':');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), Some(c)) if !a.is_empty() && !b.is_empty() && !c.is_empty() => {
            Ok((a.to_string(), b.to_string(), PathBuf::from(c)))
        }
        _ => Err(GdaipError::Input(format!(
            "--session expects subject:session:path, got {s:?}"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let corpus = cli_io::cmd_synth(&args.spec(), &args.out)?;
            println!(
                "wrote {} subjects to {} (planted difficulty {:.4})",
                corpus.subjects.len(),
                args.out.display(),
                corpus.planted_difficulty
            );
        }
        Command::Graph {
            mesh,
            source,
            target,
            pca_dim,
            out,
        } => {
            let g = cli_io::cmd_graph_build(&mesh, &source, &target, pca_dim, &out)?;
            println!(
                "graph: {} vertices, {} edges, features {}x{}",
                g.adjacency.vertex_count(),
                g.adjacency.edge_count(),
                g.pca.target.vertex_count(),
                g.pca.target.dim()
            );
        }
        Command::Fingerprint { series, out } => {
            let fc = cli_io::cmd_fingerprint(&series, &out)?;
            println!("fingerprint: {} vertices", fc.vertex_count());
        }
        Command::Train(args) => {
            let mut config = match &args.config {
                Some(p) => read_train_config(p)?,
                None => TrainConfig::default(),
            };
            args.overrides.apply(&mut config);
            let adaptation = if args.source_only {
                Adaptation::SourceOnly
            } else {
                Adaptation::Full
            };
            let (_, history) = cli_io::cmd_train(&args.graph, &args.atlas, args.n_roi, &config, adaptation, &args.out)?;
            if let Some(last) = history.records.last() {
                println!("trained {} steps, final cls loss {:.6}", history.records.len(), last.cls_loss);
            }
        }
        Command::Predict {
            graph,
            checkpoint,
            source,
            out,
        } => {
            let p = cli_io::cmd_predict(&graph, &checkpoint, source, &out)?;
            println!("labeled {} vertices into {} ROIs", p.len(), p.n_roi());
        }
        Command::Evaluate(args) => {
            let sessions = args.sessions.iter().map(|s| parse_session(s)).collect::<Result<Vec<_>>>()?;
            let inputs = EvaluateInputs {
                labels: args.labels,
                truth: args.truth,
                series: args.series,
                sessions,
                n_roi: args.n_roi,
            };
            let csv = args.out.with_extension("csv");
            let report = cli_io::cmd_evaluate(&inputs, &args.out, &csv)?;
            if let Some(d) = &report.dice {
                println!("dice mean {:.6}", d.mean);
            }
            if let Some(h) = &report.homogeneity {
                println!("homogeneity mean {:.6}", h.mean);
            }
            if let Some(c) = &report.consistency {
                println!("consistency intra {:.6} inter {:.6} p {:?}", c.intra_mean, c.inter_mean, c.p);
            }
        }
        Command::Merge {
            left,
            right,
            n_roi_left,
            n_roi_right,
            out,
        } => {
            let merged = cli_io::cmd_merge(&left, &right, n_roi_left, n_roi_right, &out)?;
            println!("merged {} vertices into {} ROIs", merged.len(), merged.n_roi());
        }
        Command::Pipeline { config, overrides } => {
            let mut cfg = PipelineConfig::read(&config)?;
            overrides.apply(&mut cfg.train);
            let report = cli_io::cmd_pipeline(&cfg)?;
            if let Some(d) = &report.dice {
                println!("dice mean {:.6}", d.mean);
            }
            if let Some(h) = &report.homogeneity {
                println!("homogeneity mean {:.6}", h.mean);
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("GDAIP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| GdaipError::Input(format!("GDAIP_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| GdaipError::Input(format!("cannot configure thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
