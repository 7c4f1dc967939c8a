//! `avatar` command-line tool: manipulate, apply, pca and eval.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{PcaSettings, RunConfig, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] avatar_core::Error),
}

impl CliError {
    /// 2 for bad configuration or input, 3 for numerical failure, 1 for
    /// anything else (I/O while writing results).
    pub fn exit_code(&self) -> i32 {
        use avatar_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(E::Io { .. }) => 1,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "avatar", version, about = "Prompt-guided editing of generated 3D face avatars")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize an edit direction towards text prompts or a target image.
    Manipulate(ManipulateArgs),
    /// Apply a saved direction at several strengths.
    Apply(ApplyArgs),
    /// Fit principal components of sampled codes and render sweeps.
    Pca(PcaArgs),
    /// Score original vs manipulated renders.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// Config file (or a previous run's run.toml); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory under which the run directory is created.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generator manifest.
    #[arg(long)]
    pub backend: Option<PathBuf>,
    /// Generator layer to edit in.
    #[arg(long)]
    pub layer: Option<String>,
    /// Render side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// View yaws in degrees, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub views: Option<Vec<f64>>,
    /// Expression conditioning of the base face.
    #[arg(long)]
    pub expression: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct ObjectiveArgs {
    /// Target text; repeat for several prompts.
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    #[arg(long)]
    pub target_image: Option<PathBuf>,
    /// Template file, one template per line.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Joint text/image embedder manifest.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    /// Identity embedder manifest.
    #[arg(long)]
    pub id_embedder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_id: Option<f64>,
    #[arg(long)]
    pub lambda_l2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Direction file written by `manipulate`.
    #[arg(long)]
    pub direction: Option<PathBuf>,
    /// Strengths, comma separated or repeated.
    #[arg(long = "alpha", value_delimiter = ',', allow_hyphen_values = true)]
    pub alphas: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    /// Step size along each component.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of original view PNGs.
    #[arg(long)]
    pub original: PathBuf,
    /// Directory of manipulated view PNGs.
    #[arg(long)]
    pub manipulated: PathBuf,
    #[command(flatten)]
    pub objective: ObjectiveArgs,
    /// Directory to write eval.toml into; printed to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn base_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(b) = &common.backend {
        cfg.backend = Some(b.clone());
    }
    if let Some(l) = &common.layer {
        cfg.tap_layer = Some(l.clone());
    }
    if let Some(s) = common.size {
        cfg.render.image_size = s;
    }
    if let Some(v) = &common.views {
        cfg.optimization.yaws = v.clone();
    }
    if let Some(e) = &common.expression {
        cfg.expression = e.clone();
    }
    cfg.optimization.seed = cfg.seed;
    Ok(cfg)
}

fn apply_objective(cfg: &mut RunConfig, o: &ObjectiveArgs) {
    if !o.prompts.is_empty() {
        cfg.prompts = o.prompts.clone();
        cfg.target_image = None;
    }
    if let Some(t) = &o.target_image {
        cfg.target_image = Some(t.clone());
        if o.prompts.is_empty() {
            cfg.prompts.clear();
        }
    }
    if let Some(t) = &o.templates {
        cfg.templates = Some(t.clone());
    }
    if let Some(e) = &o.embedder {
        cfg.embedder = Some(e.clone());
    }
    if let Some(e) = &o.id_embedder {
        cfg.id_embedder = Some(e.clone());
    }
}

/// Resolves flags over the config file for one command.
pub fn resolve(command: &Command) -> Result<RunConfig, CliError> {
    match command {
        Command::Manipulate(a) => {
            let mut cfg = base_config(&a.common)?;
            apply_objective(&mut cfg, &a.objective);
            if let Some(s) = a.steps {
                cfg.optimization.steps = s;
            }
            if let Some(lr) = a.lr {
                cfg.optimization.learning_rate = lr;
            }
            if let Some(l) = a.lambda_id {
                cfg.weights.lambda_id = l;
            }
            if let Some(l) = a.lambda_l2 {
                cfg.weights.lambda_l2 = l;
            }
            Ok(cfg)
        }
        Command::Apply(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(d) = &a.direction {
                cfg.direction = Some(d.clone());
            }
            if !a.alphas.is_empty() {
                cfg.alphas = a.alphas.clone();
            }
            Ok(cfg)
        }
        Command::Pca(a) => {
            let mut cfg = base_config(&a.common)?;
            if let Some(n) = a.samples {
                cfg.pca.samples = n;
            }
            if let Some(k) = a.components {
                cfg.pca.components = k;
            }
            if let Some(al) = a.alpha {
                cfg.pca.alpha = al;
            }
            Ok(cfg)
        }
        Command::Eval(a) => {
            let mut cfg = RunConfig::default();
            apply_objective(&mut cfg, &a.objective);
            if let Some(o) = &a.out {
                cfg.out = o.clone();
            }
            Ok(cfg)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    let cfg = resolve(command)?;
    match command {
        Command::Manipulate(_) => commands::manipulate(&cfg).map(|dir| println!("{}", dir.display())),
        Command::Apply(_) => commands::apply(&cfg).map(|dir| println!("{}", dir.display())),
        Command::Pca(_) => commands::pca(&cfg).map(|dir| println!("{}", dir.display())),
        Command::Eval(a) => {
            let report = commands::eval(&cfg, &a.original, &a.manipulated, a.out.is_some())?;
            print!("{}", report.to_toml());
            Ok(())
        }
    }
}
