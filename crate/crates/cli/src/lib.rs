//! Command-line front end. [`run`] parses arguments, executes one
//! subcommand and returns the process exit code.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use refinestyle::io::config::parse_override;
use refinestyle::io::{load_profile, RunConfig};
use refinestyle::{Error, Result};

pub mod commands;
pub mod pipeline;

/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 64;
pub const DEFAULT_PROFILE: &str = "desk-default";

#[derive(Debug, Parser)]
#[command(name = "refinestyle", version, about = "Low-rank kernel refinement for a toy style-based generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run config; a `profile` key plus overrides, or a full document.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named profile, used when no --config is given.
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Dotted-path override, e.g. `budgets.stage2_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Run directory for inputs and outputs.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
    /// Overrides `seeds.run`; falls back to RFSK_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for training and evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Sample count for spectrum and timing.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Build the seeded fixture generator.
    MakeGenerator,
    /// Render the in-domain and out-of-domain image sets with manifests.
    MakeDomain,
    /// Train the inverter (stage-1 then refiner, or the one-stage model).
    TrainInvert,
    /// Compare refined against w⁺-only reconstruction on the test split.
    Evaluate,
    /// Invert an image and move its code along a principal direction.
    Edit(EditArgs),
    /// Adapt residual factors towards the configured text-proxy direction.
    AdaptText,
    /// Adapt residual factors to one reference image.
    AdaptOneshot(OneShotArgs),
    /// Singular spectra of the modulated kernels, as CSV.
    Spectrum,
    /// Analytic parameter and MAC accounting.
    Account(AccountArgs),
    /// Run the invariant suite.
    Verify,
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    /// PNG to invert; defaults to a test image of the out-of-domain set.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Test image index when no --image is given.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Principal direction of the w space, 0 = largest variance.
    #[arg(long, default_value_t = 0)]
    pub direction: usize,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    pub strength: f64,
    /// w⁺ rows to edit, as `start..end`.
    #[arg(long)]
    pub layers: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct OneShotArgs {
    /// Reference PNG; defaults to a rendered out-of-domain sample.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AccountArgs {
    /// Also time inversions with randomly initialized weights.
    #[arg(long)]
    pub timing: bool,
}

impl Common {
    /// Profile or config file, then overrides, then the seed.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.profile) {
            (Some(_), Some(_)) => return Err(Error::contract("config", "give either --config or --profile, not both")),
            (Some(path), None) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::contract("config", format!("cannot read {}: {e}", path.display())))?;
                RunConfig::from_json(&text)?
            }
            (None, p) => load_profile(p.as_deref().unwrap_or(DEFAULT_PROFILE))?,
        };
        let overrides = self.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        cfg = cfg.with_overrides(&overrides)?;
        if let Some(seed) = self.seed.or_else(env_seed) {
            cfg.seeds.run = seed;
        }
        Ok(cfg)
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("RFSK_SEED").ok().and_then(|s| s.trim().parse().ok())
}

/// Runs one invocation; `args` includes the program name.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{text}");
                return 0;
            }
            eprint!("{text}");
            return EXIT_USAGE;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.common.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::contract("threads", e.to_string()))?;
            let (code, buf) = pool.install(|| {
                let mut buf = Vec::new();
                commands::dispatch(cli, &mut buf).map(|c| (c, buf))
            })?;
            out.write_all(&buf)?;
            Ok(code)
        }
        None => commands::dispatch(cli, out),
    }
}
