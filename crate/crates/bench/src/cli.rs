//! Command-line surface of the `rclab` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use rclab::channel::{classify_phase, sample_tdl};
use rclab::filters::PhaseClass;
use rclab::reservoir::{dump_spec, parse_spec_dump, Activation, ReservoirSpec};
use rclab::rng::stream;
use rclab::theory::reproduce_fig5;
use rclab::weight_config::{
    configure_frequency_domain, configure_time_domain, diagnostics_csv, FrequencyDomainParams, PhasePolicy,
    TimeDomainParams, DEFAULT_GRID_SIZE,
};

use crate::experiment::{build_reservoir, load_pdp, records_to_csv, run_ber_experiment, DetectorKind, ExperimentConfig};

pub const SEED_ENV: &str = "RC_LAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "rclab", version, about = "Reservoir equalizer configuration and BER experiments")]
pub struct Cli {
    /// Master seed; overrides RC_LAB_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path (a directory for `configure`); stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Td,
    Fd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReservoirArg {
    RcTd,
    RcFd,
    RcRandom,
    VanillaEsn,
}

#[derive(Debug, clap::Args)]
pub struct ConfigureArgs {
    /// `cdl-d`, `cdl-e` or a PDP file.
    #[arg(long)]
    pub pdp: Option<String>,
    #[arg(long, value_enum, default_value = "td")]
    pub domain: DomainArg,
    #[arg(long)]
    pub m: Option<usize>,
    /// L_f (time domain) or L_rp (frequency domain).
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    /// Equalizer impulse-response length.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub nobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Configure a reservoir from channel statistics; emits the spec dump and diagnostics.
    Configure(ConfigureArgs),
    /// Run a BER sweep described by --config.
    RunBer,
    /// Compare the numerical and closed-form approximation-error curves.
    ValidateTheorem {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        nobs: usize,
        /// Comma-separated basis sizes.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
        m: Vec<usize>,
        #[arg(long, default_value = "cdl-d")]
        pdp: String,
    },
    /// Phase classification histogram of channel draws.
    InspectChannel {
        #[arg(long, default_value = "cdl-d")]
        pdp: String,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
    },
    /// Human-readable description of a reservoir.
    DumpSpec {
        /// Spec dump written by `configure`.
        #[arg(long, conflicts_with = "detector")]
        from: Option<PathBuf>,
        /// Build the reservoir of this detector from --config.
        #[arg(long, value_enum)]
        detector: Option<ReservoirArg>,
    },
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"));
    }
    Ok(config.unwrap_or(0))
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<ExperimentConfig>> {
    path.as_ref()
        .map(|p| ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn configure(cli: &Cli, args: &ConfigureArgs) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    let rc = cfg.as_ref().map(|c| c.rc.clone()).unwrap_or_default();
    let pdp = match (&args.pdp, &cfg) {
        (Some(name), _) => load_pdp(name, Path::new("."))?,
        (None, Some(c)) => c.pdp()?,
        (None, None) => load_pdp("cdl-d", Path::new("."))?,
    };
    let seed = resolve_seed(cli.seed, cfg.as_ref().map(|c| c.experiment.seed))?;
    let m = args.m.unwrap_or(rc.m);
    let window = args.window.unwrap_or(rc.window);
    let n = args.n.unwrap_or(rc.ir_len);
    let n_obs = args.nobs.unwrap_or(rc.n_obs);
    let configured = match args.domain {
        DomainArg::Td => configure_time_domain(
            &pdp,
            &TimeDomainParams {
                n,
                n_obs,
                m,
                l_f: args.order.unwrap_or(rc.l_f),
                window,
                policy: PhasePolicy::MpFactor,
            },
            seed,
        )?,
        DomainArg::Fd => configure_frequency_domain(
            &pdp,
            &FrequencyDomainParams {
                n,
                n_obs,
                m,
                l_rp: args.order.unwrap_or(rc.l_rp),
                window,
                grid_size: if cfg.is_some() { rc.grid_size } else { DEFAULT_GRID_SIZE },
                policy: PhasePolicy::MpFactor,
            },
            seed,
        )?,
    };
    let spec_text = dump_spec(&configured.spec)?;
    let diag_text = diagnostics_csv(&configured.poles.diagnostics);
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            std::fs::write(dir.join("spec.csv"), spec_text)?;
            std::fs::write(dir.join("diagnostics.csv"), diag_text)?;
        }
        None => print!("{spec_text}\n{diag_text}"),
    }
    Ok(())
}

fn run_ber(cli: &Cli) -> Result<()> {
    let Some(mut cfg) = load_config(&cli.config)? else {
        bail!("run-ber needs --config <file>");
    };
    cfg.experiment.seed = resolve_seed(cli.seed, Some(cfg.experiment.seed))?;
    let records = run_ber_experiment(&cfg)?;
    emit(&cli.out, &records_to_csv(&records))
}

fn validate_theorem(cli: &Cli, n: usize, nobs: usize, m: &[usize], pdp: &str) -> Result<()> {
    let seed = resolve_seed(cli.seed, None)?;
    let pdp = load_pdp(pdp, Path::new("."))?;
    let report = reproduce_fig5(&pdp, n, nobs, m, seed)?;
    eprintln!("max gap {:.3e}", report.max_gap());
    emit(&cli.out, &report.to_csv())
}

fn inspect_channel(cli: &Cli, pdp: &str, draws: usize) -> Result<()> {
    let seed = resolve_seed(cli.seed, None)?;
    let pdp = load_pdp(pdp, Path::new("."))?;
    let classes = (0..draws as u64)
        .into_par_iter()
        .map(|i| {
            let h = sample_tdl(&pdp, &mut stream(seed, &[i]))?;
            Ok(classify_phase(&h)?)
        })
        .collect::<Result<Vec<PhaseClass>>>()?;
    let mut out = String::from("class,count,fraction\n");
    for (name, class) in [
        ("strictly_mp", PhaseClass::StrictlyMP),
        ("strictly_nmp", PhaseClass::StrictlyNMP),
        ("mixed", PhaseClass::Mixed),
    ] {
        let count = classes.iter().filter(|c| **c == class).count();
        let frac = if draws == 0 { 0.0 } else { count as f64 / draws as f64 };
        let _ = writeln!(out, "{name},{count},{frac}");
    }
    emit(&cli.out, &out)
}

/// Multi-line description of a reservoir.
pub fn describe_spec(spec: &ReservoirSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "neurons: {}", spec.n_neurons());
    let _ = writeln!(out, "inputs: {}", spec.d_in());
    let _ = writeln!(out, "window: {}", spec.window());
    let _ = writeln!(out, "skip: {}", spec.has_skip());
    let act = match spec.activation() {
        Activation::Linear => "linear",
        Activation::Tanh => "tanh",
    };
    let _ = writeln!(out, "activation: {act}");
    let _ = writeln!(out, "features: {}", spec.feature_len());
    let _ = writeln!(out, "spectral radius: {:.6}", spec.w_res().spectral_radius());
    match spec.poles() {
        Some(poles) => {
            let _ = writeln!(out, "recurrent weights: diagonal");
            let _ = writeln!(out, "{:>5}  {:>24}  {:>9}  {:>24}", "k", "pole", "|pole|", "input weight");
            for (k, p) in poles.iter().enumerate() {
                let w = spec.w_in().row(k).iter().copied().find(|v| v.norm() > 0.0).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{k:>5}  {:>11.6} {:>+11.6}j  {:>9.6}  {:>11.6} {:>+11.6}j",
                    p.re,
                    p.im,
                    p.norm(),
                    w.re,
                    w.im
                );
            }
        }
        None => {
            let nnz = spec.w_res().to_dense().iter().filter(|v| v.norm() > 0.0).count();
            let total = spec.n_neurons() * spec.n_neurons();
            let _ = writeln!(out, "recurrent weights: dense, {nnz} of {total} nonzero");
        }
    }
    out
}

fn dump(cli: &Cli, from: &Option<PathBuf>, detector: Option<ReservoirArg>) -> Result<()> {
    let spec = match (from, detector) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let window = load_config(&cli.config)?.map_or(0, |c| c.rc.window);
            parse_spec_dump(&text, window)?
        }
        (None, Some(d)) => {
            let Some(cfg) = load_config(&cli.config)? else {
                bail!("--detector needs --config <file>");
            };
            let seed = resolve_seed(cli.seed, Some(cfg.experiment.seed))?;
            let kind = match d {
                ReservoirArg::RcTd => DetectorKind::RcTd,
                ReservoirArg::RcFd => DetectorKind::RcFd,
                ReservoirArg::RcRandom => DetectorKind::RcRandom,
                ReservoirArg::VanillaEsn => DetectorKind::VanillaEsn,
            };
            let pdp = cfg.pdp()?;
            build_reservoir(kind, &cfg, &pdp, seed)?
        }
        (None, None) => bail!("dump-spec needs --from <file> or --detector <kind>"),
    };
    emit(&cli.out, &describe_spec(&spec))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Configure(args) => configure(cli, args),
        Command::RunBer => run_ber(cli),
        Command::ValidateTheorem { n, nobs, m, pdp } => validate_theorem(cli, *n, *nobs, m, pdp),
        Command::InspectChannel { pdp, draws } => inspect_channel(cli, pdp, *draws),
        Command::DumpSpec { from, detector } => dump(cli, from, *detector),
    }
}

/// Runs the CLI and returns the process exit code: 0 on success, 1 on a
/// runtime failure, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.workers == Some(0) {
        eprintln!("error: --workers must be positive");
        return 2;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
