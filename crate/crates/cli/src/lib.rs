//! Command-line runners: `train`, `scale-bench`, `analyze` and `gen-graph`.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::Context;
use clap::{Arg, ArgMatches, Command};

pub mod analyze;
pub mod config;
pub mod data;
pub mod gen_graph;
pub mod scale;
pub mod train;

use config::{Key, RunConfig, ANALYZE_KEYS, COMMON_KEYS, GEN_GRAPH_KEYS, SCALE_KEYS, TRAIN_KEYS};

/// Why a command stopped; each kind has its own exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad command line; clap decides the status (0 for `--help`).
    Usage(clap::Error),
    /// Invalid or unknown configuration: exit 2.
    Config(String),
    /// A required input file is missing: exit 3.
    MissingArtifact(String),
    /// Anything else: exit 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(e) => e.exit_code(),
            Failure::Config(_) => 2,
            Failure::MissingArtifact(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "{e}"),
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<rehub_core::Error> for Failure {
    fn from(e: rehub_core::Error) -> Self {
        match e {
            rehub_core::Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

struct CommandSpec {
    name: &'static str,
    about: &'static str,
    keys: &'static [Key],
}

const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "train",
        about: "Train on the token task and write loss, accuracy, checkpoint and hub utilization",
        keys: TRAIN_KEYS,
    },
    CommandSpec {
        name: "scale-bench",
        about: "Measure peak allocated elements against graph size for both attention modes",
        keys: SCALE_KEYS,
    },
    CommandSpec {
        name: "analyze",
        about: "Hub utilization histograms and load balance of a trained checkpoint",
        keys: ANALYZE_KEYS,
    },
    CommandSpec {
        name: "gen-graph",
        about: "Write a random regular graph as JSON",
        keys: GEN_GRAPH_KEYS,
    },
];

/// The argument parser. Every config key is also a long flag.
pub fn cli() -> Command {
    let subcommands = COMMANDS.iter().map(|spec| {
        let mut cmd = Command::new(spec.name).about(spec.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .help("`key = value` config file; flags override it"),
        );
        for k in COMMON_KEYS.iter().chain(spec.keys) {
            cmd = cmd.arg(
                Arg::new(k.name)
                    .long(k.flag)
                    .value_name("VALUE")
                    .help(format!("{} [default: {}]", k.help, k.default)),
            );
        }
        cmd
    });
    Command::new("rehub")
        .about("Hub-and-spoke graph attention experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(subcommands)
}

/// Merges defaults, the `--config` file and flags for a parsed subcommand.
pub fn resolve(name: &str, m: &ArgMatches) -> Result<RunConfig, Failure> {
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("registered subcommand");
    let overrides: Vec<(String, String)> = COMMON_KEYS
        .iter()
        .chain(spec.keys)
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    match m.get_one::<String>("config") {
        Some(path) => RunConfig::from_file(name, spec.keys, Path::new(path), &overrides),
        None => RunConfig::resolve(name, spec.keys, &[], &overrides),
    }
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli().try_get_matches_from(args).map_err(Failure::Usage)?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let rc = resolve(name, sub)?;
    match name {
        "train" => {
            let out = train::run_with(&rc, |step, loss| {
                if (step + 1) % 100 == 0 {
                    eprintln!("step {:>5}  loss {loss:.4}", step + 1);
                }
            })?;
            println!("test accuracy {:.4}, final loss {:.4}", out.accuracy, out.losses.last().unwrap_or(&f64::NAN));
        }
        "scale-bench" => {
            let out = scale::run(&rc)?;
            println!("rehub slope {:.3}, dense slope {:.3}", out.rehub_slope, out.dense_slope);
        }
        "analyze" => {
            let out = analyze::run(&rc)?;
            match out.report.median_pct() {
                Some(m) => println!("median hub utilization {:.1}%", 100.0 * m),
                None => println!("no hub layers to analyze"),
            }
        }
        "gen-graph" => {
            let path = gen_graph::run(&rc)?;
            println!("{}", path.display());
        }
        _ => unreachable!("registered subcommand"),
    }
    Ok(())
}

/// Creates the output directory and writes the resolved-config echo.
pub(crate) fn prepare_out(rc: &RunConfig) -> Result<std::path::PathBuf, Failure> {
    let dir = rc.out_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join(format!("{}.resolved.conf", rc.command)), rc.echo())?;
    Ok(dir)
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).context("serializing report")?;
    write(path, text + "\n")
}
