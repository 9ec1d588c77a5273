use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use elab_core::packaging::{ConflictPolicy, SliceSelector};
use elab_core::sim::TankParams;
use elab_service::config::ServiceConfig;
use elab_service::tools::{self, Outcome, ToolError};

#[derive(Parser)]
#[command(name = "elab", version, about = "Remote and virtual laboratory service")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Work with content packages.
    #[command(subcommand)]
    Package(PackageCmd),
    /// Check device compatibility.
    #[command(subcommand)]
    Compat(CompatCmd),
    /// Run a simulation offline.
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct Selection {
    /// Keep only these plays (repeatable).
    #[arg(long = "play", conflicts_with = "activities")]
    plays: Vec<String>,
    /// Keep only these activities and what they need (repeatable).
    #[arg(long = "activity")]
    activities: Vec<String>,
}

impl Selection {
    fn selector(&self) -> Option<SliceSelector> {
        if !self.plays.is_empty() {
            Some(SliceSelector::plays(self.plays.iter().cloned()))
        } else if !self.activities.is_empty() {
            Some(SliceSelector::activities(self.activities.iter().cloned()))
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Reject,
    PreferLeft,
    RenameRight,
}

#[derive(Subcommand)]
enum PackageCmd {
    /// Validate a package archive or package directory.
    Validate {
        path: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Zip a package directory.
    Pack {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Extract a self-contained part of a package.
    Slice {
        path: PathBuf,
        #[command(flatten)]
        selection: Selection,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Combine two packages.
    Merge {
        left: PathBuf,
        right: PathBuf,
        #[arg(long, value_enum, default_value = "reject")]
        policy: Policy,
        /// Suffix for renamed ids under rename-right.
        #[arg(long, default_value = "-b", allow_hyphen_values = true)]
        suffix: String,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum CompatCmd {
    /// Exit 0 when the package fits the devices, 1 when it does not.
    Check {
        path: PathBuf,
        /// JSON array of device descriptors (default: built-in devices).
        #[arg(long)]
        devices: Option<PathBuf>,
        #[command(flatten)]
        selection: Selection,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Print a tank trajectory as CSV.
    Tank {
        #[arg(long, default_value_t = 0.05)]
        q_in: f64,
        #[arg(long, default_value_t = 0.0)]
        level: f64,
        #[arg(long, default_value_t = 600.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0.1)]
        dt: f64,
        #[arg(long, default_value_t = 1.0)]
        area: f64,
        #[arg(long, default_value_t = 0.05)]
        cv: f64,
        /// Emit one row every N steps.
        #[arg(long, default_value_t = 10)]
        every: usize,
    },
}

fn emit(o: Outcome, format: Format) -> ExitCode {
    match format {
        Format::Text => print!("{}", o.text),
        Format::Json => println!("{}", serde_json::to_string_pretty(&o.json).expect("JSON values serialize")),
    }
    if o.ok { ExitCode::SUCCESS } else { ExitCode::from(1) }
}

fn write_out(path: &Path, bytes: Vec<u8>) -> Result<ExitCode, ToolError> {
    std::fs::write(path, bytes).map_err(|e| ToolError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(ExitCode::SUCCESS)
}

fn run(cmd: Cmd) -> Result<ExitCode, ToolError> {
    match cmd {
        Cmd::Serve { config } => {
            let cfg = ServiceConfig::load(&config).map_err(|e| ToolError::Other(e.to_string()))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| ToolError::Other(e.to_string()))?;
            rt.block_on(elab_service::http::serve(cfg, async {
                let _ = tokio::signal::ctrl_c().await;
            }))
            .map_err(|e| ToolError::Other(e.to_string()))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Package(PackageCmd::Validate { path, format }) => Ok(emit(tools::validate(&path)?, format)),
        Cmd::Package(PackageCmd::Pack { dir, output }) => write_out(&output, tools::pack(&dir)?),
        Cmd::Package(PackageCmd::Slice { path, selection, output }) => {
            let sel = selection
                .selector()
                .ok_or_else(|| ToolError::Other("give at least one --play or --activity".into()))?;
            write_out(&output, tools::slice(&path, &sel)?)
        }
        Cmd::Package(PackageCmd::Merge {
            left,
            right,
            policy,
            suffix,
            output,
        }) => {
            let policy = match policy {
                Policy::Reject => ConflictPolicy::Reject,
                Policy::PreferLeft => ConflictPolicy::PreferLeft,
                Policy::RenameRight => ConflictPolicy::RenameRight { suffix },
            };
            write_out(&output, tools::merge(&left, &right, &policy)?)
        }
        Cmd::Compat(CompatCmd::Check {
            path,
            devices,
            selection,
            format,
        }) => Ok(emit(
            tools::compat_check(&path, devices.as_deref(), selection.selector().as_ref())?,
            format,
        )),
        Cmd::Sim(SimCmd::Tank {
            q_in,
            level,
            seconds,
            dt,
            area,
            cv,
            every,
        }) => {
            let params = TankParams {
                area,
                outflow_coeff: cv,
                dt,
                ..TankParams::default()
            };
            print!("{}", tools::sim_tank_csv(&params, level, q_in, seconds, every)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("elab: {e}");
            ExitCode::from(2)
        }
    }
}
