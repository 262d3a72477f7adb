use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use insloc::cli;
use insloc::config::key_help;
use insloc::selfcheck::SelfcheckOptions;

#[derive(Parser)]
#[command(
    name = "insloc",
    version,
    about = "Instance localization pretraining, probes and self-checks"
)]
#[command(after_help = keys_section())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; writes checkpoint.ilck and metrics.tsv to out_dir.
    #[command(after_help = keys_section())]
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Localization and classification probes of a checkpoint, as a TSV row.
    #[command(after_help = keys_section())]
    Probe {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to probe; defaults to out_dir/checkpoint.ilck.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Localization patch count (overrides probe_m).
        #[arg(long = "M", value_name = "M")]
        m: Option<usize>,
        /// Forward each patch on its own.
        #[arg(long)]
        isolated_patches: bool,
    },
    /// Dump composite pairs as PPM images plus a box TSV into out_dir.
    #[command(after_help = keys_section())]
    Compose {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the kernel and gradient oracle battery.
    Selfcheck {
        /// Scale the RoIAlign adjoint weights (test hook).
        #[arg(long, hide = true, default_value_t = 1.0)]
        perturb_bilinear_weight: f64,
    },
}

fn keys_section() -> String {
    format!(
        "Config keys (file lines `key = value`, or --set key=value):\n{}",
        key_help()
    )
}

fn main() -> ExitCode {
    let code = match Cli::parse().command {
        Command::Pretrain { config } => cli::cmd_pretrain(config.config.as_deref(), &config.set),
        Command::Probe {
            config,
            checkpoint,
            m,
            isolated_patches,
        } => cli::cmd_probe(
            config.config.as_deref(),
            &config.set,
            checkpoint.as_deref(),
            m,
            isolated_patches,
        ),
        Command::Compose { config } => cli::cmd_compose(config.config.as_deref(), &config.set),
        Command::Selfcheck {
            perturb_bilinear_weight,
        } => cli::cmd_selfcheck(&SelfcheckOptions {
            roialign_weight_scale: perturb_bilinear_weight,
            ..SelfcheckOptions::default()
        }),
    };
    ExitCode::from(code as u8)
}
