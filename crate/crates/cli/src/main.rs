use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use axwin::analysis::{emit_attention_table, emit_report, human, ReportFormat};
use axwin::attention::AttentionMode;
use axwin::cli::check::{self, Suite};
use axwin::cli::{
    self as cmd, exit, exit_code, parse_split_sizes, ForwardInput, Resolution, RunConfig, SmokeConfig,
};
use axwin::{DType, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "axwin", version, about = "AxWin Transformer backbone tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and FLOP (MAC) report.
    Describe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
    /// Run the backbone once and print logit statistics.
    Forward {
        #[command(flatten)]
        run: RunArgs,
        /// AXTF input tensor of shape (1, h, w, 3).
        #[arg(long, conflicts_with = "zeros")]
        input: Option<PathBuf>,
        /// Use an all-zero input image.
        #[arg(long)]
        zeros: bool,
    },
    /// Run a property suite; exits 1 if any property fails.
    Check {
        #[arg(default_value = "all")]
        suite: Suite,
        /// Write the JSON verdicts here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train the micro variant on the two-class stripe dataset.
    TrainSmoke {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Loss that counts as converged.
        #[arg(long, default_value_t = 0.1)]
        target: f64,
        /// Run every step instead of stopping at the target.
        #[arg(long)]
        no_early_stop: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Attention cost of global, window, axial and AxWin layouts.
    Compare {
        /// Comma-separated resolutions, `56` or `56x80`.
        #[arg(long, value_delimiter = ',', default_value = "56,112,224")]
        res: Vec<Resolution>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 7)]
        window: usize,
        #[arg(long, default_value_t = 7)]
        axial: usize,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
}

/// Flags shared by model commands; each one overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// `224` or `224x320`.
    #[arg(long)]
    res: Option<Resolution>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dtype: Option<DType>,
    #[arg(long)]
    attn: Option<AttentionMode>,
    /// Four comma-separated split sizes, one per stage.
    #[arg(long, value_parser = parse_split_sizes)]
    split_size: Option<[usize; 4]>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Output tensor path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => cmd::load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.variant {
            cfg.variant = v;
            cfg.model = None;
        }
        if let Some(r) = self.res {
            cfg.resolution = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = self.dtype {
            cfg.dtype = d;
        }
        if let Some(a) = self.attn {
            cfg.attention_mode = a;
        }
        if self.split_size.is_some() {
            cfg.split_size = self.split_size;
        }
        if self.num_classes.is_some() {
            cfg.num_classes = self.num_classes;
        }
        if self.out.is_some() {
            cfg.out = self.out;
        }
        if self.json.is_some() {
            cfg.json = self.json;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<(), Error> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_string_pretty(value)?)?;
    }
    Ok(())
}

fn run(command: Command) -> Result<i32, Error> {
    match command {
        Command::Describe { run, format } => {
            let cfg = run.resolve()?;
            let report = cmd::describe(&cfg)?;
            print!("{}", emit_report(&report, format));
            write_json(cfg.json.as_deref(), &report)?;
            Ok(exit::OK)
        }
        Command::Forward { run, input, zeros } => {
            let cfg = run.resolve()?;
            let source = match (input, zeros) {
                (Some(p), _) => ForwardInput::File(p),
                (None, true) => ForwardInput::Zeros,
                (None, false) => ForwardInput::Synthetic,
            };
            let s = cmd::forward(&cfg, &source)?;
            println!("{} {} input {:?} logits {:?}", s.variant, s.dtype, s.input_shape, s.logits_shape);
            for (i, shape) in s.stage_shapes.iter().enumerate() {
                println!("stage{} {:?}", i + 1, shape);
            }
            println!("mean {:.6e} std {:.6e} min {:.6e} max {:.6e}", s.mean, s.std, s.min, s.max);
            write_json(cfg.json.as_deref(), &s)?;
            Ok(exit::OK)
        }
        Command::Check { suite, json } => {
            let report = check::run(suite);
            for v in &report.verdicts {
                let value = match (v.value, v.tolerance) {
                    (Some(x), Some(t)) => format!(" {x:.3e} <= {t:.0e}"),
                    (Some(x), None) => format!(" {x:.3e}"),
                    _ => String::new(),
                };
                let tag = if v.passed { "PASS" } else { "FAIL" };
                println!("{tag} {}{value}  {}", v.name, v.detail);
            }
            let failed = report.verdicts.iter().filter(|v| !v.passed).count();
            println!("{}: {} passed, {failed} failed", report.suite, report.verdicts.len() - failed);
            write_json(json.as_deref(), &report)?;
            Ok(if report.passed { exit::OK } else { exit::FAILURE })
        }
        Command::TrainSmoke { steps, seed, lr, target, no_early_stop, json } => {
            let cfg = SmokeConfig { steps, seed, lr, target_loss: (!no_early_stop).then_some(target) };
            let report = cmd::train_smoke(&cfg, |e| {
                println!("step {:4} loss {:.6} accuracy {:.3}", e.step, e.loss, e.accuracy);
            })?;
            println!("final loss {:.6} after {} steps (target {target})", report.final_loss, report.steps);
            write_json(json.as_deref(), &report)?;
            Ok(if report.final_loss < target { exit::OK } else { exit::FAILURE })
        }
        Command::Compare { res, channels, window, axial, format } => {
            let rows = cmd::compare(&res, channels, window, axial)?;
            print!("{}", emit_attention_table(&rows, format));
            if format == ReportFormat::Table {
                if let Some(r) = rows.last() {
                    println!("axwin at {}x{}: {}", r.h, r.w, human(r.axwin));
                }
            }
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
