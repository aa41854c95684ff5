use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use emstdp::checkpoint;
use emstdp::error::{Error, Result};
use emstdp::harness::{self, EvalReport, MetricsWriter, RunConfig};
use emstdp::oracle::FpNetwork;

#[derive(Parser)]
#[command(
    name = "emstdp",
    version,
    about = "Two-phase spiking learning on a simulated neuromorphic substrate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the integer engine online, writing a checkpoint and metrics.
    Train(Common),
    /// Phase-1 inference of an engine checkpoint over the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Map the configured network onto cores and write per-core occupancy.
    Map(Common),
    /// Sweep neurons per core and write the cost table.
    Sweep(Common),
    /// Class-incremental learning with rehearsal.
    Incremental {
        #[command(flatten)]
        common: Common,
        /// Network already trained on the initial classes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the real-valued reference model.
    OracleTrain(Common),
    /// Evaluate a reference or (dequantized) engine checkpoint.
    OracleEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Settings shared by every subcommand. Precedence, lowest first: built-in
/// defaults, `--config`, the named flags, `--set`.
#[derive(Args)]
struct Common {
    /// key = value file; see the list of keys below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set floor_rate=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    t: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    feedback: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    train_images: Option<String>,
    #[arg(long)]
    train_labels: Option<String>,
    #[arg(long)]
    test_images: Option<String>,
    #[arg(long)]
    test_labels: Option<String>,
    #[arg(long)]
    train_csv: Option<String>,
    #[arg(long)]
    test_csv: Option<String>,
    #[arg(long)]
    train_limit: Option<String>,
    #[arg(long)]
    test_limit: Option<String>,
    #[arg(long)]
    conv_checkpoint: Option<String>,
    #[arg(long)]
    l_m: Option<String>,
    #[arg(long)]
    rounding: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    sweep_l_m: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let named = [
            ("structure", &self.structure),
            ("t", &self.t),
            ("theta", &self.theta),
            ("eta", &self.eta),
            ("epochs", &self.epochs),
            ("feedback", &self.feedback),
            ("seed", &self.seed),
            ("data_dir", &self.data_dir),
            ("train_images", &self.train_images),
            ("train_labels", &self.train_labels),
            ("test_images", &self.test_images),
            ("test_labels", &self.test_labels),
            ("train_csv", &self.train_csv),
            ("test_csv", &self.test_csv),
            ("train_limit", &self.train_limit),
            ("test_limit", &self.test_limit),
            ("conv_checkpoint", &self.conv_checkpoint),
            ("l_m", &self.l_m),
            ("rounding", &self.rounding),
            ("out_dir", &self.out_dir),
            ("sweep_l_m", &self.sweep_l_m),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    Ok(cfg.out_dir.join(name))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print_report(report: &EvalReport, n: usize) {
    println!("accuracy {:.4} ({n} samples)", report.accuracy);
    for (c, a) in report.per_class.iter().enumerate() {
        if let Some(a) = a {
            println!("class {c} {a:.4}");
        }
    }
}

fn progress(r: &harness::MetricsRecord) {
    let at = match (r.epoch, r.round, r.step) {
        (Some(e), None, None) => format!("epoch {e}"),
        (e, Some(r), s) => format!(
            "increment {} round {r} step {}",
            e.unwrap_or(0),
            s.map_or("-".into(), |s| s.to_string())
        ),
        _ => String::new(),
    };
    eprintln!(
        "{} {at}: accuracy {:.4} after {} samples",
        r.run, r.accuracy, r.samples_seen
    );
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let train = cfg.load_train()?;
            let test = cfg.load_test()?;
            let mut metrics = MetricsWriter::create(&out_file(&cfg, "metrics.csv")?)?;
            let outcome = harness::train(&cfg, &train, Some(&test), |r| {
                progress(r);
                metrics.write(r)
            })?;
            write(
                &out_file(&cfg, "core_map.csv")?,
                &harness::core_map_csv(&outcome.core_map),
            )?;
            let ckpt = out_file(&cfg, "model.ckpt")?;
            checkpoint::save_engine(&outcome.net, &ckpt)?;
            println!("wrote {}", ckpt.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let net = checkpoint::load_engine(&checkpoint)?;
            let test = cfg.load_test()?;
            let want = net.spec.layers[0].output;
            if test.shape != want {
                return Err(Error::Shape(format!(
                    "test images are {}, checkpoint expects {want}",
                    test.shape
                )));
            }
            print_report(&harness::evaluate(&net, &test, None, None)?, test.len());
        }
        Command::Map(common) => {
            let cfg = common.resolve()?;
            let net = cfg.build_network()?;
            let map = harness::map_for(&cfg, &net)?;
            let path = out_file(&cfg, "core_map.csv")?;
            write(&path, &harness::core_map_csv(&map))?;
            println!(
                "{} cores, {} compartments, l_m {}",
                map.cores_used(),
                net.compartments(),
                map.l_m.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            );
            println!("wrote {}", path.display());
        }
        Command::Sweep(common) => {
            let cfg = common.resolve()?;
            let csv = harness::sweep_csv(&harness::sweep(&cfg)?);
            let path = out_file(&cfg, "sweep.csv")?;
            write(&path, &csv)?;
            print!("{csv}");
        }
        Command::Incremental { common, checkpoint } => {
            let cfg = common.resolve()?;
            let train = cfg.load_train()?;
            let test = cfg.load_test()?;
            let pretrained = checkpoint.as_deref().map(checkpoint::load_engine).transpose()?;
            let mut metrics = MetricsWriter::create(&out_file(&cfg, "incremental.csv")?)?;
            let report = harness::incremental(&cfg, &train, &test, pretrained, |r| {
                progress(r);
                metrics.write(r)
            })?;
            println!(
                "initial classes {:?}, increments {:?}",
                report.initial, report.increments
            );
            println!("final accuracy {:.4}", report.final_accuracy);
            if let Some(b) = report.baseline_accuracy {
                println!("joint baseline {b:.4}");
            }
        }
        Command::OracleTrain(common) => {
            let cfg = common.resolve()?;
            let train = cfg.load_train()?;
            let test = cfg.load_test()?;
            let mut metrics = MetricsWriter::create(&out_file(&cfg, "oracle_metrics.csv")?)?;
            let (fp, _) = harness::train_oracle(&cfg, &train, Some(&test), |r| {
                progress(r);
                metrics.write(r)
            })?;
            let ckpt = out_file(&cfg, "oracle.ckpt")?;
            checkpoint::save_oracle(&fp, &ckpt)?;
            println!("wrote {}", ckpt.display());
        }
        Command::OracleEval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let fp = match checkpoint::peek_kind(&checkpoint)?.as_str() {
                "engine" => FpNetwork::from_built(&checkpoint::load_engine(&checkpoint)?),
                _ => checkpoint::load_oracle(&checkpoint)?,
            };
            let test = cfg.load_test()?;
            print_report(&harness::evaluate_oracle(&fp, &test, None)?, test.len());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Structure(_) => 3,
        Error::Shape(_) => 4,
        Error::Overflow { .. } => 5,
        Error::Unmappable(_) => 6,
        Error::Data { .. } => 7,
        Error::Checkpoint(_) => 8,
        Error::Io { .. } => 9,
    }
}

fn main() -> ExitCode {
    let defaults: String = RunConfig::default()
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("  {k} = {v}\n"))
        .collect();
    let cmd = Cli::command().after_long_help(format!("Configuration keys and defaults:\n{defaults}"));
    let cmd =
        cmd.mut_subcommands(|s| s.after_long_help(format!("Configuration keys and defaults:\n{defaults}")));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
