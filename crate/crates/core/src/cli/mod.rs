//! The `flowvo` command line: dataset generation, training, experiments,
//! trajectory evaluation and plot-data export.
//!
//! Exit codes: 0 ok, 2 config or parse error, 3 I/O error, 4 training
//! diverged, 5 length, timestamp or shape mismatch.

pub mod config;
pub mod formats;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{evaluate, AlignMode, DESK_SEGMENTS};
use crate::losses::LossVariant;
use crate::model::PoseNet;
use crate::synthgen::generate_split;
use crate::trainer::{
    experiment_data_quantity, experiment_rcr_il, experiment_up_to_scale, ExperimentConfig, LossCurve, TestSet,
    Trainer,
};
use config::{experiment_entries, experiment_from_file, ConfigFile, GenerateConfig, TrainFileConfig};
use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "FLOWVO_OUT";
pub const EXPERIMENTS: [&str; 3] = ["data_quantity", "up_to_scale", "rcr_il"];

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STATE_FILE: &str = "state.bin";
pub const CURVE_FILE: &str = "curve.tsv";
pub const TABLE_FILE: &str = "table.tsv";
pub const REPORT_FILE: &str = "report.tsv";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Mismatch(_) | Error::ShapeMismatch { .. } => EXIT_MISMATCH,
        _ => EXIT_CONFIG,
    }
}

fn parse_variant(s: &str) -> std::result::Result<LossVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "flowvo", version, about = "Monocular visual odometry from optical flow: data, training, evaluation")]
struct Cli {
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Translation loss: full, cos, cos-printed or norm.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<LossVariant>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic flow dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a pose network on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out datasets evaluated at every curve record.
        #[arg(long = "test")]
        tests: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the saved state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Save the state and stop after this many steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run one of the experiments: data_quantity, up_to_scale, rcr_il.
    Experiment {
        name: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare an estimated trajectory with ground truth (KITTI or TUM files).
    Eval {
        est: PathBuf,
        gt: PathBuf,
        /// similarity, rigid or none.
        #[arg(long, default_value = "similarity")]
        align: String,
        /// Comma-separated drift segment lengths.
        #[arg(long)]
        segments: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export loss curves of a run as step/train/test columns.
    Plotdata {
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write translation- and rotation-term panels.
        #[arg(long)]
        terms: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        // fails only if a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn out_dir(explicit: &Option<PathBuf>, command: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command)
    })
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    ConfigFile::parse(&fs::read_to_string(path)?)
}

/// Runs `body` and appends one manifest to `dir` whether it succeeds or not.
fn with_manifest(
    dir: &Path,
    command: &str,
    config: Vec<(String, String)>,
    seed: u64,
    body: impl FnOnce() -> Result<Vec<PathBuf>>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = RunManifest::begin(command, config, seed);
    let result = body();
    match &result {
        Ok(outputs) => m.finish(outputs, "ok"),
        Err(e) => m.finish(&[], &e.to_string()),
    }
    m.append(dir)?;
    result.map(|_| ())
}

fn write_text(path: PathBuf, text: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text)?;
    outputs.push(path);
    Ok(())
}

fn write_net(path: PathBuf, net: &PoseNet, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(&path)?);
    net.write_checkpoint(&mut w)?;
    w.flush()?;
    outputs.push(path);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { config, out } => {
            let mut cfg = GenerateConfig::from_file(&read_config(config)?)?;
            if let Some(s) = cli.seed {
                cfg.scene.seed = s;
            }
            let dir = out_dir(out, "generate");
            with_manifest(&dir, "generate", cfg.entries(), cfg.scene.seed, || {
                let samples = generate_split(&cfg.scene, &cfg.environments, cfg.samples, cfg.pattern)?;
                formats::write_dataset(&dir, &samples, &cfg.entries())
            })
        }
        Command::Train {
            data,
            config,
            tests,
            out,
            resume,
            stop_after,
        } => {
            let mut cfg = match config {
                Some(p) => TrainFileConfig::from_file(&read_config(p)?)?,
                None => TrainFileConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if let Some(v) = cli.variant {
                cfg.train.variant = v;
            }
            cfg.train.validate()?;
            let dir = out_dir(out, "train");
            let mut echo = cfg.entries();
            echo.push(("data".into(), data.display().to_string()));
            with_manifest(&dir, "train", echo, cfg.train.seed, || {
                cmd_train(&cfg, data, tests, &dir, *resume, *stop_after)
            })
        }
        Command::Experiment { name, config, out } => {
            if !EXPERIMENTS.contains(&name.as_str()) {
                return Err(Error::InvalidArgument {
                    what: "experiment",
                    reason: format!("unknown experiment {name:?}; expected one of {}", EXPERIMENTS.join(", ")),
                });
            }
            let file = match config {
                Some(p) => read_config(p)?,
                None => ConfigFile::default(),
            };
            let mut cfg = experiment_from_file(&file, ExperimentConfig::default())?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
                cfg.scene.seed = s;
            }
            if let Some(v) = cli.variant {
                cfg.train.variant = v;
            }
            cfg.validate()?;
            let dir = out_dir(out, name);
            with_manifest(&dir, &format!("experiment {name}"), experiment_entries(&cfg), cfg.train.seed, || {
                cmd_experiment(name, &cfg, &dir)
            })
        }
        Command::Eval {
            est,
            gt,
            align,
            segments,
            out,
        } => {
            let mode: AlignMode = align.parse()?;
            let segments: Vec<f64> = match segments {
                Some(s) => s
                    .split(',')
                    .map(|v| {
                        v.trim().parse().map_err(|_| Error::InvalidArgument {
                            what: "segments",
                            reason: format!("not a number: {v:?}"),
                        })
                    })
                    .collect::<Result<_>>()?,
                None => DESK_SEGMENTS.to_vec(),
            };
            let e = formats::parse_trajectory(&fs::read_to_string(est)?)?;
            let g = formats::parse_trajectory(&fs::read_to_string(gt)?)?;
            let (e, g) = formats::match_trajectories(e, g)?;
            let report = evaluate(&e, &g, mode, &segments)?;
            let text = report.to_text();
            print!("{text}");
            if let Some(dir) = out {
                let echo = vec![
                    ("est".to_string(), est.display().to_string()),
                    ("gt".to_string(), gt.display().to_string()),
                    ("align".to_string(), mode.to_string()),
                    ("segments".to_string(), segments.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
                ];
                with_manifest(dir, "eval", echo, 0, || {
                    let mut outputs = Vec::new();
                    write_text(dir.join(REPORT_FILE), &text, &mut outputs)?;
                    Ok(outputs)
                })?;
            }
            Ok(())
        }
        Command::Plotdata { run, out, terms } => {
            let dir = out.clone().unwrap_or_else(|| run.join("plot"));
            let curves = find_curves(run)?;
            let echo = vec![("run".to_string(), run.display().to_string())];
            with_manifest(&dir, "plotdata", echo, 0, || {
                let mut outputs = Vec::new();
                for path in &curves {
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
                    let text = fs::read_to_string(path)?;
                    let panels: &[&str] = if *terms { &["", "_translation", "_rotation"] } else { &[""] };
                    for suffix in panels {
                        let panel = plot_panel(&text, suffix)?;
                        write_text(dir.join(format!("plot_{stem}{suffix}.tsv")), &panel, &mut outputs)?;
                    }
                }
                Ok(outputs)
            })
        }
    }
}

fn cmd_train(
    cfg: &TrainFileConfig,
    data: &Path,
    tests: &[PathBuf],
    dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let dataset = formats::read_dataset(data)?;
    let test_data = tests.iter().map(|p| formats::read_dataset(p)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = tests
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("test{i}"))
        })
        .collect();
    let test_sets: Vec<TestSet<'_>> = names
        .iter()
        .zip(&test_data)
        .map(|(n, s)| TestSet { name: n, samples: s })
        .collect();
    let state_path = dir.join(STATE_FILE);
    let mut trainer = if resume && state_path.exists() {
        Trainer::load(io::BufReader::new(fs::File::open(&state_path)?), &cfg.train)?
    } else {
        let net = PoseNet::new(crate::model::PoseNetConfig {
            seed: cfg.train.seed,
            in_channels: if cfg.train.use_il { 4 } else { 2 },
            ..cfg.net.clone()
        })?;
        Trainer::new(net, cfg.train.clone())?
    };
    let until = stop_after.unwrap_or(cfg.train.iterations);
    trainer.run(&dataset, &test_sets, until)?;
    let mut outputs = Vec::new();
    let mut w = BufWriter::new(fs::File::create(&state_path)?);
    trainer.save(&mut w)?;
    w.flush()?;
    outputs.push(state_path);
    write_text(dir.join(CURVE_FILE), &trainer.curve().to_tsv(), &mut outputs)?;
    if trainer.is_done() {
        write_net(dir.join(CHECKPOINT_FILE), trainer.net(), &mut outputs)?;
    }
    Ok(outputs)
}

fn cmd_experiment(name: &str, cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut outputs = Vec::new();
    let curve = |label: &str, c: &LossCurve, net: &PoseNet, outputs: &mut Vec<PathBuf>| -> Result<()> {
        write_text(dir.join(format!("curve_{label}.tsv")), &c.to_tsv(), outputs)?;
        write_net(dir.join(format!("checkpoint_{label}.bin")), net, outputs)
    };
    match name {
        "data_quantity" => {
            let r = experiment_data_quantity(&cfg.sizes, cfg)?;
            for run in &r.runs {
                curve(&run.label, &run.curve, &run.net, &mut outputs)?;
            }
            write_text(dir.join(TABLE_FILE), &r.to_tsv(), &mut outputs)?;
        }
        "up_to_scale" => {
            let r = experiment_up_to_scale(cfg)?;
            for run in [&r.full, &r.norm] {
                curve(&run.label, &run.curve, &run.net, &mut outputs)?;
            }
            write_text(dir.join(TABLE_FILE), &r.to_tsv(), &mut outputs)?;
        }
        "rcr_il" => {
            let r = experiment_rcr_il(cfg)?;
            for row in &r.rows {
                let label = format!(
                    "{}_{}",
                    if row.use_rcr { "rcr" } else { "norcr" },
                    if row.use_il { "il" } else { "noil" }
                );
                curve(&label, &row.curve, &row.net, &mut outputs)?;
            }
            write_text(dir.join(TABLE_FILE), &r.to_tsv(), &mut outputs)?;
        }
        other => {
            return Err(Error::InvalidArgument {
                what: "experiment",
                reason: format!("unknown experiment {other:?}"),
            })
        }
    }
    Ok(outputs)
}

/// Curve files of a run directory, sorted by name.
pub fn find_curves(run: &Path) -> Result<Vec<PathBuf>> {
    let mut curves: Vec<PathBuf> = fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "tsv")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("curve"))
        })
        .collect();
    curves.sort();
    if curves.is_empty() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no curve files in {}", run.display()),
        )));
    }
    Ok(curves)
}

/// Selects `step`, the train column and every test column carrying `suffix`
/// (empty for totals) from a curve table.
fn plot_panel(curve: &str, suffix: &str) -> Result<String> {
    let mut lines = curve.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("empty curve file".into()))?
        .split('\t')
        .collect();
    let is_term = |c: &str| c.ends_with("_translation") || c.ends_with("_rotation");
    let keep: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            *i == 0
                || if suffix.is_empty() {
                    !is_term(c)
                } else {
                    c.ends_with(suffix)
                }
        })
        .map(|(i, _)| i)
        .collect();
    let mut out = String::new();
    let head: Vec<String> = keep
        .iter()
        .map(|&i| header[i].strip_suffix(suffix).filter(|_| !suffix.is_empty()).unwrap_or(header[i]).to_string())
        .collect();
    out.push_str(&head.join("\t"));
    out.push('\n');
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != header.len() {
            return Err(Error::Parse {
                line: n + 2,
                message: format!("expected {} columns, got {}", header.len(), cells.len()),
            });
        }
        let row: Vec<&str> = keep.iter().map(|&i| cells[i]).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Io(io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::Diverged { step: 1, loss: f64::NAN }), 4);
        assert_eq!(exit_code(&Error::Mismatch("x".into())), 5);
        assert_eq!(exit_code(&Error::Parse { line: 1, message: "x".into() }), 2);
    }

    #[test]
    fn panels_select_columns() {
        let curve = "step\ttrain\ttrain_translation\ttrain_rotation\ta\ta_translation\ta_rotation\n\
                     10\t1\t0.5\t0.5\t2\t1.5\t0.5\n";
        assert_eq!(plot_panel(curve, "").unwrap(), "step\ttrain\ta\n10\t1\t2\n");
        assert_eq!(
            plot_panel(curve, "_translation").unwrap(),
            "step\ttrain\ta\n10\t0.5\t1.5\n"
        );
        assert!(plot_panel("step\ttrain\n1\n", "").is_err());
    }
}
