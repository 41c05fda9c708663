//! Command-line dispatch.
//!
//! Exit codes: 0 success, 1 usage error, 2 load or input error, 3 numeric
//! failure. Failures print one diagnostic line to stderr.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{load_csv, load_points, split, standardize_apply, standardize_fit, write_table, SplitIndices, TabularDataset};
use crate::divergence::{hp_divergence_exact, hp_divergence_smoothed, LabeledPointSet};
use crate::eval::{compare, rmse, write_compare_csv, DEFAULT_SIGNIFICANCE};
use crate::loss::LossConfig;
use crate::model::{build_mlp, build_default_cnn, forward_eval, ModelSpec, SavedModel};
use crate::numerics::{Rng, Tensor};
use crate::sim::{run_simulation, LossKind, SimConfig};
use crate::train::{train, TrainConfig};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_LOAD: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Split shuffles draw from this stream of the run seed; training uses 0–2.
const SPLIT_STREAM: u64 = 3;

#[derive(Debug, Parser)]
#[command(name = "fdivreg", version, about = "Regression with nearest-neighbor divergence regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the divergence between two point sets.
    Divergence(DivergenceArgs),
    /// Train a model on a CSV table.
    Train(TrainArgs),
    /// Report RMSE of a saved model on a CSV table.
    Evaluate(EvaluateArgs),
    /// Compare two saved models with paired t-tests.
    Compare(CompareArgs),
    /// Run the quadratic grid-search simulation.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct DivergenceArgs {
    /// First point set (targets), one point per row.
    #[arg(long)]
    pub a: PathBuf,
    /// Second point set (predictions).
    #[arg(long)]
    pub b: PathBuf,
    /// Use the softmax-smoothed estimator (needs equal set sizes).
    #[arg(long)]
    pub smoothed: bool,
    #[arg(long, default_value_t = 2.0, value_parser = positive_f64)]
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Arch {
    /// Three conv/batchnorm/relu/pool blocks and a dense head.
    Cnn,
    /// Dense layers with relu; widths from --hidden.
    Mlp,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of trailing target columns.
    #[arg(long)]
    pub targets: usize,
    /// none | l1:S | l2:S | dropout:P | fdiv:w=W,gamma=G[,lambda=L]; repeatable.
    #[arg(long = "reg", value_parser = Reg::from_str)]
    pub regs: Vec<Reg>,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Arch::Cnn)]
    pub arch: Arch,
    /// Hidden widths for --arch mlp, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<usize>,
    /// Independent runs; run r trains with seed + r.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: u64,
    /// Keep the split drawn from --seed for every run instead of re-drawing it per run.
    #[arg(long)]
    pub fixed_split: bool,
    /// Feed raw features instead of standardizing on the training rows.
    #[arg(long)]
    pub no_standardize: bool,
    /// Model JSON for the first run; its report CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SIGNIFICANCE, value_parser = unit_open)]
    pub level: f64,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub runs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.5, value_parser = unit_closed)]
    pub gamma: f64,
    #[arg(long, default_value_t = 30)]
    pub n_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// One `--reg` item.
#[derive(Clone, Debug, PartialEq)]
pub enum Reg {
    None,
    L1(f64),
    L2(f64),
    Dropout(f64),
    Fdiv { w: f64, gamma: f64, lambda: Option<f64> },
}

impl FromStr for Reg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("not a number: {v:?}"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "none" if rest.is_empty() => Ok(Reg::None),
            "l1" | "l2" => {
                let v = num(rest)?;
                if v < 0.0 {
                    return Err(format!("{kind} strength must be >= 0"));
                }
                Ok(if kind == "l1" { Reg::L1(v) } else { Reg::L2(v) })
            }
            "dropout" => {
                let p = num(rest)?;
                if !(0.0..1.0).contains(&p) {
                    return Err("dropout rate must lie in [0, 1)".into());
                }
                Ok(Reg::Dropout(p))
            }
            "fdiv" => {
                let (mut w, mut gamma, mut lambda) = (None, None, None);
                for part in rest.split(',') {
                    let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got {part:?}"))?;
                    let slot = match k.trim() {
                        "w" => &mut w,
                        "gamma" => &mut gamma,
                        "lambda" => &mut lambda,
                        other => return Err(format!("unknown fdiv key {other:?}")),
                    };
                    *slot = Some(num(v)?);
                }
                let w = w.ok_or("fdiv needs w=")?;
                let gamma = gamma.ok_or("fdiv needs gamma=")?;
                if w < 0.0 || !(0.0..=1.0).contains(&gamma) || lambda.is_some_and(|l| l <= 0.0) {
                    return Err("fdiv needs w >= 0, gamma in [0, 1] and lambda > 0".into());
                }
                Ok(Reg::Fdiv { w, gamma, lambda })
            }
            _ => Err(format!("unknown regularizer {s:?}")),
        }
    }
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn unit_open(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("expected a number in (0, 1), got {s:?}")),
    }
}

fn unit_closed(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1], got {s:?}")),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(&cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Contract(_) | Error::Load(_) | Error::Io(_) | Error::Json(_) => EXIT_LOAD,
    }
}

pub fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Divergence(a) => cmd_divergence(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
    }
}

fn cmd_divergence(args: &DivergenceArgs, out: &mut dyn Write) -> Result<()> {
    let sets = LabeledPointSet::new(load_points(&args.a)?, load_points(&args.b)?)?;
    let report = if args.smoothed {
        hp_divergence_smoothed(&sets, args.lambda)?
    } else {
        hp_divergence_exact(&sets)?
    };
    writeln!(out, "n0 {}", report.n0)?;
    writeln!(out, "n1 {}", report.n1)?;
    writeln!(out, "cut_mass {}", report.cut_mass)?;
    writeln!(out, "d_raw {}", report.d_raw)?;
    writeln!(out, "d_clamped {}", report.d_clamped)?;
    Ok(())
}

/// Folds `--reg` items into a model spec and loss settings.
pub fn apply_regs(base: &ModelSpec, regs: &[Reg]) -> Result<(ModelSpec, LossConfig)> {
    let mut spec = base.clone();
    let mut loss = LossConfig::default();
    for reg in regs {
        match *reg {
            Reg::None => {}
            Reg::L1(s) => loss.l1_strength = s,
            Reg::L2(s) => loss.l2_strength = s,
            Reg::Dropout(p) => {
                ensure!(!spec.has_dropout(), "dropout given more than once");
                spec = spec.with_dropout_before_head(p)?;
            }
            Reg::Fdiv { w, gamma, lambda } => {
                loss.w = w;
                loss.gamma = gamma;
                if let Some(l) = lambda {
                    loss.lambda = l;
                }
            }
        }
    }
    loss.validate()?;
    Ok((spec, loss))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn scaled(model: &SavedModel, x: &Tensor) -> Result<Tensor> {
    match &model.scaler {
        Some(s) => standardize_apply(s, x),
        None => Ok(x.clone()),
    }
}

fn predict(model: &SavedModel, x: &Tensor) -> Result<Tensor> {
    forward_eval(&model.spec, &model.params, &scaled(model, x)?)
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let raw = load_csv(&args.data, args.targets)?;
    let base = match args.arch {
        Arch::Cnn => build_default_cnn(raw.n_features(), raw.n_targets())?,
        Arch::Mlp => {
            let widths: Vec<usize> =
                std::iter::once(raw.n_features()).chain(args.hidden.iter().copied()).chain([raw.n_targets()]).collect();
            build_mlp(&widths)?
        }
    };
    let (spec, loss) = apply_regs(&base, &args.regs)?;

    let mut summary = Vec::new();
    for r in 0..args.runs {
        let run_seed = args.seed.wrapping_add(r);
        let split_seed = if args.fixed_split { args.seed } else { run_seed };
        let splits = split(raw.len(), &mut Rng::new(split_seed).fork(SPLIT_STREAM))?;
        let (data, scaler) = if args.no_standardize {
            (raw.clone(), None)
        } else {
            let scaler = standardize_fit(&raw.x.select_rows(&splits.train)?);
            let x = standardize_apply(&scaler, &raw.x)?;
            (TabularDataset { x, ..raw.clone() }, Some(scaler))
        };
        let cfg = TrainConfig {
            epochs: args.epochs,
            batch_size: args.batch,
            lr: args.lr,
            loss: loss.clone(),
            seed: run_seed,
            ..Default::default()
        };
        let (params, report) = train(&spec, &data, &splits, &cfg)?;
        let model = SavedModel { spec: spec.clone(), params, scaler };
        let test_rmse = test_rmse(&model, &raw, &splits)?;
        if r == 0 {
            model.save(&args.out)?;
            report.write_csv(&sibling(&args.out, "report.csv"))?;
        }
        writeln!(
            out,
            "run {r} seed {run_seed}: best_epoch {} best_val_mse {} test_rmse {}",
            report.best_epoch, report.best_val_mse, test_rmse
        )?;
        summary.push(vec![r as f64, run_seed as f64, report.best_epoch as f64, report.best_val_mse, test_rmse]);
    }
    if args.runs > 1 {
        let header = ["run", "seed", "best_epoch", "best_val_mse", "test_rmse"].map(String::from);
        write_table(&sibling(&args.out, "runs.csv"), &header, &summary)?;
        let mean = summary.iter().map(|r| r[4]).sum::<f64>() / summary.len() as f64;
        writeln!(out, "mean test_rmse {mean}")?;
    }
    Ok(())
}

fn test_rmse(model: &SavedModel, raw: &TabularDataset, splits: &SplitIndices) -> Result<f64> {
    let test = raw.subset(&splits.test)?;
    Ok(rmse(&predict(model, &test.x)?, &test.y)?.overall)
}

fn load_eval_data(model: &SavedModel, path: &Path) -> Result<TabularDataset> {
    let data = load_csv(path, model.spec.output_dim())?;
    if data.n_features() != model.spec.input_dim() {
        return Err(Error::Load(format!(
            "{}: {} feature columns, model expects {}",
            path.display(),
            data.n_features(),
            model.spec.input_dim()
        )));
    }
    Ok(data)
}

fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let model = SavedModel::load(&args.model)?;
    let data = load_eval_data(&model, &args.data)?;
    let report = rmse(&predict(&model, &data.x)?, &data.y)?;
    writeln!(out, "target rmse")?;
    for (name, v) in data.target_names.iter().zip(&report.per_target) {
        writeln!(out, "{name} {v}")?;
    }
    writeln!(out, "all {}", report.overall)?;
    writeln!(out, "samples {}", report.samples)?;
    Ok(())
}

fn cmd_compare(args: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let a = SavedModel::load(&args.model_a)?;
    let b = SavedModel::load(&args.model_b)?;
    ensure!(
        a.spec.input_dim() == b.spec.input_dim() && a.spec.output_dim() == b.spec.output_dim(),
        "models disagree on input/output widths"
    );
    let data = load_eval_data(&a, &args.data)?;
    let rows = compare(&predict(&a, &data.x)?, &predict(&b, &data.x)?, &data.y, args.level)?;
    writeln!(out, "target rmse_a rmse_b t p significant")?;
    for row in &rows {
        let name = row.target.map_or("all", |j| data.target_names[j].as_str());
        let verdict = if row.test.significant { "yes" } else { "no" };
        writeln!(out, "{name} {} {} {} {} {verdict}", row.rmse_a, row.rmse_b, row.test.t, row.test.p)?;
    }
    if let Some(path) = &args.out {
        write_compare_csv(path, &rows)?;
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SimConfig {
        runs: args.runs as usize,
        seed: args.seed,
        sigma: args.sigma,
        gamma: args.gamma,
        n_points: args.n_points,
        ..Default::default()
    };
    let outcome = run_simulation(&cfg)?;
    outcome.write_csv(&args.out)?;
    writeln!(out, "runs {}", cfg.runs)?;
    writeln!(out, "hits_mse {}", outcome.hits(LossKind::Mse))?;
    writeln!(out, "hits_fdiv {}", outcome.hits(LossKind::Fdiv))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reg_parsing() {
        assert_eq!("none".parse::<Reg>().unwrap(), Reg::None);
        assert_eq!("l1:0.001".parse::<Reg>().unwrap(), Reg::L1(0.001));
        assert_eq!("l2:5e-5".parse::<Reg>().unwrap(), Reg::L2(5e-5));
        assert_eq!("dropout:0.05".parse::<Reg>().unwrap(), Reg::Dropout(0.05));
        assert_eq!(
            "fdiv:w=0.0001,gamma=0.02".parse::<Reg>().unwrap(),
            Reg::Fdiv { w: 0.0001, gamma: 0.02, lambda: None }
        );
        assert_eq!(
            "fdiv:gamma=0.5,w=1,lambda=0.5".parse::<Reg>().unwrap(),
            Reg::Fdiv { w: 1.0, gamma: 0.5, lambda: Some(0.5) }
        );
        for bad in ["", "l3:1", "l1:x", "l1:-1", "dropout:1", "fdiv:w=1", "fdiv:w=1,gamma=2", "fdiv:w=1,gamma=0.1,mu=2"] {
            assert!(bad.parse::<Reg>().is_err(), "{bad}");
        }
    }

    #[test]
    fn regs_combine() {
        let base = build_default_cnn(16, 2).unwrap();
        let regs = [Reg::L1(0.1), Reg::Dropout(0.05), Reg::Fdiv { w: 0.01, gamma: 0.02, lambda: None }];
        let (spec, loss) = apply_regs(&base, &regs).unwrap();
        assert!(spec.has_dropout());
        assert_eq!(spec.layers().len(), base.layers().len() + 1);
        assert_eq!((loss.l1_strength, loss.w, loss.gamma, loss.lambda), (0.1, 0.01, 0.02, 2.0));
        assert!(apply_regs(&base, &[Reg::Dropout(0.1), Reg::Dropout(0.2)]).is_err());
    }

    #[test]
    fn usage_errors() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["fdivreg", "bogus"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["fdivreg", "simulate"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["fdivreg", "simulate", "--out", "x", "--frobnicate"], &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["fdivreg", "--help"], &mut out, &mut err), EXIT_OK);
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("/a/m.json"), "report.csv"), PathBuf::from("/a/m.report.csv"));
        assert_eq!(sibling(Path::new("m"), "runs.csv"), PathBuf::from("m.runs.csv"));
    }
}
