use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    emit_report, evaluate_accuracy, feature_correlations, lens_correlations, parse_report_csv, report_csv,
    EvalSpec, LensPipeline, Pipeline, PlainPipeline, ResultRow, ScatterPoint, SelectionMode, XlayerPipeline,
};
use crate::checkpoint::{load_checkpoint, load_into, param_entries, params_from_entries, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{data_dir, load_mnist_dir, make_rotated_dataset, AngleDistribution, Dataset, Split};
use crate::error::{Error, Result};
use crate::host::{FrozenHost, Host, HostConfig};
use crate::lens::{Lens, LensInit, LensRegistry, LensShape, RotationClassifier, RotationLens, ScalingLens};
use crate::loss::LossMode;
use crate::train::{
    train_dataaug, train_host, train_lens, train_rot_classifier, train_xlayer, AugPolicy, TrainLog, Xlayer,
};
use crate::transform::LensBin;

#[derive(Debug, Parser)]
#[command(name = "featlens", version, about = "Feature lenses on a small frozen MNIST host")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// key = value settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for checkpoints, logs and tables.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// MNIST directory; defaults to FEATLENS_DATA_DIR or ./data/mnist.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the host classifier on upright digits.
    TrainHost,
    /// Train one lens against the frozen host.
    TrainLens {
        #[arg(long)]
        transform: BinArg,
        #[arg(long, default_value = "tac")]
        loss: LossArg,
    },
    /// Train a supervised baseline.
    TrainBaseline { kind: BaselineArg },
    /// Train the rotation-type classifier.
    TrainRotclf,
    /// Accuracy of one method; appends a row to results.csv.
    Eval {
        #[arg(long, default_value = "lenses")]
        method: MethodArg,
        #[arg(long, default_value = "true")]
        select: SelectArg,
        /// Inclusive angle window, e.g. 45,315.
        #[arg(long, value_parser = parse_window, default_value = "45,315")]
        filter_angles: (f64, f64),
        /// Evaluate upright test digits instead of randomly rotated ones.
        #[arg(long)]
        upright: bool,
        /// Loss the evaluated lenses were trained with.
        #[arg(long, default_value = "tac")]
        loss: LossArg,
    },
    /// Feature correlations and per-transform accuracy; writes correlation.csv.
    AnalyzeCorrelation {
        #[arg(long, default_value = "tac")]
        loss: LossArg,
    },
    /// Merges results into report.csv and draws scatter.svg.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BinArg {
    Rot90,
    Rot180,
    Rot270,
    Scale2,
    Scale3,
}

impl From<BinArg> for LensBin {
    fn from(b: BinArg) -> LensBin {
        match b {
            BinArg::Rot90 => LensBin::Rot90,
            BinArg::Rot180 => LensBin::Rot180,
            BinArg::Rot270 => LensBin::Rot270,
            BinArg::Scale2 => LensBin::Scale2,
            BinArg::Scale3 => LensBin::Scale3,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Tac,
    Mse,
    Mae,
    #[value(name = "mse+tac")]
    MseTac,
    #[value(name = "mae+tac")]
    MaeTac,
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> LossMode {
        match l {
            LossArg::Tac => LossMode::Tac,
            LossArg::Mse => LossMode::Mse,
            LossArg::Mae => LossMode::Mae,
            LossArg::MseTac => LossMode::MseTac,
            LossArg::MaeTac => LossMode::MaeTac,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaselineArg {
    Xlayer,
    Dataaug,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum MethodArg {
    Host,
    Lenses,
    Xlayer,
    Dataaug,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SelectArg {
    True,
    Predicted,
    None,
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad bound `{a}`"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad bound `{b}`"))?;
    Ok((lo, hi))
}

/// Parses `argv` and runs the command. Returns the process exit code: 0 on
/// success, 1 for usage errors, 2 for runtime failures.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    data: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn train_set(&self, limit: usize) -> Result<Dataset> {
        let d = load_mnist_dir(&self.data, Split::Train)?;
        Ok(if limit == 0 { d } else { d.take(limit) })
    }

    fn test_set(&self) -> Result<Dataset> {
        let d = load_mnist_dir(&self.data, Split::Test)?;
        Ok(if self.cfg.test_limit == 0 { d } else { d.take(self.cfg.test_limit) })
    }

    fn host(&self, name: &str) -> Result<FrozenHost> {
        Ok(Host::from_entries(&load_checkpoint(&self.path(name))?)?.freeze())
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn lens_file(bin: LensBin, loss: LossMode) -> String {
        format!("lens_{}_{}.flns", bin.name(), loss.name().replace('+', "_"))
    }
}

fn new_lens(host: &FrozenHost, bin: LensBin, cfg: &RunConfig) -> Result<Lens> {
    let shape = LensShape::for_host(host.config(), cfg.groups);
    let init = LensInit::from_host(host, cfg.lens_init_noise)?;
    let seed = cfg.seed.wrapping_add(bin as u64);
    Ok(if bin.is_scaling() {
        Lens::Scaling(ScalingLens::new(bin, shape, host.config(), cfg.canvas, &init, seed)?)
    } else {
        Lens::Rotation(RotationLens::new(bin, shape, &init, seed)?)
    })
}

/// Rotation lenses trained with `loss` that exist in the output directory.
fn load_registry(ctx: &Ctx, host: &FrozenHost, loss: LossMode) -> Result<LensRegistry> {
    let mut reg = LensRegistry::new();
    for bin in [LensBin::Rot90, LensBin::Rot180, LensBin::Rot270] {
        let p = ctx.path(&Ctx::lens_file(bin, loss));
        if !p.exists() {
            continue;
        }
        let mut lens = new_lens(host, bin, &ctx.cfg)?;
        load_into(lens.params_mut(), &load_checkpoint(&p)?, &format!("lens.{}.", bin.name()))?;
        reg.insert(lens)?;
    }
    Ok(reg)
}

fn save_log(ctx: &Ctx, name: &str, log: &TrainLog) -> Result<()> {
    ctx.write(name, &log.to_csv())
}

fn append_rows(ctx: &Ctx, name: &str, rows: &[ResultRow]) -> Result<()> {
    let p = ctx.path(name);
    let mut existing = if p.exists() {
        parse_report_csv(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
    } else {
        Vec::new()
    };
    existing.extend_from_slice(rows);
    ctx.write(name, &report_csv(&existing))
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    let root = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    let ctx = Ctx {
        data: cli.common.data.clone().unwrap_or_else(|| data_dir(&root)),
        out: cli.common.out.clone(),
        cfg,
    };
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let cfg = &ctx.cfg;
    match &cli.command {
        Command::TrainHost => {
            let data = ctx.train_set(cfg.host_train_limit)?;
            let host_cfg = HostConfig {
                seed: cfg.seed,
                ..HostConfig::default()
            };
            let (host, log) = train_host(host_cfg, &data, &cfg.host_train_config())?;
            save_checkpoint(&host.to_entries(), &ctx.path("host.flns"))?;
            save_log(&ctx, "host_log.csv", &log)
        }
        Command::TrainLens { transform, loss } => {
            let host = ctx.host("host.flns")?;
            let (bin, mode): (LensBin, LossMode) = ((*transform).into(), (*loss).into());
            let data = ctx.train_set(cfg.aux_train_limit)?;
            let mut lens = new_lens(&host, bin, cfg)?;
            let tc = cfg.aux_train_config(data.len(), cfg.lens_steps, cfg.lens_lr(mode), mode);
            let log = train_lens(&host, bin, Some(&mut lens), &data, &tc, cfg.canvas)?;
            let file = Ctx::lens_file(bin, mode);
            save_checkpoint(&param_entries(lens.params(), &format!("lens.{}.", bin.name())), &ctx.path(&file))?;
            save_log(&ctx, &file.replace(".flns", "_log.csv"), &log)
        }
        Command::TrainBaseline { kind } => match kind {
            BaselineArg::Xlayer => {
                let host = ctx.host("host.flns")?;
                let data = make_rotated_dataset(
                    &ctx.train_set(cfg.aux_train_limit)?,
                    &AngleDistribution::Choice(vec![90.0, 180.0, 270.0]),
                    cfg.seed,
                );
                let mut xl = Xlayer::new(host.config(), cfg.seed)?;
                let tc = cfg.aux_train_config(data.len(), cfg.xlayer_steps, cfg.aux_lr, LossMode::Tac);
                let log = train_xlayer(&host, &mut xl, &data, &tc)?;
                save_checkpoint(&param_entries(xl.params(), "xlayer."), &ctx.path("xlayer.flns"))?;
                save_log(&ctx, "xlayer_log.csv", &log)
            }
            BaselineArg::Dataaug => {
                let data = ctx.train_set(cfg.host_train_limit)?;
                let host_cfg = HostConfig {
                    seed: cfg.seed,
                    ..HostConfig::default()
                };
                let (host, log) = train_dataaug(host_cfg, &data, &AugPolicy::small_dataset(), &cfg.host_train_config())?;
                save_checkpoint(&host.to_entries(), &ctx.path("dataaug.flns"))?;
                save_log(&ctx, "dataaug_log.csv", &log)
            }
        },
        Command::TrainRotclf => {
            let host = ctx.host("host.flns")?;
            let data = ctx.train_set(cfg.aux_train_limit)?;
            let hc = host.config();
            let mut clf = RotationClassifier::new(hc.bottleneck_width + hc.block_width())?;
            let tc = cfg.aux_train_config(data.len(), cfg.rotclf_steps, cfg.aux_lr, LossMode::Tac);
            let log = train_rot_classifier(&host, &mut clf, &data, &tc)?;
            save_checkpoint(&param_entries(clf.params(), "rotclf."), &ctx.path("rotclf.flns"))?;
            save_log(&ctx, "rotclf_log.csv", &log)
        }
        Command::Eval {
            method,
            select,
            filter_angles,
            upright,
            loss,
        } => {
            let test = ctx.test_set()?;
            let (data, dataset_name) = if *upright {
                (test, "mnist")
            } else {
                (
                    make_rotated_dataset(&test, &AngleDistribution::Uniform { lo: 0.0, hi: 360.0 }, cfg.seed),
                    "mnist-rot",
                )
            };
            let host = ctx.host(if *method == MethodArg::Dataaug { "dataaug.flns" } else { "host.flns" })?;
            let mut eval = EvalSpec {
                angle_filter: if *upright { None } else { Some(*filter_angles) },
                batch_size: cfg.eval_batch,
                input_hw: host.config().input_hw,
                policy: cfg.canvas,
            };
            eval.validate()?;
            let mode: LossMode = (*loss).into();
            let (registry, classifier, xlayer);
            let mut label = format!("{method:?}").to_lowercase();
            let pipeline: Box<dyn Pipeline> = match method {
                MethodArg::Host | MethodArg::Dataaug => Box::new(PlainPipeline(&host)),
                MethodArg::Xlayer => {
                    xlayer = Xlayer::from_params(params_from_entries(&load_checkpoint(&ctx.path("xlayer.flns"))?, "xlayer.")?);
                    Box::new(XlayerPipeline { host: &host, xlayer: &xlayer })
                }
                MethodArg::Lenses => {
                    registry = load_registry(&ctx, &host, mode)?;
                    let sel = match select {
                        SelectArg::True => SelectionMode::TrueTransform,
                        SelectArg::Predicted => SelectionMode::Predicted,
                        SelectArg::None => SelectionMode::None,
                    };
                    classifier = if matches!(sel, SelectionMode::Predicted) {
                        Some(RotationClassifier::from_params(params_from_entries(
                            &load_checkpoint(&ctx.path("rotclf.flns"))?,
                            "rotclf.",
                        )?)?)
                    } else {
                        None
                    };
                    label = format!("lenses-{}", mode.name());
                    Box::new(LensPipeline {
                        host: &host,
                        registry: &registry,
                        mode: sel,
                        classifier: classifier.as_ref(),
                    })
                }
            };
            if *upright {
                eval.angle_filter = None;
            }
            let report = evaluate_accuracy(pipeline.as_ref(), &data, &eval)?;
            let metric = format!("accuracy-select-{}", format!("{select:?}").to_lowercase());
            println!("{label} {dataset_name} {metric} {:.4} ({}/{})", report.accuracy, report.correct, report.total);
            append_rows(&ctx, "results.csv", &[ResultRow::new(&label, dataset_name, &metric, report.accuracy)])
        }
        Command::AnalyzeCorrelation { loss } => {
            let host = ctx.host("host.flns")?;
            let test = ctx.test_set()?;
            let registry = load_registry(&ctx, &host, (*loss).into())?;
            let hw = host.config().input_hw;
            let mut rows = Vec::new();
            let lens_label = format!("lenses-{}", LossMode::from(*loss).name());
            for bin in LensBin::ROTATIONS {
                let spec = bin.spec();
                let fixed = test.clone().with_specs(vec![spec; test.len()])?;
                let e = feature_correlations(&host, &test, &spec, cfg.eval_batch)?;
                let acc = evaluate_accuracy(&PlainPipeline(&host), &fixed, &EvalSpec::unfiltered(hw))?;
                rows.push(ResultRow::new("host", bin.name(), "whole_r", e.whole_r));
                rows.push(ResultRow::new("host", bin.name(), "channel_r", e.channel_r));
                rows.push(ResultRow::new("host", bin.name(), "accuracy", acc.accuracy));
                if let Ok(Some(lens)) = registry.resolve(bin) {
                    let e = lens_correlations(&host, lens, &test, cfg.eval_batch)?;
                    let lp = LensPipeline {
                        host: &host,
                        registry: &registry,
                        mode: SelectionMode::TrueTransform,
                        classifier: None,
                    };
                    let acc = evaluate_accuracy(&lp, &fixed, &EvalSpec::unfiltered(hw))?;
                    rows.push(ResultRow::new(&lens_label, bin.name(), "whole_r", e.whole_r));
                    rows.push(ResultRow::new(&lens_label, bin.name(), "channel_r", e.channel_r));
                    rows.push(ResultRow::new(&lens_label, bin.name(), "accuracy", acc.accuracy));
                }
            }
            for r in &rows {
                println!("{} {} {} {:.4}", r.method, r.transform, r.metric, r.value);
            }
            ctx.write("correlation.csv", &report_csv(&rows))
        }
        Command::Report => {
            let mut rows = Vec::new();
            for name in ["results.csv", "correlation.csv"] {
                let p = ctx.path(name);
                if p.exists() {
                    rows.extend(parse_report_csv(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?);
                }
            }
            emit_report(&rows, &scatter_points(&rows), &ctx.out)
        }
    }
}

/// One point per (method, transform) that has both a whole-feature
/// correlation and an accuracy.
pub fn scatter_points(rows: &[ResultRow]) -> Vec<ScatterPoint> {
    let find = |m: &str, t: &str, metric: &str| {
        rows.iter()
            .find(|r| r.method == m && r.transform == t && r.metric == metric)
            .map(|r| r.value)
    };
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.metric == "whole_r") {
        let key = (r.method.clone(), r.transform.clone());
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        if let Some(acc) = find(&r.method, &r.transform, "accuracy") {
            out.push(ScatterPoint {
                label: format!("{} {}", r.method, r.transform),
                x: r.value,
                y: acc,
            });
        }
    }
    out
}
