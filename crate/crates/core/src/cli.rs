//! Command-line front end. `run_cli` never exits the process; it returns the
//! exit code (0 ok, 1 usage, 2 data, 3 numeric).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::attacks::{apply, fgm, fgsm, pgd, AttackConfig, Init, ModelObjective, Norm, ThreatModel};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corruptions::{parse_kinds, Kind, VALIDATION_KINDS};
use crate::data::{gen_synthetic, load_cifar10_binary, load_records, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graph::{gradcheck, random::random_case, Mode};
use crate::metrics::{
    all_logits, distance_error_correlation, distance_stats, l2_distances, parse_grid, predictions, sigma_probe,
    temperature_rescale, NoiseShape, EVAL_CHUNK,
};
use crate::model::ModelGraph;
use crate::perceptual::{lpa_attack, lpips, LpaConfig, LpipsConfig};
use crate::report::{attach_mce, evaluate_method, render, Curve, Format, Results};
use crate::training::{train, EvalSets, TrainConfig};

pub const THREADS_ENV: &str = "CORROBUST_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "corrobust",
    version,
    about = "Adversarial training and evaluation for common-corruption robustness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Clean and corruption accuracy, ECE and temperature rescaling.
    Eval(EvalArgs),
    /// Accuracy under an adversarial attack.
    Attack(AttackArgs),
    /// Loss under additive noise over a grid of magnitudes.
    ProbeSigma(ProbeArgs),
    /// Clean-to-corrupted distances per corruption and severity.
    Distances(DistanceArgs),
    /// ECE before and after temperature rescaling on clean data.
    Calibrate(CalibrateArgs),
    /// Train and evaluate over a grid of one config field and several seeds.
    Sweep(SweepArgs),
    /// Render a results JSON as CSV or Markdown.
    Report(ReportArgs),
    /// Check reverse-mode gradients on random graphs against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset: a CIFAR-10 binary file, `synthetic:k=v,...` or `records:PATH:CxHxW:K`.
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    /// Evaluated after every epoch when given.
    #[arg(long)]
    eval_data: Option<String>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Writes the per-epoch log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: String,
    /// `all` or a comma-separated list of corruption names.
    #[arg(long, default_value = "all")]
    corruptions: String,
    /// Evaluate only the held-out validation corruptions.
    #[arg(long)]
    validation_split: bool,
    /// Reference model for mCE.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AttackMethod {
    Fgm,
    Fgsm,
    Pgd,
    Lpa,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormArg {
    L2,
    Linf,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: String,
    #[arg(long, value_enum)]
    method: AttackMethod,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    steps: Option<usize>,
    /// Step length for pgd and lpa; defaults to 2 * eps / steps for pgd
    /// and a dimension-scaled length for lpa.
    #[arg(long)]
    step: Option<f32>,
    /// Norm for pgd.
    #[arg(long, value_enum, default_value = "l2")]
    p: NormArg,
    /// LPIPS feature extractor for lpa; defaults to the attacked model.
    #[arg(long)]
    lpips_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: String,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long, default_value = "0:0.2:0.01")]
    grid: String,
    /// Draw noise uniformly on the sphere of radius sigma * sqrt(d).
    #[arg(long)]
    sphere: bool,
    #[arg(long, default_value_t = 1)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes `sigma,loss` rows.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    L2,
    Lpips,
}

#[derive(Args, Debug)]
struct DistanceArgs {
    #[arg(long)]
    data: String,
    #[arg(long, value_enum, default_value = "l2")]
    metric: MetricArg,
    #[arg(long)]
    lpips_ckpt: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    corruptions: String,
    /// Also correlates the distances with this model's errors.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: String,
    /// Evaluation set; defaults to the training set.
    #[arg(long)]
    eval_data: Option<String>,
    /// Name of the config field to vary.
    #[arg(long)]
    param: String,
    #[arg(long)]
    grid: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "all")]
    corruptions: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    graphs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

/// Parses `argv` (including the program name), runs the command and maps
/// the outcome to an exit code. Output goes to `out`, diagnostics to `err`.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = write!(out, "{}", e.render());
            } else {
                let _ = write!(err, "{}", e.render());
            }
            return code;
        }
    };
    if let Err(e) = threads_setting() {
        let _ = writeln!(err, "error: {e}");
        return e.exit_code();
    }
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// `CORROBUST_THREADS`: unset or 0 selects the bit-exact single-threaded
/// path. All kernels currently run on one thread regardless.
pub fn threads_setting() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Attack(a) => cmd_attack(a, out),
        Command::ProbeSigma(a) => cmd_probe(a, out),
        Command::Distances(a) => cmd_distances(a, out),
        Command::Calibrate(a) => cmd_calibrate(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

/// Dataset argument: a CIFAR-10 binary path, `synthetic:classes=4,size=16,
/// spc=500,seed=1` (any subset of keys) or `records:PATH:3x16x16:4`.
pub fn load_data(spec: &str) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synthetic") {
        let mut s = SyntheticSpec::desk(500, 0);
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value in {spec:?}, got {kv:?}")))?;
            let n: u64 = v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{k} must be an integer, got {v:?}")))?;
            match k {
                "classes" => s.classes = n as usize,
                "size" => s.size = n as usize,
                "spc" | "samples_per_class" => s.samples_per_class = n as usize,
                "seed" => s.seed = n,
                _ => return Err(Error::InvalidArgument(format!("unknown synthetic option {k:?}"))),
            }
        }
        return gen_synthetic(&s);
    }
    if let Some(rest) = spec.strip_prefix("records:") {
        let parts: Vec<&str> = rest.rsplitn(3, ':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected records:PATH:CxHxW:K, got {spec:?}"
            )));
        }
        let bad = || Error::InvalidArgument(format!("bad record shape in {spec:?}"));
        let classes: usize = parts[0].parse().map_err(|_| bad())?;
        let dims: Vec<usize> = parts[1]
            .split('x')
            .map(|d| d.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let shape: [usize; 3] = dims.try_into().map_err(|_| bad())?;
        return load_records(Path::new(parts[2]), shape, classes);
    }
    load_cifar10_binary(Path::new(spec))
}

fn kinds_arg(corruptions: &str, validation_split: bool) -> Result<Vec<Kind>> {
    if validation_split {
        Ok(VALIDATION_KINDS.to_vec())
    } else {
        parse_kinds(corruptions)
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn emit(out: &mut dyn Write, s: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{s}")?;
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = TrainConfig::from_json(&fs::read_to_string(&a.config)?)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = load_data(&a.data)?;
    let eval = a.eval_data.as_deref().map(load_data).transpose()?;
    let (model, meta, log) = train(
        &cfg,
        &data,
        EvalSets {
            clean: eval.as_ref(),
            corrupted: None,
        },
    )?;
    for r in &log.epochs {
        let acc = r
            .clean_eval_acc
            .map(|v| format!(" eval_acc {v:.4}"))
            .unwrap_or_default();
        emit(
            out,
            format_args!(
                "epoch {} lr {} loss {:.4}{acc} ({:.1}s)",
                r.epoch, r.lr, r.train_loss, r.seconds
            ),
        )?;
    }
    save_checkpoint(&model, &meta, &a.out)?;
    if let Some(p) = &a.log {
        write_json(p, &log)?;
    }
    emit(out, format_args!("saved {}", a.out.display()))
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let kinds = kinds_arg(&a.corruptions, a.validation_split)?;
    let mut results = Results::new(
        "eval",
        json!({"ckpt": a.ckpt, "data": a.data, "corruptions": kinds, "seed": a.seed}),
    );
    let name = meta.method.clone();
    results
        .tables
        .methods
        .push(evaluate_method(&name, &model, &data, &kinds, a.seed)?);
    if let Some(b) = &a.baseline {
        let (base, _) = load_checkpoint(b)?;
        let mut r = evaluate_method("baseline", &base, &data, &kinds, a.seed)?;
        if r.method == name {
            r.method = format!("{name} (baseline)");
        }
        let bname = r.method.clone();
        results.tables.methods.push(r);
        attach_mce(&mut results, &bname)?;
    }
    let m = &results.tables.methods[0];
    emit(out, format_args!("clean accuracy {:.4}", m.clean_accuracy))?;
    emit(out, format_args!("corruption accuracy {:.4}", m.corruption_accuracy))?;
    emit(
        out,
        format_args!(
            "corruption ECE {:.4} (rescaled {:.4}, t = {})",
            m.ece, m.ece_rescaled, m.temperature
        ),
    )?;
    if let Some(v) = m.mce {
        emit(out, format_args!("mCE {v:.4}"))?;
    }
    if let Some(v) = m.relative_mce {
        emit(out, format_args!("relative mCE {v:.4}"))?;
    }
    if let Some(p) = &a.out {
        fs::write(p, results.to_json()?)?;
    }
    Ok(())
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

/// Fraction of `data` classified correctly after the attack.
fn attacked_accuracy(model: &ModelGraph, data: &Dataset, a: &AttackArgs, lp: Option<&LpipsConfig>) -> Result<f64> {
    let eps = a.eps as f32;
    let obj = ModelObjective::eval(model);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut correct = 0;
    for (x, y) in data.chunks(EVAL_CHUNK) {
        let xa = match a.method {
            AttackMethod::Fgm => apply(&x, &fgm(&obj, &x, &y, eps)?)?,
            AttackMethod::Fgsm => apply(&x, &fgsm(&obj, &x, &y, eps)?)?,
            AttackMethod::Pgd => {
                let p = match a.p {
                    NormArg::L2 => Norm::L2,
                    NormArg::Linf => Norm::Linf,
                };
                let mut cfg =
                    AttackConfig::with_default_step(ThreatModel::new(p, eps)?, a.steps.unwrap_or(10), Init::Random);
                if let Some(s) = a.step {
                    cfg.step_size = s;
                }
                apply(&x, &pgd(&obj, &x, &y, &cfg, &mut rng)?)?
            }
            AttackMethod::Lpa => {
                let mut cfg = LpaConfig::for_dim(a.eps, x.sample_len());
                if let Some(s) = a.steps {
                    // keep the total travel
                    cfg.step_size *= cfg.steps as f32 / s.max(1) as f32;
                    cfg.steps = s;
                }
                if let Some(s) = a.step {
                    cfg.step_size = s;
                }
                let d = lpa_attack(model, lp.expect("lpips config"), &x, &y, &cfg)?;
                x.add(&d)?
            }
        };
        let pred = predictions(model, &xa)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn cmd_attack(a: AttackArgs, out: &mut dyn Write) -> Result<()> {
    check_finite(a.eps, "eps")?;
    if a.eps < 0.0 {
        return Err(Error::InvalidArgument(format!("eps must be >= 0, got {}", a.eps)));
    }
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let data = load_data(&a.data)?;
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let lp = match a.method {
        AttackMethod::Lpa => {
            let ext = match &a.lpips_ckpt {
                Some(p) => load_checkpoint(p)?.0,
                None => model.clone(),
            };
            Some(LpipsConfig::reference(ext)?)
        }
        _ => None,
    };
    let acc = attacked_accuracy(&model, &data, &a, lp.as_ref())?;
    emit(out, format_args!("{:?} eps {} accuracy {acc:.4}", a.method, a.eps))
}

fn cmd_probe(a: ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let data = load_data(&a.data)?;
    let grid = parse_grid(&a.grid)?;
    let shape = if a.sphere {
        NoiseShape::Sphere
    } else {
        NoiseShape::Gaussian
    };
    let curve = sigma_probe(&model, &data, &grid, shape, a.draws, a.seed)?;
    let mut csv = String::from("sigma,loss\n");
    for (s, l) in curve.grid.iter().zip(&curve.losses) {
        check_finite(*l, "probe loss")?;
        csv.push_str(&format!("{s},{l:.6}\n"));
    }
    write!(out, "{csv}")?;
    emit(
        out,
        format_args!("argmin sigma {} loss {:.6}", curve.argmin(), curve.min_loss()),
    )?;
    if let Some(p) = &a.out {
        fs::write(p, csv)?;
    }
    Ok(())
}

fn cmd_distances(a: DistanceArgs, out: &mut dyn Write) -> Result<()> {
    let data = load_data(&a.data)?;
    let kinds = parse_kinds(&a.corruptions)?;
    let table = match a.metric {
        MetricArg::L2 => distance_stats(&data, &kinds, a.seed, "l2", l2_distances)?,
        MetricArg::Lpips => {
            let p = a
                .lpips_ckpt
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("--metric lpips needs --lpips-ckpt".into()))?;
            let cfg = LpipsConfig::reference(load_checkpoint(p)?.0)?;
            distance_stats(&data, &kinds, a.seed, "lpips", |x, y| lpips(&cfg, x, y))?
        }
    };
    emit(out, "kind,s1,s2,s3,s4,s5")?;
    for (k, row) in &table.mean {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        emit(out, format_args!("{k},{}", cells.join(",")))?;
    }
    if !table.non_monotone.is_empty() {
        emit(
            out,
            format_args!("not increasing in severity: {:?}", table.non_monotone),
        )?;
    }
    if let Some(c) = &a.ckpt {
        let (model, _) = load_checkpoint(c)?;
        let errors = crate::metrics::evaluate_corruptions(&model, &data, &kinds, a.seed)?;
        let corr = distance_error_correlation(&table, &errors)?;
        let show = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
        for (k, v) in &corr.per_kind {
            emit(out, format_args!("correlation {k} {}", show(*v)))?;
        }
        for (c, v) in &corr.per_category {
            emit(out, format_args!("correlation category {c} {}", show(*v)))?;
        }
        emit(out, format_args!("correlation overall {}", show(corr.overall)))?;
    }
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs, out: &mut dyn Write) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let data = load_data(&a.data)?;
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let logits = all_logits(&model, &data.images)?;
    let fit = temperature_rescale(&logits, &data.labels)?;
    check_finite(fit.before.ece, "ECE")?;
    emit(out, format_args!("ECE {:.4}", fit.before.ece))?;
    emit(out, format_args!("temperature {}", fit.t_star))?;
    emit(out, format_args!("ECE after rescaling {:.4}", fit.after.ece))
}

/// Returns `cfg` with the JSON field `param` set to `value`.
pub fn with_param(cfg: &TrainConfig, param: &str, value: f64) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(cfg)?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    let slot = obj
        .get_mut(param)
        .ok_or_else(|| Error::UnknownName(format!("config has no field {param:?}")))?;
    *slot = match slot {
        serde_json::Value::Number(n) if n.is_u64() || n.is_i64() => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{param} takes non-negative integers, got {value}"
                )));
            }
            json!(value as u64)
        }
        serde_json::Value::Number(_) | serde_json::Value::Null => json!(value),
        _ => return Err(Error::InvalidArgument(format!("{param} is not a numeric field"))),
    };
    let cfg: TrainConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let base = TrainConfig::from_json(&fs::read_to_string(&a.config)?)?;
    let grid = parse_grid(&a.grid)?;
    if a.seeds == 0 {
        return Err(Error::InvalidArgument("--seeds must be >= 1".into()));
    }
    let kinds = parse_kinds(&a.corruptions)?;
    let data = load_data(&a.data)?;
    let eval = match &a.eval_data {
        Some(s) => load_data(s)?,
        None => data.clone(),
    };
    // Validate every grid point before spending time on training.
    let cfgs: Vec<TrainConfig> = grid
        .iter()
        .map(|&v| with_param(&base, &a.param, v))
        .collect::<Result<_>>()?;
    let mut results = Results::new(
        "sweep",
        json!({"base": base, "param": a.param, "grid": grid, "seeds": a.seeds, "data": a.data, "eval_data": a.eval_data}),
    );
    let mut points = Vec::new();
    for (cfg, &value) in cfgs.iter().zip(&grid) {
        let mut total = 0.0;
        for s in 0..a.seeds {
            let mut c = cfg.clone();
            c.seed = base.seed + s;
            let (model, meta, _) = train(&c, &data, EvalSets::default())?;
            let name = format!("{} {}={}", meta.method, a.param, value);
            let r = evaluate_method(&name, &model, &eval, &kinds, c.seed)?;
            emit(
                out,
                format_args!(
                    "{name} seed {} clean {:.4} corruption {:.4}",
                    c.seed, r.clean_accuracy, r.corruption_accuracy
                ),
            )?;
            total += r.corruption_accuracy;
            results.tables.methods.push(r);
        }
        points.push((value, total / a.seeds as f64));
    }
    results.curves.push(Curve {
        name: format!("mean corruption accuracy over {} seeds", a.seeds),
        x: a.param.clone(),
        y: "corruption_accuracy".into(),
        points,
    });
    if let Some(p) = &a.out {
        fs::write(p, results.to_json()?)?;
    }
    Ok(())
}

fn cmd_report(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let format: Format = a.format.parse()?;
    let results = Results::from_json(&fs::read_to_string(&a.input)?)?;
    let text = render(&results, format)?;
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => write!(out, "{text}")?,
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut seed = a.seed;
    let mut failures = Vec::new();
    while checked < a.graphs {
        let case = random_case(seed)?;
        seed += 1;
        // Finite differences are meaningless across a ReLU kink.
        if case.kink_margin(Mode::Train)? < 1e-4 {
            continue;
        }
        let b = case.bindings();
        for node in &case.checkable {
            let r = gradcheck(&case.graph, &b, Mode::Train, node, 1e-5, a.tolerance)?;
            worst = worst.max(r.max_rel_error);
            if !r.pass {
                failures.push(format!("graph seed {} node {node}: {:.3e}", seed - 1, r.max_rel_error));
            }
        }
        checked += 1;
    }
    emit(out, format_args!("{checked} graphs, max relative error {worst:.3e}"))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient mismatch: {}", failures.join("; "))))
    }
}
