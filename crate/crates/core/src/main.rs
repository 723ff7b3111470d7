use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use phylo_ouou::estimation::{self, ComparisonRow, EstimationError, FitConfig, FitReport, ModelHook, TraitTable};
use phylo_ouou::phylo_cov::CovError;
use phylo_ouou::simulate::{self, SimConfig};
use phylo_ouou::validate::{self, ValidateConfig};
use phylo_ouou::{LineageParams, OUOUParams, PhyloTree};

/// Phylogenetic OU regression of a trait on an OU-evolving predictor.
///
/// Exit codes: 0 success, 1 input error, 2 numerical failure (fit did not
/// converge, validation check failed).
#[derive(Parser, Debug)]
#[command(name = "phylo-ouou", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the regression of y on x by iterated GLS and maximum likelihood.
    Fit(FitArgs),
    /// Simulate predictor and trait values at the tips of a tree.
    Simulate(SimulateArgs),
    /// Fit several models and rank them by AICc.
    Compare(CompareArgs),
    /// Check the closed-form moments and covariances against simulation.
    Validate(ValidateArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Args, Debug)]
struct Common {
    /// Output file; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Output format [default: text; csv for simulated tables, json for moments].
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Settings file with one `key = value` per line, keys named like the
    /// long flags. Flags on the command line take precedence.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed (unsigned 64-bit integer).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Ultrametric tree in Newick format; branch lengths in time units.
    #[arg(long, value_name = "PATH")]
    tree: PathBuf,
    /// Trait table, CSV with header `species,x,y` (x and y in trait units).
    #[arg(long, value_name = "PATH")]
    traits: PathBuf,
    /// Stretch terminal branches so every tip sits at the mean depth
    /// (time units) instead of rejecting a non-ultrametric tree.
    #[arg(long)]
    normalize_depths: bool,
    /// Upper bound on alpha, in 1/time units [default: 50 / tree depth].
    #[arg(long, value_name = "RATE")]
    alpha_max: Option<f64>,
    /// Outer-loop convergence threshold on the change in (b0, b1), in
    /// trait units [default: 1e-5].
    #[arg(long, value_name = "TOL")]
    delta: Option<f64>,
    /// Maximum outer iterations (count) [default: 100].
    #[arg(long, value_name = "N")]
    max_iter: Option<usize>,
    /// Extra random starts for the rate search (count) [default: 0].
    #[arg(long, value_name = "K")]
    multistart: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: Common,
    /// Model hook name, one of ouou, ouou-unscaled, ouou-independent,
    /// ouou-identity, ouou-printed [default: ouou].
    #[arg(long, value_name = "NAME")]
    hook: Option<String>,
    /// Plot data file: 200 points on the fitted line over [min x, max x]
    /// plus the observed (x, y) scatter, both in trait units
    /// [default: OUT with extension .plot.csv when --out is given].
    #[arg(long, value_name = "PATH")]
    plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: Common,
    /// Comma-separated model hook names to fit [default: ouou,ouou-independent].
    #[arg(long, value_name = "LIST")]
    hooks: Option<String>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Tree in Newick format; branch lengths in time units.
    #[arg(long, value_name = "PATH")]
    tree: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Mean-reversion rate, 1/time [default: 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Trait diffusion, trait units / sqrt(time) [default: 0.3].
    #[arg(long)]
    sigma_y: Option<f64>,
    /// Predictor diffusion, predictor units / sqrt(time) [default: 1].
    #[arg(long)]
    sigma_x: Option<f64>,
    /// Optimum intercept, trait units [default: 1].
    #[arg(long)]
    b0: Option<f64>,
    /// Optimum slope, trait units per predictor unit [default: 0.5].
    #[arg(long)]
    b1: Option<f64>,
    /// Root predictor value, predictor units [default: 0].
    #[arg(long)]
    x_a: Option<f64>,
    /// Root trait value, trait units [default: 0].
    #[arg(long)]
    y_a: Option<f64>,
    /// Euler step, time units [default: shortest branch / 100].
    #[arg(long)]
    step: Option<f64>,
    /// Number of independent paths (count). With --moments-at this is the
    /// Monte Carlo sample size; otherwise path 0 is written [default: 1].
    #[arg(long)]
    paths: Option<usize>,
    /// Instead of a trait table, report Monte Carlo moments of one lineage
    /// started at the root state after this much time (time units).
    #[arg(long, value_name = "TIME")]
    moments_at: Option<f64>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    common: Common,
    /// Simulated paths per check (count) [default: 200000].
    #[arg(long)]
    paths: Option<usize>,
    /// Euler steps across each check time (count) [default: 1000].
    #[arg(long)]
    steps: Option<usize>,
    /// Random parameter sets added to the canonical one (count) [default: 0].
    #[arg(long, value_name = "K")]
    random_sets: Option<usize>,
    /// Euler step for the tree check, time units [default: shortest branch / 100].
    #[arg(long)]
    tree_step: Option<f64>,
    /// Pass threshold, in standard errors [default: 3].
    #[arg(long, value_name = "SE")]
    threshold: Option<f64>,
}

// ---------------------------------------------------------------------------

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<EstimationError> for Failure {
    fn from(e: EstimationError) -> Self {
        use EstimationError as E;
        match &e {
            E::RankDeficient
            | E::Optimizer(_)
            | E::Covariance(CovError::NotPositiveDefinite { .. }) => Failure::numerical(e.to_string()),
            _ => Failure::input(e.to_string()),
        }
    }
}

type Outcome = Result<u8, Failure>;

/// Settings read from a `--config` file.
struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        let Some(path) = path else {
            return Ok(Self { values });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Failure::input(format!("config line {}: expected key = value", k + 1)))?;
            let key = key.trim().replace('_', "-");
            if !allowed.contains(&key.as_str()) {
                return Err(Failure::input(format!(
                    "config line {}: unknown key `{key}` (allowed: {})",
                    k + 1,
                    allowed.join(", ")
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Flag value, else file value, else `None`.
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Failure::input(format!("config: invalid value `{v}` for `{key}`"))),
        }
    }

    fn format(&self, flag: Option<Format>, default: Format) -> Result<Format, Failure> {
        if let Some(f) = flag {
            return Ok(f);
        }
        match self.values.get("format") {
            None => Ok(default),
            Some(v) => Format::from_str(v, true).map_err(|_| Failure::input(format!("config: invalid format `{v}`"))),
        }
    }
}

const COMMON_KEYS: [&str; 2] = ["format", "seed"];
const DATA_KEYS: [&str; 5] = ["normalize-depths", "alpha-max", "delta", "max-iter", "multistart"];

fn keys(extra: &[&'static str], data: bool) -> Vec<&'static str> {
    let mut k: Vec<&str> = COMMON_KEYS.to_vec();
    if data {
        k.extend(DATA_KEYS);
    }
    k.extend(extra);
    k
}

fn read_tree(path: &Path, normalize: bool) -> Result<PhyloTree, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read tree {}: {e}", path.display())))?;
    let tree = PhyloTree::parse_newick(&text).map_err(|e| Failure::input(format!("tree {}: {e}", path.display())))?;
    if normalize {
        tree.normalize_tip_depths().map_err(|e| Failure::input(e.to_string()))
    } else {
        Ok(tree)
    }
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, body).map_err(|e| Failure::input(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(body.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::input(format!("cannot write output: {e}")))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Fit data and settings shared by `fit` and `compare`.
struct Prepared {
    tree: PhyloTree,
    traits: TraitTable,
    config: FitConfig,
    multistart: usize,
    seed: u64,
}

fn prepare(data: &DataArgs, common: &Common, settings: &Settings) -> Result<Prepared, Failure> {
    let normalize = data.normalize_depths || settings.get::<bool>(None, "normalize-depths")?.unwrap_or(false);
    let tree = read_tree(&data.tree, normalize)?;
    let traits = TraitTable::from_path(&data.traits)?;
    let mut config = FitConfig {
        alpha_max: settings.get(data.alpha_max, "alpha-max")?,
        ..FitConfig::default()
    };
    if let Some(d) = settings.get(data.delta, "delta")? {
        config.delta = d;
    }
    if let Some(m) = settings.get(data.max_iter, "max-iter")? {
        config.max_outer = m;
    }
    Ok(Prepared {
        tree,
        traits,
        config,
        multistart: settings.get(data.multistart, "multistart")?.unwrap_or(0),
        seed: settings.get(common.seed, "seed")?.unwrap_or(0),
    })
}

fn hook_named(name: &str) -> Result<ModelHook, Failure> {
    let canonical = name.trim().replace('_', "-");
    ModelHook::builtin(&canonical).ok_or_else(|| {
        Failure::input(format!(
            "unknown model hook `{}` (available: {})",
            name.trim(),
            ModelHook::BUILTIN.join(", ")
        ))
    })
}

// ---------------------------------------------------------------------------
// fit

fn report_text(r: &FitReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model            {}", r.model);
    let _ = writeln!(s, "species          {}", r.n);
    let _ = writeln!(s, "tree depth       {}", r.tree_depth);
    let _ = writeln!(s, "b0               {}", r.b0);
    let _ = writeln!(s, "b1               {}", r.b1);
    let _ = writeln!(s, "alpha            {}", r.alpha_hat);
    let _ = writeln!(s, "sigma_y^2        {}", r.sigma_y2_hat);
    let _ = writeln!(s, "sigma_x^2        {}", r.sigma_x2_hat);
    let _ = writeln!(s, "x mean           {}", r.x_mean_hat);
    let _ = writeln!(s, "slope scale      {}", r.slope_scale);
    let _ = writeln!(s, "log-likelihood   {}", r.log_likelihood);
    let _ = writeln!(s, "r^2              {}", r.r_squared.map_or("undefined".into(), |v| v.to_string()));
    let _ = writeln!(s, "AICc (k={})      {}", r.k, r.aicc);
    let _ = writeln!(s, "iterations       {}", r.iterations);
    let _ = writeln!(s, "final delta      {}", opt(r.delta_trace.last().copied()));
    let _ = writeln!(s, "converged        {}", r.converged);
    let _ = writeln!(s, "jitter           {}", r.jitter);
    let _ = writeln!(s, "evaluations      {}", r.evaluations);
    s
}

const REPORT_FIELDS: [&str; 20] = [
    "model",
    "n",
    "tree_depth",
    "b0",
    "b1",
    "alpha_hat",
    "sigma_y2_hat",
    "sigma_x2_hat",
    "x_mean_hat",
    "slope_scale",
    "log_likelihood",
    "r_squared",
    "aicc",
    "k",
    "iterations",
    "delta_trace",
    "converged",
    "jitter",
    "evaluations",
    "line",
];

fn regression_line(b0: f64, b1: f64, scale: f64, x_mean: f64) -> String {
    format!("y = {b0:.4} + {:.4} (x - {x_mean:.4})", b1 * scale)
}

fn report_csv(r: &FitReport) -> String {
    let trace: Vec<String> = r.delta_trace.iter().map(|d| d.to_string()).collect();
    let row = [
        r.model.clone(),
        r.n.to_string(),
        r.tree_depth.to_string(),
        r.b0.to_string(),
        r.b1.to_string(),
        r.alpha_hat.to_string(),
        r.sigma_y2_hat.to_string(),
        r.sigma_x2_hat.to_string(),
        r.x_mean_hat.to_string(),
        r.slope_scale.to_string(),
        r.log_likelihood.to_string(),
        opt(r.r_squared),
        r.aicc.to_string(),
        r.k.to_string(),
        r.iterations.to_string(),
        trace.join(";"),
        r.converged.to_string(),
        r.jitter.to_string(),
        r.evaluations.to_string(),
        regression_line(r.b0, r.b1, r.slope_scale, r.x_mean_hat),
    ];
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_FIELDS).expect("in-memory write");
    w.write_record(&row).expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

/// Fitted line sampled at 200 points plus the observed points.
fn plot_csv(r: &FitReport, traits: &TraitTable) -> String {
    let (lo, hi) = traits
        .x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut s = String::from("kind,species,x,y\n");
    for k in 0..200 {
        let x = lo + (hi - lo) * k as f64 / 199.0;
        let _ = writeln!(s, "line,,{x},{}", r.predict(x));
    }
    for ((sp, x), y) in traits.species.iter().zip(&traits.x).zip(&traits.y) {
        let _ = writeln!(s, "point,{sp},{x},{y}");
    }
    s
}

fn cmd_fit(args: FitArgs) -> Outcome {
    let settings = Settings::load(args.common.config.as_deref(), &keys(&["hook", "plot"], true))?;
    let format = settings.format(args.common.format, Format::Text)?;
    let mut prep = prepare(&args.data, &args.common, &settings)?;
    if let Some(name) = settings.get(args.hook.clone(), "hook")? {
        prep.config.hook = hook_named(&name)?;
    }
    let report = if prep.multistart > 0 {
        estimation::fit_multistart(&prep.tree, &prep.traits, &prep.config, prep.multistart, prep.seed)?
    } else {
        estimation::fit_ouou(&prep.tree, &prep.traits, &prep.config)?
    };
    let body = match format {
        Format::Json => to_json(&report),
        Format::Csv => report_csv(&report),
        Format::Text => report_text(&report),
    };
    emit(args.common.out.as_deref(), &body)?;
    let plot = settings
        .get::<PathBuf>(args.plot.clone(), "plot")?
        .or_else(|| args.common.out.as_ref().map(|o| o.with_extension("plot.csv")));
    if let Some(p) = plot {
        emit(Some(&p), &plot_csv(&report, &prep.traits))?;
    }
    if report.converged {
        Ok(0)
    } else {
        eprintln!(
            "warning: outer loop did not converge within {} iterations (last delta {})",
            report.iterations,
            opt(report.delta_trace.last().copied())
        );
        Ok(2)
    }
}

// ---------------------------------------------------------------------------
// compare

fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut s = format!(
        "{:<18} {:<40} {:>8} {:>12} {:>10}  {}\n",
        "Model", "Regression line", "r^2", "AICc", "dAICc", "co-supported"
    );
    for r in rows {
        if let Some(err) = &r.error {
            let _ = writeln!(s, "{:<18} failed: {err}", r.model);
            continue;
        }
        let line = regression_line(
            r.b0.unwrap_or_default(),
            r.b1.unwrap_or_default(),
            r.slope_scale.unwrap_or_default(),
            r.x_mean.unwrap_or_default(),
        );
        let r2 = r.r_squared.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let _ = writeln!(
            s,
            "{:<18} {:<40} {:>8} {:>12.4} {:>10.4}  {}",
            r.model,
            line,
            r2,
            r.aicc.unwrap_or(f64::NAN),
            r.delta_aicc.unwrap_or(f64::NAN),
            if r.co_supported { "yes" } else { "no" }
        );
    }
    s
}

fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "b0",
        "b1",
        "slope_scale",
        "x_mean",
        "r_squared",
        "aicc",
        "delta_aicc",
        "co_supported",
        "converged",
        "error",
    ])
    .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.model.clone(),
            opt(r.b0),
            opt(r.b1),
            opt(r.slope_scale),
            opt(r.x_mean),
            opt(r.r_squared),
            opt(r.aicc),
            opt(r.delta_aicc),
            r.co_supported.to_string(),
            r.converged.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

fn cmd_compare(args: CompareArgs) -> Outcome {
    let settings = Settings::load(args.common.config.as_deref(), &keys(&["hooks"], true))?;
    let format = settings.format(args.common.format, Format::Text)?;
    let list = settings
        .get(args.hooks.clone(), "hooks")?
        .unwrap_or_else(|| "ouou,ouou-independent".to_string());
    let mut hooks: Vec<ModelHook> = Vec::new();
    for name in list.split(',').filter(|s| !s.trim().is_empty()) {
        let hook = hook_named(name)?;
        if hooks.iter().any(|h| h.name() == hook.name()) {
            return Err(Failure::input(format!("model hook `{}` listed more than once", name.trim())));
        }
        hooks.push(hook);
    }
    if hooks.is_empty() {
        return Err(Failure::input("no model hooks given"));
    }
    let prep = prepare(&args.data, &args.common, &settings)?;
    if prep.multistart > 0 {
        return Err(Failure::input("--multistart is only supported by `fit`"));
    }
    let rows = estimation::compare_models(&prep.tree, &prep.traits, &hooks, &prep.config)?;
    let body = match format {
        Format::Json => to_json(&rows),
        Format::Csv => comparison_csv(&rows),
        Format::Text => comparison_text(&rows),
    };
    emit(args.common.out.as_deref(), &body)?;
    Ok(if rows.iter().all(|r| r.converged) { 0 } else { 2 })
}

// ---------------------------------------------------------------------------
// simulate

fn cmd_simulate(args: SimulateArgs) -> Outcome {
    let settings = Settings::load(
        args.common.config.as_deref(),
        &keys(
            &["alpha", "sigma-y", "sigma-x", "b0", "b1", "x-a", "y-a", "step", "paths", "moments-at"],
            false,
        ),
    )?;
    let get = |flag: Option<f64>, key: &str, default: f64| -> Result<f64, Failure> {
        Ok(settings.get(flag, key)?.unwrap_or(default))
    };
    let params = OUOUParams::new(
        get(args.alpha, "alpha", 1.0)?,
        get(args.sigma_y, "sigma-y", 0.3)?,
        get(args.sigma_x, "sigma-x", 1.0)?,
        get(args.b0, "b0", 1.0)?,
        get(args.b1, "b1", 0.5)?,
        get(args.x_a, "x-a", 0.0)?,
        get(args.y_a, "y-a", 0.0)?,
    )
    .map_err(|e| Failure::input(e.to_string()))?;
    let seed = settings.get(args.common.seed, "seed")?.unwrap_or(0);
    let step = settings.get(args.step, "step")?;
    let paths = settings.get(args.paths, "paths")?.unwrap_or(1);
    let tree = read_tree(&args.tree, false)?;

    if let Some(t) = settings.get(args.moments_at, "moments-at")? {
        let format = settings.format(args.common.format, Format::Json)?;
        let lineage = LineageParams::new(
            params.alpha(),
            params.sigma_y(),
            params.sigma_theta(),
            params.y_a(),
            params.theta_a(),
        )
        .map_err(|e| Failure::input(e.to_string()))?;
        let h = step.unwrap_or(t / 1000.0);
        let m = simulate::mc_moments(&lineage, t, paths, h, seed).map_err(|e| Failure::input(e.to_string()))?;
        let body = match format {
            Format::Json => to_json(&m),
            Format::Csv | Format::Text => {
                let mut s = String::from("quantity,estimate,se\n");
                for (name, e) in m.extrapolated.entries() {
                    let _ = writeln!(s, "{name},{},{}", e.value, e.se);
                }
                s
            }
        };
        emit(args.common.out.as_deref(), &body)?;
        return Ok(0);
    }

    let format = settings.format(args.common.format, Format::Csv)?;
    let config = SimConfig {
        step,
        ..SimConfig::new(params, tree, paths, seed)
    };
    let out = simulate::simulate_tree(&config).map_err(|e| Failure::input(e.to_string()))?;
    let table = out.table(0);
    let body = match format {
        Format::Csv | Format::Text => {
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            String::from_utf8(buf).expect("utf-8")
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Row<'a> {
                species: &'a str,
                x: f64,
                y: f64,
            }
            let rows: Vec<Row> = (0..table.len())
                .map(|i| Row {
                    species: &table.species[i],
                    x: table.x[i],
                    y: table.y[i],
                })
                .collect();
            to_json(&rows)
        }
    };
    emit(args.common.out.as_deref(), &body)?;
    Ok(0)
}

// ---------------------------------------------------------------------------
// validate

fn cmd_validate(args: ValidateArgs) -> Outcome {
    let settings = Settings::load(
        args.common.config.as_deref(),
        &keys(&["paths", "steps", "random-sets", "tree-step", "threshold"], false),
    )?;
    let format = settings.format(args.common.format, Format::Text)?;
    let mut config = ValidateConfig::default();
    if let Some(p) = settings.get(args.paths, "paths")? {
        config.paths = p;
    }
    if let Some(s) = settings.get(args.steps, "steps")? {
        config.steps = s;
    }
    if let Some(s) = settings.get(args.common.seed, "seed")? {
        config.seed = s;
    }
    if let Some(t) = settings.get(args.threshold, "threshold")? {
        config.threshold = t;
    }
    config.tree_step = settings.get(args.tree_step, "tree-step")?;
    let extra = settings.get(args.random_sets, "random-sets")?.unwrap_or(0);
    config.lineages.extend(validate::random_lineages(extra, config.seed));
    if config.paths == 0 || config.steps == 0 {
        return Err(Failure::input("--paths and --steps must be positive"));
    }
    if !(config.threshold > 0.0) {
        return Err(Failure::input("--threshold must be positive"));
    }
    let report = validate::run(&config, &validate::Reference).map_err(|e| Failure::input(e.to_string()))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let body = match format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["check", "observed", "expected", "se", "z", "pass"])
                .expect("in-memory write");
            for c in &report.checks {
                w.write_record([
                    c.name.clone(),
                    c.observed.to_string(),
                    c.expected.to_string(),
                    c.se.to_string(),
                    c.z.to_string(),
                    c.pass.to_string(),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
        }
        Format::Text => {
            let mut s = String::new();
            for c in &report.checks {
                let _ = writeln!(
                    s,
                    "{} {:<44} observed {:>12.6} expected {:>12.6} se {:.2e} z {:.2}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.observed,
                    c.expected,
                    c.se,
                    c.z
                );
            }
            let failed = report.failures().count();
            let _ = writeln!(
                s,
                "{} of {} checks passed at {} SE (paths {}, seed {})",
                report.checks.len() - failed,
                report.checks.len(),
                report.threshold,
                report.paths,
                report.seed
            );
            s
        }
    };
    emit(args.common.out.as_deref(), &body)?;
    Ok(if report.passed() { 0 } else { 2 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
