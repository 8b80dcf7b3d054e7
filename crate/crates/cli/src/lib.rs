//! Command implementations behind the `polyproj` binary.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 numerical
//! failure (solver non-convergence, divergence, or a check that measured
//! out of tolerance).

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use polyproj::autodiff::{gradcheck, GradcheckReport, Tape};
use polyproj::hs::{dense_jacobian, hs_element, path_integral, random_segment};
use polyproj::linalg::DenseMatrix;
use polyproj::optim::{AdamConfig, TrainResult};
use polyproj::polytope::Polytope;
use polyproj::qp::{project_with, ProjectionOptions, DEFAULT_TOL};
use polyproj::tasks::{
    compare_birkhoff, train_matching, train_portfolio, MatchingTask, NetSpec, PortfolioTask,
};
use polyproj::{Error, Result};

use config::Config;

/// Gradient-check and path-integral pass threshold.
pub const CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "polyproj",
    version,
    about = "Differentiable projections onto polytopes"
)]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; a `<out>.manifest.json` is written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Projection solver tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project a point; prints y, multipliers, active set (1-based) and KKT residual as JSON.
    Project {
        polytope: PathBuf,
        /// Whitespace or comma separated coordinates.
        #[arg(allow_hyphen_values = true)]
        x: String,
    },
    /// Dense Jacobian element at a point, as JSON.
    Jacobian {
        polytope: PathBuf,
        #[arg(allow_hyphen_values = true)]
        x: String,
    },
    /// Reverse mode against central differences on a built-in tape.
    Gradcheck {
        #[arg(long, value_enum)]
        task: GradTask,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
    },
    /// Path integrals of the Jacobian field along random segments.
    Conservativity {
        polytope: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Standard deviation of segment endpoints around a boundary point.
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
        /// Explicit segment start (with --x1); replaces the random segments.
        #[arg(long, allow_hyphen_values = true, requires = "x1")]
        x0: Option<String>,
        #[arg(long, allow_hyphen_values = true, requires = "x0")]
        x1: Option<String>,
    },
    /// Train a task described by a key=value config file.
    Train { config: PathBuf },
    /// Feasibility of the exact Birkhoff projection against finite Sinkhorn.
    CompareSinkhorn {
        #[arg(long, default_value_t = 8)]
        c: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Comma-separated Sinkhorn iteration counts.
        #[arg(long, value_delimiter = ',', default_value = "20,30")]
        iters: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradTask {
    Toy,
    Kink,
    Example1,
    Portfolio,
    Matching,
}

/// Global settings shared by every command.
struct Ctx {
    seed: u64,
    seed_given: bool,
    out: Option<PathBuf>,
    tol: f64,
}

impl Ctx {
    /// Writes `content` to `--out` (plus manifest) or stdout.
    fn emit(&self, command: &str, config: BTreeMap<String, String>, content: &str) -> Result<()> {
        self.emit_seeded(command, self.seed, config, content)
    }

    fn emit_seeded(
        &self,
        command: &str,
        seed: u64,
        config: BTreeMap<String, String>,
        content: &str,
    ) -> Result<()> {
        match &self.out {
            Some(path) => {
                fs::write(path, content)?;
                let manifest = json!({
                    "command": command,
                    "version": format!("polyproj v{}", env!("CARGO_PKG_VERSION")),
                    "seed": seed,
                    "tol": self.tol,
                    "config": config,
                    "output": path.file_name().map(|f| f.to_string_lossy().into_owned()),
                });
                let mut name = path.as_os_str().to_owned();
                name.push(".manifest.json");
                fs::write(PathBuf::from(name), pretty(&manifest))?;
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(content.as_bytes())?;
                stdout.flush()?;
            }
        }
        Ok(())
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

/// Parses whitespace- or comma-separated numbers, naming the bad token.
pub fn parse_vector(text: &str) -> Result<Vec<f64>> {
    let v = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse(format!("invalid number '{t}' in vector")))
        })
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(Error::Parse("empty vector".into()));
    }
    Ok(v)
}

fn read_polytope(path: &Path) -> Result<Polytope<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    Polytope::from_text(&text)
}

fn one_based(idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|i| i + 1).collect()
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let tol = cli.tol.unwrap_or(DEFAULT_TOL);
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::Input(format!("--tol must be positive, got {tol}")));
    }
    let ctx = Ctx {
        seed: cli.seed.unwrap_or(0),
        seed_given: cli.seed.is_some(),
        out: cli.out,
        tol,
    };
    match cli.command {
        Command::Project { polytope, x } => cmd_project(&ctx, &polytope, &x),
        Command::Jacobian { polytope, x } => cmd_jacobian(&ctx, &polytope, &x),
        Command::Gradcheck { task, h } => cmd_gradcheck(&ctx, task, h),
        Command::Conservativity {
            polytope,
            trials,
            samples,
            scale,
            x0,
            x1,
        } => cmd_conservativity(&ctx, &polytope, trials, samples, scale, x0.zip(x1)),
        Command::Train { config } => cmd_train(&ctx, &config),
        Command::CompareSinkhorn { c, trials, iters } => {
            cmd_compare_sinkhorn(&ctx, c, trials, &iters)
        }
    }
}

fn cmd_project(ctx: &Ctx, file: &Path, x: &str) -> Result<i32> {
    let p = read_polytope(file)?;
    let x = parse_vector(x)?;
    let res = project_with(&p, &x, &ProjectionOptions::with_tol(ctx.tol))?;
    let out = json!({
        "y": res.y,
        "lambda": res.lambda,
        "mu": res.mu,
        "active": one_based(&res.active),
        "residual": res.kkt_residual,
        "iterations": res.iterations,
    });
    let mut cfg = BTreeMap::new();
    cfg.insert("polytope".into(), file.display().to_string());
    cfg.insert("x".into(), format!("{x:?}"));
    ctx.emit("project", cfg, &pretty(&out))?;
    Ok(0)
}

fn cmd_jacobian(ctx: &Ctx, file: &Path, x: &str) -> Result<i32> {
    let p = read_polytope(file)?;
    let x = parse_vector(x)?;
    let res = project_with(&p, &x, &ProjectionOptions::with_tol(ctx.tol))?;
    let factor = hs_element(&p, &res)?;
    let j = dense_jacobian(&factor)?;
    let rows: Vec<Vec<f64>> = (0..j.rows()).map(|i| j.row(i).to_vec()).collect();
    let out = json!({
        "y": res.y,
        "active": one_based(&res.active),
        "rank": factor.rank(),
        "jacobian": rows,
    });
    let mut cfg = BTreeMap::new();
    cfg.insert("polytope".into(), file.display().to_string());
    cfg.insert("x".into(), format!("{x:?}"));
    ctx.emit("jacobian", cfg, &pretty(&out))?;
    Ok(0)
}

/// `|‖Π(W x + β)‖² − y|` over `{y1 ≥ 0.3, y1 + y2 = 1}` at a point where the floor
/// binds with a positive multiplier.
fn example_one_tape() -> Result<(Tape<f64>, Vec<f64>)> {
    let p = Polytope::new(
        DenseMatrix::new(1, 2, vec![-1.0, 0.0])?,
        vec![-0.3],
        DenseMatrix::new(1, 2, vec![1.0, 1.0])?,
        vec![1.0],
    )?;
    let mut t = Tape::new(6);
    let w = t.parameter(0, 4)?;
    let beta = t.parameter(4, 2)?;
    let x = t.constant(vec![1.0, 2.0]);
    let z = t.affine(w, x, beta, 2, 2)?;
    let y = t.projection(Arc::new(p), z)?;
    let sq = t.square(y)?;
    let norm = t.sum(sq)?;
    let target = t.constant(vec![0.1]);
    let diff = t.sub(norm, target)?;
    let loss = t.abs(diff)?;
    t.set_output(loss)?;
    Ok((t, vec![0.05, 0.0, 0.1, 0.6, 0.0, 0.0]))
}

fn gradcheck_tape(task: GradTask, seed: u64) -> Result<(Tape<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = NetSpec {
        hidden: 8,
        ..NetSpec::default()
    };
    match task {
        GradTask::Toy => {
            let mut t = Tape::new(4);
            let a = t.parameter(0, 2)?;
            let b = t.parameter(2, 2)?;
            let s = t.sigmoid(a)?;
            let th = t.tanh(b)?;
            let m = t.mul(s, th)?;
            let sum = t.sum(m)?;
            let sq = t.square(b)?;
            let mean = t.mean(sq)?;
            let loss = t.add(sum, mean)?;
            t.set_output(loss)?;
            let theta = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            Ok((t, theta))
        }
        GradTask::Kink => {
            let mut t = Tape::new(2);
            let a = t.parameter(0, 1)?;
            let b = t.parameter(1, 1)?;
            let r = t.relu(a)?;
            let sq = t.square(b)?;
            let loss = t.add(r, sq)?;
            t.set_output(loss)?;
            Ok((t, vec![0.0, rng.random_range(-1.0..1.0)]))
        }
        GradTask::Example1 => example_one_tape(),
        GradTask::Portfolio => {
            let task = PortfolioTask::synthetic(4, 3, 4, 1, vec![0], 0.3, seed)?;
            let (mut tapes, mlp) = task.tapes(&small)?;
            Ok((tapes.swap_remove(0), mlp.init(&mut rng, 1.0)))
        }
        GradTask::Matching => {
            let task = MatchingTask::synthetic(3, 3, 2, 1, 3, 0.3, seed)?;
            let (mut tapes, mlp) = task.tapes(&small)?;
            Ok((tapes.swap_remove(0), mlp.init(&mut rng, 1.0)))
        }
    }
}

fn gradcheck_csv(rep: &GradcheckReport) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["index", "analytic", "numeric", "rel_error", "flagged"])?;
    for e in &rep.entries {
        wr.write_record(&[
            e.index.to_string(),
            format!("{:e}", e.analytic),
            format!("{:e}", e.numeric),
            format!("{:e}", e.rel_error),
            e.flagged.to_string(),
        ])?;
    }
    into_string(wr)
}

fn into_string(wr: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = wr
        .into_inner()
        .map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn cmd_gradcheck(ctx: &Ctx, task: GradTask, h: f64) -> Result<i32> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::Input(format!("h must lie in [1e-8, 1e-4], got {h}")));
    }
    let (mut tape, theta) = gradcheck_tape(task, ctx.seed)?;
    let rep = gradcheck(&mut tape, &theta, h, true)?;
    let mut cfg = BTreeMap::new();
    cfg.insert("task".into(), format!("{task:?}").to_lowercase());
    cfg.insert("h".into(), h.to_string());
    ctx.emit("gradcheck", cfg, &gradcheck_csv(&rep)?)?;
    let pass = rep.max_rel_error <= CHECK_TOL;
    eprintln!(
        "gradcheck: parameters={} flagged={} max_rel_error={:e} {}",
        rep.entries.len(),
        rep.flagged,
        rep.max_rel_error,
        if pass { "ok" } else { "FAILED" }
    );
    Ok(if pass { 0 } else { 2 })
}

fn cmd_conservativity(
    ctx: &Ctx,
    file: &Path,
    trials: usize,
    samples: usize,
    scale: f64,
    explicit: Option<(String, String)>,
) -> Result<i32> {
    let p = read_polytope(file)?;
    if samples < 2 {
        return Err(Error::Input("samples must be at least 2".into()));
    }
    if samples < 100 {
        eprintln!("warning: {samples} samples is coarse; errors may exceed {CHECK_TOL:e}");
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Input("scale must be positive".into()));
    }
    let segments = match &explicit {
        Some((a, b)) => vec![(parse_vector(a)?, parse_vector(b)?)],
        None => {
            if trials == 0 {
                return Err(Error::Input("trials must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            (0..trials)
                .map(|_| random_segment(&mut rng, &p, scale))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["segment", "error", "breakpoints"])?;
    let mut worst = 0.0f64;
    for (k, (x0, x1)) in segments.iter().enumerate() {
        let r = path_integral(&p, x0, x1, samples)?;
        worst = worst.max(r.error);
        wr.write_record(&[
            k.to_string(),
            format!("{:e}", r.error),
            r.breakpoints.to_string(),
        ])?;
    }
    let mut cfg = BTreeMap::new();
    cfg.insert("polytope".into(), file.display().to_string());
    cfg.insert("samples".into(), samples.to_string());
    match &explicit {
        Some((a, b)) => {
            cfg.insert("x0".into(), a.clone());
            cfg.insert("x1".into(), b.clone());
        }
        None => {
            cfg.insert("trials".into(), trials.to_string());
            cfg.insert("scale".into(), scale.to_string());
        }
    }
    ctx.emit("conservativity", cfg, &into_string(wr)?)?;
    let pass = worst <= CHECK_TOL;
    eprintln!(
        "conservativity: segments={} max_error={worst:e} {}",
        segments.len(),
        if pass { "ok" } else { "FAILED" }
    );
    Ok(if pass { 0 } else { 2 })
}

fn adam_from(cfg: &mut Config) -> Result<AdamConfig<f64>> {
    let d = AdamConfig::<f64>::default();
    AdamConfig::new(
        cfg.optional("tau1", d.tau1())?,
        cfg.optional("tau2", d.tau2())?,
        cfg.optional("eps", d.eps())?,
        cfg.optional("eta0", d.eta0())?,
        cfg.optional("step_exponent", d.step_exponent())?,
        cfg.optional("bias_correction", d.bias_correction())?,
    )?
    .with_norm_cap(cfg.optional("norm_cap", d.norm_cap())?)
}

fn net_from(cfg: &mut Config) -> Result<NetSpec> {
    let d = NetSpec::default();
    Ok(NetSpec {
        hidden: cfg.optional("hidden", d.hidden)?,
        init_scale: cfg.optional("init_scale", d.init_scale)?,
        batch_size: cfg.optional("batch_size", d.batch_size)?,
    })
}

fn cmd_train(ctx: &Ctx, path: &Path) -> Result<i32> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = Config::parse(&text)?;
    let task: String = cfg.required("task")?;
    let steps: usize = cfg.required("steps")?;
    // an explicit --seed wins over the file
    let file_seed: u64 = cfg.optional("seed", ctx.seed)?;
    let seed = if ctx.seed_given { ctx.seed } else { file_seed };
    let net = net_from(&mut cfg)?;
    let adam = adam_from(&mut cfg)?;
    let result: TrainResult<f64> = match task.as_str() {
        "portfolio" => {
            let n: usize = cfg.required("n_assets")?;
            let window: usize = cfg.required("window")?;
            let horizon: usize = cfg.required("horizon")?;
            let samples: usize = cfg.required("samples")?;
            let group: Vec<usize> = cfg.required_list("group")?;
            let delta: f64 = cfg.required("delta")?;
            let risk_free = cfg.optional("risk_free", polyproj::tasks::DEFAULT_RISK_FREE)?;
            let loss_weight = cfg.optional("loss_weight", polyproj::tasks::DEFAULT_LOSS_WEIGHT)?;
            cfg.finish()?;
            if let Some(&bad) = group.iter().find(|&&i| i == 0 || i > n) {
                return Err(Error::Input(format!("group index {bad} outside 1..={n}")));
            }
            let zero_based = group.iter().map(|i| i - 1).collect();
            let mut t =
                PortfolioTask::synthetic(n, window, horizon, samples, zero_based, delta, seed)?;
            t.risk_free = risk_free;
            t.loss_weight = loss_weight;
            train_portfolio(&t, &net, &adam, steps, seed)?
        }
        "matching" => {
            let d1: usize = cfg.required("d1")?;
            let d2: usize = cfg.required("d2")?;
            let matches: usize = cfg.required("matches")?;
            let samples: usize = cfg.required("samples")?;
            let feature_dim = cfg.optional("feature_dim", 4usize)?;
            let noise = cfg.optional("noise", 0.3f64)?;
            cfg.finish()?;
            let t = MatchingTask::synthetic(d1, d2, matches, samples, feature_dim, noise, seed)?;
            train_matching(&t, &net, &adam, steps, seed)?
        }
        other => {
            return Err(Error::Input(format!(
                "unknown task '{other}' (expected portfolio or matching)"
            )))
        }
    };
    let mut buf = Vec::new();
    result.trace.write_csv(&mut buf)?;
    let mut resolved = cfg.resolved().clone();
    resolved.remove("seed");
    resolved.insert("config_file".into(), path.display().to_string());
    ctx.emit_seeded(
        "train",
        seed,
        resolved,
        &String::from_utf8(buf).expect("csv is utf-8"),
    )?;
    let last = result.trace.rows.last();
    eprintln!(
        "train: task={task} steps={steps} final_loss={:e} max_feas_violation={:e} oscillation={:e}",
        last.map_or(f64::NAN, |r| r.loss),
        result.trace.max_feasibility_violation(),
        result.trace.final_oscillation(0.2, 100),
    );
    Ok(0)
}

fn cmd_compare_sinkhorn(ctx: &Ctx, c: usize, trials: usize, iters: &[usize]) -> Result<i32> {
    let cmp = compare_birkhoff(c, trials, iters, ctx.seed)?;
    let mut buf = Vec::new();
    cmp.write_csv(&mut buf)?;
    let mut cfg = BTreeMap::new();
    cfg.insert("c".into(), c.to_string());
    cfg.insert("trials".into(), trials.to_string());
    cfg.insert(
        "iters".into(),
        iters
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    ctx.emit(
        "compare-sinkhorn",
        cfg,
        &String::from_utf8(buf).expect("csv is utf-8"),
    )?;
    for s in &cmp.summaries {
        eprintln!(
            "compare-sinkhorn: iters={} median_sinkhorn={:e} median_projection={:e} wins={}/{}",
            s.iterations, s.median_sinkhorn, cmp.median_projection, s.wins, trials
        );
    }
    Ok(0)
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vector_parsing() {
        assert_eq!(parse_vector("0 1").unwrap(), vec![0.0, 1.0]);
        assert_eq!(parse_vector("-1.5,2e-3").unwrap(), vec![-1.5, 2e-3]);
        let e = parse_vector("1 abc 3").unwrap_err().to_string();
        assert!(e.contains("'abc'"));
        assert!(parse_vector("  ").is_err());
        assert!(parse_vector("nan").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Input("x".into())), 1);
        let conv = Error::Convergence {
            iterations: 1,
            residual: 1.0,
            best: vec![],
        };
        assert_eq!(exit_code(&conv), 2);
        let nested = Error::Step {
            step: 3,
            source: Box::new(Error::Node {
                node: 2,
                source: Box::new(conv),
            }),
        };
        assert_eq!(exit_code(&nested), 2);
    }

    #[test]
    fn builtin_gradcheck_tapes() {
        for task in [
            GradTask::Toy,
            GradTask::Example1,
            GradTask::Portfolio,
            GradTask::Matching,
        ] {
            let (mut t, theta) = gradcheck_tape(task, 1).unwrap();
            let rep = gradcheck(&mut t, &theta, 1e-6, true).unwrap();
            assert!(rep.max_rel_error <= 1e-5, "{task:?}: {}", rep.max_rel_error);
        }
        let (mut t, theta) = gradcheck_tape(GradTask::Kink, 1).unwrap();
        assert!(gradcheck(&mut t, &theta, 1e-6, true).unwrap().flagged >= 1);
    }
}
