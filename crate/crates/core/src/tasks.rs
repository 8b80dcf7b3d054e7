//! Small synthetic training tasks built on projection layers, and the
//! Sinkhorn baseline for doubly stochastic matrices.
//!
//! Both networks are two-layer tanh MLPs. The portfolio net predicts next
//! period returns and raw allocation scores, the scores are projected onto
//! a budget simplex with a group floor, and the loss is the prediction MSE
//! plus a weighted negative Sharpe ratio. The matching net maps pairwise
//! feature affinities to scores that are projected onto the partial
//! matching polytope and scored with a clamped binary cross-entropy.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::optim::{train, AdamConfig, TrainConfig, TrainResult};
use crate::polytope::{make_birkhoff, make_matching, make_portfolio, Polytope, ViolationReport};
use crate::qp::project;

pub const DEFAULT_RISK_FREE: f64 = 0.03;
pub const DEFAULT_LOSS_WEIGHT: f64 = 1.0;
pub const BCE_CLAMP: f64 = 1e-3;
pub const SINKHORN_FLOOR: f64 = 1e-30;

/// Per-period volatility and autocorrelation of the return generator.
const RETURN_VOL: f64 = 0.05;
const RETURN_AR: f64 = 0.3;
const RETURN_FACTOR_SHARE: f64 = 0.3;

/// Shape of the two-layer tanh backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub hidden: usize,
    /// Weights start as `N(0, init_scale² / fan_in)`; biases at zero.
    pub init_scale: f64,
    /// Samples per optimizer step, `0` for the full dataset.
    pub batch_size: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            hidden: 32,
            init_scale: 1.0,
            batch_size: 0,
        }
    }
}

/// `x ↦ [W_k tanh(W_1 x + b_1) + b_k]_k`, one linear head per output block.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub d_in: usize,
    pub hidden: usize,
    pub heads: Vec<usize>,
}

impl Mlp {
    pub fn param_count(&self) -> usize {
        self.hidden * (self.d_in + 1)
            + self
                .heads
                .iter()
                .map(|&o| o * (self.hidden + 1))
                .sum::<usize>()
    }

    pub fn init<R: Rng>(&self, rng: &mut R, scale: f64) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        let mut layer = |theta: &mut Vec<f64>, rows: usize, cols: usize| {
            let sd = scale / (cols as f64).sqrt();
            for _ in 0..rows * cols {
                let z: f64 = StandardNormal.sample(rng);
                theta.push(sd * z);
            }
            theta.extend(std::iter::repeat_n(0.0, rows));
        };
        layer(&mut theta, self.hidden, self.d_in);
        for &o in &self.heads {
            layer(&mut theta, o, self.hidden);
        }
        theta
    }

    /// Appends the network to `tape`, reading parameters from offset 0.
    pub fn build(&self, tape: &mut Tape<f64>, input: NodeId) -> Result<Vec<NodeId>> {
        let mut off = 0;
        let mut param = |tape: &mut Tape<f64>, len: usize| {
            let id = tape.parameter(off, len);
            off += len;
            id
        };
        let w1 = param(tape, self.hidden * self.d_in)?;
        let b1 = param(tape, self.hidden)?;
        let z = tape.affine(w1, input, b1, self.hidden, self.d_in)?;
        let h = tape.tanh(z)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        for &o in &self.heads {
            let w = param(tape, o * self.hidden)?;
            let b = param(tape, o)?;
            outs.push(tape.affine(w, h, b, o, self.hidden)?);
        }
        Ok(outs)
    }
}

/// Synthetic returns, `periods × n`: stationary AR(1) per asset with
/// innovations sharing one common factor, zero mean.
pub fn gen_portfolio_data(n: usize, periods: usize, seed: u64) -> Result<DenseMatrix<f64>> {
    if n < 2 || periods < 2 {
        return Err(Error::Input("need at least 2 assets and 2 periods".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innov = RETURN_VOL * (1.0 - RETURN_AR * RETURN_AR).sqrt();
    let (wf, wi) = (
        RETURN_FACTOR_SHARE.sqrt(),
        (1.0 - RETURN_FACTOR_SHARE).sqrt(),
    );
    let shock = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let f: f64 = StandardNormal.sample(rng);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                wf * f + wi * z
            })
            .collect()
    };
    let mut data = Vec::with_capacity(n * periods);
    let mut prev: Vec<f64> = shock(&mut rng)
        .into_iter()
        .map(|e| RETURN_VOL * e)
        .collect();
    data.extend_from_slice(&prev);
    for _ in 1..periods {
        let e = shock(&mut rng);
        for (p, e) in prev.iter_mut().zip(e) {
            *p = RETURN_AR * *p + innov * e;
        }
        data.extend_from_slice(&prev);
    }
    DenseMatrix::new(periods, n, data)
}

/// `(mean(r) − rf) / std(r)` with the variance floored at 1e-12.
pub fn sharpe_ratio(portfolio_returns: &[f64], risk_free: f64) -> f64 {
    let k = portfolio_returns.len() as f64;
    let mean = portfolio_returns.iter().sum::<f64>() / k;
    let var = portfolio_returns
        .iter()
        .map(|r| (r - mean).powi(2))
        .sum::<f64>()
        / k;
    (mean - risk_free) / var.max(1e-12).sqrt()
}

/// Appends `−Sharpe(R w)` to the tape, where `R` holds future returns
/// (`horizon × n`) and `weights` is an allocation node.
pub fn sharpe_loss(
    tape: &mut Tape<f64>,
    weights: NodeId,
    future_returns: &DenseMatrix<f64>,
    risk_free: f64,
) -> Result<NodeId> {
    let (h, n) = (future_returns.rows(), future_returns.cols());
    let r = tape.constant(future_returns.as_slice().to_vec());
    let zero = tape.constant(vec![0.0; h]);
    let rp = tape.affine(r, weights, zero, h, n)?;
    let mean = tape.mean(rp)?;
    let centered = tape.sub(rp, mean)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq)?;
    let std = tape.sqrt(var)?;
    let excess = tape.offset(mean, -risk_free)?;
    let sharpe = tape.div(excess, std)?;
    tape.scale(sharpe, -1.0)
}

#[derive(Clone, Debug)]
pub struct PortfolioTask {
    pub n_assets: usize,
    pub window: usize,
    pub horizon: usize,
    /// `periods × n_assets`
    pub returns: DenseMatrix<f64>,
    /// Preferred assets, 0-based.
    pub group: Vec<usize>,
    pub delta: f64,
    pub risk_free: f64,
    pub loss_weight: f64,
}

impl PortfolioTask {
    /// Synthetic task over `samples` non-overlapping (window, horizon) pairs.
    pub fn synthetic(
        n_assets: usize,
        window: usize,
        horizon: usize,
        samples: usize,
        group: Vec<usize>,
        delta: f64,
        seed: u64,
    ) -> Result<Self> {
        if window == 0 || horizon < 2 || samples == 0 {
            return Err(Error::Input(
                "window ≥ 1, horizon ≥ 2 and samples ≥ 1 are required".into(),
            ));
        }
        let periods = window + horizon * samples;
        Ok(Self {
            n_assets,
            window,
            horizon,
            returns: gen_portfolio_data(n_assets, periods.max(2 * window), seed)?,
            group,
            delta,
            risk_free: DEFAULT_RISK_FREE,
            loss_weight: DEFAULT_LOSS_WEIGHT,
        })
    }

    pub fn polytope(&self) -> Result<Polytope<f64>> {
        make_portfolio(self.n_assets, &self.group, self.delta)
    }

    /// `(history, future)` pairs: flattened standardized past window and the
    /// following `horizon` periods.
    pub fn samples(&self) -> Vec<(Vec<f64>, DenseMatrix<f64>)> {
        let n = self.n_assets;
        let periods = self.returns.rows();
        let mut out = Vec::new();
        let mut s = self.window;
        while s + self.horizon <= periods {
            let hist = self.returns.as_slice()[(s - self.window) * n..s * n]
                .iter()
                .map(|r| r / RETURN_VOL)
                .collect();
            let fut = DenseMatrix::new(
                self.horizon,
                n,
                self.returns.as_slice()[s * n..(s + self.horizon) * n].to_vec(),
            )
            .expect("slice has the right length");
            out.push((hist, fut));
            s += self.horizon;
        }
        out
    }

    pub fn network(&self, net: &NetSpec) -> Mlp {
        Mlp {
            d_in: self.window * self.n_assets,
            hidden: net.hidden,
            heads: vec![self.n_assets, self.n_assets],
        }
    }

    /// One tape per sample; returns the tapes and the parameter count.
    pub fn tapes(&self, net: &NetSpec) -> Result<(Vec<Tape<f64>>, Mlp)> {
        let poly = Arc::new(self.polytope()?);
        let mlp = self.network(net);
        let mut tapes = Vec::new();
        for (hist, fut) in self.samples() {
            let mut t = Tape::new(mlp.param_count());
            let x = t.constant(hist);
            let heads = mlp.build(&mut t, x)?;
            let (pred, raw) = (heads[0], heads[1]);
            let w = t.projection(poly.clone(), raw)?;
            // predict the mean future return of each asset, in volatility units
            let target: Vec<f64> = fut
                .transpose()
                .as_slice()
                .chunks(self.horizon)
                .map(|c| c.iter().sum::<f64>() / (self.horizon as f64 * RETURN_VOL))
                .collect();
            let target = t.constant(target);
            let mse = t.mse_loss(pred, target)?;
            let neg_sharpe = sharpe_loss(&mut t, w, &fut, self.risk_free)?;
            let weighted = t.scale(neg_sharpe, self.loss_weight)?;
            let loss = t.add(mse, weighted)?;
            t.set_output(loss)?;
            tapes.push(t);
        }
        Ok((tapes, mlp))
    }
}

fn run(
    tapes: &mut [Tape<f64>],
    mlp: &Mlp,
    net: &NetSpec,
    adam: &AdamConfig<f64>,
    steps: usize,
    seed: u64,
) -> Result<TrainResult<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta0 = mlp.init(&mut rng, net.init_scale);
    let cfg = TrainConfig {
        adam: *adam,
        steps,
        batch_size: net.batch_size,
        seed: rng.random(),
    };
    train(tapes, theta0, &cfg)
}

pub fn train_portfolio(
    task: &PortfolioTask,
    net: &NetSpec,
    adam: &AdamConfig<f64>,
    steps: usize,
    seed: u64,
) -> Result<TrainResult<f64>> {
    let (mut tapes, mlp) = task.tapes(net)?;
    run(&mut tapes, &mlp, net, adam, steps, seed)
}

#[derive(Clone, Debug)]
pub struct MatchingSample {
    /// Row-major `d1 × d2` affinities `−‖f_i − g_j‖² / k`.
    pub affinities: Vec<f64>,
    /// Row-major partial permutation matrix.
    pub ground_truth: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MatchingTask {
    pub d1: usize,
    pub d2: usize,
    /// Match budget, equal to the number of ground-truth pairs.
    pub alpha: f64,
    pub samples: Vec<MatchingSample>,
}

impl MatchingTask {
    /// Random graphs with `matches` true pairs. Matched target features are
    /// noisy copies of their source; unmatched targets are independent.
    pub fn synthetic(
        d1: usize,
        d2: usize,
        matches: usize,
        samples: usize,
        feature_dim: usize,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if matches > d1.min(d2) {
            return Err(Error::Input(format!(
                "{matches} matches do not fit a {d1} × {d2} graph"
            )));
        }
        if samples == 0 || feature_dim == 0 {
            return Err(Error::Input(
                "samples and feature_dim must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise_dist = Normal::new(0.0, noise.abs()).map_err(|e| Error::Input(e.to_string()))?;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..feature_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect()
        };
        let mut out = Vec::with_capacity(samples);
        for _ in 0..samples {
            let src: Vec<Vec<f64>> = (0..d1).map(|_| draw(&mut rng)).collect();
            let mut dst: Vec<Vec<f64>> = (0..d2).map(|_| draw(&mut rng)).collect();
            let mut rows: Vec<usize> = (0..d1).collect();
            let mut cols: Vec<usize> = (0..d2).collect();
            rows.shuffle(&mut rng);
            cols.shuffle(&mut rng);
            let mut gt = vec![0.0; d1 * d2];
            for k in 0..matches {
                let (i, j) = (rows[k], cols[k]);
                gt[i * d2 + j] = 1.0;
                dst[j] = src[i]
                    .iter()
                    .map(|&v| v + noise_dist.sample(&mut rng))
                    .collect();
            }
            let mut aff = Vec::with_capacity(d1 * d2);
            for f in &src {
                for g in &dst {
                    let d: f64 = f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
                    aff.push(-d / feature_dim as f64);
                }
            }
            out.push(MatchingSample {
                affinities: aff,
                ground_truth: gt,
            });
        }
        Ok(Self {
            d1,
            d2,
            alpha: matches as f64,
            samples: out,
        })
    }

    pub fn polytope(&self) -> Result<Polytope<f64>> {
        make_matching(self.d1, self.d2, self.alpha)
    }

    pub fn network(&self, net: &NetSpec) -> Mlp {
        let n = self.d1 * self.d2;
        Mlp {
            d_in: n,
            hidden: net.hidden,
            heads: vec![n],
        }
    }

    pub fn tapes(&self, net: &NetSpec) -> Result<(Vec<Tape<f64>>, Mlp)> {
        let poly = Arc::new(self.polytope()?);
        let mlp = self.network(net);
        let mut tapes = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let mut t = Tape::new(mlp.param_count());
            let x = t.constant(s.affinities.clone());
            let scores = mlp.build(&mut t, x)?[0];
            let xm = t.projection(poly.clone(), scores)?;
            let gt = t.constant(s.ground_truth.clone());
            let loss = t.bce_loss(xm, gt, BCE_CLAMP)?;
            t.set_output(loss)?;
            tapes.push(t);
        }
        Ok((tapes, mlp))
    }
}

pub fn train_matching(
    task: &MatchingTask,
    net: &NetSpec,
    adam: &AdamConfig<f64>,
    steps: usize,
    seed: u64,
) -> Result<TrainResult<f64>> {
    let (mut tapes, mlp) = task.tapes(net)?;
    run(&mut tapes, &mlp, net, adam, steps, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub iterations: usize,
    pub entry_floor: f64,
}

impl SinkhornConfig {
    pub fn new(iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Input("sinkhorn needs at least one iteration".into()));
        }
        Ok(Self {
            iterations,
            entry_floor: SINKHORN_FLOOR,
        })
    }
}

/// Divides each row by its sum.
pub fn row_normalize(m: &mut DenseMatrix<f64>) {
    let cols = m.cols();
    for i in 0..m.rows() {
        let s: f64 = m.row(i).iter().sum();
        for j in 0..cols {
            m.set(i, j, m.get(i, j) / s);
        }
    }
}

/// Divides each column by its sum.
pub fn column_normalize(m: &mut DenseMatrix<f64>) {
    for j in 0..m.cols() {
        let s: f64 = (0..m.rows()).map(|i| m.get(i, j)).sum();
        for i in 0..m.rows() {
            m.set(i, j, m.get(i, j) / s);
        }
    }
}

/// `iterations` sweeps of row then column normalization, after flooring
/// entries at `entry_floor`.
pub fn sinkhorn(m0: &DenseMatrix<f64>, cfg: &SinkhornConfig) -> Result<DenseMatrix<f64>> {
    if cfg.iterations == 0 {
        return Err(Error::Input("sinkhorn needs at least one iteration".into()));
    }
    if !(cfg.entry_floor > 0.0) {
        return Err(Error::Input("entry_floor must be positive".into()));
    }
    if let Some(bad) = m0
        .as_slice()
        .iter()
        .find(|v| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(Error::Input(format!(
            "sinkhorn needs nonnegative finite entries, got {bad}"
        )));
    }
    let data = m0
        .as_slice()
        .iter()
        .map(|&v| v.max(cfg.entry_floor))
        .collect();
    let mut m = DenseMatrix::new(m0.rows(), m0.cols(), data)?;
    for _ in 0..cfg.iterations {
        row_normalize(&mut m);
        column_normalize(&mut m);
    }
    Ok(m)
}

/// Violation of a square matrix against all `2c` row and column sum
/// equalities and nonnegativity.
pub fn birkhoff_violation(h: &DenseMatrix<f64>) -> Result<ViolationReport<f64>> {
    let c = h.rows();
    if h.cols() != c {
        return Err(Error::Dimension {
            what: "Birkhoff matrix columns",
            expected: c,
            got: h.cols(),
        });
    }
    let v_ineq: f64 = h.as_slice().iter().map(|&x| x.min(0.0).powi(2)).sum();
    let mut v_eq = 0.0;
    for i in 0..c {
        v_eq += (h.row(i).iter().sum::<f64>() - 1.0).powi(2);
        v_eq += ((0..c).map(|k| h.get(k, i)).sum::<f64>() - 1.0).powi(2);
    }
    Ok(ViolationReport {
        v_ineq,
        v_eq,
        v_all: v_ineq.max(v_eq),
    })
}

/// Log-normal positive test matrix `exp(σ z)`, `σ = 2`.
pub fn random_positive_matrix<R: Rng>(rng: &mut R, c: usize) -> DenseMatrix<f64> {
    let data = (0..c * c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (2.0 * z).exp()
        })
        .collect();
    DenseMatrix::new(c, c, data).expect("finite entries")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub trial: usize,
    pub projection: f64,
    /// One entry per requested Sinkhorn iteration count.
    pub sinkhorn: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonSummary {
    pub iterations: usize,
    pub median_sinkhorn: f64,
    /// Fraction of trials where the projection is strictly more feasible.
    pub win_rate: f64,
    pub wins: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BirkhoffComparison {
    pub c: usize,
    pub iterations: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
    pub median_projection: f64,
    pub max_projection: f64,
    pub summaries: Vec<ComparisonSummary>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Feasibility of the exact Birkhoff projection against finite Sinkhorn on
/// the same random positive matrices.
pub fn compare_birkhoff(
    c: usize,
    trials: usize,
    sinkhorn_iters: &[usize],
    seed: u64,
) -> Result<BirkhoffComparison> {
    if c < 2 {
        return Err(Error::Input("Birkhoff comparison needs c ≥ 2".into()));
    }
    if trials == 0 {
        return Err(Error::Input("trials must be positive".into()));
    }
    if sinkhorn_iters.is_empty() {
        return Err(Error::Input("no Sinkhorn iteration counts given".into()));
    }
    let configs = sinkhorn_iters
        .iter()
        .map(|&k| SinkhornConfig::new(k))
        .collect::<Result<Vec<_>>>()?;
    let poly = make_birkhoff::<f64>(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(trials);
    for trial in 0..trials {
        let m0 = random_positive_matrix(&mut rng, c);
        let y = project(&poly, m0.as_slice(), crate::qp::DEFAULT_TOL)?.y;
        let projection = birkhoff_violation(&DenseMatrix::new(c, c, y)?)?.v_all;
        let sinkhorn = configs
            .iter()
            .map(|cfg| Ok(birkhoff_violation(&sinkhorn(&m0, cfg)?)?.v_all))
            .collect::<Result<Vec<_>>>()?;
        rows.push(ComparisonRow {
            trial,
            projection,
            sinkhorn,
        });
    }
    let summaries = sinkhorn_iters
        .iter()
        .enumerate()
        .map(|(k, &iterations)| {
            let wins = rows.iter().filter(|r| r.projection < r.sinkhorn[k]).count();
            ComparisonSummary {
                iterations,
                median_sinkhorn: median(rows.iter().map(|r| r.sinkhorn[k]).collect()),
                win_rate: wins as f64 / trials as f64,
                wins,
            }
        })
        .collect();
    Ok(BirkhoffComparison {
        c,
        iterations: sinkhorn_iters.to_vec(),
        median_projection: median(rows.iter().map(|r| r.projection).collect()),
        max_projection: rows.iter().fold(0.0, |m, r| m.max(r.projection)),
        rows,
        summaries,
    })
}

impl BirkhoffComparison {
    /// Per-trial rows `trial,projection,sinkhorn_<k>...` followed by
    /// `median` and `win_rate` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["trial".to_string(), "projection".to_string()];
        header.extend(self.iterations.iter().map(|k| format!("sinkhorn_{k}")));
        wr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.trial.to_string(), format!("{:e}", r.projection)];
            rec.extend(r.sinkhorn.iter().map(|v| format!("{v:e}")));
            wr.write_record(&rec)?;
        }
        let mut med = vec![
            "median".to_string(),
            format!("{:e}", self.median_projection),
        ];
        med.extend(
            self.summaries
                .iter()
                .map(|s| format!("{:e}", s.median_sinkhorn)),
        );
        wr.write_record(&med)?;
        let mut win = vec!["win_rate".to_string(), String::new()];
        win.extend(self.summaries.iter().map(|s| format!("{}", s.win_rate)));
        wr.write_record(&win)?;
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    #[test]
    fn portfolio_data_is_deterministic_and_centered() {
        let a = gen_portfolio_data(3, 50, 9).unwrap();
        let b = gen_portfolio_data(3, 50, 9).unwrap();
        assert_eq!(a, b);
        let big = gen_portfolio_data(2, 10_000, 1).unwrap();
        let col = |j: usize| big.column(j);
        for j in 0..2 {
            let m = col(j).iter().sum::<f64>() / 1e4;
            assert!(m.abs() < 0.01, "{m}");
        }
        let (x, y) = (col(0), col(1));
        let (mx, my) = (x.iter().sum::<f64>() / 1e4, y.iter().sum::<f64>() / 1e4);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        let corr = cov / (vx * vy).sqrt();
        assert!(corr > -1.0 && corr < 1.0 && corr > 0.1, "{corr}");
        assert!(gen_portfolio_data(1, 10, 0).is_err());
    }

    #[test]
    fn sharpe_examples() {
        assert_eq!(sharpe_ratio(&[0.03; 5], 0.03), 0.0);
        assert!(sharpe_ratio(&[0.13, -0.07, 0.13, -0.07], 0.03).abs() < 1e-15);
        let base = [0.05, 0.01, 0.08, -0.02];
        let doubled: Vec<f64> = base.iter().map(|r| 0.03 + 2.0 * (r - 0.03)).collect();
        let (s1, s2) = (sharpe_ratio(&base, 0.03), sharpe_ratio(&doubled, 0.03));
        assert!((s1 - s2).abs() < 1e-12);
    }

    fn sharpe_tape(fut: &DenseMatrix<f64>, n: usize) -> Tape<f64> {
        let mut t = Tape::new(n);
        let w = t.parameter(0, n).unwrap();
        let l = sharpe_loss(&mut t, w, fut, 0.03).unwrap();
        t.set_output(l).unwrap();
        t
    }

    #[test]
    fn sharpe_tape_matches_direct_formula() {
        let fut = gen_portfolio_data(3, 12, 4).unwrap();
        let w = vec![0.2, 0.5, 0.3];
        let mut t = sharpe_tape(&fut, 3);
        let loss = t.forward(&w).unwrap();
        let rp = fut.matvec(&w).unwrap();
        assert!((loss + sharpe_ratio(&rp, 0.03)).abs() < 1e-12);
        let rep = gradcheck(&mut t, &w, 1e-6, false).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn constant_returns_give_zero_sharpe_loss() {
        let fut = DenseMatrix::new(4, 2, vec![0.03; 8]).unwrap();
        let mut t = sharpe_tape(&fut, 2);
        assert_eq!(t.forward(&[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn sharpe_gradient_vanishes_along_excess_scaling() {
        // rf = 0: scaling w scales the excess returns uniformly
        let fut = gen_portfolio_data(4, 20, 2).unwrap();
        let mut t = Tape::new(4);
        let w = t.parameter(0, 4).unwrap();
        let l = sharpe_loss(&mut t, w, &fut, 0.0).unwrap();
        t.set_output(l).unwrap();
        let theta = vec![0.1, 0.4, 0.3, 0.2];
        t.forward(&theta).unwrap();
        let g = t.reverse().unwrap();
        let dir: f64 = g.iter().zip(&theta).map(|(a, b)| a * b).sum();
        assert!(dir.abs() <= 1e-8, "{dir}");
    }

    #[test]
    fn empty_group_reduces_to_simplex() {
        let task = PortfolioTask::synthetic(4, 3, 4, 2, vec![], 0.0, 1).unwrap();
        let p = task.polytope().unwrap();
        assert_eq!(p.m(), 4);
        let with_group = PortfolioTask::synthetic(4, 3, 4, 2, vec![0, 1], 0.5, 1).unwrap();
        assert_eq!(with_group.polytope().unwrap().m(), 5);
    }

    #[test]
    fn portfolio_tapes_have_feasible_projections() {
        let task = PortfolioTask::synthetic(5, 4, 5, 3, vec![0, 1], 0.5, 7).unwrap();
        let net = NetSpec {
            hidden: 8,
            ..NetSpec::default()
        };
        let (mut tapes, mlp) = task.tapes(&net).unwrap();
        assert_eq!(tapes.len(), 3);
        let theta = mlp.init(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        for t in &mut tapes {
            t.forward(&theta).unwrap();
            assert!(crate::optim::projection_violation(t) <= 1e-8);
        }
    }

    #[test]
    fn short_portfolio_run() {
        let task = PortfolioTask::synthetic(4, 3, 6, 4, vec![0], 0.3, 5).unwrap();
        let net = NetSpec {
            hidden: 6,
            ..NetSpec::default()
        };
        let res = train_portfolio(&task, &net, &AdamConfig::default(), 30, 2).unwrap();
        assert_eq!(res.trace.rows.len(), 30);
        assert!(res.trace.max_feasibility_violation() <= 1e-8);
        let again = train_portfolio(&task, &net, &AdamConfig::default(), 30, 2).unwrap();
        assert_eq!(res.trace, again.trace);
    }

    #[test]
    fn matching_task_shapes() {
        let task = MatchingTask::synthetic(4, 4, 3, 5, 3, 0.1, 0).unwrap();
        assert_eq!(task.alpha, 3.0);
        for s in &task.samples {
            assert_eq!(s.ground_truth.iter().sum::<f64>(), 3.0);
            assert_eq!(s.affinities.len(), 16);
        }
        assert!(MatchingTask::synthetic(2, 3, 3, 1, 2, 0.1, 0).is_err());
    }

    #[test]
    fn zero_budget_matching_has_constant_loss() {
        let task = MatchingTask::synthetic(3, 3, 0, 3, 2, 0.1, 4).unwrap();
        let net = NetSpec {
            hidden: 4,
            ..NetSpec::default()
        };
        let res = train_matching(&task, &net, &AdamConfig::default(), 20, 1).unwrap();
        let l0 = res.trace.rows[0].loss;
        assert!(res
            .trace
            .rows
            .iter()
            .all(|r| r.loss == l0 && r.grad_norm == 0.0));
    }

    #[test]
    fn sinkhorn_examples() {
        let cfg = SinkhornConfig::new(1).unwrap();
        let one = sinkhorn(&DenseMatrix::new(1, 1, vec![5.0]).unwrap(), &cfg).unwrap();
        assert_eq!(one.as_slice(), &[1.0]);
        let flat = sinkhorn(&DenseMatrix::new(2, 2, vec![3.0; 4]).unwrap(), &cfg).unwrap();
        assert_eq!(flat.as_slice(), &[0.5; 4]);
        assert!(SinkhornConfig::new(0).is_err());
        assert!(sinkhorn(&DenseMatrix::new(1, 2, vec![1.0, -1.0]).unwrap(), &cfg).is_err());
        // zeros are floored rather than dividing by zero
        let z = sinkhorn(
            &DenseMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!(z.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sinkhorn_converges_on_small_matrix() {
        let m0 = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = sinkhorn(&m0, &SinkhornConfig::new(50).unwrap()).unwrap();
        assert!(birkhoff_violation(&out).unwrap().v_all.sqrt() <= 1e-12);
        // independent recursion: alternate row/column scaling vectors
        let (mut r, mut c) = ([1.0f64; 2], [1.0f64; 2]);
        let k = [[1.0, 2.0], [3.0, 4.0]];
        for _ in 0..50 {
            for i in 0..2 {
                r[i] = 1.0 / (k[i][0] * c[0] + k[i][1] * c[1]);
            }
            for j in 0..2 {
                c[j] = 1.0 / (k[0][j] * r[0] + k[1][j] * r[1]);
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.get(i, j) - r[i] * k[i][j] * c[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_sweep_gives_unit_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut m = random_positive_matrix(&mut rng, 6);
            column_normalize(&mut m);
            row_normalize(&mut m);
            for i in 0..6 {
                assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn birkhoff_comparison_small() {
        let cmp = compare_birkhoff(4, 10, &[5, 20, 80], 1).unwrap();
        assert!(cmp.max_projection <= 1e-10);
        let meds: Vec<f64> = cmp.summaries.iter().map(|s| s.median_sinkhorn).collect();
        assert!(meds[0] > meds[1] && meds[1] > meds[2], "{meds:?}");
        assert_eq!(cmp, compare_birkhoff(4, 10, &[5, 20, 80], 1).unwrap());
        assert!(compare_birkhoff(4, 0, &[20], 1).is_err());
        assert!(compare_birkhoff(1, 3, &[20], 1).is_err());
        let mut buf = Vec::new();
        cmp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trial,projection,sinkhorn_5,sinkhorn_20,sinkhorn_80\n"));
        assert_eq!(text.lines().count(), 13);
    }
}
