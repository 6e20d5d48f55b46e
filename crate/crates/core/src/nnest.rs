//! Single-layer real-valued network that recovers a grid's cascaded channel,
//! up to a global phase, from averaged power measurements.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::measurement::{Campaign, PhaseAlphabet};
use crate::num::{inner, norm_sqr, Cplx, Real};
use crate::seed::derive_rng;
use crate::textio::{read_table, write_table};

/// `x = [Re v; Im v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealLift<T> {
    pub x: Vec<T>,
}

impl<T: Real> RealLift<T> {
    pub fn n(&self) -> usize {
        self.x.len() / 2
    }

    fn cos(&self) -> &[T] {
        &self.x[..self.n()]
    }

    fn sin(&self) -> &[T] {
        &self.x[self.n()..]
    }
}

pub fn lift<T: Real>(v: &[Cplx<T>]) -> RealLift<T> {
    let mut x: Vec<T> = v.iter().map(|z| z.re).collect();
    x.extend(v.iter().map(|z| z.im));
    RealLift { x }
}

/// Weights `W = [w1 w2; w2 −w1]` and bias `w0`. Only `w1`, `w2` are stored,
/// so the block structure holds by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredWeights<T> {
    pub w1: Vec<T>,
    pub w2: Vec<T>,
    pub w0: T,
}

impl<T: Real> StructuredWeights<T> {
    pub fn zeros(n: usize) -> Self {
        StructuredWeights {
            w1: vec![T::zero(); n],
            w2: vec![T::zero(); n],
            w0: T::zero(),
        }
    }

    pub fn from_complex(w: &[Cplx<T>], w0: T) -> Self {
        StructuredWeights {
            w1: w.iter().map(|z| z.re).collect(),
            w2: w.iter().map(|z| z.im).collect(),
            w0,
        }
    }

    pub fn n(&self) -> usize {
        self.w1.len()
    }

    /// `w1 + j·w2`.
    pub fn complex(&self) -> Vec<Cplx<T>> {
        self.w1.iter().zip(&self.w2).map(|(&a, &b)| Cplx::new(a, b)).collect()
    }

    /// The `2N × 2` matrix, row by row.
    pub fn matrix(&self) -> Vec<[T; 2]> {
        let mut m: Vec<[T; 2]> = self.w1.iter().zip(&self.w2).map(|(&a, &b)| [a, b]).collect();
        m.extend(self.w1.iter().zip(&self.w2).map(|(&a, &b)| [b, -a]));
        m
    }

    /// `γ = [w1; w2]`.
    pub fn gamma(&self) -> Vec<T> {
        let mut g = self.w1.clone();
        g.extend_from_slice(&self.w2);
        g
    }

    pub fn set_gamma(&mut self, g: &[T]) {
        let n = self.n();
        self.w1.copy_from_slice(&g[..n]);
        self.w2.copy_from_slice(&g[n..]);
    }
}

/// Hidden activations `(a, b) = xᵀW`.
pub fn hidden<T: Real>(x: &RealLift<T>, w: &StructuredWeights<T>) -> (T, T) {
    let (c, s) = (x.cos(), x.sin());
    let mut a = T::zero();
    let mut b = T::zero();
    for i in 0..w.n() {
        a += c[i] * w.w1[i] + s[i] * w.w2[i];
        b += c[i] * w.w2[i] - s[i] * w.w1[i];
    }
    (a, b)
}

/// `p̂ = a² + b² + w0`.
pub fn forward<T: Real>(x: &RealLift<T>, w: &StructuredWeights<T>) -> Result<T> {
    if x.x.len() != 2 * w.n() || w.w2.len() != w.n() {
        return Err(Error::Domain(format!(
            "input of length {} does not fit weights for {} elements",
            x.x.len(),
            w.n()
        )));
    }
    let (a, b) = hidden(x, w);
    Ok(a * a + b * b + w.w0)
}

/// One training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub x: RealLift<T>,
    pub p: T,
}

fn quad<T: Real>(x: &RealLift<T>, w: &StructuredWeights<T>) -> T {
    let (a, b) = hidden(x, w);
    a * a + b * b
}

/// `w0* = mean(p̄ − ‖xᵀW‖²)`.
pub fn bias_closed_form<T: Real>(samples: &[Sample<T>], w: &StructuredWeights<T>) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::Domain("bias needs at least one sample".into()));
    }
    let s: T = samples.iter().map(|r| r.p - quad(&r.x, w)).sum();
    Ok(s / T::lit(samples.len() as f64))
}

/// Training MSE with the bias at its closed-form optimum.
pub fn loss<T: Real>(samples: &[Sample<T>], w: &StructuredWeights<T>) -> Result<T> {
    let w0 = bias_closed_form(samples, w)?;
    let s: T = samples
        .iter()
        .map(|r| {
            let e = quad(&r.x, w) + w0 - r.p;
            e * e
        })
        .sum();
    Ok(s / T::lit(samples.len() as f64))
}

/// Gradient of the batch MSE with respect to `γ = [w1; w2]`, `w0` fixed.
pub fn gradient<T: Real>(batch: &[Sample<T>], w: &StructuredWeights<T>) -> Result<Vec<T>> {
    if batch.is_empty() {
        return Err(Error::Domain("gradient needs a nonempty batch".into()));
    }
    let n = w.n();
    let mut g = vec![T::zero(); 2 * n];
    accumulate_gradient(batch, w, w.w0, &mut g);
    Ok(g)
}

fn accumulate_gradient<T: Real>(batch: &[Sample<T>], w: &StructuredWeights<T>, w0: T, g: &mut [T]) {
    let n = w.n();
    g.iter_mut().for_each(|x| *x = T::zero());
    let four = T::lit(4.0) / T::lit(batch.len() as f64);
    for r in batch {
        let (a, b) = hidden(&r.x, w);
        let e = a * a + b * b + w0 - r.p;
        let (ka, kb) = (four * e * a, four * e * b);
        let (c, s) = (r.x.cos(), r.x.sin());
        for i in 0..n {
            g[i] += ka * c[i] - kb * s[i];
            g[n + i] += ka * s[i] + kb * c[i];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    /// Inverse-time decay per epoch: `κ_z = κ / (1 + decay·(z − 1))`.
    pub decay: T,
    pub batch_size: usize,
    pub epochs: usize,
    /// `M₀ / M₂`.
    pub train_fraction: T,
    pub max_restarts: usize,
    pub divergence_factor: T,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            learning_rate: T::lit(2e-2),
            decay: T::lit(1e-4),
            batch_size: 2,
            epochs: 200,
            train_fraction: T::lit(0.8),
            max_restarts: 3,
            divergence_factor: T::lit(1e6),
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > T::zero()) || !(self.decay >= T::zero()) {
            return Err(Error::Config("learning_rate must be positive and decay nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(self.train_fraction > T::zero() && self.train_fraction < T::one()) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if !(self.divergence_factor > T::one()) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        Ok(())
    }

    /// `M₀` for `m2` records.
    pub fn train_count(&self, m2: usize) -> Result<usize> {
        let m0 = (self.train_fraction * T::lit(m2 as f64)).floor().to_usize().unwrap_or(0);
        if m0 == 0 || m0 >= m2 {
            return Err(Error::Config(format!(
                "{m2} records cannot be split into nonempty training and validation sets"
            )));
        }
        Ok(m0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEstimate<T> {
    pub grid: usize,
    /// `ŵ = w1* + j·w2*`.
    pub w: Vec<Cplx<T>>,
    pub w0: T,
    /// 1-based epoch of the selected weights.
    pub best_epoch: usize,
    /// Validation error after each epoch.
    pub trace: Vec<T>,
}

impl<T: Real> ChannelEstimate<T> {
    /// `Ĝ = ŵŵᴴ`.
    pub fn g_hat(&self) -> CMatrix<T> {
        CMatrix::outer(&self.w)
    }
}

struct Scaled<T> {
    samples: Vec<Sample<T>>,
    scale: T,
}

fn normalize<T: Real>(samples: &[Sample<T>], n: usize) -> Scaled<T> {
    let mean = samples.iter().map(|s| s.p).sum::<T>() / T::lit(samples.len() as f64);
    let mut scale = mean * T::lit(n as f64);
    if !(scale > T::zero()) || !scale.is_finite() {
        scale = T::one();
    }
    Scaled {
        samples: samples
            .iter()
            .map(|s| Sample {
                x: s.x.clone(),
                p: s.p / scale,
            })
            .collect(),
        scale,
    }
}

/// Mean of `v vᴴ` over the training inputs, so that `mean|vᴴw|² = wᴴAw`.
fn input_moment<T: Real>(samples: &[Sample<T>]) -> CMatrix<T> {
    let n = samples[0].x.n();
    let mut a = CMatrix::zeros(n);
    for s in samples {
        let v: Vec<Cplx<T>> = (0..n).map(|i| Cplx::new(s.x.x[i], s.x.x[n + i])).collect();
        a.add_assign(&CMatrix::outer(&v));
    }
    a.scale(T::one() / T::lit(samples.len() as f64));
    a
}

fn sse<T: Real>(samples: &[Sample<T>], w: &StructuredWeights<T>) -> T {
    samples
        .iter()
        .map(|r| {
            let e = quad(&r.x, w) + w.w0 - r.p;
            e * e
        })
        .sum()
}

/// Mini-batch gradient descent on the first `M₀` samples with the epoch
/// chosen by validation error on the rest.
///
/// Powers are divided by `N·mean(p̄)` during training and the estimate is
/// mapped back, so the learning rate does not depend on the power scale.
pub fn train<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    grid: usize,
    samples: &[Sample<T>],
    cfg: &TrainConfig<T>,
) -> Result<ChannelEstimate<T>> {
    cfg.validate()?;
    let m0 = cfg.train_count(samples.len())?;
    let n = samples[0].x.n();
    if n == 0 || samples.iter().any(|s| s.x.n() != n || s.x.x.len() != 2 * n) {
        return Err(Error::Domain("samples must share one nonzero element count".into()));
    }
    let Scaled { samples: scaled, scale } = normalize(&samples[..m0], n);
    let train_set = scaled;
    let val_set: Vec<Sample<T>> = samples[m0..]
        .iter()
        .map(|s| Sample {
            x: s.x.clone(),
            p: s.p / scale,
        })
        .collect();
    let a = input_moment(&train_set);
    let mean_p = train_set.iter().map(|s| s.p).sum::<T>() / T::lit(m0 as f64);
    let std = (mean_p.max(T::zero()) / T::lit(2.0 * n as f64)).sqrt();

    let mut order: Vec<usize> = (0..m0).collect();
    let mut batch: Vec<Sample<T>> = Vec::with_capacity(cfg.batch_size);
    let mut grad = vec![T::zero(); 2 * n];
    let mut last_loss = T::nan();
    let mut kappa0 = cfg.learning_rate;
    for restart in 0..=cfg.max_restarts {
        let mut w = StructuredWeights::zeros(n);
        for i in 0..n {
            w.w1[i] = T::standard_normal(rng) * std;
            w.w2[i] = T::standard_normal(rng) * std;
        }
        let bias = |w: &StructuredWeights<T>| mean_p - a.quad_form(&w.complex());
        w.w0 = bias(&w);
        let floor = T::lit(1e-300).max(T::min_positive_value());
        let initial = (sse(&train_set, &w) / T::lit(m0 as f64)).max(floor);
        let mut best: Option<(StructuredWeights<T>, T, usize)> = None;
        let mut trace = Vec::with_capacity(cfg.epochs);
        let mut diverged = false;
        for z in 1..=cfg.epochs {
            let kappa = kappa0 / (T::one() + cfg.decay * T::lit((z - 1) as f64));
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
                let w0 = bias(&w);
                accumulate_gradient(&batch, &w, w0, &mut grad);
                for i in 0..n {
                    w.w1[i] -= kappa * grad[i];
                    w.w2[i] -= kappa * grad[n + i];
                }
            }
            w.w0 = bias(&w);
            let train_loss = sse(&train_set, &w) / T::lit(m0 as f64);
            last_loss = train_loss;
            if !train_loss.is_finite() || train_loss > cfg.divergence_factor * initial {
                diverged = true;
                break;
            }
            let val = sse(&val_set, &w);
            trace.push(val * scale * scale);
            if best.as_ref().is_none_or(|b| val < b.1) {
                best = Some((w.clone(), val, z));
            }
        }
        if diverged {
            log::warn!(
                "grid {grid}: training diverged at learning rate {kappa0} (restart {restart}); halving"
            );
            kappa0 /= T::lit(2.0);
            continue;
        }
        let (bw, _, epoch) = best.expect("at least one epoch ran");
        let root = scale.sqrt();
        return Ok(ChannelEstimate {
            grid,
            w: bw.complex().into_iter().map(|z| z * root).collect(),
            w0: bw.w0 * scale,
            best_epoch: epoch,
            trace,
        });
    }
    Err(Error::Divergence {
        grid,
        restarts: cfg.max_restarts,
        last_loss: last_loss.to_f64_lossy(),
        learning_rate: kappa0.to_f64_lossy() * 2.0,
    })
}

/// Training pairs of one grid, in pattern order.
pub fn samples_for<T: Real>(campaign: &Campaign<T>, grid: usize) -> Result<Vec<Sample<T>>> {
    let profile = campaign
        .profiles
        .get(&grid)
        .ok_or_else(|| Error::Domain(format!("grid {grid} was not measured")))?;
    Ok(campaign
        .patterns
        .iter()
        .zip(&profile.values)
        .map(|(pat, &p)| Sample { x: lift(&pat.v), p })
        .collect())
}

/// Trains every measured grid of a campaign in parallel; each grid draws
/// from a generator keyed by `(master, stage, grid)`.
pub fn train_campaign<T: Real>(
    campaign: &Campaign<T>,
    cfg: &TrainConfig<T>,
    master_seed: u64,
    stage: &str,
) -> Result<BTreeMap<usize, ChannelEstimate<T>>> {
    let grids = campaign.grids();
    grids
        .par_iter()
        .map(|&k| {
            let samples = samples_for(campaign, k)?;
            let mut rng = derive_rng(master_seed, stage, &[k as u64]);
            train(&mut rng, k, &samples, cfg).map(|e| (k, e))
        })
        .collect()
}

/// Whether `ŵ` equals `h̄` up to a global phase (or, for one-bit alphabets,
/// up to conjugation and a global phase) within relative error `tol`.
pub fn phase_ambiguity_check<T: Real>(
    w_hat: &[Cplx<T>],
    h_bar: &[Cplx<T>],
    alphabet: PhaseAlphabet,
    tol: T,
) -> bool {
    let hh = norm_sqr(h_bar);
    if !(hh > T::zero()) {
        return norm_sqr(w_hat) <= tol * tol;
    }
    let ww = norm_sqr(w_hat);
    let rel = |cross: T| ((ww + hh - T::lit(2.0) * cross).max(T::zero()) / hh).sqrt();
    if rel(inner(w_hat, h_bar).norm()) < tol {
        return true;
    }
    if alphabet.bits() == 1 {
        let conj: Vec<Cplx<T>> = w_hat.iter().map(|z| z.conj()).collect();
        return rel(inner(&conj, h_bar).norm()) < tol;
    }
    false
}

const ESTIMATE_HEADER: [&str; 4] = ["grid", "element", "re", "im"];
const SUMMARY_HEADER: [&str; 4] = ["grid", "w0", "best_epoch", "nmse"];
const TRACE_HEADER: [&str; 3] = ["grid", "epoch", "validation_error"];

/// Paths of the three estimate files.
#[derive(Clone, Debug)]
pub struct EstimateFiles<'a> {
    pub weights: &'a Path,
    pub summary: &'a Path,
    pub trace: &'a Path,
}

/// Writes estimates; `nmse` holds per-grid errors when ground truth exists.
pub fn save_estimates<T: Real>(
    files: &EstimateFiles<'_>,
    estimates: &BTreeMap<usize, ChannelEstimate<T>>,
    nmse: Option<&BTreeMap<usize, T>>,
) -> Result<()> {
    write_table(
        files.weights,
        &ESTIMATE_HEADER,
        estimates.values().flat_map(|e| {
            e.w.iter()
                .enumerate()
                .map(move |(i, z)| vec![e.grid.to_string(), i.to_string(), z.re.to_string(), z.im.to_string()])
        }),
    )?;
    write_table(
        files.summary,
        &SUMMARY_HEADER,
        estimates.values().map(|e| {
            let err = nmse
                .and_then(|m| m.get(&e.grid))
                .map(|x| x.to_string())
                .unwrap_or_default();
            vec![e.grid.to_string(), e.w0.to_string(), e.best_epoch.to_string(), err]
        }),
    )?;
    write_table(
        files.trace,
        &TRACE_HEADER,
        estimates.values().flat_map(|e| {
            e.trace
                .iter()
                .enumerate()
                .map(move |(z, v)| vec![e.grid.to_string(), (z + 1).to_string(), v.to_string()])
        }),
    )
}

/// Reads estimates written by [`save_estimates`]; the trace file is optional.
pub fn load_estimates<T: Real>(files: &EstimateFiles<'_>) -> Result<BTreeMap<usize, ChannelEstimate<T>>> {
    let mut out: BTreeMap<usize, ChannelEstimate<T>> = BTreeMap::new();
    let t = read_table(files.summary, &SUMMARY_HEADER)?;
    for (line, row) in &t.rows {
        let grid: usize = t.field(*line, row, 0, "grid")?;
        let est = ChannelEstimate {
            grid,
            w: Vec::new(),
            w0: t.field(*line, row, 1, "w0")?,
            best_epoch: t.field(*line, row, 2, "best_epoch")?,
            trace: Vec::new(),
        };
        if out.insert(grid, est).is_some() {
            return Err(Error::parse(files.summary, *line, format!("grid {grid} listed twice")));
        }
    }
    let t = read_table(files.weights, &ESTIMATE_HEADER)?;
    for (line, row) in &t.rows {
        let grid: usize = t.field(*line, row, 0, "grid")?;
        let element: usize = t.field(*line, row, 1, "element")?;
        let z = Cplx::new(t.field(*line, row, 2, "re")?, t.field(*line, row, 3, "im")?);
        let e = out
            .get_mut(&grid)
            .ok_or_else(|| Error::parse(files.weights, *line, format!("grid {grid} missing from summary")))?;
        if element != e.w.len() {
            return Err(Error::parse(files.weights, *line, "elements must be listed in order"));
        }
        e.w.push(z);
    }
    if files.trace.exists() {
        let t = read_table(files.trace, &TRACE_HEADER)?;
        for (line, row) in &t.rows {
            let grid: usize = t.field(*line, row, 0, "grid")?;
            let v: T = t.field(*line, row, 2, "validation_error")?;
            if let Some(e) = out.get_mut(&grid) {
                e.trace.push(v);
            } else {
                return Err(Error::parse(files.trace, *line, format!("grid {grid} missing from summary")));
            }
        }
    }
    let n = out.values().next().map(|e| e.w.len()).unwrap_or(0);
    if out.values().any(|e| e.w.len() != n || n == 0) {
        return Err(Error::parse(files.weights, 0, "every grid needs the same nonzero element count"));
    }
    Ok(out)
}
