//! Discrete passive-reflection optimization: the estimated-covariance
//! objective, measurement-only baselines and an exhaustive oracle.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{Campaign, PhaseAlphabet, ReflectionPattern};
use crate::num::{cn, inner, norm_sqr, Cplx, Real};
use crate::textio::{read_table, write_table};

/// Largest `log2` of the pattern count [`exhaustive_search`] accepts.
pub const EXHAUSTIVE_LIMIT_LOG2: u32 = 20;

/// `(1/K)·Σₖ |vᴴwₖ|²` over rank-1 factors `Gₖ = wₖwₖᴴ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveModel<T> {
    pub alphabet: PhaseAlphabet,
    pub factors: Vec<Vec<Cplx<T>>>,
    /// `e^{−jφ}` for each alphabet index, i.e. `conj(v_i)` per choice.
    conj_phasors: Vec<Cplx<T>>,
}

impl<T: Real> ObjectiveModel<T> {
    pub fn new(alphabet: PhaseAlphabet, factors: Vec<Vec<Cplx<T>>>) -> Result<Self> {
        let n = factors.first().map(Vec::len).unwrap_or(0);
        if n == 0 || factors.iter().any(|f| f.len() != n) {
            return Err(Error::Domain("objective needs nonempty factors of one length".into()));
        }
        let conj_phasors = alphabet
            .values::<T>()
            .into_iter()
            .map(|p| Cplx::from_polar(T::one(), -p))
            .collect();
        Ok(ObjectiveModel {
            alphabet,
            factors,
            conj_phasors,
        })
    }

    pub fn elements(&self) -> usize {
        self.factors[0].len()
    }

    fn check(&self, indices: &[usize]) -> Result<()> {
        if indices.len() != self.elements() {
            return Err(Error::Domain(format!(
                "pattern has {} phases, model has {} elements",
                indices.len(),
                self.elements()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.alphabet.size()) {
            return Err(Error::Domain(format!("phase index {bad} outside the alphabet")));
        }
        Ok(())
    }

    fn sums(&self, indices: &[usize]) -> Vec<Cplx<T>> {
        self.factors
            .iter()
            .map(|w| {
                indices
                    .iter()
                    .zip(w)
                    .fold(Cplx::new(T::zero(), T::zero()), |acc, (&m, x)| acc + self.conj_phasors[m] * x)
            })
            .collect()
    }

    fn mean_power(&self, sums: &[Cplx<T>]) -> T {
        sums.iter().map(|s| s.norm_sqr()).sum::<T>() / T::lit(sums.len() as f64)
    }

    /// Objective of an alphabet-feasible pattern given by indices.
    pub fn objective_indices(&self, indices: &[usize]) -> Result<T> {
        self.check(indices)?;
        Ok(self.mean_power(&self.sums(indices)))
    }

    pub fn objective(&self, pattern: &ReflectionPattern<T>) -> Result<T> {
        self.objective_indices(&pattern.indices)
    }

    fn pattern(&self, indices: Vec<usize>) -> ReflectionPattern<T> {
        ReflectionPattern::from_indices(0, self.alphabet, indices).expect("indices inside alphabet")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "NN-SR")]
    NnSr,
    #[serde(rename = "NN-GAR")]
    NnGar,
    #[serde(rename = "CSM")]
    Csm,
    #[serde(rename = "RMS")]
    Rms,
    #[serde(rename = "UpperBound")]
    UpperBound,
    #[serde(rename = "Exhaustive")]
    Exhaustive,
    #[serde(rename = "Refinement")]
    Refinement,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::NnSr,
        Method::NnGar,
        Method::Csm,
        Method::Rms,
        Method::UpperBound,
        Method::Exhaustive,
        Method::Refinement,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::NnSr => "NN-SR",
            Method::NnGar => "NN-GAR",
            Method::Csm => "CSM",
            Method::Rms => "RMS",
            Method::UpperBound => "UpperBound",
            Method::Exhaustive => "Exhaustive",
            Method::Refinement => "Refinement",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationResult<T> {
    pub pattern: ReflectionPattern<T>,
    /// Model objective; absent for measurement-only methods.
    pub objective: Option<T>,
    pub method: Method,
    /// Objective after the initial point and every accepted move.
    pub trace: Vec<T>,
}

/// Grid-averaged measured power per pattern.
fn pattern_means<T: Real>(campaign: &Campaign<T>) -> Result<Vec<T>> {
    if campaign.profiles.is_empty() || campaign.patterns.is_empty() {
        return Err(Error::Domain("measurement baselines need a nonempty campaign".into()));
    }
    let m = campaign.patterns.len();
    let mut means = vec![T::zero(); m];
    for p in campaign.profiles.values() {
        if p.values.len() != m {
            return Err(Error::Domain(format!("profile of grid {} is not aligned with the patterns", p.grid)));
        }
        for (acc, &x) in means.iter_mut().zip(&p.values) {
            *acc += x;
        }
    }
    let k = T::lit(campaign.profiles.len() as f64);
    Ok(means.into_iter().map(|x| x / k).collect())
}

/// Random-max sampling: the measured pattern with the best grid-averaged
/// power, lowest id on ties.
pub fn rms<T: Real>(campaign: &Campaign<T>) -> Result<OptimizationResult<T>> {
    let means = pattern_means(campaign)?;
    let mut best = 0;
    for (m, &x) in means.iter().enumerate() {
        if x > means[best] {
            best = m;
        }
    }
    Ok(OptimizationResult {
        pattern: campaign.patterns[best].clone(),
        objective: None,
        method: Method::Rms,
        trace: vec![means[best]],
    })
}

/// Conditional sample mean: per element, the phase whose patterns have the
/// largest mean grid-averaged power, smallest phase on ties.
pub fn csm<T: Real>(campaign: &Campaign<T>) -> Result<OptimizationResult<T>> {
    let means = pattern_means(campaign)?;
    let n = campaign.patterns[0].len();
    let size = campaign.alphabet.size();
    let mut indices = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = vec![T::zero(); size];
        let mut count = vec![0usize; size];
        for (pat, &x) in campaign.patterns.iter().zip(&means) {
            sum[pat.indices[i]] += x;
            count[pat.indices[i]] += 1;
        }
        let best = (0..size)
            .filter(|&psi| count[psi] > 0)
            .map(|psi| (psi, sum[psi] / T::lit(count[psi] as f64)))
            .fold(None, |acc: Option<(usize, T)>, (psi, x)| match acc {
                Some((_, y)) if y >= x => acc,
                _ => Some((psi, x)),
            });
        match best {
            Some((psi, _)) => indices.push(psi),
            None => return Err(Error::Config(format!("element {i} has no measured phase; increase M2"))),
        }
    }
    Ok(OptimizationResult {
        pattern: ReflectionPattern::from_indices(0, campaign.alphabet, indices)?,
        objective: None,
        method: Method::Csm,
        trace: Vec::new(),
    })
}

/// Settings of [`relax_init`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct RelaxConfig<T> {
    /// Candidates including the plain quantized eigenvector.
    pub samples: usize,
    /// Perturbation size relative to a unit-norm eigenvector.
    pub spread: T,
    pub tolerance: T,
    pub max_iterations: usize,
}

impl<T: Real> Default for RelaxConfig<T> {
    fn default() -> Self {
        RelaxConfig {
            samples: 100,
            spread: T::lit(0.5),
            tolerance: T::lit(1e-9),
            max_iterations: 500,
        }
    }
}

/// Principal eigenvector of `Σₖ wₖwₖᴴ` by power iteration; `None` when the
/// matrix is zero.
pub fn principal_eigenvector<T: Real>(model: &ObjectiveModel<T>, tol: T, max_iter: usize) -> Option<Vec<Cplx<T>>> {
    let apply = |u: &[Cplx<T>]| -> Vec<Cplx<T>> {
        let mut out = vec![Cplx::new(T::zero(), T::zero()); u.len()];
        for w in &model.factors {
            let c = inner(w, u);
            for (o, x) in out.iter_mut().zip(w) {
                *o += x * c;
            }
        }
        out
    };
    let start = model
        .factors
        .iter()
        .max_by(|a, b| norm_sqr(a).partial_cmp(&norm_sqr(b)).expect("finite norms"))?;
    let nrm = norm_sqr(start).sqrt();
    if !(nrm > T::zero()) {
        return None;
    }
    let mut u: Vec<Cplx<T>> = start.iter().map(|z| z / nrm).collect();
    for _ in 0..max_iter {
        let mut next = apply(&u);
        let nn = norm_sqr(&next).sqrt();
        if !(nn > T::zero()) {
            return None;
        }
        next.iter_mut().for_each(|z| *z /= nn);
        // Compare up to the global phase.
        let c = inner(&next, &u);
        let rot = if c.norm() > T::zero() { c / c.norm() } else { Cplx::new(T::one(), T::zero()) };
        let diff: T = next.iter().zip(&u).map(|(a, b)| (a * rot - b).norm_sqr()).sum::<T>().sqrt();
        u = next;
        if diff < tol {
            break;
        }
    }
    Some(u)
}

fn quantize<T: Real>(alphabet: PhaseAlphabet, u: &[Cplx<T>], rotation: T) -> Vec<usize> {
    u.iter().map(|z| alphabet.nearest(z.arg() + rotation)).collect()
}

/// Relaxed initial point: quantized phases of the principal eigenvector and
/// of `samples − 1` Gaussian perturbations of it, each quantized under
/// `2^α` sub-step global rotations; the best candidate wins, first on ties.
pub fn relax_init<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    model: &ObjectiveModel<T>,
    cfg: &RelaxConfig<T>,
) -> Result<OptimizationResult<T>> {
    if cfg.samples == 0 {
        return Err(Error::Config("relaxation needs at least one sample".into()));
    }
    let n = model.elements();
    let a = model.alphabet;
    let Some(u) = principal_eigenvector(model, cfg.tolerance, cfg.max_iterations) else {
        let pattern = model.pattern(vec![a.size() - 1; n]);
        let obj = model.objective(&pattern)?;
        return Ok(OptimizationResult {
            pattern,
            objective: Some(obj),
            method: Method::NnGar,
            trace: vec![obj],
        });
    };
    let rotations: Vec<T> = (0..a.size())
        .map(|r| a.omega::<T>() * T::lit(r as f64 / a.size() as f64))
        .collect();
    let var = cfg.spread * cfg.spread / T::lit(n as f64);
    let mut best: Option<(Vec<usize>, T)> = None;
    let mut trace = Vec::new();
    for s in 0..cfg.samples {
        let cand: Vec<Cplx<T>> = if s == 0 {
            u.clone()
        } else {
            u.iter().map(|z| z + cn(rng, var)).collect()
        };
        for &rot in &rotations {
            let idx = quantize(a, &cand, rot);
            let obj = model.objective_indices(&idx)?;
            if best.as_ref().is_none_or(|b| obj > b.1) {
                best = Some((idx, obj));
                trace.push(obj);
            }
        }
    }
    let (idx, obj) = best.expect("at least one candidate");
    Ok(OptimizationResult {
        pattern: model.pattern(idx),
        objective: Some(obj),
        method: Method::NnGar,
        trace,
    })
}

/// Cyclic coordinate ascent over single-element phase changes.
///
/// `order` fixes the sweep order (ascending when `None`). Moves are accepted
/// only when they improve the objective by more than `1e−12` relative.
pub fn successive_refinement<T: Real>(
    model: &ObjectiveModel<T>,
    start: &ReflectionPattern<T>,
    order: Option<&[usize]>,
) -> Result<OptimizationResult<T>> {
    model.check(&start.indices)?;
    let n = model.elements();
    let ascending: Vec<usize> = (0..n).collect();
    let order = order.unwrap_or(&ascending);
    if order.len() != n || {
        let mut o = order.to_vec();
        o.sort_unstable();
        o != ascending
    } {
        return Err(Error::Domain("sweep order must be a permutation of the elements".into()));
    }
    let size = model.alphabet.size();
    let k = T::lit(model.factors.len() as f64);
    let rel = T::lit(1e-12);
    let mut idx = start.indices.clone();
    let mut sums = model.sums(&idx);
    let mut current = model.mean_power(&sums);
    let mut trace = vec![current];
    const MAX_SWEEPS: usize = 100_000;
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for &i in order {
            let old = model.conj_phasors[idx[i]];
            let mut best_m = idx[i];
            let mut best_val = current;
            for m in 0..size {
                if m == idx[i] {
                    continue;
                }
                let delta = model.conj_phasors[m] - old;
                let val = model
                    .factors
                    .iter()
                    .zip(&sums)
                    .map(|(w, s)| (s + delta * w[i]).norm_sqr())
                    .sum::<T>()
                    / k;
                if val > best_val {
                    best_val = val;
                    best_m = m;
                }
            }
            if best_m != idx[i] && best_val - current > rel * current.abs().max(T::min_positive_value()) {
                let delta = model.conj_phasors[best_m] - old;
                for (s, w) in sums.iter_mut().zip(&model.factors) {
                    *s += delta * w[i];
                }
                idx[i] = best_m;
                // Recompute to avoid drift in the cached sums.
                current = model.mean_power(&sums);
                trace.push(current);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(OptimizationResult {
        pattern: model.pattern(idx),
        objective: Some(current),
        method: Method::Refinement,
        trace,
    })
}

/// Global optimum over all patterns with `θ₁` fixed (rotating every phase by
/// `ω` preserves the objective).
pub fn exhaustive_search<T: Real>(model: &ObjectiveModel<T>) -> Result<OptimizationResult<T>> {
    let n = model.elements();
    let bits = model.alphabet.bits();
    let log2 = bits as u64 * (n as u64 - 1);
    if bits as u64 * n as u64 > EXHAUSTIVE_LIMIT_LOG2 as u64 {
        return Err(Error::TooLarge {
            patterns_log2: bits as usize * n,
            limit_log2: EXHAUSTIVE_LIMIT_LOG2 as usize,
        });
    }
    let size = model.alphabet.size();
    let top = size - 1;
    let mut idx = vec![top; n];
    let mut sums = model.sums(&idx);
    let mut best_idx = idx.clone();
    let mut best = model.mean_power(&sums);
    let total: u64 = 1u64 << log2;
    for _ in 1..total {
        // Odometer over elements 1..n, digits counting down from `top` so the
        // first visited pattern has the lowest phases last.
        let mut i = 1;
        loop {
            let old = idx[i];
            let new = if old == 0 { top } else { old - 1 };
            let delta = model.conj_phasors[new] - model.conj_phasors[old];
            for (s, w) in sums.iter_mut().zip(&model.factors) {
                *s += delta * w[i];
            }
            idx[i] = new;
            if old != 0 {
                break;
            }
            i += 1;
        }
        let val = model.mean_power(&sums);
        if val > best {
            best = val;
            best_idx = idx.clone();
        }
    }
    let best = model.objective_indices(&best_idx)?;
    Ok(OptimizationResult {
        pattern: model.pattern(best_idx),
        objective: Some(best),
        method: Method::Exhaustive,
        trace: vec![best],
    })
}

const RESULT_HEADER: [&str; 3] = ["method", "objective", "indices"];

/// Writes results as `method,objective,indices` with space-separated
/// alphabet indices.
pub fn save_results<T: Real>(path: &Path, results: &[OptimizationResult<T>]) -> Result<()> {
    write_table(
        path,
        &RESULT_HEADER,
        results.iter().map(|r| {
            vec![
                r.method.to_string(),
                r.objective.map(|o| o.to_string()).unwrap_or_default(),
                r.pattern
                    .indices
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            ]
        }),
    )
}

pub fn load_results<T: Real>(path: &Path, alphabet: PhaseAlphabet) -> Result<Vec<OptimizationResult<T>>> {
    let t = read_table(path, &RESULT_HEADER)?;
    t.rows
        .iter()
        .map(|(line, row)| {
            let method: Method = t.field(*line, row, 0, "method")?;
            let raw = row.get(1).map(|s| s.trim()).unwrap_or("");
            let objective = if raw.is_empty() {
                None
            } else {
                Some(t.field::<T>(*line, row, 1, "objective")?)
            };
            let indices = row
                .get(2)
                .map(|s| s.split_whitespace().map(str::parse).collect::<std::result::Result<Vec<usize>, _>>())
                .transpose()
                .map_err(|_| Error::parse(path, *line, "indices must be integers"))?
                .unwrap_or_default();
            Ok(OptimizationResult {
                pattern: ReflectionPattern::from_indices(0, alphabet, indices)
                    .map_err(|e| Error::parse(path, *line, e.to_string()))?,
                objective,
                method,
                trace: Vec::new(),
            })
        })
        .collect()
}
