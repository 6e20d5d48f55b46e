//! Spatial correlation of power profiles, region splitting and typical-grid
//! selection.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::PowerProfile;
use crate::num::Real;
use crate::scene::Grid;
use crate::textio::{read_table, write_table};

/// Fraction of the total sill that defines the correlated range.
pub const SILL_FRACTION: f64 = 0.95;

/// `‖p_i − p_j‖²` between two profiles measured under one pattern list.
pub fn power_difference<T: Real>(a: &PowerProfile<T>, b: &PowerProfile<T>) -> Result<T> {
    if a.values.len() != b.values.len() {
        return Err(Error::Domain(format!(
            "profiles of grids {} and {} have {} and {} entries",
            a.grid,
            b.grid,
            a.values.len(),
            b.values.len()
        )));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (*x - *y) * (*x - *y)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LagBin<T> {
    /// Mean center distance of the pairs in the bin.
    pub lag: T,
    pub gamma: T,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalVariogram<T> {
    pub bins: Vec<LagBin<T>>,
}

/// Bins all pairs `i < j` of measured grids by center distance with width
/// `bin_width` and averages their power differences.
pub fn empirical_variogram<T: Real>(
    profiles: &BTreeMap<usize, PowerProfile<T>>,
    grids: &[Grid<T>],
    bin_width: T,
) -> Result<EmpiricalVariogram<T>> {
    if !(bin_width > T::zero()) {
        return Err(Error::Config("variogram bin width must be positive".into()));
    }
    let measured: Vec<&PowerProfile<T>> = profiles.values().collect();
    if measured.len() < 2 {
        return Err(Error::Selection("a variogram needs at least two measured grids".into()));
    }
    for p in &measured {
        if p.grid >= grids.len() {
            return Err(Error::Domain(format!("grid {} has no geometry", p.grid)));
        }
    }
    // bin -> (sum distance, sum V, count)
    let mut acc: BTreeMap<usize, (T, T, usize)> = BTreeMap::new();
    for (a, pa) in measured.iter().enumerate() {
        for pb in &measured[a + 1..] {
            let d = grids[pa.grid].distance(&grids[pb.grid]);
            let v = power_difference(pa, pb)?;
            let b = (d / bin_width + T::lit(1e-9)).floor().to_usize().unwrap_or(usize::MAX);
            let e = acc.entry(b).or_insert((T::zero(), T::zero(), 0));
            e.0 += d;
            e.1 += v;
            e.2 += 1;
        }
    }
    let bins: Vec<LagBin<T>> = acc
        .into_values()
        .map(|(sd, sv, c)| {
            let n = T::lit(c as f64);
            LagBin {
                lag: sd / n,
                gamma: sv / n,
                count: c,
            }
        })
        .collect();
    if bins.is_empty() {
        return Err(Error::Selection("no lag bin holds a pair".into()));
    }
    Ok(EmpiricalVariogram { bins })
}

/// Spherical variogram `nugget + psill·(1.5x − 0.5x³)`, `x = min(d/range, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct VariogramModel<T> {
    pub nugget: T,
    pub partial_sill: T,
    pub range: T,
    /// Smallest lag at which the model reaches 95% of its total sill.
    pub c_star: T,
    /// Set when the fit reveals no usable spatial structure; `c_star` is 0.
    pub uncorrelated: bool,
}

fn spherical_shape<T: Real>(d: T, range: T) -> T {
    if !(range > T::zero()) {
        return T::one();
    }
    let x = (d / range).min(T::one()).max(T::zero());
    T::lit(1.5) * x - T::lit(0.5) * x * x * x
}

impl<T: Real> VariogramModel<T> {
    pub fn total_sill(&self) -> T {
        self.nugget + self.partial_sill
    }

    pub fn value(&self, d: T) -> T {
        self.nugget + self.partial_sill * spherical_shape(d, self.range)
    }
}

/// Closed-form correlated range of a spherical model.
pub fn correlated_range<T: Real>(nugget: T, partial_sill: T, range: T) -> T {
    let total = nugget + partial_sill;
    let level = T::lit(SILL_FRACTION) * total;
    if !(total > T::zero()) || nugget >= level || !(partial_sill > T::zero()) {
        return T::zero();
    }
    let y = ((level - nugget) / partial_sill).min(T::one());
    // Root in [0, 1] of x³ − 3x + 2y = 0.
    let x = T::lit(2.0) * ((T::PI() + y.acos()) / T::lit(3.0)).cos();
    x.max(T::zero()).min(T::one()) * range
}

#[derive(Clone, Copy)]
struct LinearFit<T> {
    nugget: T,
    psill: T,
    sse: T,
}

/// Weighted nonnegative least squares for `(nugget, psill)` at a fixed range.
fn fit_linear<T: Real>(bins: &[LagBin<T>], range: T) -> LinearFit<T> {
    let (mut sw, mut sf, mut sff, mut sg, mut sfg) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for b in bins {
        let w = T::lit(b.count as f64);
        let f = spherical_shape(b.lag, range);
        sw += w;
        sf += w * f;
        sff += w * f * f;
        sg += w * b.gamma;
        sfg += w * f * b.gamma;
    }
    let sse = |n: T, s: T| -> T {
        bins.iter()
            .map(|b| {
                let r = b.gamma - n - s * spherical_shape(b.lag, range);
                T::lit(b.count as f64) * r * r
            })
            .sum()
    };
    let mut cands = vec![(sg / sw).max(T::zero())].into_iter().map(|n| (n, T::zero())).collect::<Vec<_>>();
    if sff > T::zero() {
        cands.push((T::zero(), (sfg / sff).max(T::zero())));
    }
    let det = sw * sff - sf * sf;
    if det > T::lit(1e-12) * sw * sff {
        let n = (sff * sg - sf * sfg) / det;
        let s = (sw * sfg - sf * sg) / det;
        if n >= T::zero() && s >= T::zero() {
            cands.push((n, s));
        }
    }
    let mut best = LinearFit {
        nugget: T::zero(),
        psill: T::zero(),
        sse: T::infinity(),
    };
    for (n, s) in cands {
        let e = sse(n, s);
        if e < best.sse {
            best = LinearFit { nugget: n, psill: s, sse: e };
        }
    }
    best
}

/// Weighted least-squares spherical fit with counts as weights.
///
/// The range is profiled out: a log-spaced scan seeded with `{¼, ½, 1}` of
/// the largest lag is followed by a golden-section refinement.
pub fn fit_spherical<T: Real>(emp: &EmpiricalVariogram<T>) -> Result<VariogramModel<T>> {
    let bins = &emp.bins;
    if bins.len() < 3 {
        return Err(Error::Selection(format!("spherical fit needs 3 lag bins, got {}", bins.len())));
    }
    let min_lag = bins.iter().map(|b| b.lag).fold(T::infinity(), T::min);
    let max_lag = bins.iter().map(|b| b.lag).fold(T::zero(), T::max);
    if !(max_lag > T::zero()) {
        return Err(Error::Selection("all lags are zero".into()));
    }
    let lo = (min_lag.max(max_lag * T::lit(1e-3)) * T::lit(0.5)).ln();
    let hi = (max_lag * T::lit(3.0)).ln();
    let steps = 160;
    let mut grid: Vec<T> = (0..=steps)
        .map(|i| lo + (hi - lo) * T::lit(i as f64 / steps as f64))
        .collect();
    for s in [0.25, 0.5, 1.0] {
        grid.push((max_lag * T::lit(s)).ln());
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite log ranges"));
    let cost = |la: T| fit_linear(bins, la.exp()).sse;
    let costs: Vec<T> = grid.iter().map(|&la| cost(la)).collect();
    let mut bi = 0;
    for i in 1..costs.len() {
        if costs[i] < costs[bi] {
            bi = i;
        }
    }
    let (mut a, mut b) = (grid[bi.saturating_sub(1)], grid[(bi + 1).min(grid.len() - 1)]);
    let g = T::lit(0.5 * (5f64.sqrt() - 1.0));
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (cost(c), cost(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = cost(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = cost(d);
        }
    }
    let mut la = if fc < fd { c } else { d };
    if cost(la) > costs[bi] {
        la = grid[bi];
    }
    let range = la.exp();
    let lin = fit_linear(bins, range);
    let total = lin.nugget + lin.psill;
    let uncorrelated = !(total > T::zero())
        || lin.psill <= (T::one() - T::lit(SILL_FRACTION)) * total
        || range <= min_lag;
    let c_star = if uncorrelated {
        T::zero()
    } else {
        correlated_range(lin.nugget, lin.psill, range)
    };
    Ok(VariogramModel {
        nugget: lin.nugget,
        partial_sill: lin.psill,
        range,
        c_star,
        uncorrelated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subregion {
    /// Cell coordinates along the two region axes.
    pub cell: (usize, usize),
    pub grids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSplit {
    pub rho1: usize,
    pub rho2: usize,
    /// Nonempty subregions in cell order.
    pub subregions: Vec<Subregion>,
    pub max_grids: usize,
}

fn ceil_tol<T: Real>(x: T) -> usize {
    (x - T::lit(1e-9)).ceil().max(T::one()).to_usize().unwrap_or(usize::MAX)
}

/// Splits the region into `ρ₁ × ρ₂` rectangles whose diagonal does not
/// exceed `c0_star`. With `c0_star = 0` the side is `fallback_side` instead.
pub fn split_region<T: Real>(
    grids: &[Grid<T>],
    d1: T,
    d2: T,
    d0: T,
    c0_star: T,
    fallback_side: T,
) -> Result<RegionSplit> {
    let side = if c0_star > T::zero() {
        c0_star / T::SQRT_2()
    } else {
        fallback_side
    };
    if !(side > T::zero()) || !(d0 > T::zero()) {
        return Err(Error::Config("subregion side and grid pitch must be positive".into()));
    }
    let rho1 = ceil_tol(d1 / side);
    let rho2 = ceil_tol(d2 / side);
    let (w1, w2) = (d1 / T::lit(rho1 as f64), d2 / T::lit(rho2 as f64));
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for g in grids {
        let i = (g.center[0] / w1).floor().to_usize().unwrap_or(0).min(rho1 - 1);
        let j = (g.center[1] / w2).floor().to_usize().unwrap_or(0).min(rho2 - 1);
        cells.entry((j, i)).or_default().push(g.index);
    }
    let subregions = cells
        .into_iter()
        .map(|((j, i), grids)| Subregion { cell: (i, j), grids })
        .collect();
    let max_grids = ceil_tol(d1 / (T::lit(rho1 as f64) * d0)) * ceil_tol(d2 / (T::lit(rho2 as f64) * d0));
    Ok(RegionSplit {
        rho1,
        rho2,
        subregions,
        max_grids,
    })
}

/// Largest center distance between two grids of a set.
pub fn max_pairwise_distance<T: Real>(members: &[usize], grids: &[Grid<T>]) -> T {
    let mut best = T::zero();
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            best = best.max(grids[i].distance(&grids[j]));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubregionRange<T> {
    pub c_star: T,
    /// Fitted model; `None` when the fallback distance was used.
    pub model: Option<VariogramModel<T>>,
}

/// Correlated range inside one subregion from the profiles measured there,
/// falling back to the subregion's largest grid distance when there are too
/// few pairs to fit.
pub fn subregion_range<T: Real>(
    members: &[usize],
    profiles: &BTreeMap<usize, PowerProfile<T>>,
    grids: &[Grid<T>],
    bin_width: T,
) -> SubregionRange<T> {
    let local: BTreeMap<usize, PowerProfile<T>> = members
        .iter()
        .filter_map(|k| profiles.get(k).map(|p| (*k, p.clone())))
        .collect();
    let fit = empirical_variogram(&local, grids, bin_width).and_then(|e| fit_spherical(&e));
    match fit {
        Ok(m) => SubregionRange {
            c_star: m.c_star,
            model: Some(m),
        },
        Err(_) => SubregionRange {
            c_star: max_pairwise_distance(members, grids),
            model: None,
        },
    }
}

/// `η = ⌈ϱ·|A|·d0² / c*²⌉` clamped to `[1, |A|]`.
pub fn typical_count<T: Real>(size: usize, d0: T, c_star: T, rho_scale: T) -> usize {
    if size == 0 {
        return 0;
    }
    if !(c_star > T::zero()) {
        return size;
    }
    let x = rho_scale * T::lit(size as f64) * d0 * d0 / (c_star * c_star);
    if !x.is_finite() {
        return size;
    }
    ceil_tol(x).clamp(1, size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubregionSelection<T> {
    pub cell: (usize, usize),
    pub size: usize,
    pub measured: usize,
    pub c_star: T,
    pub eta: usize,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult<T> {
    pub global: Option<VariogramModel<T>>,
    pub split: RegionSplit,
    pub subregions: Vec<SubregionSelection<T>>,
    /// Union of the per-subregion selections, ascending.
    pub selected: Vec<usize>,
}

/// Samples `etas[t]` grids without replacement from every subregion.
pub fn select_typical<R: Rng + ?Sized>(rng: &mut R, split: &RegionSplit, etas: &[usize]) -> Result<Vec<Vec<usize>>> {
    if etas.len() != split.subregions.len() {
        return Err(Error::Domain("one count per subregion required".into()));
    }
    split
        .subregions
        .iter()
        .zip(etas)
        .map(|(s, &eta)| {
            if eta > s.grids.len() {
                return Err(Error::Domain(format!("cannot pick {eta} of {} grids", s.grids.len())));
            }
            let mut pick: Vec<usize> = rand::seq::index::sample(rng, s.grids.len(), eta)
                .into_iter()
                .map(|i| s.grids[i])
                .collect();
            pick.sort_unstable();
            Ok(pick)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct SelectionParams<T> {
    /// Lag bin width; the grid pitch when absent.
    #[serde(default)]
    pub bin_width: Option<T>,
    pub rho_scale: T,
    /// Subregion side used when the whole field looks uncorrelated.
    pub fallback_side: T,
}

impl<T: Real> Default for SelectionParams<T> {
    fn default() -> Self {
        SelectionParams {
            bin_width: None,
            rho_scale: T::lit(0.4),
            fallback_side: T::lit(15.0),
        }
    }
}

/// Full selection: global fit, split, per-subregion ranges, counts and the
/// random draw.
#[allow(clippy::too_many_arguments)]
pub fn select<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    profiles: &BTreeMap<usize, PowerProfile<T>>,
    grids: &[Grid<T>],
    d1: T,
    d2: T,
    d0: T,
    params: &SelectionParams<T>,
) -> Result<SelectionResult<T>> {
    if !(params.rho_scale > T::zero()) {
        return Err(Error::Config("rho_scale must be positive".into()));
    }
    let width = params.bin_width.unwrap_or(d0);
    let emp = empirical_variogram(profiles, grids, width)?;
    let global = match fit_spherical(&emp) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("global variogram fit failed ({e}); treating the field as uncorrelated");
            None
        }
    };
    let c0 = global.map(|m| m.c_star).unwrap_or(T::zero());
    let split = split_region(grids, d1, d2, d0, c0, params.fallback_side)?;
    let mut subs = Vec::with_capacity(split.subregions.len());
    let mut etas = Vec::with_capacity(split.subregions.len());
    for s in &split.subregions {
        let r = subregion_range(&s.grids, profiles, grids, width);
        let eta = typical_count(s.grids.len(), d0, r.c_star, params.rho_scale);
        etas.push(eta);
        subs.push(SubregionSelection {
            cell: s.cell,
            size: s.grids.len(),
            measured: s.grids.iter().filter(|k| profiles.contains_key(k)).count(),
            c_star: r.c_star,
            eta,
            selected: Vec::new(),
        });
    }
    let picks = select_typical(rng, &split, &etas)?;
    let mut selected = Vec::new();
    for (s, p) in subs.iter_mut().zip(picks) {
        selected.extend_from_slice(&p);
        s.selected = p;
    }
    selected.sort_unstable();
    Ok(SelectionResult {
        global,
        split,
        subregions: subs,
        selected,
    })
}

const VARIOGRAM_HEADER: [&str; 3] = ["lag", "gamma", "count"];

impl<T: Real> EmpiricalVariogram<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_table(
            path,
            &VARIOGRAM_HEADER,
            self.bins
                .iter()
                .map(|b| vec![b.lag.to_string(), b.gamma.to_string(), b.count.to_string()]),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = read_table(path, &VARIOGRAM_HEADER)?;
        let bins = t
            .rows
            .iter()
            .map(|(line, row)| {
                Ok(LagBin {
                    lag: t.field(*line, row, 0, "lag")?,
                    gamma: t.field(*line, row, 1, "gamma")?,
                    count: t.field(*line, row, 2, "count")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EmpiricalVariogram { bins })
    }
}

const SUBREGION_HEADER: [&str; 7] = ["subregion", "cell1", "cell2", "grids", "measured", "c_star", "eta"];

impl<T: Real> SelectionResult<T> {
    /// Writes the per-subregion table.
    pub fn save_subregions(&self, path: &Path) -> Result<()> {
        write_table(
            path,
            &SUBREGION_HEADER,
            self.subregions.iter().enumerate().map(|(t, s)| {
                vec![
                    t.to_string(),
                    s.cell.0.to_string(),
                    s.cell.1.to_string(),
                    s.size.to_string(),
                    s.measured.to_string(),
                    s.c_star.to_string(),
                    s.eta.to_string(),
                ]
            }),
        )
    }
}

/// Writes a grid manifest, one index per line after a `grid` header.
pub fn save_manifest(path: &Path, grids: &[usize]) -> Result<()> {
    write_table(path, &["grid"], grids.iter().map(|k| vec![k.to_string()]))
}

pub fn load_manifest(path: &Path) -> Result<Vec<usize>> {
    let t = read_table(path, &["grid"])?;
    t.rows.iter().map(|(line, row)| t.field(*line, row, 0, "grid")).collect()
}
