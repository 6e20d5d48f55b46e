//! Discrete random reflection patterns and averaged received-power
//! measurements, the only observable the estimator consumes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{cn, inner, Cplx, Real};
use crate::propagation::{ChannelModel, GroundTruthChannels};
use crate::seed::derive_rng;
use crate::textio::{read_table, write_table};

/// `Φ_α = {ω, 2ω, …, 2^α ω}` with `ω = 2π / 2^α`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseAlphabet {
    bits: u32,
}

impl PhaseAlphabet {
    pub const MAX_BITS: u32 = 8;

    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > Self::MAX_BITS {
            return Err(Error::Config(format!(
                "phase alphabet needs 1..={} control bits, got {bits}",
                Self::MAX_BITS
            )));
        }
        Ok(PhaseAlphabet { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn size(&self) -> usize {
        1 << self.bits
    }

    pub fn omega<T: Real>(&self) -> T {
        T::TAU() / T::lit(self.size() as f64)
    }

    /// Phase of alphabet index `idx ∈ 0..size`, i.e. `(idx + 1)·ω`.
    pub fn phase<T: Real>(&self, idx: usize) -> T {
        T::lit((idx + 1) as f64) * self.omega::<T>()
    }

    pub fn values<T: Real>(&self) -> Vec<T> {
        (0..self.size()).map(|i| self.phase(i)).collect()
    }

    /// Index of the alphabet phase closest to `angle` on the circle; ties go
    /// to the smaller phase.
    pub fn nearest<T: Real>(&self, angle: T) -> usize {
        let w = self.omega::<T>();
        let s = self.size() as i64;
        // Position relative to ω measured in steps.
        let steps = (angle / w).round().to_i64().unwrap_or(0);
        ((steps - 1).rem_euclid(s)) as usize
    }
}

/// One reflection configuration: alphabet indices, their phases and
/// `v = e^{jθ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionPattern<T> {
    pub id: usize,
    pub indices: Vec<usize>,
    pub theta: Vec<T>,
    pub v: Vec<Cplx<T>>,
}

impl<T: Real> ReflectionPattern<T> {
    pub fn from_indices(id: usize, alphabet: PhaseAlphabet, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= alphabet.size()) {
            return Err(Error::Domain(format!("alphabet index {bad} outside 0..{}", alphabet.size())));
        }
        let theta: Vec<T> = indices.iter().map(|&i| alphabet.phase(i)).collect();
        let v = theta.iter().map(|&t| Cplx::from_polar(T::one(), t)).collect();
        Ok(ReflectionPattern { id, indices, theta, v })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Pattern with every phase drawn i.i.d. uniformly from the alphabet.
pub fn random_pattern<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    alphabet: PhaseAlphabet,
    n: usize,
    id: usize,
) -> ReflectionPattern<T> {
    let indices = (0..n).map(|_| rng.random_range(0..alphabet.size())).collect();
    ReflectionPattern::from_indices(id, alphabet, indices).expect("indices drawn inside the alphabet")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord<T> {
    pub grid: usize,
    pub pattern: usize,
    pub p_bar: T,
    /// Symbols averaged; `0` marks the infinite-average idealization.
    pub q: usize,
    pub p: T,
    pub sigma2: T,
}

/// Measurements of one grid, aligned with a campaign's pattern ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerProfile<T> {
    pub grid: usize,
    pub values: Vec<T>,
}

/// Averaged received power over `q` symbols with the random channel parts
/// redrawn every symbol.
pub fn measure_power<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    model: &ChannelModel<T>,
    k: usize,
    pattern: &ReflectionPattern<T>,
    q: usize,
    p: T,
    sigma2: T,
) -> Result<MeasurementRecord<T>> {
    measure_power_blocked(rng, model, k, pattern, q, 1, p, sigma2)
}

/// [`measure_power`] with the channel held fixed over `coherence` symbols.
#[allow(clippy::too_many_arguments)]
pub fn measure_power_blocked<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    model: &ChannelModel<T>,
    k: usize,
    pattern: &ReflectionPattern<T>,
    q: usize,
    coherence: usize,
    p: T,
    sigma2: T,
) -> Result<MeasurementRecord<T>> {
    if q == 0 || coherence == 0 {
        return Err(Error::Domain("Q and the coherence length must be at least 1".into()));
    }
    if k >= model.grid_count() {
        return Err(Error::Domain(format!("grid {k} does not exist")));
    }
    if pattern.len() != model.elements() {
        return Err(Error::Domain("pattern length does not match the IRS".into()));
    }
    let amp = p.sqrt();
    let mut h = vec![Cplx::new(T::zero(), T::zero()); model.elements()];
    let mut g = Cplx::new(T::zero(), T::zero());
    let mut acc = T::zero();
    for sym in 0..q {
        if sym % coherence == 0 {
            model.instantaneous_into(rng, k, &mut h);
            g = inner(&pattern.v, &h) * amp;
        }
        let noise = if sigma2 > T::zero() {
            cn(rng, sigma2)
        } else {
            Cplx::new(T::zero(), T::zero())
        };
        acc += (g + noise).norm_sqr();
    }
    Ok(MeasurementRecord {
        grid: k,
        pattern: pattern.id,
        p_bar: acc / T::lit(q as f64),
        q,
        p,
        sigma2,
    })
}

/// Infinite-average measurement: the expected power itself.
pub fn expected_measure<T: Real>(
    truth: &GroundTruthChannels<T>,
    k: usize,
    pattern: &ReflectionPattern<T>,
) -> Result<MeasurementRecord<T>> {
    Ok(MeasurementRecord {
        grid: k,
        pattern: pattern.id,
        p_bar: truth.expected_power(k, &pattern.v)?,
        q: 0,
        p: truth.p,
        sigma2: truth.sigma2,
    })
}

/// A shared pattern list and the measurements of every grid under it.
#[derive(Clone, Debug, PartialEq)]
pub struct Campaign<T> {
    pub alphabet: PhaseAlphabet,
    pub patterns: Vec<ReflectionPattern<T>>,
    pub profiles: BTreeMap<usize, PowerProfile<T>>,
    pub records: Vec<MeasurementRecord<T>>,
}

/// Parameters shared by both campaign flavours.
#[derive(Clone, Copy, Debug)]
pub struct CampaignSpec<'a> {
    pub master_seed: u64,
    /// Stage name mixed into every derived seed.
    pub stage: &'a str,
    pub alphabet: PhaseAlphabet,
    pub patterns: usize,
}

fn campaign_patterns<T: Real>(spec: &CampaignSpec<'_>, n: usize) -> Vec<ReflectionPattern<T>> {
    let mut rng = derive_rng(spec.master_seed, &format!("{}/patterns", spec.stage), &[]);
    (0..spec.patterns).map(|m| random_pattern(&mut rng, spec.alphabet, n, m)).collect()
}

fn assemble<T: Real>(
    alphabet: PhaseAlphabet,
    patterns: Vec<ReflectionPattern<T>>,
    grids: &[usize],
    records: Vec<MeasurementRecord<T>>,
) -> Campaign<T> {
    let m = patterns.len();
    let profiles = grids
        .iter()
        .enumerate()
        .map(|(gi, &k)| {
            let values = records[gi * m..(gi + 1) * m].iter().map(|r| r.p_bar).collect();
            (k, PowerProfile { grid: k, values })
        })
        .collect();
    Campaign {
        alphabet,
        patterns,
        profiles,
        records,
    }
}

fn check_campaign(grids: &[usize], patterns: usize) -> Result<()> {
    if grids.is_empty() || patterns == 0 {
        return Err(Error::Domain("a campaign needs at least one grid and one pattern".into()));
    }
    let mut sorted = grids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != grids.len() {
        return Err(Error::Domain("campaign grids must be distinct".into()));
    }
    Ok(())
}

/// Measures every grid in `grids` under one shared list of random patterns.
/// Each `(k, m)` measurement draws from its own generator keyed by
/// `(master, stage, k, m)`, so results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn campaign<T: Real>(
    spec: &CampaignSpec<'_>,
    model: &ChannelModel<T>,
    grids: &[usize],
    q: usize,
    coherence: usize,
    p: T,
    sigma2: T,
) -> Result<Campaign<T>> {
    check_campaign(grids, spec.patterns)?;
    let patterns = campaign_patterns(spec, model.elements());
    let jobs: Vec<(usize, usize)> = grids
        .iter()
        .flat_map(|&k| (0..spec.patterns).map(move |m| (k, m)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(k, m)| {
            let mut rng = derive_rng(spec.master_seed, spec.stage, &[k as u64, m as u64]);
            measure_power_blocked(&mut rng, model, k, &patterns[m], q, coherence, p, sigma2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(spec.alphabet, patterns, grids, records))
}

/// Noise-free campaign built from [`expected_measure`].
pub fn expected_campaign<T: Real>(
    spec: &CampaignSpec<'_>,
    truth: &GroundTruthChannels<T>,
    grids: &[usize],
) -> Result<Campaign<T>> {
    check_campaign(grids, spec.patterns)?;
    let n = truth.grids.first().map(|g| g.h_bar.len()).unwrap_or(0);
    let patterns = campaign_patterns(spec, n);
    let mut records = Vec::with_capacity(grids.len() * patterns.len());
    for &k in grids {
        for pat in &patterns {
            records.push(expected_measure(truth, k, pat)?);
        }
    }
    Ok(assemble(spec.alphabet, patterns, grids, records))
}

const MEASUREMENT_HEADER: [&str; 6] = ["grid", "pattern", "p_bar", "Q", "P", "sigma2"];
const PATTERN_HEADER: [&str; 3] = ["pattern", "element", "theta"];

impl<T: Real> Campaign<T> {
    pub fn grids(&self) -> Vec<usize> {
        self.profiles.keys().copied().collect()
    }

    /// Records of one grid in pattern order.
    pub fn grid_records(&self, k: usize) -> Vec<&MeasurementRecord<T>> {
        let mut r: Vec<_> = self.records.iter().filter(|r| r.grid == k).collect();
        r.sort_by_key(|r| r.pattern);
        r
    }

    /// Writes the measurement log and its pattern sidecar.
    pub fn save(&self, measurements: &Path, patterns: &Path) -> Result<()> {
        write_table(
            measurements,
            &MEASUREMENT_HEADER,
            self.records.iter().map(|r| {
                vec![
                    r.grid.to_string(),
                    r.pattern.to_string(),
                    r.p_bar.to_string(),
                    r.q.to_string(),
                    r.p.to_string(),
                    r.sigma2.to_string(),
                ]
            }),
        )?;
        write_table(
            patterns,
            &PATTERN_HEADER,
            self.patterns.iter().flat_map(|p| {
                p.theta
                    .iter()
                    .enumerate()
                    .map(move |(i, t)| vec![p.id.to_string(), i.to_string(), t.to_string()])
            }),
        )
    }

    /// Loads a measurement log produced by [`Self::save`] or by an external
    /// testbed. Phases are snapped to the nearest alphabet value.
    pub fn load(measurements: &Path, patterns: &Path, alphabet: PhaseAlphabet) -> Result<Self> {
        let pt = read_table(patterns, &PATTERN_HEADER)?;
        let mut idx: Vec<Vec<usize>> = Vec::new();
        for (line, row) in &pt.rows {
            let m: usize = pt.field(*line, row, 0, "pattern")?;
            let e: usize = pt.field(*line, row, 1, "element")?;
            let theta: T = pt.field(*line, row, 2, "theta")?;
            if m == idx.len() {
                idx.push(Vec::new());
            }
            if m + 1 != idx.len() || e != idx[m].len() {
                return Err(Error::parse(patterns, *line, "pattern rows must be ordered by pattern then element"));
            }
            let i = alphabet.nearest(theta);
            let snapped: T = alphabet.phase(i);
            let gap = (theta - snapped).abs();
            if gap > T::lit(1e-6) && (T::TAU() - gap).abs() > T::lit(1e-6) {
                return Err(Error::parse(patterns, *line, format!("phase {theta} is not in the {}-bit alphabet", alphabet.bits())));
            }
            idx[m].push(i);
        }
        let n = idx.first().map(Vec::len).unwrap_or(0);
        if idx.iter().any(|p| p.len() != n) {
            return Err(Error::parse(patterns, 0, "patterns have different lengths"));
        }
        let pats = idx
            .into_iter()
            .enumerate()
            .map(|(m, ix)| ReflectionPattern::from_indices(m, alphabet, ix))
            .collect::<Result<Vec<_>>>()?;

        let mt = read_table(measurements, &MEASUREMENT_HEADER)?;
        let mut records = Vec::with_capacity(mt.rows.len());
        let mut by_grid: BTreeMap<usize, Vec<Option<T>>> = BTreeMap::new();
        for (line, row) in &mt.rows {
            let r = MeasurementRecord {
                grid: mt.field(*line, row, 0, "grid")?,
                pattern: mt.field(*line, row, 1, "pattern")?,
                p_bar: mt.field(*line, row, 2, "p_bar")?,
                q: mt.field(*line, row, 3, "Q")?,
                p: mt.field(*line, row, 4, "P")?,
                sigma2: mt.field(*line, row, 5, "sigma2")?,
            };
            if r.pattern >= pats.len() {
                return Err(Error::parse(measurements, *line, format!("pattern {} not in sidecar", r.pattern)));
            }
            if !(r.p_bar >= T::zero()) {
                return Err(Error::parse(measurements, *line, "p_bar must be nonnegative"));
            }
            let slot = by_grid.entry(r.grid).or_insert_with(|| vec![None; pats.len()]);
            if slot[r.pattern].replace(r.p_bar).is_some() {
                return Err(Error::parse(measurements, *line, "duplicate (grid, pattern) record"));
            }
            records.push(r);
        }
        let mut profiles = BTreeMap::new();
        for (k, vals) in by_grid {
            let values = vals
                .into_iter()
                .collect::<Option<Vec<T>>>()
                .ok_or_else(|| Error::parse(measurements, 0, format!("grid {k} is missing patterns")))?;
            profiles.insert(k, PowerProfile { grid: k, values });
        }
        Ok(Campaign {
            alphabet,
            patterns: pats,
            profiles,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synth_scene, SynthParams};
    use std::f64::consts::PI;

    fn model(deterministic_only: bool) -> ChannelModel<f64> {
        let p = SynthParams {
            d1: 6.0,
            d2: 6.0,
            deterministic_only,
            ..Default::default()
        };
        ChannelModel::new(synth_scene(8, &p).unwrap()).unwrap()
    }

    #[test]
    fn alphabet_values() {
        let a = PhaseAlphabet::new(1).unwrap();
        assert_eq!(a.values::<f64>(), vec![PI, 2.0 * PI]);
        let a = PhaseAlphabet::new(2).unwrap();
        let v = a.values::<f64>();
        let want = [PI / 2.0, PI, 1.5 * PI, 2.0 * PI];
        assert!(v.iter().zip(want).all(|(x, y)| (x - y).abs() < 1e-15));
        assert!(v.iter().all(|&x| x > 0.0 && x <= 2.0 * PI));
        assert_eq!(PhaseAlphabet::new(3).unwrap().size(), 8);
        assert!(PhaseAlphabet::new(0).is_err());
    }

    #[test]
    fn nearest_phase_wraps() {
        let a = PhaseAlphabet::new(2).unwrap();
        assert_eq!(a.nearest(0.0f64), 3);
        assert_eq!(a.nearest(0.1f64), 3);
        assert_eq!(a.nearest(-PI / 2.0), 2);
        assert_eq!(a.nearest(PI / 2.0 + 0.2), 0);
        assert_eq!(a.nearest(3.0 * PI), 1);
        for i in 0..4 {
            assert_eq!(a.nearest(a.phase::<f64>(i)), i);
        }
    }

    #[test]
    fn one_bit_patterns_are_real_signs() {
        let a = PhaseAlphabet::new(1).unwrap();
        let mut rng = derive_rng(1, "p", &[]);
        let p: ReflectionPattern<f64> = random_pattern(&mut rng, a, 32, 0);
        for z in &p.v {
            assert!(z.im.abs() < 1e-12 && (z.re.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn phases_are_uniform() {
        let a = PhaseAlphabet::new(2).unwrap();
        let mut rng = derive_rng(2, "p", &[]);
        let mut counts = [0usize; 4];
        let draws = 100_000;
        for m in 0..draws / 10 {
            let p: ReflectionPattern<f64> = random_pattern(&mut rng, a, 10, m);
            for i in p.indices {
                counts[i] += 1;
            }
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn deterministic_noise_free_measurement_is_exact() {
        let m = model(true);
        let a = PhaseAlphabet::new(2).unwrap();
        let mut rng = derive_rng(3, "p", &[]);
        let pat = random_pattern(&mut rng, a, m.elements(), 0);
        let p = 5.0;
        let want = p * inner(&pat.v, &m.h_prime[2]).norm_sqr();
        let truth = m.ground_truth(p, 0.0);
        let e = expected_measure(&truth, 2, &pat).unwrap().p_bar;
        for q in [1, 7, 60] {
            let r = measure_power(&mut rng, &m, 2, &pat, q, p, 0.0).unwrap();
            assert!((r.p_bar - want).abs() <= 1e-12 * want);
            assert!((r.p_bar - e).abs() <= 1e-12 * want);
        }
    }

    #[test]
    fn noise_only_measurement_concentrates() {
        let m = model(false);
        let a = PhaseAlphabet::new(1).unwrap();
        let mut rng = derive_rng(4, "p", &[]);
        let pat = random_pattern(&mut rng, a, m.elements(), 0);
        let sigma2 = 2e-12;
        let reps = 2000;
        let mut mean = 0.0;
        for _ in 0..reps {
            let r = measure_power(&mut rng, &m, 0, &pat, 60, 0.0, sigma2).unwrap();
            // Gamma(60, σ²/60): 8 standard deviations is far in the tail.
            assert!((r.p_bar - sigma2).abs() < 8.0 * sigma2 / 60f64.sqrt());
            mean += r.p_bar / reps as f64;
        }
        assert!((mean / sigma2 - 1.0).abs() < 0.02);
    }

    #[test]
    fn measurement_mean_matches_expected_power() {
        let m = model(false);
        let a = PhaseAlphabet::new(2).unwrap();
        let mut rng = derive_rng(5, "p", &[]);
        let pat = random_pattern(&mut rng, a, m.elements(), 0);
        let (p, sigma2) = (10.0, 1e-12);
        let truth = m.ground_truth(p, sigma2);
        let want = truth.expected_power(3, &pat.v).unwrap();
        let reps = 10_000;
        let mean: f64 = (0..reps)
            .map(|_| measure_power(&mut rng, &m, 3, &pat, 60, p, sigma2).unwrap().p_bar)
            .sum::<f64>()
            / reps as f64;
        assert!((mean / want - 1.0).abs() < 0.01, "{mean} vs {want}");
    }

    #[test]
    fn campaign_shapes_and_reproducibility() {
        let m = model(false);
        let spec = CampaignSpec {
            master_seed: 9,
            stage: "initial",
            alphabet: PhaseAlphabet::new(2).unwrap(),
            patterns: 10,
        };
        let grids: Vec<usize> = (0..4).collect();
        let c = campaign(&spec, &m, &grids, 20, 1, 10.0, 1e-12).unwrap();
        assert_eq!(c.records.len(), 40);
        assert_eq!(c.patterns.len(), 10);
        assert!(c.profiles.values().all(|p| p.values.len() == 10));
        let again = campaign(&spec, &m, &grids, 20, 1, 10.0, 1e-12).unwrap();
        assert_eq!(c, again);
        let one = campaign(&CampaignSpec { patterns: 1, ..spec }, &m, &[2], 20, 1, 10.0, 1e-12).unwrap();
        assert_eq!(one.records.len(), 1);
        assert!(campaign(&spec, &m, &[], 20, 1, 10.0, 1e-12).is_err());
    }

    #[test]
    fn log_round_trip_is_bit_exact() {
        let m = model(false);
        let spec = CampaignSpec {
            master_seed: 10,
            stage: "estimate",
            alphabet: PhaseAlphabet::new(3).unwrap(),
            patterns: 6,
        };
        let c = campaign(&spec, &m, &[1, 3], 5, 1, 10.0, 1e-12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("m.csv"), dir.path().join("p.csv"));
        c.save(&a, &b).unwrap();
        let back = Campaign::<f64>::load(&a, &b, spec.alphabet).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn variance_falls_as_one_over_q() {
        let mut scene = model(false).scene;
        scene.fading.eps_bi = 0.1;
        scene.fading.eps_iu.iter_mut().for_each(|e| *e = 0.1);
        let m = ChannelModel::new(scene).unwrap();
        let a = PhaseAlphabet::new(2).unwrap();
        let mut rng = derive_rng(6, "p", &[]);
        let pat = random_pattern(&mut rng, a, m.elements(), 0);
        let qs = [4usize, 16, 64, 256];
        let reps = 3000;
        let mut pts = Vec::new();
        for &q in &qs {
            let xs: Vec<f64> = (0..reps)
                .map(|_| measure_power(&mut rng, &m, 0, &pat, q, 10.0, 1e-15).unwrap().p_bar)
                .collect();
            let mean = xs.iter().sum::<f64>() / reps as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
            pts.push(((q as f64).ln(), var.ln()));
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.0).abs() < 0.15, "slope {slope}");
    }
}
