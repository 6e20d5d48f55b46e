//! Metrics, the Monte-Carlo expected-power oracle and the end-to-end
//! experiment pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, StageExt};
use crate::geostat::{self, SelectionParams, SelectionResult};
use crate::measurement::{self, Campaign, CampaignSpec, PhaseAlphabet, ReflectionPattern};
use crate::nnest::{self, ChannelEstimate, TrainConfig};
use crate::num::{cn, dbm_to_watts, inner, norm_sqr, quantile, Cplx, Real};
use crate::optimize::{self, Method, ObjectiveModel, OptimizationResult, RelaxConfig};
use crate::propagation::{ChannelModel, GroundTruthChannels};
use crate::scene::{synth_scene, SceneConfig, SynthParams};
use crate::seed::{derive_rng, derive_seed};
use crate::textio::write_table;

/// `(1/K)·Σ ‖Ĝₖ − Gₖ‖²_F / ‖Gₖ‖²_F` with rank-1 `Ĝ = ŵŵᴴ`, `G = h̄h̄ᴴ`.
///
/// Grids whose true channel is zero are skipped with a warning; `None` when
/// no grid remains.
pub fn nmse<T: Real>(estimates: &BTreeMap<usize, ChannelEstimate<T>>, truth: &GroundTruthChannels<T>) -> Result<Option<T>> {
    let per = nmse_per_grid(estimates, truth)?;
    if per.is_empty() {
        return Ok(None);
    }
    Ok(Some(per.values().copied().sum::<T>() / T::lit(per.len() as f64)))
}

pub fn nmse_per_grid<T: Real>(
    estimates: &BTreeMap<usize, ChannelEstimate<T>>,
    truth: &GroundTruthChannels<T>,
) -> Result<BTreeMap<usize, T>> {
    let mut out = BTreeMap::new();
    for (&k, e) in estimates {
        let g = truth
            .grids
            .get(k)
            .ok_or_else(|| Error::Domain(format!("estimate for unknown grid {k}")))?;
        if let Some(x) = covariance_nmse(&e.w, &g.h_bar)? {
            out.insert(k, x);
        } else {
            log::warn!("grid {k} has a zero true channel; excluded from NMSE");
        }
    }
    Ok(out)
}

/// `‖ŵŵᴴ − hhᴴ‖²_F / ‖hhᴴ‖²_F = (‖ŵ‖⁴ + ‖h‖⁴ − 2|ŵᴴh|²) / ‖h‖⁴`.
pub fn covariance_nmse<T: Real>(w: &[Cplx<T>], h: &[Cplx<T>]) -> Result<Option<T>> {
    if w.len() != h.len() {
        return Err(Error::Domain("estimate and truth lengths differ".into()));
    }
    let hh = norm_sqr(h);
    if !(hh > T::zero()) {
        return Ok(None);
    }
    let ww = norm_sqr(w);
    let c = inner(w, h).norm_sqr();
    Ok(Some(((ww * ww + hh * hh - T::lit(2.0) * c) / (hh * hh)).max(T::zero())))
}

/// `10·log₁₀(Σₖ (|vᴴh̄ₖ|² + Cₖ − σ²) / (K σ²))` over every grid; `−∞` when
/// the sum is not positive.
pub fn avg_snr<T: Real>(v: &[Cplx<T>], truth: &GroundTruthChannels<T>) -> Result<T> {
    let mut s = T::zero();
    for k in 0..truth.grid_count() {
        s += truth.expected_power(k, v)? - truth.sigma2;
    }
    let denom = T::lit(truth.grid_count() as f64) * truth.sigma2;
    if !(s > T::zero()) || !(denom > T::zero()) {
        return Ok(T::neg_infinity());
    }
    Ok(T::lit(10.0) * (s / denom).log10())
}

/// Empirical mean and standard error of `|√P·vᴴhₖ + n|²`; the standard
/// error is absent for a single sample.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_expected_power<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    model: &ChannelModel<T>,
    k: usize,
    v: &[Cplx<T>],
    p: T,
    sigma2: T,
    samples: usize,
) -> Result<(T, Option<T>)> {
    let (s, s2) = mc_sums(rng, model, k, v, p, sigma2, samples)?;
    Ok(mc_stats(s, s2, samples))
}

fn mc_sums<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    model: &ChannelModel<T>,
    k: usize,
    v: &[Cplx<T>],
    p: T,
    sigma2: T,
    samples: usize,
) -> Result<(f64, f64)> {
    if samples == 0 {
        return Err(Error::Domain("Monte-Carlo estimate needs at least one sample".into()));
    }
    if k >= model.grid_count() || v.len() != model.elements() {
        return Err(Error::Domain("grid or reflection length out of range".into()));
    }
    let amp = p.sqrt();
    let mut h = vec![Cplx::new(T::zero(), T::zero()); model.elements()];
    let (mut s, mut s2) = (0.0f64, 0.0f64);
    for _ in 0..samples {
        model.instantaneous_into(rng, k, &mut h);
        let mut y = inner(v, &h) * amp;
        if sigma2 > T::zero() {
            y += cn(rng, sigma2);
        }
        let x = y.norm_sqr().to_f64_lossy();
        s += x;
        s2 += x * x;
    }
    Ok((s, s2))
}

fn mc_stats<T: Real>(s: f64, s2: f64, n: usize) -> (T, Option<T>) {
    let nf = n as f64;
    let mean = s / nf;
    if n < 2 {
        return (T::lit(mean), None);
    }
    let var = ((s2 - nf * mean * mean) / (nf - 1.0)).max(0.0);
    (T::lit(mean), Some(T::lit((var / nf).sqrt())))
}

/// Chunked parallel variant of [`monte_carlo_expected_power`]; chunk `c`
/// draws from `(master, stage, k, c)`, so the result does not depend on the
/// thread count.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_parallel<T: Real>(
    master: u64,
    stage: &str,
    model: &ChannelModel<T>,
    k: usize,
    v: &[Cplx<T>],
    p: T,
    sigma2: T,
    samples: usize,
    chunk: usize,
) -> Result<(T, Option<T>)> {
    let chunk = chunk.max(1);
    let chunks = samples.div_ceil(chunk);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = chunk.min(samples - c * chunk);
            let mut rng = derive_rng(master, stage, &[k as u64, c as u64]);
            mc_sums(&mut rng, model, k, v, p, sigma2, n)
        })
        .collect::<Result<Vec<_>>>()?;
    let (s, s2) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(mc_stats(s, s2, samples))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    /// Scene TOML to load instead of synthesizing one per repetition.
    pub file: Option<PathBuf>,
    pub synth: SynthParams<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSection {
    pub m1: usize,
    pub m2: usize,
    pub q: usize,
    /// Symbols per random-channel draw.
    pub coherence: usize,
    pub p_dbm: f64,
    pub sigma2_dbm: f64,
    pub alpha: u32,
}

impl Default for CampaignSection {
    fn default() -> Self {
        CampaignSection {
            m1: 10,
            m2: 600,
            q: 60,
            coherence: 1,
            p_dbm: 40.0,
            sigma2_dbm: -90.0,
            alpha: 2,
        }
    }
}

impl CampaignSection {
    pub fn p(&self) -> f64 {
        dbm_to_watts(self.p_dbm)
    }

    pub fn sigma2(&self) -> f64 {
        dbm_to_watts(self.sigma2_dbm)
    }

    pub fn alphabet(&self) -> Result<PhaseAlphabet> {
        PhaseAlphabet::new(self.alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Variogram-driven typical grids.
    Proposed,
    /// Every grid.
    All,
    /// `k2` grids uniformly at random.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub mode: SelectionMode,
    pub k1: usize,
    /// Grid count for random mode.
    pub k2: Option<usize>,
    pub bin_width: Option<f64>,
    pub rho_scale: f64,
    pub fallback_side: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let p = SelectionParams::<f64>::default();
        SelectionSection {
            mode: SelectionMode::Proposed,
            k1: 10,
            k2: None,
            bin_width: p.bin_width,
            rho_scale: p.rho_scale,
            fallback_side: p.fallback_side,
        }
    }
}

impl SelectionSection {
    pub fn params(&self) -> SelectionParams<f64> {
        SelectionParams {
            bin_width: self.bin_width,
            rho_scale: self.rho_scale,
            fallback_side: self.fallback_side,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepOrder {
    Ascending,
    Shuffled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    pub relax: RelaxConfig<f64>,
    pub sweep: SweepOrder,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        OptimizeSection {
            relax: RelaxConfig::default(),
            sweep: SweepOrder::Ascending,
        }
    }
}

/// One experiment: scene source, campaigns, selection, training and
/// optimization settings plus the seeds to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed of the first repetition; repetition `r` uses `seed + r`.
    pub seed: u64,
    pub repetitions: usize,
    pub scene: SceneSection,
    pub campaign: CampaignSection,
    pub selection: SelectionSection,
    pub training: TrainConfig<f64>,
    pub optimize: OptimizeSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            repetitions: 1,
            scene: SceneSection::default(),
            campaign: CampaignSection::default(),
            selection: SelectionSection::default(),
            training: TrainConfig::default(),
            optimize: OptimizeSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 5 × 5 grids, 4 × 4 IRS.
    Desk,
    /// 10 × 10 grids, 8 × 8 IRS.
    Full,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => ExperimentConfig::default(),
            Preset::Full => ExperimentConfig {
                scene: SceneSection {
                    file: None,
                    synth: SynthParams::full(),
                },
                selection: SelectionSection {
                    k1: 20,
                    ..SelectionSection::default()
                },
                ..ExperimentConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.campaign;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if c.m1 == 0 {
            return bad("campaign.m1 must be at least 1");
        }
        if c.m2 < 2 {
            return bad("campaign.m2 must be at least 2");
        }
        if c.q == 0 {
            return bad("campaign.q must be at least 1");
        }
        if c.coherence == 0 {
            return bad("campaign.coherence must be at least 1");
        }
        if !c.p_dbm.is_finite() || !c.sigma2_dbm.is_finite() {
            return bad("campaign.p_dbm and campaign.sigma2_dbm must be finite");
        }
        if !(c.sigma2() > 0.0) {
            return bad("campaign.sigma2_dbm must give a positive noise power");
        }
        c.alphabet().map_err(|e| Error::Config(format!("campaign.alpha: {e}")))?;
        let s = &self.selection;
        if s.mode == SelectionMode::Proposed && s.k1 < 2 {
            return bad("selection.k1 must be at least 2");
        }
        if s.mode == SelectionMode::Random && s.k2.is_none_or(|k| k == 0) {
            return bad("selection.k2 must be set and positive in random mode");
        }
        if !(s.rho_scale > 0.0) {
            return bad("selection.rho_scale must be positive");
        }
        if !(s.fallback_side > 0.0) {
            return bad("selection.fallback_side must be positive");
        }
        if s.bin_width.is_some_and(|w| !(w > 0.0)) {
            return bad("selection.bin_width must be positive");
        }
        self.training
            .validate()
            .map_err(|e| Error::Config(format!("training: {e}")))?;
        self.training
            .train_count(c.m2)
            .map_err(|e| Error::Config(format!("training.train_fraction with campaign.m2: {e}")))?;
        if self.optimize.relax.samples == 0 {
            return bad("optimize.relax.samples must be at least 1");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML form.
    pub fn digest(&self) -> Result<String> {
        let d = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(d.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

/// Scene, channel model and truth of one repetition.
pub struct Prepared {
    pub seed: u64,
    pub model: ChannelModel<f64>,
    pub truth: GroundTruthChannels<f64>,
}

/// Loads or synthesizes the scene for `seed`.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let scene = match &cfg.scene.file {
        Some(path) => SceneConfig::load(path)?,
        None => synth_scene(derive_seed(seed, "scene", &[]), &cfg.scene.synth)?,
    };
    let model = ChannelModel::new(scene)?;
    let truth = model.ground_truth(cfg.campaign.p(), cfg.campaign.sigma2());
    Ok(Prepared { seed, model, truth })
}

/// `K₁` grids drawn uniformly without replacement.
pub fn sample_grids(seed: u64, stage: &str, total: usize, count: usize) -> Result<Vec<usize>> {
    if count > total {
        return Err(Error::Config(format!("cannot draw {count} of {total} grids")));
    }
    let mut rng = derive_rng(seed, stage, &[]);
    let mut g: Vec<usize> = rand::seq::index::sample(&mut rng, total, count).into_vec();
    g.sort_unstable();
    Ok(g)
}

/// Output of the selection stage.
pub struct SelectionOutcome {
    pub k1: Vec<usize>,
    pub initial: Option<Campaign<f64>>,
    pub result: Option<SelectionResult<f64>>,
    pub k2: Vec<usize>,
}

pub fn initial_campaign(cfg: &ExperimentConfig, seed: u64, model: &ChannelModel<f64>, k1: &[usize]) -> Result<Campaign<f64>> {
    let c = &cfg.campaign;
    let spec = CampaignSpec {
        master_seed: seed,
        stage: "initial",
        alphabet: c.alphabet()?,
        patterns: c.m1,
    };
    measurement::campaign(&spec, model, k1, c.q, c.coherence, c.p(), c.sigma2())
}

/// Typical-grid selection from an initial campaign.
pub fn select_from(cfg: &ExperimentConfig, seed: u64, scene: &SceneConfig<f64>, initial: &Campaign<f64>) -> Result<SelectionResult<f64>> {
    let grids = scene.grids()?;
    let r = &scene.region;
    let mut rng = derive_rng(seed, "select", &[]);
    geostat::select(&mut rng, &initial.profiles, &grids, r.d1, r.d2, r.d0, &cfg.selection.params())
}

pub fn selection_stage(cfg: &ExperimentConfig, seed: u64, model: &ChannelModel<f64>, mode: SelectionMode) -> Result<SelectionOutcome> {
    let k = model.grid_count();
    match mode {
        SelectionMode::All => Ok(SelectionOutcome {
            k1: Vec::new(),
            initial: None,
            result: None,
            k2: (0..k).collect(),
        }),
        SelectionMode::Random => {
            let n = cfg.selection.k2.ok_or_else(|| Error::Config("selection.k2 is required in random mode".into()))?;
            Ok(SelectionOutcome {
                k1: Vec::new(),
                initial: None,
                result: None,
                k2: sample_grids(seed, "random-k2", k, n)?,
            })
        }
        SelectionMode::Proposed => {
            let k1 = sample_grids(seed, "k1", k, cfg.selection.k1)?;
            let initial = initial_campaign(cfg, seed, model, &k1)?;
            let result = select_from(cfg, seed, &model.scene, &initial)?;
            Ok(SelectionOutcome {
                k1,
                k2: result.selected.clone(),
                initial: Some(initial),
                result: Some(result),
            })
        }
    }
}

pub fn estimation_campaign(cfg: &ExperimentConfig, seed: u64, model: &ChannelModel<f64>, k2: &[usize]) -> Result<Campaign<f64>> {
    let c = &cfg.campaign;
    let spec = CampaignSpec {
        master_seed: seed,
        stage: "estimate",
        alphabet: c.alphabet()?,
        patterns: c.m2,
    };
    measurement::campaign(&spec, model, k2, c.q, c.coherence, c.p(), c.sigma2())
}

pub fn training_stage(cfg: &ExperimentConfig, seed: u64, campaign: &Campaign<f64>) -> Result<BTreeMap<usize, ChannelEstimate<f64>>> {
    nnest::train_campaign(campaign, &cfg.training, seed, "train")
}

fn sweep_order(cfg: &ExperimentConfig, seed: u64, n: usize, tag: &str) -> Option<Vec<usize>> {
    match cfg.optimize.sweep {
        SweepOrder::Ascending => None,
        SweepOrder::Shuffled => {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut derive_rng(seed, "sweep", &[tag.len() as u64]));
            Some(o)
        }
    }
}

/// Proposed methods and measurement baselines. Returns NN-SR, NN-GAR, CSM
/// and RMS. Only measurements and estimates are consumed.
pub fn optimization_stage(
    cfg: &ExperimentConfig,
    seed: u64,
    campaign: &Campaign<f64>,
    estimates: &BTreeMap<usize, ChannelEstimate<f64>>,
) -> Result<Vec<OptimizationResult<f64>>> {
    let alphabet = campaign.alphabet;
    let factors: Vec<Vec<Cplx<f64>>> = estimates.values().map(|e| e.w.clone()).collect();
    let model = ObjectiveModel::new(alphabet, factors)?;
    let n = model.elements();
    let rms = optimize::rms(campaign)?;
    let order = sweep_order(cfg, seed, n, "nn-sr");
    let mut sr = optimize::successive_refinement(&model, &rms.pattern, order.as_deref())?;
    sr.method = Method::NnSr;
    let gar = optimize::relax_init(&mut derive_rng(seed, "relax", &[]), &model, &cfg.optimize.relax)?;
    let csm = optimize::csm(campaign)?;
    Ok(vec![sr, gar, csm, rms])
}

/// Perfect-CSI optimization over all grids: successive refinement on the
/// true covariances from the relaxed point and from each supplied pattern,
/// keeping the best.
pub fn upper_bound(
    cfg: &ExperimentConfig,
    seed: u64,
    truth: &GroundTruthChannels<f64>,
    alphabet: PhaseAlphabet,
    starts: &[ReflectionPattern<f64>],
) -> Result<OptimizationResult<f64>> {
    let factors: Vec<Vec<Cplx<f64>>> = truth.grids.iter().map(|g| g.h_bar.clone()).collect();
    let model = ObjectiveModel::new(alphabet, factors)?;
    let relaxed = optimize::relax_init(&mut derive_rng(seed, "relax-truth", &[]), &model, &cfg.optimize.relax)?;
    let mut best: Option<OptimizationResult<f64>> = None;
    for start in std::iter::once(&relaxed.pattern).chain(starts) {
        let r = optimize::successive_refinement(&model, start, None)?;
        if best.as_ref().is_none_or(|b| r.objective > b.objective) {
            best = Some(r);
        }
    }
    let mut best = best.expect("at least the relaxed start");
    best.method = Method::UpperBound;
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub snr_db: f64,
    /// `(1/K)·Σₖ v*ᴴGₖv*` on the true covariances of all grids.
    pub true_objective: f64,
    pub indices: Vec<usize>,
    /// Expected received power per grid under `v*`.
    pub grid_powers: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub digest: String,
    pub k1: Vec<usize>,
    pub k2: Vec<usize>,
    pub nmse: Option<f64>,
    pub methods: Vec<MethodMetrics>,
}

impl MetricsRecord {
    pub fn snr(&self, m: Method) -> Option<f64> {
        self.methods.iter().find(|x| x.method == m).map(|x| x.snr_db)
    }
}

pub fn method_metrics(truth: &GroundTruthChannels<f64>, r: &OptimizationResult<f64>) -> Result<MethodMetrics> {
    let v = &r.pattern.v;
    let grid_powers = (0..truth.grid_count())
        .map(|k| truth.expected_power(k, v))
        .collect::<Result<Vec<_>>>()?;
    let true_objective = truth
        .grids
        .iter()
        .map(|g| inner(v, &g.h_bar).norm_sqr())
        .sum::<f64>()
        / truth.grid_count() as f64;
    Ok(MethodMetrics {
        method: r.method,
        snr_db: avg_snr(v, truth)?,
        true_objective,
        indices: r.pattern.indices.clone(),
        grid_powers,
    })
}

/// Everything one repetition produced.
pub struct RunOutput {
    pub record: MetricsRecord,
    pub selection: SelectionOutcome,
    pub campaign: Campaign<f64>,
    pub estimates: BTreeMap<usize, ChannelEstimate<f64>>,
    pub results: Vec<OptimizationResult<f64>>,
    pub truth: GroundTruthChannels<f64>,
}

/// Runs one repetition with a given selection outcome.
pub fn run_with_selection(cfg: &ExperimentConfig, prepared: &Prepared, selection: SelectionOutcome) -> Result<RunOutput> {
    let seed = prepared.seed;
    let campaign = estimation_campaign(cfg, seed, &prepared.model, &selection.k2).stage("estimation campaign")?;
    let estimates = training_stage(cfg, seed, &campaign).stage("training")?;
    let mut results = optimization_stage(cfg, seed, &campaign, &estimates).stage("optimization")?;
    let starts: Vec<ReflectionPattern<f64>> = results.iter().map(|r| r.pattern.clone()).collect();
    let ub = upper_bound(cfg, seed, &prepared.truth, campaign.alphabet, &starts).stage("upper bound")?;
    results.push(ub);
    let methods = results
        .iter()
        .map(|r| method_metrics(&prepared.truth, r))
        .collect::<Result<Vec<_>>>()
        .stage("evaluation")?;
    let nmse = nmse(&estimates, &prepared.truth).stage("evaluation")?;
    Ok(RunOutput {
        record: MetricsRecord {
            seed,
            digest: cfg.digest()?,
            k1: selection.k1.clone(),
            k2: selection.k2.clone(),
            nmse,
            methods,
        },
        selection,
        campaign,
        estimates,
        results,
        truth: prepared.truth.clone(),
    })
}

/// One full repetition in stage order.
pub fn run_repetition(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let prepared = prepare(cfg, seed).stage("scene")?;
    let selection = selection_stage(cfg, seed, &prepared.model, cfg.selection.mode).stage("selection")?;
    run_with_selection(cfg, &prepared, selection)
}

/// Every repetition of `cfg`, in seed order.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    cfg.seeds()
        .par_iter()
        .map(|&s| run_repetition(cfg, s).map(|o| o.record))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub count: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        Spread {
            count: values.len(),
            median: quantile(values, 0.5),
            q25: quantile(values, 0.25),
            q75: quantile(values, 0.75),
            min: quantile(values, 0.0),
            max: quantile(values, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub digest: String,
    pub seeds: Vec<u64>,
    pub snr_db: BTreeMap<String, Spread>,
    pub nmse: Option<Spread>,
    pub k2: Spread,
}

pub fn summarize(digest: &str, records: &[MetricsRecord]) -> Summary {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        for m in &r.methods {
            by.entry(m.method.to_string()).or_default().push(m.snr_db);
        }
    }
    let nm: Vec<f64> = records.iter().filter_map(|r| r.nmse).collect();
    let k2: Vec<f64> = records.iter().map(|r| r.k2.len() as f64).collect();
    Summary {
        digest: digest.to_string(),
        seeds: records.iter().map(|r| r.seed).collect(),
        snr_db: by.into_iter().map(|(k, v)| (k, Spread::of(&v))).collect(),
        nmse: if nm.is_empty() { None } else { Some(Spread::of(&nm)) },
        k2: Spread::of(&k2),
    }
}

/// Files written by [`write_outputs`].
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub powers: PathBuf,
    pub summary: PathBuf,
}

const METRICS_HEADER: [&str; 9] = ["seed", "digest", "method", "snr_db", "true_objective", "nmse", "k1", "k2", "indices"];
const POWERS_HEADER: [&str; 4] = ["seed", "method", "grid", "expected_power"];

fn join<I: IntoIterator<Item = usize>>(xs: I) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes `metrics_<digest>.csv`, `powers_<digest>.csv` and
/// `summary_<digest>.json` into `dir`.
pub fn write_outputs(dir: &Path, digest: &str, records: &[MetricsRecord]) -> Result<OutputPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = OutputPaths {
        metrics: dir.join(format!("metrics_{digest}.csv")),
        powers: dir.join(format!("powers_{digest}.csv")),
        summary: dir.join(format!("summary_{digest}.json")),
    };
    let mut rows = Vec::new();
    let mut power_rows = Vec::new();
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.seed);
    for r in &sorted {
        for m in &r.methods {
            rows.push(vec![
                r.seed.to_string(),
                r.digest.clone(),
                m.method.to_string(),
                m.snr_db.to_string(),
                m.true_objective.to_string(),
                r.nmse.map(|x| x.to_string()).unwrap_or_default(),
                join(r.k1.iter().copied()),
                join(r.k2.iter().copied()),
                join(m.indices.iter().copied()),
            ]);
            for (k, p) in m.grid_powers.iter().enumerate() {
                power_rows.push(vec![r.seed.to_string(), m.method.to_string(), k.to_string(), p.to_string()]);
            }
        }
    }
    write_table(&paths.metrics, &METRICS_HEADER, rows)?;
    write_table(&paths.powers, &POWERS_HEADER, power_rows)?;
    let owned: Vec<MetricsRecord> = sorted.into_iter().cloned().collect();
    let summary = summarize(digest, &owned);
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&paths.summary, json + "\n").map_err(|e| Error::io(&paths.summary, e))?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::CMatrix;
    use crate::measurement::random_pattern;
    use crate::propagation::GridTruth;

    fn small_model(seed: u64, deterministic_only: bool) -> ChannelModel<f64> {
        let p = SynthParams {
            d1: 6.0,
            d2: 6.0,
            deterministic_only,
            ..SynthParams::default()
        };
        ChannelModel::new(synth_scene(seed, &p).unwrap()).unwrap()
    }

    fn estimate(grid: usize, w: Vec<Cplx<f64>>) -> ChannelEstimate<f64> {
        ChannelEstimate {
            grid,
            w,
            w0: 0.0,
            best_epoch: 1,
            trace: Vec::new(),
        }
    }

    #[test]
    fn nmse_examples() {
        let truth = small_model(1, false).ground_truth(10.0, 1e-12);
        let exact: BTreeMap<_, _> = (0..4).map(|k| (k, estimate(k, truth.grids[k].h_bar.clone()))).collect();
        assert!(nmse(&exact, &truth).unwrap().unwrap() < 1e-12);
        let zero: BTreeMap<_, _> = (0..4)
            .map(|k| (k, estimate(k, vec![Cplx::new(0.0, 0.0); truth.grids[k].h_bar.len()])))
            .collect();
        assert!((nmse(&zero, &truth).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let rot: BTreeMap<_, _> = (0..4)
            .map(|k| {
                let w = truth.grids[k].h_bar.iter().map(|z| z * Cplx::from_polar(1.0, 0.7)).collect();
                (k, estimate(k, w))
            })
            .collect();
        assert!(nmse(&rot, &truth).unwrap().unwrap() < 1e-12);
    }

    #[test]
    fn closed_form_nmse_matches_dense() {
        let mut rng = derive_rng(2, "eval", &[]);
        for _ in 0..20 {
            let w: Vec<Cplx<f64>> = (0..5).map(|_| cn(&mut rng, 1.0)).collect();
            let h: Vec<Cplx<f64>> = (0..5).map(|_| cn(&mut rng, 1.0)).collect();
            let g = CMatrix::outer(&h);
            let dense = CMatrix::outer(&w).sub(&g).frobenius_sqr() / g.frobenius_sqr();
            let fast = covariance_nmse(&w, &h).unwrap().unwrap();
            assert!((dense - fast).abs() < 1e-10 * dense.max(1.0));
        }
        assert!(covariance_nmse(&[Cplx::new(1.0, 0.0)], &[Cplx::new(0.0, 0.0)]).unwrap().is_none());
    }

    #[test]
    fn snr_examples() {
        let sigma2 = 1e-12f64;
        let h = vec![Cplx::new(2e-6, 1e-6), Cplx::new(-1e-6, 0.5e-6)];
        let truth = GroundTruthChannels {
            grids: vec![GridTruth {
                h_prime: h.clone(),
                h_bar: h.clone(),
                coeffs: crate::propagation::PowerCoeffs::deterministic(),
                c: sigma2,
            }],
            p: 1.0,
            sigma2,
        };
        let v = vec![Cplx::new(1.0, 0.0), Cplx::new(-1.0, 0.0)];
        let want = 10.0 * (inner(&v, &h).norm_sqr() / sigma2).log10();
        assert!((avg_snr(&v, &truth).unwrap() - want).abs() < 1e-9);
        let zero = GroundTruthChannels {
            grids: vec![GridTruth {
                h_bar: vec![Cplx::new(0.0, 0.0); 2],
                ..truth.grids[0].clone()
            }],
            ..truth.clone()
        };
        assert_eq!(avg_snr(&v, &zero).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn exhaustive_snr_beats_random_patterns() {
        let model = small_model(3, false);
        let truth = model.ground_truth(10.0, 1e-12);
        let a = PhaseAlphabet::new(1).unwrap();
        let factors = truth.grids.iter().map(|g| g.h_bar.clone()).collect();
        let om = ObjectiveModel::new(a, factors).unwrap();
        let best = optimize::exhaustive_search(&om).unwrap();
        let s = avg_snr(&best.pattern.v, &truth).unwrap();
        let mut rng = derive_rng(3, "eval", &[]);
        for i in 0..30 {
            let p: ReflectionPattern<f64> = random_pattern(&mut rng, a, model.elements(), i);
            assert!(s >= avg_snr(&p.v, &truth).unwrap() - 1e-9);
        }
    }

    #[test]
    fn monte_carlo_degenerate_cases() {
        let model = small_model(4, true);
        let a = PhaseAlphabet::new(2).unwrap();
        let mut rng = derive_rng(4, "eval", &[]);
        let p: ReflectionPattern<f64> = random_pattern(&mut rng, a, model.elements(), 0);
        let (m, se) = monte_carlo_expected_power(&mut rng, &model, 1, &p.v, 10.0, 0.0, 100).unwrap();
        let want = 10.0 * inner(&p.v, &model.h_prime[1]).norm_sqr();
        assert!((m - want).abs() < 1e-12 * want);
        assert!(se.unwrap() < 1e-12 * want);
        let (_, se) = monte_carlo_expected_power(&mut rng, &model, 1, &p.v, 10.0, 0.0, 1).unwrap();
        assert!(se.is_none());
    }

    #[test]
    fn monte_carlo_agrees_with_formula() {
        let model = small_model(5, false);
        let truth = model.ground_truth(10.0, 1e-12);
        let a = PhaseAlphabet::new(2).unwrap();
        let mut rng = derive_rng(5, "eval", &[]);
        let p: ReflectionPattern<f64> = random_pattern(&mut rng, a, model.elements(), 0);
        let (m, se) = monte_carlo_parallel(5, "mc", &model, 2, &p.v, 10.0, 1e-12, 200_000, 50_000).unwrap();
        let want = truth.expected_power(2, &p.v).unwrap();
        assert!((m - want).abs() < 4.0 * se.unwrap(), "{m} {want} {se:?}");
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.campaign, CampaignSection::default());
        assert!(ExperimentConfig::from_toml("[campaign]\nalpha = 3\n").is_ok());
        let err = ExperimentConfig::from_toml("[campaign]\nq = -5\n").unwrap_err().to_string();
        assert!(err.contains("q"), "{err}");
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[campaign]\nq = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[selection]\nmode = \"random\"\n").is_err());
        let text = ExperimentConfig::preset(Preset::Full).to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::preset(Preset::Full));
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 2, ..a.clone() };
        assert_eq!(a.digest().unwrap(), a.clone().digest().unwrap());
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 16);
    }
}
