//! Deterministic multipath channels, random Rician components, cascaded
//! channels and the closed-form expected received power.
//!
//! Vector convention: [`deterministic_iu`] returns the column `h̄_IU`, and the
//! cascade is `h′[i] = conj(h̄_IU[i])·h̄_BI[i]`. A reflection vector `v` acts as
//! `vᴴh`.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::num::{cn, inner, norm_sqr, Cplx, Real};
use crate::scene::{steering_upa, PathSpec, SceneConfig};
use crate::textio::{read_table, write_table};

/// Unit-modulus tolerance for reflection vectors.
pub const UNIT_MODULUS_TOL: f64 = 1e-9;

/// Coefficients of the expected cascaded power.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerCoeffs<T> {
    pub a1: T,
    pub a2: T,
    pub a3: T,
    pub a4: T,
}

impl<T: Real> PowerCoeffs<T> {
    /// The `ε → ∞` limit: only the deterministic cascade survives.
    pub fn deterministic() -> Self {
        PowerCoeffs {
            a1: T::one(),
            a2: T::zero(),
            a3: T::zero(),
            a4: T::zero(),
        }
    }
}

/// Expected-power coefficients for one grid.
pub fn power_coeffs<T: Real>(eps_iu: T, eps_bi: T, beta_iu: T, beta_bi: T, n: usize) -> PowerCoeffs<T> {
    let den = (T::one() + eps_iu) * (T::one() + eps_bi);
    PowerCoeffs {
        a1: eps_iu * eps_bi / den,
        a2: eps_iu * beta_bi / den,
        a3: eps_bi * beta_iu / den,
        a4: T::lit(n as f64) * beta_bi * beta_iu / den,
    }
}

fn path_sum<T: Real>(paths: &[PathSpec<T>], beta: T, scene: &SceneConfig<T>) -> Result<Vec<Cplx<T>>> {
    let n = scene.elements();
    let amp = beta.sqrt();
    let mut h = vec![Cplx::new(T::zero(), T::zero()); n];
    for p in paths {
        let phase = -T::lit(2.0) * T::PI() * p.length / scene.irs.wavelength;
        let g = Cplx::from_polar(amp, phase);
        let u = steering_upa(p.azimuth, p.elevation, scene.irs.ny, scene.irs.nz)?;
        for (acc, ui) in h.iter_mut().zip(u) {
            *acc += g * ui;
        }
    }
    Ok(h)
}

/// Deterministic IRS→grid channel `h̄_IU,k`; zero for an empty path list.
pub fn deterministic_iu<T: Real>(scene: &SceneConfig<T>, k: usize) -> Result<Vec<Cplx<T>>> {
    let paths = scene
        .paths
        .iu
        .get(k)
        .ok_or_else(|| Error::Domain(format!("grid {k} does not exist")))?;
    path_sum(paths, scene.fading.beta_iu[k], scene)
}

/// Deterministic BS→IRS channel `h̄_BI`.
pub fn deterministic_bi<T: Real>(scene: &SceneConfig<T>) -> Result<Vec<Cplx<T>>> {
    path_sum(&scene.paths.bi, scene.fading.beta_bi, scene)
}

/// `diag(h_IUᴴ)·h_BI` for column vectors.
pub fn cascade<T: Real>(h_iu: &[Cplx<T>], h_bi: &[Cplx<T>]) -> Result<Vec<Cplx<T>>> {
    if h_iu.len() != h_bi.len() {
        return Err(Error::Domain(format!(
            "cascade: length mismatch {} vs {}",
            h_iu.len(),
            h_bi.len()
        )));
    }
    Ok(h_iu.iter().zip(h_bi).map(|(a, b)| a.conj() * b).collect())
}

/// I.i.d. `CN(0, β)` entries.
pub fn sample_random_channel<T: Real, R: Rng + ?Sized>(rng: &mut R, beta: T, n: usize) -> Vec<Cplx<T>> {
    if beta == T::zero() {
        return vec![Cplx::new(T::zero(), T::zero()); n];
    }
    (0..n).map(|_| cn(rng, beta)).collect()
}

/// Fails unless every entry of `v` has unit modulus.
pub fn check_unit_modulus<T: Real>(v: &[Cplx<T>]) -> Result<()> {
    let tol = T::lit(UNIT_MODULUS_TOL).max(T::epsilon() * T::lit(16.0));
    match v.iter().position(|z| (z.norm() - T::one()).abs() > tol) {
        Some(i) => Err(Error::Domain(format!("reflection entry {i} is not unit modulus"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
pub struct DeterministicChannels<T> {
    pub h_bar_bi: Vec<Cplx<T>>,
    pub h_bar_iu: Vec<Vec<Cplx<T>>>,
}

/// Scene plus everything derived from it that sampling needs.
#[derive(Clone, Debug)]
pub struct ChannelModel<T> {
    pub scene: SceneConfig<T>,
    pub det: DeterministicChannels<T>,
    /// `h′ₖ` per grid.
    pub h_prime: Vec<Vec<Cplx<T>>>,
    pub coeffs: Vec<PowerCoeffs<T>>,
    mix: Vec<Mix<T>>,
}

/// Deterministic/random mixing weights for one grid.
#[derive(Clone, Copy, Debug)]
struct Mix<T> {
    det_iu: T,
    rnd_iu: T,
    det_bi: T,
    rnd_bi: T,
}

fn rician_weights<T: Real>(eps: T) -> (T, T) {
    let d = T::one() + eps;
    ((eps / d).sqrt(), (T::one() / d).sqrt())
}

impl<T: Real> ChannelModel<T> {
    pub fn new(scene: SceneConfig<T>) -> Result<Self> {
        scene.validate()?;
        let k = scene.grid_count()?;
        let n = scene.elements();
        let h_bar_bi = deterministic_bi(&scene)?;
        let mut h_bar_iu = Vec::with_capacity(k);
        let mut h_prime = Vec::with_capacity(k);
        let mut coeffs = Vec::with_capacity(k);
        let mut mix = Vec::with_capacity(k);
        let f = &scene.fading;
        for g in 0..k {
            let iu = deterministic_iu(&scene, g)?;
            h_prime.push(cascade(&iu, &h_bar_bi)?);
            h_bar_iu.push(iu);
            if f.deterministic_only {
                coeffs.push(PowerCoeffs::deterministic());
                mix.push(Mix {
                    det_iu: T::one(),
                    rnd_iu: T::zero(),
                    det_bi: T::one(),
                    rnd_bi: T::zero(),
                });
            } else {
                coeffs.push(power_coeffs(f.eps_iu[g], f.eps_bi, f.beta_iu[g], f.beta_bi, n));
                let (di, ri) = rician_weights(f.eps_iu[g]);
                let (db, rb) = rician_weights(f.eps_bi);
                mix.push(Mix {
                    det_iu: di,
                    rnd_iu: ri,
                    det_bi: db,
                    rnd_bi: rb,
                });
            }
        }
        Ok(ChannelModel {
            scene,
            det: DeterministicChannels { h_bar_bi, h_bar_iu },
            h_prime,
            coeffs,
            mix,
        })
    }

    pub fn elements(&self) -> usize {
        self.scene.elements()
    }

    pub fn grid_count(&self) -> usize {
        self.h_prime.len()
    }

    fn check_grid(&self, k: usize) -> Result<()> {
        if k >= self.grid_count() {
            return Err(Error::Domain(format!("grid {k} does not exist")));
        }
        Ok(())
    }

    /// One realization of the cascaded channel `hₖ`.
    pub fn instantaneous_channel<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Result<Vec<Cplx<T>>> {
        self.check_grid(k)?;
        let mut out = vec![Cplx::new(T::zero(), T::zero()); self.elements()];
        self.instantaneous_into(rng, k, &mut out);
        Ok(out)
    }

    /// Same as [`Self::instantaneous_channel`] into a caller-owned buffer;
    /// `k` must be valid.
    pub(crate) fn instantaneous_into<R: Rng + ?Sized>(&self, rng: &mut R, k: usize, out: &mut [Cplx<T>]) {
        let m = self.mix[k];
        let iu = &self.det.h_bar_iu[k];
        let bi = &self.det.h_bar_bi;
        if m.rnd_iu == T::zero() && m.rnd_bi == T::zero() {
            out.copy_from_slice(&self.h_prime[k]);
            return;
        }
        let beta_iu = self.scene.fading.beta_iu[k];
        let beta_bi = self.scene.fading.beta_bi;
        for i in 0..out.len() {
            let x = cn(rng, beta_iu);
            let y = cn(rng, beta_bi);
            let h_iu = iu[i] * m.det_iu + x * m.rnd_iu;
            let h_bi = bi[i] * m.det_bi + y * m.rnd_bi;
            out[i] = h_iu.conj() * h_bi;
        }
    }

    /// Ground truth at transmit power `p` and noise power `sigma2`.
    pub fn ground_truth(&self, p: T, sigma2: T) -> GroundTruthChannels<T> {
        let bi_norm = norm_sqr(&self.det.h_bar_bi);
        let grids = (0..self.grid_count())
            .map(|k| {
                let a = self.coeffs[k];
                let scale = (p * a.a1).sqrt();
                let h_bar = self.h_prime[k].iter().map(|z| z * scale).collect();
                let c = p * a.a2 * norm_sqr(&self.det.h_bar_iu[k]) + p * a.a3 * bi_norm + p * a.a4 + sigma2;
                GridTruth {
                    h_prime: self.h_prime[k].clone(),
                    h_bar,
                    coeffs: a,
                    c,
                }
            })
            .collect();
        GroundTruthChannels { grids, p, sigma2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTruth<T> {
    pub h_prime: Vec<Cplx<T>>,
    /// `√(P a₁) h′`.
    pub h_bar: Vec<Cplx<T>>,
    pub coeffs: PowerCoeffs<T>,
    /// Reflection-independent power floor (includes the noise power).
    pub c: T,
}

impl<T: Real> GridTruth<T> {
    /// `G = h̄ h̄ᴴ`.
    pub fn covariance(&self) -> CMatrix<T> {
        CMatrix::outer(&self.h_bar)
    }
}

/// Per-grid deterministic truth. Only evaluation and test oracles read this.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthChannels<T> {
    pub grids: Vec<GridTruth<T>>,
    pub p: T,
    pub sigma2: T,
}

const CHANNEL_HEADER: [&str; 4] = ["grid", "element", "re", "im"];
const SCALAR_HEADER: [&str; 8] = ["grid", "a1", "a2", "a3", "a4", "c", "p", "sigma2"];

impl<T: Real> GroundTruthChannels<T> {
    pub fn grid_count(&self) -> usize {
        self.grids.len()
    }

    /// `E|y_k|² = |vᴴh̄ₖ|² + Cₖ`.
    pub fn expected_power(&self, k: usize, v: &[Cplx<T>]) -> Result<T> {
        let g = self
            .grids
            .get(k)
            .ok_or_else(|| Error::Domain(format!("grid {k} does not exist")))?;
        if v.len() != g.h_bar.len() {
            return Err(Error::Domain(format!(
                "reflection length {} does not match {} elements",
                v.len(),
                g.h_bar.len()
            )));
        }
        check_unit_modulus(v)?;
        Ok(inner(v, &g.h_bar).norm_sqr() + g.c)
    }

    /// Writes `h′ₖ` as `grid,element,re,im` and the scalars as
    /// `grid,a1,a2,a3,a4,c,p,sigma2`.
    pub fn export(&self, channels: &Path, scalars: &Path) -> Result<()> {
        write_table(
            channels,
            &CHANNEL_HEADER,
            self.grids.iter().enumerate().flat_map(|(k, g)| {
                g.h_prime
                    .iter()
                    .enumerate()
                    .map(move |(i, z)| vec![k.to_string(), i.to_string(), z.re.to_string(), z.im.to_string()])
            }),
        )?;
        write_table(
            scalars,
            &SCALAR_HEADER,
            self.grids.iter().enumerate().map(|(k, g)| {
                let a = g.coeffs;
                vec![
                    k.to_string(),
                    a.a1.to_string(),
                    a.a2.to_string(),
                    a.a3.to_string(),
                    a.a4.to_string(),
                    g.c.to_string(),
                    self.p.to_string(),
                    self.sigma2.to_string(),
                ]
            }),
        )
    }

    /// Inverse of [`Self::export`]; lets externally computed channels bypass
    /// scene synthesis.
    pub fn import(channels: &Path, scalars: &Path) -> Result<Self> {
        let st = read_table(scalars, &SCALAR_HEADER)?;
        let mut grids: Vec<GridTruth<T>> = Vec::new();
        let mut p = None;
        let mut sigma2 = None;
        for (line, row) in &st.rows {
            let k: usize = st.field(*line, row, 0, "grid")?;
            if k != grids.len() {
                return Err(Error::parse(scalars, *line, format!("grid {k} out of order")));
            }
            let pv: T = st.field(*line, row, 6, "p")?;
            let sv: T = st.field(*line, row, 7, "sigma2")?;
            if p.is_some_and(|q| q != pv) || sigma2.is_some_and(|q| q != sv) {
                return Err(Error::parse(scalars, *line, "p and sigma2 must be identical on every row"));
            }
            p = Some(pv);
            sigma2 = Some(sv);
            grids.push(GridTruth {
                h_prime: Vec::new(),
                h_bar: Vec::new(),
                coeffs: PowerCoeffs {
                    a1: st.field(*line, row, 1, "a1")?,
                    a2: st.field(*line, row, 2, "a2")?,
                    a3: st.field(*line, row, 3, "a3")?,
                    a4: st.field(*line, row, 4, "a4")?,
                },
                c: st.field(*line, row, 5, "c")?,
            });
        }
        let ct = read_table(channels, &CHANNEL_HEADER)?;
        for (line, row) in &ct.rows {
            let k: usize = ct.field(*line, row, 0, "grid")?;
            let i: usize = ct.field(*line, row, 1, "element")?;
            let g = grids
                .get_mut(k)
                .ok_or_else(|| Error::parse(channels, *line, format!("grid {k} has no scalar row")))?;
            if i != g.h_prime.len() {
                return Err(Error::parse(channels, *line, format!("element {i} out of order")));
            }
            g.h_prime.push(Cplx::new(ct.field(*line, row, 2, "re")?, ct.field(*line, row, 3, "im")?));
        }
        let p = p.unwrap_or_else(T::zero);
        let n = grids.first().map(|g| g.h_prime.len()).unwrap_or(0);
        for (k, g) in grids.iter_mut().enumerate() {
            if g.h_prime.len() != n || n == 0 {
                return Err(Error::parse(channels, 0, format!("grid {k} has {} elements, expected {n}", g.h_prime.len())));
            }
            let scale = (p * g.coeffs.a1).sqrt();
            g.h_bar = g.h_prime.iter().map(|z| z * scale).collect();
        }
        Ok(GroundTruthChannels {
            grids,
            p,
            sigma2: sigma2.unwrap_or_else(T::zero),
        })
    }
}
