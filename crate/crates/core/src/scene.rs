//! Region geometry, grid tessellation, IRS array steering and synthetic
//! scatterer layouts.
//!
//! Coordinates are world meters. The IRS is a uniform planar array parallel
//! to the y–z plane; a direction `(dx, dy, dz)` seen from the IRS maps to the
//! azimuth/elevation pair `(ϑ, φ)` with `dz = cos ϑ`, `dx = sin ϑ cos φ`,
//! `dy = sin ϑ sin φ`. Element `(iy, iz)` sits at flat index `iy·Nz + iz`
//! (y-factor outer in the Kronecker product).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{Cplx, Real};
use crate::seed::derive_rng;

/// One propagation path: total length plus the angle pair at the IRS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct PathSpec<T> {
    pub length: T,
    pub azimuth: T,
    pub elevation: T,
    /// Index into [`Paths::scatterers`]; absent for line-of-sight paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scatterer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct Region<T> {
    pub d1: T,
    pub d2: T,
    pub d0: T,
    /// World coordinate of the region's lower-left corner at user height.
    pub origin: [T; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct IrsArray<T> {
    pub position: [T; 3],
    pub ny: usize,
    pub nz: usize,
    pub wavelength: T,
}

impl<T> IrsArray<T> {
    pub fn elements(&self) -> usize {
        self.ny * self.nz
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct BaseStation<T> {
    pub position: [T; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct Paths<T> {
    /// BS→IRS paths (`L₂` of them).
    pub bi: Vec<PathSpec<T>>,
    /// IRS→grid paths, one list per grid.
    pub iu: Vec<Vec<PathSpec<T>>>,
    #[serde(default)]
    pub scatterers: Vec<[T; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct Fading<T> {
    pub beta_bi: T,
    pub beta_iu: Vec<T>,
    pub eps_bi: T,
    pub eps_iu: Vec<T>,
    /// Disables the random channel parts (the `ε → ∞` limit) without
    /// representing infinity numerically.
    #[serde(default)]
    pub deterministic_only: bool,
}

/// Complete scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct SceneConfig<T> {
    pub region: Region<T>,
    pub irs: IrsArray<T>,
    pub bs: BaseStation<T>,
    pub paths: Paths<T>,
    pub fading: Fading<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid<T> {
    /// 0-based row-major index, `k = j·n₁ + i`.
    pub index: usize,
    /// Center inside the region plane, relative to the region origin.
    pub center: [T; 2],
}

impl<T: Real> Grid<T> {
    pub fn distance(&self, other: &Grid<T>) -> T {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        (dx * dx + dy * dy).sqrt()
    }
}

/// Number of whole cells of pitch `d0` along a side of length `d`.
fn cells<T: Real>(d: T, d0: T, what: &str) -> Result<usize> {
    if !(d0 > T::zero()) || !(d > T::zero()) {
        return Err(Error::Config(format!("{what}: lengths must be positive")));
    }
    let q = d / d0;
    let r = q.round();
    if (q - r).abs() > T::lit(1e-9) * q.max(T::one()) || r < T::one() {
        return Err(Error::Config(format!(
            "{what}: side {d} is not an integral multiple of grid pitch {d0}"
        )));
    }
    Ok(r.to_usize().unwrap_or(0))
}

impl<T: Real> Region<T> {
    /// Cells along the first and second dimension.
    pub fn shape(&self) -> Result<(usize, usize)> {
        Ok((cells(self.d1, self.d0, "region.d1")?, cells(self.d2, self.d0, "region.d2")?))
    }

    pub fn grid_count(&self) -> Result<usize> {
        let (a, b) = self.shape()?;
        Ok(a * b)
    }

    /// World position of a grid center.
    pub fn world(&self, g: &Grid<T>) -> [T; 3] {
        [
            self.origin[0] + g.center[0],
            self.origin[1] + g.center[1],
            self.origin[2],
        ]
    }
}

/// Tessellates the region into `K` square cells in row-major order.
pub fn build_grids<T: Real>(region: &Region<T>) -> Result<Vec<Grid<T>>> {
    let (n1, n2) = region.shape()?;
    let half = T::lit(0.5);
    let mut out = Vec::with_capacity(n1 * n2);
    for j in 0..n2 {
        for i in 0..n1 {
            out.push(Grid {
                index: j * n1 + i,
                center: [
                    (T::lit(i as f64) + half) * region.d0,
                    (T::lit(j as f64) + half) * region.d0,
                ],
            });
        }
    }
    Ok(out)
}

/// ULA steering vector: entry `i` is `exp(−j·i·π·γ)`.
pub fn steering_ula<T: Real>(gamma: T, n: usize) -> Result<Vec<Cplx<T>>> {
    if n == 0 {
        return Err(Error::Domain("steering vector needs at least one element".into()));
    }
    Ok((0..n)
        .map(|i| Cplx::from_polar(T::one(), -T::lit(i as f64) * T::PI() * gamma))
        .collect())
}

/// UPA steering vector `e(sin ϑ sin φ, Ny) ⊗ e(cos ϑ, Nz)`.
pub fn steering_upa<T: Real>(theta: T, phi: T, ny: usize, nz: usize) -> Result<Vec<Cplx<T>>> {
    let ey = steering_ula(theta.sin() * phi.sin(), ny)?;
    let ez = steering_ula(theta.cos(), nz)?;
    let mut out = Vec::with_capacity(ny * nz);
    for a in &ey {
        for b in &ez {
            out.push(a * b);
        }
    }
    Ok(out)
}

fn sub<T: Real>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3<T: Real>(a: &[T; 3]) -> T {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// `(ϑ, φ)` of the direction from the IRS towards `target`. Directions with a
/// negative y component are mirrored into `φ ∈ [0, π]`.
pub fn angles_towards<T: Real>(irs: &[T; 3], target: &[T; 3]) -> (T, T) {
    let d = sub(target, irs);
    let r = norm3(&d);
    if r == T::zero() {
        return (T::FRAC_PI_2(), T::FRAC_PI_2());
    }
    let theta = (d[2] / r).max(-T::one()).min(T::one()).acos();
    let phi = d[1].atan2(d[0]).abs();
    (theta, phi)
}

/// Unit direction for an angle pair (inverse of [`angles_towards`] for `dy ≥ 0`).
pub fn direction<T: Real>(theta: T, phi: T) -> [T; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

fn check_angle<T: Real>(a: T, what: &str) -> Result<()> {
    if !(a >= T::zero() && a <= T::PI()) {
        return Err(Error::Config(format!("{what}: angle {a} outside [0, π]")));
    }
    Ok(())
}

fn check_path<T: Real>(p: &PathSpec<T>, what: &str, scatterers: usize) -> Result<()> {
    if !(p.length > T::zero()) {
        return Err(Error::Config(format!("{what}: path length must be positive")));
    }
    check_angle(p.azimuth, what)?;
    check_angle(p.elevation, what)?;
    if let Some(s) = p.scatterer {
        if s >= scatterers {
            return Err(Error::Config(format!("{what}: scatterer index {s} out of range")));
        }
    }
    Ok(())
}

impl<T: Real> SceneConfig<T> {
    pub fn elements(&self) -> usize {
        self.irs.elements()
    }

    pub fn grid_count(&self) -> Result<usize> {
        self.region.grid_count()
    }

    pub fn grids(&self) -> Result<Vec<Grid<T>>> {
        build_grids(&self.region)
    }

    /// Checks every structural invariant of the scene.
    pub fn validate(&self) -> Result<()> {
        let k = self.region.grid_count()?;
        if self.irs.ny == 0 || self.irs.nz == 0 {
            return Err(Error::Config("irs: ny and nz must be at least 1".into()));
        }
        if !(self.irs.wavelength > T::zero()) {
            return Err(Error::Config("irs.wavelength must be positive".into()));
        }
        let f = &self.fading;
        if f.beta_iu.len() != k || f.eps_iu.len() != k || self.paths.iu.len() != k {
            return Err(Error::Config(format!(
                "fading/paths: per-grid lists must have {k} entries (beta_iu {}, eps_iu {}, paths.iu {})",
                f.beta_iu.len(),
                f.eps_iu.len(),
                self.paths.iu.len()
            )));
        }
        if !(f.beta_bi > T::zero()) || f.beta_iu.iter().any(|b| !(*b > T::zero())) {
            return Err(Error::Config("fading: large-scale gains must be positive".into()));
        }
        if !(f.eps_bi >= T::zero()) || f.eps_iu.iter().any(|e| !(*e >= T::zero())) {
            return Err(Error::Config("fading: Rician ratios must be nonnegative".into()));
        }
        let ns = self.paths.scatterers.len();
        for p in &self.paths.bi {
            check_path(p, "paths.bi", ns)?;
        }
        for (g, list) in self.paths.iu.iter().enumerate() {
            for p in list {
                check_path(p, &format!("paths.iu[{g}]"), ns)?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("scene serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: Self = toml::from_str(text).map_err(|e| Error::Config(format!("scene: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Knobs for [`synth_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields, default)]
pub struct SynthParams<T> {
    pub d1: T,
    pub d2: T,
    pub d0: T,
    pub origin: [T; 3],
    pub irs_position: [T; 3],
    pub bs_position: [T; 3],
    pub ny: usize,
    pub nz: usize,
    pub wavelength: T,
    /// Include the direct BS→IRS path.
    pub bi_los: bool,
    /// Scatterers contributing BS→scatterer→IRS paths.
    pub bi_scatterers: usize,
    /// Distance range (m) of BS-side scatterers from the IRS.
    pub bi_scatterer_distance: [T; 2],
    /// Include the direct IRS→grid path.
    pub iu_los: bool,
    /// Scatterers contributing IRS→scatterer→grid paths.
    pub iu_scatterers: usize,
    /// Horizontal margin (m) around the region where IU scatterers are placed.
    pub iu_scatterer_margin: T,
    /// Height range (m) of IU scatterers.
    pub iu_scatterer_height: [T; 2],
    /// A scatterer only reaches grids within this horizontal distance (m).
    pub scatterer_radius: T,
    /// Free-space style gain at 1 m; `β = gain_at_1m · d^(−exponent)`.
    pub gain_at_1m: T,
    pub pathloss_exponent: T,
    /// Rician ratio ranges in dB, drawn uniformly.
    pub eps_bi_db: [T; 2],
    pub eps_iu_db: [T; 2],
    pub deterministic_only: bool,
}

impl<T: Real> Default for SynthParams<T> {
    fn default() -> Self {
        let l = T::lit;
        let wavelength = l(0.1);
        let g = wavelength / (l(4.0) * T::PI());
        SynthParams {
            d1: l(15.0),
            d2: l(15.0),
            d0: l(3.0),
            origin: [l(0.0), l(0.0), l(1.0)],
            irs_position: [l(7.5), l(-6.0), l(1.0)],
            bs_position: [l(-40.0), l(30.0), l(20.0)],
            ny: 4,
            nz: 4,
            wavelength,
            bi_los: true,
            bi_scatterers: 2,
            bi_scatterer_distance: [l(10.0), l(40.0)],
            iu_los: true,
            iu_scatterers: 3,
            iu_scatterer_margin: l(5.0),
            iu_scatterer_height: [l(1.0), l(10.0)],
            scatterer_radius: T::infinity(),
            gain_at_1m: g * g,
            pathloss_exponent: l(2.0),
            eps_bi_db: [l(5.0), l(10.0)],
            eps_iu_db: [l(5.0), l(10.0)],
            deterministic_only: false,
        }
    }
}

impl<T: Real> SynthParams<T> {
    /// Full-scale geometry: 30 m × 30 m, 3 m grids, 8 × 8 IRS.
    pub fn full() -> Self {
        let l = T::lit;
        SynthParams {
            d1: l(30.0),
            d2: l(30.0),
            irs_position: [l(15.0), l(-6.0), l(1.0)],
            ny: 8,
            nz: 8,
            iu_scatterers: 4,
            ..Self::default()
        }
    }

    fn gain(&self, d: T) -> T {
        self.gain_at_1m * d.max(T::one()).powf(-self.pathloss_exponent)
    }
}

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, range: [T; 2]) -> T {
    let u = T::lit(rng.random::<f64>());
    range[0] + (range[1] - range[0]) * u
}

fn db<T: Real>(x: T) -> T {
    T::lit(10.0).powf(x / T::lit(10.0))
}

/// Synthesizes a scene from explicit scatterer positions so that every path
/// length and angle is geometrically consistent. Deterministic in `seed`.
pub fn synth_scene<T: Real>(seed: u64, params: &SynthParams<T>) -> Result<SceneConfig<T>> {
    let mut rng = derive_rng(seed, "synth-scene", &[]);
    let region = Region {
        d1: params.d1,
        d2: params.d2,
        d0: params.d0,
        origin: params.origin,
    };
    let grids = build_grids(&region)?;
    let irs = params.irs_position;
    let bs = params.bs_position;
    let mut scatterers: Vec<[T; 3]> = Vec::new();

    // BS side: direction from the IRS drawn uniformly over the angle box.
    let mut bi = Vec::new();
    let d_bi = norm3(&sub(&bs, &irs));
    if params.bi_los {
        let (az, el) = angles_towards(&irs, &bs);
        bi.push(PathSpec {
            length: d_bi,
            azimuth: az,
            elevation: el,
            scatterer: None,
        });
    }
    for _ in 0..params.bi_scatterers {
        let theta = uniform(&mut rng, [T::zero(), T::PI()]);
        let phi = uniform(&mut rng, [T::zero(), T::PI()]);
        let r = uniform(&mut rng, params.bi_scatterer_distance);
        let d = direction(theta, phi);
        let pos = [irs[0] + r * d[0], irs[1] + r * d[1], irs[2] + r * d[2]];
        let idx = scatterers.len();
        scatterers.push(pos);
        bi.push(PathSpec {
            length: r + norm3(&sub(&bs, &pos)),
            azimuth: theta,
            elevation: phi,
            scatterer: Some(idx),
        });
    }

    // Grid side: scatterers placed around the region; the departure
    // direction is towards the scatterer, the length follows the grid.
    let m = params.iu_scatterer_margin;
    let o = params.origin;
    let mut iu_scat = Vec::new();
    for _ in 0..params.iu_scatterers {
        let x = uniform(&mut rng, [o[0] - m, o[0] + params.d1 + m]);
        let y = uniform(&mut rng, [(o[1] - m).max(irs[1] + T::one()), o[1] + params.d2 + m]);
        let z = uniform(&mut rng, params.iu_scatterer_height);
        let idx = scatterers.len();
        scatterers.push([x, y, z]);
        iu_scat.push(idx);
    }

    let eps_bi = db(uniform(&mut rng, params.eps_bi_db));
    let mut iu = Vec::with_capacity(grids.len());
    let mut beta_iu = Vec::with_capacity(grids.len());
    let mut eps_iu = Vec::with_capacity(grids.len());
    for g in &grids {
        let u = region.world(g);
        let mut list = Vec::new();
        if params.iu_los {
            let (az, el) = angles_towards(&irs, &u);
            list.push(PathSpec {
                length: norm3(&sub(&u, &irs)),
                azimuth: az,
                elevation: el,
                scatterer: None,
            });
        }
        for &s in &iu_scat {
            let p = scatterers[s];
            let horizontal = ((p[0] - u[0]).powi(2) + (p[1] - u[1]).powi(2)).sqrt();
            if horizontal > params.scatterer_radius {
                continue;
            }
            let (az, el) = angles_towards(&irs, &p);
            list.push(PathSpec {
                length: norm3(&sub(&p, &irs)) + norm3(&sub(&u, &p)),
                azimuth: az,
                elevation: el,
                scatterer: Some(s),
            });
        }
        iu.push(list);
        beta_iu.push(params.gain(norm3(&sub(&u, &irs))));
        eps_iu.push(db(uniform(&mut rng, params.eps_iu_db)));
    }

    let scene = SceneConfig {
        region,
        irs: IrsArray {
            position: irs,
            ny: params.ny,
            nz: params.nz,
            wavelength: params.wavelength,
        },
        bs: BaseStation { position: bs },
        paths: Paths {
            bi,
            iu,
            scatterers,
        },
        fading: Fading {
            beta_bi: params.gain(d_bi),
            beta_iu,
            eps_bi,
            eps_iu,
            deterministic_only: params.deterministic_only,
        },
    };
    scene.validate()?;
    Ok(scene)
}
