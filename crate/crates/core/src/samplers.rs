//! Reverse-process samplers.
//!
//! Five update rules are provided, each as a single-step function:
//!
//! | kind          | update                                                            | NFE/step |
//! |---------------|-------------------------------------------------------------------|----------|
//! | `ddim_simple` | `(y + (1-a)/2 s_t(y)) / sqrt(a)`                                  | 1        |
//! | `ddim_eps`    | `y / sqrt(a) + c_t eps_t(y)`                                      | 1        |
//! | `ddpm`        | `(y + (1-a) s_t(y) + sqrt(1-a) Z) / sqrt(a)`                      | 1        |
//! | `accel_ode`   | midpoint `Phi/Psi` pair, or the `eps` form reusing `eps_{t+1}`    | 2 or 1   |
//! | `accel_sde`   | noise-then-DDPM: `y+ = y + sqrt((1-a)/2) Z`, then DDPM on `y+`    | 1        |
//!
//! where `a = alpha_t` and `c_t = sqrt(1 - abar_{t-1}) - sqrt(1 - abar_t) / sqrt(alpha_t)`.
//! A run starts from `Y_T ~ N(0, I)` and sweeps `t = T, ..., 2`, returning `Y_1`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::oracle::ScoreOracle;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::target::MAX_DIM;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    DdimSimple,
    DdimEps,
    Ddpm,
    AccelOde,
    AccelSde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMode {
    /// Extra evaluation at the predicted point `Phi_t(y)` (2 NFE per step).
    Midpoint,
    /// Reuse the previous step's `eps` evaluation (1 NFE per step).
    Reuse,
}

/// How the accelerated ODE sampler handles `t = T`, where the rule needs `alpha_{T+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Take a first-order step at `t = T`.
    #[default]
    FirstOrder,
    /// Use `alpha_{T+1} := alpha_T` (midpoint mode only).
    Extend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct SamplerSpec {
    kind: SamplerKind,
    ode_mode: Option<OdeMode>,
    boundary: Boundary,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    kind: SamplerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ode_mode: Option<OdeMode>,
    #[serde(default)]
    boundary: Boundary,
}

impl TryFrom<SpecRepr> for SamplerSpec {
    type Error = Error;

    fn try_from(r: SpecRepr) -> Result<Self> {
        SamplerSpec::new(r.kind, r.ode_mode, r.boundary)
    }
}

impl From<SamplerSpec> for SpecRepr {
    fn from(s: SamplerSpec) -> Self {
        SpecRepr {
            kind: s.kind,
            ode_mode: s.ode_mode,
            boundary: s.boundary,
        }
    }
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, ode_mode: Option<OdeMode>, boundary: Boundary) -> Result<Self> {
        match (kind, ode_mode) {
            (SamplerKind::AccelOde, None) => {
                return Err(Error::InvalidSampler("accel_ode needs an ode_mode".into()))
            }
            (SamplerKind::AccelOde, Some(_)) => {}
            (_, Some(_)) => {
                return Err(Error::InvalidSampler(
                    "ode_mode only applies to accel_ode".into(),
                ))
            }
            (_, None) => {}
        }
        if boundary == Boundary::Extend && ode_mode != Some(OdeMode::Midpoint) {
            return Err(Error::InvalidSampler(
                "boundary 'extend' requires accel_ode in midpoint mode".into(),
            ));
        }
        Ok(Self {
            kind,
            ode_mode,
            boundary,
        })
    }

    pub fn ddim_simple() -> Self {
        Self {
            kind: SamplerKind::DdimSimple,
            ode_mode: None,
            boundary: Boundary::FirstOrder,
        }
    }

    pub fn ddim_eps() -> Self {
        Self {
            kind: SamplerKind::DdimEps,
            ode_mode: None,
            boundary: Boundary::FirstOrder,
        }
    }

    pub fn ddpm() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            ode_mode: None,
            boundary: Boundary::FirstOrder,
        }
    }

    pub fn accel_ode(mode: OdeMode) -> Self {
        Self {
            kind: SamplerKind::AccelOde,
            ode_mode: Some(mode),
            boundary: Boundary::FirstOrder,
        }
    }

    pub fn accel_ode_extended() -> Self {
        Self {
            kind: SamplerKind::AccelOde,
            ode_mode: Some(OdeMode::Midpoint),
            boundary: Boundary::Extend,
        }
    }

    pub fn accel_sde() -> Self {
        Self {
            kind: SamplerKind::AccelSde,
            ode_mode: None,
            boundary: Boundary::FirstOrder,
        }
    }

    /// All five kinds, with both accelerated ODE modes.
    pub fn all() -> [Self; 6] {
        [
            Self::ddim_simple(),
            Self::ddim_eps(),
            Self::ddpm(),
            Self::accel_ode(OdeMode::Midpoint),
            Self::accel_ode(OdeMode::Reuse),
            Self::accel_sde(),
        ]
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn ode_mode(&self) -> Option<OdeMode> {
        self.ode_mode
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, SamplerKind::Ddpm | SamplerKind::AccelSde)
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            SamplerKind::DdimSimple => "ddim_simple",
            SamplerKind::DdimEps => "ddim_eps",
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::AccelOde => "accel_ode",
            SamplerKind::AccelSde => "accel_sde",
        }
    }

    pub fn mode_label(&self) -> &'static str {
        match (self.ode_mode, self.boundary) {
            (Some(OdeMode::Midpoint), Boundary::Extend) => "midpoint_extend",
            (Some(OdeMode::Midpoint), _) => "midpoint",
            (Some(OdeMode::Reuse), _) => "reuse",
            (None, _) => "none",
        }
    }

    /// Score evaluations per trajectory for a `T..2` sweep.
    pub fn nfe_per_trajectory(&self, steps: usize) -> u64 {
        let sweep = steps as u64 - 1;
        match (self.ode_mode, self.boundary) {
            (Some(OdeMode::Midpoint), Boundary::FirstOrder) => 2 * sweep - 1,
            (Some(OdeMode::Midpoint), Boundary::Extend) => 2 * sweep,
            _ => sweep,
        }
    }
}

impl std::fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.ode_mode {
            Some(_) => write!(f, "{}({})", self.label(), self.mode_label()),
            None => f.write_str(self.label()),
        }
    }
}

/// `sqrt(1 - abar_{t-1}) - sqrt(1 - abar_t) / sqrt(alpha_t)`.
pub fn ddim_eps_coefficient(s: &NoiseSchedule, t: usize) -> f64 {
    (1.0 - s.alpha_bar(t - 1)).sqrt() - (1.0 - s.alpha_bar(t)).sqrt() / s.alpha(t).sqrt()
}

/// `(1 - alpha_t)^2 / (4 (1 - alpha_{t+1}))`.
pub fn momentum_coefficient(alpha: f64, alpha_next: f64, t: usize) -> Result<f64> {
    let denom = 1.0 - alpha_next;
    if denom == 0.0 {
        return Err(Error::DegenerateMomentum { t });
    }
    Ok((1.0 - alpha).powi(2) / (4.0 * denom))
}

fn sqrt_clamped(a: f64, t: usize) -> Result<f64> {
    if a > 1.0 + 1e-12 {
        return Err(Error::ArcsinDomain { t, excess: a - 1.0 });
    }
    Ok(a.clamp(0.0, 1.0).sqrt())
}

/// Weight of `eps_{t+1} - eps_t` in the reuse rule:
///
/// `C_t = sqrt(abar_{t-1}) / (abar_t - abar_{t+1}) * (abar_t g(abar_{t-1}) + asin sqrt(abar_{t-1})
///        - abar_t g(abar_t) - asin sqrt(abar_t))`, with `g(a) = sqrt((1 - a) / a)`.
///
/// The two differences are evaluated through exact identities
/// (`asin p - asin q = asin(p sqrt(1-q^2) - q sqrt(1-p^2))` with the numerator
/// rationalised, and `g(a0) - g(a1) = -(a0 - a1) / (a0 a1 (g(a0) + g(a1)))`),
/// so the O(delta) terms cancel without losing the O(delta^2) result.
pub fn reuse_coefficient(s: &NoiseSchedule, t: usize) -> Result<f64> {
    let (a0, a1, a2) = (s.alpha_bar(t - 1), s.alpha_bar(t), s.alpha_bar(t + 1));
    if a1 == a2 {
        return Err(Error::DegenerateDenominator { t });
    }
    let (r0, r1) = (sqrt_clamped(a0, t)?, sqrt_clamped(a1, t)?);
    let (q0, q1) = ((1.0 - a0).max(0.0).sqrt(), (1.0 - a1).max(0.0).sqrt());
    let delta = a0 - a1;
    let asin_diff = (delta / (r0 * q1 + r1 * q0)).clamp(-1.0, 1.0).asin();
    let (g0, g1) = (q0 / r0, q1 / r1);
    let g_diff = -delta / (a0 * a1 * (g0 + g1));
    Ok(r0 / (a1 - a2) * (a1 * g_diff + asin_diff))
}

fn check_finite(v: &[f64], t: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::ScoreBlowup { t })
    }
}

fn check_step_range(s: &NoiseSchedule, t: usize, lo: usize, hi: usize) -> Result<()> {
    if t < lo || t > hi {
        return Err(Error::StepIndex { t, max: s.steps() });
    }
    Ok(())
}

fn check_dim<O: ScoreOracle + ?Sized>(o: &O, y: &[f64]) -> Result<()> {
    if y.len() != o.dim() {
        return Err(Error::DimensionMismatch {
            expected: o.dim(),
            got: y.len(),
        });
    }
    Ok(())
}

fn eval_score<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    at: usize,
    x: &[f64],
    out: &mut [f64],
) -> Result<()> {
    o.score_into(at, x, out)?;
    check_finite(out, t)
}

fn eval_eps<O: ScoreOracle + ?Sized>(o: &O, t: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
    o.eps_into(t, x, out)?;
    check_finite(out, t)
}

// In-place kernels on slices; `y` holds Y_t on entry and Y_{t-1} on exit.

fn ddim_simple_in_place<O: ScoreOracle + ?Sized>(o: &O, t: usize, y: &mut [f64]) -> Result<()> {
    let d = y.len();
    let mut s = [0.0; MAX_DIM];
    eval_score(o, t, t, y, &mut s[..d])?;
    let a = o.schedule().alpha(t);
    let inv = 1.0 / a.sqrt();
    for i in 0..d {
        y[i] = inv * (y[i] + 0.5 * (1.0 - a) * s[i]);
    }
    Ok(())
}

fn ddim_eps_in_place<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &mut [f64],
    eps_out: &mut [f64],
) -> Result<()> {
    let d = y.len();
    eval_eps(o, t, y, &mut eps_out[..d])?;
    let inv = 1.0 / o.schedule().alpha(t).sqrt();
    let c = ddim_eps_coefficient(o.schedule(), t);
    for i in 0..d {
        y[i] = inv * y[i] + c * eps_out[i];
    }
    Ok(())
}

fn ddpm_in_place<O: ScoreOracle + ?Sized>(o: &O, t: usize, y: &mut [f64], z: &[f64]) -> Result<()> {
    let d = y.len();
    let mut s = [0.0; MAX_DIM];
    eval_score(o, t, t, y, &mut s[..d])?;
    let a = o.schedule().alpha(t);
    let (inv, noise) = (1.0 / a.sqrt(), (1.0 - a).sqrt());
    for i in 0..d {
        y[i] = inv * (y[i] + (1.0 - a) * s[i] + noise * z[i]);
    }
    Ok(())
}

fn midpoint_in_place<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &mut [f64],
    momentum_scale: f64,
) -> Result<()> {
    let d = y.len();
    let sched = o.schedule();
    let (a, an) = (sched.alpha(t), sched.alpha(t + 1));
    let m = momentum_coefficient(a, an, t)? * momentum_scale;
    let mut s = [0.0; MAX_DIM];
    let mut mid = [0.0; MAX_DIM];
    let mut s_next = [0.0; MAX_DIM];
    eval_score(o, t, t, y, &mut s[..d])?;
    let san = an.sqrt();
    for i in 0..d {
        mid[i] = san * (y[i] - 0.5 * (1.0 - an) * s[i]);
    }
    eval_score(o, t, t + 1, &mid[..d], &mut s_next[..d])?;
    let inv = 1.0 / a.sqrt();
    for i in 0..d {
        y[i] = inv * (y[i] + 0.5 * (1.0 - a) * s[i] + m * (s[i] - san * s_next[i]));
    }
    Ok(())
}

fn reuse_in_place<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &mut [f64],
    cache: &mut [f64],
) -> Result<()> {
    let d = y.len();
    let sched = o.schedule();
    let c = ddim_eps_coefficient(sched, t);
    let big_c = reuse_coefficient(sched, t)?;
    let mut e = [0.0; MAX_DIM];
    eval_eps(o, t, y, &mut e[..d])?;
    let inv = 1.0 / sched.alpha(t).sqrt();
    for i in 0..d {
        y[i] = inv * y[i] + c * e[i] + big_c * (cache[i] - e[i]);
        cache[i] = e[i];
    }
    Ok(())
}

fn accel_sde_in_place<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &mut [f64],
    z: &[f64],
    z_plus: &[f64],
) -> Result<()> {
    let d = y.len();
    let a = o.schedule().alpha(t);
    let half = (0.5 * (1.0 - a)).sqrt();
    for i in 0..d {
        y[i] += half * z[i];
    }
    let mut s = [0.0; MAX_DIM];
    eval_score(o, t, t, y, &mut s[..d])?;
    let inv = 1.0 / a.sqrt();
    for i in 0..d {
        y[i] = inv * (y[i] + (1.0 - a) * s[i] + half * z_plus[i]);
    }
    Ok(())
}

fn draw_normal<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn ddim_simple_step<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_range(o.schedule(), t, 1, o.steps())?;
    check_dim(o, y.as_slice())?;
    let mut out = y.clone();
    ddim_simple_in_place(o, t, out.as_mut_slice())?;
    Ok(out)
}

pub fn ddim_eps_step<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_range(o.schedule(), t, 1, o.steps())?;
    check_dim(o, y.as_slice())?;
    let mut out = y.clone();
    let mut e = [0.0; MAX_DIM];
    ddim_eps_in_place(o, t, out.as_mut_slice(), &mut e)?;
    Ok(out)
}

/// DDPM step with the Gaussian draw supplied by the caller.
pub fn ddpm_step_with_noise<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_range(o.schedule(), t, 1, o.steps())?;
    check_dim(o, y.as_slice())?;
    check_dim(o, z.as_slice())?;
    let mut out = y.clone();
    ddpm_in_place(o, t, out.as_mut_slice(), z.as_slice())?;
    Ok(out)
}

pub fn ddpm_step<O: ScoreOracle + ?Sized, R: Rng>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut z = DVector::zeros(o.dim());
    draw_normal(rng, z.as_mut_slice());
    ddpm_step_with_noise(o, t, y, &z)
}

/// `Psi_t(y, Phi_t(y))`. At `t = T` this uses the extension `alpha_{T+1}`.
pub fn accel_ode_step_midpoint<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    midpoint_step_scaled(o, t, y, 1.0)
}

/// Midpoint step with the momentum coefficient multiplied by `scale`
/// (`scale = 0` reduces to `ddim_simple`).
pub(crate) fn midpoint_step_scaled<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
    scale: f64,
) -> Result<DVector<f64>> {
    check_step_range(o.schedule(), t, 2, o.steps())?;
    check_dim(o, y.as_slice())?;
    let mut out = y.clone();
    midpoint_in_place(o, t, out.as_mut_slice(), scale)?;
    Ok(out)
}

/// One step of the `eps`-form second-order rule. `cached_eps_next` is
/// `eps_{t+1}` evaluated at the previous iterate; returns `(Y_{t-1}, eps_t(Y_t))`.
pub fn accel_ode_step_reuse<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
    cached_eps_next: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_step_range(o.schedule(), t, 2, o.steps())?;
    check_dim(o, y.as_slice())?;
    check_dim(o, cached_eps_next.as_slice())?;
    let mut out = y.clone();
    let mut cache = cached_eps_next.clone();
    reuse_in_place(o, t, out.as_mut_slice(), cache.as_mut_slice())?;
    Ok((out, cache))
}

/// Accelerated stochastic step with both draws supplied (`Z` then `Z+`).
pub fn accel_sde_step_with_noise<O: ScoreOracle + ?Sized>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
    z: &DVector<f64>,
    z_plus: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_range(o.schedule(), t, 1, o.steps())?;
    check_dim(o, y.as_slice())?;
    check_dim(o, z.as_slice())?;
    check_dim(o, z_plus.as_slice())?;
    let mut out = y.clone();
    accel_sde_in_place(o, t, out.as_mut_slice(), z.as_slice(), z_plus.as_slice())?;
    Ok(out)
}

pub fn accel_sde_step<O: ScoreOracle + ?Sized, R: Rng>(
    o: &O,
    t: usize,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut z = DVector::zeros(o.dim());
    let mut zp = DVector::zeros(o.dim());
    draw_normal(rng, z.as_mut_slice());
    draw_normal(rng, zp.as_mut_slice());
    accel_sde_step_with_noise(o, t, y, &z, &zp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    /// Index of the produced iterate `Y_t`.
    pub t: usize,
    pub mean_sq_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetadata {
    pub spec: SamplerSpec,
    pub sampler: String,
    pub mode: String,
    pub steps: usize,
    pub seed: u64,
    pub n_traj: usize,
    pub nfe_total: u64,
    pub nfe_per_trajectory: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub spec: SamplerSpec,
    pub seed: u64,
    pub steps: usize,
    /// Final iterates `Y_1`, one per trajectory.
    pub points: Vec<DVector<f64>>,
    pub nfe_total: u64,
    /// Mean squared norm of the batch after each step, in sweep order.
    pub diagnostics: Vec<StepStats>,
}

impl SampleBatch {
    pub fn metadata(&self) -> SampleMetadata {
        let n = self.points.len();
        SampleMetadata {
            spec: self.spec,
            sampler: self.spec.label().into(),
            mode: self.spec.mode_label().into(),
            steps: self.steps,
            seed: self.seed,
            n_traj: n,
            nfe_total: self.nfe_total,
            nfe_per_trajectory: if n == 0 { 0 } else { self.nfe_total / n as u64 },
        }
    }

    /// CSV with columns `traj_id, y_0 .. y_{d-1}`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let d = self.points.first().map_or(0, |p| p.len());
        let mut header = vec!["traj_id".to_string()];
        header.extend((0..d).map(|i| format!("y_{i}")));
        wtr.write_record(&header)?;
        for (i, p) in self.points.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(p.iter().map(|v| format!("{v:.16e}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

const CHUNK: usize = 2048;

struct Trajectory {
    y: [f64; MAX_DIM],
    nfe: u64,
}

/// Sweep one trajectory from `t = T` to `t = 2`, accumulating `|Y_{t-1}|^2` into `acc`.
fn sweep<O: ScoreOracle + ?Sized>(
    spec: &SamplerSpec,
    o: &O,
    start: Option<&[f64]>,
    stream: &mut rng::Stream,
    acc: &mut [f64],
) -> Result<Trajectory> {
    let d = o.dim();
    let steps = o.steps();
    let mut y = [0.0; MAX_DIM];
    match start {
        Some(s) => y[..d].copy_from_slice(s),
        None => draw_normal(stream, &mut y[..d]),
    }
    let mut cache = [0.0; MAX_DIM];
    let mut z = [0.0; MAX_DIM];
    let mut zp = [0.0; MAX_DIM];
    let mut nfe = 0;
    for (k, t) in (2..=steps).rev().enumerate() {
        let yv = &mut y[..d];
        match (spec.kind, spec.ode_mode) {
            (SamplerKind::DdimSimple, _) => {
                ddim_simple_in_place(o, t, yv)?;
                nfe += 1;
            }
            (SamplerKind::DdimEps, _) => {
                ddim_eps_in_place(o, t, yv, &mut cache)?;
                nfe += 1;
            }
            (SamplerKind::Ddpm, _) => {
                draw_normal(stream, &mut z[..d]);
                ddpm_in_place(o, t, yv, &z[..d])?;
                nfe += 1;
            }
            (SamplerKind::AccelSde, _) => {
                draw_normal(stream, &mut z[..d]);
                draw_normal(stream, &mut zp[..d]);
                accel_sde_in_place(o, t, yv, &z[..d], &zp[..d])?;
                nfe += 1;
            }
            (SamplerKind::AccelOde, Some(OdeMode::Reuse)) => {
                if t == steps {
                    // first-order step primes the cache with eps_T(Y_T)
                    ddim_eps_in_place(o, t, yv, &mut cache)?;
                } else {
                    reuse_in_place(o, t, yv, &mut cache[..d])?;
                }
                nfe += 1;
            }
            (SamplerKind::AccelOde, _) => {
                if t == steps && spec.boundary == Boundary::FirstOrder {
                    ddim_simple_in_place(o, t, yv)?;
                    nfe += 1;
                } else {
                    midpoint_in_place(o, t, yv, 1.0)?;
                    nfe += 2;
                }
            }
        }
        acc[k] += yv.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(Trajectory { y, nfe })
}

fn run_inner<O: ScoreOracle + ?Sized>(
    spec: &SamplerSpec,
    o: &O,
    n_traj: usize,
    starts: Option<&[DVector<f64>]>,
    seed: u64,
) -> Result<SampleBatch> {
    if n_traj == 0 {
        return Err(Error::InvalidInput("n_traj must be at least 1".into()));
    }
    let d = o.dim();
    if d > MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "dimension {d} exceeds {MAX_DIM}"
        )));
    }
    if let Some(s) = starts {
        if let Some(bad) = s.iter().find(|p| p.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
    }
    let steps = o.steps();
    let n_chunks = n_traj.div_ceil(CHUNK);
    // chunks are combined in order, so sums do not depend on scheduling
    let chunks = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n_traj);
            let mut acc = vec![0.0; steps - 1];
            let mut pts = Vec::with_capacity(hi - lo);
            let mut nfe = 0;
            for i in lo..hi {
                let mut stream = rng::stream(seed, i as u64);
                let start = starts.map(|s| s[i].as_slice());
                let tr = sweep(spec, o, start, &mut stream, &mut acc)?;
                nfe += tr.nfe;
                pts.push(DVector::from_column_slice(&tr.y[..d]));
            }
            Ok((pts, acc, nfe))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(n_traj);
    let mut acc = vec![0.0; steps - 1];
    let mut nfe_total = 0;
    for (pts, a, nfe) in chunks {
        points.extend(pts);
        acc.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        nfe_total += nfe;
    }
    let diagnostics = acc
        .into_iter()
        .enumerate()
        .map(|(k, s)| StepStats {
            t: steps - 1 - k,
            mean_sq_norm: s / n_traj as f64,
        })
        .collect();
    Ok(SampleBatch {
        spec: *spec,
        seed,
        steps,
        points,
        nfe_total,
        diagnostics,
    })
}

/// Run `n_traj` independent trajectories from `Y_T ~ N(0, I)` down to `Y_1`.
///
/// Trajectory `i` draws its start and all step noise from stream `i` of
/// `seed`, so the output is identical for any thread count.
pub fn run_sampler<O: ScoreOracle + ?Sized>(
    spec: &SamplerSpec,
    oracle: &O,
    n_traj: usize,
    seed: u64,
) -> Result<SampleBatch> {
    run_inner(spec, oracle, n_traj, None, seed)
}

/// Like [`run_sampler`] but with given starting points `Y_T`.
pub fn run_sampler_from<O: ScoreOracle + ?Sized>(
    spec: &SamplerSpec,
    oracle: &O,
    starts: &[DVector<f64>],
    seed: u64,
) -> Result<SampleBatch> {
    run_inner(spec, oracle, starts.len(), Some(starts), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{counting_oracle, exact_oracle, zero_oracle, FnOracle};
    use crate::quadrature::integrate;
    use crate::schedule::{build_schedule, ScheduleParams};
    use crate::target::GaussianMixture;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn sched(steps: usize) -> Arc<NoiseSchedule> {
        Arc::new(build_schedule(&ScheduleParams::with_defaults(steps).unwrap()).unwrap())
    }

    /// Schedule with a constant `alpha`.
    fn flat(alpha: f64, steps: usize) -> Arc<NoiseSchedule> {
        Arc::new(NoiseSchedule::from_betas(vec![1.0 - alpha; steps]).unwrap())
    }

    fn minus_x(
        schedule: Arc<NoiseSchedule>,
    ) -> FnOracle<impl Fn(usize, &[f64], &mut [f64]) + Send + Sync> {
        FnOracle::new(schedule, 1, |_, x: &[f64], out: &mut [f64]| out[0] = -x[0])
    }

    #[test]
    fn spec_invariants_and_json() {
        assert!(SamplerSpec::new(SamplerKind::AccelOde, None, Boundary::FirstOrder).is_err());
        assert!(SamplerSpec::new(
            SamplerKind::Ddpm,
            Some(OdeMode::Reuse),
            Boundary::FirstOrder
        )
        .is_err());
        assert!(SamplerSpec::new(
            SamplerKind::AccelOde,
            Some(OdeMode::Reuse),
            Boundary::Extend
        )
        .is_err());
        for spec in SamplerSpec::all() {
            let j = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<SamplerSpec>(&j).unwrap(), spec);
        }
        let s: SamplerSpec =
            serde_json::from_str(r#"{"kind":"accel_ode","ode_mode":"reuse"}"#).unwrap();
        assert_eq!(s, SamplerSpec::accel_ode(OdeMode::Reuse));
        assert!(serde_json::from_str::<SamplerSpec>(r#"{"kind":"accel_ode"}"#).is_err());
        assert!(serde_json::from_str::<SamplerSpec>(
            r#"{"kind":"ddim_eps","ode_mode":"midpoint"}"#
        )
        .is_err());
    }

    #[test]
    fn ddim_simple_examples() {
        let z = zero_oracle(flat(0.25, 4), 1);
        assert_relative_eq!(
            ddim_simple_step(&z, 2, &v(&[1.5])).unwrap()[0],
            3.0,
            max_relative = 1e-15
        );

        let o = minus_x(flat(0.81, 4));
        let y = ddim_simple_step(&o, 3, &v(&[2.0])).unwrap()[0];
        assert_relative_eq!(y, 2.0 * 1.81 / 1.8, max_relative = 1e-14);

        let odd = exact_oracle(&GaussianMixture::preset("bimodal_1d").unwrap(), sched(16)).unwrap();
        assert_eq!(ddim_simple_step(&odd, 9, &v(&[0.0])).unwrap()[0], 0.0);
    }

    #[test]
    fn ddim_eps_with_zero_eps() {
        let s = sched(32);
        let z = zero_oracle(s.clone(), 2);
        let y = ddim_eps_step(&z, 10, &v(&[1.0, -2.0])).unwrap();
        assert!((y - v(&[1.0, -2.0]) / s.alpha(10).sqrt()).amax() < 1e-15);
    }

    #[test]
    fn ddim_eps_coefficient_matches_quadrature() {
        let s = sched(128);
        for t in [2, 17, 64, 100, 128] {
            let (lo, hi) = (s.alpha_bar(t), s.alpha_bar(t - 1));
            let q = integrate(|g| g.powf(-1.5) * (1.0 - g).powf(-0.5), lo, hi, 0.0, 1e-13).value;
            let expected = -0.5 * hi.sqrt() * q;
            assert_relative_eq!(ddim_eps_coefficient(&s, t), expected, max_relative = 1e-9);
        }
    }

    #[test]
    fn ddim_eps_coefficient_vanishes_for_zero_width_step() {
        // alpha_t = 1 gives abar_{t-1} = abar_t
        let (a0, a1, alpha) = (0.6f64, 0.6f64, 1.0f64);
        let c = (1.0 - a0).sqrt() - (1.0 - a1).sqrt() / alpha.sqrt();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn reuse_coefficient_matches_quadrature() {
        let s = sched(128);
        for t in 2..128 {
            let (a0, a1, a2) = (s.alpha_bar(t - 1), s.alpha_bar(t), s.alpha_bar(t + 1));
            let w = a0 - a1;
            // substitute gamma = a1 + u w to keep the integrand well scaled
            let f = |u: f64| {
                let g = a1 + u * w;
                u * w * g.powf(-1.5) / ((1.0 - a1) - u * w).sqrt() * w
            };
            let q = integrate(f, 0.0, 1.0, 0.0, 1e-13).value;
            let expected = a0.sqrt() / (2.0 * (a1 - a2)) * q;
            let got = reuse_coefficient(&s, t).unwrap();
            assert!(
                ((got - expected) / expected).abs() <= 1e-8,
                "t={t}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn reuse_coefficient_rejects_equal_abars() {
        let mut beta = vec![0.1; 6];
        // abar_4 == abar_5 needs beta_5 == 0, which the schedule forbids,
        // so force it through an alpha that rounds to one
        beta[4] = 1e-18;
        let s = NoiseSchedule::from_betas(beta).unwrap();
        assert!(matches!(
            reuse_coefficient(&s, 4),
            Err(Error::DegenerateDenominator { t: 4 })
        ));
    }

    #[test]
    fn momentum_coefficient_examples() {
        let h = 0.01;
        assert_relative_eq!(
            momentum_coefficient(1.0 - h, 1.0 - h, 3).unwrap(),
            h / 4.0,
            max_relative = 1e-12
        );
        assert!(matches!(
            momentum_coefficient(0.9, 1.0, 3),
            Err(Error::DegenerateMomentum { t: 3 })
        ));
    }

    #[test]
    fn midpoint_with_zero_score() {
        let s = sched(16);
        let z = zero_oracle(s.clone(), 1);
        let y = accel_ode_step_midpoint(&z, 5, &v(&[2.0])).unwrap()[0];
        assert_relative_eq!(y, 2.0 / s.alpha(5).sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn midpoint_on_standard_normal_matches_hand_substitution() {
        let a: f64 = 0.99;
        let o = minus_x(flat(a, 8));
        // Phi: y- = sqrt(a) (y + (1-a)/2 y); Psi with s = -y, s_next = -y-
        let m = (1.0 - a).powi(2) / (4.0 * (1.0 - a));
        let phi = a.sqrt() * (1.0 + (1.0 - a) / 2.0);
        let c = (1.0 - (1.0 - a) / 2.0 + m * (-1.0 + a.sqrt() * phi)) / a.sqrt();
        let y = accel_ode_step_midpoint(&o, 4, &v(&[1.7])).unwrap()[0];
        assert!((y - c * 1.7).abs() <= 1e-12);
    }

    #[test]
    fn midpoint_without_momentum_is_ddim_simple() {
        let o = exact_oracle(&GaussianMixture::preset("bimodal_1d").unwrap(), sched(32)).unwrap();
        for (t, x) in [(3, 0.4), (17, -1.2), (32, 2.1)] {
            let a = midpoint_step_scaled(&o, t, &v(&[x]), 0.0).unwrap();
            let b = ddim_simple_step(&o, t, &v(&[x])).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reuse_step_examples() {
        let s = sched(32);
        let o = exact_oracle(&GaussianMixture::preset("bimodal_1d").unwrap(), s.clone()).unwrap();
        let y = v(&[0.7]);
        let flat_eps = o.eps(10, &y).unwrap();
        let (out, e) = accel_ode_step_reuse(&o, 10, &y, &flat_eps).unwrap();
        assert_eq!(e, flat_eps);
        assert!((out - ddim_eps_step(&o, 10, &y).unwrap()).amax() < 1e-15);

        let z = zero_oracle(s.clone(), 1);
        let (out, _) = accel_ode_step_reuse(&z, 10, &y, &v(&[0.0])).unwrap();
        assert_relative_eq!(out[0], 0.7 / s.alpha(10).sqrt(), max_relative = 1e-15);
        assert!(accel_ode_step_reuse(&z, 1, &y, &v(&[0.0])).is_err());
    }

    #[test]
    fn ddpm_examples() {
        let s = sched(16);
        let z = zero_oracle(s.clone(), 1);
        let y = ddpm_step_with_noise(&z, 6, &v(&[3.0]), &v(&[0.0])).unwrap()[0];
        assert_relative_eq!(y, 3.0 / s.alpha(6).sqrt(), max_relative = 1e-15);

        // unit noise shifts the output by sqrt((1 - a) / a)
        let y1 = ddpm_step_with_noise(&z, 6, &v(&[3.0]), &v(&[1.0])).unwrap()[0];
        let a = s.alpha(6);
        assert_relative_eq!(y1 - y, ((1.0 - a) / a).sqrt(), max_relative = 1e-12);

        let o = minus_x(flat(0.81, 4));
        let m = ddpm_step_with_noise(&o, 2, &v(&[1.0]), &v(&[0.0])).unwrap()[0];
        assert_relative_eq!(m, 0.9, max_relative = 1e-14);
    }

    #[test]
    fn accel_sde_examples() {
        let s = sched(16);
        let z = zero_oracle(s.clone(), 1);
        let a = s.alpha(7);
        let y = accel_sde_step_with_noise(&z, 7, &v(&[2.0]), &v(&[0.0]), &v(&[0.0])).unwrap()[0];
        assert_relative_eq!(y, 2.0 / a.sqrt(), max_relative = 1e-15);
        // zero score: unit draws each contribute sqrt((1-a)/2)/sqrt(a)
        let gz = accel_sde_step_with_noise(&z, 7, &v(&[0.0]), &v(&[1.0]), &v(&[0.0])).unwrap()[0];
        let gzp = accel_sde_step_with_noise(&z, 7, &v(&[0.0]), &v(&[0.0]), &v(&[1.0])).unwrap()[0];
        assert_relative_eq!(gz * gz + gzp * gzp, (1.0 - a) / a, max_relative = 1e-13);

        let o = minus_x(flat(0.81, 4));
        let gz = accel_sde_step_with_noise(&o, 3, &v(&[0.0]), &v(&[1.0]), &v(&[0.0])).unwrap()[0];
        let a: f64 = 0.81;
        assert_relative_eq!(
            gz,
            a * (0.5 * (1.0 - a)).sqrt() / a.sqrt(),
            max_relative = 1e-13
        );
    }

    #[test]
    fn non_finite_scores_are_reported_with_step() {
        let s = sched(16);
        let bad = FnOracle::new(s, 1, |t, _: &[f64], out: &mut [f64]| {
            out[0] = if t == 9 { f64::NAN } else { 0.0 }
        });
        for spec in SamplerSpec::all() {
            match run_sampler(&spec, &bad, 3, 1) {
                Err(Error::ScoreBlowup { t }) => assert!(t == 9 || t == 8, "{spec}: t={t}"),
                other => panic!("{spec}: {other:?}"),
            }
        }
    }

    #[test]
    fn single_zero_score_step_from_given_start() {
        let s = flat(0.5, 2);
        let z = zero_oracle(s.clone(), 1);
        let b = run_sampler_from(&SamplerSpec::ddim_simple(), &z, &[v(&[1.25])], 0).unwrap();
        assert_relative_eq!(
            b.points[0][0],
            1.25 / s.alpha(2).sqrt(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn zero_oracle_rescales_by_abar_ratio() {
        let s = sched(64);
        let z = zero_oracle(s.clone(), 1);
        let start = v(&[0.9]);
        let expected = 0.9 * (s.alpha_bar(1) / s.alpha_bar(64)).sqrt();
        for spec in SamplerSpec::all() {
            let b = run_sampler_from(&spec, &z, std::slice::from_ref(&start), 0).unwrap();
            if !spec.is_stochastic() {
                assert!(
                    ((b.points[0][0] - expected) / expected).abs() <= 1e-12,
                    "{spec}"
                );
            }
        }
        for spec in [SamplerSpec::ddpm(), SamplerSpec::accel_sde()] {
            // deterministic part: the mean over many runs from the same start
            let starts = vec![start.clone(); 20_000];
            let b = run_sampler_from(&spec, &z, &starts, 5).unwrap();
            let mean = b.points.iter().map(|p| p[0]).sum::<f64>() / 20_000.0;
            let var: f64 = (2..=64)
                .map(|t| (1.0 - s.alpha(t)) / s.alpha(t) * s.alpha_bar(1) / s.alpha_bar(t - 1))
                .sum();
            assert!(
                (mean - expected).abs() <= 5.0 * (var / 20_000.0).sqrt(),
                "{spec}: {mean} vs {expected}"
            );
        }
    }

    #[test]
    fn nfe_accounting() {
        let s = sched(40);
        let mix = GaussianMixture::preset("bimodal_1d").unwrap();
        let specs: Vec<SamplerSpec> = SamplerSpec::all()
            .into_iter()
            .chain([SamplerSpec::accel_ode_extended()])
            .collect();
        for spec in specs {
            let (o, counter) = counting_oracle(exact_oracle(&mix, s.clone()).unwrap());
            let b = run_sampler(&spec, &o, 3, 1).unwrap();
            assert_eq!(counter.count(), 3 * spec.nfe_per_trajectory(40), "{spec}");
            assert_eq!(b.nfe_total, counter.count());
        }
        assert_eq!(SamplerSpec::ddim_eps().nfe_per_trajectory(40), 39);
        assert_eq!(
            SamplerSpec::accel_ode(OdeMode::Reuse).nfe_per_trajectory(40),
            39
        );
        assert_eq!(
            SamplerSpec::accel_ode(OdeMode::Midpoint).nfe_per_trajectory(40),
            2 * 39 - 1
        );
    }

    #[test]
    fn runs_are_reproducible() {
        let o = exact_oracle(&GaussianMixture::preset("grid4_2d").unwrap(), sched(24)).unwrap();
        for spec in SamplerSpec::all() {
            let a = run_sampler(&spec, &o, 1000, 77).unwrap();
            let b = run_sampler(&spec, &o, 1000, 77).unwrap();
            assert_eq!(a, b);
            let c = run_sampler(&spec, &o, 1000, 78).unwrap();
            assert_ne!(a.points, c.points);
            // prefix stability: trajectory i depends only on (seed, i)
            let short = run_sampler(&spec, &o, 10, 77).unwrap();
            assert_eq!(&a.points[..10], &short.points[..]);
        }
    }

    #[test]
    fn modes_agree_for_zero_eps_and_reuse_reduces_to_ddim_eps_for_constant_eps() {
        let s = sched(32);
        let starts: Vec<_> = (0..5).map(|i| v(&[i as f64 - 2.0])).collect();
        let z = zero_oracle(s.clone(), 1);
        let a =
            run_sampler_from(&SamplerSpec::accel_ode(OdeMode::Midpoint), &z, &starts, 0).unwrap();
        let b = run_sampler_from(&SamplerSpec::accel_ode(OdeMode::Reuse), &z, &starts, 0).unwrap();
        for (p, q) in a.points.iter().zip(&b.points) {
            assert!((p - q).amax() <= 1e-10);
        }

        // eps == 0.3: s_t = -0.3 / sqrt(1 - abar_t)
        let s2 = s.clone();
        let const_eps = FnOracle::new(s.clone(), 1, move |t, _: &[f64], out: &mut [f64]| {
            out[0] = -0.3 / (1.0 - s2.alpha_bar(t)).sqrt()
        });
        let r = run_sampler_from(
            &SamplerSpec::accel_ode(OdeMode::Reuse),
            &const_eps,
            &starts,
            0,
        )
        .unwrap();
        let d = run_sampler_from(&SamplerSpec::ddim_eps(), &const_eps, &starts, 0).unwrap();
        for (p, q) in r.points.iter().zip(&d.points) {
            assert!((p - q).amax() <= 1e-10);
        }
    }

    #[test]
    fn diagnostics_cover_every_step() {
        let o = exact_oracle(&GaussianMixture::preset("std_normal").unwrap(), sched(16)).unwrap();
        let b = run_sampler(&SamplerSpec::ddpm(), &o, 5000, 3).unwrap();
        let ts: Vec<usize> = b.diagnostics.iter().map(|d| d.t).collect();
        assert_eq!(ts, (1..=15).rev().collect::<Vec<_>>());
        // second moment follows v <- alpha v + (1 - alpha) / alpha from v_T = 1
        let mut var = 1.0;
        for d in &b.diagnostics {
            let a = o.schedule().alpha(d.t + 1);
            var = a * var + (1.0 - a) / a;
            assert!(
                (d.mean_sq_norm / var - 1.0).abs() < 0.1,
                "t={}: {} vs {var}",
                d.t,
                d.mean_sq_norm
            );
        }
    }

    #[test]
    fn csv_has_one_row_per_trajectory() {
        let o = exact_oracle(&GaussianMixture::preset("grid4_2d").unwrap(), sched(16)).unwrap();
        let b = run_sampler(&SamplerSpec::ddim_eps(), &o, 7, 3).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "traj_id,y_0,y_1");
        assert_eq!(lines.len(), 8);
        assert!(run_sampler(&SamplerSpec::ddim_eps(), &o, 0, 3).is_err());
    }
}
