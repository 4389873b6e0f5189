//! Error measurement and rate fitting.
//!
//! For a single-Gaussian target the exact score is affine, `s_t(x) = S_t x + c_t`,
//! so every sampler maps Gaussians to Gaussians and the law of `Y_1` can be
//! computed exactly. Mixture targets fall back on sample-based metrics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::oracle::{
    exact_oracle, perturbed_oracle, PerturbationMode, PerturbationSpec, ScoreOracle,
};
use crate::quadrature::integrate_with_breaks;
use crate::rng;
use crate::samplers::{
    ddim_eps_coefficient, momentum_coefficient, reuse_coefficient, Boundary, OdeMode, SamplerKind,
    SamplerSpec,
};
use crate::schedule::NoiseSchedule;
use crate::target::{forward_marginal, GaussianMixture};
use crate::{Error, Result};

/// Gaussian law `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl AffineLaw {
    /// Symmetrizes `cov` and clamps eigenvalues in `[-1e-12, 0)` to zero.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        if !cov.iter().all(|v| v.is_finite()) || !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite Gaussian parameters".into()));
        }
        let eig = cov.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min < -1e-12 {
            return Err(Error::InvalidInput(format!(
                "covariance has eigenvalue {min:e}"
            )));
        }
        let cov = if min < 0.0 {
            let clamped = eig.eigenvalues.map(|l| l.max(0.0));
            &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
        } else {
            cov
        };
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, var),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Law of `X_1` under the forward process: the distribution samplers aim for.
pub fn reference_law(target: &GaussianMixture, schedule: &NoiseSchedule) -> Result<AffineLaw> {
    single_gaussian(target)?;
    let m = forward_marginal(target, schedule.alpha_bar(1))?;
    AffineLaw::new(m.component_mean(0), m.component_cov(0).clone())
}

fn single_gaussian(target: &GaussianMixture) -> Result<()> {
    if !target.is_single_gaussian() {
        return Err(Error::NonAffine(format!(
            "target has {} components",
            target.components().len()
        )));
    }
    Ok(())
}

/// `s_t(x) = mat x + off`, recovered by probing an oracle.
struct AffineScore {
    mat: DMatrix<f64>,
    off: DVector<f64>,
}

fn probe<O: ScoreOracle + ?Sized>(o: &O, t: usize) -> Result<AffineScore> {
    let d = o.dim();
    let off = o.score(t, &DVector::zeros(d))?;
    let mut mat = DMatrix::zeros(d, d);
    for i in 0..d {
        let col = o.score(
            t,
            &DVector::from_fn(d, |j, _| if i == j { 1.0 } else { 0.0 }),
        )? - &off;
        mat.set_column(i, &col);
    }
    // one off-lattice point to confirm the score really is affine
    let x = DVector::from_fn(
        d,
        |i, _| if i % 2 == 0 { 0.73 } else { -1.31 } * (i + 1) as f64,
    );
    let direct = o.score(t, &x)?;
    let predicted = &mat * &x + &off;
    let scale = direct.amax().max(1.0);
    if (&direct - &predicted).amax() > 1e-8 * scale {
        return Err(Error::NonAffine(format!(
            "oracle score at step {t} is not affine in x"
        )));
    }
    if !mat.iter().chain(off.iter()).all(|v| v.is_finite()) {
        return Err(Error::ScoreBlowup { t });
    }
    Ok(AffineScore { mat, off })
}

/// `y -> lin y + shift`.
struct StepMap {
    lin: DMatrix<f64>,
    shift: DVector<f64>,
}

fn ddim_simple_map(sched: &NoiseSchedule, t: usize, s: &AffineScore) -> StepMap {
    let d = s.off.len();
    let a = sched.alpha(t);
    let k = 0.5 * (1.0 - a);
    StepMap {
        lin: (DMatrix::identity(d, d) + &s.mat * k) / a.sqrt(),
        shift: &s.off * (k / a.sqrt()),
    }
}

fn ddim_eps_map(sched: &NoiseSchedule, t: usize, s: &AffineScore) -> StepMap {
    let d = s.off.len();
    let a = sched.alpha(t);
    // eps = -sigma (S y + c)
    let k = -ddim_eps_coefficient(sched, t) * (1.0 - sched.alpha_bar(t)).sqrt();
    StepMap {
        lin: DMatrix::identity(d, d) / a.sqrt() + &s.mat * k,
        shift: &s.off * k,
    }
}

/// DDPM mean map; the injected noise has covariance `(1 - a) / a I`.
fn ddpm_map(sched: &NoiseSchedule, t: usize, s: &AffineScore) -> StepMap {
    let d = s.off.len();
    let a = sched.alpha(t);
    StepMap {
        lin: (DMatrix::identity(d, d) + &s.mat * (1.0 - a)) / a.sqrt(),
        shift: &s.off * ((1.0 - a) / a.sqrt()),
    }
}

fn midpoint_map(
    sched: &NoiseSchedule,
    t: usize,
    s: &AffineScore,
    s_next: &AffineScore,
) -> Result<StepMap> {
    let d = s.off.len();
    let id = DMatrix::<f64>::identity(d, d);
    let (a, an) = (sched.alpha(t), sched.alpha(t + 1));
    let m = momentum_coefficient(a, an, t)?;
    let san = an.sqrt();
    // predicted point y- = P y + p
    let p_lin = (&id - &s.mat * (0.5 * (1.0 - an))) * san;
    let p_shift = &s.off * (-0.5 * (1.0 - an) * san);
    // s_{t+1}(y-) = Sn P y + Sn p + cn
    let sn_lin = &s_next.mat * &p_lin;
    let sn_shift = &s_next.mat * &p_shift + &s_next.off;
    let inv = 1.0 / a.sqrt();
    let lin = (&id + &s.mat * (0.5 * (1.0 - a) + m) - sn_lin * (m * san)) * inv;
    let shift = (&s.off * (0.5 * (1.0 - a) + m) - sn_shift * (m * san)) * inv;
    Ok(StepMap { lin, shift })
}

/// Deterministic iterate `Y = A xi + b` with `xi ~ N(0, I)` the starting draw.
#[derive(Clone)]
struct Pushforward {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Pushforward {
    fn apply(&self, m: &StepMap) -> Self {
        Self {
            a: &m.lin * &self.a,
            b: &m.lin * &self.b + &m.shift,
        }
    }

    fn law(&self) -> Result<AffineLaw> {
        AffineLaw::new(self.b.clone(), &self.a * self.a.transpose())
    }
}

/// Exact law of `Y_1` for `spec` driven by the exact score of a single-Gaussian target.
pub fn propagate_affine(
    spec: &SamplerSpec,
    target: &GaussianMixture,
    schedule: Arc<NoiseSchedule>,
) -> Result<AffineLaw> {
    single_gaussian(target)?;
    let o = exact_oracle(target, schedule)?;
    propagate_affine_oracle(spec, &o)
}

/// Exact law of `Y_1` for any oracle whose score is affine in `x`.
pub fn propagate_affine_oracle<O: ScoreOracle + ?Sized>(
    spec: &SamplerSpec,
    oracle: &O,
) -> Result<AffineLaw> {
    propagate_affine_steps(spec, oracle, 1)
}

/// Exact law of `Y_{stop_at}`, `1 <= stop_at <= T`; `stop_at = T` is the initial `N(0, I)`.
pub fn propagate_affine_steps<O: ScoreOracle + ?Sized>(
    spec: &SamplerSpec,
    oracle: &O,
    stop_at: usize,
) -> Result<AffineLaw> {
    let sched = oracle.schedule();
    let steps = sched.steps();
    if stop_at == 0 || stop_at > steps {
        return Err(Error::StepIndex {
            t: stop_at,
            max: steps,
        });
    }
    let d = oracle.dim();
    let sweep = (stop_at + 1..=steps).rev();
    if spec.is_stochastic() {
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::identity(d, d);
        for t in sweep {
            let a = sched.alpha(t);
            let s = probe(oracle, t)?;
            let map = ddpm_map(sched, t, &s);
            if spec.kind() == SamplerKind::AccelSde {
                // pre-noise of variance (1 - a) / 2 before the score evaluation
                let h = 0.5 * (1.0 - a);
                for i in 0..d {
                    cov[(i, i)] += h;
                }
                cov = &map.lin * cov * map.lin.transpose();
                for i in 0..d {
                    cov[(i, i)] += h / a;
                }
            } else {
                cov = &map.lin * cov * map.lin.transpose();
                for i in 0..d {
                    cov[(i, i)] += (1.0 - a) / a;
                }
            }
            mean = &map.lin * mean + map.shift;
        }
        return AffineLaw::new(mean, cov);
    }

    let mut y = Pushforward {
        a: DMatrix::identity(d, d),
        b: DVector::zeros(d),
    };
    // reuse mode needs the previous iterate to rebuild the cached eps
    let mut prev: Option<(Pushforward, AffineScore, usize)> = None;
    for t in sweep {
        let s = probe(oracle, t)?;
        let next = match (spec.kind(), spec.ode_mode()) {
            (SamplerKind::DdimSimple, _) => y.apply(&ddim_simple_map(sched, t, &s)),
            (SamplerKind::DdimEps, _) => y.apply(&ddim_eps_map(sched, t, &s)),
            (SamplerKind::AccelOde, Some(OdeMode::Reuse)) => match &prev {
                None => y.apply(&ddim_eps_map(sched, t, &s)),
                Some((py, ps, pt)) => {
                    let big_c = reuse_coefficient(sched, t)?;
                    let base = y.apply(&ddim_eps_map(sched, t, &s));
                    // + C (eps_{t+1}(Y_{t+1}) - eps_t(Y_t)), eps = -sigma (S y + c)
                    let sig_t = (1.0 - sched.alpha_bar(t)).sqrt();
                    let sig_n = (1.0 - sched.alpha_bar(*pt)).sqrt();
                    let a = base.a + (&s.mat * &y.a * sig_t - &ps.mat * &py.a * sig_n) * big_c;
                    let b = base.b
                        + ((&s.mat * &y.b + &s.off) * sig_t - (&ps.mat * &py.b + &ps.off) * sig_n)
                            * big_c;
                    Pushforward { a, b }
                }
            },
            (SamplerKind::AccelOde, _) => {
                if t == steps && spec.boundary() == Boundary::FirstOrder {
                    y.apply(&ddim_simple_map(sched, t, &s))
                } else {
                    let sn = probe(oracle, t + 1)?;
                    y.apply(&midpoint_map(sched, t, &s, &sn)?)
                }
            }
            (SamplerKind::Ddpm | SamplerKind::AccelSde, _) => unreachable!("handled above"),
        };
        prev = Some((y, s, t));
        y = next;
    }
    y.law()
}

/// `TV(N(a), N(b))` for one-dimensional laws, by quadrature of `|phi_a - phi_b| / 2`.
pub fn tv_gaussian_1d(a: &AffineLaw, b: &AffineLaw) -> Result<f64> {
    let (ma, va) = scalar_parts(a)?;
    let (mb, vb) = scalar_parts(b)?;
    if ma == mb && va == vb {
        return Ok(0.0);
    }
    let (sa, sb) = (va.sqrt(), vb.sqrt());
    let lo = (ma - 12.0 * sa).min(mb - 12.0 * sb);
    let hi = (ma + 12.0 * sa).max(mb + 12.0 * sb);
    let mut breaks = vec![lo];
    breaks.extend(
        density_crossings(ma, va, mb, vb)
            .into_iter()
            .filter(|x| *x > lo && *x < hi),
    );
    breaks.push(hi);
    breaks.sort_by(f64::total_cmp);
    let pdf = |x: f64, m: f64, s: f64| {
        (-0.5 * ((x - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    };
    let q = integrate_with_breaks(
        |x| (pdf(x, ma, sa) - pdf(x, mb, sb)).abs(),
        &breaks,
        1e-13,
        1e-10,
    );
    Ok((0.5 * q.value).clamp(0.0, 1.0))
}

fn scalar_parts(l: &AffineLaw) -> Result<(f64, f64)> {
    if l.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: l.dim(),
        });
    }
    let v = l.cov[(0, 0)];
    if v.is_nan() || v <= 0.0 {
        return Err(Error::InvalidInput("TV needs positive variances".into()));
    }
    Ok((l.mean[0], v))
}

/// Points where two normal densities are equal.
fn density_crossings(ma: f64, va: f64, mb: f64, vb: f64) -> Vec<f64> {
    // log phi_a - log phi_b = A x^2 + B x + C
    let qa = 0.5 / vb - 0.5 / va;
    let qb = ma / va - mb / vb;
    let qc = 0.5 * mb * mb / vb - 0.5 * ma * ma / va + 0.5 * (vb / va).ln();
    if qa.abs() < 1e-300 {
        return if qb != 0.0 { vec![-qc / qb] } else { vec![] };
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return vec![];
    }
    // cancellation-free roots
    let r = -0.5 * (qb + qb.signum().max(0.0).mul_add(2.0, -1.0) * disc.sqrt());
    let mut roots = vec![r / qa];
    if r != 0.0 {
        roots.push(qc / r);
    }
    roots
}

/// `KL(N(a) || N(b))`; `+inf` when `a` is singular and `b` is not.
pub fn kl_gaussian(a: &AffineLaw, b: &AffineLaw) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: b.dim(),
        });
    }
    let chol = b
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("KL reference covariance is singular".into()))?;
    let l = chol.l();
    let diff = &b.mean - &a.mean;
    let z = l
        .solve_lower_triangular(&diff)
        .expect("cholesky factor is invertible");
    // whitened covariance L^-1 Sa L^-T; its eigenvalues carry the trace and log-det terms
    let w = l
        .solve_lower_triangular(&a.cov)
        .expect("cholesky factor is invertible");
    let w = l
        .solve_lower_triangular(&w.transpose())
        .expect("cholesky factor is invertible");
    let w = (&w + w.transpose()) * 0.5;
    let mut total = z.norm_squared();
    for lam in w.symmetric_eigenvalues().iter() {
        if *lam <= 0.0 {
            return Ok(f64::INFINITY);
        }
        // lam - 1 - ln lam without cancellation near lam = 1
        total += (lam - 1.0) - (lam - 1.0).ln_1p();
    }
    Ok((0.5 * total).max(0.0))
}

/// Sliced Wasserstein-1 estimate with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlicedW1 {
    pub value: f64,
    pub std_error: f64,
    pub directions: usize,
}

/// Mean over random unit directions of the 1D Wasserstein-1 distance between
/// the projected samples. `d = 1` uses the single identity direction.
pub fn sliced_w1(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    n_directions: usize,
    seed: u64,
) -> Result<f64> {
    Ok(sliced_w1_with_se(a, b, n_directions, seed)?.value)
}

pub fn sliced_w1_with_se(
    a: &[DVector<f64>],
    b: &[DVector<f64>],
    n_directions: usize,
    seed: u64,
) -> Result<SlicedW1> {
    let d = check_samples(a, b)?;
    if n_directions == 0 {
        return Err(Error::InvalidInput(
            "n_directions must be at least 1".into(),
        ));
    }
    let dirs: Vec<Vec<f64>> = if d == 1 {
        vec![vec![1.0]]
    } else {
        (0..n_directions as u64)
            .map(|k| {
                let mut r = rng::stream(seed, k);
                loop {
                    let v: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 1e-8 {
                        break v.into_iter().map(|x| x / n).collect();
                    }
                }
            })
            .collect()
    };
    let project = |s: &[DVector<f64>], u: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = s
            .iter()
            .map(|x| x.iter().zip(u).map(|(v, w)| v * w).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let (mut value, mut se) = (0.0, 0.0);
    for u in &dirs {
        let (w, e) = w1_sorted(&project(a, u), &project(b, u));
        value += w;
        se += e;
    }
    let k = dirs.len() as f64;
    // the average of the per-direction errors bounds the error of the average
    Ok(SlicedW1 {
        value: value / k,
        std_error: se / k,
        directions: dirs.len(),
    })
}

fn check_samples(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("empty sample set".into()));
    }
    let d = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    Ok(d)
}

/// W1 between two sorted samples and its delta-method standard error.
///
/// `W1 = int |F_a - F_b| dx`. Its influence function for a point `x` drawn
/// from `a` is `int_x^inf sgn(F_a - F_b) du` up to a constant, and likewise
/// with opposite sign for `b`; the error adds the two sample variances.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len(), b.len());
    let (fa, fb) = (1.0 / na as f64, 1.0 / nb as f64);
    // merged walk: x_k with the two empirical CDFs just after x_k
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(na + nb);
    let (mut i, mut j) = (0, 0);
    while i < na || j < nb {
        let x = if j >= nb || (i < na && a[i] <= b[j]) {
            i += 1;
            a[i - 1]
        } else {
            j += 1;
            b[j - 1]
        };
        pts.push((x, i as f64 * fa - j as f64 * fb));
    }
    let mut w1 = 0.0;
    // tail[k] = int_{x_k}^inf sgn(F_a - F_b) du
    let mut tail = vec![0.0; pts.len()];
    for k in (0..pts.len() - 1).rev() {
        let width = pts[k + 1].0 - pts[k].0;
        let gap = pts[k].1;
        w1 += gap.abs() * width;
        tail[k] = tail[k + 1] + gap.signum() * width * (gap.abs() > 1e-15) as u8 as f64;
    }
    let lookup = |x: f64| -> f64 {
        let k = pts.partition_point(|p| p.0 < x);
        tail[k.min(pts.len() - 1)]
    };
    let var = |s: &[f64]| -> f64 {
        let n = s.len() as f64;
        let vals: Vec<f64> = s.iter().map(|&x| lookup(x)).collect();
        let m = vals.iter().sum::<f64>() / n;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
    };
    let se = (var(a) / na as f64 + var(b) / nb as f64).sqrt();
    (w1, se)
}

/// Half the L1 distance between normalized histograms on a shared bounding box.
pub fn histogram_tv(a: &[DVector<f64>], b: &[DVector<f64>], bins: usize) -> Result<f64> {
    let d = check_samples(a, b)?;
    if d > 2 {
        return Err(Error::InvalidInput(format!(
            "histogram TV supports d <= 2, got {d}"
        )));
    }
    if bins < 16 {
        return Err(Error::InvalidInput(format!(
            "need at least 16 bins per axis, got {bins}"
        )));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for x in a.iter().chain(b) {
        for i in 0..d {
            lo[i] = lo[i].min(x[i]);
            hi[i] = hi[i].max(x[i]);
        }
    }
    let cell = |x: &DVector<f64>| -> usize {
        (0..d).fold(0, |acc, i| {
            let w = hi[i] - lo[i];
            let k = if w > 0.0 {
                (((x[i] - lo[i]) / w) * bins as f64) as usize
            } else {
                0
            };
            acc * bins + k.min(bins - 1)
        })
    };
    let mut h = vec![0.0; bins.pow(d as u32)];
    let (wa, wb) = (1.0 / a.len() as f64, 1.0 / b.len() as f64);
    a.iter().for_each(|x| h[cell(x)] += wa);
    b.iter().for_each(|x| h[cell(x)] -= wb);
    Ok((0.5 * h.iter().map(|v| v.abs()).sum::<f64>()).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput(
            "linear fit needs two or more paired points".into(),
        ));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Points dropped by [`fit_rate_filtered`].
    pub excluded: Vec<(usize, f64)>,
}

/// Fit `log error = slope log T + intercept`.
pub fn fit_rate(points: &[(usize, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "rate fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some((t, e)) = points.iter().find(|(_, e)| !(*e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "error {e} at T = {t} must be positive and finite"
        )));
    }
    if points.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidInput(
            "T values must be strictly increasing".into(),
        ));
    }
    let x: Vec<f64> = points.iter().map(|(t, _)| (*t as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|(_, e)| e.ln()).collect();
    let f = linear_fit(&x, &y)?;
    Ok(RateFit {
        points: points.to_vec(),
        slope: f.slope,
        intercept: f.intercept,
        r2: f.r2,
        excluded: vec![],
    })
}

/// Errors at or below this are treated as floating-point noise.
pub const ERROR_FLOOR: f64 = 1e-13;

/// [`fit_rate`] after dropping points whose error is below [`ERROR_FLOOR`].
pub fn fit_rate_filtered(points: &[(usize, f64)]) -> Result<RateFit> {
    let (kept, excluded): (Vec<_>, Vec<_>) = points.iter().partition(|(_, e)| *e >= ERROR_FLOOR);
    let mut fit = fit_rate(&kept)?;
    fit.excluded = excluded;
    Ok(fit)
}

/// Distance of an exactly propagated law from the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactError {
    /// Only defined for `d = 1`.
    pub tv: Option<f64>,
    pub kl: f64,
}

/// TV and `KL(q_1 || p_1)` between the reference law and a sampler's output law.
pub fn exact_error(output: &AffineLaw, reference: &AffineLaw) -> Result<ExactError> {
    let tv = if reference.dim() == 1 {
        Some(tv_gaussian_1d(reference, output)?)
    } else {
        None
    };
    Ok(ExactError {
        tv,
        kl: kl_gaussian(reference, output)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityPoint {
    pub magnitude: f64,
    pub error: ExactError,
}

/// Propagate `spec` with a constant score shift of each magnitude and measure
/// the distance to the target. Magnitudes must be nonnegative and ascending.
pub fn stability_sweep(
    spec: &SamplerSpec,
    target: &GaussianMixture,
    schedule: Arc<NoiseSchedule>,
    magnitudes: &[f64],
    seed: u64,
) -> Result<Vec<StabilityPoint>> {
    if magnitudes.is_empty() {
        return Err(Error::InvalidInput("no magnitudes given".into()));
    }
    if magnitudes.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
        return Err(Error::InvalidInput(
            "magnitudes must be finite and nonnegative".into(),
        ));
    }
    if magnitudes.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput(
            "magnitudes must be sorted ascending".into(),
        ));
    }
    single_gaussian(target)?;
    let reference = reference_law(target, &schedule)?;
    let base = exact_oracle(target, schedule)?;
    magnitudes
        .iter()
        .map(|&magnitude| {
            let o = perturbed_oracle(
                &base,
                PerturbationSpec {
                    magnitude,
                    mode: PerturbationMode::ConstantShift,
                    seed,
                },
            )?;
            let law = propagate_affine_oracle(spec, &o)?;
            Ok(StabilityPoint {
                magnitude,
                error: exact_error(&law, &reference)?,
            })
        })
        .collect()
}
