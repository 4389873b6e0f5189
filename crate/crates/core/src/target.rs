//! Gaussian-mixture targets and their forward marginals.
//!
//! Under the forward process `X_t = sqrt(abar_t) X_0 + sqrt(1 - abar_t) W`, a
//! mixture component `N(mu, Sigma)` becomes `N(sqrt(abar) mu, abar Sigma +
//! (1 - abar) I)` with unchanged weight, so densities, scores and score
//! Jacobians of every marginal are available in closed form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

pub const MAX_DIM: usize = 8;
pub const MAX_COMPONENTS: usize = 16;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Component {
    pub fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { weight, mean, cov }
    }

    /// Isotropic component `N(mean, var * I)`.
    pub fn isotropic(weight: f64, mean: &[f64], var: f64) -> Self {
        let d = mean.len();
        Self::new(
            weight,
            DVector::from_column_slice(mean),
            DMatrix::identity(d, d) * var,
        )
    }
}

/// Mixture `sum_k w_k N(mu_k, Sigma_k)`. Point masses (`Sigma_k = 0`) are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    // symmetric square roots of the covariances, for sampling
    roots: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidMixture("no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidMixture(format!(
                "dimension {dim} outside 1..={MAX_DIM}"
            )));
        }
        if components.len() > MAX_COMPONENTS {
            return Err(Error::InvalidMixture(format!(
                "{} components exceeds {MAX_COMPONENTS}",
                components.len()
            )));
        }
        let mut total = 0.0;
        let mut roots = Vec::with_capacity(components.len());
        for (k, c) in components.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidMixture(format!(
                    "weight {} of component {k} outside (0, 1]",
                    c.weight
                )));
            }
            total += c.weight;
            if c.mean.len() != dim || c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {k} has inconsistent dimensions"
                )));
            }
            if c.mean.iter().chain(c.cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!(
                    "component {k} has non-finite entries"
                )));
            }
            let scale = c.cov.amax().max(1.0);
            if (&c.cov - c.cov.transpose()).amax() > 1e-12 * scale {
                return Err(Error::InvalidMixture(format!(
                    "covariance of component {k} is not symmetric"
                )));
            }
            let eig = SymmetricEigen::new(c.cov.clone());
            if eig.eigenvalues.min() < -1e-12 * scale {
                return Err(Error::InvalidMixture(format!(
                    "covariance of component {k} is not PSD"
                )));
            }
            let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
            roots.push(
                &eig.eigenvectors
                    * DMatrix::from_diagonal(&sqrt_vals)
                    * eig.eigenvectors.transpose(),
            );
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            dim,
            components,
            roots,
        })
    }

    /// Built-in targets: `std_normal`, `bimodal_1d` (equal weights at +-2 with
    /// sigma 0.25), `grid4_2d` (four correlated components at (+-1, +-1)) and
    /// `shifted_1d` (`N(1.5, 0.25)`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "std_normal" => Self::standard_normal(1),
            "bimodal_1d" => Self::new(vec![
                Component::isotropic(0.5, &[-2.0], 0.0625),
                Component::isotropic(0.5, &[2.0], 0.0625),
            ]),
            "grid4_2d" => {
                let cov = DMatrix::from_row_slice(2, 2, &[0.08, 0.02, 0.02, 0.05]);
                Self::new(
                    [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]]
                        .iter()
                        .map(|m| Component::new(0.25, DVector::from_column_slice(m), cov.clone()))
                        .collect(),
                )
            }
            "shifted_1d" => Self::new(vec![Component::isotropic(1.0, &[1.5], 0.25)]),
            other => Err(Error::Config(format!("unknown target preset '{other}'"))),
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["std_normal", "bimodal_1d", "grid4_2d", "shifted_1d"]
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::new(vec![Component::isotropic(1.0, &vec![0.0; dim], 1.0)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn is_single_gaussian(&self) -> bool {
        self.components.len() == 1
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MixtureJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<MixtureJson>(s)?.try_into()
    }

    /// One draw from component `k` plus the forward noise.
    fn draw<R: Rng>(&self, abar: f64, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let z = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x0 = &self.components[k].mean + &self.roots[k] * z;
        if abar == 1.0 {
            return x0;
        }
        let w = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        x0 * abar.sqrt() + w * (1.0 - abar).sqrt()
    }
}

/// JSON layout `{"d": .., "components": [{"weight", "mean", "cov"}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureJson {
    pub d: usize,
    pub components: Vec<ComponentJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentJson {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl From<&GaussianMixture> for MixtureJson {
    fn from(m: &GaussianMixture) -> Self {
        Self {
            d: m.dim,
            components: m
                .components
                .iter()
                .map(|c| ComponentJson {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    cov: c
                        .cov
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MixtureJson> for GaussianMixture {
    type Error = Error;

    fn try_from(j: MixtureJson) -> Result<Self> {
        let d = j.d;
        let comps = j
            .components
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                if c.mean.len() != d || c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidMixture(format!(
                        "component {k} does not match d = {d}"
                    )));
                }
                let flat: Vec<f64> = c.cov.into_iter().flatten().collect();
                Ok(Component::new(
                    c.weight,
                    DVector::from_vec(c.mean),
                    DMatrix::from_row_slice(d, d, &flat),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(comps)
    }
}

#[derive(Debug, Clone)]
struct MarginalComponent {
    log_weight: f64,
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    /// Row-major inverse covariance and `-0.5 (log det + d log 2 pi)`;
    /// `None` when the covariance is singular.
    precision: Option<(Vec<f64>, f64)>,
}

/// Law of `X_t` for a given `abar_t`.
#[derive(Debug, Clone)]
pub struct ForwardMarginal {
    abar: f64,
    dim: usize,
    weights: Vec<f64>,
    comps: Vec<MarginalComponent>,
}

/// Marginal of the forward process at signal level `abar`.
pub fn forward_marginal(mix: &GaussianMixture, abar: f64) -> Result<ForwardMarginal> {
    if !(abar > 0.0 && abar <= 1.0) {
        return Err(Error::AbarDomain(abar));
    }
    let d = mix.dim;
    let sa = abar.sqrt();
    let comps = mix
        .components
        .iter()
        .map(|c| {
            let mean: Vec<f64> = c.mean.iter().map(|m| sa * m).collect();
            let mut cov = &c.cov * abar;
            for i in 0..d {
                cov[(i, i)] += 1.0 - abar;
            }
            let precision = cov.clone().cholesky().and_then(|ch| {
                let log_det = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let inv = ch.inverse();
                // symmetrize to keep the Jacobian exactly symmetric
                let inv = (&inv + inv.transpose()) * 0.5;
                let flat: Vec<f64> = inv.transpose().iter().copied().collect();
                let ln = -0.5 * (log_det + d as f64 * LN_2PI);
                ln.is_finite().then_some((flat, ln))
            });
            MarginalComponent {
                log_weight: c.weight.ln(),
                mean,
                cov,
                precision,
            }
        })
        .collect();
    Ok(ForwardMarginal {
        abar,
        dim: d,
        weights: mix.components.iter().map(|c| c.weight).collect(),
        comps,
    })
}

impl ForwardMarginal {
    pub fn abar(&self) -> f64 {
        self.abar
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn component_mean(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.comps[k].mean)
    }

    pub fn component_cov(&self, k: usize) -> &DMatrix<f64> {
        &self.comps[k].cov
    }

    /// The marginal as a mixture in its own right.
    pub fn to_mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::new(
            self.comps
                .iter()
                .zip(&self.weights)
                .map(|(c, &w)| {
                    Component::new(w, DVector::from_column_slice(&c.mean), c.cov.clone())
                })
                .collect(),
        )
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Per-component log joint `log w_k + log N(x; m_k, C_k)` and component
    /// scores `-C_k^{-1} (x - m_k)` written into `scores[k * d..]`.
    fn component_terms(&self, x: &[f64], logp: &mut [f64], scores: &mut [f64]) -> Result<()> {
        let d = self.dim;
        let mut diff = [0.0; MAX_DIM];
        for (k, c) in self.comps.iter().enumerate() {
            let (prec, ln_norm) = c
                .precision
                .as_ref()
                .ok_or(Error::DegenerateMarginal { component: k })?;
            for i in 0..d {
                diff[i] = x[i] - c.mean[i];
            }
            let mut maha = 0.0;
            for i in 0..d {
                let row = &prec[i * d..(i + 1) * d];
                let pd: f64 = row.iter().zip(&diff[..d]).map(|(p, v)| p * v).sum();
                scores[k * d + i] = -pd;
                maha += diff[i] * pd;
            }
            logp[k] = c.log_weight + ln_norm - 0.5 * maha;
        }
        Ok(())
    }

    /// `log q(x)`, via log-sum-exp over components.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x.as_slice())?;
        let n = self.comps.len();
        let mut logp = [0.0; MAX_COMPONENTS];
        let mut scores = [0.0; MAX_COMPONENTS * MAX_DIM];
        self.component_terms(x.as_slice(), &mut logp[..n], &mut scores)?;
        Ok(log_sum_exp(&logp[..n]))
    }

    /// Closed-form score into `out`; allocation-free hot path for samplers.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_dim(x)?;
        let d = self.dim;
        let n = self.comps.len();
        let mut logp = [0.0; MAX_COMPONENTS];
        let mut scores = [0.0; MAX_COMPONENTS * MAX_DIM];
        self.component_terms(x, &mut logp[..n], &mut scores)?;
        let resp = responsibilities(&mut logp[..n]);
        out[..d].fill(0.0);
        for k in 0..n {
            for i in 0..d {
                out[i] += resp[k] * scores[k * d + i];
            }
        }
        Ok(())
    }

    /// `grad log q(x)`.
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        self.score_into(x.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }

    /// Hessian of `log q` at `x` (Jacobian of the score); symmetric.
    pub fn score_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(x.as_slice())?;
        let d = self.dim;
        let n = self.comps.len();
        let mut logp = [0.0; MAX_COMPONENTS];
        let mut scores = [0.0; MAX_COMPONENTS * MAX_DIM];
        self.component_terms(x.as_slice(), &mut logp[..n], &mut scores)?;
        let resp = responsibilities(&mut logp[..n]);
        let mut mean_score = DVector::<f64>::zeros(d);
        let mut jac = DMatrix::<f64>::zeros(d, d);
        for k in 0..n {
            let sk = DVector::from_column_slice(&scores[k * d..(k + 1) * d]);
            let (prec, _) = self.comps[k].precision.as_ref().unwrap();
            let p = DMatrix::from_row_slice(d, d, prec);
            jac += (&sk * sk.transpose() - p) * resp[k];
            mean_score += sk * resp[k];
        }
        jac -= &mean_score * mean_score.transpose();
        Ok((&jac + jac.transpose()) * 0.5)
    }
}

/// In-place softmax of log weights (max-subtracted).
fn responsibilities(logp: &mut [f64]) -> &[f64] {
    let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in logp.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in logp.iter_mut() {
        *v /= total;
    }
    logp
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_density(m: &ForwardMarginal, x: &DVector<f64>) -> Result<f64> {
    m.log_density(x)
}

pub fn exact_score(m: &ForwardMarginal, x: &DVector<f64>) -> Result<DVector<f64>> {
    m.score(x)
}

pub fn exact_score_jacobian(m: &ForwardMarginal, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    m.score_jacobian(x)
}

/// `n` i.i.d. draws of `sqrt(abar) X_0 + sqrt(1 - abar) W`; draw `i` uses its
/// own counter-based stream, so results do not depend on the thread count.
pub fn sample_forward(
    mix: &GaussianMixture,
    abar: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if !(abar > 0.0 && abar <= 1.0) {
        return Err(Error::AbarDomain(abar));
    }
    if n == 0 {
        return Err(Error::InvalidInput(
            "sample count must be at least 1".into(),
        ));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| mix.draw(abar, &mut rng::stream(seed, i as u64)))
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct MmseCheck {
    pub analytic: Vec<f64>,
    pub mc: Vec<f64>,
    /// `|mc - analytic| / max(|analytic|, 1 / sqrt(1 - abar_t))`.
    pub rel_err: f64,
    pub effective_sample_size: f64,
    pub low_ess: bool,
}

/// Monte Carlo check of the posterior-mean identity
/// `s_t(x) = -E[x - sqrt(abar_t) X_0 | X_t = x] / (1 - abar_t)`, with `X_0`
/// drawn from the target and weighted by the Gaussian transition kernel.
pub fn mmse_score_check(
    mix: &GaussianMixture,
    schedule: &NoiseSchedule,
    t: usize,
    x: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<MmseCheck> {
    let steps = schedule.steps();
    if !(1..=steps).contains(&t) {
        return Err(Error::StepIndex { t, max: steps });
    }
    if n == 0 {
        return Err(Error::InvalidInput(
            "mmse check needs at least one draw".into(),
        ));
    }
    if x.len() != mix.dim() {
        return Err(Error::DimensionMismatch {
            expected: mix.dim(),
            got: x.len(),
        });
    }
    let abar = schedule.alpha_bar(t);
    let sa = abar.sqrt();
    let var = 1.0 - abar;
    let draws = sample_forward(mix, 1.0, n, seed)?;
    let residuals: Vec<DVector<f64>> = draws.iter().map(|x0| x - x0 * sa).collect();
    let logw: Vec<f64> = residuals
        .iter()
        .map(|r| -r.norm_squared() / (2.0 * var))
        .collect();
    let lse = log_sum_exp(&logw);
    let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let mut post = DVector::zeros(mix.dim());
    for (wi, r) in w.iter().zip(&residuals) {
        post += r * *wi;
    }
    let mc = post * (-1.0 / var);
    let analytic = forward_marginal(mix, abar)?.score(x)?;
    let scale = analytic.norm().max(1.0 / var.sqrt());
    let rel_err = (&mc - &analytic).norm() / scale;
    Ok(MmseCheck {
        analytic: analytic.iter().copied().collect(),
        mc: mc.iter().copied().collect(),
        rel_err,
        effective_sample_size: ess,
        low_ess: ess < 100.0,
    })
}
