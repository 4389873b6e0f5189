//! Score oracles consumed by the samplers.
//!
//! Every oracle exposes `s_t(x)`; the noise-prediction form
//! `eps_t(x) = -sqrt(1 - abar_t) s_t(x)` is derived once, in the trait.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::target::{forward_marginal, ForwardMarginal, GaussianMixture};
use crate::{Error, Result};

pub trait ScoreOracle: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn dim(&self) -> usize;

    /// Write `s_t(x)` into `out`. Valid steps are `1..=T+1`.
    fn score_into(&self, t: usize, x: &[f64], out: &mut [f64]) -> Result<()>;

    fn steps(&self) -> usize {
        self.schedule().steps()
    }

    fn score(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim());
        self.score_into(t, x.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }

    /// `eps_t(x) = -sqrt(1 - abar_t) s_t(x)`.
    fn eps_into(&self, t: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.score_into(t, x, out)?;
        let k = -(1.0 - self.schedule().alpha_bar(t)).sqrt();
        out.iter_mut().for_each(|v| *v *= k);
        Ok(())
    }

    fn eps(&self, t: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim());
        self.eps_into(t, x.as_slice(), out.as_mut_slice())?;
        Ok(out)
    }
}

macro_rules! forward_oracle {
    ($($ptr:ty),*) => {$(
        impl<O: ScoreOracle + ?Sized> ScoreOracle for $ptr {
            fn schedule(&self) -> &NoiseSchedule {
                (**self).schedule()
            }
            fn dim(&self) -> usize {
                (**self).dim()
            }
            fn score_into(&self, t: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
                (**self).score_into(t, x, out)
            }
        }
    )*};
}
forward_oracle!(&O, Box<O>, Arc<O>);

pub(crate) fn check_step(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    let max = schedule.steps() + 1;
    if t == 0 || t > max {
        return Err(Error::StepIndex { t, max });
    }
    Ok(())
}

/// Closed-form score of the forward marginals of a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct ExactOracle {
    schedule: Arc<NoiseSchedule>,
    mixture: GaussianMixture,
    // marginals[t - 1] for t = 1..=T+1
    marginals: Vec<ForwardMarginal>,
}

/// Exact oracle; step `T + 1` uses `abar_{T+1} = abar_T * alpha_ext`.
pub fn exact_oracle(mix: &GaussianMixture, schedule: Arc<NoiseSchedule>) -> Result<ExactOracle> {
    let marginals = (1..=schedule.steps() + 1)
        .map(|t| forward_marginal(mix, schedule.alpha_bar(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExactOracle {
        schedule,
        mixture: mix.clone(),
        marginals,
    })
}

impl ExactOracle {
    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn marginal(&self, t: usize) -> Result<&ForwardMarginal> {
        check_step(&self.schedule, t)?;
        Ok(&self.marginals[t - 1])
    }
}

impl ScoreOracle for ExactOracle {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn score_into(&self, t: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_step(&self.schedule, t)?;
        self.marginals[t - 1].score_into(x, out)
    }
}

/// Oracle backed by a closure `(t, x, out)`; handy for synthetic scores.
pub struct FnOracle<F> {
    schedule: Arc<NoiseSchedule>,
    dim: usize,
    f: F,
}

impl<F> FnOracle<F>
where
    F: Fn(usize, &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(schedule: Arc<NoiseSchedule>, dim: usize, f: F) -> Self {
        Self { schedule, dim, f }
    }
}

impl<F> ScoreOracle for FnOracle<F>
where
    F: Fn(usize, &[f64], &mut [f64]) + Send + Sync,
{
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, t: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_step(&self.schedule, t)?;
        (self.f)(t, x, out);
        Ok(())
    }
}

/// `s_t == 0`.
pub fn zero_oracle(
    schedule: Arc<NoiseSchedule>,
    dim: usize,
) -> FnOracle<impl Fn(usize, &[f64], &mut [f64]) + Send + Sync> {
    FnOracle::new(schedule, dim, |_, _, out: &mut [f64]| out.fill(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// `e_t(x) = m u`
    ConstantShift,
    /// `e_t(x) = m sin(<w, x>) u`
    SmoothField,
}

/// Deterministic score error of a given magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub magnitude: f64,
    pub mode: PerturbationMode,
    pub seed: u64,
}

pub struct PerturbedOracle<O> {
    base: O,
    spec: PerturbationSpec,
    direction: Vec<f64>,
    frequency: Vec<f64>,
}

fn random_unit(dim: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, index);
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| r.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

pub fn perturbed_oracle<O: ScoreOracle>(
    base: O,
    spec: PerturbationSpec,
) -> Result<PerturbedOracle<O>> {
    if !(spec.magnitude.is_finite() && spec.magnitude >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "perturbation magnitude {} must be finite and >= 0",
            spec.magnitude
        )));
    }
    let d = base.dim();
    Ok(PerturbedOracle {
        direction: random_unit(d, spec.seed, 0),
        frequency: random_unit(d, spec.seed, 1),
        base,
        spec,
    })
}

impl<O: ScoreOracle> PerturbedOracle<O> {
    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn base(&self) -> &O {
        &self.base
    }

    /// Scalar factor multiplying the direction at `x`.
    fn amplitude(&self, x: &[f64]) -> f64 {
        match self.spec.mode {
            PerturbationMode::ConstantShift => self.spec.magnitude,
            PerturbationMode::SmoothField => {
                let phase: f64 = self.frequency.iter().zip(x).map(|(w, v)| w * v).sum();
                self.spec.magnitude * phase.sin()
            }
        }
    }

    /// Root-mean-square of the injected error over `points`.
    pub fn realized_rms(&self, points: &[DVector<f64>]) -> f64 {
        let ms = points
            .iter()
            .map(|x| self.amplitude(x.as_slice()).powi(2))
            .sum::<f64>()
            / points.len() as f64;
        ms.sqrt()
    }
}

impl<O: ScoreOracle> ScoreOracle for PerturbedOracle<O> {
    fn schedule(&self) -> &NoiseSchedule {
        self.base.schedule()
    }

    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score_into(&self, t: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.base.score_into(t, x, out)?;
        let a = self.amplitude(x);
        for (o, u) in out.iter_mut().zip(&self.direction) {
            *o += a * u;
        }
        Ok(())
    }
}

/// Shared handle to the number of score evaluations.
#[derive(Debug, Clone, Default)]
pub struct NfeCounter(Arc<AtomicU64>);

impl NfeCounter {
    pub fn count(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::SeqCst);
    }
}

pub struct CountingOracle<O> {
    base: O,
    counter: NfeCounter,
}

/// Wrap `base` so that every evaluation (score or eps) bumps the counter.
pub fn counting_oracle<O: ScoreOracle>(base: O) -> (CountingOracle<O>, NfeCounter) {
    let counter = NfeCounter::default();
    (
        CountingOracle {
            base,
            counter: counter.clone(),
        },
        counter,
    )
}

impl<O: ScoreOracle> ScoreOracle for CountingOracle<O> {
    fn schedule(&self) -> &NoiseSchedule {
        self.base.schedule()
    }

    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn score_into(&self, t: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.counter.0.fetch_add(1, Ordering::SeqCst);
        self.base.score_into(t, x, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleParams};
    use crate::target::sample_forward;
    use rand::SeedableRng;

    fn sched(steps: usize) -> Arc<NoiseSchedule> {
        Arc::new(build_schedule(&ScheduleParams::with_defaults(steps).unwrap()).unwrap())
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn exact_std_normal_score_and_eps() {
        let s = sched(32);
        let o = exact_oracle(&GaussianMixture::preset("std_normal").unwrap(), s.clone()).unwrap();
        for t in [1, 7, 32, 33] {
            let x = v(&[1.3]);
            assert!((o.score(t, &x).unwrap()[0] + 1.3).abs() < 1e-15);
            let expected = (1.0 - s.alpha_bar(t)).sqrt() * 1.3;
            assert!((o.eps(t, &x).unwrap()[0] - expected).abs() < 1e-15);
        }
        assert!(matches!(
            o.score(0, &v(&[0.0])),
            Err(Error::StepIndex { .. })
        ));
        assert!(matches!(
            o.score(34, &v(&[0.0])),
            Err(Error::StepIndex { .. })
        ));
    }

    #[test]
    fn exact_bimodal_matches_finite_differences() {
        let s = sched(64);
        let t = (1..=64)
            .min_by(|&a, &b| {
                (s.alpha_bar(a) - 0.5)
                    .abs()
                    .total_cmp(&(s.alpha_bar(b) - 0.5).abs())
            })
            .unwrap();
        let o = exact_oracle(&GaussianMixture::preset("bimodal_1d").unwrap(), s.clone()).unwrap();
        let m = o.marginal(t).unwrap();
        for x in [-2.0, -0.4, 0.3, 1.1, 2.5] {
            let h = 1e-5;
            let fd = (m.log_density(&v(&[x + h])).unwrap() - m.log_density(&v(&[x - h])).unwrap())
                / (2.0 * h);
            let s = o.score(t, &v(&[x])).unwrap()[0];
            assert!(
                (fd - s).abs() <= 1e-6 * s.abs().max(1.0),
                "x={x}: {fd} vs {s}"
            );
        }
    }

    #[test]
    fn eps_relation_holds_for_every_oracle() {
        let s = sched(48);
        let mix = GaussianMixture::preset("grid4_2d").unwrap();
        let exact = exact_oracle(&mix, s.clone()).unwrap();
        let spec = PerturbationSpec {
            magnitude: 0.2,
            mode: PerturbationMode::SmoothField,
            seed: 4,
        };
        let perturbed = perturbed_oracle(&exact, spec).unwrap();
        let (counting, _) = counting_oracle(&perturbed);
        let oracles: [&dyn ScoreOracle; 3] = [&exact, &perturbed, &counting];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for o in oracles {
            for _ in 0..100 {
                let t = rng.random_range(1..=49);
                let x = v(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
                let lhs = o.eps(t, &x).unwrap();
                let rhs = o.score(t, &x).unwrap() * -(1.0 - s.alpha_bar(t)).sqrt();
                assert!((lhs - rhs).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_magnitude_is_transparent() {
        let s = sched(16);
        let exact = exact_oracle(&GaussianMixture::preset("bimodal_1d").unwrap(), s).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for mode in [
            PerturbationMode::ConstantShift,
            PerturbationMode::SmoothField,
        ] {
            let p = perturbed_oracle(
                &exact,
                PerturbationSpec {
                    magnitude: 0.0,
                    mode,
                    seed: 3,
                },
            )
            .unwrap();
            for _ in 0..100 {
                let t = rng.random_range(1..=16);
                let x = v(&[rng.random_range(-4.0..4.0)]);
                assert_eq!(p.score(t, &x).unwrap(), exact.score(t, &x).unwrap());
            }
        }
    }

    #[test]
    fn constant_shift_has_exact_magnitude() {
        let s = sched(16);
        let exact = exact_oracle(&GaussianMixture::preset("bimodal_1d").unwrap(), s).unwrap();
        let spec = PerturbationSpec {
            magnitude: 0.1,
            mode: PerturbationMode::ConstantShift,
            seed: 9,
        };
        let p = perturbed_oracle(&exact, spec).unwrap();
        for x in [-3.0, -0.1, 0.0, 2.2] {
            for t in [1, 8, 16] {
                let d = (p.score(t, &v(&[x])).unwrap() - exact.score(t, &v(&[x])).unwrap()).norm();
                assert!((d - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_field_rms_is_within_range() {
        let s = sched(64);
        let mix = GaussianMixture::preset("std_normal").unwrap();
        let exact = exact_oracle(&mix, s.clone()).unwrap();
        let spec = PerturbationSpec {
            magnitude: 0.1,
            mode: PerturbationMode::SmoothField,
            seed: 2,
        };
        let p = perturbed_oracle(&exact, spec).unwrap();
        let pts = sample_forward(&mix, s.alpha_bar(20), 100_000, 17).unwrap();
        let rms = p.realized_rms(&pts);
        assert!((0.05..=0.1).contains(&rms), "rms {rms}");
    }

    #[test]
    fn perturbations_are_seeded_and_repeatable() {
        let s = sched(16);
        let exact = exact_oracle(&GaussianMixture::preset("grid4_2d").unwrap(), s).unwrap();
        let mk = |seed| {
            perturbed_oracle(
                &exact,
                PerturbationSpec {
                    magnitude: 0.3,
                    mode: PerturbationMode::SmoothField,
                    seed,
                },
            )
            .unwrap()
        };
        let (a, b) = (mk(1), mk(2));
        let x = v(&[0.4, -0.2]);
        assert_ne!(a.score(5, &x).unwrap(), b.score(5, &x).unwrap());
        assert_eq!(a.score(5, &x).unwrap(), a.score(5, &x).unwrap());
        assert_eq!(a.score(5, &x).unwrap(), mk(1).score(5, &x).unwrap());
    }

    #[test]
    fn negative_magnitude_is_rejected() {
        let s = sched(16);
        let exact = exact_oracle(&GaussianMixture::preset("std_normal").unwrap(), s).unwrap();
        let spec = PerturbationSpec {
            magnitude: -1.0,
            mode: PerturbationMode::ConstantShift,
            seed: 0,
        };
        assert!(perturbed_oracle(&exact, spec).is_err());
    }

    #[test]
    fn counter_counts_both_forms() {
        let s = sched(16);
        let (o, n) = counting_oracle(zero_oracle(s, 1));
        assert_eq!(n.count(), 0);
        let x = v(&[1.0]);
        o.score(3, &x).unwrap();
        o.eps(4, &x).unwrap();
        assert_eq!(n.count(), 2);
        n.reset();
        assert_eq!(n.count(), 0);
    }

    #[test]
    fn perturbation_spec_json() {
        let spec: PerturbationSpec =
            serde_json::from_str(r#"{"magnitude": 0.01, "mode": "constant_shift", "seed": 5}"#)
                .unwrap();
        assert_eq!(spec.mode, PerturbationMode::ConstantShift);
        assert_eq!(spec.magnitude, 0.01);
    }
}
