//! Two-phase step-size schedule.
//!
//! `beta_1 = T^{-c0}` and, for `t > 1`,
//! `beta_t = (c1 log T / T) * min(beta_1 (1 + c1 log T / T)^t, 1)`:
//! the step grows geometrically until it saturates at `c1 log T / T`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_C0: f64 = 2.0;
pub const DEFAULT_C1: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub steps: usize,
    pub c0: f64,
    pub c1: f64,
}

impl ScheduleParams {
    pub fn new(steps: usize, c0: f64, c1: f64) -> Result<Self> {
        let p = Self { steps, c0, c1 };
        p.validate()?;
        Ok(p)
    }

    pub fn with_defaults(steps: usize) -> Result<Self> {
        Self::new(steps, DEFAULT_C0, DEFAULT_C1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "T = {} must be at least 2",
                self.steps
            )));
        }
        if !(self.c0.is_finite() && self.c0 > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "c0 = {} must be positive",
                self.c0
            )));
        }
        if !(self.c1.is_finite() && self.c1 > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "c1 = {} must be positive",
                self.c1
            )));
        }
        Ok(())
    }

    /// Saturation level `c1 log T / T` of the step sizes.
    pub fn rate(&self) -> f64 {
        let t = self.steps as f64;
        self.c1 * t.ln() / t
    }
}

/// Precomputed `beta_t`, `alpha_t = 1 - beta_t` and `abar_t = prod_{k<=t} alpha_k`.
///
/// Step indices are 1-based: `beta(1..=T)`, `alpha(1..=T+1)` and
/// `alpha_bar(0..=T+1)`. Index `T + 1` is an extension with
/// `alpha_{T+1} = alpha_T`, needed by the accelerated ODE rule at `t = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: Option<ScheduleParams>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    alpha_ext: f64,
}

/// Build the schedule for `params`.
pub fn build_schedule(params: &ScheduleParams) -> Result<NoiseSchedule> {
    params.validate()?;
    let t_max = params.steps;
    let beta1 = (t_max as f64).powf(-params.c0);
    let rate = params.rate();
    let growth = rate.ln_1p();
    let mut beta = Vec::with_capacity(t_max);
    beta.push(beta1);
    for t in 2..=t_max {
        let ramp = (beta1.ln() + t as f64 * growth).exp();
        beta.push(rate * ramp.min(1.0));
    }
    let mut s = NoiseSchedule::from_betas(beta)?;
    s.params = Some(*params);
    Ok(s)
}

impl NoiseSchedule {
    /// Schedule from raw betas (`beta[0]` is `beta_1`). Used for JSON snapshots
    /// and hand-built schedules.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::InvalidSchedule("need at least two steps".into()));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta[{}] = {b} must be positive",
                    i + 1
                )));
            }
            if b >= 1.0 {
                return Err(Error::ScheduleOverflow { t: i + 1, beta: b });
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let alpha_ext = *alpha.last().unwrap();
        Ok(Self {
            params: None,
            beta,
            alpha,
            alpha_bar,
            alpha_ext,
        })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn params(&self) -> Option<&ScheduleParams> {
        self.params.as_ref()
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(
            (1..=self.steps()).contains(&t),
            "beta index {t} out of range"
        );
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        let n = self.steps();
        assert!((1..=n + 1).contains(&t), "alpha index {t} out of range");
        if t == n + 1 {
            self.alpha_ext
        } else {
            self.alpha[t - 1]
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        let n = self.steps();
        assert!(t <= n + 1, "alpha_bar index {t} out of range");
        if t == n + 1 {
            self.alpha_bar[n] * self.alpha_ext
        } else {
            self.alpha_bar[t]
        }
    }

    pub fn alpha_ext(&self) -> f64 {
        self.alpha_ext
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// `abar_0 ..= abar_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn snapshot(&self) -> ScheduleSnapshot {
        let p = self.params;
        ScheduleSnapshot {
            steps: self.steps(),
            c0: p.map(|p| p.c0),
            c1: p.map(|p| p.c1),
            beta: self.beta.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.snapshot())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: ScheduleSnapshot = serde_json::from_str(s)?;
        snap.into_schedule()
    }
}

/// Reproducibility snapshot `{"T", "c0", "c1", "beta"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSnapshot {
    #[serde(rename = "T")]
    pub steps: usize,
    pub c0: Option<f64>,
    pub c1: Option<f64>,
    pub beta: Vec<f64>,
}

impl ScheduleSnapshot {
    pub fn into_schedule(self) -> Result<NoiseSchedule> {
        if self.beta.len() != self.steps {
            return Err(Error::InvalidSchedule(format!(
                "snapshot has T = {} but {} betas",
                self.steps,
                self.beta.len()
            )));
        }
        let mut s = NoiseSchedule::from_betas(self.beta)?;
        if let (Some(c0), Some(c1)) = (self.c0, self.c1) {
            s.params = Some(ScheduleParams::new(self.steps, c0, c1)?);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Slack of the tightest instance; negative when the check fails.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleReport {
    pub checks: Vec<PropertyCheck>,
    /// `abar_T`, reported rather than asserted.
    pub alpha_bar_final: f64,
}

impl ScheduleReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&PropertyCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &'static str, margin: f64) -> PropertyCheck {
    PropertyCheck {
        name,
        passed: margin >= 0.0,
        margin,
    }
}

/// Evaluate the schedule properties used by the convergence analysis.
pub fn validate_schedule(s: &NoiseSchedule, params: &ScheduleParams) -> ScheduleReport {
    let n = s.steps();
    let rate = params.rate();
    let mut checks = Vec::new();

    let unit = s
        .betas()
        .iter()
        .map(|&b| b.min(1.0 - b))
        .fold(f64::INFINITY, f64::min);
    checks.push(PropertyCheck {
        name: "beta_in_unit_interval",
        passed: unit > 0.0,
        margin: unit,
    });

    let dec = (1..=n)
        .map(|t| s.alpha_bar(t - 1) - s.alpha_bar(t))
        .fold(f64::INFINITY, f64::min);
    checks.push(PropertyCheck {
        name: "alpha_bar_strictly_decreasing",
        passed: dec > 0.0,
        margin: dec,
    });

    let min_alpha = s.alphas().iter().copied().fold(f64::INFINITY, f64::min);
    checks.push(check("alpha_lower_bound", min_alpha - (1.0 - rate)));
    checks.push(check("alpha_at_least_half", min_alpha - 0.5));

    let bound = 4.0 * rate;
    let step_ratio = (2..=n)
        .map(|t| (1.0 - s.alpha(t)) / (1.0 - s.alpha_bar(t - 1)))
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(check("step_ratio_bound", bound - step_ratio));

    let (lo, hi) = (2..=n)
        .map(|t| (1.0 - s.alpha_bar(t)) / (1.0 - s.alpha_bar(t - 1)))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r), hi.max(r))
        });
    checks.push(check(
        "noise_growth_ratio",
        (lo - 1.0).min(1.0 + bound - hi),
    ));

    // nondecreasing from t = 2 on and never above the saturation level
    let shape = s.betas()[1..]
        .windows(2)
        .map(|w| w[1] - w[0])
        .chain(s.betas()[1..].iter().map(|&b| rate * (1.0 + 1e-12) - b))
        .fold(f64::INFINITY, f64::min);
    checks.push(check("two_phase_shape", shape));

    ScheduleReport {
        checks,
        alpha_bar_final: s.alpha_bar(n),
    }
}
