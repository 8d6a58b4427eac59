//! State space, reference law, true model outputs and score transforms.
//!
//! States are stored in the logarithmic coordinate `y = ln x`, so the
//! log-normal reference on `x > 0` becomes a Gaussian on the real line and
//! samplers never have to deal with the positivity constraint.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ArtError, Result};
use crate::quadrature;

/// A point of the state space, in log coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePoint {
    pub y: f64,
}

impl StatePoint {
    pub fn new(y: f64) -> Result<Self> {
        let x = y.exp();
        if !(x.is_finite() && x > 0.0) {
            return Err(ArtError::InvalidArgument(format!(
                "state y={y} does not map to a finite positive x"
            )));
        }
        Ok(Self { y })
    }

    pub fn from_x(x: f64) -> Result<Self> {
        if !(x.is_finite() && x > 0.0) {
            return Err(ArtError::InvalidArgument(format!(
                "x={x} must be finite and > 0"
            )));
        }
        Self::new(x.ln())
    }

    /// Physical parameter `x = exp(y)`.
    pub fn x(&self) -> f64 {
        self.y.exp()
    }
}

/// Gaussian law of `y = ln x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceDistribution {
    pub mean: f64,
    pub stddev: f64,
}

impl Default for ReferenceDistribution {
    fn default() -> Self {
        Self {
            mean: 1.5,
            stddev: 1.5,
        }
    }
}

impl ReferenceDistribution {
    pub fn new(mean: f64, stddev: f64) -> Result<Self> {
        if !(stddev > 0.0 && stddev.is_finite() && mean.is_finite()) {
            return Err(ArtError::InvalidArgument(format!(
                "reference needs finite mean and stddev > 0 (got {mean}, {stddev})"
            )));
        }
        Ok(Self { mean, stddev })
    }

    pub fn ln_density(&self, y: f64) -> f64 {
        let z = (y - self.mean) / self.stddev;
        -0.5 * z * z - self.stddev.ln() - 0.5 * (2.0 * PI).ln()
    }

    pub fn density(&self, y: f64) -> f64 {
        self.ln_density(y).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let xi: f64 = rng.sample(StandardNormal);
        self.mean + self.stddev * xi
    }
}

/// Parameters of the closed-form one-dimensional model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiParams {
    pub x0: f64,
    pub x1: f64,
    pub amplitude: f64,
    /// Height of the plateau `x <= 1/plateau`.
    pub plateau: f64,
}

impl Default for PsiParams {
    fn default() -> Self {
        Self {
            x0: 0.5,
            x1: 5.0,
            amplitude: 15.0,
            plateau: 90.0,
        }
    }
}

/// The expensive model output `Psi*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsiModel {
    /// Plateau / `1/x + f(x)` toy model.
    ModelS(PsiParams),
    /// `Psi*(y) = slope * y + intercept`; splines reproduce it exactly.
    Affine { slope: f64, intercept: f64 },
}

impl PsiModel {
    /// Evaluate at log coordinate `y`.
    pub fn eval_y(&self, y: f64) -> f64 {
        match *self {
            PsiModel::ModelS(p) => {
                let x = y.exp();
                if x <= 1.0 / p.plateau {
                    p.plateau
                } else {
                    1.0 / x + bump(&p, x)
                }
            }
            PsiModel::Affine { slope, intercept } => slope * y + intercept,
        }
    }

    /// Log-coordinates where the model is not smooth; quadrature seeds its
    /// panels there.
    pub fn breakpoints(&self) -> Vec<f64> {
        match *self {
            PsiModel::ModelS(p) => vec![-p.plateau.ln(), p.x0.ln(), p.x1.ln()],
            PsiModel::Affine { .. } => Vec::new(),
        }
    }
}

// f(x) = A [ 1{x0<=x<x1} sin^2(x-x0) + 1{x1<=x} (sin^2(x1-x0) - 0.1 (x-x1)) ]
fn bump(p: &PsiParams, x: f64) -> f64 {
    if x < p.x0 {
        0.0
    } else if x < p.x1 {
        let s = (x - p.x0).sin();
        p.amplitude * s * s
    } else {
        let s = (p.x1 - p.x0).sin();
        p.amplitude * (s * s - 0.1 * (x - p.x1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemFlavor {
    RareEvent {
        level: f64,
    },
    Bayesian {
        observations: Vec<f64>,
        noise_variance: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub reference: ReferenceDistribution,
    pub flavor: ProblemFlavor,
    pub beta_infinity: f64,
    pub psi: PsiModel,
}

impl ProblemSpec {
    /// Rare-event problem on the toy model with plateau height `level`.
    pub fn model_s_rare_event(level: f64, beta_infinity: f64) -> Result<Self> {
        let spec = Self {
            reference: ReferenceDistribution::default(),
            flavor: ProblemFlavor::RareEvent { level },
            beta_infinity,
            psi: PsiModel::ModelS(PsiParams {
                plateau: level,
                ..PsiParams::default()
            }),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Bayesian problem on the toy model with scalar observations of `Psi*`.
    pub fn model_s_bayesian(
        observations: Vec<f64>,
        noise_variance: f64,
        beta_infinity: f64,
    ) -> Result<Self> {
        let spec = Self {
            reference: ReferenceDistribution::default(),
            flavor: ProblemFlavor::Bayesian {
                observations,
                noise_variance,
            },
            beta_infinity,
            psi: PsiModel::ModelS(PsiParams::default()),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_infinity > 0.0 && self.beta_infinity.is_finite()) {
            return Err(ArtError::InvalidArgument(format!(
                "beta_infinity must be > 0, got {}",
                self.beta_infinity
            )));
        }
        ReferenceDistribution::new(self.reference.mean, self.reference.stddev)?;
        match &self.flavor {
            ProblemFlavor::RareEvent { level } if !(*level > 0.0) => Err(
                ArtError::InvalidArgument(format!("level must be > 0, got {level}")),
            ),
            ProblemFlavor::Bayesian {
                observations,
                noise_variance,
            } if observations.is_empty() || !(*noise_variance > 0.0) => {
                Err(ArtError::InvalidArgument(
                    "bayesian problems need observations and a positive noise variance".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn is_rare_event(&self) -> bool {
        matches!(self.flavor, ProblemFlavor::RareEvent { .. })
    }

    /// Score transform applied to a model output.
    pub fn score(&self, psi_value: f64) -> f64 {
        match &self.flavor {
            ProblemFlavor::RareEvent { level } => score_rare_event(psi_value, *level),
            ProblemFlavor::Bayesian {
                observations,
                noise_variance,
            } => gaussian_log_likelihood(psi_value, observations, *noise_variance),
        }
    }

    /// Upper bound of the score: 1 for rare events, 0 for Bayesian.
    ///
    /// The rare-event estimand is `pi(exp(beta_inf * (S* - 1)))`; this is the
    /// shift that turns the Gibbs normalization into a probability-like number.
    pub fn score_max(&self) -> f64 {
        match self.flavor {
            ProblemFlavor::RareEvent { .. } => 1.0,
            ProblemFlavor::Bayesian { .. } => 0.0,
        }
    }

    /// Bound on the score error given a model-output error `err_psi` at a
    /// point where the reduced model outputs `psi_reduced`.
    pub fn score_error(&self, psi_reduced: f64, err_psi: f64) -> f64 {
        match &self.flavor {
            ProblemFlavor::RareEvent { .. } => err_psi,
            ProblemFlavor::Bayesian {
                observations,
                noise_variance,
            } => {
                observations
                    .iter()
                    .map(|o| err_psi * (err_psi + 2.0 * (psi_reduced - o).abs()))
                    .sum::<f64>()
                    / noise_variance
            }
        }
    }

    /// Natural quadrature oracle for `pi(exp(beta * score))`.
    pub fn quadrature_z<F: Fn(f64) -> f64>(&self, score: F, beta: f64) -> Result<f64> {
        quadrature::quadrature_z(&self.reference, score, beta, &self.psi.breakpoints())
    }
}

/// `Psi*(x)` of the problem's model.
pub fn psi_true(spec: &ProblemSpec, p: StatePoint) -> f64 {
    spec.psi.eval_y(p.y)
}

/// `1 - max(level - psi, 0) / level`.
pub fn score_rare_event(psi_value: f64, level: f64) -> f64 {
    1.0 - (level - psi_value).max(0.0) / level
}

fn gaussian_log_likelihood(psi_value: f64, observations: &[f64], noise_variance: f64) -> f64 {
    -observations
        .iter()
        .map(|o| (psi_value - o) * (psi_value - o))
        .sum::<f64>()
        / noise_variance
}

/// Gaussian observation log-likelihood `-(1/sigma^2) sum_j (psi - y_j)^2`.
pub fn score_bayes(psi_value: f64, spec: &ProblemSpec) -> Result<f64> {
    match &spec.flavor {
        ProblemFlavor::Bayesian {
            observations,
            noise_variance,
        } => Ok(gaussian_log_likelihood(
            psi_value,
            observations,
            *noise_variance,
        )),
        ProblemFlavor::RareEvent { .. } => Err(ArtError::WrongFlavor {
            expected: "bayesian",
        }),
    }
}

/// `S*(x) = score(Psi*(x))`, without cost accounting.
pub fn true_score(spec: &ProblemSpec, p: StatePoint) -> f64 {
    spec.score(psi_true(spec, p))
}

/// The expensive model behind a cost ledger.
///
/// `score` is what an algorithm pays for; `psi_for_error` is the toy-model
/// shortcut used to compute the surrogate's error and is tallied separately.
#[derive(Debug)]
pub struct TrueModel {
    spec: ProblemSpec,
    true_evals: AtomicU64,
    error_oracle_evals: AtomicU64,
}

impl TrueModel {
    pub fn new(spec: ProblemSpec) -> Self {
        Self {
            spec,
            true_evals: AtomicU64::new(0),
            error_oracle_evals: AtomicU64::new(0),
        }
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    /// True model output, counted as one expensive evaluation.
    pub fn psi(&self, y: f64) -> f64 {
        self.true_evals.fetch_add(1, Ordering::Relaxed);
        self.spec.psi.eval_y(y)
    }

    /// True score, counted as one expensive evaluation.
    pub fn score(&self, y: f64) -> f64 {
        self.spec.score(self.psi(y))
    }

    pub fn psi_for_error(&self, y: f64) -> f64 {
        self.error_oracle_evals.fetch_add(1, Ordering::Relaxed);
        self.spec.psi.eval_y(y)
    }

    pub fn true_evals(&self) -> u64 {
        self.true_evals.load(Ordering::Relaxed)
    }

    pub fn error_oracle_evals(&self) -> u64 {
        self.error_oracle_evals.load(Ordering::Relaxed)
    }
}
