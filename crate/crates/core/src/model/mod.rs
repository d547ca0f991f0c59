//! Hierarchical binomial-logit latent Gaussian model.
//!
//! The linear predictor for cell (j, d) is
//!
//! ```text
//! theta_jd = beta0 + beta1_j + x_d' beta2_j + upsilon_d + nu_jd
//! ```
//!
//! with `beta1_0 = 0` for identifiability, an intrinsic CAR prior on the
//! structured area effects `upsilon` under a sum-to-zero constraint, an
//! exchangeable Gaussian prior on `nu`, weak Gaussian priors on the fixed
//! effects, and Gamma hyperpriors on the two random-effect precisions.
//!
//! Two fitting engines share the same posterior summaries: a Laplace
//! approximation with grid integration over the hyperparameters, and a
//! Metropolis-within-Gibbs sampler used as its oracle on small problems.

mod icar;
mod laplace;
mod layout;
mod logpost;
mod mcmc;

pub use icar::{build_icar_precision, IcarStructure};
pub use laplace::{fit_laplace, LaplaceOptions};
pub use layout::LatentLayout;
pub use logpost::{log_posterior_gradient, log_unnormalized_posterior};
pub use mcmc::{fit_mcmc, ChainConfig};

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::cells::CellGrid;
use crate::error::{Error, Result};
use crate::math::quadrature::GaussHermite;
use crate::math::sparse::{LdlFactor, SymmCsc};
use crate::population::Population;
use crate::sampling::SampleRealization;

/// Gamma(shape, rate) hyperprior on a precision parameter.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<GammaPrior> {
        if shape > 0.0 && rate > 0.0 {
            Ok(GammaPrior { shape, rate })
        } else {
            Err(Error::Validation(format!(
                "gamma prior needs shape > 0 and rate > 0, got ({shape}, {rate})"
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

/// Hyperprior used when both structured and unstructured effects are present.
pub const CONVOLUTION_PRECISION_PRIOR: GammaPrior = GammaPrior {
    shape: 0.5,
    rate: 0.1,
};
/// Hyperprior used when only the unstructured effect is present.
pub const UNSTRUCTURED_ONLY_PRECISION_PRIOR: GammaPrior = GammaPrior {
    shape: 1.0,
    rate: 0.1,
};
/// Weak prior scale for the intercept, age contrasts, and covariate effects.
pub const DEFAULT_FIXED_EFFECT_SD: f64 = 10.0;

/// Structural switches and priors of the working model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub include_covariates: bool,
    pub include_spatial: bool,
    pub include_exchangeable: bool,
    /// Age-specific covariate coefficients (one row per group) when false;
    /// a single shared coefficient vector when true.
    pub shared_covariate_coefficients: bool,
    pub hyperprior_upsilon: GammaPrior,
    pub hyperprior_nu: GammaPrior,
    pub fixed_effect_prior_sd: f64,
}

impl ModelSpec {
    /// Age contrasts plus exchangeable effects only.
    pub fn s2() -> ModelSpec {
        ModelSpec {
            include_covariates: false,
            include_spatial: false,
            include_exchangeable: true,
            shared_covariate_coefficients: false,
            hyperprior_upsilon: CONVOLUTION_PRECISION_PRIOR,
            hyperprior_nu: UNSTRUCTURED_ONLY_PRECISION_PRIOR,
            fixed_effect_prior_sd: DEFAULT_FIXED_EFFECT_SD,
        }
    }

    /// S2 plus area covariates.
    pub fn s3() -> ModelSpec {
        ModelSpec {
            include_covariates: true,
            ..ModelSpec::s2()
        }
    }

    /// S3 plus the structured spatial effect (the full convolution prior).
    pub fn s4() -> ModelSpec {
        ModelSpec {
            include_covariates: true,
            include_spatial: true,
            include_exchangeable: true,
            shared_covariate_coefficients: false,
            hyperprior_upsilon: CONVOLUTION_PRECISION_PRIOR,
            hyperprior_nu: CONVOLUTION_PRECISION_PRIOR,
            fixed_effect_prior_sd: DEFAULT_FIXED_EFFECT_SD,
        }
    }

    /// Intercept and age contrasts only; no random effects. Used for
    /// conjugate-style checks.
    pub fn fixed_only() -> ModelSpec {
        ModelSpec {
            include_covariates: false,
            include_spatial: false,
            include_exchangeable: false,
            ..ModelSpec::s2()
        }
    }

    pub fn validate(&self) -> Result<()> {
        GammaPrior::new(self.hyperprior_upsilon.shape, self.hyperprior_upsilon.rate)?;
        GammaPrior::new(self.hyperprior_nu.shape, self.hyperprior_nu.rate)?;
        if self.fixed_effect_prior_sd <= 0.0 || self.fixed_effect_prior_sd.is_nan() {
            return Err(Error::Validation(
                "fixed effect prior SD must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of active precision hyperparameters.
    pub fn hyper_dim(&self) -> usize {
        usize::from(self.include_spatial) + usize::from(self.include_exchangeable)
    }
}

/// The latent effects at a given point (mode or draw), on the log-odds scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    pub beta0: f64,
    /// Age contrasts, length J with `beta1[0] == 0`.
    pub beta1: Vec<f64>,
    /// Covariate coefficients: row-major J x K when age-specific, length K
    /// when shared, empty when covariates are excluded.
    pub beta2: Vec<f64>,
    /// Structured area effects, length D (empty when excluded).
    pub upsilon: Vec<f64>,
    /// Exchangeable cell effects, length J*D (empty when excluded).
    pub nu: Vec<f64>,
}

impl LatentField {
    /// Shift the mean level of `upsilon` into the intercept so that
    /// `sum(upsilon) == 0`. Idempotent; the cell predictor is unchanged.
    pub fn recenter_spatial(&mut self) {
        if self.upsilon.is_empty() {
            return;
        }
        let mean = self.upsilon.iter().sum::<f64>() / self.upsilon.len() as f64;
        for u in &mut self.upsilon {
            *u -= mean;
        }
        self.beta0 += mean;
    }

    pub fn upsilon_sum(&self) -> f64 {
        self.upsilon.iter().sum()
    }
}

/// Per-cell posterior mean/variance on the probability scale; the minimal
/// interface the reliability and search layers need from a fitted model.
#[derive(Debug, Clone)]
pub struct CellSummaries {
    pub mean: CellGrid<f64>,
    pub var: CellGrid<f64>,
}

/// One hyperparameter grid point with its normalized mixture log-weight.
#[derive(Debug, Clone, Copy)]
pub struct HyperPoint {
    pub tau_upsilon: Option<f64>,
    pub tau_nu: Option<f64>,
    pub log_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    Laplace,
    Mcmc,
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub engine: EngineKind,
    pub converged: bool,
    /// Newton iterations summed over grid points (Laplace) or kept draws (MCMC).
    pub iterations: usize,
    pub grid_size: usize,
    /// Largest split-Rhat over monitored quantities (MCMC only).
    pub max_rhat: Option<f64>,
    pub warnings: Vec<String>,
}

/// Gaussian approximation at one hyperparameter grid point.
#[derive(Debug, Clone)]
pub(crate) struct GridApprox {
    pub log_weight: f64,
    /// Unconstrained mode of the latent vector.
    pub mode: Vec<f64>,
    pub factor: LdlFactor,
    /// Kriging data for the sum-to-zero constraint: w = Q^{-1} a and a'w,
    /// with `a` the indicator of the upsilon block.
    pub krig: Option<(Vec<f64>, f64)>,
    /// Constrained cell means/variances of theta.
    pub theta_mean: CellGrid<f64>,
    pub theta_var: CellGrid<f64>,
}

/// What `sample_latent` draws from.
#[derive(Debug, Clone)]
pub(crate) enum JointPosterior {
    Gaussian {
        layout: LatentLayout,
        grid: Vec<GridApprox>,
    },
    /// Thinned latent draws kept by the MCMC engine, already on theta scale.
    ThetaDraws(Vec<CellGrid<f64>>),
}

/// Fitted posterior: per-cell prevalence summaries plus the joint latent
/// Gaussian machinery needed to draw design-prior fields.
#[derive(Debug, Clone)]
pub struct FittedPosterior {
    pub cell_mean: CellGrid<f64>,
    pub cell_var: CellGrid<f64>,
    pub latent_mode: LatentField,
    pub latent_precision: SymmCsc,
    pub hyper_grid: Vec<HyperPoint>,
    pub diagnostics: FitDiagnostics,
    pub(crate) joint: JointPosterior,
}

impl FittedPosterior {
    pub fn j_count(&self) -> usize {
        self.cell_mean.j_count()
    }

    pub fn d_count(&self) -> usize {
        self.cell_mean.d_count()
    }

    /// Posterior summaries on the probability scale.
    pub fn predict_cells(&self) -> CellSummaries {
        CellSummaries {
            mean: self.cell_mean.clone(),
            var: self.cell_var.clone(),
        }
    }

    /// Mixture posterior mean of theta per cell (log-odds scale).
    pub fn theta_mean(&self) -> CellGrid<f64> {
        match &self.joint {
            JointPosterior::Gaussian { grid, .. } => {
                let mut out = CellGrid::filled(self.j_count(), self.d_count(), 0.0f64);
                for g in grid {
                    let w = g.log_weight.exp();
                    for (j, d, &m) in g.theta_mean.iter_cells() {
                        *out.get_mut(j, d) += w * m;
                    }
                }
                out
            }
            JointPosterior::ThetaDraws(draws) => {
                let mut out = CellGrid::filled(self.j_count(), self.d_count(), 0.0f64);
                for draw in draws {
                    for (j, d, &t) in draw.iter_cells() {
                        *out.get_mut(j, d) += t;
                    }
                }
                let inv = 1.0 / draws.len() as f64;
                out.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
                out
            }
        }
    }

    /// Draw one joint latent field from the fitted posterior and return the
    /// implied cell log-odds. For the Laplace engine this picks a
    /// hyperparameter grid point by weight and then draws from the
    /// constrained Gaussian; for the MCMC engine it resamples a kept draw.
    pub fn sample_latent(&self, rng: &mut ChaCha12Rng) -> CellGrid<f64> {
        match &self.joint {
            JointPosterior::Gaussian { layout, grid } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = grid.len() - 1;
                for (i, g) in grid.iter().enumerate() {
                    acc += g.log_weight.exp();
                    if u <= acc {
                        chosen = i;
                        break;
                    }
                }
                let g = &grid[chosen];
                let n = g.mode.len();
                let mut z: Vec<f64> = (0..n)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                g.factor.sample_zero_mean(&mut z);
                for (zi, mi) in z.iter_mut().zip(&g.mode) {
                    *zi += mi;
                }
                if let Some((w, denom)) = &g.krig {
                    let s: f64 = layout
                        .upsilon_range()
                        .map(|r| r.map(|i| z[i]).sum::<f64>())
                        .unwrap_or(0.0);
                    let c = s / denom;
                    for (zi, wi) in z.iter_mut().zip(w) {
                        *zi -= c * wi;
                    }
                }
                layout.theta_grid(&z)
            }
            JointPosterior::ThetaDraws(draws) => {
                let idx = rng.random_range(0..draws.len());
                draws[idx].clone()
            }
        }
    }
}

/// Probability-scale moments per cell from a Gaussian mixture on theta.
pub(crate) fn mix_cell_moments(
    grid: &[GridApprox],
    j_count: usize,
    d_count: usize,
    gh: &GaussHermite,
) -> (CellGrid<f64>, CellGrid<f64>) {
    let mut mean = CellGrid::filled(j_count, d_count, 0.0f64);
    let mut second = CellGrid::filled(j_count, d_count, 0.0f64);
    for g in grid {
        let w = g.log_weight.exp();
        for j in 0..j_count {
            for d in 0..d_count {
                let mu = *g.theta_mean.get(j, d);
                let sd = g.theta_var.get(j, d).max(0.0).sqrt();
                let (m, v) = gh.logit_normal_moments(mu, sd);
                *mean.get_mut(j, d) += w * m;
                *second.get_mut(j, d) += w * (v + m * m);
            }
        }
    }
    let var = CellGrid::from_fn(j_count, d_count, |j, d| {
        (second.get(j, d) - mean.get(j, d) * mean.get(j, d)).max(1e-300)
    });
    (mean, var)
}

/// Abstraction over the per-replication estimation step so the search and
/// simulation layers can run against stub engines in tests.
pub trait CellPosteriorEngine: Sync {
    fn fit_cells(&self, data: &SampleRealization, pop: &Population) -> Result<CellSummaries>;
    /// Short label for reports.
    fn label(&self) -> &'static str {
        "model"
    }
}

/// The production engine: Laplace fit under a fixed model structure.
pub struct LaplaceEngine<'a> {
    pub spec: &'a ModelSpec,
    pub covariates: Option<&'a crate::population::CovariateMatrix>,
    pub graph: Option<&'a crate::population::AdjacencyGraph>,
    pub options: LaplaceOptions,
}

impl CellPosteriorEngine for LaplaceEngine<'_> {
    fn fit_cells(&self, data: &SampleRealization, pop: &Population) -> Result<CellSummaries> {
        let fit = fit_laplace(
            self.spec,
            data,
            pop,
            self.covariates,
            self.graph,
            &self.options,
        )?;
        Ok(fit.predict_cells())
    }

    fn label(&self) -> &'static str {
        "laplace"
    }
}

/// Source of design-prior draws of the cell log-odds field.
pub trait DesignPrior: Sync {
    fn sample_theta(&self, rng: &mut ChaCha12Rng) -> CellGrid<f64>;
}

impl DesignPrior for FittedPosterior {
    fn sample_theta(&self, rng: &mut ChaCha12Rng) -> CellGrid<f64> {
        self.sample_latent(rng)
    }
}
