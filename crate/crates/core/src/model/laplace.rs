//! Laplace-approximation fitting engine.
//!
//! Per hyperparameter grid point: Newton ascent to the conditional mode of
//! the latent field, a Gaussian approximation from the negative Hessian
//! (prior precision plus binomial curvature), and a Laplace estimate of the
//! marginal likelihood used as the grid weight. The sum-to-zero constraint
//! on the structured effect is imposed afterwards by conditioning (kriging),
//! which is exact Gaussian algebra. Probability-scale cell moments come from
//! Gauss-Hermite quadrature on each cell's logit-scale mixture.

use crate::error::{Error, Result};
use crate::math::gamma::gamma_quantile;
use crate::math::log_sum_exp;
use crate::math::quadrature::GaussHermite;
use crate::math::sparse::{LdlFactor, SymmCsc};
use crate::model::logpost::{IcarVariant, PosteriorProblem};
use crate::model::{
    mix_cell_moments, EngineKind, FitDiagnostics, FittedPosterior, GridApprox, HyperPoint,
    JointPosterior, ModelSpec,
};
use crate::population::{AdjacencyGraph, CovariateMatrix, Population};
use crate::sampling::SampleRealization;

#[derive(Debug, Clone)]
pub struct LaplaceOptions {
    /// Grid points per precision when two precisions are active.
    pub bivariate_grid: usize,
    /// Grid points when a single precision is active.
    pub univariate_grid: usize,
    /// Central prior mass covered by each grid axis.
    pub grid_coverage: f64,
    pub max_newton_iterations: usize,
    /// Newton stops once the infinity norm of the taken step drops below this.
    pub step_tolerance: f64,
    /// Small diagonal added to the ICAR structure so the working prior is
    /// proper; removed exactly by the sum-to-zero conditioning.
    pub icar_jitter: f64,
    pub quadrature_points: usize,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions {
            bivariate_grid: 7,
            univariate_grid: 5,
            grid_coverage: 0.99,
            max_newton_iterations: 60,
            step_tolerance: 1e-8,
            icar_jitter: crate::model::logpost::ICAR_SOFT_JITTER,
            quadrature_points: crate::math::quadrature::GH_POINTS,
        }
    }
}

/// Log-spaced grid covering the central prior mass of one precision.
fn hyper_axis(prior: crate::model::GammaPrior, points: usize, coverage: f64) -> Result<Vec<f64>> {
    debug_assert!(points >= 1);
    if points == 1 {
        return Ok(vec![prior.mean()]);
    }
    let alpha = (1.0 - coverage) / 2.0;
    let lo = gamma_quantile(alpha, prior.shape, prior.rate)?;
    let hi = gamma_quantile(1.0 - alpha, prior.shape, prior.rate)?;
    let (llo, lhi) = (lo.ln(), hi.ln());
    Ok((0..points)
        .map(|i| (llo + (lhi - llo) * i as f64 / (points - 1) as f64).exp())
        .collect())
}

fn build_grid(spec: &ModelSpec, opts: &LaplaceOptions) -> Result<Vec<(Option<f64>, Option<f64>)>> {
    match (spec.include_spatial, spec.include_exchangeable) {
        (false, false) => Ok(vec![(None, None)]),
        (true, false) => Ok(hyper_axis(
            spec.hyperprior_upsilon,
            opts.univariate_grid,
            opts.grid_coverage,
        )?
        .into_iter()
        .map(|t| (Some(t), None))
        .collect()),
        (false, true) => {
            Ok(
                hyper_axis(spec.hyperprior_nu, opts.univariate_grid, opts.grid_coverage)?
                    .into_iter()
                    .map(|t| (None, Some(t)))
                    .collect(),
            )
        }
        (true, true) => {
            let us = hyper_axis(
                spec.hyperprior_upsilon,
                opts.bivariate_grid,
                opts.grid_coverage,
            )?;
            let ns = hyper_axis(spec.hyperprior_nu, opts.bivariate_grid, opts.grid_coverage)?;
            let mut grid = Vec::with_capacity(us.len() * ns.len());
            for &u in &us {
                for &n in &ns {
                    grid.push((Some(u), Some(n)));
                }
            }
            Ok(grid)
        }
    }
}

pub(crate) struct NewtonResult {
    pub mode: Vec<f64>,
    pub precision: SymmCsc,
    pub factor: LdlFactor,
    pub iterations: usize,
    #[cfg_attr(not(test), allow(dead_code))]
    pub objective_trace: Vec<f64>,
    pub jittered: bool,
}

/// Newton ascent with step halving; every accepted step increases the
/// objective, and convergence is declared when the taken step's infinity
/// norm falls under the tolerance.
pub(crate) fn newton_mode(
    problem: &PosteriorProblem,
    tau_u: Option<f64>,
    tau_n: Option<f64>,
    variant: IcarVariant,
    start: &[f64],
    opts: &LaplaceOptions,
) -> Result<NewtonResult> {
    let n = problem.layout.len();
    let cells = problem.cell_count();
    let mut z = start.to_vec();
    let mut obj = problem.log_posterior(&z, tau_u, tau_n, variant);
    if !obj.is_finite() {
        z.fill(0.0);
        obj = problem.log_posterior(&z, tau_u, tau_n, variant);
    }
    let mut grad = vec![0.0; n];
    let mut weights = vec![0.0; cells];
    let mut trace = vec![obj];
    let mut jittered = false;
    let mut grad_norm = f64::INFINITY;
    let mut step_norm = f64::INFINITY;

    for iteration in 0..opts.max_newton_iterations {
        let q = problem.assemble_precision(&z, tau_u, tau_n, variant, &mut weights);
        let (factor, jitter) = q.factor_with_jitter()?;
        if jitter > 0.0 {
            jittered = true;
        }
        problem.gradient(&z, tau_u, tau_n, variant, &mut grad);
        grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let direction = factor.solve(&grad);
        let dir_norm = direction.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if dir_norm < opts.step_tolerance {
            return Ok(NewtonResult {
                mode: z,
                precision: q,
                factor,
                iterations: iteration,
                objective_trace: trace,
                jittered,
            });
        }
        // Newton decrement: the objective gain the full step could deliver.
        // Along nearly flat directions the step stays sizable while the gain
        // drops under floating-point resolution of the objective; polish by
        // taking the full step unguarded and refreshing the factorization.
        let decrement: f64 = 0.5 * grad.iter().zip(&direction).map(|(g, d)| g * d).sum::<f64>();
        if decrement.abs() < 1e-9 * (1.0 + obj.abs()) {
            for (zi, di) in z.iter_mut().zip(&direction) {
                *zi += di;
            }
            let q = problem.assemble_precision(&z, tau_u, tau_n, variant, &mut weights);
            let (factor, jitter) = q.factor_with_jitter()?;
            if jitter > 0.0 {
                jittered = true;
            }
            return Ok(NewtonResult {
                mode: z,
                precision: q,
                factor,
                iterations: iteration + 1,
                objective_trace: trace,
                jittered,
            });
        }
        let mut step_scale = 1.0f64;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate: Vec<f64> = z
                .iter()
                .zip(&direction)
                .map(|(zi, di)| zi + step_scale * di)
                .collect();
            let cand_obj = problem.log_posterior(&candidate, tau_u, tau_n, variant);
            if cand_obj.is_finite() && cand_obj > obj {
                z = candidate;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step_scale *= 0.5;
        }
        if !accepted {
            // the objective could not resolve any improvement along the
            // step; with a small predicted gain, polish and stop
            if decrement.abs() < 1e-7 * (1.0 + obj.abs()) {
                for (zi, di) in z.iter_mut().zip(&direction) {
                    *zi += di;
                }
                let q = problem.assemble_precision(&z, tau_u, tau_n, variant, &mut weights);
                let (factor, jitter) = q.factor_with_jitter()?;
                if jitter > 0.0 {
                    jittered = true;
                }
                return Ok(NewtonResult {
                    mode: z,
                    precision: q,
                    factor,
                    iterations: iteration + 1,
                    objective_trace: trace,
                    jittered,
                });
            }
            return Err(Error::NonConvergence {
                iterations: iteration,
                grad_norm,
                step_norm: dir_norm,
            });
        }
        trace.push(obj);
        step_norm = step_scale * dir_norm;
    }
    Err(Error::NonConvergence {
        iterations: opts.max_newton_iterations,
        grad_norm,
        step_norm,
    })
}

/// Fit by Laplace approximation with hyperparameter grid mixing.
pub fn fit_laplace(
    spec: &ModelSpec,
    data: &SampleRealization,
    pop: &Population,
    covariates: Option<&CovariateMatrix>,
    graph: Option<&AdjacencyGraph>,
    opts: &LaplaceOptions,
) -> Result<FittedPosterior> {
    let problem = PosteriorProblem::new(spec, data, pop, covariates, graph)?;
    let layout = problem.layout.clone();
    let (j_count, d_count) = (layout.j_count(), layout.d_count());
    let variant = if spec.include_spatial {
        IcarVariant::Softened(opts.icar_jitter)
    } else {
        IcarVariant::Exact
    };
    let grid = build_grid(spec, opts)?;
    let gh = GaussHermite::new(opts.quadrature_points);

    let mut approxes: Vec<GridApprox> = Vec::with_capacity(grid.len());
    let mut taus: Vec<(Option<f64>, Option<f64>)> = Vec::with_capacity(grid.len());
    let mut warm = vec![0.0; layout.len()];
    let mut total_iterations = 0;
    let mut any_jitter = false;
    let mut row_buf: Vec<(usize, f64)> = Vec::new();
    let mut work = vec![0.0; layout.len()];
    // precision matrix of the running best-weight grid point
    let mut best_precision: Option<(f64, SymmCsc)> = None;

    for &(tau_u, tau_n) in &grid {
        let newton = newton_mode(&problem, tau_u, tau_n, variant, &warm, opts)?;
        warm.clone_from_slice(&newton.mode);
        total_iterations += newton.iterations;
        any_jitter |= newton.jittered;

        // sum-to-zero conditioning for the structured block
        let krig = if let Some(ups) = layout.upsilon_range() {
            let mut a = vec![0.0; layout.len()];
            for i in ups.clone() {
                a[i] = 1.0;
            }
            let w = newton.factor.solve(&a);
            let denom: f64 = ups.clone().map(|i| w[i]).sum();
            if denom.is_nan() || denom <= 0.0 {
                return Err(Error::Numerical(
                    "sum-to-zero conditioning failed: a'Q^{-1}a is not positive".into(),
                ));
            }
            Some((w, denom))
        } else {
            None
        };

        let constrained_mode: Vec<f64> = match &krig {
            Some((w, denom)) => {
                let ups = layout.upsilon_range().unwrap();
                let shift: f64 = ups.map(|i| newton.mode[i]).sum::<f64>() / denom;
                newton
                    .mode
                    .iter()
                    .zip(w)
                    .map(|(m, wi)| m - shift * wi)
                    .collect()
            }
            None => newton.mode.clone(),
        };

        // marginal likelihood weight (constants across the grid dropped);
        // under the constraint the corrected determinant is
        // det(Q) a'Q^{-1}a / (a'a), which is invariant to the jitter level.
        let log_weight = {
            let logpost =
                problem.log_posterior(&constrained_mode, tau_u, tau_n, IcarVariant::Exact);
            match &krig {
                Some((_, denom)) => {
                    logpost - 0.5 * (newton.factor.log_det() + denom.ln() - (d_count as f64).ln())
                }
                None => logpost - 0.5 * newton.factor.log_det(),
            }
        };
        if !log_weight.is_finite() {
            return Err(Error::Numerical("non-finite Laplace grid weight".into()));
        }

        // constrained per-cell moments of theta
        let mut theta_mean = crate::cells::CellGrid::filled(j_count, d_count, 0.0f64);
        let mut theta_var = crate::cells::CellGrid::filled(j_count, d_count, 0.0f64);
        for j in 0..j_count {
            for d in 0..d_count {
                let row = layout.row(j, d);
                let m: f64 = row
                    .iter()
                    .map(|&(i, c)| c * constrained_mode[i as usize])
                    .sum();
                row_buf.clear();
                row_buf.extend(row.iter().map(|&(i, c)| (i as usize, c)));
                let mut v = newton.factor.quad_form_inv(&row_buf, &mut work);
                if let Some((w, denom)) = &krig {
                    let cross: f64 = row.iter().map(|&(i, c)| c * w[i as usize]).sum();
                    v -= cross * cross / denom;
                }
                *theta_mean.get_mut(j, d) = m;
                *theta_var.get_mut(j, d) = v.max(0.0);
            }
        }

        taus.push((tau_u, tau_n));
        if best_precision.as_ref().is_none_or(|(w, _)| log_weight > *w) {
            best_precision = Some((log_weight, newton.precision));
        }
        approxes.push(GridApprox {
            log_weight,
            mode: newton.mode,
            factor: newton.factor,
            krig,
            theta_mean,
            theta_var,
        });
    }

    // normalize mixture weights
    let lse = log_sum_exp(&approxes.iter().map(|g| g.log_weight).collect::<Vec<_>>());
    if !lse.is_finite() {
        return Err(Error::Numerical(
            "hyper grid weights do not normalize".into(),
        ));
    }
    for g in &mut approxes {
        g.log_weight -= lse;
    }

    let (cell_mean, cell_var) = mix_cell_moments(&approxes, j_count, d_count, &gh);

    // report the highest-weight grid point's constrained mode and precision
    let best = approxes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.log_weight.partial_cmp(&b.1.log_weight).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let best_mode: Vec<f64> = match &approxes[best].krig {
        Some((w, denom)) => {
            let ups = layout.upsilon_range().unwrap();
            let shift: f64 = ups.map(|i| approxes[best].mode[i]).sum::<f64>() / denom;
            approxes[best]
                .mode
                .iter()
                .zip(w)
                .map(|(m, wi)| m - shift * wi)
                .collect()
        }
        None => approxes[best].mode.clone(),
    };
    let latent_mode = layout.unpack(&best_mode);
    let latent_precision = best_precision.expect("at least one grid point").1;

    let mut warnings = Vec::new();
    if any_jitter {
        warnings.push("diagonal jitter was needed during factorization".to_string());
    }
    let hyper_grid = taus
        .iter()
        .zip(&approxes)
        .map(|(&(u, n), g)| HyperPoint {
            tau_upsilon: u,
            tau_nu: n,
            log_weight: g.log_weight,
        })
        .collect();

    Ok(FittedPosterior {
        cell_mean,
        cell_var,
        latent_mode,
        latent_precision,
        hyper_grid,
        diagnostics: FitDiagnostics {
            engine: EngineKind::Laplace,
            converged: true,
            iterations: total_iterations,
            grid_size: grid.len(),
            max_rhat: None,
            warnings,
        },
        joint: JointPosterior::Gaussian {
            layout,
            grid: approxes,
        },
    })
}
