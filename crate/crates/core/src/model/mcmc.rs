//! Metropolis-within-Gibbs sampler for the same hierarchical model the
//! Laplace engine fits. Used as a desk-scale oracle and for diagnostics.
//!
//! Latent coordinates get random-walk Metropolis updates (with exact
//! conditional draws where the likelihood is absent), both precisions get
//! conjugate Gibbs updates, and a centering move shuttles the mean level of
//! the structured effect into the intercept so the two are well mixed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;

use crate::cells::CellGrid;
use crate::error::{Error, Result};
use crate::math::log1p_exp;
use crate::math::sigmoid;
use crate::model::logpost::{IcarVariant, PosteriorProblem};
use crate::model::{
    EngineKind, FitDiagnostics, FittedPosterior, HyperPoint, JointPosterior, ModelSpec,
};
use crate::population::{AdjacencyGraph, CovariateMatrix, Population};
use crate::sampling::SampleRealization;

#[derive(Debug, Clone)]
pub struct ChainConfig {
    /// Total sweeps including burn-in.
    pub sweeps: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th sweep after burn-in.
    pub thin: usize,
    pub seed: u64,
    /// Initial random-walk scale, adapted during burn-in.
    pub initial_step: f64,
    /// Cap on stored latent draws available to `sample_latent`.
    pub max_stored_draws: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            sweeps: 30_000,
            burn_in: 8_000,
            thin: 5,
            seed: 0,
            initial_step: 0.8,
            max_stored_draws: 2_000,
        }
    }
}

/// Split-Rhat over a single chain's kept draws (two halves as pseudo-chains).
fn split_rhat(series: &[f64]) -> f64 {
    let n = series.len() / 2;
    if n < 4 {
        return f64::NAN;
    }
    let halves = [&series[0..n], &series[series.len() - n..]];
    let means: Vec<f64> = halves
        .iter()
        .map(|h| h.iter().sum::<f64>() / n as f64)
        .collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, m)| h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0))
        .collect();
    let w = 0.5 * (vars[0] + vars[1]);
    let grand = 0.5 * (means[0] + means[1]);
    let b = n as f64 * ((means[0] - grand).powi(2) + (means[1] - grand).powi(2));
    if w <= 0.0 {
        return if b > 0.0 { f64::INFINITY } else { 1.0 };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

struct Accumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(len: usize) -> Accumulator {
        Accumulator {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, values: impl Iterator<Item = f64>) {
        self.count += 1;
        let c = self.count as f64;
        for (i, v) in values.enumerate() {
            let delta = v - self.mean[i];
            self.mean[i] += delta / c;
            self.m2[i] += delta * (v - self.mean[i]);
        }
    }

    fn variance(&self, i: usize) -> f64 {
        if self.count > 1 {
            self.m2[i] / (self.count as f64 - 1.0)
        } else {
            0.0
        }
    }
}

/// Fit by MCMC; same posterior summaries as the Laplace engine, plus
/// Monte Carlo diagnostics. Intended for desk-scale latent dimensions.
pub fn fit_mcmc(
    spec: &ModelSpec,
    data: &SampleRealization,
    pop: &Population,
    covariates: Option<&CovariateMatrix>,
    graph: Option<&AdjacencyGraph>,
    config: &ChainConfig,
) -> Result<FittedPosterior> {
    let problem = PosteriorProblem::new(spec, data, pop, covariates, graph)?;
    let layout = problem.layout.clone();
    let n_latent = layout.len();
    if n_latent > 5_000 {
        return Err(Error::Validation(format!(
            "MCMC engine is desk-scale only (latent dimension {n_latent} > 5000)"
        )));
    }
    if config.burn_in >= config.sweeps {
        return Err(Error::Config(
            "chain burn-in must be smaller than total sweeps".into(),
        ));
    }
    let kept_total = (config.sweeps - config.burn_in).div_ceil(config.thin.max(1));
    if kept_total < 8 {
        return Err(Error::Config(
            "chain keeps too few draws; raise sweeps".into(),
        ));
    }

    let (j_count, d_count) = (layout.j_count(), layout.d_count());
    let cells = j_count * d_count;
    let sample_n = problem.sample_n().to_vec();
    let sample_y = problem.sample_y().to_vec();

    // reverse index: latent coordinate -> (cell, coefficient)
    let mut coord_cells: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_latent];
    for j in 0..j_count {
        for d in 0..d_count {
            let cell = (j * d_count + d) as u32;
            for &(i, c) in layout.row(j, d) {
                coord_cells[i as usize].push((cell, c));
            }
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut z = vec![0.0; n_latent];
    let mut theta: Vec<f64> = (0..cells)
        .map(|cell| layout.theta(&z, cell / d_count, cell % d_count))
        .collect();
    let mut tau_u = spec.include_spatial.then(|| spec.hyperprior_upsilon.mean());
    let mut tau_n = spec.include_exchangeable.then(|| spec.hyperprior_nu.mean());

    let ll_cell = |cell: usize, t: f64| -> f64 {
        let n = sample_n[cell];
        if n > 0.0 {
            sample_y[cell] * t - n * log1p_exp(t)
        } else {
            0.0
        }
    };

    let fixed_range = layout.fixed_range();
    let nu_range = layout.nu_range();
    let ups_range = layout.upsilon_range();
    let prior_sd = spec.fixed_effect_prior_sd;
    let icar = problem.icar.as_ref();

    let mut step = vec![config.initial_step; n_latent];
    let mut accept_count = vec![0u32; n_latent];
    let adapt_window = 50;

    let mut p_acc = Accumulator::new(cells);
    let mut z_acc = Accumulator::new(n_latent);
    let mut tau_u_samples = Vec::new();
    let mut tau_n_samples = Vec::new();
    let mut monitors: Vec<Vec<f64>> = Vec::new(); // filled lazily below
    let monitor_cells: Vec<usize> = (0..cells.min(3)).collect();
    let store_stride = kept_total.div_ceil(config.max_stored_draws.max(1)).max(1);
    let mut stored: Vec<CellGrid<f64>> = Vec::new();
    let mut kept_index = 0usize;

    let normal = rand_distr::StandardNormal;
    for sweep in 0..config.sweeps {
        // refresh the cached linear predictor periodically
        if sweep % 512 == 0 {
            for (cell, t) in theta.iter_mut().enumerate() {
                *t = layout.theta(&z, cell / d_count, cell % d_count);
            }
        }

        // latent coordinate updates
        for i in 0..n_latent {
            let exact_conditional = match (&nu_range, tau_n) {
                (Some(r), Some(tau)) if r.contains(&i) => {
                    // single-cell effect; exact Gaussian draw when no data
                    let (cell, _) = coord_cells[i][0];
                    if sample_n[cell as usize] == 0.0 {
                        Some((0.0, 1.0 / tau.sqrt()))
                    } else {
                        None
                    }
                }
                _ => None,
            };
            if let Some((mean, sd)) = exact_conditional {
                let old = z[i];
                let new = mean + sd * rng.sample::<f64, _>(normal);
                z[i] = new;
                for &(cell, c) in &coord_cells[i] {
                    theta[cell as usize] += c * (new - old);
                }
                accept_count[i] += 1;
                continue;
            }

            let old = z[i];
            let proposal = old + step[i] * rng.sample::<f64, _>(normal);
            let mut delta = 0.0;
            for &(cell, c) in &coord_cells[i] {
                let t_old = theta[cell as usize];
                delta += ll_cell(cell as usize, t_old + c * (proposal - old))
                    - ll_cell(cell as usize, t_old);
            }
            // prior term
            if fixed_range.contains(&i) {
                delta += (old * old - proposal * proposal) / (2.0 * prior_sd * prior_sd);
            } else if nu_range.as_ref().is_some_and(|r| r.contains(&i)) {
                let tau = tau_n.unwrap();
                delta += 0.5 * tau * (old * old - proposal * proposal);
            } else if let Some(r) = ups_range.as_ref() {
                if r.contains(&i) {
                    let tau = tau_u.unwrap();
                    let d = i - r.start;
                    let mut quad_delta = 0.0;
                    for &other in icar.unwrap().neighbors(d) {
                        let u_other = z[r.start + other];
                        quad_delta += (proposal - u_other).powi(2) - (old - u_other).powi(2);
                    }
                    delta -= 0.5 * tau * quad_delta;
                }
            }
            if delta >= 0.0 || rng.random::<f64>().ln() < delta {
                z[i] = proposal;
                for &(cell, c) in &coord_cells[i] {
                    theta[cell as usize] += c * (proposal - old);
                }
                accept_count[i] += 1;
            }
        }

        // centering move: shuttle the upsilon mean into the intercept
        if let Some(r) = ups_range.as_ref() {
            let mean_u: f64 = z[r.clone()].iter().sum::<f64>() / d_count as f64;
            let b0 = layout.beta0_index();
            let old0 = z[b0];
            let new0 = old0 + mean_u;
            let delta = (old0 * old0 - new0 * new0) / (2.0 * prior_sd * prior_sd);
            if delta >= 0.0 || rng.random::<f64>().ln() < delta {
                for i in r.clone() {
                    z[i] -= mean_u;
                }
                z[b0] = new0;
                // theta is unchanged by construction
            }
        }

        // conjugate precision updates
        if let (Some(r), Some(prior)) = (nu_range.as_ref(), tau_n.map(|_| spec.hyperprior_nu)) {
            let ss: f64 = z[r.clone()].iter().map(|v| v * v).sum();
            let shape = prior.shape + r.len() as f64 / 2.0;
            let rate = prior.rate + ss / 2.0;
            let draw = rand_distr::Gamma::new(shape, 1.0 / rate)
                .map_err(|e| Error::Numerical(e.to_string()))?
                .sample(&mut rng);
            tau_n = Some(draw.max(1e-12));
        }
        if let (Some(r), Some(prior)) = (ups_range.as_ref(), tau_u.map(|_| spec.hyperprior_upsilon))
        {
            let icar = icar.unwrap();
            let quad = icar.quad_form(&z[r.clone()]);
            let shape = prior.shape + icar.rank() as f64 / 2.0;
            let rate = prior.rate + quad / 2.0;
            let draw = rand_distr::Gamma::new(shape, 1.0 / rate)
                .map_err(|e| Error::Numerical(e.to_string()))?
                .sample(&mut rng);
            tau_u = Some(draw.max(1e-12));
        }

        // step-size adaptation during burn-in
        if sweep < config.burn_in && (sweep + 1) % adapt_window == 0 {
            for (s, a) in step.iter_mut().zip(&mut accept_count) {
                let rate = *a as f64 / adapt_window as f64;
                *s = (*s * ((rate - 0.44) * 1.0).exp()).clamp(1e-3, 50.0);
                *a = 0;
            }
        } else if (sweep + 1) % adapt_window == 0 {
            accept_count.fill(0);
        }

        // record kept draws
        if sweep >= config.burn_in && (sweep - config.burn_in).is_multiple_of(config.thin) {
            p_acc.push(theta.iter().map(|&t| sigmoid(t)));
            z_acc.push(z.iter().copied());
            if let Some(t) = tau_u {
                tau_u_samples.push(t);
            }
            if let Some(t) = tau_n {
                tau_n_samples.push(t);
            }
            if monitors.is_empty() {
                monitors = vec![Vec::new(); monitor_cells.len() + 1];
            }
            for (mi, &cell) in monitor_cells.iter().enumerate() {
                monitors[mi].push(theta[cell]);
            }
            let b0 = layout.beta0_index();
            let last = monitors.len() - 1;
            monitors[last].push(z[b0]);
            if kept_index.is_multiple_of(store_stride) && stored.len() < config.max_stored_draws {
                stored.push(CellGrid::from_vec(j_count, d_count, theta.clone()));
            }
            kept_index += 1;
        }
    }

    // diagnostics
    let mut max_rhat: f64 = 0.0;
    for series in monitors.iter().chain(
        [&tau_u_samples, &tau_n_samples]
            .into_iter()
            .filter(|s| !s.is_empty()),
    ) {
        let r = split_rhat(series);
        if r.is_finite() {
            max_rhat = max_rhat.max(r);
        }
    }
    let mut warnings = Vec::new();
    if max_rhat > 1.1 {
        warnings.push(format!(
            "split-Rhat {max_rhat:.3} exceeds 1.1 on a monitored quantity"
        ));
    }

    let cell_mean = CellGrid::from_vec(j_count, d_count, p_acc.mean.clone());
    let cell_var = CellGrid::from_vec(
        j_count,
        d_count,
        (0..cells).map(|i| p_acc.variance(i).max(1e-300)).collect(),
    );

    let mut latent_mode = layout.unpack(&z_acc.mean);
    latent_mode.recenter_spatial();

    let mean_tau_u = tau_u.map(|_| tau_u_samples.iter().sum::<f64>() / tau_u_samples.len() as f64);
    let mean_tau_n = tau_n.map(|_| tau_n_samples.iter().sum::<f64>() / tau_n_samples.len() as f64);
    let variant = if spec.include_spatial {
        IcarVariant::Softened(crate::model::logpost::ICAR_SOFT_JITTER)
    } else {
        IcarVariant::Exact
    };
    let mut weights = vec![0.0; cells];
    let packed_mean = layout.pack(&latent_mode)?;
    let latent_precision =
        problem.assemble_precision(&packed_mean, mean_tau_u, mean_tau_n, variant, &mut weights);

    Ok(FittedPosterior {
        cell_mean,
        cell_var,
        latent_mode,
        latent_precision,
        hyper_grid: vec![HyperPoint {
            tau_upsilon: mean_tau_u,
            tau_nu: mean_tau_n,
            log_weight: 0.0,
        }],
        diagnostics: FitDiagnostics {
            engine: EngineKind::Mcmc,
            converged: max_rhat <= 1.1,
            iterations: kept_index,
            grid_size: 1,
            max_rhat: Some(max_rhat),
            warnings,
        },
        joint: JointPosterior::ThetaDraws(stored),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{synth_population, SynthOptions};
    use crate::sampling::draw_survey;

    fn quick_chain(seed: u64) -> ChainConfig {
        ChainConfig {
            sweeps: 6_000,
            burn_in: 2_000,
            thin: 2,
            seed,
            ..ChainConfig::default()
        }
    }

    #[test]
    fn conjugate_single_cell_close_to_exact() {
        let pop = crate::population::Population::new(
            vec!["a".into()],
            vec!["g".into()],
            crate::cells::CellGrid::from_vec(1, 1, vec![10_000u64]),
            crate::cells::CellGrid::from_vec(1, 1, vec![3_000u64]),
        )
        .unwrap();
        let data = SampleRealization {
            fraction: 0.01,
            sample_sizes: crate::cells::CellGrid::from_vec(1, 1, vec![100]),
            outcomes: crate::cells::CellGrid::from_vec(1, 1, vec![30]),
            seed: 0,
        };
        let spec = ModelSpec::fixed_only();
        let cfg = ChainConfig {
            sweeps: 30_000,
            burn_in: 5_000,
            thin: 2,
            seed: 11,
            ..Default::default()
        };
        let fit = fit_mcmc(&spec, &data, &pop, None, None, &cfg).unwrap();
        let (exact_mean, _) = crate::model::laplace::tests::exact_single_cell_moments(
            30.0,
            100.0,
            spec.fixed_effect_prior_sd,
        );
        let got = *fit.cell_mean.get(0, 0);
        assert!(
            (got - exact_mean).abs() < 0.005,
            "mcmc mean {got} vs exact {exact_mean}"
        );
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let opts = SynthOptions {
            d_count: 6,
            j_count: 2,
            prevalence_profile: vec![0.2, 0.3],
            headcount_range: (50, 150),
            seed: 4,
        };
        let (pop, x, g) = synth_population(&opts).unwrap();
        let data = draw_survey(&pop, 0.3, 7, 0).unwrap();
        let spec = ModelSpec::s4();
        let a = fit_mcmc(&spec, &data, &pop, Some(&x), Some(&g), &quick_chain(5)).unwrap();
        let b = fit_mcmc(&spec, &data, &pop, Some(&x), Some(&g), &quick_chain(5)).unwrap();
        assert_eq!(a.cell_mean.as_slice(), b.cell_mean.as_slice());
        assert_eq!(a.cell_var.as_slice(), b.cell_var.as_slice());
        let c = fit_mcmc(&spec, &data, &pop, Some(&x), Some(&g), &quick_chain(6)).unwrap();
        assert_ne!(a.cell_mean.as_slice(), c.cell_mean.as_slice());
    }

    #[test]
    fn prior_only_run_recovers_hyperprior_moments() {
        // no data: tau_nu samples must match their Gamma(1, 0.1) prior
        let opts = SynthOptions {
            d_count: 8,
            j_count: 2,
            prevalence_profile: vec![0.2, 0.3],
            headcount_range: (50, 150),
            seed: 1,
        };
        let (pop, _, _) = synth_population(&opts).unwrap();
        let data = SampleRealization {
            fraction: 0.01,
            sample_sizes: crate::cells::CellGrid::filled(2, 8, 0u64),
            outcomes: crate::cells::CellGrid::filled(2, 8, 0u64),
            seed: 0,
        };
        let spec = ModelSpec::s2();
        assert_eq!(spec.hyperprior_nu.shape, 1.0);
        assert_eq!(spec.hyperprior_nu.rate, 0.1);
        let cfg = ChainConfig {
            sweeps: 24_000,
            burn_in: 4_000,
            thin: 1,
            seed: 3,
            ..Default::default()
        };
        let fit = fit_mcmc(&spec, &data, &pop, None, None, &cfg).unwrap();
        let hyper = fit.hyper_grid[0];
        // prior mean 10, prior sd 10; the kept chain has ~20k draws with some
        // autocorrelation, so allow a generous Monte Carlo band
        assert!(
            (hyper.tau_nu.unwrap() - 10.0).abs() < 1.0,
            "prior-only tau_nu mean {:?}",
            hyper.tau_nu
        );
        // second moment: prior sd is sqrt(shape)/rate = 10
        let draws = match &fit.joint {
            crate::model::JointPosterior::ThetaDraws(d) => d.len(),
            _ => 0,
        };
        assert!(draws > 100);
    }
}
