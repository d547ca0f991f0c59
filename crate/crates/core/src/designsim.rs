//! Design-based validation: repeated sampling from the true population with
//! no model-truth assumption, estimation under scenarios of ascending
//! complexity, and accuracy metrics against the census truth.

use rayon::prelude::*;

use crate::cells::CellGrid;
use crate::error::{Error, Result};
use crate::model::{CellPosteriorEngine, LaplaceEngine, LaplaceOptions, ModelSpec};
use crate::population::{AdjacencyGraph, CovariateMatrix, Population};
use crate::reliability::{eligibility, estimated_shares, true_shares, RSE_THRESHOLD};
use crate::sampling::{draw_survey, streams};

/// Estimation scenarios of the validation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ScenarioId {
    /// Direct (design-based) estimation: the sample proportion.
    S1,
    /// Hierarchical Bayes without covariates.
    S2,
    /// Hierarchical Bayes with covariates.
    S3,
    /// Hierarchical Bayes with covariates and the spatial structure.
    S4,
}

impl ScenarioId {
    pub fn parse(s: &str) -> Result<ScenarioId> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" => Ok(ScenarioId::S1),
            "S2" => Ok(ScenarioId::S2),
            "S3" => Ok(ScenarioId::S3),
            "S4" => Ok(ScenarioId::S4),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::S1 => "S1",
            ScenarioId::S2 => "S2",
            ScenarioId::S3 => "S3",
            ScenarioId::S4 => "S4",
        }
    }

    fn stream_tag(&self) -> u64 {
        match self {
            ScenarioId::S1 => 1,
            ScenarioId::S2 => 2,
            ScenarioId::S3 => 3,
            ScenarioId::S4 => 4,
        }
    }
}

/// A scenario with its estimator structure (absent for direct estimation).
#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: ScenarioId,
    pub model_spec: Option<ModelSpec>,
}

impl Scenario {
    pub fn from_id(id: ScenarioId) -> Scenario {
        let model_spec = match id {
            ScenarioId::S1 => None,
            ScenarioId::S2 => Some(ModelSpec::s2()),
            ScenarioId::S3 => Some(ModelSpec::s3()),
            ScenarioId::S4 => Some(ModelSpec::s4()),
        };
        Scenario { id, model_spec }
    }
}

/// Variance of the direct estimator of a proportion: Ybar(1-Ybar)/(f N).
pub fn direct_variance(y_bar: f64, fraction: f64, headcount: u64) -> Result<f64> {
    if !(y_bar > 0.0 && y_bar < 1.0) {
        return Err(Error::Validation(format!(
            "direct variance needs 0 < Ybar < 1, got {y_bar}"
        )));
    }
    let denom = fraction * headcount as f64;
    if denom <= 0.0 || denom.is_nan() {
        return Err(Error::Validation("direct variance needs f * N > 0".into()));
    }
    Ok(y_bar * (1.0 - y_bar) / denom)
}

/// Theoretical RSE of the direct estimator. Degenerate truths are mapped to
/// sentinels: Ybar = 0 gives +inf (always suppressed if it were eligible),
/// Ybar = 1 gives 0.
pub fn direct_rse(y_bar: f64, fraction: f64, headcount: u64) -> f64 {
    if y_bar <= 0.0 {
        return f64::INFINITY;
    }
    if y_bar >= 1.0 {
        return 0.0;
    }
    direct_variance(y_bar, fraction, headcount)
        .map(|v| v.sqrt() / y_bar)
        .unwrap_or(f64::INFINITY)
}

/// Mean relative deviation of estimated RSEs from the realized one.
pub fn rseb(estimated_rse_per_rep: &[f64], true_rse: f64) -> Result<f64> {
    if true_rse <= 0.0 || true_rse.is_nan() {
        return Err(Error::Validation("rseb needs a positive true RSE".into()));
    }
    if estimated_rse_per_rep.is_empty() {
        return Err(Error::Validation(
            "rseb needs at least one replication".into(),
        ));
    }
    let mean: f64 = estimated_rse_per_rep.iter().sum::<f64>() / estimated_rse_per_rep.len() as f64;
    Ok((mean - true_rse) / true_rse)
}

/// Per-cell accuracy metrics; `None` marks undefined entries (degenerate
/// truth, missing estimates, or columns the scenario does not report).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellMetrics {
    pub rmse: Option<f64>,
    pub bias: Option<f64>,
    pub arb: Option<f64>,
    pub rse: Option<f64>,
    pub rseb: Option<f64>,
    /// Replications without a usable estimate for this cell.
    pub missing_reps: usize,
}

/// Aggregated row: unweighted (or headcount-weighted) means over the cells
/// of one group, with the per-group suppression-loss columns.
#[derive(Debug, Clone, Default)]
pub struct GroupMetrics {
    pub rmse: Option<f64>,
    pub bias: Option<f64>,
    pub arb: Option<f64>,
    pub rse: Option<f64>,
    pub rseb: Option<f64>,
    pub loss_true: Option<f64>,
    pub risk_true: Option<f64>,
    pub loss_est: Option<f64>,
    pub risk_est: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub scenario: ScenarioId,
    pub fraction: f64,
    pub replications: usize,
    pub per_cell: CellGrid<CellMetrics>,
    /// One row per group.
    pub per_group: Vec<GroupMetrics>,
    /// The all-groups row.
    pub overall: GroupMetrics,
    /// Cells with zero truth, excluded from relative metrics.
    pub zero_truth_cells: usize,
    /// Replications dropped entirely (model fit failures).
    pub failed_replications: usize,
    /// Theoretical direct-estimator RSE (S1 only).
    pub s1_theory_rse: Option<CellGrid<f64>>,
}

/// Streaming accumulator for the error metrics; estimates arrive one
/// replication at a time so the reduction order is fixed.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    truth: CellGrid<f64>,
    count: CellGrid<u32>,
    sum_err: CellGrid<f64>,
    sum_sq_err: CellGrid<f64>,
    sum_abs_rel: CellGrid<f64>,
    sum_est_rse: CellGrid<f64>,
    count_est_rse: CellGrid<u32>,
    replications: usize,
}

impl MetricsAccumulator {
    pub fn new(truth: CellGrid<f64>) -> MetricsAccumulator {
        let (j, d) = (truth.j_count(), truth.d_count());
        MetricsAccumulator {
            truth,
            count: CellGrid::filled(j, d, 0),
            sum_err: CellGrid::filled(j, d, 0.0),
            sum_sq_err: CellGrid::filled(j, d, 0.0),
            sum_abs_rel: CellGrid::filled(j, d, 0.0),
            sum_est_rse: CellGrid::filled(j, d, 0.0),
            count_est_rse: CellGrid::filled(j, d, 0),
            replications: 0,
        }
    }

    /// Record one replication's estimates (`None` = missing for that cell)
    /// and optionally its per-cell estimated RSEs.
    pub fn push(&mut self, estimates: &CellGrid<Option<f64>>, est_rse: Option<&CellGrid<f64>>) {
        self.replications += 1;
        for (j, d, est) in estimates.iter_cells() {
            if let Some(e) = est {
                let t = *self.truth.get(j, d);
                let err = e - t;
                *self.count.get_mut(j, d) += 1;
                *self.sum_err.get_mut(j, d) += err;
                *self.sum_sq_err.get_mut(j, d) += err * err;
                if t > 0.0 {
                    *self.sum_abs_rel.get_mut(j, d) += err.abs() / t;
                }
                if let Some(r) = est_rse {
                    *self.sum_est_rse.get_mut(j, d) += *r.get(j, d);
                    *self.count_est_rse.get_mut(j, d) += 1;
                }
            }
        }
    }

    pub fn replications(&self) -> usize {
        self.replications
    }

    /// Per-cell metrics. `report_bias` is false for the direct scenario,
    /// whose bias/ARB columns are structurally missing.
    pub fn finish(&self, report_bias: bool) -> CellGrid<CellMetrics> {
        CellGrid::from_fn(self.truth.j_count(), self.truth.d_count(), |j, d| {
            let n = *self.count.get(j, d);
            let missing = self.replications - n as usize;
            if n == 0 {
                return CellMetrics {
                    missing_reps: missing,
                    ..CellMetrics::default()
                };
            }
            let nf = n as f64;
            let t = *self.truth.get(j, d);
            let rmse = (self.sum_sq_err.get(j, d) / nf).sqrt();
            let bias = self.sum_err.get(j, d) / nf;
            let arb = (t > 0.0).then(|| self.sum_abs_rel.get(j, d) / nf);
            let rse = (t > 0.0).then(|| rmse / t);
            let rseb = match (*self.count_est_rse.get(j, d), rse) {
                (m, Some(r)) if m > 0 && r > 0.0 => {
                    Some((self.sum_est_rse.get(j, d) / m as f64 - r) / r)
                }
                _ => None,
            };
            CellMetrics {
                rmse: Some(rmse),
                bias: report_bias.then_some(bias),
                arb: if report_bias { arb } else { None },
                rse,
                rseb,
                missing_reps: missing,
            }
        })
    }
}

/// Per-group suppression-loss bookkeeping across replications: the loss is
/// the share of the group's eligible cells that are suppressed, and the risk
/// is the share of replications with any suppression in the group.
#[derive(Debug, Clone)]
struct GroupLossAccumulator {
    sums: Vec<f64>,
    exceed: Vec<u32>,
    reps: usize,
}

impl GroupLossAccumulator {
    fn new(groups: usize) -> GroupLossAccumulator {
        // one slot per group plus the overall slot
        GroupLossAccumulator {
            sums: vec![0.0; groups + 1],
            exceed: vec![0; groups + 1],
            reps: 0,
        }
    }

    fn push(&mut self, per_group: &[f64], overall: f64) {
        self.reps += 1;
        for (g, &l) in per_group.iter().enumerate() {
            self.sums[g] += l;
            if l > 0.0 {
                self.exceed[g] += 1;
            }
        }
        let last = self.sums.len() - 1;
        self.sums[last] += overall;
        if overall > 0.0 {
            self.exceed[last] += 1;
        }
    }

    fn mean_loss(&self, slot: usize) -> Option<f64> {
        (self.reps > 0).then(|| self.sums[slot] / self.reps as f64)
    }

    fn risk(&self, slot: usize) -> Option<f64> {
        (self.reps > 0).then(|| self.exceed[slot] as f64 / self.reps as f64)
    }
}

/// Group-level normalized suppression loss for one RSE grid: per group, the
/// suppressed share of eligible cells (0 when the group has none eligible),
/// plus the overall share.
fn group_losses(rse: &CellGrid<f64>, eligible: &CellGrid<bool>) -> (Vec<f64>, f64) {
    let j_count = rse.j_count();
    let mut eligible_counts = vec![0u32; j_count];
    let mut suppressed_counts = vec![0u32; j_count];
    for (j, d, &r) in rse.iter_cells() {
        if *eligible.get(j, d) {
            eligible_counts[j] += 1;
            if r > RSE_THRESHOLD {
                suppressed_counts[j] += 1;
            }
        }
    }
    let per_group: Vec<f64> = eligible_counts
        .iter()
        .zip(&suppressed_counts)
        .map(|(&e, &s)| if e > 0 { s as f64 / e as f64 } else { 0.0 })
        .collect();
    let total_eligible: u32 = eligible_counts.iter().sum();
    let total_suppressed: u32 = suppressed_counts.iter().sum();
    let overall = if total_eligible > 0 {
        total_suppressed as f64 / total_eligible as f64
    } else {
        0.0
    };
    (per_group, overall)
}

fn aggregate_group(
    per_cell: &CellGrid<CellMetrics>,
    pop: &Population,
    weighted: bool,
    cells_of: impl Iterator<Item = (usize, usize)>,
) -> GroupMetrics {
    let mut acc = GroupMetrics::default();
    let mut w_rmse = 0.0;
    let mut w_bias = 0.0;
    let mut w_arb = 0.0;
    let mut w_rse = 0.0;
    let mut w_rseb = 0.0;
    let (mut s_rmse, mut s_bias, mut s_arb, mut s_rse, mut s_rseb) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (j, d) in cells_of {
        let m = per_cell.get(j, d);
        let w = if weighted {
            pop.headcount(j, d) as f64
        } else {
            1.0
        };
        if let Some(v) = m.rmse {
            s_rmse += w * v;
            w_rmse += w;
        }
        if let Some(v) = m.bias {
            s_bias += w * v;
            w_bias += w;
        }
        if let Some(v) = m.arb {
            s_arb += w * v;
            w_arb += w;
        }
        if let Some(v) = m.rse {
            s_rse += w * v;
            w_rse += w;
        }
        if let Some(v) = m.rseb {
            s_rseb += w * v;
            w_rseb += w;
        }
    }
    acc.rmse = (w_rmse > 0.0).then(|| s_rmse / w_rmse);
    acc.bias = (w_bias > 0.0).then(|| s_bias / w_bias);
    acc.arb = (w_arb > 0.0).then(|| s_arb / w_arb);
    acc.rse = (w_rse > 0.0).then(|| s_rse / w_rse);
    acc.rseb = (w_rseb > 0.0).then(|| s_rseb / w_rseb);
    acc
}

/// Options controlling a scenario run.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub replications: usize,
    pub master_seed: u64,
    /// Population-weighted group aggregation instead of unweighted means.
    pub weighted_groups: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            replications: 400,
            master_seed: 0,
            weighted_groups: false,
        }
    }
}

/// Run one scenario at one sampling fraction against an arbitrary engine
/// (None = direct estimation). The engine path records per-replication
/// losses under both eligibility rules; the direct path computes its loss
/// from the theoretical variance formula.
pub fn run_scenario_with<E>(
    pop: &Population,
    scenario: ScenarioId,
    engine: Option<&E>,
    fraction: f64,
    opts: &SimOptions,
) -> Result<MetricsTable>
where
    E: CellPosteriorEngine + ?Sized,
{
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if opts.replications == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    let (j_count, d_count) = (pop.j_count(), pop.d_count());
    let truth = pop.prevalence_grid();
    let eligible_true = eligibility(&true_shares(pop));

    enum RepResult {
        Direct(CellGrid<Option<f64>>),
        Fitted {
            estimates: CellGrid<Option<f64>>,
            est_rse: CellGrid<f64>,
            losses_true: (Vec<f64>, f64),
            losses_est: (Vec<f64>, f64),
        },
        Failed(String),
    }

    let reps: Vec<RepResult> = (0..opts.replications as u64)
        .into_par_iter()
        .map(|b| {
            let stream = streams::sim_rep(scenario.stream_tag(), b);
            let data = match draw_survey(pop, fraction, opts.master_seed, stream) {
                Ok(d) => d,
                Err(e) => return RepResult::Failed(e.to_string()),
            };
            match engine {
                None => {
                    let estimates = CellGrid::from_fn(j_count, d_count, |j, d| {
                        let n = *data.sample_sizes.get(j, d);
                        (n > 0).then(|| *data.outcomes.get(j, d) as f64 / n as f64)
                    });
                    RepResult::Direct(estimates)
                }
                Some(engine) => match engine.fit_cells(&data, pop) {
                    Ok(summaries) => {
                        let est_rse = CellGrid::from_fn(j_count, d_count, |j, d| {
                            summaries.var.get(j, d).sqrt() / summaries.mean.get(j, d)
                        });
                        let eligible_est = eligibility(&estimated_shares(pop, &summaries.mean));
                        let losses_true = group_losses(&est_rse, &eligible_true);
                        let losses_est = group_losses(&est_rse, &eligible_est);
                        let estimates = summaries.mean.map(|&m| Some(m));
                        RepResult::Fitted {
                            estimates,
                            est_rse,
                            losses_true,
                            losses_est,
                        }
                    }
                    Err(e) => RepResult::Failed(e.to_string()),
                },
            }
        })
        .collect();

    let failed: Vec<&String> = reps
        .iter()
        .filter_map(|r| match r {
            RepResult::Failed(msg) => Some(msg),
            _ => None,
        })
        .collect();
    if failed.len() * 20 >= opts.replications {
        return Err(Error::TooManyFitFailures {
            failed: failed.len(),
            total: opts.replications,
            first_cause: failed[0].clone(),
        });
    }

    let mut acc = MetricsAccumulator::new(truth.clone());
    let mut loss_true_acc = GroupLossAccumulator::new(j_count);
    let mut loss_est_acc = GroupLossAccumulator::new(j_count);
    for rep in &reps {
        match rep {
            RepResult::Direct(estimates) => acc.push(estimates, None),
            RepResult::Fitted {
                estimates,
                est_rse,
                losses_true,
                losses_est,
            } => {
                acc.push(estimates, Some(est_rse));
                loss_true_acc.push(&losses_true.0, losses_true.1);
                loss_est_acc.push(&losses_est.0, losses_est.1);
            }
            RepResult::Failed(_) => {}
        }
    }

    let is_direct = engine.is_none();
    let per_cell = acc.finish(!is_direct);

    // direct-estimation loss from the theoretical variance formula
    let s1_theory_rse = is_direct.then(|| {
        CellGrid::from_fn(j_count, d_count, |j, d| {
            direct_rse(*truth.get(j, d), fraction, pop.headcount(j, d))
        })
    });
    let s1_losses = s1_theory_rse
        .as_ref()
        .map(|rse| group_losses(rse, &eligible_true));

    let mut per_group = Vec::with_capacity(j_count);
    for j in 0..j_count {
        let mut g = aggregate_group(
            &per_cell,
            pop,
            opts.weighted_groups,
            (0..d_count).map(move |d| (j, d)),
        );
        match (&s1_losses, is_direct) {
            (Some((per, _)), true) => {
                g.loss_true = Some(per[j]);
                g.risk_true = Some(if per[j] > 0.0 { 1.0 } else { 0.0 });
            }
            _ => {
                g.loss_true = loss_true_acc.mean_loss(j);
                g.risk_true = loss_true_acc.risk(j);
                g.loss_est = loss_est_acc.mean_loss(j);
                g.risk_est = loss_est_acc.risk(j);
            }
        }
        per_group.push(g);
    }
    let mut overall = aggregate_group(
        &per_cell,
        pop,
        opts.weighted_groups,
        (0..j_count).flat_map(move |j| (0..d_count).map(move |d| (j, d))),
    );
    match (&s1_losses, is_direct) {
        (Some((_, all)), true) => {
            overall.loss_true = Some(*all);
            overall.risk_true = Some(if *all > 0.0 { 1.0 } else { 0.0 });
        }
        _ => {
            overall.loss_true = loss_true_acc.mean_loss(j_count);
            overall.risk_true = loss_true_acc.risk(j_count);
            overall.loss_est = loss_est_acc.mean_loss(j_count);
            overall.risk_est = loss_est_acc.risk(j_count);
        }
    }

    let zero_truth_cells = truth.as_slice().iter().filter(|&&t| t <= 0.0).count();
    Ok(MetricsTable {
        scenario,
        fraction,
        replications: opts.replications,
        per_cell,
        per_group,
        overall,
        zero_truth_cells,
        failed_replications: failed.len(),
        s1_theory_rse,
    })
}

/// Production entry point: build the scenario's Laplace engine and run.
pub fn run_scenario(
    pop: &Population,
    covariates: Option<&CovariateMatrix>,
    graph: Option<&AdjacencyGraph>,
    scenario: &Scenario,
    fraction: f64,
    opts: &SimOptions,
    laplace: &LaplaceOptions,
) -> Result<MetricsTable> {
    match &scenario.model_spec {
        None => run_scenario_with::<LaplaceEngine>(pop, scenario.id, None, fraction, opts),
        Some(spec) => {
            let engine = LaplaceEngine {
                spec,
                covariates: spec.include_covariates.then_some(covariates).flatten(),
                graph: spec.include_spatial.then_some(graph).flatten(),
                options: laplace.clone(),
            };
            run_scenario_with(pop, scenario.id, Some(&engine), fraction, opts)
        }
    }
}

/// Per-cell and per-group RMSE ratios of two runs (a / b).
#[derive(Debug, Clone)]
pub struct EfficiencyRatio {
    pub per_cell: CellGrid<Option<f64>>,
    pub per_group: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

pub fn efficiency_ratio(a: &MetricsTable, b: &MetricsTable) -> Result<EfficiencyRatio> {
    if a.per_cell.j_count() != b.per_cell.j_count() || a.per_cell.d_count() != b.per_cell.d_count()
    {
        return Err(Error::Validation(
            "efficiency ratio needs aligned tables".into(),
        ));
    }
    let per_cell = CellGrid::from_fn(a.per_cell.j_count(), a.per_cell.d_count(), |j, d| {
        match (a.per_cell.get(j, d).rmse, b.per_cell.get(j, d).rmse) {
            (Some(x), Some(y)) if y > 0.0 => Some(x / y),
            _ => None,
        }
    });
    let per_group = a
        .per_group
        .iter()
        .zip(&b.per_group)
        .map(|(x, y)| match (x.rmse, y.rmse) {
            (Some(x), Some(y)) if y > 0.0 => Some(x / y),
            _ => None,
        })
        .collect();
    let overall = match (a.overall.rmse, b.overall.rmse) {
        (Some(x), Some(y)) if y > 0.0 => Some(x / y),
        _ => None,
    };
    Ok(EfficiencyRatio {
        per_cell,
        per_group,
        overall,
    })
}
