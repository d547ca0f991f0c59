//! Cell reliability against the official-statistics rule: relative posterior
//! SE above 0.2 suppresses a cell, and the rule applies only to cells
//! representing at least 3 percent of their area's population.

use crate::cells::CellGrid;
use crate::error::{Error, Result};
use crate::model::CellSummaries;
use crate::population::Population;

/// Reliability threshold: suppression when RSE is strictly above this.
pub const RSE_THRESHOLD: f64 = 0.2;
/// Eligibility rule: cell share of the area population at least this.
pub const ELIGIBILITY_SHARE: f64 = 0.03;

/// Which loss functional drives decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Population-weighted suppression rate: N^{-1} sum of N_d over
    /// suppressed eligible cells.
    Weighted,
    /// Raw count of suppressed eligible cells.
    Count,
}

/// Relative standard error sqrt(var) / mean.
pub fn rse(mean: f64, var: f64) -> Result<f64> {
    if mean <= 0.0 || mean.is_nan() {
        return Err(Error::Validation(format!(
            "rse needs a positive mean, got {mean}"
        )));
    }
    if var < 0.0 {
        return Err(Error::Validation(format!(
            "rse needs a non-negative variance, got {var}"
        )));
    }
    Ok(var.sqrt() / mean)
}

pub fn rse_grid(summaries: &CellSummaries) -> Result<CellGrid<f64>> {
    let mut out = CellGrid::filled(summaries.mean.j_count(), summaries.mean.d_count(), 0.0f64);
    for (j, d, &m) in summaries.mean.iter_cells() {
        *out.get_mut(j, d) = rse(m, *summaries.var.get(j, d))?;
    }
    Ok(out)
}

/// Cell share of the area population under the true counts: Y_jd / N_d.
pub fn true_shares(pop: &Population) -> CellGrid<f64> {
    CellGrid::from_fn(pop.j_count(), pop.d_count(), |j, d| {
        pop.outcome(j, d) as f64 / pop.area_total(d) as f64
    })
}

/// Estimated cell share of the area population: p_hat * N_jd / N_d.
pub fn estimated_shares(pop: &Population, cell_mean: &CellGrid<f64>) -> CellGrid<f64> {
    CellGrid::from_fn(pop.j_count(), pop.d_count(), |j, d| {
        cell_mean.get(j, d) * pop.headcount(j, d) as f64 / pop.area_total(d) as f64
    })
}

/// Eligibility mask: share at least `ELIGIBILITY_SHARE` (inclusive).
pub fn eligibility(shares: &CellGrid<f64>) -> CellGrid<bool> {
    shares.map(|&s| s >= ELIGIBILITY_SHARE)
}

/// Suppression mask: RSE strictly above the threshold.
pub fn suppression(rse: &CellGrid<f64>) -> CellGrid<bool> {
    rse.map(|&r| r > RSE_THRESHOLD)
}

/// Population-weighted loss: N^{-1} sum over eligible suppressed cells of N_d.
pub fn loss_weighted(rse: &CellGrid<f64>, eligible: &CellGrid<bool>, pop: &Population) -> f64 {
    let mut acc = 0.0;
    for (j, d, &r) in rse.iter_cells() {
        if *eligible.get(j, d) && r > RSE_THRESHOLD {
            acc += pop.area_total(d) as f64;
        }
    }
    acc / pop.grand_total() as f64
}

/// Count of suppressed eligible cells.
pub fn loss_count(rse: &CellGrid<f64>, eligible: &CellGrid<bool>) -> f64 {
    let mut acc = 0usize;
    for (j, d, &r) in rse.iter_cells() {
        if *eligible.get(j, d) && r > RSE_THRESHOLD {
            acc += 1;
        }
    }
    acc as f64
}

/// Suppressed eligible cells as a fraction of eligible cells (0 when no
/// cell is eligible). Useful as a normalized variant when kappa > 0.
pub fn loss_count_normalized(rse: &CellGrid<f64>, eligible: &CellGrid<bool>) -> f64 {
    let eligible_count = eligible.as_slice().iter().filter(|&&e| e).count();
    if eligible_count == 0 {
        return 0.0;
    }
    loss_count(rse, eligible) / eligible_count as f64
}

pub fn loss(
    kind: LossKind,
    rse: &CellGrid<f64>,
    eligible: &CellGrid<bool>,
    pop: &Population,
) -> f64 {
    match kind {
        LossKind::Weighted => loss_weighted(rse, eligible, pop),
        LossKind::Count => loss_count(rse, eligible),
    }
}

/// Full suppression audit of one fitted table.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub rse: CellGrid<f64>,
    pub eligible_true: CellGrid<bool>,
    pub eligible_est: CellGrid<bool>,
    pub loss_true: f64,
    pub loss_est: f64,
    /// (group, area) pairs suppressed under the true eligibility mask.
    pub suppressed_cells: Vec<(usize, usize)>,
}

pub fn loss_report(
    pop: &Population,
    summaries: &CellSummaries,
    kind: LossKind,
) -> Result<LossReport> {
    let rse = rse_grid(summaries)?;
    let eligible_true = eligibility(&true_shares(pop));
    let eligible_est = eligibility(&estimated_shares(pop, &summaries.mean));
    let loss_true = loss(kind, &rse, &eligible_true, pop);
    let loss_est = loss(kind, &rse, &eligible_est, pop);
    let mut suppressed_cells = Vec::new();
    for (j, d, &r) in rse.iter_cells() {
        if *eligible_true.get(j, d) && r > RSE_THRESHOLD {
            suppressed_cells.push((j, d));
        }
    }
    Ok(LossReport {
        rse,
        eligible_true,
        eligible_est,
        loss_true,
        loss_est,
        suppressed_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellGrid;
    use proptest::prelude::*;

    fn pop_two_areas() -> Population {
        // J = 1, areas with N_d = 100 and 300
        Population::new(
            vec!["a".into(), "b".into()],
            vec!["g".into()],
            CellGrid::from_vec(1, 2, vec![100, 300]),
            CellGrid::from_vec(1, 2, vec![50, 150]),
        )
        .unwrap()
    }

    #[test]
    fn rse_arithmetic() {
        assert!((rse(0.1, 0.025f64 * 0.025).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(rse(0.4, 0.0).unwrap(), 0.0);
        assert!(rse(0.0, 0.01).is_err());
        assert!(rse(-0.1, 0.01).is_err());
    }

    #[test]
    fn boundary_rse_is_not_suppressed() {
        // RSE exactly 0.2 stays published: the rule is strictly greater-than
        let rse_grid = CellGrid::from_vec(1, 2, vec![0.2f64, 0.2000000001]);
        let mask = suppression(&rse_grid);
        assert!(!*mask.get(0, 0));
        assert!(*mask.get(0, 1));
    }

    #[test]
    fn eligibility_boundary_is_inclusive() {
        // Y = 30 of N_d = 1000: share exactly 0.03 is eligible
        let shares = CellGrid::from_vec(1, 3, vec![0.03f64, 0.0299999, 0.0]);
        let mask = eligibility(&shares);
        assert!(*mask.get(0, 0));
        assert!(!*mask.get(0, 1));
        assert!(!*mask.get(0, 2));
    }

    #[test]
    fn estimated_share_definition() {
        let pop = pop_two_areas();
        let mean = CellGrid::from_vec(1, 2, vec![0.2f64, 0.05]);
        let est = estimated_shares(&pop, &mean);
        assert!((est.get(0, 0) - 0.2).abs() < 1e-12); // 0.2*100/100
        assert!((est.get(0, 1) - 0.05).abs() < 1e-12); // 0.05*300/300
    }

    #[test]
    fn weighted_loss_examples() {
        let pop = pop_two_areas();
        let eligible = CellGrid::filled(1, 2, true);
        // nothing suppressed
        let low = CellGrid::filled(1, 2, 0.1f64);
        assert_eq!(loss_weighted(&low, &eligible, &pop), 0.0);
        // only area 2 suppressed: 300/400
        let mixed = CellGrid::from_vec(1, 2, vec![0.1f64, 0.5]);
        assert!((loss_weighted(&mixed, &eligible, &pop) - 0.75).abs() < 1e-12);
        // everything suppressed in a J=1 table: sums to 1
        let high = CellGrid::filled(1, 2, 0.9f64);
        assert!((loss_weighted(&high, &eligible, &pop) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn count_loss_gates_on_eligibility() {
        let rse_grid = CellGrid::from_vec(1, 3, vec![0.9f64, 0.9, 0.1]);
        let eligible = CellGrid::from_vec(1, 3, vec![true, false, true]);
        assert_eq!(loss_count(&rse_grid, &eligible), 1.0);
        let none = CellGrid::filled(1, 3, 0.05f64);
        assert_eq!(loss_count(&none, &eligible), 0.0);
        let three = CellGrid::from_vec(1, 3, vec![0.5f64, 0.5, 0.5]);
        let all = CellGrid::filled(1, 3, true);
        assert_eq!(loss_count(&three, &all), 3.0);
        assert!((loss_count_normalized(&three, &eligible) - 1.0).abs() < 1e-12);
    }

    proptest! {
        /// Lowering any RSE never increases either loss; weighted loss stays
        /// in [0, 1] for J = 1 tables; with kappa = 0 the count and weighted
        /// decision rules agree.
        #[test]
        fn loss_monotone_and_bounded(
            rse_a in proptest::collection::vec(0.0f64..1.0, 6),
            drop_idx in 0usize..6,
            eligible in proptest::collection::vec(any::<bool>(), 6),
        ) {
            let pop = Population::new(
                (0..6).map(|i| format!("a{i}")).collect(),
                vec!["g".into()],
                CellGrid::from_vec(1, 6, vec![50, 100, 150, 200, 250, 300]),
                CellGrid::from_vec(1, 6, vec![10, 20, 30, 40, 50, 60]),
            ).unwrap();
            let grid_a = CellGrid::from_vec(1, 6, rse_a.clone());
            let mut rse_b = rse_a.clone();
            rse_b[drop_idx] *= 0.5;
            let grid_b = CellGrid::from_vec(1, 6, rse_b);
            let mask = CellGrid::from_vec(1, 6, eligible);

            let wa = loss_weighted(&grid_a, &mask, &pop);
            let wb = loss_weighted(&grid_b, &mask, &pop);
            let ca = loss_count(&grid_a, &mask);
            let cb = loss_count(&grid_b, &mask);
            prop_assert!(wb <= wa + 1e-15);
            prop_assert!(cb <= ca);
            prop_assert!((0.0..=1.0).contains(&wa));
            let eligible_count = mask.as_slice().iter().filter(|&&e| e).count() as f64;
            prop_assert!(ca >= 0.0 && ca <= eligible_count);
            // kappa = 0 equivalence of the decision rules
            prop_assert_eq!(ca > 0.0, wa > 0.0);
        }
    }
}
