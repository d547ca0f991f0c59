//! Survey realization machinery: binomial cell sample sizes, sampled
//! outcome counts, and the deterministic replication seeding contract.
//!
//! Every consumer of randomness owns a private ChaCha stream derived from
//! `(master_seed, stream_index)`, so replications can run in any order or in
//! parallel and still reproduce bit-identically.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;

use crate::cells::CellGrid;
use crate::error::{Error, Result};
use crate::population::Population;

/// One simulated survey: effective cell sample sizes and sampled outcomes.
#[derive(Debug, Clone)]
pub struct SampleRealization {
    pub fraction: f64,
    pub sample_sizes: CellGrid<u64>,
    pub outcomes: CellGrid<u64>,
    pub seed: u64,
}

impl SampleRealization {
    pub fn j_count(&self) -> usize {
        self.sample_sizes.j_count()
    }

    pub fn d_count(&self) -> usize {
        self.sample_sizes.d_count()
    }

    /// Total effective sample size across cells.
    pub fn total_sample(&self) -> u64 {
        self.sample_sizes.as_slice().iter().sum()
    }

    pub fn validate_against(&self, pop: &Population) -> Result<()> {
        if self.j_count() != pop.j_count() || self.d_count() != pop.d_count() {
            return Err(Error::Validation(
                "sample does not match population dimensions".into(),
            ));
        }
        for (j, d, &n) in self.sample_sizes.iter_cells() {
            let y = *self.outcomes.get(j, d);
            if y > n || n > pop.headcount(j, d) {
                return Err(Error::Validation(format!(
                    "sample cell ({j}, {d}) violates 0 <= y <= n <= N"
                )));
            }
        }
        Ok(())
    }
}

/// Independent, reproducible stream for a replication index.
///
/// Same `(master_seed, index)` always yields the same stream; distinct
/// indices use distinct ChaCha counters and are statistically independent.
pub fn replication_stream(master_seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Stream-index namespaces so different phases never share a stream.
pub mod streams {
    /// Pilot sample drawn before the search starts.
    pub const PILOT: u64 = 1 << 56;
    /// Replication `l` of search step `k`.
    pub fn ssd_step(step: u64, replication: u64) -> u64 {
        (2 << 56) | (step << 32) | replication
    }
    /// Replication `b` of a design-based simulation scenario.
    pub fn sim_rep(scenario: u64, replication: u64) -> u64 {
        (3 << 56) | (scenario << 32) | replication
    }
    /// One-off sample drawn by the `fit` command.
    pub const FIT: u64 = 4 << 56;
}

/// Draw n_jd ~ Binomial(N_jd, f) independently for every cell.
pub fn draw_sample_sizes(
    pop: &Population,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<CellGrid<u64>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "sampling fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut out = CellGrid::filled(pop.j_count(), pop.d_count(), 0u64);
    for j in 0..pop.j_count() {
        for d in 0..pop.d_count() {
            let n = pop.headcount(j, d);
            let draw = if fraction == 1.0 {
                n
            } else {
                rand_distr::Binomial::new(n, fraction)
                    .map_err(|e| Error::Numerical(e.to_string()))?
                    .sample(rng)
            };
            *out.get_mut(j, d) = draw;
        }
    }
    Ok(out)
}

/// Draw y_jd ~ Binomial(n_jd, p_jd) independently; y = 0 whenever n = 0.
pub fn draw_outcomes(
    sample_sizes: &CellGrid<u64>,
    probabilities: &CellGrid<f64>,
    rng: &mut impl Rng,
) -> Result<CellGrid<u64>> {
    assert_eq!(sample_sizes.j_count(), probabilities.j_count());
    assert_eq!(sample_sizes.d_count(), probabilities.d_count());
    let mut out = CellGrid::filled(sample_sizes.j_count(), sample_sizes.d_count(), 0u64);
    for (j, d, &n) in sample_sizes.iter_cells() {
        let p = *probabilities.get(j, d);
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation(format!(
                "success probability for cell ({j}, {d}) is outside [0, 1]: {p}"
            )));
        }
        if n == 0 || p == 0.0 {
            continue;
        }
        let draw = if p == 1.0 {
            n
        } else {
            rand_distr::Binomial::new(n, p)
                .map_err(|e| Error::Numerical(e.to_string()))?
                .sample(rng)
        };
        *out.get_mut(j, d) = draw;
    }
    Ok(out)
}

/// Draw a full survey realization from the population's true prevalences.
pub fn draw_survey(
    pop: &Population,
    fraction: f64,
    master_seed: u64,
    stream: u64,
) -> Result<SampleRealization> {
    let mut rng = replication_stream(master_seed, stream);
    let sample_sizes = draw_sample_sizes(pop, fraction, &mut rng)?;
    let outcomes = draw_outcomes(&sample_sizes, &pop.prevalence_grid(), &mut rng)?;
    Ok(SampleRealization {
        fraction,
        sample_sizes,
        outcomes,
        seed: stream,
    })
}
