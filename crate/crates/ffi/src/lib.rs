//! C ABI for the saeplan engine.
//!
//! All entry points are panic-safe and return `SaeStatus`; results come back
//! through opaque handles (`SaeDataset`, `SaeFit`, `SaeSsdResult`) that must
//! be released with the matching `_free` function. On any non-OK status the
//! thread-local message retrieved by `saeplan_last_error_message` explains
//! what happened.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use saeplan::designsim::{Scenario, ScenarioId};
use saeplan::model::{fit_laplace, FittedPosterior, LaplaceEngine, LaplaceOptions, ModelSpec};
use saeplan::population::{
    load_adjacency, load_covariates, load_population, scale_covariates, synth_population,
    AdjacencyGraph, CovariateMatrix, Population, SynthOptions,
};
use saeplan::sampling::{draw_survey, streams};
use saeplan::ssd::{run_ssd_with, SsdConfig, SsdTrace};

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

/// Status codes mirroring the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaeStatus {
    Ok = 0,
    DataError = 1,
    UsageError = 2,
    NumericError = 3,
}

fn status_of(err: &saeplan::Error) -> SaeStatus {
    match err.exit_code() {
        1 => SaeStatus::DataError,
        2 => SaeStatus::UsageError,
        _ => SaeStatus::NumericError,
    }
}

/// Loaded inputs: population plus optional covariates and contiguity graph.
pub struct SaeDataset {
    pop: Population,
    covariates: Option<CovariateMatrix>,
    graph: Option<AdjacencyGraph>,
}

/// A fitted posterior over the dataset's cells.
pub struct SaeFit {
    fit: FittedPosterior,
}

/// Outcome of the sample-size search.
pub struct SaeSsdResult {
    trace: SsdTrace,
}

/// Search settings for `saeplan_ssd_run`; obtain defaults from
/// `saeplan_ssd_options_default` and override what you need.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SaeSsdOptions {
    pub f_a: f64,
    pub f_b: f64,
    /// Interval-width tolerance.
    pub h: f64,
    /// Replications per candidate fraction.
    pub replications: u32,
    /// Tolerated loss.
    pub kappa: f64,
    /// Acceptable risk that the loss exceeds kappa.
    pub gamma: f64,
    /// Nonzero: population-weighted loss; zero: suppressed-cell count.
    pub weighted_loss: u8,
    /// Nonzero: the estimated-eligibility loss drives the search.
    pub use_estimated_eligibility: u8,
    /// Sampling fraction of the simulated pilot survey.
    pub pilot_fraction: f64,
    pub master_seed: u64,
}

/// One row of the search trace.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SaeSsdStepInfo {
    /// 0 for the endpoint evaluations, then 1, 2, ... for midpoints.
    pub step: u32,
    pub f_k: f64,
    pub mean_loss_true: f64,
    pub mean_loss_est: f64,
    pub risk_true: f64,
    pub risk_est: f64,
    pub interval_lo: f64,
    pub interval_hi: f64,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn saeplan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copy the last error message for this thread into `buf` (truncated to
/// `len - 1` bytes, always NUL-terminated when `len > 0`). Returns the full
/// message length in bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn saeplan_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

unsafe fn cstr_arg(ptr: *const c_char) -> Option<PathBuf> {
    if ptr.is_null() {
        None
    } else {
        Some(PathBuf::from(
            CStr::from_ptr(ptr).to_string_lossy().into_owned(),
        ))
    }
}

fn guard<T>(out: *mut *mut T, body: impl FnOnce() -> Result<T, saeplan::Error>) -> SaeStatus {
    if out.is_null() {
        set_error("output handle pointer is null");
        return SaeStatus::UsageError;
    }
    unsafe { *out = std::ptr::null_mut() };
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(value)) => {
            unsafe { *out = Box::into_raw(Box::new(value)) };
            SaeStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SaeStatus::NumericError
        }
    }
}

/// Load a dataset from CSV files. `covariates_path` and `adjacency_path`
/// may be null when the models to be fitted do not need them.
///
/// # Safety
/// Paths must be NUL-terminated strings or null; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn saeplan_dataset_load(
    population_path: *const c_char,
    covariates_path: *const c_char,
    adjacency_path: *const c_char,
    out: *mut *mut SaeDataset,
) -> SaeStatus {
    let pop_path = cstr_arg(population_path);
    let cov_path = cstr_arg(covariates_path);
    let adj_path = cstr_arg(adjacency_path);
    guard(out, move || {
        let pop_path =
            pop_path.ok_or_else(|| saeplan::Error::Config("population path is null".into()))?;
        let pop = load_population(&pop_path)?;
        let covariates = match cov_path {
            Some(p) => {
                let raw = load_covariates(&p, &pop)?;
                Some(if raw.scaled() {
                    raw
                } else {
                    scale_covariates(&raw)?
                })
            }
            None => None,
        };
        let graph = match adj_path {
            Some(p) => Some(load_adjacency(&p, &pop)?),
            None => None,
        };
        Ok(SaeDataset {
            pop,
            covariates,
            graph,
        })
    })
}

/// Generate a reproducible synthetic dataset (lattice contiguity, two
/// standardized covariates). `rates` holds one base prevalence per group.
///
/// # Safety
/// `rates` must point to `rates_len` doubles or be null; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn saeplan_dataset_synth(
    areas: u32,
    groups: u32,
    rates: *const f64,
    rates_len: usize,
    headcount_min: u64,
    headcount_max: u64,
    seed: u64,
    out: *mut *mut SaeDataset,
) -> SaeStatus {
    let profile: Vec<f64> = if rates.is_null() || rates_len == 0 {
        (0..groups)
            .map(|j| (0.08 + 0.08 * j as f64).min(0.9))
            .collect()
    } else {
        std::slice::from_raw_parts(rates, rates_len).to_vec()
    };
    guard(out, move || {
        let (pop, covariates, graph) = synth_population(&SynthOptions {
            d_count: areas as usize,
            j_count: groups as usize,
            prevalence_profile: profile,
            headcount_range: (headcount_min, headcount_max),
            seed,
        })?;
        Ok(SaeDataset {
            pop,
            covariates: Some(covariates),
            graph: Some(graph),
        })
    })
}

/// Number of areas (0 for a null handle).
#[no_mangle]
pub extern "C" fn saeplan_dataset_areas(dataset: *const SaeDataset) -> u32 {
    if dataset.is_null() {
        return 0;
    }
    unsafe { (*dataset).pop.d_count() as u32 }
}

/// Number of groups (0 for a null handle).
#[no_mangle]
pub extern "C" fn saeplan_dataset_groups(dataset: *const SaeDataset) -> u32 {
    if dataset.is_null() {
        return 0;
    }
    unsafe { (*dataset).pop.j_count() as u32 }
}

/// Grand population total (0 for a null handle).
#[no_mangle]
pub extern "C" fn saeplan_dataset_population_total(dataset: *const SaeDataset) -> u64 {
    if dataset.is_null() {
        return 0;
    }
    unsafe { (*dataset).pop.grand_total() }
}

/// Release a dataset handle (null is a no-op).
///
/// # Safety
/// `dataset` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saeplan_dataset_free(dataset: *mut SaeDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn scenario_spec(scenario: u32) -> Result<ModelSpec, saeplan::Error> {
    let id = match scenario {
        2 => ScenarioId::S2,
        3 => ScenarioId::S3,
        4 => ScenarioId::S4,
        other => {
            return Err(saeplan::Error::Config(format!(
                "scenario must be 2, 3, or 4 (hierarchical structures); got {other}"
            )))
        }
    };
    Ok(Scenario::from_id(id)
        .model_spec
        .expect("hierarchical scenario has a model"))
}

fn check_structure(ds: &SaeDataset, spec: &ModelSpec) -> Result<(), saeplan::Error> {
    if spec.include_covariates && ds.covariates.is_none() {
        return Err(saeplan::Error::Config(
            "scenario needs covariates but the dataset has none".into(),
        ));
    }
    if spec.include_spatial && ds.graph.is_none() {
        return Err(saeplan::Error::Config(
            "scenario needs a contiguity graph but the dataset has none".into(),
        ));
    }
    Ok(())
}

/// Simulate one survey of the dataset at `fraction` and fit the scenario's
/// model (2 = exchangeable, 3 = +covariates, 4 = +spatial).
///
/// # Safety
/// `dataset` must be a live handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn saeplan_fit_survey(
    dataset: *const SaeDataset,
    scenario: u32,
    fraction: f64,
    seed: u64,
    out: *mut *mut SaeFit,
) -> SaeStatus {
    if dataset.is_null() {
        set_error("dataset handle is null");
        return SaeStatus::UsageError;
    }
    let ds = &*dataset;
    guard(out, move || {
        let spec = scenario_spec(scenario)?;
        check_structure(ds, &spec)?;
        let data = draw_survey(&ds.pop, fraction, seed, streams::FIT)?;
        let fit = fit_laplace(
            &spec,
            &data,
            &ds.pop,
            spec.include_covariates
                .then(|| ds.covariates.as_ref().unwrap()),
            spec.include_spatial.then(|| ds.graph.as_ref().unwrap()),
            &LaplaceOptions::default(),
        )?;
        Ok(SaeFit { fit })
    })
}

/// Posterior mean and SD of the prevalence in one cell.
///
/// # Safety
/// `fit` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn saeplan_fit_cell(
    fit: *const SaeFit,
    group: u32,
    area: u32,
    mean_out: *mut f64,
    sd_out: *mut f64,
) -> SaeStatus {
    if fit.is_null() {
        set_error("fit handle is null");
        return SaeStatus::UsageError;
    }
    let f = &(*fit).fit;
    if group as usize >= f.j_count() || area as usize >= f.d_count() {
        set_error(format!(
            "cell ({group}, {area}) out of range for {} groups x {} areas",
            f.j_count(),
            f.d_count()
        ));
        return SaeStatus::UsageError;
    }
    if !mean_out.is_null() {
        *mean_out = *f.cell_mean.get(group as usize, area as usize);
    }
    if !sd_out.is_null() {
        *sd_out = f.cell_var.get(group as usize, area as usize).sqrt();
    }
    SaeStatus::Ok
}

/// Release a fit handle (null is a no-op).
///
/// # Safety
/// `fit` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saeplan_fit_free(fit: *mut SaeFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Fill `out` with the default search settings.
///
/// # Safety
/// `out` must point to writable `SaeSsdOptions` storage.
#[no_mangle]
pub unsafe extern "C" fn saeplan_ssd_options_default(out: *mut SaeSsdOptions) {
    if out.is_null() {
        return;
    }
    let d = SsdConfig::default();
    *out = SaeSsdOptions {
        f_a: d.f_a,
        f_b: d.f_b,
        h: d.h,
        replications: d.replications as u32,
        kappa: d.kappa,
        gamma: d.gamma,
        weighted_loss: 0,
        use_estimated_eligibility: 1,
        pilot_fraction: 0.01,
        master_seed: d.master_seed,
    }
}

/// Run the full pipeline: pilot survey, design-prior fit, binary search.
///
/// # Safety
/// `dataset` must be a live handle; `options` must be valid or null
/// (defaults); `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn saeplan_ssd_run(
    dataset: *const SaeDataset,
    scenario: u32,
    options: *const SaeSsdOptions,
    out: *mut *mut SaeSsdResult,
) -> SaeStatus {
    if dataset.is_null() {
        set_error("dataset handle is null");
        return SaeStatus::UsageError;
    }
    let ds = &*dataset;
    let opts = if options.is_null() {
        let mut d = std::mem::MaybeUninit::<SaeSsdOptions>::uninit();
        saeplan_ssd_options_default(d.as_mut_ptr());
        d.assume_init()
    } else {
        *options
    };
    guard(out, move || {
        let spec = scenario_spec(scenario)?;
        check_structure(ds, &spec)?;
        let config = SsdConfig {
            f_a: opts.f_a,
            f_b: opts.f_b,
            h: opts.h,
            replications: opts.replications as usize,
            kappa: opts.kappa,
            gamma: opts.gamma,
            loss_kind: if opts.weighted_loss != 0 {
                saeplan::reliability::LossKind::Weighted
            } else {
                saeplan::reliability::LossKind::Count
            },
            use_estimated_eligibility: opts.use_estimated_eligibility != 0,
            master_seed: opts.master_seed,
        };
        config.validate()?;
        let covariates = spec
            .include_covariates
            .then(|| ds.covariates.as_ref().unwrap());
        let graph = spec.include_spatial.then(|| ds.graph.as_ref().unwrap());
        let pilot_data = draw_survey(
            &ds.pop,
            opts.pilot_fraction,
            config.master_seed,
            streams::PILOT,
        )?;
        let pilot = fit_laplace(
            &spec,
            &pilot_data,
            &ds.pop,
            covariates,
            graph,
            &LaplaceOptions::default(),
        )?;
        let engine = LaplaceEngine {
            spec: &spec,
            covariates,
            graph,
            options: LaplaceOptions::default(),
        };
        let trace = run_ssd_with(&pilot, &engine, &ds.pop, &config)?;
        Ok(SaeSsdResult { trace })
    })
}

/// The upper bound of the final interval (NaN for a null handle).
#[no_mangle]
pub extern "C" fn saeplan_ssd_recommended_fraction(result: *const SaeSsdResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    unsafe { (*result).trace.recommended_fraction }
}

/// Effective sample size implied by the recommended fraction.
#[no_mangle]
pub extern "C" fn saeplan_ssd_recommended_ess(result: *const SaeSsdResult) -> u64 {
    if result.is_null() {
        return 0;
    }
    unsafe { (*result).trace.recommended_ess }
}

/// Number of evaluated candidate fractions in the trace.
#[no_mangle]
pub extern "C" fn saeplan_ssd_step_count(result: *const SaeSsdResult) -> u32 {
    if result.is_null() {
        return 0;
    }
    unsafe { (*result).trace.steps.len() as u32 }
}

/// Copy one trace row into `info`.
///
/// # Safety
/// `result` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saeplan_ssd_step(
    result: *const SaeSsdResult,
    index: u32,
    info: *mut SaeSsdStepInfo,
) -> SaeStatus {
    if result.is_null() || info.is_null() {
        set_error("null handle or output pointer");
        return SaeStatus::UsageError;
    }
    let trace = &(*result).trace;
    let Some(s) = trace.steps.get(index as usize) else {
        set_error(format!(
            "step index {index} out of range ({} steps)",
            trace.steps.len()
        ));
        return SaeStatus::UsageError;
    };
    *info = SaeSsdStepInfo {
        step: s.step as u32,
        f_k: s.f_k,
        mean_loss_true: s.mean_loss_true,
        mean_loss_est: s.mean_loss_est,
        risk_true: s.risk_true,
        risk_est: s.risk_est,
        interval_lo: s.interval_after.0,
        interval_hi: s.interval_after.1,
    };
    SaeStatus::Ok
}

/// Release a search-result handle (null is a no-op).
///
/// # Safety
/// `result` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn saeplan_ssd_free(result: *mut SaeSsdResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
