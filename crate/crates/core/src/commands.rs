//! Command drivers behind the CLI: validation, single fits, the sample-size
//! search, the design-based simulation, and synthetic-data generation.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::designsim::{run_scenario, Scenario, ScenarioId, SimOptions};
use crate::error::{Error, Result};
use crate::model::{fit_laplace, ModelSpec};
use crate::planning::{ess_to_actual, DesignEffect};
use crate::population::{
    load_adjacency, load_covariates, load_population, scale_covariates, synth_population,
    write_adjacency, write_covariates, write_population, AdjacencyGraph, CovariateMatrix,
    Population, SynthOptions,
};
use crate::reliability::{eligibility, loss_report, true_shares};
use crate::report::{
    with_audit_header, write_cell_metrics_csv, write_fit_csv, write_group_metrics_csv, write_json,
    write_ssd_trace_csv, write_suppression_csv, ActualSize, Audit, SsdSummary,
};
use crate::sampling::{draw_survey, streams};
use crate::ssd::{k_max, run_ssd};

/// What a command produced; `main` prints the messages and exits 0.
#[derive(Debug, Default)]
pub struct Outcome {
    pub messages: Vec<String>,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn say(&mut self, msg: impl Into<String>) {
        self.messages.push(msg.into());
    }

    fn wrote(&mut self, path: PathBuf) {
        self.files.push(path);
    }
}

/// Loaded and validated data inputs.
pub struct Bundle {
    pub pop: Population,
    pub covariates: Option<CovariateMatrix>,
    pub graph: Option<AdjacencyGraph>,
}

fn require_file(label: &str, path: Option<&PathBuf>, missing: &mut Vec<String>) {
    match path {
        None => missing.push(format!("paths.{label} is not set in the config")),
        Some(p) if !p.exists() => {
            missing.push(format!("paths.{label} does not exist: {}", p.display()))
        }
        Some(_) => {}
    }
}

/// Load whatever the model structure needs; covariates are standardized on
/// load if the file holds raw values.
pub fn load_bundle(cfg: &RunConfig, spec: &ModelSpec) -> Result<Bundle> {
    let mut missing = Vec::new();
    require_file("population", cfg.paths.population.as_ref(), &mut missing);
    if spec.include_covariates {
        require_file("covariates", cfg.paths.covariates.as_ref(), &mut missing);
    }
    if spec.include_spatial {
        require_file("adjacency", cfg.paths.adjacency.as_ref(), &mut missing);
    }
    if !missing.is_empty() {
        return Err(Error::Config(missing.join("; ")));
    }
    let pop = load_population(cfg.paths.population.as_ref().unwrap())?;
    let covariates = if spec.include_covariates {
        let raw = load_covariates(cfg.paths.covariates.as_ref().unwrap(), &pop)?;
        Some(if raw.scaled() {
            raw
        } else {
            scale_covariates(&raw)?
        })
    } else {
        None
    };
    let graph = if spec.include_spatial {
        Some(load_adjacency(cfg.paths.adjacency.as_ref().unwrap(), &pop)?)
    } else {
        None
    };
    Ok(Bundle {
        pop,
        covariates,
        graph,
    })
}

/// Load everything referenced by the config, run all invariant checks, and
/// report. Missing files are usage errors (exit 2); data-level violations
/// are data errors (exit 1), listing up to the first 20.
pub fn cmd_validate(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Outcome::default();

    // existence checks first: these are usage errors
    let mut missing = Vec::new();
    require_file("population", cfg.paths.population.as_ref(), &mut missing);
    if cfg.model.include_covariates {
        require_file("covariates", cfg.paths.covariates.as_ref(), &mut missing);
    }
    if cfg.model.include_spatial {
        require_file("adjacency", cfg.paths.adjacency.as_ref(), &mut missing);
    }
    if !missing.is_empty() {
        return Err(Error::Config(missing.join("; ")));
    }

    // section invariants
    let mut violations: Vec<String> = Vec::new();
    if let Err(e) = cfg.model.to_spec() {
        violations.push(e.to_string());
    }
    match cfg.ssd.to_config(cfg.run.master_seed).validate() {
        Ok(warnings) => out.warnings.extend(warnings),
        Err(e) => violations.push(e.to_string()),
    }
    for s in &cfg.sim.scenarios {
        if let Err(e) = ScenarioId::parse(s) {
            violations.push(e.to_string());
        }
    }

    // data loading and invariants
    let pop = match load_population(cfg.paths.population.as_ref().unwrap()) {
        Ok(p) => Some(p),
        Err(e) => {
            violations.push(e.to_string());
            None
        }
    };
    let mut covariates = None;
    let mut graph = None;
    if let Some(pop) = &pop {
        if cfg.model.include_covariates {
            match load_covariates(cfg.paths.covariates.as_ref().unwrap(), pop) {
                Ok(raw) => match if raw.scaled() {
                    Ok(raw)
                } else {
                    scale_covariates(&raw)
                } {
                    Ok(x) => covariates = Some(x),
                    Err(e) => violations.push(e.to_string()),
                },
                Err(e) => violations.push(e.to_string()),
            }
        }
        if cfg.model.include_spatial {
            match load_adjacency(cfg.paths.adjacency.as_ref().unwrap(), pop) {
                Ok(g) => graph = Some(g),
                Err(e) => violations.push(e.to_string()),
            }
        }
    }

    if !violations.is_empty() {
        violations.truncate(20);
        return Err(Error::Validation(violations.join("\n")));
    }

    let pop = pop.unwrap();
    let eligible = eligibility(&true_shares(&pop));
    let eligible_count = eligible.as_slice().iter().filter(|&&e| e).count();
    out.say(format!(
        "population: {} areas x {} groups = {} cells, N = {}",
        pop.d_count(),
        pop.j_count(),
        pop.cell_count(),
        pop.grand_total()
    ));
    out.say(format!(
        "eligible cells (share >= 3% of area population): {} ({:.1}%)",
        eligible_count,
        100.0 * eligible_count as f64 / pop.cell_count() as f64
    ));
    if let Some(x) = &covariates {
        out.say(format!("covariates: {} columns, standardized", x.k_count()));
    }
    if let Some(g) = &graph {
        let isolated = g.isolated_areas();
        out.say(format!(
            "adjacency: {} edges, {} connected components",
            g.edge_count(),
            g.component_count()
        ));
        if !isolated.is_empty() {
            out.warnings.push(format!(
                "{} isolated areas (no neighbors): first ids {:?}",
                isolated.len(),
                isolated
                    .iter()
                    .take(5)
                    .map(|&d| pop.area_ids()[d].as_str())
                    .collect::<Vec<_>>()
            ));
        }
    }
    out.say("validation clean");
    Ok(out)
}

/// Simulate one survey at the configured fraction, fit the working model,
/// and write posterior and suppression reports.
pub fn cmd_fit(cfg: &RunConfig, dry_run: bool) -> Result<Outcome> {
    let mut out = Outcome::default();
    let spec = cfg.model.to_spec()?;
    let bundle = load_bundle(cfg, &spec)?;
    if dry_run {
        out.say("dry run: inputs valid, 1 model fit");
        return Ok(out);
    }
    let opts = cfg.model.laplace_options();
    let data = draw_survey(
        &bundle.pop,
        cfg.fit.fraction,
        cfg.run.master_seed,
        streams::FIT,
    )?;
    let fit = fit_laplace(
        &spec,
        &data,
        &bundle.pop,
        bundle.covariates.as_ref(),
        bundle.graph.as_ref(),
        &opts,
    )?;
    out.warnings
        .extend(fit.diagnostics.warnings.iter().cloned());

    let audit = Audit::new("fit", &cfg.canonical_repr(), cfg.run.master_seed);
    let summaries = fit.predict_cells();
    let report = loss_report(&bundle.pop, &summaries, cfg.ssd.loss)?;
    let fit_path = cfg.paths.out_dir.join("fit_cells.csv");
    write_fit_csv(&fit_path, &bundle.pop, &fit, &audit)?;
    out.wrote(fit_path);
    let sup_path = cfg.paths.out_dir.join("fit_suppression.csv");
    write_suppression_csv(&sup_path, &bundle.pop, &report, &fit.cell_mean, &audit)?;
    out.wrote(sup_path);
    let sample_path = cfg.paths.out_dir.join("fit_sample.csv");
    crate::report::write_sample_csv(&sample_path, &bundle.pop, &data, &audit)?;
    out.wrote(sample_path);

    out.say(format!(
        "fitted {} cells from a sample of {} persons (fraction {})",
        bundle.pop.cell_count(),
        data.total_sample(),
        cfg.fit.fraction
    ));
    out.say(format!(
        "suppressed eligible cells: {}; loss_true = {}, loss_est = {}",
        report.suppressed_cells.len(),
        report.loss_true,
        report.loss_est
    ));
    Ok(out)
}

/// Run the binary-search sample size determination and write its artifacts.
pub fn cmd_ssd(cfg: &RunConfig, dry_run: bool) -> Result<Outcome> {
    let mut out = Outcome::default();
    let spec = cfg.model.to_spec()?;
    let search = cfg.ssd.to_config(cfg.run.master_seed);
    out.warnings.extend(search.validate()?);
    let bundle = load_bundle(cfg, &spec)?;

    let bound = k_max(search.f_a, search.f_b, search.h);
    if dry_run {
        let fits = search.replications * (bound + 2) + 1;
        out.say(format!(
            "dry run: inputs valid; at most {} model fits ({} replications x ({} halvings + 2 \
             endpoints) + pilot)",
            fits, search.replications, bound
        ));
        return Ok(out);
    }
    let opts = cfg.model.laplace_options();
    let outcome = run_ssd(
        &bundle.pop,
        bundle.covariates.as_ref(),
        bundle.graph.as_ref(),
        &spec,
        &search,
        cfg.ssd.pilot_fraction,
        &opts,
    )?;
    let trace = &outcome.trace;
    out.warnings.extend(trace.warnings.iter().cloned());

    let audit = Audit::new("ssd", &cfg.canonical_repr(), cfg.run.master_seed);
    let trace_path = cfg.paths.out_dir.join("ssd_trace.csv");
    write_ssd_trace_csv(&trace_path, trace, &audit)?;
    out.wrote(trace_path);

    let mut actual_sizes = Vec::new();
    for &deff in &cfg.ssd.deffs {
        let (de, warn) = DesignEffect::new(deff, format!("deff={deff}"))?;
        if let Some(w) = warn {
            out.warnings.push(w);
        }
        actual_sizes.push(ActualSize {
            deff,
            label: de.source_label.clone(),
            n: ess_to_actual(trace.recommended_ess, &de)?,
        });
    }
    let summary = SsdSummary {
        command: "ssd".into(),
        config_hash: format!("{:016x}", audit.config_hash),
        master_seed: cfg.run.master_seed,
        recommended_fraction: trace.recommended_fraction,
        ess: trace.recommended_ess,
        solution_interval: [trace.solution_interval.0, trace.solution_interval.1],
        k_max: trace.k_max,
        steps_evaluated: trace.steps.len(),
        pilot_sample_size: outcome.pilot_sample_size,
        actual_sizes,
        warnings: trace.warnings.clone(),
    };
    let summary_path = cfg.paths.out_dir.join("ssd_summary.json");
    write_json(&summary_path, &summary)?;
    out.wrote(summary_path);

    out.say(format!(
        "recommended effective sampling fraction: {} (interval [{}, {}])",
        trace.recommended_fraction, trace.solution_interval.0, trace.solution_interval.1
    ));
    out.say(format!(
        "effective sample size: {} persons",
        trace.recommended_ess
    ));
    for a in &summary.actual_sizes {
        out.say(format!("actual size at deff {}: {} persons", a.deff, a.n));
    }
    Ok(out)
}

fn fraction_slug(f: f64) -> String {
    format!("{f}").replace('.', "p").replace('-', "m")
}

/// Run each configured (scenario, fraction) pair of the design-based
/// validation study and write metric tables.
pub fn cmd_simulate(cfg: &RunConfig, dry_run: bool) -> Result<Outcome> {
    let mut out = Outcome::default();
    let scenario_ids: Vec<ScenarioId> = cfg
        .sim
        .scenarios
        .iter()
        .map(|s| ScenarioId::parse(s))
        .collect::<Result<_>>()?;
    let model_runs = scenario_ids
        .iter()
        .filter(|s| !matches!(s, ScenarioId::S1))
        .count();
    // the union of structures across requested scenarios decides the inputs
    let loading_spec = ModelSpec {
        include_covariates: scenario_ids
            .iter()
            .any(|s| matches!(s, ScenarioId::S3 | ScenarioId::S4)),
        include_spatial: scenario_ids.iter().any(|s| matches!(s, ScenarioId::S4)),
        include_exchangeable: model_runs > 0,
        ..ModelSpec::s4()
    };
    let bundle = load_bundle(cfg, &loading_spec)?;
    if dry_run {
        out.say(format!(
            "dry run: inputs valid; {} model fits ({} replications x {} model scenarios x {} \
             fractions)",
            cfg.sim.replications * model_runs * cfg.sim.fractions.len(),
            cfg.sim.replications,
            model_runs,
            cfg.sim.fractions.len()
        ));
        return Ok(out);
    }
    let opts = cfg.model.laplace_options();
    let audit = Audit::new("simulate", &cfg.canonical_repr(), cfg.run.master_seed);
    let sim_opts = SimOptions {
        replications: cfg.sim.replications,
        master_seed: cfg.run.master_seed,
        weighted_groups: cfg.sim.weighted_groups,
    };

    for &fraction in &cfg.sim.fractions {
        for &id in &scenario_ids {
            let scenario = Scenario::from_id(id);
            let table = run_scenario(
                &bundle.pop,
                bundle.covariates.as_ref(),
                bundle.graph.as_ref(),
                &scenario,
                fraction,
                &sim_opts,
                &opts,
            )?;
            if table.failed_replications > 0 {
                out.warnings.push(format!(
                    "{} f={}: {} of {} replications failed to fit and were excluded",
                    id.as_str(),
                    fraction,
                    table.failed_replications,
                    table.replications
                ));
            }
            let slug = format!(
                "{}_f{}",
                id.as_str().to_lowercase(),
                fraction_slug(fraction)
            );
            let cells_path = cfg.paths.out_dir.join(format!("sim_cells_{slug}.csv"));
            write_cell_metrics_csv(&cells_path, &bundle.pop, &table, &audit)?;
            out.wrote(cells_path);
            let groups_path = cfg.paths.out_dir.join(format!("sim_groups_{slug}.csv"));
            write_group_metrics_csv(&groups_path, &bundle.pop, &table, &audit)?;
            out.wrote(groups_path);

            out.say(format!(
                "{} f = {} across B = {} replications",
                id.as_str(),
                fraction,
                table.replications
            ));
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or("-".into());
            let row = |label: &str, g: &crate::designsim::GroupMetrics| {
                format!(
                    "  {:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>8} {:>8}",
                    label,
                    cell(g.rmse),
                    cell(g.bias),
                    cell(g.arb),
                    cell(g.rse),
                    cell(g.rseb),
                    cell(g.loss_true),
                    cell(g.risk_true),
                    cell(g.loss_est),
                    cell(g.risk_est)
                )
            };
            out.say(format!(
                "  {:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>8} {:>8}",
                "group",
                "rmse",
                "bias",
                "arb",
                "rse",
                "rseb",
                "loss_true",
                "risk_true",
                "loss_est",
                "risk_est"
            ));
            for (j, g) in table.per_group.iter().enumerate() {
                out.say(row(&bundle.pop.group_labels()[j].clone(), g));
            }
            out.say(row("all", &table.overall));
        }
    }
    Ok(out)
}

/// Arguments of the synthetic-population generator.
#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub areas: usize,
    pub groups: usize,
    pub rates: Vec<f64>,
    pub headcount_min: u64,
    pub headcount_max: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Generate a synthetic population bundle and write the three data files.
pub fn cmd_synth(args: &SynthArgs) -> Result<Outcome> {
    let mut out = Outcome::default();
    let rates = if args.rates.is_empty() {
        // evenly spread default profile
        (0..args.groups)
            .map(|j| 0.08 + 0.08 * j as f64)
            .map(|r| r.min(0.9))
            .collect()
    } else {
        args.rates.clone()
    };
    let opts = SynthOptions {
        d_count: args.areas,
        j_count: args.groups,
        prevalence_profile: rates,
        headcount_range: (args.headcount_min, args.headcount_max),
        seed: args.seed,
    };
    let (pop, covariates, graph) = synth_population(&opts)?;
    let repr = format!("{args:?}");
    let audit = Audit::new("synth", &repr, args.seed);

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let pop_path = args.out_dir.join("population.csv");
    write_population(&pop, &pop_path)?;
    prepend_audit(&pop_path, &audit)?;
    out.wrote(pop_path);
    let cov_path = args.out_dir.join("covariates.csv");
    write_covariates(&covariates, &pop, &cov_path)?;
    prepend_audit(&cov_path, &audit)?;
    out.wrote(cov_path);
    let adj_path = args.out_dir.join("adjacency.csv");
    write_adjacency(&graph, &pop, &adj_path)?;
    prepend_audit(&adj_path, &audit)?;
    out.wrote(adj_path);

    out.say(format!(
        "wrote synthetic bundle: {} areas x {} groups, N = {}",
        pop.d_count(),
        pop.j_count(),
        pop.grand_total()
    ));
    Ok(out)
}

fn prepend_audit(path: &Path, audit: &Audit) -> Result<()> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, with_audit_header(audit, &body)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_bundle_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let args = SynthArgs {
            areas: 12,
            groups: 2,
            rates: vec![0.15, 0.3],
            headcount_min: 50,
            headcount_max: 150,
            seed: 5,
            out_dir: dir.path().to_path_buf(),
        };
        let outcome = cmd_synth(&args).unwrap();
        assert_eq!(outcome.files.len(), 3);
        let pop = load_population(&dir.path().join("population.csv")).unwrap();
        assert_eq!(pop.d_count(), 12);
        let x = load_covariates(&dir.path().join("covariates.csv"), &pop).unwrap();
        assert_eq!(x.k_count(), 2);
        let g = load_adjacency(&dir.path().join("adjacency.csv"), &pop).unwrap();
        assert!(g.edge_count() > 0);
    }

    #[test]
    fn validate_flags_missing_population_as_usage_error() {
        let cfg = RunConfig::default();
        let err = cmd_validate(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
