//! Run configuration: a TOML file with `[paths]`, `[run]`, `[model]`,
//! `[fit]`, `[ssd]`, and `[sim]` sections. Command-line flags override the
//! seed, output directory, and parallelism.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GammaPrior, LaplaceOptions, ModelSpec};
use crate::reliability::LossKind;
use crate::ssd::SsdConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub population: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct RunSection {
    #[serde(default)]
    pub master_seed: u64,
    /// Max concurrent replications; default: available cores minus one.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_true")]
    pub include_covariates: bool,
    #[serde(default = "default_true")]
    pub include_spatial: bool,
    #[serde(default = "default_true")]
    pub include_exchangeable: bool,
    #[serde(default)]
    pub shared_covariate_coefficients: bool,
    #[serde(default = "default_upsilon_shape")]
    pub upsilon_shape: f64,
    #[serde(default = "default_rate")]
    pub upsilon_rate: f64,
    pub nu_shape: Option<f64>,
    #[serde(default = "default_rate")]
    pub nu_rate: f64,
    #[serde(default = "default_fixed_sd")]
    pub fixed_effect_prior_sd: f64,
    #[serde(default = "default_grid_bivariate")]
    pub grid_bivariate: usize,
    #[serde(default = "default_grid_univariate")]
    pub grid_univariate: usize,
}

fn default_true() -> bool {
    true
}
fn default_upsilon_shape() -> f64 {
    0.5
}
fn default_rate() -> f64 {
    0.1
}
fn default_fixed_sd() -> f64 {
    crate::model::DEFAULT_FIXED_EFFECT_SD
}
fn default_grid_bivariate() -> usize {
    7
}
fn default_grid_univariate() -> usize {
    5
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            include_covariates: true,
            include_spatial: true,
            include_exchangeable: true,
            shared_covariate_coefficients: false,
            upsilon_shape: default_upsilon_shape(),
            upsilon_rate: default_rate(),
            nu_shape: None,
            nu_rate: default_rate(),
            fixed_effect_prior_sd: default_fixed_sd(),
            grid_bivariate: default_grid_bivariate(),
            grid_univariate: default_grid_univariate(),
        }
    }
}

impl ModelSection {
    /// Build the working-model structure. The exchangeable-precision prior
    /// defaults to Gamma(0.5, rate) under the convolution prior and
    /// Gamma(1, rate) when only the unstructured effect is present.
    pub fn to_spec(&self) -> Result<ModelSpec> {
        let nu_shape = self
            .nu_shape
            .unwrap_or(if self.include_spatial { 0.5 } else { 1.0 });
        let spec = ModelSpec {
            include_covariates: self.include_covariates,
            include_spatial: self.include_spatial,
            include_exchangeable: self.include_exchangeable,
            shared_covariate_coefficients: self.shared_covariate_coefficients,
            hyperprior_upsilon: GammaPrior::new(self.upsilon_shape, self.upsilon_rate)?,
            hyperprior_nu: GammaPrior::new(nu_shape, self.nu_rate)?,
            fixed_effect_prior_sd: self.fixed_effect_prior_sd,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn laplace_options(&self) -> LaplaceOptions {
        LaplaceOptions {
            bivariate_grid: self.grid_bivariate,
            univariate_grid: self.grid_univariate,
            ..LaplaceOptions::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default = "default_pilot_fraction")]
    pub fraction: f64,
}

fn default_pilot_fraction() -> f64 {
    0.01
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            fraction: default_pilot_fraction(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsdSection {
    #[serde(default = "default_f_a")]
    pub f_a: f64,
    #[serde(default = "default_f_b")]
    pub f_b: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_true")]
    pub estimated_eligibility: bool,
    #[serde(default = "default_pilot_fraction")]
    pub pilot_fraction: f64,
    #[serde(default)]
    pub deffs: Vec<f64>,
}

fn default_f_a() -> f64 {
    0.01
}
fn default_f_b() -> f64 {
    0.04
}
fn default_h() -> f64 {
    0.01
}
fn default_replications() -> usize {
    100
}
fn default_gamma() -> f64 {
    0.01
}
fn default_loss() -> LossKind {
    LossKind::Count
}

impl Default for SsdSection {
    fn default() -> Self {
        SsdSection {
            f_a: default_f_a(),
            f_b: default_f_b(),
            h: default_h(),
            replications: default_replications(),
            kappa: 0.0,
            gamma: default_gamma(),
            loss: default_loss(),
            estimated_eligibility: true,
            pilot_fraction: default_pilot_fraction(),
            deffs: Vec::new(),
        }
    }
}

impl SsdSection {
    pub fn to_config(&self, master_seed: u64) -> SsdConfig {
        SsdConfig {
            f_a: self.f_a,
            f_b: self.f_b,
            h: self.h,
            replications: self.replications,
            kappa: self.kappa,
            gamma: self.gamma,
            loss_kind: self.loss,
            use_estimated_eligibility: self.estimated_eligibility,
            master_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<String>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_sim_reps")]
    pub replications: usize,
    #[serde(default)]
    pub weighted_groups: bool,
}

fn default_scenarios() -> Vec<String> {
    vec!["S1".into(), "S2".into(), "S3".into(), "S4".into()]
}
fn default_fractions() -> Vec<f64> {
    vec![0.02, 0.04]
}
fn default_sim_reps() -> usize {
    400
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            scenarios: default_scenarios(),
            fractions: default_fractions(),
            replications: default_sim_reps(),
            weighted_groups: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub ssd: SsdSection,
    #[serde(default)]
    pub sim: SimSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Config(format!("config file not found: {}", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical representation used for the audit hash.
    pub fn canonical_repr(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Effective parallelism: configured jobs, else cores minus one;
    /// always at least 1 and never more than the available cores.
    pub fn jobs(&self) -> usize {
        let cores = std::thread::available_parallelism()
            .map(|c| c.get())
            .unwrap_or(1);
        self.run
            .jobs
            .unwrap_or(cores.saturating_sub(1))
            .clamp(1, cores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.ssd.f_a, 0.01);
        assert_eq!(cfg.ssd.f_b, 0.04);
        assert_eq!(cfg.ssd.replications, 100);
        assert_eq!(cfg.ssd.gamma, 0.01);
        assert_eq!(cfg.sim.replications, 400);
        assert_eq!(cfg.sim.fractions, vec![0.02, 0.04]);
        assert_eq!(cfg.run.master_seed, 0);
        // convolution prior by default
        let spec = cfg.model.to_spec().unwrap();
        assert_eq!(spec.hyperprior_upsilon.shape, 0.5);
        assert_eq!(spec.hyperprior_nu.shape, 0.5);
        assert_eq!(spec.hyperprior_nu.rate, 0.1);
    }

    #[test]
    fn unstructured_only_gets_gamma_one() {
        let cfg: RunConfig =
            toml::from_str("[model]\ninclude_spatial = false\ninclude_covariates = false\n")
                .unwrap();
        let spec = cfg.model.to_spec().unwrap();
        assert_eq!(spec.hyperprior_nu.shape, 1.0);
        assert_eq!(spec.hyperprior_nu.rate, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[ssd]\nf_q = 0.2\n").unwrap_err();
        assert!(err.to_string().contains("f_q"));
    }

    #[test]
    fn file_round_trip_and_hash_stability() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "[paths]\npopulation = \"pop.csv\"\n[run]\nmaster_seed = 7\n[ssd]\nh = 0.005\n"
        )
        .unwrap();
        f.flush().unwrap();
        let a = RunConfig::load(f.path()).unwrap();
        let b = RunConfig::load(f.path()).unwrap();
        assert_eq!(a.canonical_repr(), b.canonical_repr());
        assert_eq!(a.run.master_seed, 7);
        assert_eq!(a.ssd.h, 0.005);
        assert_eq!(a.paths.population, Some(PathBuf::from("pop.csv")));
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let err = RunConfig::load(Path::new("/nonexistent/config.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
