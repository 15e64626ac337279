use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::mhmm::EStepMethod;
use crate::simlab::{check_methods, FitSettings, MethodSpec, ScenarioSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    #[serde(default = "FitOptions::default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "FitOptions::default_rel_tol")]
    pub rel_tol: f64,
    /// Gauss–Hermite nodes per dimension for the quadrature E-step.
    #[serde(default = "FitOptions::default_n_quad")]
    pub n_quad: usize,
    #[serde(default = "FitOptions::default_sign_align")]
    pub sign_align: bool,
}

impl FitOptions {
    fn default_max_iter() -> usize {
        500
    }
    fn default_rel_tol() -> f64 {
        1e-6
    }
    fn default_n_quad() -> usize {
        9
    }
    fn default_sign_align() -> bool {
        true
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: Self::default_max_iter(),
            rel_tol: Self::default_rel_tol(),
            n_quad: Self::default_n_quad(),
            sign_align: Self::default_sign_align(),
        }
    }
}

/// Grid axes crossed with the base scenario; an empty axis keeps the
/// scenario's own value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub t: Vec<usize>,
    #[serde(default)]
    pub tau2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOptions {
    #[serde(default = "ExperimentOptions::default_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub grid: GridAxes,
}

impl ExperimentOptions {
    fn default_reps() -> usize {
        20
    }
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { n_reps: Self::default_reps(), grid: GridAxes::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "Config::default_output_dir")]
    pub output_dir: PathBuf,
    pub scenario: ScenarioSpec,
    #[serde(default = "Config::default_methods")]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub experiment: ExperimentOptions,
}

impl Config {
    fn default_output_dir() -> PathBuf {
        PathBuf::from("out")
    }
    fn default_methods() -> Vec<MethodSpec> {
        vec![MethodSpec::Avem { e_step_method: None }]
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::config(e.to_string().trim_end().to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "schema_version {} is not supported; expected {SCHEMA_VERSION}",
                cfg.schema_version
            )));
        }
        if cfg.scenario.seed() != 0 {
            return Err(CliError::config("scenario.seed is not accepted; set master_seed instead"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Checks the scenario, the method list, the iteration settings and the
    /// grid axes.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: crate::AvemError| CliError::config(e.to_string());
        for spec in self.grid()? {
            spec.validate().map_err(cfg_err)?;
            check_methods(&spec, &self.methods).map_err(cfg_err)?;
        }
        if self.fit.max_iter == 0 || !(self.fit.rel_tol > 0.0) || self.fit.n_quad == 0 {
            return Err(CliError::config("fit.max_iter, fit.rel_tol and fit.n_quad must be positive"));
        }
        for m in &self.methods {
            let bad = match m {
                MethodSpec::Pavem { j } | MethodSpec::Qem { j } => *j == 0,
                MethodSpec::Mcem { m } => *m == 0,
                MethodSpec::Avem { .. } => false,
            };
            if bad {
                return Err(CliError::config(format!("method {} needs a positive node count", m.label())));
            }
        }
        if self.experiment.n_reps == 0 {
            return Err(CliError::config("experiment.n_reps must be positive"));
        }
        Ok(())
    }

    pub fn settings(&self) -> FitSettings {
        FitSettings {
            max_iter: self.fit.max_iter,
            rel_tol: self.fit.rel_tol,
            n_quad: self.fit.n_quad,
            sign_align: self.fit.sign_align,
            ..FitSettings::default()
        }
    }

    /// Scenario cells: the cartesian product of the grid axes, ordered by
    /// `n`, then `t`, then `tau2`.
    pub fn grid(&self) -> Result<Vec<ScenarioSpec>, CliError> {
        let g = &self.experiment.grid;
        let ns: Vec<Option<usize>> = if g.n.is_empty() { vec![None] } else { g.n.iter().copied().map(Some).collect() };
        let ts: Vec<Option<usize>> = if g.t.is_empty() { vec![None] } else { g.t.iter().copied().map(Some).collect() };
        let taus: Vec<Option<f64>> =
            if g.tau2.is_empty() { vec![None] } else { g.tau2.iter().copied().map(Some).collect() };
        let mut out = Vec::new();
        for n in &ns {
            for t in &ts {
                for tau2 in &taus {
                    out.push(with_axes(&self.scenario, *n, *t, *tau2)?);
                }
            }
        }
        Ok(out)
    }

    /// Hex SHA-256 of the canonical JSON form of the effective config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn with_axes(spec: &ScenarioSpec, n: Option<usize>, t: Option<usize>, tau2: Option<f64>) -> Result<ScenarioSpec, CliError> {
    let mut s = spec.clone();
    macro_rules! set_nt {
        ($x:expr) => {{
            if let Some(n) = n {
                $x.n = n;
            }
            if let Some(t) = t {
                $x.t = t;
            }
        }};
    }
    match &mut s {
        ScenarioSpec::GaussianMhmm(x) => {
            set_nt!(x);
            if let Some(v) = tau2 {
                x.tau2 = v;
            }
        }
        ScenarioSpec::BernoulliMhmm(x) => {
            set_nt!(x);
            if let Some(v) = tau2 {
                x.tau2 = v;
            }
        }
        ScenarioSpec::Messm(x) => set_nt!(x),
        ScenarioSpec::Localized(x) => set_nt!(x),
    }
    if tau2.is_some() && matches!(s, ScenarioSpec::Messm(_) | ScenarioSpec::Localized(_)) {
        return Err(CliError::config(format!("experiment.grid.tau2 does not apply to scenario {}", s.name())));
    }
    Ok(s)
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub method: Option<String>,
    pub quad_nodes: Option<usize>,
    pub mc_samples: Option<usize>,
    pub no_sign_align: bool,
}

/// Parses `--method`: `avem`, `avem-closed-form`, `avem-laplace`,
/// `avem-quadrature`, `pavem`, `qem` or `mcem`.
pub fn parse_method(name: &str, quad_nodes: Option<usize>, mc_samples: Option<usize>) -> Result<MethodSpec, CliError> {
    let j = quad_nodes.unwrap_or(9);
    let avem = |m| Ok(MethodSpec::Avem { e_step_method: m });
    match name {
        "avem" => avem(None),
        "avem-closed-form" => avem(Some(EStepMethod::ClosedForm)),
        "avem-laplace" => avem(Some(EStepMethod::Laplace)),
        "avem-quadrature" => avem(Some(EStepMethod::Quadrature)),
        "pavem" => Ok(MethodSpec::Pavem { j }),
        "qem" => Ok(MethodSpec::Qem { j }),
        "mcem" => Ok(MethodSpec::Mcem { m: mc_samples.unwrap_or(100) }),
        other => Err(CliError::config(format!(
            "unknown method '{other}'; expected avem, avem-closed-form, avem-laplace, avem-quadrature, pavem, qem or mcem"
        ))),
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut Config) -> Result<(), CliError> {
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(m) = self.max_iter {
            cfg.fit.max_iter = m;
        }
        if let Some(t) = self.tol {
            cfg.fit.rel_tol = t;
        }
        if self.no_sign_align {
            cfg.fit.sign_align = false;
        }
        if let Some(name) = &self.method {
            cfg.methods = vec![parse_method(name, self.quad_nodes, self.mc_samples)?];
        }
        if let Some(j) = self.quad_nodes {
            cfg.fit.n_quad = j;
            for m in &mut cfg.methods {
                if let MethodSpec::Pavem { j: x } | MethodSpec::Qem { j: x } = m {
                    *x = j;
                }
            }
        }
        if let Some(mc) = self.mc_samples {
            for m in &mut cfg.methods {
                if let MethodSpec::Mcem { m: x } = m {
                    *x = mc;
                }
            }
        }
        Ok(())
    }
}
