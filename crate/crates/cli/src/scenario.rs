//! Scenario files: TOML with a fixed set of sections. Unknown keys are
//! rejected so that a misspelled tolerance cannot silently fall back to a
//! default.

use std::path::{Path, PathBuf};

use driftlab_core::density_lab::{Bandwidth, Boundary};
use driftlab_core::operator_model::{
    brownian, make_polynomial, ornstein_uhlenbeck, BaseDiffusion, CoefficientField, CoercivityRate, GrowthParams,
};
use driftlab_core::sde_engine::Scheme;
use serde::Deserialize;

use crate::checks;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Polynomial,
    Brownian,
    Ou,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSpec {
    pub family: Family,
    #[serde(default = "one_dim")]
    pub dim: usize,
    #[serde(default)]
    pub m: f64,
    #[serde(default = "three")]
    pub p: f64,
    #[serde(default = "unit")]
    pub lambda: f64,
    #[serde(default = "unit")]
    pub kappa: f64,
    #[serde(default = "unit")]
    pub coercivity_radius: f64,
    #[serde(default = "unit")]
    pub b: f64,
    /// `Q⁰ = q0·I`.
    #[serde(default = "unit")]
    pub q0: f64,
    /// Diffusion level of the Gaussian families.
    #[serde(default = "half")]
    pub q: f64,
    #[serde(default = "unit")]
    pub theta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellGridSpec {
    #[serde(default = "default_s_step")]
    pub s_step: f64,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default = "default_r_step")]
    pub r_step: f64,
}

impl Default for ShellGridSpec {
    fn default() -> Self {
        Self { s_step: default_s_step(), s_max: default_s_max(), r_max: default_r_max(), r_step: default_r_step() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSpec {
    #[serde(default = "default_delta_frac")]
    pub delta_frac: f64,
    #[serde(default = "half")]
    pub eps_frac: f64,
    pub alpha: f64,
    #[serde(default)]
    pub grid: ShellGridSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub start_times: Vec<f64>,
    pub x0: Vec<f64>,
    pub paths: usize,
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Fd,
    Kde,
    Both,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySpec {
    pub route: Route,
    /// Time gaps `t − s`.
    pub gaps: Vec<f64>,
    pub nodes: usize,
    /// Half-width of the FD box; derived from the envelope rate when absent.
    pub box_radius: Option<f64>,
    #[serde(default = "default_box_target")]
    pub box_target: f64,
    pub dt: Option<f64>,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default = "default_kde_paths")]
    pub kde_paths: usize,
    #[serde(default)]
    pub bandwidth: Bandwidth,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSpec {
    pub levels: Vec<u64>,
    pub starts: Vec<f64>,
    #[serde(default = "default_approx_box")]
    pub box_radius: f64,
    #[serde(default = "default_approx_nodes")]
    pub nodes: usize,
    #[serde(default = "default_region")]
    pub region_radius: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_sigma")]
    pub mc_sigma: f64,
    #[serde(default = "default_envelope_factor")]
    pub envelope_factor: f64,
    #[serde(default = "default_tail_slack")]
    pub tail_slack: f64,
    #[serde(default = "default_fd_sup")]
    pub fd_sup: f64,
    #[serde(default = "default_kde_l1")]
    pub kde_l1: f64,
    #[serde(default = "default_kde_fd_factor")]
    pub kde_fd_factor: f64,
    #[serde(default = "default_h_mesh")]
    pub h_mesh: f64,
    #[serde(default = "default_fd_sup")]
    pub approx_sup: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationSpec {
    pub checks: Vec<String>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "unit")]
    pub horizon: f64,
    pub output_dir: Option<PathBuf>,
    pub operator: OperatorSpec,
    pub lyapunov: Option<LyapunovSpec>,
    pub simulation: Option<SimulationSpec>,
    pub density: Option<DensitySpec>,
    pub approx: Option<ApproxSpec>,
    pub verification: VerificationSpec,
}

fn one_dim() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn three() -> f64 {
    3.0
}
fn default_s_step() -> f64 {
    0.01
}
fn default_s_max() -> f64 {
    0.99
}
fn default_r_max() -> f64 {
    10.0
}
fn default_r_step() -> f64 {
    0.05
}
fn default_delta_frac() -> f64 {
    0.8
}
fn default_box_target() -> f64 {
    30.0
}
fn default_kde_paths() -> usize {
    100_000
}
fn default_approx_box() -> f64 {
    6.0
}
fn default_approx_nodes() -> usize {
    301
}
fn default_region() -> f64 {
    3.0
}
fn default_sigma() -> f64 {
    3.0
}
fn default_envelope_factor() -> f64 {
    1.1
}
fn default_tail_slack() -> f64 {
    0.1
}
fn default_fd_sup() -> f64 {
    1e-3
}
fn default_kde_l1() -> f64 {
    0.05
}
fn default_kde_fd_factor() -> f64 {
    3.0
}
fn default_h_mesh() -> f64 {
    0.01
}

/// 1-based line of the first `key = …` inside `[section]` (or at top level
/// when `section` is empty).
pub fn locate(source: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// A validation failure tied to a key of the source file.
struct Issue {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn issue(section: &'static str, key: &'static str, message: impl Into<String>) -> Issue {
    Issue { section, key, message: message.into() }
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: cannot read: {e}", path.display())))?;
        Self::from_source(&source, &path.display().to_string())
    }

    pub fn from_source(source: &str, origin: &str) -> Result<Self, CliError> {
        let scenario: Scenario = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| source[..s.start.min(source.len())].matches('\n').count() + 1);
            match line {
                Some(l) => CliError::Config(format!("{origin}:{l}: {}", e.message())),
                None => CliError::Config(format!("{origin}: {}", e.message())),
            }
        })?;
        if let Some(is) = scenario.validate() {
            let at = locate(source, is.section, is.key).map(|l| format!(":{l}")).unwrap_or_default();
            return Err(CliError::Config(format!("{origin}{at}: {}", is.message)));
        }
        Ok(scenario)
    }

    fn validate(&self) -> Option<Issue> {
        let op = &self.operator;
        if !(self.horizon > 0.0 && self.horizon <= 1.0) {
            return Some(issue("", "horizon", format!("horizon t = {} must lie in (0, 1]", self.horizon)));
        }
        if op.dim == 0 {
            return Some(issue("operator", "dim", "dim must be positive"));
        }
        if op.family == Family::Polynomial {
            if let Err(e) = self.growth_params() {
                return Some(issue("operator", "p", e.to_string()));
            }
            if let Some(l) = &self.lyapunov {
                let beta = op.p + 1.0 - op.m;
                let threshold = beta / (op.p - 1.0);
                if !(l.alpha > threshold) {
                    return Some(issue(
                        "lyapunov",
                        "alpha",
                        format!(
                            "alpha = {} violates the kernel-estimate constraint alpha > (p+1−m)/(p−1) = {threshold} for p = {}, m = {}",
                            l.alpha, op.p, op.m
                        ),
                    ));
                }
                for (key, v) in [("delta_frac", l.delta_frac), ("eps_frac", l.eps_frac)] {
                    if !(v > 0.0 && v < 1.0) {
                        return Some(issue("lyapunov", key, format!("{key} = {v} must lie in (0, 1)")));
                    }
                }
            }
        } else if !(op.q > 0.0) {
            return Some(issue("operator", "q", format!("q = {} must be positive", op.q)));
        }
        if let Some(sim) = &self.simulation {
            if sim.x0.len() != op.dim {
                return Some(issue(
                    "simulation",
                    "x0",
                    format!("x0 has {} entries, expected dim = {}", sim.x0.len(), op.dim),
                ));
            }
            if sim.start_times.iter().any(|s| !(*s >= 0.0 && *s < self.horizon)) {
                return Some(issue(
                    "simulation",
                    "start_times",
                    format!("start times must lie in [0, {})", self.horizon),
                ));
            }
            if sim.paths == 0 {
                return Some(issue("simulation", "paths", "paths must be positive"));
            }
            if !(sim.dt > 0.0) {
                return Some(issue("simulation", "dt", "dt must be positive"));
            }
        }
        if let Some(d) = &self.density {
            if d.gaps.is_empty() || d.gaps.iter().any(|g| !(*g > 0.0 && *g <= self.horizon)) {
                return Some(issue(
                    "density",
                    "gaps",
                    format!("gaps must be nonempty and lie in (0, {}]", self.horizon),
                ));
            }
            if d.nodes < 21 {
                return Some(issue("density", "nodes", "nodes must be at least 21"));
            }
            if op.dim > 2 && d.route != Route::Kde {
                return Some(issue("density", "route", "finite differences support dim ≤ 2"));
            }
            if d.box_radius.is_none() && op.family != Family::Polynomial {
                return Some(issue("density", "box_radius", "box_radius is required for the Gaussian families"));
            }
        }
        if let Some(a) = &self.approx {
            if a.levels.is_empty() || a.levels.contains(&0) {
                return Some(issue("approx", "levels", "levels must be nonempty positive integers"));
            }
            if a.starts.is_empty() || a.starts.iter().any(|s| !(*s > 0.0 && *s < self.horizon)) {
                return Some(issue("approx", "starts", format!("starts must lie in (0, {})", self.horizon)));
            }
        }
        self.validate_checks()
    }

    fn validate_checks(&self) -> Option<Issue> {
        let registry = checks::list_checks();
        let mut seen: Vec<&str> = Vec::new();
        for id in &self.verification.checks {
            let Some(check) = registry.iter().find(|c| c.id == id) else {
                let known: Vec<&str> = registry.iter().map(|c| c.id).collect();
                return Some(issue(
                    "verification",
                    "checks",
                    format!("unknown check '{id}'; registered: {}", known.join(", ")),
                ));
            };
            if seen.contains(&check.id) {
                return Some(issue("verification", "checks", format!("check '{id}' listed twice")));
            }
            seen.push(check.id);
            let oracle = self.operator.family != Family::Polynomial;
            if check.needs_growth && oracle {
                return Some(issue("verification", "checks", format!("check '{id}' needs the polynomial family")));
            }
            if check.needs_oracle && !oracle {
                return Some(issue(
                    "verification",
                    "checks",
                    format!("check '{id}' needs a Gaussian family with a closed-form law"),
                ));
            }
            let missing = [
                ("lyapunov", check.needs_lyapunov && self.lyapunov.is_none()),
                ("simulation", check.needs_simulation && self.simulation.is_none()),
                ("density", check.needs_density && self.density.is_none()),
                ("approx", check.needs_approx && self.approx.is_none()),
            ];
            if let Some((section, _)) = missing.iter().find(|(_, m)| *m) {
                return Some(issue("verification", "checks", format!("check '{id}' needs a [{section}] section")));
            }
        }
        None
    }

    pub fn growth_params(&self) -> driftlab_core::Result<GrowthParams> {
        let op = &self.operator;
        GrowthParams::new(op.m, op.p, op.lambda, op.kappa, op.coercivity_radius, CoercivityRate::constant(op.b))
    }

    pub fn field(&self) -> driftlab_core::Result<CoefficientField> {
        let op = &self.operator;
        match op.family {
            Family::Polynomial => {
                make_polynomial(op.dim, &self.growth_params()?, BaseDiffusion::scaled_identity(op.dim, op.q0))
            }
            Family::Brownian => Ok(brownian(op.dim, op.q)),
            Family::Ou => Ok(ornstein_uhlenbeck(op.dim, op.theta, op.q)),
        }
    }

    /// `(mean, variance)` of the closed-form law at time gap `gap`.
    pub fn closed_form(&self, x0: &[f64], gap: f64) -> Option<(Vec<f64>, f64)> {
        let op = &self.operator;
        match op.family {
            Family::Polynomial => None,
            Family::Brownian => Some(driftlab_core::density_lab::oracle::brownian_law(op.q, x0, gap)),
            Family::Ou => Some(driftlab_core::density_lab::oracle::ou_law(op.theta, op.q, x0, gap)),
        }
    }
}
