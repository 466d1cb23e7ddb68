//! Scenario orchestration: builds the operator and its Lyapunov functions
//! once, runs the requested checks in registry order and writes the
//! artifact tree.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use driftlab_core::bound_envelope::{
    fit_tail_decay, verify_envelope_domination, write_tail_csv, KernelEnvelope, TailFit,
};
use driftlab_core::coefficient_approx::{verify_approx, ApproximationScheme};
use driftlab_core::density_lab::{
    compare_densities, kde_density, kde_split_error, lyapunov_box_radius, oracle, slice_plot_script,
    solve_density_family, DensityField, FdConfig, Region, SpaceGrid,
};
use driftlab_core::grid::{direction_set, ShellGrid};
use driftlab_core::lyapunov::{
    derive_static, derive_time_dependent, verify_lyapunov, write_rate_csv, SpaceTimeWeight, StaticLyapunov,
    TimeDependentLyapunov,
};
use driftlab_core::operator_model::{check_hypotheses, CoefficientField, GrowthParams};
use driftlab_core::sde_engine::{
    derived_seed, moment_curve, simulate_paths, verify_moment_bound, MomentRequest, SimulationPlan,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checks;
use crate::error::CliError;
use crate::scenario::{Route, Scenario, ShellGridSpec};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: Option<u64>,
    pub verdicts: BTreeMap<String, String>,
    pub details: BTreeMap<String, Value>,
    pub pass: bool,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub struct Outcome {
    pub pass: bool,
    pub details: Value,
}

struct Weights {
    v: StaticLyapunov,
    w: TimeDependentLyapunov,
    grid: ShellGrid,
}

struct KdeResult {
    density: DensityField,
    split_errors: Vec<f64>,
    explosions: Vec<usize>,
}

pub struct Context<'a> {
    pub scenario: &'a Scenario,
    field: CoefficientField,
    params: Option<GrowthParams>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    weights: Option<Weights>,
    fd: Option<DensityField>,
    kde: Option<KdeResult>,
}

fn shell_grid(dim: usize, spec: &ShellGridSpec) -> driftlab_core::Result<ShellGrid> {
    ShellGrid::uniform(dim, 0.0, spec.s_max, spec.s_step, spec.r_max, spec.r_step)
}

fn section<'s, T>(value: &'s Option<T>, name: &str) -> Result<&'s T, CliError> {
    value.as_ref().ok_or_else(|| CliError::Config(format!("this step needs a [{name}] section")))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

impl<'a> Context<'a> {
    pub fn new(scenario: &'a Scenario, opts: &RunOptions) -> Result<Self, CliError> {
        let field = scenario.field()?;
        let params = match scenario.operator.family {
            crate::scenario::Family::Polynomial => Some(scenario.growth_params()?),
            _ => None,
        };
        let out = opts.out.clone().or_else(|| scenario.output_dir.clone());
        let seed = opts.seed.or(scenario.simulation.as_ref().map(|s| s.seed));
        Ok(Self { scenario, field, params, seed, out, weights: None, fd: None, kde: None })
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    fn params(&self) -> Result<&GrowthParams, CliError> {
        self.params.as_ref().ok_or_else(|| CliError::Config("this step needs the polynomial family".into()))
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn x0(&self) -> Vec<f64> {
        match &self.scenario.simulation {
            Some(sim) => sim.x0.clone(),
            None => vec![0.0; self.scenario.operator.dim],
        }
    }

    fn write(&self, rel: &str, contents: &[u8]) -> Result<(), CliError> {
        if let Some(dir) = &self.out {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    fn write_density(&self, name: &str, density: &DensityField, log_scale: bool) -> Result<(), CliError> {
        if self.out.is_none() {
            return Ok(());
        }
        let mut buf = Vec::new();
        density.write_csv(&mut buf)?;
        self.write(&format!("densities/{name}.csv"), &buf)?;
        self.write(&format!("densities/{name}.json"), density.sidecar_json()?.as_bytes())?;
        let script = slice_plot_script(&format!("../densities/{name}.csv"), density, log_scale);
        self.write(&format!("plots/{name}.plt"), script.as_bytes())
    }

    fn weights(&mut self) -> Result<&Weights, CliError> {
        if self.weights.is_none() {
            let spec = section(&self.scenario.lyapunov, "lyapunov")?;
            let params = self.params()?.clone();
            let grid = shell_grid(self.field.dim(), &spec.grid)?;
            let v = derive_static(&self.field, &params, spec.delta_frac, &grid)?;
            let w = derive_time_dependent(
                &v,
                &self.field,
                &params,
                self.scenario.horizon,
                spec.eps_frac,
                spec.alpha,
                &grid,
            )?;
            let mut buf = Vec::new();
            write_rate_csv(&mut buf, &w.rate)?;
            self.write("rate.csv", &buf)?;
            self.weights = Some(Weights { v, w, grid });
        }
        Ok(self.weights.as_ref().unwrap())
    }

    fn envelope(&self) -> Result<KernelEnvelope, CliError> {
        let spec = section(&self.scenario.lyapunov, "lyapunov")?;
        let d = self.field.dim();
        Ok(KernelEnvelope::with_default_delta0(self.params()?, d, spec.alpha, d as f64 + 3.0)?)
    }

    fn density_grid(&self) -> Result<SpaceGrid, CliError> {
        let spec = section(&self.scenario.density, "density")?;
        let radius = match spec.box_radius {
            Some(r) => r,
            None => {
                let env = self.envelope()?;
                let smallest = spec.gaps.iter().copied().fold(f64::INFINITY, f64::min);
                lyapunov_box_radius(env.delta0, env.alpha, env.beta, smallest, spec.box_target)
            }
        };
        Ok(SpaceGrid::cube(self.field.dim(), radius, spec.nodes)?)
    }

    fn starts_from_gaps(&self) -> Vec<f64> {
        let t = self.scenario.horizon;
        self.scenario.density.as_ref().map(|d| d.gaps.iter().map(|g| t - g).collect()).unwrap_or_default()
    }

    fn fd(&mut self) -> Result<&DensityField, CliError> {
        if self.fd.is_none() {
            let spec = section(&self.scenario.density, "density")?;
            let cfg = FdConfig { grid: self.density_grid()?, dt: spec.dt, boundary: spec.boundary };
            let rho =
                solve_density_family(&self.field, &self.starts_from_gaps(), self.scenario.horizon, &self.x0(), &cfg)?;
            self.write_density("fd", &rho, true)?;
            self.fd = Some(rho);
        }
        Ok(self.fd.as_ref().unwrap())
    }

    fn kde(&mut self) -> Result<&KdeResult, CliError> {
        if self.kde.is_none() {
            let spec = section(&self.scenario.density, "density")?;
            let sim = section(&self.scenario.simulation, "simulation")?;
            let grid = self.density_grid()?;
            let mut ensembles = Vec::new();
            let mut split_errors = Vec::new();
            let mut explosions = Vec::new();
            for (j, s) in self.starts_from_gaps().into_iter().enumerate() {
                let plan = SimulationPlan {
                    field: self.field.clone(),
                    start: s,
                    horizon: self.scenario.horizon,
                    x0: sim.x0.clone(),
                    paths: spec.kde_paths,
                    dt: sim.dt,
                    scheme: sim.scheme,
                    seed: derived_seed(self.seed(), 1_000 + j as u64),
                };
                let ens = simulate_paths(&plan)?;
                split_errors.push(kde_split_error(&ens, &spec.bandwidth, &grid)?);
                explosions.push(ens.diagnostics.explosions);
                ensembles.push(ens);
            }
            let density = kde_density(&ensembles, &spec.bandwidth, &grid, self.field.label())?;
            self.write_density("kde", &density, false)?;
            self.kde = Some(KdeResult { density, split_errors, explosions });
        }
        Ok(self.kde.as_ref().unwrap())
    }

    fn closed_form(&self, grid: &SpaceGrid) -> Result<DensityField, CliError> {
        let x0 = self.x0();
        let starts = self.starts_from_gaps();
        let sc = self.scenario;
        let law_x0 = x0.clone();
        let field = oracle::gaussian_field(grid, &starts, sc.horizon, &x0, self.field.label(), move |gap| {
            sc.closed_form(&law_x0, gap).expect("Gaussian family")
        });
        self.write_density("closed_form", &field, false)?;
        Ok(field)
    }

    pub fn run_check(&mut self, id: &str) -> Result<Outcome, CliError> {
        let tol = self.scenario.verification.tolerances.clone();
        match id {
            "hypotheses" => {
                let params = self.params()?.clone();
                let grid = self.weights()?.grid.clone();
                let report = check_hypotheses(&self.field, &params, &grid, &direction_set(self.field.dim()));
                Ok(Outcome { pass: report.pass, details: to_value(&report.conditions) })
            }
            "lyapunov_certificate" => self.lyapunov_certificate(tol.h_mesh),
            "moment_bound_prop27" => self.moment_bound(tol.mc_sigma),
            "fd_vs_closed_form" => {
                let fd = self.fd()?.clone();
                let exact = self.closed_form(&fd.grid)?;
                let m = compare_densities(&fd, &exact, Region::everywhere(), false)?;
                let pass = m.slices.iter().all(|s| s.sup <= tol.fd_sup);
                Ok(Outcome { pass, details: json!({ "tolerance": tol.fd_sup, "metrics": m, "leakage": fd.leakage }) })
            }
            "kde_vs_closed_form" => {
                let kde = self.kde()?;
                let (density, explosions) = (kde.density.clone(), kde.explosions.clone());
                let exact = self.closed_form(&density.grid)?;
                let m = compare_densities(&density, &exact, Region::everywhere(), false)?;
                let pass = m.slices.iter().all(|s| s.l1 <= tol.kde_l1) && explosions.iter().all(|e| *e == 0);
                Ok(Outcome {
                    pass,
                    details: json!({ "tolerance": tol.kde_l1, "metrics": m, "explosions": explosions }),
                })
            }
            "kde_vs_fd" => {
                let fd = self.fd()?.clone();
                let kde = self.kde()?;
                let m = compare_densities(&kde.density, &fd, Region::everywhere(), false)?;
                let rows: Vec<Value> = m
                    .slices
                    .iter()
                    .zip(&kde.split_errors)
                    .map(|(s, e)| json!({ "s": s.s, "l1": s.l1, "split_error": e, "bound": tol.kde_fd_factor * e, "pass": s.l1 <= tol.kde_fd_factor * e }))
                    .collect();
                let pass = rows.iter().all(|r| r["pass"] == json!(true));
                Ok(Outcome { pass, details: json!({ "factor": tol.kde_fd_factor, "slices": rows }) })
            }
            "tail_decay_thm53" => self.tail_decay(tol.tail_slack),
            "envelope_domination" => {
                let env = self.envelope()?;
                let fd = self.fd()?;
                let rep = verify_envelope_domination(&[fd], &env, tol.envelope_factor)?;
                Ok(Outcome { pass: rep.pass, details: json!({ "envelope": env, "domination": rep }) })
            }
            "approx_lyapunov" => {
                let levels = section(&self.scenario.approx, "approx")?.levels.clone();
                let field = self.field.clone();
                let wts = self.weights()?;
                let mut reports = Vec::new();
                for n in levels {
                    let scheme = ApproximationScheme::new(n, field.clone(), wts.w.clone())?;
                    reports.push(verify_approx(&scheme, &wts.v, Some(&wts.w), &wts.grid)?);
                }
                let pass = reports.iter().all(|r| r.pass);
                Ok(Outcome { pass, details: to_value(&reports) })
            }
            "approx_convergence" => self.approx_convergence(tol.approx_sup),
            other => Err(CliError::Config(format!("unknown check '{other}'"))),
        }
    }

    fn lyapunov_certificate(&mut self, h_mesh: f64) -> Result<Outcome, CliError> {
        let spec = section(&self.scenario.lyapunov, "lyapunov")?.clone();
        let params = self.params()?.clone();
        let field = self.field.clone();
        let horizon = self.scenario.horizon;
        let wts = self.weights()?;
        let cert = verify_lyapunov(&wts.w, &field, &wts.grid)?;
        let fine =
            ShellGridSpec { s_step: spec.grid.s_step / 2.0, r_step: spec.grid.r_step / 2.0, ..spec.grid.clone() };
        let fine_grid = shell_grid(field.dim(), &fine)?;
        let v2 = derive_static(&field, &params, spec.delta_frac, &fine_grid)?;
        let w2 = derive_time_dependent(&v2, &field, &params, horizon, spec.eps_frac, spec.alpha, &fine_grid)?;
        let coarse = wts.w.h_integral(0.0, horizon);
        let refined = w2.h_integral(0.0, horizon);
        let change = if coarse == refined { 0.0 } else { (coarse - refined).abs() / coarse.abs().max(refined.abs()) };
        let pass = cert.pass() && coarse.is_finite() && change <= h_mesh;
        let worst: Vec<_> = cert.violations.iter().take(5).collect();
        Ok(Outcome {
            pass,
            details: json!({
                "parameters": cert.parameters,
                "checked_nodes": cert.checked_nodes,
                "violation_count": cert.violation_count,
                "worst_violations": worst,
                "h_integral": coarse,
                "h_integral_refined": refined,
                "relative_change": change,
                "tolerance": h_mesh,
                "m_bound": wts.v.m_bound,
                "tail": wts.v.tail,
                "analytic_exponent": wts.w.analytic_exponent,
                "analytic_constant_fit": wts.w.analytic_constant_fit,
            }),
        })
    }

    fn moment_bound(&mut self, sigma: f64) -> Result<Outcome, CliError> {
        let sim = section(&self.scenario.simulation, "simulation")?.clone();
        let seed = self.seed();
        let field = self.field.clone();
        let horizon = self.scenario.horizon;
        let wts = self.weights()?;
        let req = MomentRequest {
            field,
            starts: sim.start_times.clone(),
            horizon,
            x0: sim.x0.clone(),
            paths: sim.paths,
            dt: sim.dt,
            scheme: sim.scheme,
            seed,
        };
        let weights: [(&str, &dyn SpaceTimeWeight); 2] = [("W", &wts.w), ("V", &wts.v)];
        let curve = moment_curve(&req, &weights)?;
        let report = verify_moment_bound(&curve, 0, &wts.w, Some((1, &wts.v)), sigma)?;
        let mut buf = Vec::new();
        curve.write_csv(&mut buf)?;
        self.write("moments.csv", &buf)?;
        self.write("plots/moments.plt", moments_plot_script().as_bytes())?;
        let pass = report.pass && curve.explosions.iter().all(|e| *e == 0);
        Ok(Outcome { pass, details: json!({ "report": report, "explosions": curve.explosions }) })
    }

    fn tail_decay(&mut self, slack: f64) -> Result<Outcome, CliError> {
        let env = self.envelope()?;
        let fd = self.fd()?.clone();
        let mut rows: Vec<(f64, TailFit, f64)> = Vec::new();
        let mut entries = Vec::new();
        for j in 0..fd.starts.len() {
            let gap = fd.gap(j);
            let fit = fit_tail_decay(&fd.grid, fd.slice(j), env.beta, None)?;
            let rate = env.rate(gap);
            let pass = fit.delta_hat >= (1.0 - slack) * rate;
            entries.push(json!({ "gap": gap, "fit": fit, "envelope_rate": rate, "pass": pass }));
            rows.push((gap, fit, rate));
        }
        let mut buf = Vec::new();
        write_tail_csv(&mut buf, &rows)?;
        self.write("tails.csv", &buf)?;
        let pass = entries.iter().all(|e| e["pass"] == json!(true));
        Ok(Outcome {
            pass,
            details: json!({ "slack": slack, "delta0": env.delta0, "alpha": env.alpha, "gaps": entries }),
        })
    }

    fn approx_convergence(&mut self, tol: f64) -> Result<Outcome, CliError> {
        let spec = section(&self.scenario.approx, "approx")?.clone();
        let field = self.field.clone();
        let x0 = self.x0();
        let horizon = self.scenario.horizon;
        let w = self.weights()?.w.clone();
        let grid = SpaceGrid::cube(field.dim(), spec.box_radius, spec.nodes)?;
        let cfg = FdConfig { grid: grid.clone(), dt: None, boundary: Default::default() };
        let base = solve_density_family(&field, &spec.starts, horizon, &x0, &cfg)?;
        let s_lo = spec.starts.iter().copied().fold(f64::INFINITY, f64::min);
        let s_hi = spec.starts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let region = Region { radius: spec.region_radius, s_range: Some((s_lo, s_hi)) };
        let max_log_w = spec
            .starts
            .iter()
            .flat_map(|s| (0..grid.len()).map(move |i| (*s, i)))
            .map(|(s, i)| w.log_value(s, &grid.point(i)))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut levels = Vec::new();
        for &n in &spec.levels {
            let scheme = ApproximationScheme::new(n, field.clone(), w.clone())?;
            let rho_n = solve_density_family(&scheme.field(), &spec.starts, horizon, &x0, &cfg)?;
            let m = compare_densities(&rho_n, &base, region, false)?;
            levels.push(json!({ "n": n, "sup": m.sup, "l1": m.l1, "shell_outside_box": max_log_w < (n as f64).ln() }));
        }
        let sups: Vec<f64> = levels.iter().map(|l| l["sup"].as_f64().unwrap_or(f64::NAN)).collect();
        let monotone = sups.windows(2).all(|p| p[1] <= p[0]);
        let outside = levels.iter().rev().find(|l| l["shell_outside_box"] == json!(true));
        let at_outside = outside.map(|l| l["sup"].as_f64().unwrap_or(f64::NAN));
        let pass = monotone && at_outside.is_some_and(|s| s <= tol);
        Ok(Outcome {
            pass,
            details: json!({
                "tolerance": tol,
                "max_log_w1_on_box": max_log_w,
                "monotone": monotone,
                "sup_at_largest_outside_level": at_outside,
                "levels": levels,
            }),
        })
    }
}

fn moments_plot_script() -> String {
    "set datafile separator ','\nset key autotitle columnhead\nset logscale y\nset xlabel 's'\nset ylabel 'zeta_hat'\n\
     plot '../moments.csv' using 2:($1 eq 'W' ? $3 : 1/0) with linespoints title 'W', \\\n     \
     '' using 2:($1 eq 'V' ? $3 : 1/0) with linespoints title 'V'\n"
        .to_string()
}

/// Runs every check the scenario requests, in registry order.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<Report, CliError> {
    let ids: Vec<&str> = scenario.verification.checks.iter().map(String::as_str).collect();
    run_checks(scenario, opts, &ids)
}

/// Runs the given checks in registry order and writes `report.json`.
pub fn run_checks(scenario: &Scenario, opts: &RunOptions, ids: &[&str]) -> Result<Report, CliError> {
    for id in ids {
        if checks::find(id).is_none() {
            return Err(CliError::Config(format!("unknown check '{id}'")));
        }
    }
    let mut ctx = Context::new(scenario, opts)?;
    if let Some(dir) = &ctx.out {
        fs::create_dir_all(dir)?;
    }
    let mut verdicts = BTreeMap::new();
    let mut details = BTreeMap::new();
    for info in checks::list_checks() {
        if !ids.contains(&info.id) {
            continue;
        }
        let outcome = ctx.run_check(info.id)?;
        verdicts.insert(info.id.to_string(), if outcome.pass { "pass" } else { "fail" }.to_string());
        details.insert(info.id.to_string(), outcome.details);
    }
    let pass = verdicts.values().all(|v| v == "pass");
    let report = Report { scenario: scenario.name.clone(), seed: ctx.seed, verdicts, details, pass };
    ctx.write("report.json", report.to_json().as_bytes())?;
    Ok(report)
}

pub fn output_dir(scenario: &Scenario, opts: &RunOptions) -> Option<PathBuf> {
    opts.out.clone().or_else(|| scenario.output_dir.clone())
}

pub fn read_report(dir: &Path) -> Result<String, CliError> {
    fs::read_to_string(dir.join("report.json")).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// Which density routes the scenario asks for.
pub fn routes(scenario: &Scenario) -> (bool, bool) {
    match scenario.density.as_ref().map(|d| d.route) {
        Some(Route::Fd) => (true, false),
        Some(Route::Kde) => (false, true),
        Some(Route::Both) => (true, true),
        None => (false, false),
    }
}

impl Context<'_> {
    /// Densities for the `density` subcommand.
    pub fn densities(&mut self) -> Result<Value, CliError> {
        let (fd, kde) = routes(self.scenario);
        let mut out = serde_json::Map::new();
        if fd {
            let rho = self.fd()?;
            out.insert(
                "fd".into(),
                json!({ "starts": rho.starts, "mass": rho.mass, "leakage": rho.leakage, "provenance": rho.provenance }),
            );
        }
        if kde {
            let k = self.kde()?;
            out.insert(
                "kde".into(),
                json!({ "starts": k.density.starts, "mass": k.density.mass, "split_errors": k.split_errors, "explosions": k.explosions, "provenance": k.density.provenance }),
            );
        }
        Ok(Value::Object(out))
    }

    pub fn lyapunov_summary(&mut self) -> Result<Value, CliError> {
        let wts = self.weights()?;
        Ok(json!({ "static": wts.v, "time_dependent": wts.w }))
    }
}

impl Context<'_> {
    /// Terminal samples for every `[simulation]` start time; writes
    /// `paths/s{j}.csv` when an output directory is set.
    pub fn simulate(&mut self) -> Result<Value, CliError> {
        let sim = section(&self.scenario.simulation, "simulation")?.clone();
        let mut rows = Vec::new();
        for (j, &s) in sim.start_times.iter().enumerate() {
            let plan = SimulationPlan {
                field: self.field.clone(),
                start: s,
                horizon: self.scenario.horizon,
                x0: sim.x0.clone(),
                paths: sim.paths,
                dt: sim.dt,
                scheme: sim.scheme,
                seed: derived_seed(self.seed(), j as u64),
            };
            let ens = simulate_paths(&plan)?;
            if self.out.is_some() {
                let mut buf = Vec::new();
                ens.write_csv(&mut buf)?;
                self.write(&format!("paths/s{j}.csv"), &buf)?;
            }
            let d = ens.dim;
            let valid: Vec<&[f64]> = ens.valid_points().collect();
            let mean: Vec<f64> =
                (0..d).map(|k| valid.iter().map(|p| p[k]).sum::<f64>() / valid.len().max(1) as f64).collect();
            rows.push(json!({ "s": s, "seed": plan.seed, "mean": mean, "diagnostics": ens.diagnostics }));
        }
        Ok(Value::Array(rows))
    }
}
