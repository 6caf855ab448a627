//! The run pipeline: nominal caching, weight fitting, guidance cases,
//! perturbation sweeps, and all file artifacts.

use crate::cases::{build_case, suite_by_name, CaseSpec};
use crate::{artifact_header, HarnessError, LoadedScenario, RunConfig};
use mpsp_core::continuation::{outer_loop, GuidanceContext, GuidanceSolution, OuterOptions};
use mpsp_core::dynamics::{switching_function, thrust_angles, AugmentedState};
use mpsp_core::fourier::{fit_weights_least_squares, BasisMap, FourierWeights, WeightsFile};
use mpsp_core::mpsp::{count_segments, ConvergenceSpec, NewtonWeights};
use mpsp_core::nominal::{reoptimize, solve_fuel_optimal, NominalOptions, NominalSolution};
use mpsp_core::propagate::{write_trajectory_csv, SegmentedTrajectory, TrajectorySegment};
use mpsp_core::scenario::Unit;
use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::PathBuf;

/// Cached nominal solution, tied to the scenario content and step bound.
#[derive(Serialize, Deserialize)]
struct CachedNominal {
    scenario_hash: String,
    h_max_frac: f64,
    seed: u64,
    solution: NominalSolution,
}

/// Everything needed to run guidance cases against one scenario.
pub struct Pipeline {
    pub loaded: LoadedScenario,
    pub cfg: RunConfig,
    pub nominal: NominalSolution,
    pub eps0: FourierWeights,
    pub map: BasisMap,
    pub newton_weights: NewtonWeights,
    pub spec: ConvergenceSpec,
    pub h_max: f64,
}

impl Pipeline {
    /// Load the scenario, then load or solve (and cache) the nominal
    /// solution, and fit the basis weights from its sampled control.
    pub fn new(cfg: RunConfig) -> Result<Self, HarnessError> {
        let loaded = crate::load_scenario_hashed(&cfg.scenario_path)?;
        fs::create_dir_all(&cfg.out_dir)?;
        let nominal = ensure_nominal(&loaded, &cfg)?;
        Self::with_nominal(loaded, cfg, nominal)
    }

    pub fn with_nominal(
        loaded: LoadedScenario,
        cfg: RunConfig,
        nominal: NominalSolution,
    ) -> Result<Self, HarnessError> {
        let sc = &loaded.scenario;
        let map = BasisMap::standard(sc.t0, sc.tf);
        let eps0 = fit_weights_least_squares(&nominal.control_samples(), cfg.order, &map)?;
        let n_eps = eps0.n_weights();
        let h_max = sc.h_max(cfg.h_max_frac);
        Ok(Self {
            loaded,
            cfg,
            nominal,
            eps0,
            map,
            newton_weights: NewtonWeights::identity(n_eps),
            spec: ConvergenceSpec::default(),
            h_max,
        })
    }

    fn guidance_ctx(&self) -> GuidanceContext<'_> {
        GuidanceContext {
            scenario: &self.loaded.scenario,
            map: &self.map,
            newton_weights: &self.newton_weights,
            spec: &self.spec,
            h_max: self.h_max,
            outer: OuterOptions::default(),
        }
    }

    fn nominal_options(&self) -> NominalOptions {
        NominalOptions {
            h_max_frac: self.cfg.h_max_frac,
            seed: self.cfg.seed,
            ..NominalOptions::default()
        }
    }

    pub fn nominal_fuel_used(&self) -> f64 {
        self.nominal.fuel_used(self.loaded.scenario.m0)
    }

    /// Run one case end to end and write its artifacts into `out_dir`.
    pub fn run_case(&self, spec: &CaseSpec) -> Result<CaseReport, HarnessError> {
        let sc = &self.loaded.scenario;
        let conditions = build_case(spec, sc);
        let sol = outer_loop(&self.guidance_ctx(), &conditions, &self.nominal, &self.eps0);

        let fuel_nominal = self.nominal_fuel_used();
        let fuel_increase_vs_nominal = sol
            .converged()
            .then(|| (sol.fuel_used - fuel_nominal) / fuel_nominal * 100.0);

        let fuel_increase_vs_optimal = if self.cfg.reoptimize && sol.converged() {
            let seed = guidance_costate_seed(&sol, &self.map, sc.t0);
            match reoptimize(
                sc,
                &conditions,
                &self.nominal,
                seed.as_ref(),
                &self.nominal_options(),
            ) {
                Ok(opt) => {
                    if !opt.exact {
                        eprintln!(
                            "note: {} optimum taken from the smoothed fallback                              (bang-bang residual {:.2e})",
                            spec.id(),
                            opt.solution.residual_norm
                        );
                    }
                    let fuel_opt = opt.solution.fuel_used(conditions.m0);
                    Some((sol.fuel_used - fuel_opt) / fuel_opt * 100.0)
                }
                Err(e) => {
                    eprintln!("warning: re-optimization of {} failed: {e}", spec.id());
                    None
                }
            }
        } else {
            None
        };

        let report = CaseReport::new(
            spec,
            &sol,
            fuel_increase_vs_nominal,
            fuel_increase_vs_optimal,
            self,
        );
        self.write_case_artifacts(&report, &sol)?;
        Ok(report)
    }

    /// Run a whole suite; per-case failures are recorded, not fatal.
    pub fn run_sweep(&self, suite: &str) -> Result<Vec<CaseReport>, HarnessError> {
        let specs = suite_by_name(suite)?;
        let mut reports = Vec::with_capacity(specs.len());
        for spec in &specs {
            let report = self.run_case(spec)?;
            println!(
                "{:>16}  {}  iters={:<4} fuel+{}%",
                report.id,
                report.status,
                report.newton_iterations,
                report
                    .fuel_increase_vs_optimal_percent
                    .or(report.fuel_increase_vs_nominal_percent)
                    .map_or("-".into(), |v| format!("{v:.2}")),
            );
            reports.push(report);
        }
        self.write_sweep_summary(suite, &reports)?;
        Ok(reports)
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn write_case_artifacts(
        &self,
        report: &CaseReport,
        sol: &GuidanceSolution,
    ) -> Result<(), HarnessError> {
        let header = artifact_header(&self.loaded, &self.cfg);
        let id = &report.id;
        if let Some(traj) = &sol.trajectory {
            let params = mpsp_core::dynamics::DynParams {
                mu: self.loaded.scenario.mu,
                thrust_max: report.thrust_max_canonical,
                exhaust_velocity: self.loaded.scenario.exhaust_velocity,
            };
            let mut f = fs::File::create(self.out_path(&format!("{id}_trajectory.csv")))?;
            write_trajectory_csv(&mut f, traj, &params, &header)?;
            write_throttle_csv(
                &mut fs::File::create(self.out_path(&format!("{id}_throttle.csv")))?,
                traj,
                &header,
            )?;
            write_angles_csv(
                &mut fs::File::create(self.out_path(&format!("{id}_angles.csv")))?,
                traj,
                &header,
            )?;
        }
        let full = serde_json::json!({
            "meta": header,
            "report": report,
            "trace": sol.trace.iter().map(|s| serde_json::json!({
                "tau": s.tau,
                "dtau": s.dtau,
                "inner_iterations": s.inner_iterations,
                "sign": s.sign,
                "n_seg_tol": s.n_seg_tol,
                "failure": s.failure,
            })).collect::<Vec<_>>(),
        });
        fs::write(
            self.out_path(&format!("{id}_report.json")),
            serde_json::to_string_pretty(&full)?,
        )?;
        Ok(())
    }

    fn write_sweep_summary(&self, suite: &str, reports: &[CaseReport]) -> Result<(), HarnessError> {
        let mut f = fs::File::create(self.out_path(&format!("sweep_{suite}_summary.csv")))?;
        for line in artifact_header(&self.loaded, &self.cfg) {
            writeln!(f, "# {line}")?;
        }
        writeln!(
            f,
            "case,id,param,status,pos_err_km,vel_err_km_s,lambda_mf,newton_iterations,\
             fuel_increase_vs_optimal_pct,fuel_increase_vs_nominal_pct,n_seg,direct"
        )?;
        for (i, r) in reports.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                i + 1,
                r.id,
                r.param,
                r.status,
                fmt_opt(r.pos_err_km),
                fmt_opt(r.vel_err_km_s),
                fmt_opt(r.lambda_mf_abs),
                r.newton_iterations,
                fmt_opt(r.fuel_increase_vs_optimal_percent),
                fmt_opt(r.fuel_increase_vs_nominal_percent),
                r.n_seg,
                r.direct,
            )?;
        }
        Ok(())
    }

    /// Write the fitted weight file (order, eta range, per-channel weights).
    pub fn write_weights(&self) -> Result<(), HarnessError> {
        let file = WeightsFile::new(&self.eps0, &self.map);
        fs::write(
            self.out_path("weights.json"),
            serde_json::to_string_pretty(&file)?,
        )?;
        Ok(())
    }

    /// Export the nominal trajectory (`traj`), its thrust-angle profile
    /// (`angles`) or throttle sequence (`throttle`).
    pub fn export(&self, what: &str) -> Result<PathBuf, HarnessError> {
        let traj = nominal_as_trajectory(&self.nominal);
        let header = artifact_header(&self.loaded, &self.cfg);
        let path = match what {
            "traj" => {
                let p = self.out_path("nominal_trajectory.csv");
                let params = self.loaded.scenario.dyn_params();
                write_trajectory_csv(&mut fs::File::create(&p)?, &traj, &params, &header)?;
                p
            }
            "angles" => {
                let p = self.out_path("nominal_angles.csv");
                write_angles_csv(&mut fs::File::create(&p)?, &traj, &header)?;
                p
            }
            "throttle" => {
                let p = self.out_path("nominal_throttle.csv");
                write_throttle_csv(&mut fs::File::create(&p)?, &traj, &header)?;
                p
            }
            other => {
                return Err(HarnessError::BadCaseSpec(format!(
                    "export target {other:?} (expected traj | angles | throttle)"
                )))
            }
        };
        Ok(path)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6e}"))
}

/// Load the cached nominal if it matches this scenario, else solve and cache.
pub fn ensure_nominal(
    loaded: &LoadedScenario,
    cfg: &RunConfig,
) -> Result<NominalSolution, HarnessError> {
    let path = cfg.out_dir.join("nominal.json");
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        let cached: CachedNominal = serde_json::from_str(&text)?;
        if cached.scenario_hash != loaded.hash || cached.h_max_frac != cfg.h_max_frac {
            return Err(HarnessError::StaleNominal {
                path,
                found: cached.scenario_hash,
                expected: loaded.hash.clone(),
            });
        }
        return Ok(cached.solution);
    }
    let opts = NominalOptions {
        h_max_frac: cfg.h_max_frac,
        seed: cfg.seed,
        ..NominalOptions::default()
    };
    let solution = solve_fuel_optimal(&loaded.scenario, &opts)?;
    let cached = CachedNominal {
        scenario_hash: loaded.hash.clone(),
        h_max_frac: cfg.h_max_frac,
        seed: cfg.seed,
        solution,
    };
    fs::write(&path, serde_json::to_string(&cached)?)?;
    Ok(cached.solution)
}

/// Initial costate estimate from a converged guidance solution:
/// `lambda_v(t0) = U(t0)`, `lambda_r(t0) = -dU/dt(t0)` (the costate rate
/// relation), and the guidance mass costate. A strong warm start for
/// re-optimization because the guidance iterate already found the perturbed
/// problem's thrust structure.
pub fn guidance_costate_seed(
    sol: &GuidanceSolution,
    map: &BasisMap,
    t0: f64,
) -> Option<mpsp_core::dynamics::FullCostate> {
    let u0 = mpsp_core::fourier::control_at(t0, &sol.eps, map).ok()?;
    let du0 = mpsp_core::fourier::control_rate_at(t0, &sol.eps, map).ok()?;
    Some(mpsp_core::dynamics::FullCostate {
        lambda_r: -du0,
        lambda_v: u0,
        lambda_m: sol.lambda_m0,
    })
}

/// View the stored indirect solution as a guidance-mode trajectory with
/// U := lambda_v at the nodes (for exports and fit diagnostics).
pub fn nominal_as_trajectory(nom: &NominalSolution) -> SegmentedTrajectory {
    let segments: Vec<TrajectorySegment> = nom
        .segments
        .iter()
        .map(|seg| {
            let node_states: Vec<AugmentedState> = seg
                .node_states
                .iter()
                .zip(&seg.node_costates)
                .map(|(x, lam)| AugmentedState {
                    r: Vector3::new(x[0], x[1], x[2]),
                    v: Vector3::new(x[3], x[4], x[5]),
                    m: x[6],
                    lambda_m: lam[6],
                })
                .collect();
            let node_controls: Vec<Vector3<f64>> = seg
                .node_costates
                .iter()
                .map(|lam| Vector3::new(lam[3], lam[4], lam[5]))
                .collect();
            TrajectorySegment {
                u: seg.u,
                t_start: seg.node_times[0],
                t_end: *seg.node_times.last().unwrap(),
                node_times: seg.node_times.clone(),
                node_states,
                node_controls,
            }
        })
        .collect();
    let last = segments.last().unwrap();
    let xf = last.node_states.last().unwrap();
    let mut y = SVector::<f64, 7>::zeros();
    y.fixed_rows_mut::<3>(0).copy_from(&xf.r);
    y.fixed_rows_mut::<3>(3).copy_from(&xf.v);
    y[6] = xf.lambda_m;
    let m0 = segments[0].node_states[0].m;
    SegmentedTrajectory {
        terminal_output: y,
        fuel_used: m0 - xf.m,
        switch_times: nom.switch_times.clone(),
        segments,
    }
}

fn write_throttle_csv<W: Write>(
    w: &mut W,
    traj: &SegmentedTrajectory,
    header: &[String],
) -> std::io::Result<()> {
    for line in header {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "t_TU,u")?;
    for seg in &traj.segments {
        for t in &seg.node_times {
            writeln!(w, "{t:.12e},{}", seg.u)?;
        }
    }
    Ok(())
}

fn write_angles_csv<W: Write>(
    w: &mut W,
    traj: &SegmentedTrajectory,
    header: &[String],
) -> std::io::Result<()> {
    for line in header {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "t_TU,alpha_deg,beta_deg")?;
    for seg in &traj.segments {
        for (t, uc) in seg.node_times.iter().zip(&seg.node_controls) {
            let (a, b) = thrust_angles(uc).unwrap_or((f64::NAN, f64::NAN));
            writeln!(w, "{t:.12e},{a:.8e},{b:.8e}")?;
        }
    }
    Ok(())
}

/// Wraparound-aware angular distance in degrees.
fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

/// Thrust-angle continuity at every switching time: the jump between the
/// pre-switch and post-switch trajectory rows (the duplicated boundary
/// nodes). The basis parameterization shares one control value across the
/// throttle flip, so any nonzero jump signals a regression to per-node
/// control updates. A per-step slew diagnostic is reported alongside (the
/// angle change over the single steps straddling the switch), which is a
/// smooth-rate effect, not a discontinuity.
pub fn structural_metrics(traj: &SegmentedTrajectory, c: f64) -> StructuralMetrics {
    let mut max_switch_jump = 0.0f64;
    let mut max_slew = 0.0f64;
    for (k, _) in traj.switch_times.iter().enumerate() {
        let before = &traj.segments[k];
        let after = &traj.segments[k + 1];
        let u_minus = before.node_controls.last().unwrap();
        let u_plus = &after.node_controls[0];
        if let (Ok((a0, b0)), Ok((a1, b1))) = (thrust_angles(u_minus), thrust_angles(u_plus)) {
            max_switch_jump = max_switch_jump
                .max(angle_gap(a0, a1))
                .max((b0 - b1).abs());
        }
        let nb = before.node_controls.len();
        if nb >= 2 && after.node_controls.len() >= 2 {
            if let (Ok((ap, bp)), Ok((a0, b0)), Ok((an, bn))) = (
                thrust_angles(&before.node_controls[nb - 2]),
                thrust_angles(u_plus),
                thrust_angles(&after.node_controls[1]),
            ) {
                max_slew = max_slew
                    .max(angle_gap(ap, a0))
                    .max(angle_gap(a0, an))
                    .max((bp - b0).abs())
                    .max((b0 - bn).abs());
            }
        }
    }
    let mut max_bang_violation = f64::NEG_INFINITY;
    for seg in &traj.segments {
        let n = seg.node_states.len();
        for (i, (x, uc)) in seg.node_states.iter().zip(&seg.node_controls).enumerate() {
            if i > 0 && i < n - 1 {
                let s = switching_function(x.m, uc, x.lambda_m, c);
                max_bang_violation = max_bang_violation.max(s * (2.0 * seg.u as f64 - 1.0));
            }
        }
    }
    StructuralMetrics {
        max_switch_angle_jump_deg: max_switch_jump,
        switch_angle_slew_deg: max_slew,
        max_bang_violation,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StructuralMetrics {
    /// angle jump between the duplicated rows at a switch time
    pub max_switch_angle_jump_deg: f64,
    /// per-step angle change next to a switch (rate diagnostic)
    pub switch_angle_slew_deg: f64,
    pub max_bang_violation: f64,
}

/// Flat per-case record, serialized into the report JSON and summary CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    pub spec: CaseSpec,
    pub param: String,
    pub status: String,
    pub pos_err_km: Option<f64>,
    pub vel_err_km_s: Option<f64>,
    pub lambda_mf_abs: Option<f64>,
    pub newton_iterations: usize,
    pub continuation_steps: usize,
    pub direct: bool,
    pub n_seg: usize,
    pub final_n_seg_tol: usize,
    pub fuel_used_kg: Option<f64>,
    pub fuel_increase_vs_nominal_percent: Option<f64>,
    pub fuel_increase_vs_optimal_percent: Option<f64>,
    pub max_switch_angle_jump_deg: Option<f64>,
    pub switch_angle_slew_deg: Option<f64>,
    pub max_bang_violation: Option<f64>,
    pub mass_identity_error: Option<f64>,
    pub failure_reason: Option<String>,
    #[serde(skip)]
    pub thrust_max_canonical: f64,
}

impl CaseReport {
    fn new(
        spec: &CaseSpec,
        sol: &GuidanceSolution,
        fuel_increase_vs_nominal: Option<f64>,
        fuel_increase_vs_optimal: Option<f64>,
        pipe: &Pipeline,
    ) -> Self {
        let sc = &pipe.loaded.scenario;
        let conditions = build_case(spec, sc);
        let (structural, mass_err, n_seg) = match &sol.trajectory {
            Some(traj) => {
                let m = structural_metrics(traj, conditions.exhaust_velocity);
                let rep = mpsp_core::propagate::check_invariants(
                    traj,
                    &conditions.dyn_params(sc.mu),
                );
                (Some(m), Some(rep.mass_identity_error), count_segments(traj))
            }
            None => (None, None, 0),
        };
        CaseReport {
            id: spec.id(),
            spec: spec.clone(),
            param: spec.param_label(),
            status: if sol.converged() {
                "converged".into()
            } else {
                "failed".into()
            },
            pos_err_km: sol.terminal.map(|t| t.pos_km),
            vel_err_km_s: sol.terminal.map(|t| t.vel_km_s),
            lambda_mf_abs: sol.terminal.map(|t| t.lam_abs),
            newton_iterations: sol.total_newton_iterations,
            continuation_steps: sol.continuation_steps,
            direct: sol.direct,
            n_seg,
            final_n_seg_tol: sol.final_n_seg_tol,
            fuel_used_kg: sol
                .converged()
                .then(|| sc.units.from_canonical(sol.fuel_used, Unit::Mass)),
            fuel_increase_vs_nominal_percent: fuel_increase_vs_nominal,
            fuel_increase_vs_optimal_percent: fuel_increase_vs_optimal,
            max_switch_angle_jump_deg: structural.map(|s| s.max_switch_angle_jump_deg),
            switch_angle_slew_deg: structural.map(|s| s.switch_angle_slew_deg),
            max_bang_violation: structural.map(|s| s.max_bang_violation),
            mass_identity_error: mass_err,
            failure_reason: sol.failure_reason.clone(),
            thrust_max_canonical: conditions.thrust_max,
        }
    }
}
