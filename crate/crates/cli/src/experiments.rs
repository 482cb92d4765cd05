//! Experiment assembly and the four commands: offline library builds, online
//! adaptive runs, the robust/optimal/adaptive cost comparison, and the
//! time-varying rank certificates.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use adaptive_stab_core::adaptive::{run_adaptive, OnlineConfig, SubsetPolicy, SwitchingSchedule};
use adaptive_stab_core::library::{
    build_library, FeedbackLibrary, GainSchedule, ParameterBox, SolverConfig, TrainingSet,
};
use adaptive_stab_core::models::{
    build_ensemble, build_oscillator, build_parabolic, build_periodic, parabolic_initial_state,
    restriction_matrix, ParabolicOptions,
};
use adaptive_stab_core::ode::{
    export_trajectory_csv, integrate_with, ControlSystem, Feedback, IntegratorConfig, Scheme,
};
use adaptive_stab_core::riccati::{
    silverman_meadows_qb, silverman_meadows_qc, solve_periodic_riccati,
};
use adaptive_stab_core::{switched_system, Error};

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind};

pub enum CliError {
    Config(String),
    Numerical(Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Numerical(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn scheme_of(name: &str) -> Scheme {
    match name {
        "euler" => Scheme::ExplicitEuler,
        "cn" => Scheme::CrankNicolson,
        _ => Scheme::Cnab,
    }
}

fn parabolic_options(cfg: &ExperimentConfig) -> ParabolicOptions {
    ParabolicOptions {
        coarse_nodes: cfg.pde_coarse_nodes,
        nu: cfg.pde_nu,
        outputs: cfg.pde_outputs,
        actuators: cfg.actuators.clone(),
    }
}

/// Training grid and the systems the offline Riccati solves run on (the
/// coarsest level for the parabolic experiments).
pub fn offline_systems(
    cfg: &ExperimentConfig,
) -> CliResult<(TrainingSet, Vec<ControlSystem>, String)> {
    match cfg.experiment {
        ExperimentKind::Oscillator => {
            let n1 = cfg.osc_n1 as i64;
            let params: Vec<DVector<f64>> = (-n1..=n1)
                .map(|i| DVector::from_element(1, i as f64 / n1 as f64))
                .collect();
            let training = TrainingSet::new(params, ParameterBox::new(vec![-1.0], vec![1.0]))?;
            let systems = training
                .iter()
                .map(|p| build_oscillator(p[0]))
                .collect::<Result<_, _>>()?;
            Ok((training, systems, "oscillator".into()))
        }
        ExperimentKind::Periodic | ExperimentKind::Noise => {
            let (n1, n2) = (cfg.per_n1 as i64, cfg.per_n2 as i64);
            let mut params = Vec::new();
            for i1 in -n1..=n1 {
                for i2 in 0..n2 {
                    params.push(DVector::from_vec(vec![
                        1.0 + i1 as f64 / (2 * n1) as f64,
                        i2 as f64 / n2 as f64,
                    ]));
                }
            }
            let training =
                TrainingSet::new(params, ParameterBox::new(vec![0.5, 0.0], vec![1.5, 1.0]))?;
            let systems = training
                .iter()
                .map(|p| build_periodic(p[0], p[1]))
                .collect::<Result<_, _>>()?;
            Ok((training, systems, format!("periodic-{n1}x{n2}")))
        }
        ExperimentKind::Pde | ExperimentKind::Switching => {
            let opts = parabolic_options(cfg);
            let count = cfg.pde_train;
            let params: Vec<DVector<f64>> = (0..count)
                .map(|i| {
                    DVector::from_element(1, i as f64 * 2.0 * std::f64::consts::PI / count as f64)
                })
                .collect();
            let training = TrainingSet::new(
                params,
                ParameterBox::new(vec![0.0], vec![2.0 * std::f64::consts::PI]),
            )?;
            let systems = training
                .iter()
                .map(|p| build_parabolic(p[0], 0, &opts))
                .collect::<Result<_, _>>()?;
            Ok((
                training,
                systems,
                format!("parabolic-level0-{}x{0}", opts.coarse_nodes),
            ))
        }
        ExperimentKind::RobustCompare => {
            let n = cfg.ensemble_size;
            let params: Vec<DVector<f64>> = (1..=n)
                .map(|i| {
                    DVector::from_vec(vec![1.0, cfg.ensemble_phi0 + (i - 1) as f64 / n as f64])
                })
                .collect();
            let training =
                TrainingSet::new(params, ParameterBox::new(vec![0.5, 0.0], vec![1.5, 1.0]))?;
            let systems = training
                .iter()
                .map(|p| build_periodic(p[0], p[1]))
                .collect::<Result<_, _>>()?;
            Ok((training, systems, format!("ensemble-{n}")))
        }
    }
}

/// Auxiliary systems, the true plant, and the loop configuration.
pub struct OnlineSetup {
    pub training: TrainingSet,
    pub aux_systems: Vec<ControlSystem>,
    pub truth: ControlSystem,
    pub y0: DVector<f64>,
    pub online: OnlineConfig,
    pub policy: SubsetPolicy,
}

pub fn online_setup(cfg: &ExperimentConfig) -> CliResult<OnlineSetup> {
    let (training, _, _) = offline_systems(cfg)?;
    let truth_cfg = IntegratorConfig::new(scheme_of(&cfg.truth_scheme), cfg.truth_dt);
    let aux_cfg = IntegratorConfig::new(scheme_of(&cfg.aux_scheme), cfg.aux_dt);

    let (aux_systems, truth, y0, truth_to_aux): (
        Vec<ControlSystem>,
        ControlSystem,
        DVector<f64>,
        Option<DMatrix<f64>>,
    ) = match cfg.experiment {
        ExperimentKind::Oscillator => {
            let aux = training
                .iter()
                .map(|p| build_oscillator(p[0]))
                .collect::<Result<_, _>>()?;
            let truth = build_oscillator(cfg.sigma[0])?;
            (aux, truth, DVector::from_vec(cfg.y0.clone()), None)
        }
        ExperimentKind::Periodic | ExperimentKind::Noise | ExperimentKind::RobustCompare => {
            let aux = training
                .iter()
                .map(|p| build_periodic(p[0], p[1]))
                .collect::<Result<_, _>>()?;
            let truth = build_periodic(cfg.sigma[0], cfg.sigma[1])?;
            (aux, truth, DVector::from_vec(cfg.y0.clone()), None)
        }
        ExperimentKind::Pde | ExperimentKind::Switching => {
            let opts = parabolic_options(cfg);
            let aux = training
                .iter()
                .map(|p| build_parabolic(p[0], cfg.pde_aux_level, &opts))
                .collect::<Result<_, _>>()?;
            let truth = if cfg.experiment == ExperimentKind::Switching {
                let schedule = SwitchingSchedule::new(
                    cfg.switch_sigmas
                        .iter()
                        .map(|s| (DVector::from_element(1, *s), cfg.switch_dwell))
                        .collect(),
                );
                switched_system(
                    |p| build_parabolic(p[0], cfg.pde_truth_level, &opts),
                    &schedule,
                )?
            } else {
                build_parabolic(cfg.sigma[0], cfg.pde_truth_level, &opts)?
            };
            let y0 = parabolic_initial_state(cfg.pde_truth_level, &opts)?;
            let map = if cfg.pde_truth_level > cfg.pde_aux_level {
                Some(restriction_matrix(
                    cfg.pde_truth_level,
                    cfg.pde_aux_level,
                    &opts,
                )?)
            } else {
                None
            };
            (aux, truth, y0, map)
        }
    };

    let guess = training
        .iter()
        .position(|p| {
            p.len() == cfg.sigma0.len()
                && p.iter()
                    .zip(&cfg.sigma0)
                    .all(|(a, b)| (a - b).abs() <= 1e-9)
        })
        .ok_or_else(|| {
            CliError::Config(format!(
                "'sigma0' = {:?} is not a member of the training set",
                cfg.sigma0
            ))
        })?;

    let mut online = OnlineConfig::new(
        cfg.tau,
        cfg.io_nodes,
        cfg.horizon,
        guess,
        truth_cfg,
        aux_cfg,
        cfg.seed,
    );
    online.noise_magnitude = cfg.eta_mag;
    online.truth_to_aux = truth_to_aux;
    let policy = SubsetPolicy::new(cfg.n_global, cfg.gamma, cfg.seed);
    Ok(OnlineSetup {
        training,
        aux_systems,
        truth,
        y0,
        online,
        policy,
    })
}

fn solver_config(cfg: &ExperimentConfig) -> SolverConfig {
    SolverConfig {
        are_tol: cfg.are_tol,
        dre_tol: cfg.dre_tol,
        dt_ric: cfg.dt_ric,
        max_newton: 50,
        max_sweeps: cfg.max_sweeps,
    }
}

/// Offline stage: build the gain library and write it (binary + sidecar).
pub fn cmd_offline(cfg: &ExperimentConfig, library_path: &Path) -> CliResult<()> {
    let (training, systems, disc_id) = offline_systems(cfg)?;
    let lib = build_library(&systems, training, &solver_config(cfg), &disc_id)?;
    if let Some(parent) = library_path.parent() {
        std::fs::create_dir_all(parent).map_err(Error::Io)?;
    }
    lib.save(library_path)?;
    println!(
        "library: {} gain schedules ({} states, {} inputs) -> {}",
        lib.len(),
        lib.meta.states,
        lib.meta.inputs,
        library_path.display()
    );
    Ok(())
}

/// Online stage: run the adaptive loop against a stored library and write
/// the run artifacts.
pub fn cmd_online(cfg: &ExperimentConfig, library_path: &Path, out_dir: &Path) -> CliResult<()> {
    let lib = FeedbackLibrary::load(library_path)?;
    let setup = online_setup(cfg)?;
    if lib.len() != setup.training.len()
        || setup
            .training
            .iter()
            .enumerate()
            .any(|(i, p)| (lib.schedule(i).parameter.clone() - p).amax() > 1e-12)
    {
        return Err(CliError::Config(format!(
            "library at {} was built for a different training set than this config",
            library_path.display()
        )));
    }
    let result = run_adaptive(
        &setup.truth,
        &setup.aux_systems,
        &lib,
        &setup.y0,
        &setup.online,
        &setup.policy,
    )?;
    adaptive_stab_core::write_run_artifacts(out_dir, &result, lib.training(), &cfg.echo_json())?;
    let last = result.norms.last().map(|(_, v)| *v).unwrap_or(f64::NAN);
    println!(
        "online: {} windows, final |y| = {last:.6e}, cost = {:.6e} -> {}",
        result.estimates.len(),
        result.total_cost,
        out_dir.display()
    );
    if let Some((zeta, mu)) = result.decay {
        println!("decay fit: zeta = {zeta:.4}, mu = {mu:.4}");
    }
    Ok(())
}

fn quadratic_cost(
    sys: &ControlSystem,
    fb: &dyn Feedback,
    y0: &DVector<f64>,
    horizon: f64,
    step: &IntegratorConfig,
) -> Result<f64, Error> {
    let mut cost = 0.0;
    let mut prev: Option<f64> = None;
    integrate_with(sys, fb, y0, 0.0, horizon, step, |_, t, y| {
        let u = sys.input(fb, t, y);
        let z = &sys.c * y;
        let g = z.norm_squared() + u.norm_squared();
        if let Some(p) = prev {
            cost += 0.5 * (p + g) * step.dt;
        }
        prev = Some(g);
    })?;
    Ok(cost)
}

/// Compare the true-parameter feedback, the adaptive feedback, and the
/// robust ensemble feedback on the same plant and horizon.
pub fn cmd_robust_compare(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<()> {
    let (training, systems, disc) = offline_systems(cfg)?;
    let solver = solver_config(cfg);
    let truth = build_periodic(cfg.sigma[0], cfg.sigma[1])?;
    let y0 = DVector::from_vec(cfg.y0.clone());
    let sim = IntegratorConfig::new(scheme_of(&cfg.truth_scheme), cfg.truth_dt);

    // Optimal: feedback of the true parameter.
    let opt_sol = solve_periodic_riccati(
        &truth.a,
        &truth.b,
        &truth.q,
        solver.dt_ric,
        solver.dre_tol,
        solver.max_sweeps,
    )?;
    let opt_gain = GainSchedule::from_riccati(truth.parameter.clone(), &truth.b, &opt_sol);
    let cost_opt = quadratic_cost(&truth, &opt_gain, &y0, cfg.horizon, &sim)?;

    // Adaptive: the online loop over the candidate set.
    let lib = build_library(&systems, training.clone(), &solver, &disc)?;
    let setup = online_setup(cfg)?;
    let result = run_adaptive(
        &setup.truth,
        &setup.aux_systems,
        &lib,
        &setup.y0,
        &setup.online,
        &setup.policy,
    )?;
    let cost_adaptive = result.total_cost;

    // Robust: one a-priori gain from the extended ensemble Riccati problem.
    let ens = build_ensemble(&systems)?;
    let ens_sol = solve_periodic_riccati(
        &ens.extended.a,
        &ens.extended.b,
        &ens.extended.q,
        solver.dt_ric,
        solver.dre_tol.max(1e-7),
        solver.max_sweeps.max(600),
    )?;
    let robust_gain = ens.robust_gain(&ens_sol);
    let cost_robust = quadratic_cost(&truth, &robust_gain, &y0, cfg.horizon, &sim)?;

    std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
    // Closed-loop trajectories of the two static feedbacks, for plotting.
    let traj_opt =
        adaptive_stab_core::integrate_closed_loop(&truth, &opt_gain, &y0, 0.0, cfg.horizon, &sim)?;
    export_trajectory_csv(&out_dir.join("optimal_trajectory.csv"), &traj_opt, None)?;
    let traj_rob = adaptive_stab_core::integrate_closed_loop(
        &truth,
        &robust_gain,
        &y0,
        0.0,
        cfg.horizon,
        &sim,
    )?;
    export_trajectory_csv(&out_dir.join("robust_trajectory.csv"), &traj_rob, None)?;
    adaptive_stab_core::write_run_artifacts(out_dir, &result, &training, &cfg.echo_json())?;

    let costs = serde_json::json!({
        "horizon": cfg.horizon,
        "optimal": {"integral": cost_opt, "time_average": cost_opt / cfg.horizon},
        "adaptive": {"integral": cost_adaptive, "time_average": cost_adaptive / cfg.horizon},
        "robust": {"integral": cost_robust, "time_average": cost_robust / cfg.horizon},
        "config": cfg.echo_json(),
    });
    std::fs::write(
        out_dir.join("costs.json"),
        serde_json::to_string_pretty(&costs).map_err(Error::Json)?,
    )
    .map_err(Error::Io)?;

    println!(
        "cost over [0, {}]   integral      per unit time",
        cfg.horizon
    );
    println!(
        "  optimal  K_sigma  {cost_opt:<12.6} {:.6}",
        cost_opt / cfg.horizon
    );
    println!(
        "  adaptive K_est    {cost_adaptive:<12.6} {:.6}",
        cost_adaptive / cfg.horizon
    );
    println!(
        "  robust   K_ens    {cost_robust:<12.6} {:.6}",
        cost_robust / cfg.horizon
    );
    Ok(())
}

/// Controllability/observability certificates of the phase ensemble.
pub fn cmd_rank_check(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<()> {
    let members: Vec<ControlSystem> = cfg
        .rank_phis
        .iter()
        .map(|phi| build_periodic(1.0, *phi))
        .collect::<Result<_, _>>()?;
    if members.is_empty() {
        return Err(CliError::Config("'rank_phis' must be nonempty".into()));
    }
    let ens = build_ensemble(&members)?;
    let qb = silverman_meadows_qb(&ens.extended.a, &ens.extended.b, cfg.rank_time)?;
    let qc = silverman_meadows_qc(&ens.extended.a, &ens.extended.c, cfg.rank_time)?;

    let print_matrix = |name: &str, m: &DMatrix<f64>| {
        println!("{name}({}) =", cfg.rank_time);
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols())
                .map(|j| format!("{:>12.6}", m[(i, j)]))
                .collect();
            println!("  [{}]", row.join(" "));
        }
    };
    print_matrix("Q_B", &qb.matrix);
    println!(
        "rank = {} (full: {}), sigma_min = {:.6e}",
        qb.rank,
        qb.is_full_rank(),
        qb.sigma_min
    );
    print_matrix("Q_C", &qc.matrix);
    println!(
        "rank = {} (full: {}), sigma_min = {:.6e}",
        qc.rank,
        qc.is_full_rank(),
        qc.sigma_min
    );

    std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
    let dump = |cert: &adaptive_stab_core::RankCertificate| {
        serde_json::json!({
            "t": cert.t,
            "rank": cert.rank,
            "full_rank": cert.is_full_rank(),
            "sigma_min": cert.sigma_min,
            "rows": cert.matrix.nrows(),
            "cols": cert.matrix.ncols(),
            "entries_row_major": cert
                .matrix
                .row_iter()
                .flat_map(|r| r.iter().cloned().collect::<Vec<_>>())
                .collect::<Vec<f64>>(),
        })
    };
    let report = serde_json::json!({
        "phases": cfg.rank_phis,
        "q_b": dump(&qb),
        "q_c": dump(&qc),
        "config": cfg.echo_json(),
    });
    std::fs::write(
        out_dir.join("rank_check.json"),
        serde_json::to_string_pretty(&report).map_err(Error::Json)?,
    )
    .map_err(Error::Io)?;
    Ok(())
}
