//! Online stage: per-window gain selection from IO-data comparison, and the
//! concatenation of windows over a time horizon.
//!
//! In each update window the true plant runs under the currently selected
//! stored gain while auxiliary (fictitious) plants — one per candidate
//! parameter in the window's subset — are integrated from the same window
//! initial state under the same gain. The candidate whose IO data is closest
//! to the true plant's (in the squared-L2 sense) selects the gain for the
//! next window. Auxiliary integrations are pure and run in parallel.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::library::{FeedbackLibrary, TrainingSet};
use crate::ode::{integrate_with, ControlSystem, Feedback, IntegratorConfig};

/// IO data sampled on one update window.
#[derive(Clone, Debug)]
pub struct IoRecord {
    pub window: usize,
    /// Window start and length; the mesh is `io_nodes` equally spaced nodes
    /// spanning exactly `[t0, t0 + tau]`.
    pub t0: f64,
    pub tau: f64,
    /// Inputs, one `m`-column per mesh node.
    pub inputs: DMatrix<f64>,
    /// Outputs, one `p`-column per mesh node.
    pub outputs: DMatrix<f64>,
}

impl IoRecord {
    pub fn io_nodes(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn mesh(&self) -> Vec<f64> {
        let nodes = self.io_nodes();
        (0..nodes)
            .map(|j| self.t0 + self.tau * j as f64 / (nodes - 1) as f64)
            .collect()
    }
}

/// Squared-L2 comparison of IO differences over one window: trapezoidal
/// quadrature of `|dz(t)|^2 + |du(t)|^2` on the equally spaced window mesh.
pub fn comparison_functional(dz: &DMatrix<f64>, du: &DMatrix<f64>, tau: f64) -> Result<f64> {
    let nodes = dz.ncols();
    if nodes < 2 || du.ncols() != nodes {
        return Err(Error::MeshMismatch(format!(
            "output mesh has {nodes} nodes, input mesh has {}",
            du.ncols()
        )));
    }
    let h = tau / (nodes - 1) as f64;
    let mut acc = 0.0;
    for j in 0..nodes {
        let w = if j == 0 || j == nodes - 1 { 0.5 } else { 1.0 };
        acc += w * (dz.column(j).norm_squared() + du.column(j).norm_squared());
    }
    Ok(acc * h)
}

/// Smallest index attaining the minimum of the comparison vector; returns
/// the position within the subset.
pub fn update_estimate(comparisons: &[f64]) -> Result<usize> {
    if comparisons.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut best = 0usize;
    for (i, e) in comparisons.iter().enumerate() {
        if *e < comparisons[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-window candidate-subset rule: all training parameters within `gamma`
/// of the current estimate, plus `n_global` uniformly drawn indices.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SubsetPolicy {
    pub n_global: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl SubsetPolicy {
    pub fn new(n_global: usize, gamma: f64, seed: u64) -> Self {
        assert!(gamma >= 0.0);
        Self {
            n_global,
            gamma,
            seed,
        }
    }
}

/// Build the window subset `Sigma_l union Sigma_g` as ascending training-set
/// indices. The global draws are uniform with replacement and de-duplicated;
/// the current estimate is always a member (its distance to itself is zero).
pub fn select_subset(
    training: &TrainingSet,
    estimate: usize,
    policy: &SubsetPolicy,
    rng: &mut ChaCha12Rng,
) -> Vec<usize> {
    let mut members = training.within_ball(training.get(estimate), policy.gamma);
    for _ in 0..policy.n_global {
        let draw = rng.random_range(0..training.len());
        if !members.contains(&draw) {
            members.push(draw);
        }
    }
    members.sort_unstable();
    members
}

/// Auxiliary-state measurement noise: `y + eta_mag * (v - 0.5)` with `v`
/// uniform on `[0,1]^n`. Applied to auxiliary initial states only.
pub fn inject_measurement_noise(
    y: &DVector<f64>,
    eta_mag: f64,
    rng: &mut ChaCha12Rng,
) -> DVector<f64> {
    if eta_mag == 0.0 {
        return y.clone();
    }
    DVector::from_fn(y.len(), |i, _| y[i] + eta_mag * (rng.random::<f64>() - 0.5))
}

/// Piecewise-constant parameter schedule; repeats after the last dwell.
#[derive(Clone, Debug)]
pub struct SwitchingSchedule {
    entries: Vec<(DVector<f64>, f64)>,
    cycle: f64,
}

impl SwitchingSchedule {
    pub fn new(entries: Vec<(DVector<f64>, f64)>) -> Self {
        assert!(!entries.is_empty(), "schedule needs at least one entry");
        assert!(
            entries.iter().all(|(_, dwell)| *dwell > 0.0),
            "dwells must be positive"
        );
        let cycle = entries.iter().map(|(_, d)| d).sum();
        Self { entries, cycle }
    }

    pub fn cycle(&self) -> f64 {
        self.cycle
    }

    /// Switching instants within the first cycle (excluding t = 0).
    pub fn switch_times(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.entries
            .iter()
            .take(self.entries.len() - 1)
            .map(|(_, d)| {
                acc += d;
                acc
            })
            .collect()
    }

    /// Index of the active piece at time `t`.
    pub fn piece_at(&self, t: f64) -> usize {
        let mut tbar = t.rem_euclid(self.cycle);
        for (i, (_, dwell)) in self.entries.iter().enumerate() {
            if tbar < *dwell {
                return i;
            }
            tbar -= dwell;
        }
        self.entries.len() - 1
    }

    pub fn parameter_at(&self, t: f64) -> &DVector<f64> {
        &self.entries[self.piece_at(t)].0
    }
}

/// Truth plant with a piecewise-constant parameter: evaluates
/// `A_{sigma(t)}(t)` per the schedule. All pieces must share `B`, `C`, and
/// the state dimension.
pub fn switched_system<F>(build: F, schedule: &SwitchingSchedule) -> Result<ControlSystem>
where
    F: Fn(&DVector<f64>) -> Result<ControlSystem>,
{
    let pieces: Vec<ControlSystem> = schedule
        .entries
        .iter()
        .map(|(p, _)| build(p))
        .collect::<Result<_>>()?;
    let first = &pieces[0];
    let n = first.state_dim();
    for piece in &pieces[1..] {
        if piece.state_dim() != n || piece.b != first.b || piece.c != first.c {
            return Err(Error::DimensionMismatch(
                "switched pieces must share B, C, and the state dimension".into(),
            ));
        }
    }
    let b = first.b.clone();
    let c = first.c.clone();
    let q = first.q.clone();
    let restriction = first.feedback_restriction.clone();
    let weights = first.norm_weights.clone();
    let sched = schedule.clone();
    let ops: Vec<crate::ode::TimePeriodicOperator> = pieces.iter().map(|p| p.a.clone()).collect();
    let op =
        crate::ode::TimePeriodicOperator::aperiodic(n, move |t| ops[sched.piece_at(t)].evaluate(t));
    let mut sys = ControlSystem::new(op, b, c, q, first.parameter.clone())?;
    sys.feedback_restriction = restriction;
    sys.norm_weights = weights;
    Ok(sys)
}

/// Exponential-envelope fit of norm samples: `mu` is the negated slope of
/// the least-squares line through `log |y|` vs `t`, and `zeta` is the
/// smallest constant for which `|y(t_i)| <= zeta exp(-mu (t_i - t_0))`
/// holds at every sample.
pub fn fit_decay(samples: &[(f64, f64)]) -> Result<(f64, f64)> {
    if samples.len() < 3 {
        return Err(Error::TooFewSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    for (i, (_, v)) in samples.iter().enumerate() {
        if *v <= 0.0 {
            return Err(Error::NonPositiveNorm {
                index: i,
                value: *v,
            });
        }
    }
    let n = samples.len() as f64;
    let (mut st, mut sl, mut stt, mut stl) = (0.0, 0.0, 0.0, 0.0);
    for (t, v) in samples {
        let l = v.ln();
        st += t;
        sl += l;
        stt += t * t;
        stl += t * l;
    }
    let slope = (n * stl - st * sl) / (n * stt - st * st);
    let mu = -slope;
    let t0 = samples[0].0;
    let zeta = samples
        .iter()
        .map(|(t, v)| v.ln() + mu * (t - t0))
        .fold(f64::NEG_INFINITY, f64::max)
        .exp();
    Ok((zeta, mu))
}

/// Online-loop configuration shared by all windows.
#[derive(Clone, Debug)]
pub struct OnlineConfig {
    /// Window length.
    pub tau: f64,
    /// IO sample nodes per window (>= 2), equally spaced over the window.
    pub io_nodes: usize,
    /// Total horizon; must be an integer number of windows.
    pub horizon: f64,
    /// Training-set index of the initial guess.
    pub initial_guess: usize,
    /// Measurement-noise magnitude on auxiliary initial states.
    pub noise_magnitude: f64,
    pub truth_integrator: IntegratorConfig,
    pub aux_integrator: IntegratorConfig,
    /// Restriction map from the truth grid to the auxiliary grid (identity
    /// when `None`).
    pub truth_to_aux: Option<DMatrix<f64>>,
    /// Retain every k-th truth integrator node in the norm history.
    pub norm_stride: usize,
    pub seed: u64,
}

impl OnlineConfig {
    pub fn new(
        tau: f64,
        io_nodes: usize,
        horizon: f64,
        initial_guess: usize,
        truth_integrator: IntegratorConfig,
        aux_integrator: IntegratorConfig,
        seed: u64,
    ) -> Self {
        assert!(tau > 0.0 && horizon > 0.0 && io_nodes >= 2);
        Self {
            tau,
            io_nodes,
            horizon,
            initial_guess,
            noise_magnitude: 0.0,
            truth_integrator,
            aux_integrator,
            truth_to_aux: None,
            norm_stride: 1,
            seed,
        }
    }
}

/// One estimate per completed window.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateSample {
    pub window: usize,
    /// Update instant (window end).
    pub t: f64,
    pub index: usize,
    pub parameter: DVector<f64>,
}

/// Comparison vector of one window, keyed by training-set index.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowComparison {
    pub window: usize,
    pub entries: Vec<(usize, f64)>,
}

/// Everything an adaptive run produces.
#[derive(Clone, Debug)]
pub struct AdaptiveRunResult {
    pub estimates: Vec<EstimateSample>,
    /// `(t, |y(t)|)` samples on the truth integrator mesh.
    pub norms: Vec<(f64, f64)>,
    pub comparisons: Vec<WindowComparison>,
    /// Accumulated quadratic cost `int |C y|^2 + |u|^2 dt` of the truth run.
    pub total_cost: f64,
    /// `(zeta, mu)` envelope fit of the norm history, when requested.
    pub decay: Option<(f64, f64)>,
    pub seed: u64,
    pub final_state: DVector<f64>,
}

/// Outcome of a single window.
#[derive(Clone, Debug)]
pub struct WindowOutcome {
    pub y_new: DVector<f64>,
    /// Training-set index selected for the next window.
    pub new_estimate: usize,
    pub truth_io: IoRecord,
    pub aux_io: Vec<IoRecord>,
    /// `(training index, comparison value)` in subset order.
    pub comparisons: Vec<(usize, f64)>,
    pub norm_samples: Vec<(f64, f64)>,
    pub cost: f64,
}

struct WindowTrace {
    terminal: DVector<f64>,
    io: IoRecord,
    norms: Vec<(f64, f64)>,
    cost: f64,
}

/// Integrate one plant over a window, sampling IO on the window mesh by
/// nearest integrator node and accumulating the trapezoidal cost integrand.
#[allow(clippy::too_many_arguments)]
fn window_trace(
    sys: &ControlSystem,
    fb: &dyn Feedback,
    y0: &DVector<f64>,
    window: usize,
    t0: f64,
    tau: f64,
    io_nodes: usize,
    cfg: &IntegratorConfig,
    norm_stride: Option<usize>,
) -> Result<WindowTrace> {
    let steps = cfg.steps(t0, t0 + tau)?;
    let spacing = tau / (io_nodes - 1) as f64;
    let step_of_node = |j: usize| -> usize {
        let target = spacing * j as f64 / cfg.dt;
        (target.round() as usize).min(steps)
    };
    let mut inputs = DMatrix::zeros(sys.input_dim(), io_nodes);
    let mut outputs = DMatrix::zeros(sys.output_dim(), io_nodes);
    let mut next_node = 0usize;
    let mut norms = Vec::new();
    let mut cost = 0.0;
    let mut prev_integrand: Option<f64> = None;

    let terminal = integrate_with(sys, fb, y0, t0, t0 + tau, cfg, |k, t, y| {
        let u = sys.input(fb, t, y);
        let z = &sys.c * y;
        while next_node < io_nodes && step_of_node(next_node) == k {
            inputs.set_column(next_node, &u);
            outputs.set_column(next_node, &z);
            next_node += 1;
        }
        if let Some(stride) = norm_stride {
            if k % stride == 0 || k == steps {
                norms.push((t, sys.state_norm(y)));
            }
        }
        // Trapezoid in the cost integral on the integrator mesh.
        let integrand = z.norm_squared() + u.norm_squared();
        if let Some(prev) = prev_integrand {
            cost += 0.5 * (prev + integrand) * cfg.dt;
        }
        prev_integrand = Some(integrand);
    })?;

    debug_assert_eq!(next_node, io_nodes, "window mesh not fully sampled");
    Ok(WindowTrace {
        terminal,
        io: IoRecord {
            window,
            t0,
            tau,
            inputs,
            outputs,
        },
        norms,
        cost,
    })
}

/// Run one update window: integrate the truth under the gain of the current
/// estimate, integrate one auxiliary plant per subset candidate from the
/// same window-initial state (optionally noise-perturbed), compare IO data,
/// and select the next estimate.
///
/// `subset` holds ascending training-set indices and must contain the
/// current estimate; `noise` is the pre-drawn perturbation for this window.
#[allow(clippy::too_many_arguments)]
pub fn run_window(
    truth: &ControlSystem,
    aux_systems: &[ControlSystem],
    lib: &FeedbackLibrary,
    subset: &[usize],
    estimate: usize,
    y_old: &DVector<f64>,
    window: usize,
    t0: f64,
    cfg: &OnlineConfig,
    noise: Option<&DVector<f64>>,
) -> Result<WindowOutcome> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    debug_assert!(subset.contains(&estimate));
    let fb = lib.schedule(estimate);

    let truth_trace = window_trace(
        truth,
        fb,
        y_old,
        window,
        t0,
        cfg.tau,
        cfg.io_nodes,
        &cfg.truth_integrator,
        Some(cfg.norm_stride),
    )?;

    // Window-initial state seen by the auxiliaries: truth state restricted
    // to the auxiliary grid, plus measurement noise when configured.
    let mut y_aux = match &cfg.truth_to_aux {
        Some(r) => r * y_old,
        None => y_old.clone(),
    };
    if let Some(eta) = noise {
        y_aux += eta;
    }

    let aux_results: Vec<Result<(IoRecord, f64)>> = subset
        .par_iter()
        .map(|idx| {
            let sys = &aux_systems[*idx];
            let trace = window_trace(
                sys,
                fb,
                &y_aux,
                window,
                t0,
                cfg.tau,
                cfg.io_nodes,
                &cfg.aux_integrator,
                None,
            )?;
            let dz = &trace.io.outputs - &truth_trace.io.outputs;
            let du = &trace.io.inputs - &truth_trace.io.inputs;
            let e = comparison_functional(&dz, &du, cfg.tau)?;
            Ok((trace.io, e))
        })
        .collect();

    let mut aux_io = Vec::with_capacity(subset.len());
    let mut comparisons = Vec::with_capacity(subset.len());
    for (idx, res) in subset.iter().zip(aux_results) {
        let (io, e) = res?;
        aux_io.push(io);
        comparisons.push((*idx, e));
    }
    let values: Vec<f64> = comparisons.iter().map(|(_, e)| *e).collect();
    let new_estimate = subset[update_estimate(&values)?];

    Ok(WindowOutcome {
        y_new: truth_trace.terminal,
        new_estimate,
        truth_io: truth_trace.io,
        aux_io,
        comparisons,
        norm_samples: truth_trace.norms,
        cost: truth_trace.cost,
    })
}

/// Concatenate update windows over the horizon, threading the truth state
/// and the estimate from window to window.
pub fn run_adaptive(
    truth: &ControlSystem,
    aux_systems: &[ControlSystem],
    lib: &FeedbackLibrary,
    y0: &DVector<f64>,
    cfg: &OnlineConfig,
    policy: &SubsetPolicy,
) -> Result<AdaptiveRunResult> {
    let training = lib.training();
    if aux_systems.len() != training.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} auxiliary systems for {} training parameters",
            aux_systems.len(),
            training.len()
        )));
    }
    if policy.n_global > training.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} global draws exceed the training-set size {}",
            policy.n_global,
            training.len()
        )));
    }
    let windows_f = cfg.horizon / cfg.tau;
    let windows = windows_f.round();
    if windows < 1.0 || ((windows_f - windows).abs() / windows_f) > 1e-9 {
        return Err(Error::StepMismatch {
            dt: cfg.tau,
            horizon: cfg.horizon,
            defect: (windows_f - windows).abs() / windows_f,
        });
    }
    let windows = windows as usize;
    let aux_dim = match &cfg.truth_to_aux {
        Some(r) => r.nrows(),
        None => truth.state_dim(),
    };

    let mut rng = ChaCha12Rng::seed_from_u64(policy.seed);
    let mut estimate = cfg.initial_guess;
    let mut y = y0.clone();
    let mut result = AdaptiveRunResult {
        estimates: Vec::with_capacity(windows),
        norms: Vec::new(),
        comparisons: Vec::with_capacity(windows),
        total_cost: 0.0,
        decay: None,
        seed: policy.seed,
        final_state: y0.clone(),
    };

    for window in 1..=windows {
        let t0 = (window - 1) as f64 * cfg.tau;
        // Fixed draw order per window: subset indices first, then the noise
        // vector, so runs are reproducible bit for bit.
        let subset = select_subset(training, estimate, policy, &mut rng);
        let noise = if cfg.noise_magnitude > 0.0 {
            Some(inject_measurement_noise(
                &DVector::zeros(aux_dim),
                cfg.noise_magnitude,
                &mut rng,
            ))
        } else {
            None
        };
        let outcome = run_window(
            truth,
            aux_systems,
            lib,
            &subset,
            estimate,
            &y,
            window,
            t0,
            cfg,
            noise.as_ref(),
        )?;

        // Drop the duplicated node at window starts.
        let skip = if window == 1 { 0 } else { 1 };
        result
            .norms
            .extend(outcome.norm_samples.into_iter().skip(skip));
        result.total_cost += outcome.cost;
        result.comparisons.push(WindowComparison {
            window,
            entries: outcome.comparisons,
        });
        estimate = outcome.new_estimate;
        y = outcome.y_new;
        result.estimates.push(EstimateSample {
            window,
            t: window as f64 * cfg.tau,
            index: estimate,
            parameter: training.get(estimate).clone(),
        });
    }
    result.final_state = y;
    if let Ok(fit) = fit_decay(&result.norms) {
        result.decay = Some(fit);
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Run artifacts.

/// Write `estimates.csv`, `norms.csv`, `comparison.csv`, and `summary.json`
/// into `dir`. `config_echo` is embedded verbatim in the summary.
pub fn write_run_artifacts(
    dir: &Path,
    result: &AdaptiveRunResult,
    training: &TrainingSet,
    config_echo: &serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let fmt = crate::ode::fmt_sig;

    let mut est = std::io::BufWriter::new(std::fs::File::create(dir.join("estimates.csv"))?);
    let s = training.parameter_dim();
    write!(est, "window,t")?;
    for i in 1..=s {
        write!(est, ",sigma_{i}")?;
    }
    writeln!(est)?;
    for e in &result.estimates {
        write!(est, "{},{}", e.window, fmt(e.t))?;
        for v in e.parameter.iter() {
            write!(est, ",{}", fmt(*v))?;
        }
        writeln!(est)?;
    }
    est.flush()?;

    let mut norms = std::io::BufWriter::new(std::fs::File::create(dir.join("norms.csv"))?);
    writeln!(norms, "t,norm_y")?;
    for (t, v) in &result.norms {
        writeln!(norms, "{},{}", fmt(*t), fmt(*v))?;
    }
    norms.flush()?;

    let mut cmp = std::io::BufWriter::new(std::fs::File::create(dir.join("comparison.csv"))?);
    write!(cmp, "window,candidate_index")?;
    for i in 1..=s {
        write!(cmp, ",sigma_{i}")?;
    }
    writeln!(cmp, ",E")?;
    for wc in &result.comparisons {
        for (idx, e) in &wc.entries {
            write!(cmp, "{},{}", wc.window, idx)?;
            for v in training.get(*idx).iter() {
                write!(cmp, ",{}", fmt(*v))?;
            }
            writeln!(cmp, ",{}", fmt(*e))?;
        }
    }
    cmp.flush()?;

    let summary = serde_json::json!({
        "total_cost": result.total_cost,
        "decay_fit": result.decay.map(|(zeta, mu)| serde_json::json!({
            "zeta": zeta,
            "mu": mu,
        })),
        "windows": result.estimates.len(),
        "final_norm": result.norms.last().map(|(_, v)| *v),
        "seed": result.seed,
        "config": config_echo,
    });
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}
