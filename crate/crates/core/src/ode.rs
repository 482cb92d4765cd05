//! Time-periodic operators, control systems, and fixed-step integrators.
//!
//! Everything here is immutable after construction and side-effect free, so
//! trajectories for different parameters can be integrated concurrently.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Norm threshold beyond which an integration is aborted as blown up.
pub const BLOWUP_GUARD: f64 = 1e12;

/// Relative defect allowed when snapping a horizon to an integer step count.
const STEP_SNAP_TOL: f64 = 1e-9;

type MatrixRule = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
type DerivativeRule = Arc<dyn Fn(f64, u32) -> DMatrix<f64> + Send + Sync>;

/// How an operator repeats in time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Periodicity {
    /// Constant in time; the nominal period is arbitrary (unit).
    Autonomous,
    /// `A(t + period) = A(t)` exactly; evaluation reduces `t` modulo the period.
    Periodic(f64),
    /// No periodic structure (switched truth plants); `t` is passed through.
    Aperiodic,
}

/// Evaluation rule `t -> A(t)` with a declared period.
///
/// Evaluation reduces `t` modulo the period before calling the rule, so
/// periodicity holds exactly by construction.
#[derive(Clone)]
pub struct TimePeriodicOperator {
    dim: usize,
    periodicity: Periodicity,
    rule: MatrixRule,
    /// Optional analytic derivatives: `(t, order) -> d^order A / dt^order`.
    /// Order zero must agree with the evaluation rule.
    derivative_rule: Option<DerivativeRule>,
}

impl fmt::Debug for TimePeriodicOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TimePeriodicOperator")
            .field("dim", &self.dim)
            .field("periodicity", &self.periodicity)
            .field("analytic_derivatives", &self.derivative_rule.is_some())
            .finish()
    }
}

impl TimePeriodicOperator {
    /// Constant (autonomous) operator.
    pub fn constant(a: DMatrix<f64>) -> Self {
        assert!(a.is_square(), "state operator must be square");
        let dim = a.nrows();
        Self {
            dim,
            periodicity: Periodicity::Autonomous,
            rule: Arc::new(move |_| a.clone()),
            derivative_rule: None,
        }
    }

    /// Periodic operator with the given period (seconds).
    pub fn periodic<F>(period: f64, dim: usize, rule: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        assert!(period > 0.0, "period must be positive");
        Self {
            dim,
            periodicity: Periodicity::Periodic(period),
            rule: Arc::new(rule),
            derivative_rule: None,
        }
    }

    /// Periodic operator that also knows its time derivatives analytically.
    pub fn periodic_with_derivatives<F, G>(period: f64, dim: usize, rule: F, derivatives: G) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
        G: Fn(f64, u32) -> DMatrix<f64> + Send + Sync + 'static,
    {
        assert!(period > 0.0, "period must be positive");
        Self {
            dim,
            periodicity: Periodicity::Periodic(period),
            rule: Arc::new(rule),
            derivative_rule: Some(Arc::new(derivatives)),
        }
    }

    /// Operator without periodic structure (used for switched truth plants).
    pub fn aperiodic<F>(dim: usize, rule: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self {
            dim,
            periodicity: Periodicity::Aperiodic,
            rule: Arc::new(rule),
            derivative_rule: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn periodicity(&self) -> Periodicity {
        self.periodicity
    }

    pub fn is_autonomous(&self) -> bool {
        matches!(self.periodicity, Periodicity::Autonomous)
    }

    /// Period used by the periodic Riccati solver; autonomous operators get
    /// the unit period.
    pub fn period(&self) -> Option<f64> {
        match self.periodicity {
            Periodicity::Autonomous => Some(1.0),
            Periodicity::Periodic(rho) => Some(rho),
            Periodicity::Aperiodic => None,
        }
    }

    /// Evaluate `A(t mod period)`.
    pub fn evaluate(&self, t: f64) -> DMatrix<f64> {
        match self.periodicity {
            Periodicity::Autonomous => (self.rule)(0.0),
            Periodicity::Periodic(rho) => (self.rule)(t.rem_euclid(rho)),
            Periodicity::Aperiodic => (self.rule)(t),
        }
    }

    /// Analytic `d^order A / dt^order` when the operator provides it.
    pub fn derivative(&self, t: f64, order: u32) -> Option<DMatrix<f64>> {
        if order == 0 {
            return Some(self.evaluate(t));
        }
        self.derivative_rule
            .as_ref()
            .map(|rule| match self.periodicity {
                Periodicity::Periodic(rho) => rule(t.rem_euclid(rho), order),
                _ => rule(t, order),
            })
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.derivative_rule.is_some()
    }
}

/// A plant `dot y = A(t) y + B u`, `z = C y` for one fixed parameter.
#[derive(Clone, Debug)]
pub struct ControlSystem {
    pub a: TimePeriodicOperator,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Observation operator entering the Riccati equation (often `C` or `I`).
    pub q: DMatrix<f64>,
    /// Parameter value this plant was built for.
    pub parameter: DVector<f64>,
    /// Maps this plant's state onto the grid the stored gains act on
    /// (identity when `None`). Used by the refinement hierarchy where gains
    /// live on the coarsest grid.
    pub feedback_restriction: Option<DMatrix<f64>>,
    /// Quadrature weights of the discrete state norm (Euclidean when `None`).
    pub norm_weights: Option<DVector<f64>>,
}

impl ControlSystem {
    pub fn new(
        a: TimePeriodicOperator,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        parameter: DVector<f64>,
    ) -> Result<Self> {
        let n = a.dim();
        if b.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B has {} rows, state dimension is {n}",
                b.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "C has {} columns, state dimension is {n}",
                c.ncols()
            )));
        }
        if q.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "Q has {} columns, state dimension is {n}",
                q.ncols()
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            q,
            parameter,
            feedback_restriction: None,
            norm_weights: None,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Discrete state norm (weighted when the plant declares weights).
    pub fn state_norm(&self, y: &DVector<f64>) -> f64 {
        match &self.norm_weights {
            Some(w) => y
                .iter()
                .zip(w.iter())
                .map(|(yi, wi)| wi * yi * yi)
                .sum::<f64>()
                .sqrt(),
            None => y.norm(),
        }
    }

    /// Feedback input `u = K(t) R y` with the plant's restriction applied.
    /// The gain acts on the restricted state, so its column count must match
    /// the restriction's row count (the grid the gains were built on).
    pub fn input(&self, fb: &dyn Feedback, t: f64, y: &DVector<f64>) -> DVector<f64> {
        let k = fb.gain(t);
        match &self.feedback_restriction {
            Some(r) => {
                assert_eq!(
                    k.ncols(),
                    r.nrows(),
                    "gain acts on the restricted state ({} columns expected)",
                    r.nrows()
                );
                &k * (r * y)
            }
            None => &k * y,
        }
    }

    /// Closed-loop operator `A(t) + B K(t) R`.
    pub fn closed_loop_matrix(&self, fb: &dyn Feedback, t: f64) -> DMatrix<f64> {
        let mut m = self.a.evaluate(t);
        let k = fb.gain(t);
        let k_eff = match &self.feedback_restriction {
            Some(r) => {
                assert_eq!(
                    k.ncols(),
                    r.nrows(),
                    "gain acts on the restricted state ({} columns expected)",
                    r.nrows()
                );
                k * r
            }
            None => k,
        };
        m.gemm(1.0, &self.b, &k_eff, 1.0);
        m
    }
}

/// Time-stepping scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    ExplicitEuler,
    CrankNicolson,
    /// Crank-Nicolson with Adams-Bashforth extrapolation of the operator to
    /// the step midpoint; the first step is one plain Crank-Nicolson step.
    Cnab,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::ExplicitEuler => write!(f, "euler"),
            Scheme::CrankNicolson => write!(f, "cn"),
            Scheme::Cnab => write!(f, "cnab"),
        }
    }
}

/// Scheme plus step size.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme, dt: f64) -> Self {
        assert!(dt > 0.0, "time step must be positive");
        Self { scheme, dt }
    }

    /// Number of steps covering `[t0, t1]`; the horizon must be an integer
    /// multiple of the step to within one part in 1e9.
    pub fn steps(&self, t0: f64, t1: f64) -> Result<usize> {
        let horizon = t1 - t0;
        if horizon <= 0.0 {
            return Err(Error::StepMismatch {
                dt: self.dt,
                horizon,
                defect: f64::INFINITY,
            });
        }
        let ratio = horizon / self.dt;
        let steps = ratio.round();
        let defect = (ratio - steps).abs() / ratio.max(1.0);
        if steps < 1.0 || defect > STEP_SNAP_TOL {
            return Err(Error::StepMismatch {
                dt: self.dt,
                horizon,
                defect,
            });
        }
        Ok(steps as usize)
    }
}

/// Gain provider `t -> K(t)`, the interface the integrators close the loop
/// with. Implemented by the library's stored schedules.
pub trait Feedback: Sync {
    fn gain(&self, t: f64) -> DMatrix<f64>;
}

/// Zero gain: the free dynamics.
pub struct ZeroFeedback {
    pub inputs: usize,
    pub states: usize,
}

impl Feedback for ZeroFeedback {
    fn gain(&self, _t: f64) -> DMatrix<f64> {
        DMatrix::zeros(self.inputs, self.states)
    }
}

/// One explicit-Euler transition factor `I + xi * A_K`.
pub fn explicit_euler_transition(a_k: &DMatrix<f64>, xi: f64) -> DMatrix<f64> {
    let mut m = a_k * xi;
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0;
    }
    m
}

/// Sampled closed-loop trajectory on the integrator mesh.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states
            .last()
            .expect("trajectory has at least the initial sample")
    }
}

/// Integrate the closed loop and hand every mesh node `(k, t_k, y_k)` to the
/// observer. Returns the terminal state.
pub fn integrate_with<F>(
    sys: &ControlSystem,
    fb: &dyn Feedback,
    y0: &DVector<f64>,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    mut observe: F,
) -> Result<DVector<f64>>
where
    F: FnMut(usize, f64, &DVector<f64>),
{
    let n = sys.state_dim();
    if y0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, state dimension is {n}",
            y0.len()
        )));
    }
    let steps = cfg.steps(t0, t1)?;
    let dt = cfg.dt;
    let eye = DMatrix::<f64>::identity(n, n);

    let mut y = y0.clone();
    observe(0, t0, &y);
    guard(t0, &y)?;

    // CNAB keeps the operator evaluated at the previous node.
    let mut prev_op: Option<DMatrix<f64>> = None;

    for k in 0..steps {
        let tk = t0 + k as f64 * dt;
        match cfg.scheme {
            Scheme::ExplicitEuler => {
                let a_k = sys.closed_loop_matrix(fb, tk);
                let trans = explicit_euler_transition(&a_k, dt);
                y = &trans * y;
            }
            Scheme::CrankNicolson => {
                let mid = sys.closed_loop_matrix(fb, tk + 0.5 * dt);
                y = cn_step(&eye, &mid, dt, &y, tk)?;
            }
            Scheme::Cnab => {
                let cur = sys.closed_loop_matrix(fb, tk);
                let m = match &prev_op {
                    // Extrapolated midpoint operator 1.5 A(t_k) - 0.5 A(t_{k-1}).
                    Some(prev) => &cur * 1.5 - prev * 0.5,
                    // Bootstrap: one Crank-Nicolson step.
                    None => sys.closed_loop_matrix(fb, tk + 0.5 * dt),
                };
                y = cn_step(&eye, &m, dt, &y, tk)?;
                prev_op = Some(cur);
            }
        }
        let t_next = t0 + (k + 1) as f64 * dt;
        guard(t_next, &y)?;
        observe(k + 1, t_next, &y);
    }
    Ok(y)
}

fn cn_step(
    eye: &DMatrix<f64>,
    m: &DMatrix<f64>,
    dt: f64,
    y: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>> {
    let lhs = eye - m * (0.5 * dt);
    let rhs = (eye + m * (0.5 * dt)) * y;
    lhs.lu().solve(&rhs).ok_or(Error::SingularStep { t })
}

fn guard(t: f64, y: &DVector<f64>) -> Result<()> {
    let norm = y.norm();
    if !norm.is_finite() || norm > BLOWUP_GUARD {
        return Err(Error::BlowUp { t, norm });
    }
    Ok(())
}

/// Integrate the closed loop `dot y = A(t) y + B K(t) y` over `[t0, t1]` and
/// retain state, input, and output at every mesh node.
pub fn integrate_closed_loop(
    sys: &ControlSystem,
    fb: &dyn Feedback,
    y0: &DVector<f64>,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let steps = cfg.steps(t0, t1)?;
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        outputs: Vec::with_capacity(steps + 1),
    };
    integrate_with(sys, fb, y0, t0, t1, cfg, |_, t, y| {
        traj.times.push(t);
        traj.states.push(y.clone());
        traj.inputs.push(sys.input(fb, t, y));
        traj.outputs.push(&sys.c * y);
    })?;
    Ok(traj)
}

/// Write a trajectory as CSV: `t, y_1..y_n, u_1..u_m, z_1..z_p, norm_y`,
/// 15 significant digits per value.
pub fn export_trajectory_csv(
    path: &Path,
    traj: &Trajectory,
    norm_weights: Option<&DVector<f64>>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (n, m, p) = (
        traj.states.first().map_or(0, |v| v.len()),
        traj.inputs.first().map_or(0, |v| v.len()),
        traj.outputs.first().map_or(0, |v| v.len()),
    );
    write!(out, "t")?;
    for i in 1..=n {
        write!(out, ",y_{i}")?;
    }
    for i in 1..=m {
        write!(out, ",u_{i}")?;
    }
    for i in 1..=p {
        write!(out, ",z_{i}")?;
    }
    writeln!(out, ",norm_y")?;
    for k in 0..traj.len() {
        write!(out, "{}", fmt_sig(traj.times[k]))?;
        for v in traj.states[k].iter() {
            write!(out, ",{}", fmt_sig(*v))?;
        }
        for v in traj.inputs[k].iter() {
            write!(out, ",{}", fmt_sig(*v))?;
        }
        for v in traj.outputs[k].iter() {
            write!(out, ",{}", fmt_sig(*v))?;
        }
        let norm = match norm_weights {
            Some(w) => traj.states[k]
                .iter()
                .zip(w.iter())
                .map(|(yi, wi)| wi * yi * yi)
                .sum::<f64>()
                .sqrt(),
            None => traj.states[k].norm(),
        };
        writeln!(out, ",{}", fmt_sig(norm))?;
    }
    Ok(())
}

/// 15 significant digits.
pub(crate) fn fmt_sig(v: f64) -> String {
    format!("{v:.14e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_decay() -> ControlSystem {
        // dot y = -y
        ControlSystem::new(
            TimePeriodicOperator::constant(DMatrix::from_element(1, 1, -1.0)),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DVector::from_element(1, 0.0),
        )
        .unwrap()
    }

    fn zero_fb(sys: &ControlSystem) -> ZeroFeedback {
        ZeroFeedback {
            inputs: sys.input_dim(),
            states: sys.state_dim(),
        }
    }

    #[test]
    fn periodic_evaluation_reduces_modulo_period() {
        let op = TimePeriodicOperator::periodic(1.0, 2, |t| {
            let psi = 1.0 + 6.0 * (2.0 * std::f64::consts::PI * t).sin();
            DMatrix::from_row_slice(2, 2, &[0.0, psi, psi, 0.0])
        });
        // Psi(0) = 1.
        let a0 = op.evaluate(0.0);
        assert_eq!(a0, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        // Psi(0.25) = 7.
        let a = op.evaluate(0.25);
        assert_relative_eq!(a[(0, 1)], 7.0, max_relative = 1e-14);
        // t = period reduces to t = 0 exactly.
        assert_eq!(op.evaluate(1.0), a0);
        // Exact periodicity at exactly representable offsets.
        assert_eq!(op.evaluate(0.25), op.evaluate(1.25));
        assert_eq!(op.evaluate(3.5), op.evaluate(0.5));
    }

    #[test]
    fn autonomous_evaluation_ignores_time() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]);
        let op = TimePeriodicOperator::constant(a.clone());
        assert_eq!(op.evaluate(0.0), a);
        assert_eq!(op.evaluate(17.3), a);
        assert_eq!(op.period(), Some(1.0));
    }

    #[test]
    fn cn_matches_exponential_decay() {
        let sys = scalar_decay();
        let fb = zero_fb(&sys);
        let cfg = IntegratorConfig::new(Scheme::CrankNicolson, 1e-3);
        let traj = integrate_closed_loop(&sys, &fb, &DVector::from_element(1, 1.0), 0.0, 1.0, &cfg)
            .unwrap();
        assert_eq!(traj.len(), 1001);
        assert_relative_eq!(traj.terminal_state()[0], (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn cnab_matches_exponential_decay() {
        let sys = scalar_decay();
        let fb = zero_fb(&sys);
        let cfg = IntegratorConfig::new(Scheme::Cnab, 1e-3);
        let traj = integrate_closed_loop(&sys, &fb, &DVector::from_element(1, 1.0), 0.0, 1.0, &cfg)
            .unwrap();
        assert_relative_eq!(traj.terminal_state()[0], (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn zero_dynamics_keeps_state_constant() {
        let sys = ControlSystem::new(
            TimePeriodicOperator::constant(DMatrix::zeros(2, 2)),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(1),
        )
        .unwrap();
        let fb = zero_fb(&sys);
        let cfg = IntegratorConfig::new(Scheme::CrankNicolson, 0.01);
        let y0 = DVector::from_vec(vec![3.0, -2.0]);
        let traj = integrate_closed_loop(&sys, &fb, &y0, 0.0, 2.0, &cfg).unwrap();
        for y in &traj.states {
            assert_eq!(y, &y0);
        }
    }

    #[test]
    fn integrator_orders() {
        // On dot y = -y the endpoint error halves ~2x for Euler and ~4x for CN
        // when the step is halved.
        let sys = scalar_decay();
        let fb = zero_fb(&sys);
        let exact = (-1.0f64).exp();
        let run = |scheme, dt| {
            let cfg = IntegratorConfig::new(scheme, dt);
            let traj =
                integrate_closed_loop(&sys, &fb, &DVector::from_element(1, 1.0), 0.0, 1.0, &cfg)
                    .unwrap();
            (traj.terminal_state()[0] - exact).abs()
        };
        let ratio_euler = run(Scheme::ExplicitEuler, 1e-2) / run(Scheme::ExplicitEuler, 5e-3);
        let ratio_cn = run(Scheme::CrankNicolson, 1e-2) / run(Scheme::CrankNicolson, 5e-3);
        assert!((ratio_euler - 2.0).abs() < 0.2, "euler ratio {ratio_euler}");
        assert!((ratio_cn - 4.0).abs() < 0.3, "cn ratio {ratio_cn}");
    }

    #[test]
    fn blowup_aborts_with_time() {
        // dot y = +40 y blows past the guard before t = 1e3.
        let sys = ControlSystem::new(
            TimePeriodicOperator::constant(DMatrix::from_element(1, 1, 40.0)),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
        )
        .unwrap();
        let fb = zero_fb(&sys);
        let cfg = IntegratorConfig::new(Scheme::ExplicitEuler, 1e-2);
        let err = integrate_closed_loop(&sys, &fb, &DVector::from_element(1, 1.0), 0.0, 10.0, &cfg)
            .unwrap_err();
        match err {
            Error::BlowUp { t, .. } => assert!(t > 0.0 && t < 10.0),
            other => panic!("expected blow-up, got {other}"),
        }
    }

    #[test]
    fn step_must_divide_horizon() {
        let cfg = IntegratorConfig::new(Scheme::CrankNicolson, 0.3);
        assert!(cfg.steps(0.0, 1.0).is_err());
        assert_eq!(cfg.steps(0.0, 0.9).unwrap(), 3);
    }

    #[test]
    fn euler_transition_factor() {
        assert_eq!(
            explicit_euler_transition(&DMatrix::zeros(3, 3), 0.1),
            DMatrix::identity(3, 3)
        );
        // Example pair A = [0 sigma; 0 0], K = [k1 k2], B = [0 1]^T.
        let (sigma, k1, k2, xi) = (1.3, -2.0, -3.0, 0.05);
        let a_k = DMatrix::from_row_slice(2, 2, &[0.0, sigma, k1, k2]);
        let trans = explicit_euler_transition(&a_k, xi);
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, xi * sigma, xi * k1, 1.0 + xi * k2]);
        assert_eq!(trans, expect);
        // Product entry (1,1) of Xi^1 Xi^0 is 1 + xi^2 sigma k1.
        let prod = &trans * &trans;
        assert_relative_eq!(
            prod[(0, 0)],
            1.0 + xi * xi * sigma * k1,
            max_relative = 1e-14
        );
    }

    #[test]
    fn euler_equals_transition_product_exactly() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.4]);
        let sys = ControlSystem::new(
            TimePeriodicOperator::constant(a.clone()),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            DVector::zeros(1),
        )
        .unwrap();
        struct K(DMatrix<f64>);
        impl Feedback for K {
            fn gain(&self, _t: f64) -> DMatrix<f64> {
                self.0.clone()
            }
        }
        let k = DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]);
        let fb = K(k.clone());
        let xi = 0.05;
        let steps = 8;
        let cfg = IntegratorConfig::new(Scheme::ExplicitEuler, xi);
        let y0 = DVector::from_vec(vec![0.7, -0.2]);
        let traj = integrate_closed_loop(&sys, &fb, &y0, 0.0, xi * steps as f64, &cfg).unwrap();

        let a_k = &a + &sys.b * &k;
        let trans = explicit_euler_transition(&a_k, xi);
        let mut y = y0.clone();
        for s in 0..steps {
            y = &trans * y;
            assert_eq!(y, traj.states[s + 1], "step {s} differs");
        }
    }

    #[test]
    fn trajectory_is_linear_in_initial_state() {
        let sys = ControlSystem::new(
            TimePeriodicOperator::periodic(1.0, 2, |t| {
                let psi = 1.0 + 6.0 * (2.0 * std::f64::consts::PI * t).sin();
                DMatrix::from_row_slice(2, 2, &[0.0, psi, psi, 0.0])
            }),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
        )
        .unwrap();
        let fb = ZeroFeedback {
            inputs: 1,
            states: 2,
        };
        let cfg = IntegratorConfig::new(Scheme::Cnab, 1e-3);
        let y0 = DVector::from_vec(vec![0.3, -1.1]);
        let alpha = 2.5;
        let t1 = integrate_closed_loop(&sys, &fb, &y0, 0.0, 0.5, &cfg).unwrap();
        let t2 = integrate_closed_loop(&sys, &fb, &(&y0 * alpha), 0.0, 0.5, &cfg).unwrap();
        for (a, b) in t1.states.iter().zip(t2.states.iter()) {
            let scaled = a * alpha;
            let denom = scaled.norm().max(1e-300);
            assert!((&scaled - b).norm() / denom < 1e-10);
        }
    }

    #[test]
    fn csv_export_roundtrips_header() {
        let sys = scalar_decay();
        let fb = zero_fb(&sys);
        let cfg = IntegratorConfig::new(Scheme::CrankNicolson, 0.1);
        let traj = integrate_closed_loop(&sys, &fb, &DVector::from_element(1, 1.0), 0.0, 1.0, &cfg)
            .unwrap();
        let dir = std::env::temp_dir().join("adaptive_stab_core_ode_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("traj.csv");
        export_trajectory_csv(&path, &traj, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,y_1,u_1,z_1,norm_y");
        assert_eq!(lines.count(), traj.len());
    }
}
