//! Benchmark plants: the damped/energized oscillator family, the
//! time-periodic 2x2 family, a convection-diffusion-reaction model on a
//! structured grid with a three-level refinement hierarchy, and
//! block-diagonal parameter ensembles for robust a-priori feedback.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ode::{ControlSystem, TimePeriodicOperator};
use crate::riccati::RiccatiSolution;

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// `Psi(s) = 1 + 6 sin(2 pi s)`, the time profile of the periodic family.
pub fn psi(s: f64) -> f64 {
    1.0 + 6.0 * (TAU * s).sin()
}

/// `d^order Psi / ds^order`.
pub fn psi_derivative(s: f64, order: u32) -> f64 {
    if order == 0 {
        return psi(s);
    }
    6.0 * TAU.powi(order as i32) * (TAU * s + order as f64 * std::f64::consts::FRAC_PI_2).sin()
}

/// Oscillator `A = [0 1; -1 sigma]` with `B = [0, 1]^T`, `C = [1, 0]`,
/// `Q = C`. Free dynamics are unstable exactly when `sigma > 0`.
pub fn build_oscillator(sigma: f64) -> Result<ControlSystem> {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, sigma]);
    ControlSystem::new(
        TimePeriodicOperator::constant(a),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DVector::from_element(1, sigma),
    )
}

/// Time-periodic family `A(t) = Psi(t / rho + phi) [0 1; 1 0]` with period
/// `rho`, phase `phi in [0, 1)`, `B = [0, 1]^T`, `C = [1, 0]`, `Q = I`.
/// Satisfies `A_{(rho, phi)}(t) = A_{(rho, 0)}(t + rho phi)` exactly.
pub fn build_periodic(rho: f64, phi: f64) -> Result<ControlSystem> {
    assert!(rho > 0.0, "period must be positive");
    let eval = move |t: f64| {
        let v = psi(t / rho + phi);
        DMatrix::from_row_slice(2, 2, &[0.0, v, v, 0.0])
    };
    let deriv = move |t: f64, order: u32| {
        let v = psi_derivative(t / rho + phi, order) / rho.powi(order as i32);
        DMatrix::from_row_slice(2, 2, &[0.0, v, v, 0.0])
    };
    ControlSystem::new(
        TimePeriodicOperator::periodic_with_derivatives(rho, 2, eval, deriv),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2),
        DVector::from_vec(vec![rho, phi]),
    )
}

// ---------------------------------------------------------------------------
// Parabolic convection-diffusion-reaction model on (0,1)^2.

/// Tunables of the parabolic model; the defaults match the documented
/// desk-scale setup (9x9 coarse grid, four square actuators, three outputs).
#[derive(Clone, Debug)]
pub struct ParabolicOptions {
    /// Nodes per side of the coarsest grid (level 0).
    pub coarse_nodes: usize,
    /// Diffusion coefficient.
    pub nu: f64,
    /// Number of output projections (leading Neumann eigenfunctions).
    pub outputs: usize,
    /// Axis-aligned actuator boxes `[x1_lo, x2_lo, x1_hi, x2_hi]`.
    pub actuators: Vec<[f64; 4]>,
}

impl Default for ParabolicOptions {
    fn default() -> Self {
        Self {
            coarse_nodes: 9,
            nu: 0.1,
            outputs: 3,
            actuators: vec![
                [0.1, 0.1, 0.3, 0.3],
                [0.7, 0.1, 0.9, 0.3],
                [0.1, 0.7, 0.3, 0.9],
                [0.7, 0.7, 0.9, 0.9],
            ],
        }
    }
}

impl ParabolicOptions {
    /// Nodes per side at refinement level `r` (factor-2 nested grids).
    pub fn side(&self, level: usize) -> Result<usize> {
        if level > 2 {
            return Err(Error::InvalidLevel(level));
        }
        Ok((self.coarse_nodes - 1) * (1 << level) + 1)
    }

    pub fn state_dim(&self, level: usize) -> Result<usize> {
        let side = self.side(level)?;
        Ok(side * side)
    }
}

fn node_coords(side: usize, idx: usize) -> (f64, f64) {
    let h = 1.0 / (side - 1) as f64;
    let ix = idx % side;
    let iy = idx / side;
    (ix as f64 * h, iy as f64 * h)
}

/// Discrete Neumann Laplacian: five-point stencil with ghost-point
/// reflection at the boundary (`(2 y_1 - 2 y_0) / h^2` rows). Row sums
/// vanish, so constants lie in the kernel, and the operator is self-adjoint
/// in the trapezoid-weighted inner product of [`quadrature_weights`] with a
/// nonpositive spectrum.
pub fn neumann_laplacian(side: usize) -> DMatrix<f64> {
    let n = side * side;
    let h = 1.0 / (side - 1) as f64;
    let w = 1.0 / (h * h);
    let mut lap = DMatrix::<f64>::zeros(n, n);
    for iy in 0..side {
        for ix in 0..side {
            let p = iy * side + ix;
            let mut add = |q: usize, scale: f64| {
                lap[(p, p)] -= scale * w;
                lap[(p, q)] += scale * w;
            };
            match ix {
                0 => add(p + 1, 2.0),
                x if x == side - 1 => add(p - 1, 2.0),
                _ => {
                    add(p - 1, 1.0);
                    add(p + 1, 1.0);
                }
            }
            match iy {
                0 => add(p + side, 2.0),
                y if y == side - 1 => add(p - side, 2.0),
                _ => {
                    add(p - side, 1.0);
                    add(p + side, 1.0);
                }
            }
        }
    }
    lap
}

/// Centered first-derivative stencils; Neumann ghost reflection zeroes the
/// boundary rows of the respective direction.
fn gradient_matrices(side: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = side * side;
    let h = 1.0 / (side - 1) as f64;
    let w = 1.0 / (2.0 * h);
    let mut dx = DMatrix::<f64>::zeros(n, n);
    let mut dy = DMatrix::<f64>::zeros(n, n);
    for iy in 0..side {
        for ix in 0..side {
            let p = iy * side + ix;
            if ix > 0 && ix + 1 < side {
                dx[(p, p + 1)] = w;
                dx[(p, p - 1)] = -w;
            }
            if iy > 0 && iy + 1 < side {
                dy[(p, p + side)] = w;
                dy[(p, p - side)] = -w;
            }
        }
    }
    (dx, dy)
}

/// Trapezoid quadrature weights of the discrete L2 inner product (halved on
/// edges, quartered at corners); `|1|_h = 1` on every level.
pub fn quadrature_weights(side: usize) -> DVector<f64> {
    let n = side * side;
    let h = 1.0 / (side - 1) as f64;
    DVector::from_fn(n, |p, _| {
        let ix = p % side;
        let iy = p / side;
        let cx = if ix == 0 || ix == side - 1 { 0.5 } else { 1.0 };
        let cy = if iy == 0 || iy == side - 1 { 0.5 } else { 1.0 };
        h * h * cx * cy
    })
}

/// The first `count` Neumann eigenfunction index pairs `(j, k)` for
/// `cos(j pi x1) cos(k pi x2)`, ordered by eigenvalue `j^2 + k^2` and then
/// with the `x1` frequency first.
fn eigen_pairs(count: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let cap = count + 4;
    for j in 0..cap {
        for k in 0..cap {
            pairs.push((j, k));
        }
    }
    pairs.sort_by_key(|(j, k)| (j * j + k * k, *k, *j));
    pairs.truncate(count);
    pairs
}

/// Output operator: row `i` takes the discrete inner product with the
/// `i`-th sampled Neumann eigenfunction, normalized to unit discrete norm.
fn output_matrix(side: usize, count: usize, weights: &DVector<f64>) -> DMatrix<f64> {
    let n = side * side;
    let mut c = DMatrix::<f64>::zeros(count, n);
    for (row, (j, k)) in eigen_pairs(count).into_iter().enumerate() {
        let mut e = DVector::from_fn(n, |p, _| {
            let (x1, x2) = node_coords(side, p);
            (j as f64 * std::f64::consts::PI * x1).cos()
                * (k as f64 * std::f64::consts::PI * x2).cos()
        });
        let norm = e
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt();
        e /= norm;
        for p in 0..n {
            c[(row, p)] = weights[p] * e[p];
        }
    }
    c
}

/// Assemble the parabolic plant
/// `A_sigma(t) = nu Lap - I + (1 + 5 sin(2 pi t)) diag(1 + x1) - b_sigma . grad`
/// on refinement level `r`, with actuator indicator inputs and
/// eigenfunction-projection outputs. Time-periodic with unit period.
pub fn build_parabolic(sigma: f64, level: usize, opts: &ParabolicOptions) -> Result<ControlSystem> {
    let side = opts.side(level)?;
    let n = side * side;
    let weights = quadrature_weights(side);

    let lap = neumann_laplacian(side);
    let (dx, dy) = gradient_matrices(side);
    let b_dir = [-0.5 * sigma.cos(), sigma.sin()];
    // Time-invariant part nu Lap - I - b . grad.
    let mut base = lap * opts.nu;
    for i in 0..n {
        base[(i, i)] -= 1.0;
    }
    base -= &dx * b_dir[0] + &dy * b_dir[1];
    // Reaction profile multiplying 1 + 5 sin(2 pi t).
    let mut react = DMatrix::<f64>::zeros(n, n);
    for p in 0..n {
        let (x1, _) = node_coords(side, p);
        react[(p, p)] = 1.0 + x1;
    }

    let base_eval = base.clone();
    let react_eval = react.clone();
    let eval = move |t: f64| &base_eval + &react_eval * (1.0 + 5.0 * (TAU * t).sin());
    let deriv = move |t: f64, order: u32| {
        let s = 5.0
            * TAU.powi(order as i32)
            * (TAU * t + order as f64 * std::f64::consts::FRAC_PI_2).sin();
        &react * s
    };
    let op = TimePeriodicOperator::periodic_with_derivatives(1.0, n, eval, deriv);

    let mut b = DMatrix::<f64>::zeros(n, opts.actuators.len());
    for (j, boxed) in opts.actuators.iter().enumerate() {
        for p in 0..n {
            let (x1, x2) = node_coords(side, p);
            if x1 >= boxed[0] && x2 >= boxed[1] && x1 <= boxed[2] && x2 <= boxed[3] {
                b[(p, j)] = 1.0;
            }
        }
    }

    let c = output_matrix(side, opts.outputs, &weights);
    let q = DMatrix::<f64>::identity(n, n);

    let mut sys = ControlSystem::new(op, b, c, q, DVector::from_element(1, sigma))?;
    sys.norm_weights = Some(weights);
    if level > 0 {
        sys.feedback_restriction = Some(restriction_matrix(level, 0, opts)?);
    }
    Ok(sys)
}

/// Initial state `y0(x) = 1 - 3 x1 sin(x1)` sampled on level `r`.
pub fn parabolic_initial_state(level: usize, opts: &ParabolicOptions) -> Result<DVector<f64>> {
    let side = opts.side(level)?;
    Ok(DVector::from_fn(side * side, |p, _| {
        let (x1, _) = node_coords(side, p);
        1.0 - 3.0 * x1 * x1.sin()
    }))
}

/// Injection restriction over one refinement step: coarse node `(i, j)`
/// reads the coincident fine node `(2i, 2j)`.
fn single_restriction(coarse_side: usize) -> DMatrix<f64> {
    let fine_side = 2 * (coarse_side - 1) + 1;
    let mut r = DMatrix::<f64>::zeros(coarse_side * coarse_side, fine_side * fine_side);
    for iy in 0..coarse_side {
        for ix in 0..coarse_side {
            r[(iy * coarse_side + ix, 2 * iy * fine_side + 2 * ix)] = 1.0;
        }
    }
    r
}

/// Bilinear prolongation over one refinement step.
fn single_prolongation(coarse_side: usize) -> DMatrix<f64> {
    let fine_side = 2 * (coarse_side - 1) + 1;
    let mut p = DMatrix::<f64>::zeros(fine_side * fine_side, coarse_side * coarse_side);
    let coarse = |ix: usize, iy: usize| iy * coarse_side + ix;
    for fy in 0..fine_side {
        for fx in 0..fine_side {
            let row = fy * fine_side + fx;
            let (cx, cy) = (fx / 2, fy / 2);
            match (fx % 2, fy % 2) {
                (0, 0) => p[(row, coarse(cx, cy))] = 1.0,
                (1, 0) => {
                    p[(row, coarse(cx, cy))] = 0.5;
                    p[(row, coarse(cx + 1, cy))] = 0.5;
                }
                (0, 1) => {
                    p[(row, coarse(cx, cy))] = 0.5;
                    p[(row, coarse(cx, cy + 1))] = 0.5;
                }
                _ => {
                    p[(row, coarse(cx, cy))] = 0.25;
                    p[(row, coarse(cx + 1, cy))] = 0.25;
                    p[(row, coarse(cx, cy + 1))] = 0.25;
                    p[(row, coarse(cx + 1, cy + 1))] = 0.25;
                }
            }
        }
    }
    p
}

/// Restriction matrix from a finer to a coarser level (injection at
/// coincident nodes).
pub fn restriction_matrix(
    from_level: usize,
    to_level: usize,
    opts: &ParabolicOptions,
) -> Result<DMatrix<f64>> {
    if from_level <= to_level {
        return Err(Error::NonNestedLevels(from_level, to_level));
    }
    let mut r = single_restriction(opts.side(from_level - 1)?);
    for level in (to_level..from_level - 1).rev() {
        r = single_restriction(opts.side(level)?) * r;
    }
    Ok(r)
}

/// Prolongation matrix from a coarser to a finer level (bilinear).
pub fn prolongation_matrix(
    from_level: usize,
    to_level: usize,
    opts: &ParabolicOptions,
) -> Result<DMatrix<f64>> {
    if from_level >= to_level {
        return Err(Error::NonNestedLevels(from_level, to_level));
    }
    let mut p = single_prolongation(opts.side(from_level)?);
    for level in from_level + 1..to_level {
        p = single_prolongation(opts.side(level)?) * p;
    }
    Ok(p)
}

/// Restrict a field from `from_level` down to `to_level`.
pub fn restrict(
    field: &DVector<f64>,
    from_level: usize,
    to_level: usize,
    opts: &ParabolicOptions,
) -> Result<DVector<f64>> {
    Ok(restriction_matrix(from_level, to_level, opts)? * field)
}

/// Prolong a field from `from_level` up to `to_level`.
pub fn prolong(
    field: &DVector<f64>,
    from_level: usize,
    to_level: usize,
    opts: &ParabolicOptions,
) -> Result<DVector<f64>> {
    Ok(prolongation_matrix(from_level, to_level, opts)? * field)
}

// ---------------------------------------------------------------------------
// Parameter ensembles (robust a-priori feedback).

/// Block-diagonal stack of `N` candidate plants sharing `B` and `C`. The
/// extended Riccati problem uses the replicated input `E B` and the averaged
/// observation weight `(1/N) E C* C E^T`; its solution compresses to a
/// single `m x n` robust gain.
#[derive(Clone, Debug)]
pub struct EnsembleSystem {
    /// The extended plant: block-diagonal `A`, stacked `B`, tiled `C`, and
    /// `Q = (1/sqrt(N)) [C ... C]`.
    pub extended: ControlSystem,
    /// Replication map `E: R^n -> R^(nN)` (stacked identities).
    pub replication: DMatrix<f64>,
    pub members: usize,
    base_states: usize,
}

impl EnsembleSystem {
    /// Robust gain schedule `K(t) = -B^T E^T Pi(t) E` from the extended
    /// Riccati solution.
    pub fn robust_gain(&self, sol: &RiccatiSolution) -> crate::library::GainSchedule {
        let gains: Vec<DMatrix<f64>> = sol
            .values
            .iter()
            .map(|pi| -(self.extended.b.transpose() * pi * &self.replication))
            .collect();
        crate::library::GainSchedule {
            parameter: DVector::zeros(0),
            period: sol.period.unwrap_or(1.0),
            mesh: sol.mesh.clone(),
            gains,
        }
    }

    pub fn base_states(&self) -> usize {
        self.base_states
    }
}

/// Stack candidate plants into the extended ensemble system. All members
/// must share `B`, `C`, the state dimension, and the period.
pub fn build_ensemble(members: &[ControlSystem]) -> Result<EnsembleSystem> {
    if members.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let first = &members[0];
    let n = first.state_dim();
    let count = members.len();
    for sys in members.iter().skip(1) {
        if sys.state_dim() != n || sys.b != first.b || sys.c != first.c {
            return Err(Error::DimensionMismatch(
                "ensemble members must share B, C, and the state dimension".into(),
            ));
        }
        if sys.a.period() != first.a.period() {
            return Err(Error::DimensionMismatch(
                "ensemble members must share the period".into(),
            ));
        }
    }
    let dim = n * count;
    let ops: Vec<TimePeriodicOperator> = members.iter().map(|m| m.a.clone()).collect();
    let period = first.a.period().ok_or(Error::AperiodicOperator)?;
    let block_eval = {
        let ops = ops.clone();
        move |t: f64| {
            let mut a = DMatrix::<f64>::zeros(dim, dim);
            for (i, op) in ops.iter().enumerate() {
                a.view_mut((i * n, i * n), (n, n))
                    .copy_from(&op.evaluate(t));
            }
            a
        }
    };
    let has_derivs = ops
        .iter()
        .all(|o| o.has_analytic_derivatives() || o.is_autonomous());
    let op = if has_derivs {
        let ops = ops.clone();
        TimePeriodicOperator::periodic_with_derivatives(period, dim, block_eval, move |t, order| {
            let mut a = DMatrix::<f64>::zeros(dim, dim);
            for (i, op) in ops.iter().enumerate() {
                let block = op
                    .derivative(t, order)
                    .unwrap_or_else(|| DMatrix::zeros(n, n));
                a.view_mut((i * n, i * n), (n, n)).copy_from(&block);
            }
            a
        })
    } else {
        TimePeriodicOperator::periodic(period, dim, block_eval)
    };

    let mut replication = DMatrix::<f64>::zeros(dim, n);
    for i in 0..count {
        replication
            .view_mut((i * n, 0), (n, n))
            .copy_from(&DMatrix::identity(n, n));
    }
    let b_ext = &replication * &first.b;
    let c_ext = &first.c * replication.transpose();
    let q_ext = &c_ext / (count as f64).sqrt();

    let mut parameter = DVector::zeros(0);
    for m in members {
        parameter = DVector::from_iterator(
            parameter.len() + m.parameter.len(),
            parameter.iter().cloned().chain(m.parameter.iter().cloned()),
        );
    }
    let extended = ControlSystem::new(op, b_ext, c_ext, q_ext, parameter)?;
    Ok(EnsembleSystem {
        extended,
        replication,
        members: count,
        base_states: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{integrate_closed_loop, IntegratorConfig, Scheme, ZeroFeedback};
    use crate::riccati::{max_real_eigenvalue, solve_are, solve_periodic_riccati};
    use approx::assert_relative_eq;

    #[test]
    fn oscillator_stability_boundary() {
        // Eigenvalues are (sigma +- sqrt(sigma^2 - 4)) / 2; on [-1, 1] the
        // pair is complex with real part sigma / 2, so the free dynamics are
        // stable iff sigma < 0.
        for i in -10i64..=10 {
            let sigma = i as f64 / 10.0;
            let sys = build_oscillator(sigma).unwrap();
            let max_re = max_real_eigenvalue(&sys.a.evaluate(0.0));
            assert_relative_eq!(max_re, sigma / 2.0, epsilon = 1e-12);
            if sigma < 0.0 {
                assert!(max_re < 0.0);
            } else {
                assert!(max_re >= 0.0);
            }
        }
        let marginal = build_oscillator(0.0).unwrap();
        let eigs = marginal.a.evaluate(0.0).complex_eigenvalues();
        assert!(eigs
            .iter()
            .all(|l| l.re.abs() < 1e-12 && (l.im.abs() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn periodic_family_shift_identity() {
        let base = build_periodic(1.0, 0.0).unwrap();
        let shifted = build_periodic(1.0, 0.5).unwrap();
        assert_eq!(shifted.a.evaluate(0.0), base.a.evaluate(0.5));
        // Psi(0) = 1 gives the plain [0 1; 1 0].
        assert_eq!(
            base.a.evaluate(0.0),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
    }

    #[test]
    fn periodic_free_flow_grows_like_exp_of_psi_integral() {
        // From y(0) = (1,1) the free flow obeys y1(j rho) = exp(j theta)
        // with theta = integral of Psi over one period = 1 for phi = 0.
        let sys = build_periodic(1.0, 0.0).unwrap();
        let fb = ZeroFeedback {
            inputs: 1,
            states: 2,
        };
        let cfg = IntegratorConfig::new(Scheme::Cnab, 1e-3);
        let traj = integrate_closed_loop(
            &sys,
            &fb,
            &DVector::from_vec(vec![1.0, 1.0]),
            0.0,
            3.0,
            &cfg,
        )
        .unwrap();
        let y3 = traj.terminal_state();
        assert_relative_eq!(y3[0], 3.0f64.exp(), max_relative = 0.01);
        assert_relative_eq!(y3[1], 3.0f64.exp(), max_relative = 0.01);
    }

    #[test]
    fn laplacian_invariants() {
        let side = 9;
        let lap = neumann_laplacian(side);
        assert_eq!(lap.nrows(), 81);
        // Self-adjoint in the discrete inner product: W Lap is symmetric.
        let w = quadrature_weights(side);
        let weighted = DMatrix::from_diagonal(&w) * &lap;
        assert!((&weighted - weighted.transpose()).norm() <= 1e-12 * weighted.norm());
        // Constants in the kernel (zero row sums).
        let ones = DVector::from_element(81, 1.0);
        assert!((&lap * &ones).norm() == 0.0);
        // Nonpositive spectrum: the symmetrized form W^(1/2) Lap W^(-1/2)
        // shares the eigenvalues.
        let sim = DMatrix::from_fn(81, 81, |i, j| w[i].sqrt() * lap[(i, j)] / w[j].sqrt());
        assert!((&sim - sim.transpose()).norm() <= 1e-10 * sim.norm());
        let max_eig = ((&sim + sim.transpose()) * 0.5)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max_eig <= 1e-9, "max eigenvalue {max_eig}");
    }

    #[test]
    fn constant_fields_are_annihilated_by_difference_stencils() {
        let opts = ParabolicOptions::default();
        let sys = build_parabolic(0.7, 0, &opts).unwrap();
        let side = opts.side(0).unwrap();
        let n = side * side;
        let ones = DVector::from_element(n, 1.0);
        // A(t) 1 = (-1 + (1 + 5 sin(2 pi t)) (1 + x1)) pointwise: neither the
        // Laplacian nor the convection contributes on constants.
        let t = 0.3;
        let a_ones = sys.a.evaluate(t) * &ones;
        let s = 1.0 + 5.0 * (TAU * t).sin();
        for p in 0..n {
            let (x1, _) = node_coords(side, p);
            assert_relative_eq!(a_ones[p], -1.0 + s * (1.0 + x1), epsilon = 1e-12);
        }
    }

    #[test]
    fn output_projection_recovers_eigenfunction_coordinates() {
        let opts = ParabolicOptions::default();
        let sys = build_parabolic(0.0, 2, &opts).unwrap();
        let side = opts.side(2).unwrap();
        let weights = quadrature_weights(side);
        // Sampled first eigenfunction (a constant) normalized in the
        // discrete norm projects to (1, 0, 0).
        let e1 = DVector::from_element(side * side, 1.0);
        let z = &sys.c * &e1;
        assert_relative_eq!(z[0], 1.0, epsilon = 1e-3);
        assert!(z[1].abs() < 1e-3 && z[2].abs() < 1e-3);
        // Second output pairs with cos(pi x1).
        let e2 = DVector::from_fn(side * side, |p, _| {
            let (x1, _) = node_coords(side, p);
            (std::f64::consts::PI * x1).cos()
        });
        let norm = e2
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt();
        let z = &sys.c * (&e2 / norm);
        assert!((z[0]).abs() < 1e-3);
        assert_relative_eq!(z[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn actuators_cover_their_boxes() {
        let opts = ParabolicOptions::default();
        let sys = build_parabolic(0.0, 0, &opts).unwrap();
        assert_eq!(sys.input_dim(), 4);
        // On the 9x9 grid each 0.2-wide box holds an interior 2x2 patch.
        for j in 0..4 {
            let count = sys.b.column(j).iter().filter(|v| **v == 1.0).count();
            assert_eq!(count, 4, "actuator {j}");
        }
        let invalid = build_parabolic(0.0, 3, &opts);
        assert!(matches!(invalid, Err(Error::InvalidLevel(3))));
    }

    #[test]
    fn transfer_operators_are_consistent() {
        let opts = ParabolicOptions::default();
        let n0 = opts.state_dim(0).unwrap();
        let v: DVector<f64> = DVector::from_fn(n0, |p, _| (p as f64 * 0.37).sin());
        // restrict(prolong(v)) = v.
        let up = prolong(&v, 0, 2, &opts).unwrap();
        let back = restrict(&up, 2, 0, &opts).unwrap();
        assert!((&back - &v).norm() < 1e-13);
        // Prolongation reproduces constants and linear coordinates exactly.
        let ones = DVector::from_element(n0, 1.0);
        let up = prolong(&ones, 0, 1, &opts).unwrap();
        assert!(up.iter().all(|x| (x - 1.0).abs() < 1e-14));
        let side0 = opts.side(0).unwrap();
        let x1 = DVector::from_fn(n0, |p, _| node_coords(side0, p).0);
        let up = prolong(&x1, 0, 1, &opts).unwrap();
        let side1 = opts.side(1).unwrap();
        for (p, v) in up.iter().enumerate() {
            assert_relative_eq!(*v, node_coords(side1, p).0, epsilon = 1e-14);
        }
        // Direction checks.
        assert!(matches!(
            restrict(&v, 0, 2, &opts),
            Err(Error::NonNestedLevels(0, 2))
        ));
        assert!(matches!(
            prolong(&v, 2, 0, &opts),
            Err(Error::NonNestedLevels(2, 0))
        ));
    }

    #[test]
    fn singleton_ensemble_reduces_to_the_plain_system() {
        let sys = build_periodic(1.0, 0.3).unwrap();
        let ens = build_ensemble(std::slice::from_ref(&sys)).unwrap();
        assert_eq!(ens.extended.state_dim(), 2);
        let single = solve_periodic_riccati(&sys.a, &sys.b, &sys.q, 1e-2, 1e-9, 200).unwrap();
        // The ensemble observation weight for N = 1 is C^T C, not Q = I, so
        // compare against the Riccati solve with Q = C.
        let ens_sol = solve_periodic_riccati(
            &ens.extended.a,
            &ens.extended.b,
            &ens.extended.q,
            1e-2,
            1e-9,
            200,
        )
        .unwrap();
        let direct = solve_periodic_riccati(&sys.a, &sys.b, &sys.c, 1e-2, 1e-9, 200).unwrap();
        assert!((ens_sol.values[0].clone() - &direct.values[0]).norm() < 1e-8);
        // And the compressed robust gain agrees with -B^T Pi.
        let robust = ens.robust_gain(&ens_sol);
        let plain = -(sys.b.transpose() * &direct.values[0]);
        assert!((robust.gain_at(0.0) - plain).norm() < 1e-8);
        let _ = single;
    }

    #[test]
    fn ensemble_requires_matching_members() {
        // Mismatched periods.
        let a = build_periodic(1.0, 0.0).unwrap();
        let b = build_periodic(0.5, 0.0).unwrap();
        assert!(build_ensemble(&[a.clone(), b]).is_err());
        // Mismatched input operators.
        let mut c = build_periodic(1.0, 0.2).unwrap();
        c.b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(build_ensemble(&[a, c]).is_err());
    }

    #[test]
    fn autonomous_are_for_oscillator_member() {
        // The Sigma_11-style grid members all admit stabilizing gains.
        for i in [-10i64, -3, 0, 7, 10] {
            let sigma = i as f64 / 10.0;
            let sys = build_oscillator(sigma).unwrap();
            let sol = solve_are(&sys.a.evaluate(0.0), &sys.b, &sys.q, 1e-10, 50).unwrap();
            let closed = sys.a.evaluate(0.0) - &sys.b * (sys.b.transpose() * &sol.values[0]);
            assert!(max_real_eigenvalue(&closed) < 0.0, "sigma = {sigma}");
        }
    }
}
