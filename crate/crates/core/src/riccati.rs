//! Algebraic and time-periodic differential Riccati solvers, plus
//! controllability/observability rank certificates.
//!
//! The algebraic solver is a Newton-Kleinman iteration whose Lyapunov steps
//! are solved densely by Kronecker linearization; it is meant for desk-scale
//! state dimensions. The periodic solver sweeps the differential equation
//! backward over one period with a Crank-Nicolson (Cayley) step of the
//! underlying Hamiltonian flow, re-feeding the initial value as the next
//! terminal condition until the sweep start stops moving.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ode::TimePeriodicOperator;

/// Largest state dimension for which the periodic solver tries to seed the
/// sweep from a frozen-time algebraic solve.
const ARE_SEED_MAX_DIM: usize = 30;

/// Relative floor on the positive-semidefiniteness check.
const PSD_SLACK: f64 = 1e-8;

/// A Riccati solution: one matrix for algebraic problems, a meshed family
/// `Pi(t)` over one period for time-periodic problems.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    /// Time mesh in `[0, period)`; `[0.0]` for algebraic solutions.
    pub mesh: Vec<f64>,
    /// `Pi` at every mesh node; symmetric positive semidefinite.
    pub values: Vec<DMatrix<f64>>,
    /// Algebraic residual, or the final sweep defect for periodic solves.
    pub residual: f64,
    /// Newton iterations or sweep count.
    pub iterations: usize,
    /// `None` for algebraic solutions.
    pub period: Option<f64>,
    /// `|Pi(0) - Pi(period^-)|_F` at convergence (zero for algebraic).
    pub periodicity_gap: f64,
    /// Spectral radius of the closed-loop monodromy (periodic solves only).
    pub monodromy_radius: Option<f64>,
}

impl RiccatiSolution {
    pub fn start(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    /// `Pi(t)` by periodic linear interpolation on the stored mesh.
    pub fn value_at(&self, t: f64) -> DMatrix<f64> {
        let Some(period) = self.period else {
            return self.values[0].clone();
        };
        let tbar = t.rem_euclid(period);
        let m = self.mesh.len();
        // Index of the node at or below tbar; the wrap node at `period`
        // carries the value at 0.
        let mut lo = m - 1;
        for (i, node) in self.mesh.iter().enumerate() {
            if *node <= tbar {
                lo = i;
            } else {
                break;
            }
        }
        let (t_lo, v_lo) = (self.mesh[lo], &self.values[lo]);
        let (t_hi, v_hi) = if lo + 1 < m {
            (self.mesh[lo + 1], &self.values[lo + 1])
        } else {
            (period, &self.values[0])
        };
        let span = t_hi - t_lo;
        if span <= 0.0 {
            return v_lo.clone();
        }
        let w = ((tbar - t_lo) / span).clamp(0.0, 1.0);
        v_lo * (1.0 - w) + v_hi * w
    }
}

/// Max real part of the spectrum.
pub fn max_real_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    max_real_eigenvalue(a) < 0.0
}

/// Spectral radius (largest eigenvalue modulus).
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Solve the Lyapunov equation `A^T X + X A + W = 0` by Kronecker
/// linearization (dense, fine for small `n`).
fn solve_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    // vec(A^T X) = (I (x) A^T) vec X, vec(X A) = (A^T (x) I) vec X.
    let system = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice(w.as_slice()) * -1.0;
    let sol = system.lu().solve(&rhs).ok_or(Error::NonConvergence {
        iterations: 0,
        defect: f64::INFINITY,
    })?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    // Symmetrize against roundoff.
    Ok((&x + x.transpose()) * 0.5)
}

/// Residual `|A^T Pi + Pi A - Pi B B^T Pi + Q^T Q|_F`.
pub fn are_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    pi: &DMatrix<f64>,
) -> f64 {
    let s = b * b.transpose();
    (a.transpose() * pi + pi * a - pi * &s * pi + q.transpose() * q).norm()
}

/// Pole placement for a single-input pair via Ackermann's formula, placing
/// the closed-loop spectrum at `-1, -2, ..., -n`. Returns the gain row `K`
/// such that `A + b K` carries those poles.
fn ackermann_gain(a: &DMatrix<f64>, b_col: &DVector<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b_col.clone();
    for j in 0..n {
        ctrb.set_column(j, &col);
        col = a * col;
    }
    let ctrb_lu = ctrb.lu();
    if !ctrb_lu.is_invertible() {
        return None;
    }
    // p(s) = prod_{i=1..n} (s + i), evaluated at A by Horner.
    let mut coeffs = vec![1.0f64];
    for i in 1..=n {
        let mut next = vec![0.0; coeffs.len() + 1];
        for (j, c) in coeffs.iter().enumerate() {
            next[j] += c * i as f64;
            next[j + 1] += c;
        }
        coeffs = next;
    }
    let mut p_of_a = DMatrix::<f64>::zeros(n, n);
    for c in coeffs.iter().rev() {
        p_of_a = &p_of_a * a;
        for i in 0..n {
            p_of_a[(i, i)] += c;
        }
    }
    // k = e_n^T Ctrb^{-1} p(A); the gain K = -k stabilizes A + b K.
    let solved = ctrb_lu.solve(&p_of_a)?;
    Some(DMatrix::from_fn(1, n, |_, j| -solved[(n - 1, j)]))
}

/// Find a gain `K0` with `A + B K0` Hurwitz: zero gain if `A` is already
/// stable, then `-alpha B^T` over a small scan, then single-column pole
/// placement as a last resort.
fn stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (a.nrows(), b.ncols());
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(m, n));
    }
    for alpha in [1.0, 10.0, 100.0] {
        let k = b.transpose() * -alpha;
        if is_hurwitz(&(a + b * &k)) {
            return Ok(k);
        }
    }
    for j in 0..m {
        let col = DVector::from_column_slice(b.column(j).as_slice());
        if let Some(k_row) = ackermann_gain(a, &col) {
            let mut k = DMatrix::zeros(m, n);
            k.row_mut(j).copy_from(&k_row.row(0));
            if is_hurwitz(&(a + b * &k)) {
                return Ok(k);
            }
        }
    }
    Err(Error::NotStabilizable)
}

/// Solve the algebraic Riccati equation
/// `A^T Pi + Pi A - Pi B B^T Pi + Q^T Q = 0` by Newton-Kleinman iteration.
///
/// Returns `Pi >= 0` with residual below `tol * (1 + |Pi|_F^2)` and a
/// Hurwitz closed loop `A - B B^T Pi`.
pub fn solve_are(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "ARE requires square A ({n}x{n}), B with {n} rows, Q with {n} columns"
        )));
    }
    let qtq = q.transpose() * q;
    let mut k = stabilizing_gain(a, b)?;
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        let a_cl = a + b * &k;
        let w = &qtq + k.transpose() * &k;
        let pi = solve_lyapunov(&a_cl, &w)?;
        residual = are_residual(a, b, q, &pi);
        if residual <= tol * (1.0 + pi.norm().powi(2)) {
            let closed = a - b * (b.transpose() * &pi);
            if !is_hurwitz(&closed) {
                return Err(Error::UnstableClosedLoop {
                    radius: max_real_eigenvalue(&closed),
                });
            }
            check_psd(&pi)?;
            return Ok(RiccatiSolution {
                mesh: vec![0.0],
                values: vec![pi],
                residual,
                iterations: iter,
                period: None,
                periodicity_gap: 0.0,
                monodromy_radius: None,
            });
        }
        k = -(b.transpose() * &pi);
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        defect: residual,
    })
}

fn check_psd(pi: &DMatrix<f64>) -> Result<()> {
    let sym = (pi + pi.transpose()) * 0.5;
    let min_eig = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let floor = -PSD_SLACK * pi.norm().max(1.0);
    if min_eig < floor {
        return Err(Error::NonConvergence {
            iterations: 0,
            defect: -min_eig,
        });
    }
    Ok(())
}

/// Solve the time-periodic differential Riccati equation
/// `dot Pi + A(t)^T Pi + Pi A(t) - Pi B B^T Pi + Q^T Q = 0`,
/// `Pi(t + rho) = Pi(t)`, by backward Crank-Nicolson sweeps over one period.
///
/// Each sweep integrates from `t = rho` down to `0`, re-using the previous
/// sweep's value at `0` as the new terminal condition, until
/// `|Pi_k(0) - Pi_{k-1}(0)|_F <= tol`.
pub fn solve_periodic_riccati(
    a_op: &TimePeriodicOperator,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    dt_ric: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<RiccatiSolution> {
    let n = a_op.dim();
    if b.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "periodic Riccati requires B with {n} rows and Q with {n} columns"
        )));
    }
    let rho = a_op.period().ok_or(Error::AperiodicOperator)?;
    if dt_ric <= 0.0 || dt_ric > rho {
        return Err(Error::StepMismatch {
            dt: dt_ric,
            horizon: rho,
            defect: f64::INFINITY,
        });
    }
    // Mesh {j dt_ric}, j = 0 .. ceil(rho/dt_ric) - 1; when the period is not
    // an integer multiple of the step, the sweep takes one shorter step
    // between the last node and rho.
    let steps = (rho / dt_ric - 1e-9).ceil() as usize;
    let delta = dt_ric;
    let node_hi = |j: usize| {
        if j + 1 == steps {
            rho
        } else {
            (j + 1) as f64 * delta
        }
    };

    let s_mat = b * b.transpose();
    let qtq = q.transpose() * q;

    // Terminal seed: frozen-time algebraic solution at t = 0 when available,
    // else Q^T Q.
    let mut pi_end = if n <= ARE_SEED_MAX_DIM {
        match solve_are(&a_op.evaluate(0.0), b, q, 1e-9, 50) {
            Ok(sol) => sol.values[0].clone(),
            Err(_) => qtq.clone(),
        }
    } else {
        qtq.clone()
    };

    let eye2n = DMatrix::<f64>::identity(2 * n, 2 * n);
    let mut values: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); steps + 1];
    let mut gap = f64::INFINITY;
    let mut sweeps = 0;

    while sweeps < max_sweeps {
        sweeps += 1;
        values[steps] = pi_end.clone();
        for j in (0..steps).rev() {
            let t_lo = j as f64 * delta;
            let h_step = node_hi(j) - t_lo;
            let t_mid = t_lo + 0.5 * h_step;
            let a_mid = a_op.evaluate(t_mid);
            // Hamiltonian of the flow [X; Y] with Pi = Y X^{-1}.
            let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
            h.view_mut((0, 0), (n, n)).copy_from(&a_mid);
            h.view_mut((0, n), (n, n)).copy_from(&(-&s_mat));
            h.view_mut((n, 0), (n, n)).copy_from(&(-&qtq));
            h.view_mut((n, n), (n, n)).copy_from(&(-a_mid.transpose()));

            let mut stacked = DMatrix::<f64>::zeros(2 * n, n);
            stacked
                .view_mut((0, 0), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            stacked.view_mut((n, 0), (n, n)).copy_from(&values[j + 1]);

            // Backward Cayley step of the Hamiltonian flow.
            let lhs = &eye2n + &h * (0.5 * h_step);
            let rhs = (&eye2n - &h * (0.5 * h_step)) * stacked;
            let z = lhs
                .lu()
                .solve(&rhs)
                .ok_or(Error::SingularStep { t: t_mid })?;
            let x = z.view((0, 0), (n, n)).into_owned();
            let y = z.view((n, 0), (n, n)).into_owned();
            // Pi_j = Y X^{-1}, via X^T Pi^T = Y^T.
            let pi_t = x
                .transpose()
                .lu()
                .solve(&y.transpose())
                .ok_or(Error::SingularStep { t: t_mid })?;
            let pi = pi_t.transpose();
            values[j] = (&pi + pi.transpose()) * 0.5;
        }
        gap = (&values[0] - &pi_end).norm();
        if gap <= tol {
            break;
        }
        pi_end = values[0].clone();
    }
    if gap > tol {
        return Err(Error::NonConvergence {
            iterations: sweeps,
            defect: gap,
        });
    }

    for v in values.iter().take(steps) {
        check_psd(v)?;
    }

    // Closed-loop monodromy over one period, same Cayley discretization.
    let eye = DMatrix::<f64>::identity(n, n);
    let mut mono = eye.clone();
    for j in 0..steps {
        let t_lo = j as f64 * delta;
        let h_step = node_hi(j) - t_lo;
        let t_mid = t_lo + 0.5 * h_step;
        let pi_mid = (&values[j] + &values[j + 1]) * 0.5;
        let m = a_op.evaluate(t_mid) - &s_mat * pi_mid;
        let lhs = &eye - &m * (0.5 * h_step);
        let rhs = &eye + &m * (0.5 * h_step);
        let step = lhs
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularStep { t: t_mid })?;
        mono = step * mono;
    }
    let radius = spectral_radius(&mono);
    if radius >= 1.0 + 1e-9 {
        return Err(Error::UnstableClosedLoop { radius });
    }

    let mesh = (0..steps).map(|j| j as f64 * delta).collect();
    values.truncate(steps);
    Ok(RiccatiSolution {
        mesh,
        values,
        residual: gap,
        iterations: sweeps,
        period: Some(rho),
        periodicity_gap: gap,
        monodromy_radius: Some(radius),
    })
}

/// Numerical rank with the SVD threshold `max(dims) * eps * sigma_max`.
fn numerical_rank(m: &DMatrix<f64>) -> (usize, f64) {
    let svd = m.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sigma_max = sv.first().cloned().unwrap_or(0.0);
    let thr = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * sigma_max;
    let rank = sv.iter().filter(|s| **s > thr).count();
    let sigma_min = sv.last().cloned().unwrap_or(0.0);
    (rank, sigma_min)
}

/// Kalman rank condition: `[B, AB, ..., A^{n-1}B]` has rank `n`.
pub fn kalman_rank(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for j in 0..n {
        ctrb.view_mut((0, j * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    numerical_rank(&ctrb).0 == n
}

/// Controllability or observability certificate for a time-varying pair.
#[derive(Clone, Debug)]
pub struct RankCertificate {
    /// The assembled block matrix `Q_B(t)` or `Q_C(t)`.
    pub matrix: DMatrix<f64>,
    /// Evaluation time.
    pub t: f64,
    pub rank: usize,
    pub sigma_min: f64,
}

impl RankCertificate {
    pub fn is_full_rank(&self) -> bool {
        self.rank == self.matrix.nrows()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut c = 1.0f64;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c
}

/// `d^order A / dt^order` at `t`: analytic when the operator provides it,
/// otherwise a central difference whose step widens with the order (nested
/// differencing at a fixed tiny step cannot deliver usable second and higher
/// derivatives).
fn operator_derivative(op: &TimePeriodicOperator, t: f64, order: usize) -> DMatrix<f64> {
    if let Some(d) = op.derivative(t, order as u32) {
        return d;
    }
    let scale = op.period().unwrap_or(1.0).max(1.0);
    let h = 1e-6f64.max(f64::EPSILON.powf(1.0 / (order as f64 + 2.0))) * scale;
    // Central binomial stencil: offsets (order/2 - j) h, j = 0..order.
    let n = op.dim();
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for j in 0..=order {
        let coeff = if j % 2 == 0 {
            binomial(order, j)
        } else {
            -binomial(order, j)
        };
        let offset = (order as f64 / 2.0 - j as f64) * h;
        acc += op.evaluate(t + offset) * coeff;
    }
    acc / h.powi(order as i32)
}

/// Silverman-Meadows controllability matrix
/// `Q_B(t) = [P_0(t) P_1(t) ... P_{nN-1}(t)]` with
/// `P_{k+1} = -A(t) P_k + dP_k/dt`, `P_0 = B`.
pub fn silverman_meadows_qb(
    a_op: &TimePeriodicOperator,
    b_ext: &DMatrix<f64>,
    t: f64,
) -> Result<RankCertificate> {
    sm_certificate(a_op, b_ext.clone(), t, SmKind::Controllability)
}

/// Silverman-Meadows observability matrix
/// `Q_C(t) = [S_0(t) S_1(t) ... S_{nN-1}(t)]` with
/// `S_{k+1} = A(t)^T S_k + dS_k/dt`, `S_0 = C^T`.
pub fn silverman_meadows_qc(
    a_op: &TimePeriodicOperator,
    c_ext: &DMatrix<f64>,
    t: f64,
) -> Result<RankCertificate> {
    sm_certificate(a_op, c_ext.transpose(), t, SmKind::Observability)
}

enum SmKind {
    Controllability,
    Observability,
}

fn sm_certificate(
    a_op: &TimePeriodicOperator,
    p0: DMatrix<f64>,
    t: f64,
    kind: SmKind,
) -> Result<RankCertificate> {
    let n = a_op.dim();
    if p0.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "seed block has {} rows, operator dimension is {n}",
            p0.nrows()
        )));
    }
    let m = p0.ncols();
    let blocks = n; // P_0 .. P_{n-1}
    let max_order = blocks.saturating_sub(2);
    let a_derivs: Vec<DMatrix<f64>> = (0..=max_order)
        .map(|d| {
            let a_d = operator_derivative(a_op, t, d);
            match kind {
                SmKind::Controllability => -a_d,
                SmKind::Observability => a_d.transpose(),
            }
        })
        .collect();

    // Leibniz table: pd[d] = d-th time derivative of the current block.
    let mut pd: Vec<DMatrix<f64>> = (0..blocks)
        .map(|d| {
            if d == 0 {
                p0.clone()
            } else {
                DMatrix::zeros(n, m)
            }
        })
        .collect();
    let mut q = DMatrix::<f64>::zeros(n, blocks * m);
    q.view_mut((0, 0), (n, m)).copy_from(&pd[0]);

    for k in 0..blocks.saturating_sub(1) {
        let depth = blocks - 1 - k; // derivative orders still needed
        let mut next: Vec<DMatrix<f64>> = Vec::with_capacity(depth);
        for d in 0..depth {
            let mut val = pd[d + 1].clone();
            for i in 0..=d {
                val += &a_derivs[i] * &pd[d - i] * binomial(d, i);
            }
            next.push(val);
        }
        q.view_mut((0, (k + 1) * m), (n, m)).copy_from(&next[0]);
        pd = next;
    }

    let (rank, sigma_min) = numerical_rank(&q);
    Ok(RankCertificate {
        matrix: q,
        t,
        rank,
        sigma_min,
    })
}
