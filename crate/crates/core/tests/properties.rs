//! Property tests for the structural invariants: lookup continuity,
//! serialization round-trips, quadrature behavior of the comparison
//! functional, trajectory linearity, and envelope fits.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use adaptive_stab_core::adaptive::{comparison_functional, fit_decay, update_estimate};
use adaptive_stab_core::library::{
    epsilon_density, nearest_training, FeedbackLibrary, GainSchedule, ParameterBox, TrainingSet,
};
use adaptive_stab_core::ode::{
    integrate_closed_loop, ControlSystem, IntegratorConfig, Scheme, TimePeriodicOperator,
    ZeroFeedback,
};

fn schedule_strategy() -> impl Strategy<Value = GainSchedule> {
    (
        2usize..6,
        1usize..4,
        proptest::collection::vec(-2.0f64..2.0, 2..12),
    )
        .prop_map(|(n, m, raw)| {
            let nodes = raw.len();
            let period = 1.0;
            let mesh: Vec<f64> = (0..nodes).map(|j| j as f64 / nodes as f64).collect();
            let gains: Vec<DMatrix<f64>> = raw
                .iter()
                .map(|seed| DMatrix::from_fn(m, n, |i, j| seed * ((i + 2 * j) as f64 + 0.5)))
                .collect();
            GainSchedule {
                parameter: DVector::from_element(1, raw[0]),
                period,
                mesh,
                gains,
            }
        })
}

proptest! {
    /// Interpolated lookups are continuous in time, including across the
    /// period wrap, and periodic by construction.
    #[test]
    fn lookup_is_continuous_and_periodic(
        sched in schedule_strategy(),
        t in 0.0f64..3.0,
    ) {
        let eps = 1e-9;
        let here = sched.gain_at(t);
        let there = sched.gain_at(t + eps);
        let slope_bound = 1e3; // gains are O(10), mesh spacing >= 1/12
        prop_assert!((&there - &here).amax() <= slope_bound * eps);
        let wrapped = sched.gain_at(t + sched.period);
        prop_assert!((&wrapped - &here).amax() <= 1e-9);
    }

    /// Stored gains survive the binary round-trip bit for bit.
    #[test]
    fn library_round_trip_is_bit_exact(scheds in proptest::collection::vec(schedule_strategy(), 1..4)) {
        // Distinct parameters and a common shape are required by the format.
        let (m, n) = (scheds[0].inputs(), scheds[0].states());
        let mut schedules = Vec::new();
        for (i, mut s) in scheds.into_iter().enumerate() {
            s.parameter = DVector::from_element(1, i as f64);
            s.gains = s
                .gains
                .iter()
                .map(|g| DMatrix::from_fn(m, n, |r, c| g[(r % g.nrows(), c % g.ncols())]))
                .collect();
            schedules.push(s);
        }
        let training = TrainingSet::new(
            schedules.iter().map(|s| s.parameter.clone()).collect(),
            ParameterBox::new(vec![-1.0], vec![10.0]),
        )
        .unwrap();
        let lib = FeedbackLibrary::from_parts(training, schedules).unwrap();
        let dir = std::env::temp_dir().join("adaptive_stab_core_proptest");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("lib_{}.bin", std::process::id()));
        lib.save(&path).unwrap();
        let loaded = FeedbackLibrary::load(&path).unwrap();
        prop_assert_eq!(loaded.len(), lib.len());
        for i in 0..lib.len() {
            prop_assert_eq!(&loaded.schedule(i).gains, &lib.schedule(i).gains);
            prop_assert_eq!(&loaded.schedule(i).mesh, &lib.schedule(i).mesh);
        }
    }

    /// The comparison functional is a nonnegative quadratic form: it
    /// vanishes on zero differences and scales quadratically.
    #[test]
    fn comparison_is_nonnegative_and_quadratic(
        raw in proptest::collection::vec(-3.0f64..3.0, 4..40),
        alpha in -2.0f64..2.0,
        tau in 0.1f64..2.0,
    ) {
        let nodes = raw.len() / 2;
        let dz = DMatrix::from_fn(1, nodes, |_, j| raw[j]);
        let du = DMatrix::from_fn(1, nodes, |_, j| raw[nodes + j]);
        let e = comparison_functional(&dz, &du, tau).unwrap();
        prop_assert!(e >= 0.0);
        let scaled =
            comparison_functional(&(&dz * alpha), &(&du * alpha), tau).unwrap();
        prop_assert!((scaled - alpha * alpha * e).abs() <= 1e-12 * (1.0 + e));
    }

    /// min-argmin picks the first of tied minima.
    #[test]
    fn update_estimate_takes_first_minimum(
        values in proptest::collection::vec(0.0f64..10.0, 1..20),
        dup in 0usize..20,
    ) {
        let mut values = values;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        // Plant a duplicate of the minimum somewhere.
        let at = dup % values.len();
        values[at] = min;
        let chosen = update_estimate(&values).unwrap();
        prop_assert!((values[chosen] - min).abs() == 0.0);
        for v in &values[..chosen] {
            prop_assert!(*v > min);
        }
    }

    /// Density in epsilon is monotone: a set that covers at radius eps also
    /// covers at any larger radius.
    #[test]
    fn epsilon_density_is_monotone(
        points in proptest::collection::vec(-1.0f64..1.0, 1..8),
        eps in 0.05f64..0.5,
    ) {
        let boxed = ParameterBox::new(vec![-1.0], vec![1.0]);
        let mut distinct: Vec<f64> = points;
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let training = TrainingSet::new(
            distinct.iter().map(|v| DVector::from_element(1, *v)).collect(),
            boxed.clone(),
        )
        .unwrap();
        let tight = epsilon_density(&training, &boxed, eps, 33);
        let loose = epsilon_density(&training, &boxed, 2.0 * eps, 33);
        prop_assert!(!tight || loose);
    }

    /// The nearest training member is a true distance minimizer with the
    /// smallest index among ties.
    #[test]
    fn nearest_is_minimal(
        points in proptest::collection::vec(-1.0f64..1.0, 1..10),
        query in -1.0f64..1.0,
    ) {
        let mut distinct: Vec<f64> = points;
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let training = TrainingSet::new(
            distinct.iter().map(|v| DVector::from_element(1, *v)).collect(),
            ParameterBox::new(vec![-1.0], vec![1.0]),
        )
        .unwrap();
        let q = DVector::from_element(1, query);
        let idx = nearest_training(&training, &q).unwrap();
        let d = (training.get(idx) - &q).norm();
        for i in 0..training.len() {
            let di = (training.get(i) - &q).norm();
            prop_assert!(di >= d);
            if i < idx {
                prop_assert!(di > d);
            }
        }
    }

    /// Envelope fits recover exact exponential data.
    #[test]
    fn fit_decay_recovers_exact_envelopes(
        zeta in 0.2f64..5.0,
        mu in 0.1f64..3.0,
    ) {
        let samples: Vec<(f64, f64)> = (0..60)
            .map(|k| {
                let t = k as f64 * 0.1;
                (t, zeta * (-mu * t).exp())
            })
            .collect();
        let (z, m) = fit_decay(&samples).unwrap();
        prop_assert!((m - mu).abs() <= 1e-9 * mu.max(1.0));
        prop_assert!((z - zeta).abs() <= 1e-9 * zeta.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Closed-loop trajectories are linear in the initial state.
    #[test]
    fn trajectory_linear_in_initial_state(
        a_seed in proptest::collection::vec(-1.0f64..1.0, 4),
        y_seed in proptest::collection::vec(-2.0f64..2.0, 2),
        alpha in 0.25f64..4.0,
    ) {
        let a = DMatrix::from_row_slice(2, 2, &a_seed);
        // Shift to a mild spectrum so nothing blows past the guard.
        let shift = adaptive_stab_core::riccati::max_real_eigenvalue(&a).max(0.0);
        let a = a - DMatrix::identity(2, 2) * shift;
        let sys = ControlSystem::new(
            TimePeriodicOperator::constant(a),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(1),
        )
        .unwrap();
        let fb = ZeroFeedback { inputs: 1, states: 2 };
        let cfg = IntegratorConfig::new(Scheme::Cnab, 1e-2);
        let y0 = DVector::from_vec(y_seed);
        let base = integrate_closed_loop(&sys, &fb, &y0, 0.0, 1.0, &cfg).unwrap();
        let scaled = integrate_closed_loop(&sys, &fb, &(&y0 * alpha), 0.0, 1.0, &cfg).unwrap();
        for (u, v) in base.states.iter().zip(scaled.states.iter()) {
            let expect = u * alpha;
            let denom = expect.norm().max(1e-12);
            prop_assert!((&expect - v).norm() / denom <= 1e-10);
        }
    }

    /// Periodic operators are exactly periodic at representable offsets.
    #[test]
    fn operator_periodicity_at_dyadic_times(k in 0u32..64, reps in 1u32..5) {
        let op = TimePeriodicOperator::periodic(1.0, 1, |t| {
            DMatrix::from_element(1, 1, (2.0 * std::f64::consts::PI * t).sin() + t)
        });
        let t = k as f64 / 64.0;
        let a = op.evaluate(t);
        let b = op.evaluate(t + reps as f64);
        prop_assert_eq!(a, b);
    }
}
