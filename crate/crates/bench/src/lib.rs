//! Shared fixtures for the solver and online-loop benchmarks.

use nalgebra::DVector;

use adaptive_stab_core::library::{
    build_library, FeedbackLibrary, ParameterBox, SolverConfig, TrainingSet,
};
use adaptive_stab_core::models::build_oscillator;
use adaptive_stab_core::ode::ControlSystem;

/// Oscillator training grid `{i / n1}` with its plants.
pub fn oscillator_grid(n1: i64) -> (TrainingSet, Vec<ControlSystem>) {
    let params: Vec<DVector<f64>> = (-n1..=n1)
        .map(|i| DVector::from_element(1, i as f64 / n1 as f64))
        .collect();
    let training = TrainingSet::new(params, ParameterBox::new(vec![-1.0], vec![1.0])).unwrap();
    let systems = training
        .iter()
        .map(|p| build_oscillator(p[0]).unwrap())
        .collect();
    (training, systems)
}

/// Prebuilt oscillator library for the online-loop benchmarks.
pub fn oscillator_library(n1: i64) -> (TrainingSet, Vec<ControlSystem>, FeedbackLibrary) {
    let (training, systems) = oscillator_grid(n1);
    let lib = build_library(
        &systems,
        training.clone(),
        &SolverConfig::default(),
        "bench",
    )
    .unwrap();
    (training, systems, lib)
}
