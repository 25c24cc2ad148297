#![allow(dead_code)]

use std::sync::Arc;

use fbsde_core::bundle::{BundleSpec, InitialState, PathBundle, PathData};
use fbsde_core::intensity::ChannelKernel;
use fbsde_core::measures::{EmpiricalMeasure, EnvironmentPath, EnvironmentSpec};

pub fn point_env(x: f64) -> EnvironmentSpec {
    EnvironmentSpec::Constant(EmpiricalMeasure::dirac(&[x]).unwrap())
}

pub fn spec(horizon: f64, steps: usize, paths: usize, seed: u64, x0: f64) -> BundleSpec {
    BundleSpec {
        horizon,
        steps,
        paths,
        seed,
        brownian_dim: 1,
        state_dim: 1,
        initial: InitialState::Fixed(vec![x0]),
        environment: point_env(0.0),
        channels: Vec::new(),
        env_features: Vec::new(),
    }
}

pub fn with_channels(mut s: BundleSpec, channels: Vec<ChannelKernel>) -> BundleSpec {
    s.channels = channels;
    s
}

/// Coarse version of a bundle without events or breakpoints, built from the
/// same Brownian realization by summing `factor` consecutive increments.
pub fn coarsen(fine: &PathBundle, factor: usize) -> PathBundle {
    assert!(fine.spec.channels.is_empty());
    let n = fine.steps() / factor;
    assert_eq!(n * factor, fine.steps());
    let k = fine.brownian_dim();
    let mut spec = fine.spec.clone();
    spec.steps = n;
    let grid = spec.grid();
    let paths = fine
        .paths
        .iter()
        .map(|d| {
            let mut dw = vec![0.0; n * k];
            let mut w = vec![0.0; (n + 1) * k];
            for m in 0..n {
                for c in 0..k {
                    let inc: f64 = (0..factor).map(|j| d.dw[(m * factor + j) * k + c]).sum();
                    dw[m * k + c] = inc;
                    w[(m + 1) * k + c] = d.w[(m + 1) * factor * k + c];
                }
            }
            PathData {
                env: Arc::new(EnvironmentPath::constant(spec.horizon, d.env.initial().clone()).unwrap()),
                log: d.log.clone(),
                x0: d.x0.clone(),
                sub_times: grid.clone(),
                sub_step: (0..n).collect(),
                sub_env: vec![0; n],
                sub_dw: dw.clone(),
                sub_masses: Vec::new(),
                sub_regime: Vec::new(),
                jump_offsets: vec![0; n + 1],
                jump_slots: Vec::new(),
                dw,
                w,
                dn: Vec::new(),
                comp: Vec::new(),
                masses: Vec::new(),
                counts: Vec::new(),
                regime: Vec::new(),
                env_features: Vec::new(),
            }
        })
        .collect();
    PathBundle::from_paths(spec, paths).unwrap()
}
