use nalgebra::{DMatrix, SymmetricEigen};

use super::*;
use crate::exposure::apply_mapping;
use crate::graph::NetworkGraph;
use crate::panel::Structure;
use crate::simlab::dgp::{gen_cluster_dgp, gen_lattice_dgp, gen_network_dgp, ClusterDgpConfig, LatticeDgpConfig, NetworkDgpConfig};
use crate::simlab::models::{CLUSTER_MODEL, NETWORK_MODEL};
use crate::estimator::solve_psi;

fn network_fit(n: usize, seed: u64) -> (MappedPanel, BlipModel, EstimationResult) {
    let mapped = gen_network_dgp(&NetworkDgpConfig {
        n,
        seed,
        ..NetworkDgpConfig::default()
    })
    .unwrap();
    let model = BlipModel::parse(NETWORK_MODEL).unwrap();
    let fit = solve_psi(&mapped, &model, &EstimatorConfig::default()).unwrap();
    (mapped, model, fit)
}

fn assert_sym_psd(m: &DMatrix<f64>) {
    assert!((m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax()));
    let eig = SymmetricEigen::new(m.clone());
    assert!(eig.eigenvalues.min() >= -1e-12 * (1.0 + m.amax()), "{}", eig.eigenvalues);
}

#[test]
fn kernel_weights() {
    let w: Vec<f64> = (0..3).map(|s| Kernel::Bartlett.weight(f64::from(s) / 2.0)).collect();
    assert_eq!(w, vec![1.0, 0.5, 0.0]);
    assert_eq!(Kernel::Parzen.weight(0.0), 1.0);
    assert!((Kernel::Parzen.weight(0.5) - 0.25).abs() < 1e-15);
    assert_eq!(Kernel::Parzen.weight(1.0), 0.0);
    assert_eq!(Kernel::Uniform.weight(1.0), 1.0);
    assert_eq!(Kernel::Uniform.weight(1.01), 0.0);
}

#[test]
fn quantiles_interpolate() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(quantile(&v, 0.0), 1.0);
    assert_eq!(quantile(&v, 1.0), 4.0);
    assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
    assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    assert!((normal_critical(0.95) - 1.959_963_984_540_054).abs() < 1e-9);
}

#[test]
fn sandwich_is_symmetric_and_scale_invariant() {
    let (_, _, fit) = network_fit(800, 1);
    let v = sandwich_cluster(&fit).unwrap();
    assert_sym_psd(&v.covariance);
    let doubled = EstimationResult {
        scores: &fit.scores * 2.0,
        jacobian: &fit.jacobian * 2.0,
        rhs: &fit.rhs * 2.0,
        ..fit.clone()
    };
    let v2 = sandwich_cluster(&doubled).unwrap();
    assert!((&v.covariance - &v2.covariance).amax() <= 1e-12 * v.covariance.amax());
}

#[test]
fn identical_scores_give_zero_variance() {
    let (_, _, fit) = network_fit(300, 2);
    let zeroed = EstimationResult {
        scores: DMatrix::zeros(fit.n(), fit.scores.ncols()),
        ..fit
    };
    assert_eq!(sandwich_cluster(&zeroed).unwrap().covariance.amax(), 0.0);
}

#[test]
fn singular_jacobian_rejected() {
    let (_, _, fit) = network_fit(300, 3);
    let mut bad = fit.clone();
    bad.jacobian.column_mut(0).fill(0.0);
    assert_eq!(sandwich_cluster(&bad).unwrap_err(), Error::JacobianSingular);
}

#[test]
fn hac_on_edgeless_graph_equals_sandwich() {
    let (mapped, _, _) = network_fit(600, 4);
    let panel = mapped.panel().clone().with_structure(Structure::Network(NetworkGraph::edgeless(600))).unwrap();
    let direct = apply_mapping(&panel, &crate::exposure::MappingSpec::Direct).unwrap();
    let model_direct = BlipModel::parse("[m=0] d0: a[m]\nd0g: a[m]*timegap\n[m=1, k=2] d1: a[m]").unwrap();
    let fit = solve_psi(&direct, &model_direct, &EstimatorConfig::default()).unwrap();
    let sand = sandwich_cluster(&fit).unwrap();
    for max_lag in [None, Some(0), Some(7)] {
        let hac = network_hac(
            &fit,
            &direct,
            HacOptions {
                bandwidth: Some(3.0),
                max_lag,
                ..HacOptions::default()
            },
        )
        .unwrap();
        assert!((&hac.covariance - &sand.covariance).amax() <= 1e-12 * sand.covariance.amax().max(1e-300));
    }
}

#[test]
fn hac_defaults_and_widening() {
    let (mapped, _, fit) = network_fit(2000, 5);
    let hac = network_hac(&fit, &mapped, HacOptions::default()).unwrap();
    assert_eq!(hac.tuning.bandwidth, Some(2.0));
    assert_eq!(hac.tuning.kernel, Some(Kernel::Bartlett));
    assert_eq!(hac.tuning.max_lag, Some(2000));
    assert_sym_psd(&hac.covariance);
    let sand = sandwich_cluster(&fit).unwrap();
    // neighbors share exposure information, so the direct-effect variance
    // should not shrink much relative to the independent sandwich
    assert!(hac.covariance[(0, 0)] > 0.5 * sand.covariance[(0, 0)]);
}

#[test]
fn hac_needs_a_graph() {
    let mapped = gen_cluster_dgp(&ClusterDgpConfig {
        n_clusters: 200,
        ..ClusterDgpConfig::default()
    })
    .unwrap();
    let model = BlipModel::parse(CLUSTER_MODEL).unwrap();
    let fit = solve_psi(&mapped, &model, &EstimatorConfig::default()).unwrap();
    assert_eq!(
        network_hac(&fit, &mapped, HacOptions::default()).unwrap_err().code(),
        "StructureMissing"
    );
}

#[test]
fn psd_projection_clips() {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    let (p, clipped) = project_psd(m);
    assert!((clipped.unwrap() + 1.0).abs() < 1e-12);
    assert_sym_psd(&p);
    assert!((p[(0, 0)] - 1.5).abs() < 1e-12);
}

#[test]
fn moving_blocks_cover_circularly() {
    let plan = BlockPlan::moving(10, 4, 5, 0).unwrap();
    assert_eq!(plan.blocks[8], vec![8, 9, 0, 1]);
    assert_eq!(plan.draws, 3);
    let mut rng = crate::rng::base_rng(1);
    assert_eq!(plan.resample(&mut rng).len(), 10);
    assert!(BlockPlan::moving(10, 0, 5, 0).is_err());
    assert!(BlockPlan::moving(10, 11, 5, 0).is_err());
    assert!(BlockPlan::moving(10, 2, 1, 0).is_err());
}

#[test]
fn full_length_blocks_have_zero_spread() {
    let (mapped, model, _) = network_fit(400, 6);
    let v = moving_block_bootstrap(&mapped, &model, &EstimatorConfig::default(), 400, 8, 3).unwrap();
    assert_eq!(v.covariance.amax(), 0.0);
    assert_eq!(v.tuning.block_length, Some(400));
}

#[test]
fn moving_block_bootstrap_is_reproducible() {
    let (mapped, model, fit) = network_fit(1000, 7);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| moving_block_bootstrap(&mapped, &model, &EstimatorConfig::default(), 5, 16, 42).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.covariance, b.covariance);
    assert_eq!(a.draws, b.draws);
    assert_sym_psd(&a.covariance);
    let ci = a.confidence_intervals(fit.psi_slice(), 0.95);
    assert!(ci.iter().all(|(lo, hi)| lo <= hi));
    assert!(a.standard_errors().iter().all(|&s| s > 0.0));
}

#[test]
fn estimands_are_evaluated_per_replicate() {
    let (mapped, model, _) = network_fit(500, 8);
    let first = |fit: &EstimationResult, _: &MappedPanel, _: &BlipModel| Ok(vec![fit.psi[0], 1.0]);
    let v = moving_block_bootstrap_with(&mapped, &model, &EstimatorConfig::default(), 5, 6, 1, Some(&first)).unwrap();
    let d = v.draws.unwrap();
    assert_eq!(d.estimands.len(), 6);
    for (p, e) in d.psi.iter().zip(&d.estimands) {
        assert_eq!(p[0], e[0]);
        assert_eq!(e[1], 1.0);
    }
}

#[test]
fn spatial_bootstrap_on_lattice() {
    let mapped = gen_lattice_dgp(&LatticeDgpConfig {
        rows: 20,
        cols: 25,
        seed: 3,
        ..LatticeDgpConfig::default()
    })
    .unwrap();
    let model = BlipModel::parse(NETWORK_MODEL).unwrap();
    let v = spatial_block_bootstrap(&mapped, &model, &EstimatorConfig::default(), 75.0, 10, 9).unwrap();
    assert!(v.tuning.blocks.unwrap() > 20);
    assert_eq!(v.tuning.hex_anchor, Some([0.0, 0.0]));
    assert!(v.warnings.is_empty());
    assert_sym_psd(&v.covariance);
}

#[test]
fn spatial_bootstrap_needs_coordinates_and_warns_on_one_hex() {
    let (mapped, model, _) = network_fit(300, 10);
    let err = spatial_block_bootstrap(&mapped, &model, &EstimatorConfig::default(), 75.0, 4, 1).unwrap_err();
    assert_eq!(err.code(), "StructureMissing");

    let panel = mapped.panel().clone().with_coordinates(vec![[10.0, 10.0]; 300]).unwrap();
    let mapped = apply_mapping(&panel, &crate::exposure::MappingSpec::NeighborMax).unwrap();
    let v = spatial_block_bootstrap(&mapped, &model, &EstimatorConfig::default(), 75.0, 4, 1).unwrap();
    assert_eq!(v.tuning.blocks, Some(1));
    assert_eq!(v.warnings.len(), 1);
    assert_eq!(v.covariance.amax(), 0.0);
}

#[test]
fn variance_config_round_trips() {
    let cfgs = [
        VarianceConfig::Sandwich,
        VarianceConfig::NetworkHac {
            kernel: Kernel::Parzen,
            bandwidth: Some(3.0),
            max_lag: None,
        },
        VarianceConfig::MovingBlock {
            block_length: 5,
            replicates: 200,
            seed: Some(1),
        },
        VarianceConfig::SpatialBlock {
            hex_width_km: 75.0,
            replicates: 100,
            seed: None,
        },
    ];
    for c in cfgs {
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<VarianceConfig>(&text).unwrap(), c);
    }
}
