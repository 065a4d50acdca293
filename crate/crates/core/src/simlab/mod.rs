//! Simulation designs and the Monte Carlo harness.

pub mod dgp;
pub mod models;
pub mod montecarlo;

pub use dgp::{
    gen_cluster_dgp, gen_lattice_dgp, gen_network_dgp, ClusterDgpConfig, LatticeDgpConfig, NetworkDgpConfig,
};
pub use montecarlo::{
    naive_comparison, noise_convention_check, run_monte_carlo, DgpConfig, McRow, MonteCarloConfig, MonteCarloReport,
};
