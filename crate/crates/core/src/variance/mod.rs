//! Uncertainty for psi-hat: the score sandwich, a network HAC estimator, and
//! two block bootstraps (moving blocks along a unit ordering, hexagonal
//! spatial blocks).

mod bootstrap;
mod hex;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::blip::BlipModel;
use crate::error::{Error, Result};
use crate::estimator::{EstimationResult, EstimatorConfig};
use crate::exposure::MappedPanel;

pub use bootstrap::{
    moving_block_bootstrap, moving_block_bootstrap_with, run_bootstrap, spatial_block_bootstrap,
    spatial_block_bootstrap_with, BlockPlan, BootstrapDraws, EstimandFn,
};
pub use hex::{hex_blocks, HexTiling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    Sandwich,
    NetworkHac,
    MovingBlock,
    SpatialBlock,
}

/// Lag-window kernels with support `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Bartlett,
    Parzen,
    /// Truncated: weight one up to the bandwidth.
    Uniform,
}

impl Kernel {
    pub fn weight(self, u: f64) -> f64 {
        let u = u.abs();
        match self {
            Kernel::Bartlett => (1.0 - u).max(0.0),
            Kernel::Parzen if u <= 0.5 => 1.0 - 6.0 * u * u + 6.0 * u * u * u,
            Kernel::Parzen if u <= 1.0 => 2.0 * (1.0 - u).powi(3),
            Kernel::Parzen => 0.0,
            Kernel::Uniform => f64::from(u8::from(u <= 1.0)),
        }
    }
}

/// Everything needed to reproduce a variance estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Kernel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_lag: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hex_width_km: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hex_anchor: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    /// Replicates redrawn because the resample could not be fit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub redrawn: Option<usize>,
    /// Most negative eigenvalue removed when projecting to PSD.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clipped_eigenvalue: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct VarianceEstimate {
    pub covariance: DMatrix<f64>,
    pub method: VarianceMethod,
    pub tuning: Tuning,
    pub warnings: Vec<String>,
    /// Replicate estimates, for the bootstrap methods.
    pub draws: Option<BootstrapDraws>,
}

impl VarianceEstimate {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Two-sided intervals at `level`: percentile intervals of the replicate
    /// estimates for bootstraps, Wald intervals around `psi` otherwise.
    pub fn confidence_intervals(&self, psi: &[f64], level: f64) -> Vec<(f64, f64)> {
        match &self.draws {
            Some(d) => (0..psi.len())
                .map(|c| percentile_interval(d.psi.iter().map(|r| r[c]), level))
                .collect(),
            None => wald_intervals(psi, &self.standard_errors(), level),
        }
    }
}

/// Normal critical value for a two-sided interval at `level`.
pub fn normal_critical(level: f64) -> f64 {
    let normal = Normal::standard();
    normal.inverse_cdf(0.5 + level / 2.0)
}

pub fn wald_intervals(est: &[f64], se: &[f64], level: f64) -> Vec<(f64, f64)> {
    let z = normal_critical(level);
    est.iter().zip(se).map(|(e, s)| (e - z * s, e + z * s)).collect()
}

/// Linear-interpolation sample quantile (the usual "type 7" rule).
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn percentile_interval(values: impl Iterator<Item = f64>, level: f64) -> (f64, f64) {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (quantile(&v, alpha), quantile(&v, 1.0 - alpha))
}

/// Sample covariance of the rows, with an `n - 1` denominator. Rows are
/// shifted by the first row first, so identical rows give exactly zero.
pub fn sample_covariance(rows: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    let b = rows.len();
    if b < 2 {
        return DMatrix::zeros(dim, dim);
    }
    let origin = DVector::from_column_slice(&rows[0]);
    let shifted: Vec<DVector<f64>> = rows.iter().map(|r| DVector::from_column_slice(r) - &origin).collect();
    let mean = shifted.iter().fold(DVector::zeros(dim), |acc, d| acc + d) / b as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for d in &shifted {
        let d = d - &mean;
        cov += &d * d.transpose();
    }
    symmetrize(cov / (b - 1) as f64)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `A^{-1}`, or the least-squares left inverse `(A'A)^{-1} A'` when `A` has
/// more rows than columns.
fn jacobian_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 || sv.min() <= 1e-10 * smax {
        return Err(Error::JacobianSingular);
    }
    if a.nrows() == a.ncols() {
        a.clone().try_inverse().ok_or(Error::JacobianSingular)
    } else {
        let ata = a.transpose() * a;
        let inv = ata.try_inverse().ok_or(Error::JacobianSingular)?;
        Ok(inv * a.transpose())
    }
}

/// Score sandwich with sampling units (clusters, or units under network
/// mapping) treated as independent: `V = (1/N) P_n{S_i S_i'}`,
/// `S_i = A^{-1} g_i(psi_hat)`.
pub fn sandwich_cluster(result: &EstimationResult) -> Result<VarianceEstimate> {
    let inv = jacobian_inverse(&result.jacobian)?;
    let n = result.n() as f64;
    let s = &result.scores * inv.transpose();
    let cov = s.transpose() * &s / (n * n);
    Ok(VarianceEstimate {
        covariance: symmetrize(cov),
        method: VarianceMethod::Sandwich,
        tuning: Tuning::default(),
        warnings: vec![],
        draws: None,
    })
}

/// HAC tuning; `None` picks the documented default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HacOptions {
    pub kernel: Kernel,
    pub bandwidth: Option<f64>,
    pub max_lag: Option<usize>,
}

/// Network HAC: kernel-weighted cross products of scores over graph-distance
/// rings, `Sigma = sum_s k(s/b) (1/n) sum_i sum_{j in ring(i,s)} g_i g_j'`,
/// `V = (1/n) A^{-1} Sigma A^{-T}`. `Sigma` is projected to PSD.
///
/// The default bandwidth is the mapping's dependence radius plus one; the
/// default maximum lag is the graph's ring cap.
pub fn network_hac(result: &EstimationResult, mapped: &MappedPanel, options: HacOptions) -> Result<VarianceEstimate> {
    if mapped.is_cluster_mode() {
        return Err(Error::StructureMissing("network HAC needs a network, not clusters".into()));
    }
    let graph = mapped
        .panel()
        .graph()
        .ok_or_else(|| Error::StructureMissing("network HAC needs a graph".into()))?;
    let n = result.n();
    if n != mapped.n() {
        return Err(Error::DimensionMismatch(format!("{n} score rows for {} sampling units", mapped.n())));
    }
    let bandwidth = options.bandwidth.unwrap_or((mapped.dependence_radius() + 1) as f64);
    if bandwidth.is_nan() || bandwidth <= 0.0 {
        return Err(Error::Config(format!("HAC bandwidth must be positive, got {bandwidth}")));
    }
    let max_lag = options.max_lag.unwrap_or_else(|| graph.ring_cap());
    // kernels vanish beyond u = 1
    let lag = max_lag.min(bandwidth.floor() as usize);

    let mut row_of = vec![usize::MAX; graph.len()];
    for i in 0..n {
        let u = mapped.source_row(i);
        if row_of[u] != usize::MAX {
            return Err(Error::Config("network HAC needs distinct sampling units".into()));
        }
        row_of[u] = i;
    }
    let q = result.scores.ncols();
    let g = &result.scores;
    let mut sigma = DMatrix::zeros(q, q);
    for i in 0..n {
        let gi = g.row(i).transpose();
        let rings = graph.rings_up_to(mapped.source_row(i), lag);
        for (s, ring) in rings.iter().enumerate() {
            let w = options.kernel.weight(s as f64 / bandwidth);
            if w == 0.0 {
                continue;
            }
            let mut sum = DVector::zeros(q);
            for &u in ring {
                let j = row_of[u];
                if j != usize::MAX {
                    sum += g.row(j).transpose();
                }
            }
            sigma += (&gi * sum.transpose()) * (w / n as f64);
        }
    }
    let (sigma, clipped) = project_psd(symmetrize(sigma));
    let mut warnings = vec![];
    if let Some(ev) = clipped {
        let msg = format!("HAC middle matrix was indefinite; clipped eigenvalues down to {ev:.3e}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let inv = jacobian_inverse(&result.jacobian)?;
    let cov = &inv * sigma * inv.transpose() / n as f64;
    Ok(VarianceEstimate {
        covariance: symmetrize(cov),
        method: VarianceMethod::NetworkHac,
        tuning: Tuning {
            kernel: Some(options.kernel),
            bandwidth: Some(bandwidth),
            max_lag: Some(max_lag),
            clipped_eigenvalue: clipped,
            ..Tuning::default()
        },
        warnings,
        draws: None,
    })
}

/// Clips negative eigenvalues to zero. Returns the most negative eigenvalue
/// when it exceeds rounding noise.
fn project_psd(m: DMatrix<f64>) -> (DMatrix<f64>, Option<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min >= -1e-12 * scale {
        return (m, None);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    (symmetrize(v * DMatrix::from_diagonal(&clipped) * v.transpose()), Some(min))
}

/// Variance method and tuning as configured by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum VarianceConfig {
    Sandwich,
    NetworkHac {
        #[serde(default)]
        kernel: Kernel,
        #[serde(default)]
        bandwidth: Option<f64>,
        #[serde(default)]
        max_lag: Option<usize>,
    },
    MovingBlock {
        block_length: usize,
        replicates: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    SpatialBlock {
        hex_width_km: f64,
        replicates: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl VarianceConfig {
    pub fn method(&self) -> VarianceMethod {
        match self {
            VarianceConfig::Sandwich => VarianceMethod::Sandwich,
            VarianceConfig::NetworkHac { .. } => VarianceMethod::NetworkHac,
            VarianceConfig::MovingBlock { .. } => VarianceMethod::MovingBlock,
            VarianceConfig::SpatialBlock { .. } => VarianceMethod::SpatialBlock,
        }
    }

    pub fn is_bootstrap(&self) -> bool {
        matches!(self, VarianceConfig::MovingBlock { .. } | VarianceConfig::SpatialBlock { .. })
    }
}

/// Dispatches to the configured estimator. Bootstraps use the configured seed
/// or else `default_seed`, and evaluate `estimands` in every replicate.
pub fn estimate_variance(
    variance: &VarianceConfig,
    result: &EstimationResult,
    mapped: &MappedPanel,
    model: &BlipModel,
    config: &EstimatorConfig,
    default_seed: u64,
    estimands: Option<&EstimandFn>,
) -> Result<VarianceEstimate> {
    match *variance {
        VarianceConfig::Sandwich => sandwich_cluster(result),
        VarianceConfig::NetworkHac {
            kernel,
            bandwidth,
            max_lag,
        } => network_hac(
            result,
            mapped,
            HacOptions {
                kernel,
                bandwidth,
                max_lag,
            },
        ),
        VarianceConfig::MovingBlock {
            block_length,
            replicates,
            seed,
        } => moving_block_bootstrap_with(
            mapped,
            model,
            config,
            block_length,
            replicates,
            seed.unwrap_or(default_seed),
            estimands,
        ),
        VarianceConfig::SpatialBlock {
            hex_width_km,
            replicates,
            seed,
        } => spatial_block_bootstrap_with(
            mapped,
            model,
            config,
            hex_width_km,
            replicates,
            seed.unwrap_or(default_seed),
            estimands,
        ),
    }
}

#[cfg(test)]
mod tests;
