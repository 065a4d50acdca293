//! Simulation designs: a line network, two-unit clusters, and a planar
//! county-like lattice.
//!
//! All three share the same skeleton. A binary confounder `U` shifts every
//! untreated potential outcome and the treatment probability
//! `base_rate + confounder_effect * U`. Exposure is absorbing and coded 1
//! only at initiation: `A_1 = (1 - A_0) * Bernoulli(..)`. Observed outcomes
//! add the true blips and fresh noise to the untreated potential outcomes.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blip::{BlipModel, FixedHistory};
use crate::error::{Error, Result};
use crate::exposure::{apply_mapping_shared, MappedPanel, MappingSpec};
use crate::graph::{grid_graph, line_graph};
use crate::panel::{ClusterMap, PanelDataset, Structure};
use crate::rng::{base_rng, Rng};

use super::models;

/// Noise standard deviation when `N(mu, 0.1)` is read as variance 0.1.
pub const SD_VARIANCE_READING: f64 = 0.316_227_766_016_837_94;
/// Noise standard deviation when `N(mu, 0.1)` is read as SD 0.1.
pub const SD_SD_READING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkDgpConfig {
    pub n: usize,
    pub seed: u64,
    pub psi: Vec<f64>,
    pub base_rate: f64,
    pub confounder_effect: f64,
    /// SD of the untreated potential outcomes around `U`.
    pub noise_sd: f64,
    /// SD of the extra noise on observed outcomes at times 1 and 2;
    /// `None` uses `noise_sd`.
    pub outcome_noise_sd: Option<f64>,
}

impl Default for NetworkDgpConfig {
    fn default() -> Self {
        NetworkDgpConfig {
            n: 5000,
            seed: 1,
            psi: models::NETWORK_PSI.to_vec(),
            base_rate: 0.3,
            confounder_effect: 0.2,
            noise_sd: SD_VARIANCE_READING,
            outcome_noise_sd: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterDgpConfig {
    pub n_clusters: usize,
    pub seed: u64,
    pub psi: Vec<f64>,
    pub base_rate: f64,
    pub confounder_effect: f64,
    /// SD of the untreated potential outcomes around `U`.
    pub noise_sd: f64,
    /// SD of the extra noise on observed outcomes at times 1 and 2;
    /// `None` uses `noise_sd`.
    pub outcome_noise_sd: Option<f64>,
}

impl Default for ClusterDgpConfig {
    fn default() -> Self {
        ClusterDgpConfig {
            n_clusters: 5000,
            seed: 1,
            psi: models::CLUSTER_PSI.to_vec(),
            base_rate: 0.3,
            confounder_effect: 0.2,
            noise_sd: SD_VARIANCE_READING,
            outcome_noise_sd: None,
        }
    }
}

/// Units on a `rows x cols` grid `spacing_km` apart, rook adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatticeDgpConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_km: f64,
    pub seed: u64,
    pub psi: Vec<f64>,
    pub base_rate: f64,
    pub confounder_effect: f64,
    /// SD of the untreated potential outcomes around `U`.
    pub noise_sd: f64,
    /// SD of the extra noise on observed outcomes at times 1 and 2;
    /// `None` uses `noise_sd`.
    pub outcome_noise_sd: Option<f64>,
}

impl Default for LatticeDgpConfig {
    fn default() -> Self {
        LatticeDgpConfig {
            rows: 40,
            cols: 50,
            spacing_km: 30.0,
            seed: 1,
            psi: models::COUNTY_PSI.to_vec(),
            base_rate: 0.3,
            confounder_effect: 0.2,
            noise_sd: SD_VARIANCE_READING,
            outcome_noise_sd: None,
        }
    }
}

fn check_common(psi: &[f64], want: usize, base: f64, effect: f64, sd: f64, extra: Option<f64>) -> Result<()> {
    if psi.len() != want {
        return Err(Error::Config(format!("expected {want} true parameters, got {}", psi.len())));
    }
    for p in [base, base + effect] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(format!("treatment probability {p} outside (0, 1)")));
        }
    }
    for s in [sd, extra.unwrap_or(0.0)] {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("noise sd {s} must be finite and nonnegative")));
        }
    }
    Ok(())
}

struct Draws {
    u: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
    /// Untreated potential outcomes at times 0..=2.
    y0: Vec<[f64; 3]>,
}

/// Confounder, exposures and untreated outcomes for `n` units where units
/// `i` and `i'` share a confounder when `group(i) == group(i')`.
fn draw_units(rng: &mut Rng, n: usize, groups: usize, group: impl Fn(usize) -> usize, base: f64, effect: f64, sd: f64) -> Draws {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let u: Vec<f64> = (0..groups).map(|_| f64::from(u8::from(coin.sample(rng)))).collect();
    let noise = Normal::new(0.0, sd).expect("valid sd");
    let mut draws = Draws {
        u: Vec::with_capacity(n),
        a0: Vec::with_capacity(n),
        a1: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
    };
    for i in 0..n {
        let ui = u[group(i)];
        let y0 = [ui + noise.sample(rng), ui + noise.sample(rng), ui + noise.sample(rng)];
        let prob = base + effect * ui;
        let a0 = f64::from(u8::from(rng.random_bool(prob)));
        let a1 = (1.0 - a0) * f64::from(u8::from(rng.random_bool(prob)));
        draws.u.push(ui);
        draws.a0.push(a0);
        draws.a1.push(a1);
        draws.y0.push(y0);
    }
    draws
}

/// Observed outcomes from untreated outcomes plus blips evaluated under
/// `model` at `psi`; `hist(i)` gives each unit's mapped history.
fn outcomes(
    rng: &mut Rng,
    draws: &Draws,
    model: &BlipModel,
    psi: &[f64],
    sd: f64,
    hist: impl Fn(usize) -> (FixedHistory, usize),
) -> Result<Vec<Vec<f64>>> {
    let noise = Normal::new(0.0, sd).expect("valid sd");
    (0..draws.y0.len())
        .map(|i| {
            let (h, j) = hist(i);
            let y = draws.y0[i];
            let y1 = y[1] + model.blip_value(psi, 0, 1, j, &h)? + noise.sample(rng);
            let y2 = y[2] + model.blip_value(psi, 0, 2, j, &h)? + model.blip_value(psi, 1, 2, j, &h)? + noise.sample(rng);
            Ok(vec![y[0], y1, y2])
        })
        .collect()
}

fn exposure_rows(draws: &Draws) -> Vec<Vec<f64>> {
    draws.a0.iter().zip(&draws.a1).map(|(&a0, &a1)| vec![a0, a1, 0.0]).collect()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn neighbor_max(nbrs: &[usize], a: &[f64]) -> f64 {
    nbrs.iter().map(|&v| a[v]).fold(0.0, f64::max)
}

/// Line network with neighbor-max spillover.
pub fn gen_network_dgp(config: &NetworkDgpConfig) -> Result<MappedPanel> {
    check_common(&config.psi, 13, config.base_rate, config.confounder_effect, config.noise_sd, config.outcome_noise_sd)?;
    if config.n < 3 {
        return Err(Error::InvalidSize(format!("network design needs n >= 3, got {}", config.n)));
    }
    let graph = line_graph(config.n)?;
    let model = BlipModel::parse(models::NETWORK_MODEL)?;
    let mut rng = base_rng(config.seed);
    let draws = draw_units(&mut rng, config.n, config.n, |i| i, config.base_rate, config.confounder_effect, config.noise_sd);
    let outcome = outcomes(&mut rng, &draws, &model, &config.psi, config.outcome_noise_sd.unwrap_or(config.noise_sd), |i| {
        let nbrs = graph.neighbors(i);
        let h = [neighbor_max(nbrs, &draws.a0), neighbor_max(nbrs, &draws.a1)];
        (FixedHistory::network(&[draws.a0[i], draws.a1[i]], &h), 0)
    })?;
    let panel = PanelDataset::new(ids(config.n), exposure_rows(&draws), outcome, vec![], None)?
        .with_structure(Structure::Network(graph))?;
    apply_mapping_shared(Arc::new(panel), &MappingSpec::NeighborMax)
}

/// Two-unit clusters; blips are symmetric across members.
pub fn gen_cluster_dgp(config: &ClusterDgpConfig) -> Result<MappedPanel> {
    check_common(&config.psi, 7, config.base_rate, config.confounder_effect, config.noise_sd, config.outcome_noise_sd)?;
    if config.n_clusters < 1 {
        return Err(Error::InvalidSize("cluster design needs at least one cluster".into()));
    }
    let n = 2 * config.n_clusters;
    let model = BlipModel::parse(models::CLUSTER_MODEL)?;
    let mut rng = base_rng(config.seed);
    let draws = draw_units(&mut rng, n, config.n_clusters, |i| i / 2, config.base_rate, config.confounder_effect, config.noise_sd);
    let outcome = outcomes(&mut rng, &draws, &model, &config.psi, config.outcome_noise_sd.unwrap_or(config.noise_sd), |i| {
        let base = i - i % 2;
        let h = vec![
            vec![draws.a0[base], draws.a0[base + 1]],
            vec![draws.a1[base], draws.a1[base + 1]],
        ];
        let hist = FixedHistory {
            a: vec![draws.a0[i], draws.a1[i]],
            h,
            l: vec![],
        };
        (hist, i % 2)
    })?;
    let panel = PanelDataset::new(ids(n), exposure_rows(&draws), outcome, vec![], None)?
        .with_structure(Structure::Cluster(ClusterMap::contiguous(n, 2)?))?;
    apply_mapping_shared(Arc::new(panel), &MappingSpec::IdentityCluster)
}

/// Planar lattice with coordinates in km and neighbor-max spillover.
pub fn gen_lattice_dgp(config: &LatticeDgpConfig) -> Result<MappedPanel> {
    check_common(&config.psi, 11, config.base_rate, config.confounder_effect, config.noise_sd, config.outcome_noise_sd)?;
    let n = config.rows * config.cols;
    let graph = grid_graph(config.rows, config.cols)?;
    let model = BlipModel::parse(models::COUNTY_MODEL)?;
    let mut rng = base_rng(config.seed);
    let draws = draw_units(&mut rng, n, n, |i| i, config.base_rate, config.confounder_effect, config.noise_sd);
    let outcome = outcomes(&mut rng, &draws, &model, &config.psi, config.outcome_noise_sd.unwrap_or(config.noise_sd), |i| {
        let nbrs = graph.neighbors(i);
        let h = [neighbor_max(nbrs, &draws.a0), neighbor_max(nbrs, &draws.a1)];
        (FixedHistory::network(&[draws.a0[i], draws.a1[i]], &h), 0)
    })?;
    let coords = (0..n)
        .map(|i| [(i % config.cols) as f64 * config.spacing_km, (i / config.cols) as f64 * config.spacing_km])
        .collect();
    let panel = PanelDataset::new(ids(n), exposure_rows(&draws), outcome, vec![], None)?
        .with_structure(Structure::Network(graph))?
        .with_coordinates(coords)?;
    apply_mapping_shared(Arc::new(panel), &MappingSpec::NeighborMax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn network_marginals() {
        let cfg = NetworkDgpConfig {
            n: 100_000,
            seed: 3,
            ..NetworkDgpConfig::default()
        };
        let mapped = gen_network_dgp(&cfg).unwrap();
        let panel = mapped.panel();
        let n = panel.n_units() as f64;
        let pa0 = (0..panel.n_units()).map(|i| panel.exposure(i, 0)).sum::<f64>() / n;
        let ey0 = (0..panel.n_units()).map(|i| panel.outcome(i, 0)).sum::<f64>() / n;
        assert!((pa0 - 0.4).abs() < 0.01, "P(A0=1) = {pa0}");
        assert!((ey0 - 0.5).abs() < 0.01, "E[Y0] = {ey0}");
    }

    #[test]
    fn zero_psi_outcomes_centered() {
        let cfg = NetworkDgpConfig {
            n: 20_000,
            psi: vec![0.0; 13],
            ..NetworkDgpConfig::default()
        };
        let mapped = gen_network_dgp(&cfg).unwrap();
        let panel = mapped.panel();
        for t in 0..3 {
            let mean = (0..panel.n_units()).map(|i| panel.outcome(i, t)).sum::<f64>() / 20_000.0;
            assert!((mean - 0.5).abs() < 0.02, "E[Y{t}] = {mean}");
        }
        let cfg = ClusterDgpConfig {
            n_clusters: 10_000,
            psi: vec![0.0; 7],
            ..ClusterDgpConfig::default()
        };
        let mapped = gen_cluster_dgp(&cfg).unwrap();
        let panel = mapped.panel();
        for t in 0..3 {
            let mean = (0..panel.n_units()).map(|i| panel.outcome(i, t)).sum::<f64>() / 20_000.0;
            assert!((mean - 0.5).abs() < 0.02, "E[Y{t}] = {mean}");
        }
    }

    #[test]
    fn exposure_is_coded_at_initiation() {
        let mapped = gen_network_dgp(&NetworkDgpConfig {
            n: 2000,
            ..NetworkDgpConfig::default()
        })
        .unwrap();
        let panel = mapped.panel();
        assert!((0..2000).all(|i| panel.exposure(i, 0) * panel.exposure(i, 1) == 0.0));
        assert_eq!(mapped.h(0, 0), &[panel.exposure(1, 0)]);
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = ClusterDgpConfig {
            n_clusters: 50,
            ..ClusterDgpConfig::default()
        };
        let a = gen_cluster_dgp(&cfg).unwrap();
        let b = gen_cluster_dgp(&cfg).unwrap();
        assert_eq!(a.panel(), b.panel());
        assert!(a.is_cluster_mode());
        assert_eq!(a.n(), 50);
    }

    #[test]
    fn lattice_has_coordinates() {
        let mapped = gen_lattice_dgp(&LatticeDgpConfig {
            rows: 4,
            cols: 5,
            ..LatticeDgpConfig::default()
        })
        .unwrap();
        let coords = mapped.panel().coordinates().unwrap();
        assert_eq!(coords[7], [60.0, 30.0]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = NetworkDgpConfig {
            n: 2,
            ..NetworkDgpConfig::default()
        };
        assert_eq!(gen_network_dgp(&bad).unwrap_err().code(), "InvalidSize");
        let bad = NetworkDgpConfig {
            base_rate: 0.9,
            ..NetworkDgpConfig::default()
        };
        assert_eq!(gen_network_dgp(&bad).unwrap_err().code(), "ConfigError");
    }
}
