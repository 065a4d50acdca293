//! Exposure mappings and exposure recodings.
//!
//! A mapping reduces the population exposure vector at time `t` to a pair
//! `(a, h)` per unit: the unit's own exposure and a fixed-dimension summary
//! of the exposures that spill over onto it.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::panel::PanelDataset;

/// User-supplied spillover summary: `(unit, time, population exposure at time,
/// graph) -> h`. Must be deterministic and return exactly `dim` values.
pub type CustomMapFn =
    dyn Fn(usize, usize, &[f64], Option<&NetworkGraph>) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
pub struct CustomMapping {
    pub name: String,
    pub dim: usize,
    pub map: Arc<CustomMapFn>,
}

impl fmt::Debug for CustomMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomMapping")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum MappingSpec {
    /// Own exposure only; no spillover summary.
    Direct,
    /// `h` = largest neighbor exposure (0 without neighbors).
    NeighborMax,
    /// `h` = sum of neighbor exposures.
    NeighborSum,
    /// `h` = sum of neighbor exposures weighted by edge weight.
    WeightedSum,
    /// `h` = the whole cluster's exposure vector, so `p` equals cluster size.
    /// Estimation then treats clusters as the sampling units.
    IdentityCluster,
    Custom(CustomMapping),
}

impl MappingSpec {
    pub fn name(&self) -> &str {
        match self {
            MappingSpec::Direct => "direct",
            MappingSpec::NeighborMax => "neighbor_max",
            MappingSpec::NeighborSum => "neighbor_sum",
            MappingSpec::WeightedSum => "weighted_sum",
            MappingSpec::IdentityCluster => "identity_cluster",
            MappingSpec::Custom(c) => &c.name,
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "direct" => MappingSpec::Direct,
            "neighbor_max" => MappingSpec::NeighborMax,
            "neighbor_sum" => MappingSpec::NeighborSum,
            "weighted_sum" => MappingSpec::WeightedSum,
            "identity_cluster" => MappingSpec::IdentityCluster,
            other => return Err(Error::Config(format!("unknown exposure mapping `{other}`"))),
        })
    }

    /// Graph distance over which one unit's exposure reaches another's `h`.
    pub fn dependence_radius(&self) -> usize {
        match self {
            MappingSpec::Direct | MappingSpec::IdentityCluster => 0,
            _ => 1,
        }
    }
}

/// One unit's mapped exposure at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedExposure {
    pub a: f64,
    pub h: Vec<f64>,
}

impl MappedExposure {
    pub fn is_zero(&self) -> bool {
        self.a == 0.0 && self.h.iter().all(|&x| x == 0.0)
    }
}

/// A panel together with mapped exposures `D[u][t] = (a, h)` for every panel
/// unit `u` and exposure time `t in 0..tau`, grouped into sampling units
/// (single units, or whole clusters under [`MappingSpec::IdentityCluster`]).
///
/// Resampling keeps the mapped exposures computed on the original population
/// and only changes which sampling units are present.
#[derive(Debug, Clone)]
pub struct MappedPanel {
    panel: Arc<PanelDataset>,
    mapping: String,
    h_dim: usize,
    direct: Arc<Vec<f64>>,
    spill: Arc<Vec<f64>>,
    groups: Arc<Vec<Vec<usize>>>,
    rows: Vec<usize>,
    cluster_mode: bool,
    radius: usize,
}

impl MappedPanel {
    pub fn panel(&self) -> &PanelDataset {
        &self.panel
    }

    pub fn shared_panel(&self) -> Arc<PanelDataset> {
        Arc::clone(&self.panel)
    }

    pub fn mapping_name(&self) -> &str {
        &self.mapping
    }

    /// Dimension `p` of the spillover summary.
    pub fn h_dim(&self) -> usize {
        self.h_dim
    }

    pub fn tau(&self) -> usize {
        self.panel.tau()
    }

    /// Graph distance over which exposures enter another unit's mapping.
    pub fn dependence_radius(&self) -> usize {
        self.radius
    }

    pub fn is_cluster_mode(&self) -> bool {
        self.cluster_mode
    }

    /// Number of sampling units present (with multiplicity after resampling).
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Outputs per sampling unit: cluster size, or 1.
    pub fn members_per_unit(&self) -> usize {
        self.groups[0].len()
    }

    /// Panel units making up sampling unit `i`, in member order.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.groups[self.rows[i]]
    }

    /// Index of sampling unit `i` in the un-resampled population.
    pub fn source_row(&self, i: usize) -> usize {
        self.rows[i]
    }

    /// Number of sampling units in the un-resampled population.
    pub fn population_size(&self) -> usize {
        self.groups.len()
    }

    pub fn a(&self, unit: usize, t: usize) -> f64 {
        self.direct[unit * self.tau() + t]
    }

    pub fn h(&self, unit: usize, t: usize) -> &[f64] {
        let start = (unit * self.tau() + t) * self.h_dim;
        &self.spill[start..start + self.h_dim]
    }

    pub fn mapped(&self, unit: usize, t: usize) -> MappedExposure {
        MappedExposure {
            a: self.a(unit, t),
            h: self.h(unit, t).to_vec(),
        }
    }

    /// True when every member of sampling unit `i` has zero mapped exposure.
    pub fn is_zero_exposure(&self, i: usize, t: usize) -> bool {
        self.members(i)
            .iter()
            .all(|&u| self.a(u, t) == 0.0 && self.h(u, t).iter().all(|&x| x == 0.0))
    }

    /// The population restricted to (or resampled as) `rows`, given as
    /// indices into the current sampling units.
    pub fn select(&self, rows: &[usize]) -> MappedPanel {
        MappedPanel {
            rows: rows.iter().map(|&r| self.rows[r]).collect(),
            ..self.clone()
        }
    }
}

/// Computes `D[u][t]` for all units and exposure times.
pub fn apply_mapping(panel: &PanelDataset, spec: &MappingSpec) -> Result<MappedPanel> {
    apply_mapping_shared(Arc::new(panel.clone()), spec)
}

pub fn apply_mapping_shared(panel: Arc<PanelDataset>, spec: &MappingSpec) -> Result<MappedPanel> {
    let n = panel.n_units();
    let tau = panel.tau();
    let mut direct = Vec::with_capacity(n * tau);
    for u in 0..n {
        direct.extend_from_slice(&panel.exposure_row(u)[..tau]);
    }
    let singletons = || (0..n).map(|u| vec![u]).collect::<Vec<_>>();
    let need_graph = || {
        panel.graph().ok_or_else(|| {
            Error::StructureMissing(format!("mapping `{}` needs a network graph", spec.name()))
        })
    };

    let (h_dim, spill, groups, cluster_mode) = match spec {
        MappingSpec::Direct => (0, Vec::new(), singletons(), false),
        MappingSpec::NeighborMax | MappingSpec::NeighborSum | MappingSpec::WeightedSum => {
            let g = need_graph()?;
            let mut spill = vec![0.0; n * tau];
            for u in 0..n {
                for t in 0..tau {
                    let nbrs = g.neighbors(u);
                    let vals = nbrs.iter().map(|&v| panel.exposure(v, t));
                    spill[u * tau + t] = match spec {
                        MappingSpec::NeighborMax => vals.fold(0.0, f64::max),
                        MappingSpec::NeighborSum => vals.sum(),
                        _ => vals.zip(g.edge_weights(u)).map(|(x, w)| x * w).sum(),
                    };
                }
            }
            (1, spill, singletons(), false)
        }
        MappingSpec::IdentityCluster => {
            let clusters = panel.clusters().ok_or_else(|| {
                Error::StructureMissing("mapping `identity_cluster` needs a cluster map".into())
            })?;
            let j = clusters.cluster_size();
            let mut spill = vec![0.0; n * tau * j];
            for u in 0..n {
                let members = clusters.members(clusters.cluster_of(u));
                for t in 0..tau {
                    for (r, &v) in members.iter().enumerate() {
                        spill[(u * tau + t) * j + r] = panel.exposure(v, t);
                    }
                }
            }
            let groups = (0..clusters.len()).map(|c| clusters.members(c).to_vec()).collect();
            (j, spill, groups, true)
        }
        MappingSpec::Custom(custom) => {
            let mut spill = Vec::with_capacity(n * tau * custom.dim);
            let by_time: Vec<Vec<f64>> = (0..tau).map(|t| panel.exposure_at(t)).collect();
            for u in 0..n {
                for (t, pop) in by_time.iter().enumerate() {
                    let h = (custom.map)(u, t, pop, panel.graph());
                    if h.len() != custom.dim {
                        return Err(Error::DimensionMismatch(format!(
                            "custom mapping `{}` returned {} values, declared {}",
                            custom.name,
                            h.len(),
                            custom.dim
                        )));
                    }
                    spill.extend(h);
                }
            }
            (custom.dim, spill, singletons(), false)
        }
    };
    let rows = (0..groups.len()).collect();
    Ok(MappedPanel {
        panel,
        mapping: spec.name().to_string(),
        h_dim,
        direct: Arc::new(direct),
        spill: Arc::new(spill),
        groups: Arc::new(groups),
        rows,
        cluster_mode,
        radius: spec.dependence_radius(),
    })
}

/// Codes an absorbing binary exposure as 1 only at the time of first
/// exposure. Trajectories already in that form pass through unchanged.
pub fn recode_absorbing(panel: &PanelDataset) -> Result<PanelDataset> {
    let mut out = Vec::with_capacity(panel.n_units() * panel.n_times());
    for u in 0..panel.n_units() {
        let row = panel.exposure_row(u);
        if let Some(t) = row.iter().position(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Schema(format!(
                "unit `{}` has non-binary exposure {} at time {t}",
                panel.units()[u],
                row[t]
            )));
        }
        let ones = row.iter().filter(|&&x| x == 1.0).count();
        let first = row.iter().position(|&x| x == 1.0);
        if ones > 1 {
            if let Some(t) = (1..row.len()).find(|&t| row[t - 1] == 1.0 && row[t] == 0.0) {
                return Err(Error::NotAbsorbing {
                    unit: panel.units()[u].clone(),
                    time: t,
                });
            }
        }
        out.extend((0..row.len()).map(|t| if Some(t) == first { 1.0 } else { 0.0 }));
    }
    Ok(panel.replace_exposure(out))
}

/// Replaces exposure levels by their changes `A_m - A_{m-1}` (with
/// `A_{-1} = 0`) and appends the prior level `A_{m-1}` as a covariate.
pub fn recode_increments(panel: &PanelDataset) -> PanelDataset {
    let mut inc = Vec::with_capacity(panel.n_units() * panel.n_times());
    let mut lag = Vec::with_capacity(inc.capacity());
    for u in 0..panel.n_units() {
        let mut prev = 0.0;
        for &x in panel.exposure_row(u) {
            inc.push(x - prev);
            lag.push(prev);
            prev = x;
        }
    }
    panel
        .replace_exposure(inc)
        .append_covariate("exposure_lag_level".into(), &lag)
}

/// Mapped exposure and covariate history of panel unit `unit` through `m`.
pub fn mapping_histories(
    mapped: &MappedPanel,
    unit: usize,
    m: usize,
) -> Result<(Vec<MappedExposure>, Vec<Vec<f64>>)> {
    if m >= mapped.tau() {
        return Err(Error::Index(format!(
            "time {m} outside exposure times 0..{}",
            mapped.tau()
        )));
    }
    if unit >= mapped.panel().n_units() {
        return Err(Error::Index(format!("unit {unit} out of range")));
    }
    let d = (0..=m).map(|t| mapped.mapped(unit, t)).collect();
    let l = (0..=m)
        .map(|t| mapped.panel().covariates(unit, t).to_vec())
        .collect();
    Ok((d, l))
}
