//! Balanced long-format panel data with an optional interference structure.
//!
//! Units are opaque string ids mapped to dense indices in order of first
//! appearance in the source. Times are the consecutive integers `0..=tau`.
//! Exposures are stored for every time but only `0..tau` enter estimation;
//! outcomes are used at every time.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;

/// Partition of units into equally sized clusters. Member order within a
/// cluster is significant: vector blips are indexed by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    names: Vec<String>,
    cluster_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ClusterMap {
    pub fn new(names: Vec<String>, members: Vec<Vec<usize>>, n_units: usize) -> Result<Self> {
        if names.len() != members.len() {
            return Err(Error::Schema("cluster names and member lists differ in length".into()));
        }
        let mut cluster_of = vec![usize::MAX; n_units];
        for (c, list) in members.iter().enumerate() {
            for &u in list {
                if u >= n_units {
                    return Err(Error::UnknownUnit(format!("{u}")));
                }
                if cluster_of[u] != usize::MAX {
                    return Err(Error::Schema(format!("unit {u} belongs to two clusters")));
                }
                cluster_of[u] = c;
            }
        }
        if let Some(u) = cluster_of.iter().position(|&c| c == usize::MAX) {
            return Err(Error::Schema(format!("unit {u} is not in any cluster")));
        }
        let size = members.first().map_or(0, Vec::len);
        if size == 0 || members.iter().any(|m| m.len() != size) {
            return Err(Error::Schema("all clusters must have the same positive size".into()));
        }
        Ok(ClusterMap {
            names,
            cluster_of,
            members,
        })
    }

    /// Consecutive runs of `size` units form each cluster.
    pub fn contiguous(n_units: usize, size: usize) -> Result<Self> {
        if size == 0 || !n_units.is_multiple_of(size) {
            return Err(Error::InvalidSize(format!(
                "{n_units} units do not split into clusters of {size}"
            )));
        }
        let members: Vec<Vec<usize>> = (0..n_units / size)
            .map(|c| (c * size..(c + 1) * size).collect())
            .collect();
        let names = (0..members.len()).map(|c| c.to_string()).collect();
        ClusterMap::new(names, members, n_units)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn cluster_size(&self) -> usize {
        self.members[0].len()
    }

    pub fn cluster_of(&self, unit: usize) -> usize {
        self.cluster_of[unit]
    }

    pub fn members(&self, cluster: usize) -> &[usize] {
        &self.members[cluster]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum Structure {
    #[default]
    None,
    Cluster(ClusterMap),
    Network(NetworkGraph),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    units: Vec<String>,
    n_times: usize,
    exposure: Vec<f64>,
    outcome: Vec<f64>,
    covariate_names: Vec<String>,
    covariates: Vec<f64>,
    structure: Structure,
    coordinates: Option<Vec<[f64; 2]>>,
}

impl PanelDataset {
    /// `exposure[i][t]`, `outcome[i][t]` and `covariates[i][t][c]` for every
    /// unit `i` and time `t in 0..n_times`.
    pub fn new(
        units: Vec<String>,
        exposure: Vec<Vec<f64>>,
        outcome: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
        covariates: Option<Vec<Vec<Vec<f64>>>>,
    ) -> Result<Self> {
        let n = units.len();
        if n == 0 {
            return Err(Error::InvalidSize("panel has no units".into()));
        }
        let n_times = exposure.first().map_or(0, Vec::len);
        if n_times < 2 {
            return Err(Error::InvalidSize("panel needs at least two time points".into()));
        }
        if exposure.len() != n || outcome.len() != n {
            return Err(Error::DimensionMismatch("exposure/outcome rows != units".into()));
        }
        if exposure.iter().chain(outcome.iter()).any(|r| r.len() != n_times) {
            return Err(Error::UnbalancedPanel("every unit needs every time".into()));
        }
        let q = covariate_names.len();
        let mut flat_cov = Vec::with_capacity(n * n_times * q);
        match covariates {
            Some(cov) => {
                if cov.len() != n {
                    return Err(Error::DimensionMismatch("covariate rows != units".into()));
                }
                for row in &cov {
                    if row.len() != n_times || row.iter().any(|l| l.len() != q) {
                        return Err(Error::DimensionMismatch("covariate shape".into()));
                    }
                    for l in row {
                        flat_cov.extend_from_slice(l);
                    }
                }
            }
            None if q == 0 => {}
            None => return Err(Error::DimensionMismatch("covariates missing".into())),
        }
        Ok(PanelDataset {
            units,
            n_times,
            exposure: exposure.concat(),
            outcome: outcome.concat(),
            covariate_names,
            covariates: flat_cov,
            structure: Structure::None,
            coordinates: None,
        })
    }

    pub fn with_structure(mut self, structure: Structure) -> Result<Self> {
        match &structure {
            Structure::Network(g) if g.len() != self.n_units() => {
                return Err(Error::DimensionMismatch(format!(
                    "graph has {} nodes, panel has {} units",
                    g.len(),
                    self.n_units()
                )))
            }
            Structure::Cluster(c) if c.cluster_of.len() != self.n_units() => {
                return Err(Error::DimensionMismatch("cluster map size".into()))
            }
            _ => {}
        }
        self.structure = structure;
        Ok(self)
    }

    pub fn with_coordinates(mut self, coordinates: Vec<[f64; 2]>) -> Result<Self> {
        if coordinates.len() != self.n_units() {
            return Err(Error::DimensionMismatch("coordinates per unit".into()));
        }
        self.coordinates = Some(coordinates);
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    /// Last time index; exposures enter at `0..tau`, outcomes at `0..=tau`.
    pub fn tau(&self) -> usize {
        self.n_times - 1
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn exposure(&self, i: usize, t: usize) -> f64 {
        self.exposure[i * self.n_times + t]
    }

    pub fn outcome(&self, i: usize, t: usize) -> f64 {
        self.outcome[i * self.n_times + t]
    }

    pub fn covariates(&self, i: usize, t: usize) -> &[f64] {
        let q = self.n_covariates();
        let start = (i * self.n_times + t) * q;
        &self.covariates[start..start + q]
    }

    pub fn exposure_row(&self, i: usize) -> &[f64] {
        &self.exposure[i * self.n_times..(i + 1) * self.n_times]
    }

    pub fn outcome_row(&self, i: usize) -> &[f64] {
        &self.outcome[i * self.n_times..(i + 1) * self.n_times]
    }

    /// Population exposure vector at time `t`.
    pub fn exposure_at(&self, t: usize) -> Vec<f64> {
        (0..self.n_units()).map(|i| self.exposure(i, t)).collect()
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn graph(&self) -> Option<&NetworkGraph> {
        match &self.structure {
            Structure::Network(g) => Some(g),
            _ => None,
        }
    }

    pub fn clusters(&self) -> Option<&ClusterMap> {
        match &self.structure {
            Structure::Cluster(c) => Some(c),
            _ => None,
        }
    }

    pub fn coordinates(&self) -> Option<&[[f64; 2]]> {
        self.coordinates.as_deref()
    }

    /// Same panel with exposures replaced; `exposure[i][t]` layout.
    pub(crate) fn replace_exposure(&self, exposure: Vec<f64>) -> Self {
        debug_assert_eq!(exposure.len(), self.exposure.len());
        PanelDataset {
            exposure,
            ..self.clone()
        }
    }

    pub(crate) fn append_covariate(&self, name: String, values: &[f64]) -> Self {
        let q = self.n_covariates();
        let rows = self.n_units() * self.n_times;
        let mut cov = Vec::with_capacity(rows * (q + 1));
        for (r, v) in values.iter().enumerate().take(rows) {
            cov.extend_from_slice(&self.covariates[r * q..(r + 1) * q]);
            cov.push(*v);
        }
        let mut names = self.covariate_names.clone();
        names.push(name);
        PanelDataset {
            covariate_names: names,
            covariates: cov,
            ..self.clone()
        }
    }
}

/// Declares which columns of a delimited panel file play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSchema {
    pub unit: String,
    pub time: String,
    pub exposure: String,
    pub outcome: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub x: Option<String>,
    #[serde(default)]
    pub y: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Permitted exposure values; unrestricted when absent.
    #[serde(default)]
    pub exposure_alphabet: Option<Vec<f64>>,
}

fn default_delimiter() -> char {
    ','
}

impl PanelSchema {
    pub fn new(unit: &str, time: &str, exposure: &str, outcome: &str) -> Self {
        PanelSchema {
            unit: unit.into(),
            time: time.into(),
            exposure: exposure.into(),
            outcome: outcome.into(),
            covariates: Vec::new(),
            cluster: None,
            x: None,
            y: None,
            delimiter: ',',
            exposure_alphabet: None,
        }
    }
}

struct Row {
    exposure: f64,
    outcome: f64,
    covariates: Vec<f64>,
    cluster: Option<String>,
    coord: Option<[f64; 2]>,
}

/// Parses a delimited panel with a header row into a balanced panel.
pub fn load_panel<R: Read>(source: R, schema: &PanelSchema) -> Result<PanelDataset> {
    let delim = u8::try_from(schema.delimiter)
        .map_err(|_| Error::Schema("delimiter must be a single-byte character".into()))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delim)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Io(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")))
    };
    let unit_col = col(&schema.unit)?;
    let time_col = col(&schema.time)?;
    let exp_col = col(&schema.exposure)?;
    let out_col = col(&schema.outcome)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    let cluster_col = schema.cluster.as_deref().map(col).transpose()?;
    let coord_cols = match (&schema.x, &schema.y) {
        (Some(x), Some(y)) => Some((col(x)?, col(y)?)),
        (None, None) => None,
        _ => return Err(Error::Schema("coordinates need both x and y columns".into())),
    };

    let mut unit_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut units: Vec<String> = Vec::new();
    let mut rows: Vec<BTreeMap<usize, Row>> = Vec::new();

    for (r, record) in reader.records().enumerate() {
        let row_no = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row: row_no,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |c: usize| -> Result<&str> {
            let v = record.get(c).unwrap_or("");
            if v.is_empty() {
                Err(Error::Parse {
                    row: row_no,
                    column: headers[c].to_string(),
                    message: "missing cell".into(),
                })
            } else {
                Ok(v)
            }
        };
        let num = |c: usize| -> Result<f64> {
            let v = cell(c)?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Parse {
                    row: row_no,
                    column: headers[c].to_string(),
                    message: format!("`{v}` is not a finite number"),
                })
        };
        let unit = cell(unit_col)?.to_string();
        let time_str = cell(time_col)?;
        let time = time_str.parse::<usize>().map_err(|_| Error::Parse {
            row: row_no,
            column: headers[time_col].to_string(),
            message: format!("`{time_str}` is not a non-negative integer time"),
        })?;
        let exposure = num(exp_col)?;
        if let Some(alphabet) = &schema.exposure_alphabet {
            if !alphabet.contains(&exposure) {
                return Err(Error::Parse {
                    row: row_no,
                    column: headers[exp_col].to_string(),
                    message: format!("exposure {exposure} outside declared alphabet"),
                });
            }
        }
        let outcome = num(out_col)?;
        let covariates = cov_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let cluster = cluster_col.map(|c| cell(c).map(str::to_string)).transpose()?;
        let coord = coord_cols
            .map(|(cx, cy)| Ok::<_, Error>([num(cx)?, num(cy)?]))
            .transpose()?;

        let idx = *unit_index.entry(unit.clone()).or_insert_with(|| {
            units.push(unit.clone());
            rows.push(BTreeMap::new());
            units.len() - 1
        });
        let row = Row {
            exposure,
            outcome,
            covariates,
            cluster,
            coord,
        };
        if rows[idx].insert(time, row).is_some() {
            return Err(Error::UnbalancedPanel(format!(
                "unit `{unit}` has two rows for time {time}"
            )));
        }
    }
    if units.is_empty() {
        return Err(Error::UnbalancedPanel("panel has no rows".into()));
    }

    let max_time = rows
        .iter()
        .filter_map(|r| r.keys().next_back())
        .max()
        .copied()
        .unwrap_or(0);
    let n_times = max_time + 1;
    for (u, r) in units.iter().zip(&rows) {
        if let Some(t) = (0..n_times).find(|t| !r.contains_key(t)) {
            return Err(Error::UnbalancedPanel(format!("unit `{u}` is missing time {t}")));
        }
    }

    let exposure = rows
        .iter()
        .map(|r| r.values().map(|x| x.exposure).collect())
        .collect();
    let outcome = rows
        .iter()
        .map(|r| r.values().map(|x| x.outcome).collect())
        .collect();
    let covariates = rows
        .iter()
        .map(|r| r.values().map(|x| x.covariates.clone()).collect())
        .collect();
    let mut panel = PanelDataset::new(
        units.clone(),
        exposure,
        outcome,
        schema.covariates.clone(),
        Some(covariates),
    )?;

    if coord_cols.is_some() {
        let mut coords = Vec::with_capacity(units.len());
        for (u, r) in units.iter().zip(&rows) {
            let first = r.values().next().and_then(|x| x.coord).unwrap_or([0.0; 2]);
            if r.values().any(|x| x.coord != Some(first)) {
                return Err(Error::Schema(format!("unit `{u}` has time-varying coordinates")));
            }
            coords.push(first);
        }
        panel = panel.with_coordinates(coords)?;
    }

    if cluster_col.is_some() {
        let mut names: Vec<String> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (u, r) in units.iter().zip(&rows) {
            let first = r.values().next().and_then(|x| x.cluster.clone()).unwrap_or_default();
            if r.values().any(|x| x.cluster.as_deref() != Some(first.as_str())) {
                return Err(Error::Schema(format!("unit `{u}` changes cluster over time")));
            }
            let c = *index.entry(first.clone()).or_insert_with(|| {
                names.push(first.clone());
                members.push(Vec::new());
                names.len() - 1
            });
            members[c].push(unit_index[u]);
        }
        let map = ClusterMap::new(names, members, units.len())?;
        panel = panel.with_structure(Structure::Cluster(map))?;
    }
    Ok(panel)
}

/// Serializes a panel in the layout `load_panel` reads with the same schema.
/// Values use the shortest representation that parses back exactly.
pub fn write_panel(panel: &PanelDataset, schema: &PanelSchema) -> Result<String> {
    let delim = u8::try_from(schema.delimiter)
        .map_err(|_| Error::Schema("delimiter must be a single-byte character".into()))?;
    let mut writer = csv::WriterBuilder::new().delimiter(delim).from_writer(Vec::new());
    let mut header = vec![
        schema.unit.clone(),
        schema.time.clone(),
        schema.exposure.clone(),
        schema.outcome.clone(),
    ];
    header.extend(schema.covariates.iter().cloned());
    let clusters = panel.clusters();
    if let (Some(c), Some(_)) = (&schema.cluster, clusters) {
        header.push(c.clone());
    }
    let coords = panel.coordinates();
    if let (Some(x), Some(y), Some(_)) = (&schema.x, &schema.y, coords) {
        header.push(x.clone());
        header.push(y.clone());
    }
    let io = |e: csv::Error| Error::Io(e.to_string());
    writer.write_record(&header).map_err(io)?;
    for i in 0..panel.n_units() {
        for t in 0..panel.n_times() {
            let mut rec = vec![
                panel.units[i].clone(),
                t.to_string(),
                panel.exposure(i, t).to_string(),
                panel.outcome(i, t).to_string(),
            ];
            rec.extend(panel.covariates(i, t).iter().map(f64::to_string));
            if let (Some(_), Some(c)) = (&schema.cluster, clusters) {
                rec.push(c.names()[c.cluster_of(i)].clone());
            }
            if let (Some(_), Some(_), Some(xy)) = (&schema.x, &schema.y, coords) {
                rec.push(xy[i][0].to_string());
                rec.push(xy[i][1].to_string());
            }
            writer.write_record(&rec).map_err(io)?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub code: String,
    pub message: String,
    pub location: String,
}

/// Outcome of checking a loaded panel; accepted iff `errors` is empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_accepted(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn error(&mut self, code: &str, message: impl Into<String>, location: impl Into<String>) {
        self.errors.push(Issue {
            code: code.into(),
            message: message.into(),
            location: location.into(),
        });
    }

    pub fn warn(&mut self, code: &str, message: impl Into<String>, location: impl Into<String>) {
        self.warnings.push(Issue {
            code: code.into(),
            message: message.into(),
            location: location.into(),
        });
    }
}

/// Structural checks beyond what loading enforces.
pub fn validate_panel(panel: &PanelDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let non_finite = panel
        .exposure
        .iter()
        .chain(&panel.outcome)
        .chain(&panel.covariates)
        .any(|x| !x.is_finite());
    if non_finite {
        report.error("NonFinite", "panel contains non-finite values", "panel");
    }
    match &panel.structure {
        Structure::Network(g) => {
            if g.len() != panel.n_units() {
                report.error("StructureMismatch", "graph size differs from unit count", "graph");
            }
            if !g.is_symmetric() {
                report.error("AsymmetricGraph", "graph adjacency is not symmetric", "graph");
            }
            let isolated = (0..g.len()).filter(|&i| g.degree(i) == 0).count();
            if isolated > 0 {
                report.warn(
                    "IsolatedUnits",
                    format!("{isolated} units have no neighbors"),
                    "graph",
                );
            }
        }
        Structure::Cluster(c) => {
            if c.members.iter().any(|m| m.len() != c.cluster_size()) {
                report.error("UnequalClusters", "clusters differ in size", "clusters");
            }
        }
        Structure::None => {}
    }
    if panel.tau() < 1 {
        report.error("TooFewTimes", "need at least two time points", "time");
    }
    report
}
