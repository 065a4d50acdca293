//! Blip models and true parameters of the simulation designs, with the
//! estimand rows reported for each.

use serde::{Deserialize, Serialize};

/// Saturated model for the line network: a shared block for blips of time-0
/// exposure (varying with the gap to the outcome) and a block for time 1.
pub const NETWORK_MODEL: &str = "\
[m=0]
psi1: a[m]
psi2: h[m][0]
psi3: a[m]*timegap
psi4: h[m][0]*timegap
psi5: a[m]*h[m][0]
psi6: a[m]*h[m][0]*timegap
[m=1, k=2]
psi7: a[m]
psi8: h[m][0]
psi9: a[m]*h[m][0]
psi10: a[m]*h[m-1][0]
psi11: h[m][0]*a[m-1]
psi12: h[m][0]*h[m-1][0]
psi13: a[m]*h[m][0]*h[m-1][0]
";

pub const NETWORK_PSI: [f64; 13] = [
    1.0, 0.5, -0.1, -0.1, -0.2, -0.05, 1.0, 0.5, -0.1, -0.1, -0.1, -0.05, -0.05,
];

/// Interference-blind model: one direct-effect coefficient per `(m, k)`.
pub const NAIVE_MODEL: &str = "\
[m=0, k=1]
psi01: a[m]
[m=0, k=2]
psi02: a[m]
[m=1, k=2]
psi12: a[m]
";

/// Two-unit clusters under the identity cluster mapping, where `h[t][r]` is
/// member `r`'s exposure. Coefficients are shared by both members.
pub const CLUSTER_MODEL: &str = "\
[k=1, j=0]
psi1_01: a[m]
psi2_01: h[m][1]
[k=1, j=1]
psi1_01: a[m]
psi2_01: h[m][0]
[m=0, k=2, j=0]
psi1_02: a[m]
psi2_02: h[m][1]
[m=0, k=2, j=1]
psi1_02: a[m]
psi2_02: h[m][0]
[m=1, k=2, j=0]
psi1_12: a[m]
psi2_12: h[m][1]
psi3_12: a[m]*h[m-1][1]
psi3_12: a[m]*h[m][1]
[m=1, k=2, j=1]
psi1_12: a[m]
psi2_12: h[m][0]
psi3_12: a[m]*h[m-1][0]
psi3_12: a[m]*h[m][0]
";

pub const CLUSTER_PSI: [f64; 7] = [1.0, 0.5, 2.0, 1.0, 0.75, 0.25, 0.1];

/// County-style model: the network time-0 block plus a time-1 block without
/// the concurrent direct-by-spillover terms.
pub const COUNTY_MODEL: &str = "\
[m=0]
psi1: a[m]
psi2: h[m][0]
psi3: a[m]*timegap
psi4: h[m][0]*timegap
psi5: a[m]*h[m][0]
psi6: a[m]*h[m][0]*timegap
[m=1, k=2]
psi7: a[m]
psi8: h[m][0]
psi9: a[m]*h[m-1][0]
psi10: h[m][0]*a[m-1]
psi11: h[m][0]*h[m-1][0]
";

pub const COUNTY_PSI: [f64; 11] = [1.0, 0.5, -0.1, -0.1, -0.2, -0.05, 1.0, 0.5, -0.1, -0.1, -0.05];

/// A blip evaluated at a fixed history: `gamma_{m,k}` with own exposures
/// `a[0..=m]` and spillover `h[0..=m]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlipRow {
    pub label: String,
    pub m: usize,
    pub k: usize,
    pub a: Vec<f64>,
    pub h: Vec<f64>,
}

fn row(label: &str, m: usize, k: usize, a: &[f64], h: &[f64]) -> BlipRow {
    BlipRow {
        label: label.to_string(),
        m,
        k,
        a: a.to_vec(),
        h: h.to_vec(),
    }
}

/// The thirteen blip rows reported for the line network.
pub fn network_rows() -> Vec<BlipRow> {
    let mut rows = time0_rows();
    rows.extend([
        row("γ_{1,2}(ā_1=(0,1), h̄_1=(0,0))", 1, 2, &[0.0, 1.0], &[0.0, 0.0]),
        row("γ_{1,2}(ā_1=(0,1), h̄_1=(1,0))", 1, 2, &[0.0, 1.0], &[1.0, 0.0]),
        row("γ_{1,2}(ā_1=(0,1), h̄_1=(0,1))", 1, 2, &[0.0, 1.0], &[0.0, 1.0]),
        row("γ_{1,2}(ā_1=(0,1), h̄_1=(1,1))", 1, 2, &[0.0, 1.0], &[1.0, 1.0]),
        row("γ_{1,2}(ā_1=(0,0), h̄_1=(0,1))", 1, 2, &[0.0, 0.0], &[0.0, 1.0]),
        row("γ_{1,2}(ā_1=(0,0), h̄_1=(1,1))", 1, 2, &[0.0, 0.0], &[1.0, 1.0]),
        row("γ_{1,2}(ā_1=(1,0), h̄_1=(0,1))", 1, 2, &[1.0, 0.0], &[0.0, 1.0]),
    ]);
    rows
}

/// The six time-0 blip rows reported for county-style data.
pub fn time0_rows() -> Vec<BlipRow> {
    vec![
        row("γ_{0,1}(a_0=1,h_0=0)", 0, 1, &[1.0], &[0.0]),
        row("γ_{0,1}(a_0=1,h_0=1)", 0, 1, &[1.0], &[1.0]),
        row("γ_{0,1}(a_0=0,h_0=1)", 0, 1, &[0.0], &[1.0]),
        row("γ_{0,2}(a_0=1,h_0=0)", 0, 2, &[1.0], &[0.0]),
        row("γ_{0,2}(a_0=1,h_0=1)", 0, 2, &[1.0], &[1.0]),
        row("γ_{0,2}(a_0=0,h_0=1)", 0, 2, &[0.0], &[1.0]),
    ]
}

/// Row labels for the cluster parameters, in model label order.
pub const CLUSTER_ROWS: [&str; 7] = ["ψ^1_{0,1}", "ψ^2_{0,1}", "ψ^1_{0,2}", "ψ^2_{0,2}", "ψ^1_{1,2}", "ψ^2_{1,2}", "ψ^3_{1,2}"];
