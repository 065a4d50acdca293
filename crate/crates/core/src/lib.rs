//! G-estimation of structural nested mean models for difference-in-differences
//! panels with cluster or network interference.
//!
//! The pipeline is: load a [`panel::PanelDataset`], map exposures with
//! [`exposure::apply_mapping`], parse a [`blip::BlipModel`], fit with
//! [`estimator::solve_psi`], then attach uncertainty from [`variance`] and
//! derive causal quantities with [`estimands`]. [`simlab`] holds the
//! simulation designs and Monte Carlo harness.

pub mod blip;
pub mod error;
pub mod estimands;
pub mod estimator;
pub mod exposure;
pub mod graph;
pub mod panel;
pub mod rng;
pub mod simlab;
pub mod variance;

pub use error::{Error, Result};
