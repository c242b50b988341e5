//! Experiment harness for HODLR peeling: the GN1/GN2/RSVD1/RSVD2 parameter
//! presets, error metrics, experiment grids with CSV and plot-data output,
//! and Monte-Carlo checks of the low-rank error bounds.

pub mod bounds;
pub mod config;
pub mod experiments;
pub mod metrics;
pub mod operators;
pub mod output;
pub mod presets;
