//! Experiment drivers: `(B, σ)` stability grids on constructed quadratic
//! families, convergence races from noisy `(C, r)` solutions, coherence
//! tracking during training, and their CSV/JSON output.
//!
//! Every cell, seed and run draws from its own random sub-stream, so output
//! is a pure function of the configuration and does not depend on the
//! number of worker threads.

mod boundary;
mod io;
mod race;
mod tracking;

pub use boundary::{
    run_boundary_sweep, run_sam_rho_sweep, BoundaryReport, CellResult, FamilyKind, Overlap,
    SweepGrid,
};
pub use io::{
    boundary_rows, emit_csv, emit_json, emit_race_csv, emit_tracking_csv, format_sig9,
    parse_boundary_csv, write_json, BoundaryRow, BOUNDARY_CSV_HEADER,
};
pub use race::{run_cr_race, RaceConfig, RaceCurve, RaceReport};
pub use tracking::{
    run_coherence_tracking, TrackingConfig, TrackingReport, TrackingRow, TrackingSeries,
};
