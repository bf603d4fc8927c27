//! Simulation toolkit for atom-chip magnetic microtraps.
//!
//! The toolkit computes the magnetostatic field of surface-mounted wire
//! layouts plus external bias fields, finds and characterizes the resulting
//! traps and guides, replays time-dependent loading and compression
//! sequences, and integrates classical ensembles of trapped atoms through
//! them.
//!
//! Module map:
//! - [`quantities`]: constants, units, species, energy views
//! - [`layout`]: wire/bias data model, file format, validation, bundled chips
//! - [`magnetics`]: Biot-Savart field engine, Jacobian, |B| Hessian, grids
//! - [`traps`]: minimum search and trap characterization, depths
//! - [`sequences`]: current/bias ramps, trap tracking, compression report
//! - [`dynamics`]: thermal sampling, velocity-Verlet ensembles, observables

pub mod dynamics;
pub mod layout;
pub mod magnetics;
pub mod quantities;
pub mod sequences;
pub mod traps;

pub use layout::{builtin_layout, parse_layout, serialize_layout, validate, BuiltinParams, ChipLayout, Wire};
pub use magnetics::{
    decompose, grid_map, segment_field, total_field, FieldEngine, FieldProvider, Region, WidthMode,
};
pub use quantities::{constants, convert, AtomSpecies, Energy, Unit, Vec3};
pub use sequences::{
    builtin_sequence, builtin_sequence_with_stage, compression_report, parse_sequence, track,
    Sequence,
};
pub use traps::{
    characterize, depth_from_bias, depth_numeric, find_minimum, MinimizationConfig,
    PotentialModel, TrapCharacterization, TrapRegime,
};
pub use dynamics::{integrate, observables, sample_thermal, Ensemble, IntegratorConfig};
