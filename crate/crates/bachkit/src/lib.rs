//! File formats, exports and the command-line driver for `bachkit-core`.
//!
//! * [`bvtr`]: binary tensor container for latents, traces and caches.
//! * [`export`]: PGM masks and CSV grids, maps and layer reports.
//! * [`config`]: TOML run configuration.
//! * [`report`]: run output directories and the group report.
//! * [`cli`]: the `bachkit` command.

pub mod bvtr;
pub mod cli;
pub mod config;
pub mod export;
pub mod report;
