//! Simulation and analysis toolkit for an entanglement-distribution QKD
//! network built on a broadband polarization-entangled pair source.
//!
//! * [`grid`]: DWDM grid arithmetic and conjugate channel planning.
//! * [`net`]: the wavelength-selective switch that assigns channel pairs to users.
//! * [`state`]: two-qubit polarization states and their metrics.
//! * [`analyzer`], [`sim`]: passive polarization analyzer and Monte Carlo detection.
//! * [`timetag`]: time-tag records, file codec, histograms and coincidences.
//! * [`keyrate`]: BBM92 sifting, QBER, secure key rate and projections.
//! * [`config`], [`scenario`]: configuration files and end-to-end runs.

pub mod analyzer;
pub mod grid;
pub mod net;
pub mod rng;
pub mod sim;
pub mod state;
pub mod timetag;
pub mod keyrate;
pub mod config;
pub mod scenario;
