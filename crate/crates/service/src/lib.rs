//! HTTP/JSON service, run registry and command-line front end over
//! `flip-core`.
pub mod api;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod reference;
pub mod registry;
pub mod runner;
pub mod store;
