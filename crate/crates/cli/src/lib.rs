//! Command-line driver: config files, verification suites, experiments and
//! their JSON-lines reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod report;
pub mod verify;
