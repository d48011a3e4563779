//! Command-line front end for `ordwalk`: spec files, experiment runs and
//! result directories.

pub mod report;
pub mod run;
pub mod spec;
pub mod suite;
