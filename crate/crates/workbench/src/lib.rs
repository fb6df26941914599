//! File formats and command-line front end for the attnlego simulator.

pub mod cli;
pub mod run_config;
pub mod tensor_file;
