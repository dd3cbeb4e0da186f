//! Configuration files and the runs behind the command-line tool.

mod commands;
mod config;

pub use commands::{
    cmd_classify, cmd_converge, cmd_finmarket, cmd_simulate_micro, cmd_solve_mfg, RunReport,
};
pub use config::{
    ExperimentConfig, FunctionsSection, GridSection, MarketPolicyConfig, MarketSection, RunSection,
    TableSection, ValueSource, WeightsSection,
};
