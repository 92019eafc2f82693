pub mod cli;
pub mod clutch;
pub mod collision;
pub mod config;
pub mod control_sim;
pub mod kinematics;
pub mod link;
pub mod planning;
pub mod protocol;
pub mod registration;
pub mod safety;
pub mod service;

#[cfg(test)]
pub(crate) mod testutil;
