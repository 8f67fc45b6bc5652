//! Desk-scale interactive beam-alignment lab: circular-angle utilities, a
//! sectored-antenna measurement channel, Bayesian angle-of-arrival tracking,
//! a small reverse-mode autodiff tape, learned and classical scan policies,
//! end-to-end training, and a Monte Carlo evaluation harness.

pub mod angular;
pub mod autodiff;
pub mod belief;
pub mod channel;
pub mod cli;
pub mod experiment;
pub mod policy;
pub mod seeding;
pub mod train;
