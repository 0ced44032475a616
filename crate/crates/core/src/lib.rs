//! Simulator for decentralized federated learning with entropy-pooling
//! aggregation (FedEP), FedAvg and FedProx on Dirichlet-partitioned data.
//!
//! The pipeline: [`datahub`] loads and partitions data, [`distfit`] fits a
//! Gaussian mixture to each node's labels, [`pooling`] turns the shared fits
//! into aggregation weights, [`learner`] trains the local MLPs and
//! [`federation`] runs the rounds.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod datahub;
pub mod distfit;
pub mod error;
pub mod federation;
pub mod learner;
pub mod numkit;
pub mod pooling;

pub use error::{Error, Result};
