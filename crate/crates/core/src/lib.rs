//! Imitation-learning workbench for a simulated 17-DoF expressive humanoid.
//!
//! The pipeline runs from demonstration capture ([`recorder`]) on a simulated
//! servo bus ([`bus`]) through encoding ([`action`]) to a multiple-timescale
//! recurrent policy ([`mtrnn`]) and analysis of its context neurons
//! ([`analysis`]). [`service`] exposes the whole thing over a line-delimited
//! JSON socket.

pub mod action;
pub mod analysis;
pub mod bus;
pub mod corpus;
pub mod ik;
pub mod mtrnn;
pub mod recorder;
pub mod robot;
pub mod service;
