#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod controller;
pub mod gateway;
pub mod geometry;
pub mod pose;
pub mod qp;
pub mod sim;
pub mod system;
pub mod teleop;
pub mod vfi;
