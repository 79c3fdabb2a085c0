#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod losses;
pub mod model;
pub mod train;
pub mod wpd;
