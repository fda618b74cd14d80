pub mod matops;
pub mod kalman;
pub mod field;
pub mod propagator;
pub mod regularity;
pub mod control;
pub mod selftest;
pub mod cli;
