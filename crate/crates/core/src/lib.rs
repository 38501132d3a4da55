pub mod tuner;
pub mod bus;
pub mod engine;
pub mod graph;
pub mod harness;
pub mod pipeline;
