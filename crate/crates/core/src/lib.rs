pub mod cascade;
pub mod checkpoint;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod training;
