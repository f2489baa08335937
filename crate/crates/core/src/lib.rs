pub mod autodiff;
pub mod error;
pub mod lora;
pub mod model;
pub mod tensor;
pub mod criteria;
pub mod data;
pub mod pruner;
pub mod oracles;
pub mod checkpoint;
pub mod config;
pub mod report;
pub mod harness;
