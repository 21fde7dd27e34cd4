pub mod config;
pub mod dataset;
pub mod grammar;
pub mod grpo;
pub mod labeler;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod seed;
pub mod sft;
pub mod sim;
