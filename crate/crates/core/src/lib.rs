pub mod attention;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod features;
pub mod inference;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod seed;
pub mod subword;
pub mod synth;
pub mod trainer;
