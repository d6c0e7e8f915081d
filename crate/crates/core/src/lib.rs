pub mod container;
pub mod error;
pub mod tensor;
pub mod linalg;
pub mod sfp;
pub mod attention;
pub mod fast;
pub mod siglip;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod train;
pub mod gradcheck;
pub mod config;
