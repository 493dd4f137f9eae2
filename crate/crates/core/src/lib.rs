pub mod analysis;
pub mod autograd;
pub mod corpus;
pub mod error;
pub mod external;
pub mod models;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod selfplay;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

pub type Bundle = models::ModelBundle<f32>;
pub type Bundle64 = models::ModelBundle<f64>;
