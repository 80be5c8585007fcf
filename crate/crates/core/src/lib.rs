pub mod data;
pub mod glm;
pub mod model;
pub mod predictor;
pub mod rng;
pub mod exec;
pub mod impute;
pub mod synth;
pub mod quadrature;
pub mod calibrate;
pub mod estimate;
pub mod metrics;
pub mod simulate;
