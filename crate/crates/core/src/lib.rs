pub mod corpus;
pub mod latent;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;
pub mod ue;
