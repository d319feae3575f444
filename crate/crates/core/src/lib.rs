pub mod error;
pub mod estimation;
pub mod kernel;
pub mod latent_law;
pub mod plurality;
pub mod quadrature;
pub mod shape_rates;
pub mod signature;
pub mod simulate;
