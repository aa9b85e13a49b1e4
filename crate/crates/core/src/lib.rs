pub mod correlations;
pub mod error;
pub mod estimator;
pub mod evolve;
pub mod model;
pub mod ode;
pub mod opalg;
pub mod semiclassical;
pub mod trajectory;
