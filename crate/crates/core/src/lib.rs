pub mod bspline;
pub mod harness;
pub mod hydro;
pub mod kan;
pub mod metrics;
pub mod optim;
pub mod symbolic;
