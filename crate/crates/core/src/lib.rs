pub mod cli;
pub mod conditional;
pub mod error;
pub mod forecast;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod saem;
pub mod sampler;
pub mod simulation;
pub mod special;
