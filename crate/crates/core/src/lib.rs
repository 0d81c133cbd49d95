//! Empathetic dialogue generation with adaptive commonsense knowledge
//! selection: a toy transformer encoder–decoder whose decoder is conditioned
//! on the surviving commonsense relation after a competitive elimination
//! loop, with the elimination dynamics folded back in through a refine gate.

pub mod autodiff;
pub mod error;
pub mod corpus;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod qp;
pub mod train;
pub mod workspace;

pub use error::{Error, Result};
