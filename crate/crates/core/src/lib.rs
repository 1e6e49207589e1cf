//! Dual-loop control of a data-center cooling plant through a calibrated
//! hybrid digital twin.

pub mod agents;
pub mod config;
pub mod error;
pub mod experiment;
pub mod mdp;
pub mod orchestrator;
pub mod plant;
pub mod reservoir;
pub mod safety;
pub mod twin;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/plant.md")]
    mod plant {}
    #[doc = include_str!("../../../book/src/twin.md")]
    mod twin {}
    #[doc = include_str!("../../../book/src/safety.md")]
    mod safety {}
    #[doc = include_str!("../../../book/src/agents.md")]
    mod agents {}
    #[doc = include_str!("../../../book/src/loop.md")]
    mod control_loop {}
    #[doc = include_str!("../../../book/src/operations.md")]
    mod operations {}
}
