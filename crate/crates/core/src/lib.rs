//! Quantum state diffusion toolkit for the forced, damped Duffing oscillator.
//!
//! The crate integrates single quantum trajectories in a fixed Fock basis
//! ([`trajectory`]) or in a moving, recentred basis ([`movingbasis`]),
//! evolves a Gaussian moment closure ([`linearized`]), solves the Lindblad
//! master equation for small reference problems ([`master`]) and collects
//! stroboscopic Poincaré sections ([`sections`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod fockspace;
pub mod linearized;
pub mod master;
pub mod models;
pub mod movingbasis;
pub mod sections;
pub mod trajectory;

pub use error::{QsdError, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/fock-space.md")]
    struct FockSpace;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/trajectories.md")]
    struct Trajectories;
    #[doc = include_str!("../../../book/src/moving-basis.md")]
    struct MovingBasis;
    #[doc = include_str!("../../../book/src/linearized.md")]
    struct Linearized;
    #[doc = include_str!("../../../book/src/sections.md")]
    struct Sections;
    #[doc = include_str!("../../../book/src/command-line.md")]
    struct CommandLine;
    #[doc = include_str!("../../../book/src/validation.md")]
    struct Validation;
}
