//! Workbench for studying gradient-based adversarial attacks and
//! denoising-autoencoder defenses on image classifiers.
//!
//! The crate is organized around a small reverse-mode automatic
//! differentiation engine ([`autodiff`]) on which everything else is built:
//! declarative model construction and training ([`nn`]), dataset ingestion
//! ([`datasets`]), attack generation ([`attacks`]), the ensemble-noise DAE
//! defense ([`defense`]), scenario evaluation ([`evaluation`]), and the
//! persistence / orchestration layer ([`checkpoint`], [`config`],
//! [`pipeline`], [`imgdump`]).

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod defense;
pub mod error;
pub mod evaluation;
pub mod imgdump;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
