//! Context-aware human activity recognition with symbolic knowledge.
//!
//! A knowledge model ([`knowledge`]) lists, per activity, necessary
//! conditions over discrete context predicates. The reasoner returns the
//! activities consistent with a window's context. Four strategies
//! ([`strategies`]) combine it with a three-branch convolutional network
//! ([`nn`]): a purely data-driven baseline, training with a semantic loss
//! ([`losses`]) that needs no reasoner at inference, symbolic features fed
//! into the network, and post-hoc context refinement.
//!
//! [`data`] covers windowing, encoding, dataset IO, label cleaning and a
//! synthetic generator; [`eval`] runs leave-k-users-out experiments and
//! reports macro F1 with confidence intervals; [`cli`] backs the
//! `nesy-har` binary.

pub mod cli;
pub mod context;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod knowledge;
pub mod losses;
pub mod nn;
pub mod strategies;

pub use error::{Error, Result};
