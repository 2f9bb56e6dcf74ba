//! Synthetic radiology report generation lab.
//!
//! A desk-scale, fully deterministic pipeline over a synthetic chest-exam
//! world: studies carry a patch-feature grid plus heterogeneous annotations
//! (disease presence, severity, locations, boxes, QA chains, reports).
//! Learned components (QA-chain decoding, report decoding, diagnosis
//! matching, lesion box regression) train from scratch on a small f64
//! autodiff kernel; an omni-supervised stage fills missing annotations with
//! confidence-filtered, anatomically consistent pseudo-labels; an evaluation
//! kit scores clinical and textual quality.

pub mod anatomy;
pub mod consistency;
pub mod diag_ground;
pub mod domain;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod lesion_ground;
pub mod numkit;
pub mod omni;
pub mod qachain;
pub mod synthworld;

pub use error::{Error, Result};
