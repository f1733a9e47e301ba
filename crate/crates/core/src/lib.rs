//! Articulated 3D human pose reconstruction from 2D joint tracks seen by an
//! orbiting camera: per-frame dictionary initialisation followed by bundle
//! adjustment over the whole sequence.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod camera;
pub mod dict;
pub mod error;
pub mod eval;
pub mod io;
pub mod numopt;
pub mod pipeline;
pub mod skeleton;
pub mod synthetic;

pub use error::{Error, Result};
