//! Blind extraction of one directional speaker from diffuse noise.
//!
//! Pipeline: STFT ([`stft`]) → ILRMA demixing and target selection
//! ([`rank1`]) → rank-(M-1) noise SCM ([`scm`]) → MAP-EM estimation of the
//! full-rank noise SCM and Wiener extraction ([`rcscme`]). [`harness`] builds
//! synthetic diffuse-noise scenes and scores extractions; [`pipeline`] wires
//! the stages together.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod pipeline;
pub mod rank1;
pub mod rcscme;
pub mod scm;
pub mod stft;
pub mod wav;

pub use error::{Error, Result, Stage};
