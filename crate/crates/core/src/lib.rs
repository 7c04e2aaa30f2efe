//! Point-cloud mixture-of-domain-experts with block-to-scene pretraining.
//!
//! The crate is organised bottom-up:
//!
//! * [`geom`] – point sets, boxes, sampling and the two loss geometries.
//! * [`autodiff`] – a small reverse-mode tape, AdamW and gradient checking.
//! * [`scenegen`] – deterministic synthetic scenes and shapes with exact labels.
//! * [`blocks`] – random point blocks, their ground-truth boxes and the
//!   scene-to-object coordinate transform.
//! * [`model`] – scene expert, shared object expert and the heads.
//! * [`pretrain`] – the joint reconstruction / box-regression loop.
//! * [`downstream`] – classification fine-tuning and localization evaluation.
//! * [`config`], [`io`], [`checkpoint`], [`gradcheck`] – persistence and CLI support.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod downstream;
pub mod error;
pub mod geom;
pub mod gradcheck;
pub mod io;
pub mod matching;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
pub use geom::{Box3D, PointSet};
