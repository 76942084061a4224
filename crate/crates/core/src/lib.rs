//! Pairwise, 3D-grounded point correspondence for point tracking.
//!
//! The crate covers the full loop: synthetic dynamic scenes with exact
//! ground truth ([`scene`]), training-pair sampling ([`pairs`]), a compact
//! two-view network ([`model`]) trained with pointmap, matching and
//! visibility objectives ([`loss`], [`train`]), nearest-neighbour tracking in
//! 2D and 3D ([`track`]), and the evaluation metrics ([`metrics`]).

pub mod geom;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pairs;
pub mod sampling;
pub mod scene;
pub mod track;
pub mod train;
