//! Dual-quadric ellipsoid landmarks from multi-view bounding boxes.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assoc;
pub mod bench;
pub mod geometry;
pub mod init;
pub mod optimize;
pub mod sim;
