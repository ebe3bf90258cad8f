//! Interactive segmentation of unknown objects in a simulated tabletop pile.
//!
//! The pipeline locates the pile from an uncertainty map, pokes objects,
//! clusters the resulting optical flow into rigid-motion segments and keeps
//! refining a set of instance masks until a verification pass finds nothing
//! left to split.

pub mod driver;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod hypothesis;
pub mod motioncluster;
pub mod policy;
pub mod raster;
pub mod rng;
pub mod scene;

pub use driver::{run_batch, run_sweep, run_trial, RunConfig, TrialOutcome};
pub use error::{Error, Result};
pub use eval::{aggregate, iou, match_and_score, SummaryTable, SweepRow, TrialRecord};
pub use flow::{FlowField, NoiseSpec, UncertaintyMap};
pub use geometry::{Pose, Vec2};
pub use hypothesis::{refine, warp_masks, SegmentationHypothesis};
pub use motioncluster::{dbscan, ClusterParams, FlowPoint};
pub use raster::{Grid, LabelImage, Mask};
pub use scene::{apply_nudge, generate_scene, render_labels, NudgeCommand, RigidObject, SceneConfig, SceneState};
