use std::io;

use thiserror::Error;

/// Errors surfaced by the segmentation pipeline and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot pack pile: {0}")]
    CannotPackPile(String),
    #[error("nudge missed pile at ({x:.1}, {y:.1})")]
    NudgeMissed { x: f64, y: f64 },
    #[error("scene topology changed between frames")]
    TopologyChanged,
    #[error("no pile detected")]
    NoPileDetected,
    #[error("pile degenerate: convex hull has {0} vertices")]
    PileDegenerate(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable code written into trial records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::CannotPackPile(_) => "cannot_pack_pile",
            Error::NudgeMissed { .. } => "nudge_missed_pile",
            Error::TopologyChanged => "topology_changed",
            Error::NoPileDetected => "no_pile_detected",
            Error::PileDegenerate(_) => "pile_degenerate",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
