//! Dataset construction: tissue masking, ROI tiling, resolution harmonization,
//! case-stratified splitting and curation.

mod curation;
mod harmonize;
mod otsu;
mod split;
mod tiling;

use thiserror::Error;

use crate::imaging::{Her2Score, ManifestError};

pub use curation::{apply_curation, parse_decisions, CurationCounts, Decision, Verdict};
pub use harmonize::{
    box_downscale2, harmonize_any, harmonize_pair, HarmonizeMode, TilePair, FULL_TILE_PX, HARMONIZED_TILE_PX,
};
pub use otsu::{gray_levels, otsu_threshold, tissue_mask, TissueMask};
pub use split::{apply_split, split_coverage, stratified_split, SplitFractions, SplitPlan};
pub use tiling::{
    extract_tiles, extract_tiles_with_mask, parse_roi_sidecar, Roi, Tile, TileGrid, TileOffset, DEFAULT_MIN_TISSUE,
};

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("histogram has no mass")]
    EmptyHistogram,
    #[error("roi {roi} exceeds image bounds {width}x{height}")]
    RoiOutOfBounds { roi: Roi, width: usize, height: usize },
    #[error("expected {expected}x{expected} tile, got {height}x{width}")]
    WrongTileSize { expected: usize, height: usize, width: usize },
    #[error("cannot cover {splits} splits with {cases} case(s) of HER2 score {score}")]
    InfeasibleSplit { score: Her2Score, cases: usize, splits: usize },
    #[error("case '{0}' has tiles with different HER2 scores")]
    InconsistentCaseScore(String),
    #[error("case '{0}' is not in the split plan")]
    UnknownCase(String),
    #[error("unknown tile_id '{0}'")]
    UnknownTile(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}
