//! ROI grid tiling with tissue filtering, and the ROI sidecar format.

use std::fmt;

use crate::dataset::otsu::{tissue_mask, TissueMask};
use crate::dataset::DatasetError;
use crate::imaging::ImageTensor;

/// Axis-aligned rectangle in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn full(image: &ImageTensor) -> Roi {
        Roi { x: 0, y: 0, width: image.width(), height: image.height() }
    }
}

impl fmt::Display for Roi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}+{}+{}", self.width, self.height, self.x, self.y)
    }
}

/// Top-left corner of a tile, `(y, x)` in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TileOffset {
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug)]
pub struct Tile {
    pub offset: TileOffset,
    pub tissue_fraction: f64,
    pub image: ImageTensor,
}

/// Result of gridding one ROI. Both lists are in row-major offset order.
#[derive(Clone, Debug)]
pub struct TileGrid {
    pub kept: Vec<Tile>,
    pub discarded: Vec<TileOffset>,
}

pub const DEFAULT_MIN_TISSUE: f64 = 0.25;

/// Cuts non-overlapping `tile_px` squares anchored at the ROI origin and keeps those whose
/// tissue fraction reaches `min_tissue`. The tissue mask is computed once over the whole
/// image.
pub fn extract_tiles(image: &ImageTensor, roi: Roi, tile_px: usize, min_tissue: f64) -> Result<TileGrid, DatasetError> {
    let mask = tissue_mask(image);
    extract_tiles_with_mask(image, &mask, roi, tile_px, min_tissue)
}

pub fn extract_tiles_with_mask(
    image: &ImageTensor,
    mask: &TissueMask,
    roi: Roi,
    tile_px: usize,
    min_tissue: f64,
) -> Result<TileGrid, DatasetError> {
    if tile_px == 0 {
        return Err(DatasetError::InvalidArgument("tile_px must be at least 1".into()));
    }
    if roi.x + roi.width > image.width() || roi.y + roi.height > image.height() {
        return Err(DatasetError::RoiOutOfBounds { roi, width: image.width(), height: image.height() });
    }
    let mut grid = TileGrid { kept: Vec::new(), discarded: Vec::new() };
    for row in 0..roi.height / tile_px {
        for col in 0..roi.width / tile_px {
            let offset = TileOffset { y: roi.y + row * tile_px, x: roi.x + col * tile_px };
            let fraction = mask.fraction_in(offset.y, offset.x, tile_px, tile_px);
            if fraction >= min_tissue {
                let tile = image
                    .crop(offset.y, offset.x, tile_px, tile_px)
                    .map_err(|e| DatasetError::InvalidArgument(e.to_string()))?;
                grid.kept.push(Tile { offset, tissue_fraction: fraction, image: tile });
            } else {
                grid.discarded.push(offset);
            }
        }
    }
    Ok(grid)
}

/// Parses `case_id x y width height` lines; blank lines and `#` comments are skipped.
pub fn parse_roi_sidecar(text: &str) -> Result<Vec<(String, Roi)>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| DatasetError::Parse { line: i + 1, reason };
        if parts.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", parts.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("'{s}': {e}")));
        out.push((
            parts[0].to_string(),
            Roi { x: num(parts[1])?, y: num(parts[2])?, width: num(parts[3])?, height: num(parts[4])? },
        ));
    }
    Ok(out)
}
