//! Resolution harmonization of 1024 px tile pairs to 512 px.

use std::fmt;
use std::str::FromStr;

use crate::dataset::DatasetError;
use crate::imaging::ImageTensor;

pub const FULL_TILE_PX: usize = 1024;
pub const HARMONIZED_TILE_PX: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HarmonizeMode {
    /// Four quadrant crops (top-left, top-right, bottom-left, bottom-right).
    Crop4,
    /// One 2×2 box-mean downscale.
    Downscale2,
}

impl fmt::Display for HarmonizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HarmonizeMode::Crop4 => "crop4",
            HarmonizeMode::Downscale2 => "downscale2",
        })
    }
}

impl FromStr for HarmonizeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crop4" => Ok(HarmonizeMode::Crop4),
            "downscale2" => Ok(HarmonizeMode::Downscale2),
            _ => Err(format!("unknown harmonize mode '{s}' (crop4|downscale2)")),
        }
    }
}

pub type TilePair = (ImageTensor, ImageTensor);

/// Brings a 1024 × 1024 source/target pair to 512 px tiles, transforming both stains
/// identically.
pub fn harmonize_pair(pair: &TilePair, mode: HarmonizeMode) -> Result<Vec<TilePair>, DatasetError> {
    for img in [&pair.0, &pair.1] {
        if img.height() != FULL_TILE_PX || img.width() != FULL_TILE_PX {
            return Err(DatasetError::WrongTileSize {
                expected: FULL_TILE_PX,
                height: img.height(),
                width: img.width(),
            });
        }
    }
    harmonize_any(pair, mode)
}

/// Same as [`harmonize_pair`] for any even-sized square-or-not pair of equal size.
pub fn harmonize_any(pair: &TilePair, mode: HarmonizeMode) -> Result<Vec<TilePair>, DatasetError> {
    let (a, b) = pair;
    if (a.height(), a.width()) != (b.height(), b.width()) || a.height() % 2 != 0 || a.width() % 2 != 0 {
        return Err(DatasetError::InvalidArgument(format!(
            "pair sizes {}x{} and {}x{} must match and be even",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    match mode {
        HarmonizeMode::Crop4 => Ok(quadrants(a)?.into_iter().zip(quadrants(b)?).collect()),
        HarmonizeMode::Downscale2 => Ok(vec![(box_downscale2(a), box_downscale2(b))]),
    }
}

fn quadrants(img: &ImageTensor) -> Result<Vec<ImageTensor>, DatasetError> {
    let (h, w) = (img.height() / 2, img.width() / 2);
    [(0, 0), (0, w), (h, 0), (h, w)]
        .into_iter()
        .map(|(y, x)| img.crop(y, x, h, w).map_err(|e| DatasetError::InvalidArgument(e.to_string())))
        .collect()
}

/// Averages each non-overlapping 2×2 block.
pub fn box_downscale2(img: &ImageTensor) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height() / 2, img.width() / 2);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let s = img.get(ch, 2 * y, 2 * x)
                    + img.get(ch, 2 * y, 2 * x + 1)
                    + img.get(ch, 2 * y + 1, 2 * x)
                    + img.get(ch, 2 * y + 1, 2 * x + 1);
                data.push(s * 0.25);
            }
        }
    }
    ImageTensor::new(c, h, w, data).expect("box mean of [0,1] values stays in [0,1]")
}
