//! Image and manifest data model shared by the pipeline, training and evaluation code.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ColorType, DynamicImage, GrayImage, ImageReader, RgbImage};
use thiserror::Error;

use crate::tensor::{Shape, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    Missing(PathBuf),
    #[error("corrupt image {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported bit depth in {path}: {color:?} (8-bit grayscale or RGB required)")]
    UnsupportedBitDepth { path: PathBuf, color: ColorType },
    #[error("unsupported pixel layout in {path}: {color:?} (grayscale or RGB required)")]
    UnsupportedLayout { path: PathBuf, color: ColorType },
    #[error("invalid image tensor: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// A `channels × height × width` raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(ImageError::Invalid("height and width must be at least 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(ImageError::Invalid(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(ImageError::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageTensor { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self, ImageError> {
        ImageTensor::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Converts a single-item tensor, clamping values into `[0, 1]`.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self, ImageError> {
        let s = t.shape();
        if s.n != 1 {
            return Err(ImageError::Invalid(format!("expected batch of one, got {s}")));
        }
        let data = t.data().iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        ImageTensor::new(s.c, s.h, s.w, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, self.channels, self.height, self.width), self.data.clone())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the `height × width` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Self, ImageError> {
        if height == 0 || width == 0 || y + height > self.height || x + width > self.width {
            return Err(ImageError::Invalid(format!(
                "crop {height}x{width} at ({y}, {x}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for row in y..y + height {
                let start = (c * self.height + row) * self.width + x;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(ImageTensor { channels: self.channels, height, width, data })
    }
}

/// Reads an 8-bit grayscale or RGB PNG, scaling values by 1/255.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor, ImageError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(ImageError::Missing(path.to_path_buf()));
    }
    let corrupt = |e: &dyn fmt::Display| ImageError::Corrupt { path: path.to_path_buf(), reason: e.to_string() };
    let reader = ImageReader::open(path)
        .map_err(|e| ImageError::Io { path: path.to_path_buf(), source: e })?
        .with_guessed_format()
        .map_err(|e| corrupt(&e))?;
    let decoded = reader.decode().map_err(|e| corrupt(&e))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw): (usize, Vec<u8>) = match decoded {
        DynamicImage::ImageLuma8(img) => (1, img.into_raw()),
        DynamicImage::ImageRgb8(img) => (3, img.into_raw()),
        other => {
            let color = other.color();
            return Err(if color.bytes_per_pixel() / color.channel_count() != 1 {
                ImageError::UnsupportedBitDepth { path: path.to_path_buf(), color }
            } else {
                ImageError::UnsupportedLayout { path: path.to_path_buf(), color }
            });
        }
    };
    // interleaved HWC -> planar CHW
    let mut data = vec![0.0; raw.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = raw[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    ImageTensor::new(channels, h, w, data)
}

/// Quantizes to 8 bits (`round(v * 255)`) and writes a PNG, creating parent directories.
pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ImageError::Io { path: dir.to_path_buf(), source })?;
    }
    let (h, w, ch) = (image.height, image.width, image.channels);
    let mut raw = vec![0u8; h * w * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                raw[(y * w + x) * ch + c] = (image.get(c, y, x) * 255.0).round() as u8;
            }
        }
    }
    let result = if ch == 1 {
        GrayImage::from_raw(w as u32, h as u32, raw).map(|img| img.save(path))
    } else {
        RgbImage::from_raw(w as u32, h as u32, raw).map(|img| img.save(path))
    };
    match result {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(ImageError::Corrupt { path: path.to_path_buf(), reason: e.to_string() }),
        None => Err(ImageError::Invalid("buffer size mismatch".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Her2Score {
    Zero,
    One,
    Two,
    Three,
}

impl Her2Score {
    pub const ALL: [Her2Score; 4] = [Her2Score::Zero, Her2Score::One, Her2Score::Two, Her2Score::Three];

    pub fn class_index(self) -> usize {
        self as usize
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        Her2Score::ALL.get(i).copied()
    }
}

impl fmt::Display for Her2Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Her2Score::Zero => "0",
            Her2Score::One => "1+",
            Her2Score::Two => "2+",
            Her2Score::Three => "3+",
        })
    }
}

impl FromStr for Her2Score {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "0" => Ok(Her2Score::Zero),
            "1+" => Ok(Her2Score::One),
            "2+" => Ok(Her2Score::Two),
            "3+" => Ok(Her2Score::Three),
            _ => Err(format!("invalid HER2 score '{s}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            _ => Err(format!("invalid split '{s}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    Pending,
    Kept,
    Dropped,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::Kept => "kept",
            Status::Dropped => "dropped",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Status {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(Status::Pending),
            "kept" => Ok(Status::Kept),
            "dropped" => Ok(Status::Dropped),
            _ => Err(format!("invalid status '{s}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileRecord {
    pub tile_id: String,
    pub case_id: String,
    pub her2_score: Her2Score,
    pub path_source: PathBuf,
    pub path_target: PathBuf,
    pub split: Split,
    pub status: Status,
    pub artifact_tag: Option<String>,
}

impl TileRecord {
    pub fn pending(
        tile_id: impl Into<String>,
        case_id: impl Into<String>,
        her2_score: Her2Score,
        path_source: impl Into<PathBuf>,
        path_target: impl Into<PathBuf>,
    ) -> Self {
        TileRecord {
            tile_id: tile_id.into(),
            case_id: case_id.into(),
            her2_score,
            path_source: path_source.into(),
            path_target: path_target.into(),
            split: Split::Unassigned,
            status: Status::Pending,
            artifact_tag: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ManifestError {
    #[error("duplicate tile_id '{0}'")]
    DuplicateId(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("tile '{0}' has a split but is not kept")]
    SplitWithoutKeep(String),
    #[error("case '{case_id}' appears in splits {first} and {second}")]
    CaseSpansSplits { case_id: String, first: Split, second: Split },
    #[error("microns_per_pixel must be positive and finite, got {0}")]
    InvalidResolution(f64),
    #[error("field {field} of tile '{tile_id}' contains a tab or newline")]
    UnencodableField { tile_id: String, field: &'static str },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Ordered list of tile records with dataset-level metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    records: Vec<TileRecord>,
    dataset_name: String,
    microns_per_pixel: f64,
}

impl Manifest {
    pub fn new(
        dataset_name: impl Into<String>,
        microns_per_pixel: f64,
        records: Vec<TileRecord>,
    ) -> Result<Self, ManifestError> {
        let m = Manifest { records, dataset_name: dataset_name.into(), microns_per_pixel };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(dataset_name: impl Into<String>, microns_per_pixel: f64) -> Result<Self, ManifestError> {
        Manifest::new(dataset_name, microns_per_pixel, Vec::new())
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if !(self.microns_per_pixel.is_finite() && self.microns_per_pixel > 0.0) {
            return Err(ManifestError::InvalidResolution(self.microns_per_pixel));
        }
        let mut ids = HashSet::with_capacity(self.records.len());
        let mut case_split: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            if !ids.insert(r.tile_id.as_str()) {
                return Err(ManifestError::DuplicateId(r.tile_id.clone()));
            }
            if r.split != Split::Unassigned {
                if r.status != Status::Kept {
                    return Err(ManifestError::SplitWithoutKeep(r.tile_id.clone()));
                }
                match case_split.get(r.case_id.as_str()) {
                    Some(&s) if s != r.split => {
                        return Err(ManifestError::CaseSpansSplits {
                            case_id: r.case_id.clone(),
                            first: s,
                            second: r.split,
                        })
                    }
                    _ => {
                        case_split.insert(&r.case_id, r.split);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[TileRecord] {
        &self.records
    }

    pub fn dataset_name(&self) -> &str {
        &self.dataset_name
    }

    pub fn microns_per_pixel(&self) -> f64 {
        self.microns_per_pixel
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, tile_id: &str) -> Option<&TileRecord> {
        self.records.iter().find(|r| r.tile_id == tile_id)
    }

    /// Replaces the record list, re-checking every invariant.
    pub fn with_records(&self, records: Vec<TileRecord>) -> Result<Manifest, ManifestError> {
        Manifest::new(self.dataset_name.clone(), self.microns_per_pixel, records)
    }

    pub fn count_status(&self, status: Status) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), ManifestError> {
        let io = |e: io::Error| ManifestError::Io(e.to_string());
        if self.dataset_name.contains(['\t', '\n', '\r']) {
            return Err(ManifestError::UnencodableField { tile_id: String::new(), field: "dataset_name" });
        }
        writeln!(out, "#dataset_name={}\tmicrons_per_pixel={}", self.dataset_name, self.microns_per_pixel)
            .map_err(io)?;
        for r in &self.records {
            let src = r.path_source.to_string_lossy();
            let tgt = r.path_target.to_string_lossy();
            let tag = r.artifact_tag.as_deref().unwrap_or("");
            for (field, value) in [
                ("tile_id", r.tile_id.as_str()),
                ("case_id", r.case_id.as_str()),
                ("path_source", src.as_ref()),
                ("path_target", tgt.as_ref()),
                ("artifact_tag", tag),
            ] {
                if value.contains(['\t', '\n', '\r']) {
                    return Err(ManifestError::UnencodableField { tile_id: r.tile_id.clone(), field });
                }
            }
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.tile_id, r.case_id, r.her2_score, src, tgt, r.split, r.status, tag
            )
            .map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Manifest, ManifestError> {
        let mut header: Option<(String, f64)> = None;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in input.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| ManifestError::Io(e.to_string()))?;
            let malformed = |reason: String| ManifestError::Malformed { line: lineno, reason };
            if let Some(rest) = line.strip_prefix('#') {
                if header.is_some() {
                    return Err(malformed("second header line".into()));
                }
                header = Some(parse_header(rest).map_err(malformed)?);
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 8 {
                return Err(malformed(format!("expected 8 tab-separated fields, found {}", fields.len())));
            }
            if fields[0].is_empty() {
                return Err(malformed("empty tile_id".into()));
            }
            if !seen.insert(fields[0].to_string()) {
                return Err(ManifestError::DuplicateId(fields[0].to_string()));
            }
            records.push(TileRecord {
                tile_id: fields[0].to_string(),
                case_id: fields[1].to_string(),
                her2_score: fields[2].parse().map_err(malformed)?,
                path_source: PathBuf::from(fields[3]),
                path_target: PathBuf::from(fields[4]),
                split: fields[5].parse().map_err(malformed)?,
                status: fields[6].parse().map_err(malformed)?,
                artifact_tag: (!fields[7].is_empty()).then(|| fields[7].to_string()),
            });
        }
        let (name, mpp) =
            header.ok_or(ManifestError::Malformed { line: 1, reason: "missing '#' header line".into() })?;
        Manifest::new(name, mpp, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        let path = path.as_ref();
        let io = |e: io::Error| ManifestError::Io(format!("{}: {e}", path.display()));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        fs::write(path, buf).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest, ManifestError> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| ManifestError::Io(format!("{}: {e}", path.display())))?;
        Manifest::read_from(BufReader::new(f))
    }
}

fn parse_header(rest: &str) -> Result<(String, f64), String> {
    let mut name = None;
    let mut mpp = None;
    for part in rest.split('\t') {
        match part.split_once('=') {
            Some(("dataset_name", v)) => name = Some(v.to_string()),
            Some(("microns_per_pixel", v)) => {
                mpp = Some(v.parse::<f64>().map_err(|e| format!("microns_per_pixel: {e}"))?)
            }
            _ => return Err(format!("unrecognized header field '{part}'")),
        }
    }
    match (name, mpp) {
        (Some(n), Some(m)) => Ok((n, m)),
        _ => Err("header needs dataset_name and microns_per_pixel".into()),
    }
}
