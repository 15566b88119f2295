//! Per-segment feature extraction.
//!
//! The built-in descriptor summarizes a 16-frame segment by its mean frame
//! and its mean absolute temporal difference, both area-downsampled to a
//! 14×14×3 grid and scaled to `[0, 1]`. Externally computed features (for
//! example 4096-dim clip embeddings) enter through WMIL files instead.

use std::path::Path;

use crate::error::{Error, Result};
use crate::formats;
use crate::video::{area_resample_f64, make_bags, BagGeometry, Segment, Video, CHANNELS, FRAME_SIDE};

/// Side of the spatial grid the descriptor is pooled onto.
pub const GRID: usize = 14;
/// Dimension of the built-in descriptor: mean and difference planes of 14×14×3.
pub const BUILTIN_DIM: usize = 2 * GRID * GRID * CHANNELS;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// The feature vectors of one bag, stored segment-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub id: String,
    n_segments: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureBag {
    pub fn new(id: impl Into<String>, n_segments: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n_segments == 0 || dim == 0 {
            return Err(Error::EmptyInput("feature bag needs segments and a nonzero dimension".into()));
        }
        if values.len() != n_segments * dim {
            return Err(Error::Shape(format!(
                "{n_segments} segments of dim {dim} need {} values, got {}",
                n_segments * dim,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature value at index {bad}")));
        }
        Ok(Self {
            id: id.into(),
            n_segments,
            dim,
            values,
        })
    }

    pub fn from_vectors(id: impl Into<String>, vectors: Vec<FeatureVector>) -> Result<Self> {
        let dim = vectors.first().map(FeatureVector::dim).unwrap_or(0);
        if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::Shape(format!("mixed feature dims {dim} and {}", v.dim())));
        }
        let n = vectors.len();
        let values = vectors.into_iter().flat_map(|v| v.0).collect();
        Self::new(id, n, dim, values)
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn segment(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn segments(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }
}

/// Mean frame and mean absolute temporal difference of a segment, as floats
/// in `[0, 255]`, each `h × w × 3`.
fn segment_planes(segment: &Segment<'_>) -> (Vec<f64>, Vec<f64>) {
    let frames = segment.frames();
    let n = frames[0].data().len();
    let mut sum = vec![0u32; n];
    let mut diff = vec![0u32; n];
    for (t, frame) in frames.iter().enumerate() {
        let data = frame.data();
        for (s, &v) in sum.iter_mut().zip(data) {
            *s += v as u32;
        }
        if t > 0 {
            let prev = frames[t - 1].data();
            for ((d, &a), &b) in diff.iter_mut().zip(data).zip(prev) {
                *d += a.abs_diff(b) as u32;
            }
        }
    }
    let count = frames.len() as f64;
    let pairs = (frames.len() - 1) as f64;
    let mean = sum.iter().map(|&s| s as f64 / count).collect();
    let tdiff = diff.iter().map(|&d| d as f64 / pairs).collect();
    (mean, tdiff)
}

/// Built-in descriptor of a 16-frame segment of 112×112 frames.
///
/// Layout: the downsampled mean plane then the downsampled difference plane,
/// each row-major with channels innermost, all divided by 255.
pub fn extract_segment_features(segment: &Segment<'_>) -> Result<FeatureVector> {
    let frames = segment.frames();
    if frames.len() < 2 {
        return Err(Error::Shape(format!(
            "segment needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if let Some(f) = frames.iter().find(|f| f.height() != FRAME_SIDE || f.width() != FRAME_SIDE) {
        return Err(Error::Shape(format!(
            "segment frames must be {FRAME_SIDE}x{FRAME_SIDE}, got {}x{}",
            f.height(),
            f.width()
        )));
    }
    let (mean, tdiff) = segment_planes(segment);
    let mut out = Vec::with_capacity(BUILTIN_DIM);
    for plane in [mean, tdiff] {
        let pooled = area_resample_f64(&plane, FRAME_SIDE, FRAME_SIDE, CHANNELS, GRID, GRID);
        out.extend(pooled.into_iter().map(|v| v / 255.0));
    }
    Ok(FeatureVector(out))
}

/// Resizes a video to 112×112, cuts it into bags and describes every segment.
///
/// Bag ids are `"{source_id}@{start_frame}"`.
pub fn extract_video_features(video: Video, source_id: &str, geometry: BagGeometry) -> Result<Vec<FeatureBag>> {
    geometry.validate()?;
    let video = video.resized(FRAME_SIDE, FRAME_SIDE)?;
    make_bags(&video, source_id, geometry)?
        .iter()
        .map(|bag| {
            let vectors = bag
                .segments
                .iter()
                .map(extract_segment_features)
                .collect::<Result<Vec<_>>>()?;
            FeatureBag::from_vectors(format!("{}@{}", bag.source_id, bag.start_frame), vectors)
        })
        .collect()
}

/// Loads precomputed features (any dimension) from a WMIL file.
pub fn import_external_features(path: impl AsRef<Path>) -> Result<Vec<FeatureBag>> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = formats::read_features(path)?;
    file.into_bags(&stem)
}

/// Checks that a collection of bags shares one geometry, returning
/// `(segments_per_bag, dim)`.
pub fn uniform_shape<'a>(bags: impl IntoIterator<Item = &'a FeatureBag>) -> Result<(usize, usize)> {
    let mut shape = None;
    for bag in bags {
        let s = (bag.n_segments(), bag.dim());
        match shape {
            None => shape = Some(s),
            Some(prev) if prev != s => {
                return Err(Error::Config(format!(
                    "bag {} has {} segments of dim {}, expected {} of dim {}",
                    bag.id, s.0, s.1, prev.0, prev.1
                )))
            }
            _ => {}
        }
    }
    shape.ok_or_else(|| Error::EmptyInput("no feature bags".into()))
}
