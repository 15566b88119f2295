//! Frames, videos, and their decomposition into bags of fixed-length segments.

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Default number of frames per bag.
pub const BAG_LEN: usize = 512;
/// Default number of frames per segment.
pub const SEG_LEN: usize = 16;
/// Default side length frames are resized to before feature extraction.
pub const FRAME_SIDE: usize = 112;

/// An 8-bit RGB frame stored row-major, channel-minor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "frame {height}x{width} needs {} samples, got {}",
                height * width * CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * CHANNELS).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    pub fn row(&self, row: usize) -> &[u8] {
        let stride = self.width * CHANNELS;
        &self.data[row * stride..(row + 1) * stride]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [u8] {
        let stride = self.width * CHANNELS;
        &mut self.data[row * stride..(row + 1) * stride]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// An ordered sequence of equally sized frames.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Video {
    frames: Vec<Frame>,
}

impl Video {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if let Some(bad) = frames.iter().position(|f| !f.same_shape(first)) {
                return Err(Error::Shape(format!(
                    "frame {bad} is {}x{}, expected {}x{}",
                    frames[bad].height, frames[bad].width, first.height, first.width
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Frame] {
        &mut self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of every frame, or `None` for an empty video.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height, f.width))
    }

    /// Resizes every frame; a no-op when the video is already at the target size.
    pub fn resized(self, out_h: usize, out_w: usize) -> Result<Video> {
        match self.dims() {
            Some((h, w)) if h == out_h && w == out_w => Ok(self),
            _ => {
                let frames = self
                    .frames
                    .iter()
                    .map(|f| resize_frame(f, out_h, out_w))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Video { frames })
            }
        }
    }
}

/// A contiguous run of `seg_len` frames, the unit that gets scored.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    frames: &'a [Frame],
}

impl<'a> Segment<'a> {
    pub fn new(frames: &'a [Frame]) -> Self {
        Self { frames }
    }

    pub fn frames(&self) -> &'a [Frame] {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A contiguous stretch of a video split into consecutive segments.
#[derive(Clone, Debug)]
pub struct Bag<'a> {
    pub source_id: String,
    pub start_frame: usize,
    pub segments: Vec<Segment<'a>>,
}

impl Bag<'_> {
    pub fn n_frames(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }
}

/// Bag and segment lengths in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BagGeometry {
    pub bag_len: usize,
    pub seg_len: usize,
}

impl Default for BagGeometry {
    fn default() -> Self {
        Self {
            bag_len: BAG_LEN,
            seg_len: SEG_LEN,
        }
    }
}

impl BagGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.seg_len == 0 || self.bag_len == 0 || !self.bag_len.is_multiple_of(self.seg_len) {
            return Err(Error::Config(format!(
                "segment length {} must divide bag length {}",
                self.seg_len, self.bag_len
            )));
        }
        Ok(())
    }

    pub fn segments_per_bag(&self) -> usize {
        self.bag_len / self.seg_len
    }

    /// Frame ranges `[start, end)` of the bags a video of `n_frames` yields.
    pub fn bag_ranges(&self, n_frames: usize) -> impl Iterator<Item = (usize, usize)> {
        let len = self.bag_len;
        (0..n_frames / len.max(1)).map(move |b| (b * len, (b + 1) * len))
    }
}

/// Splits a video into `⌊n/bag_len⌋` bags of `bag_len / seg_len` segments.
///
/// Trailing frames that do not fill a whole bag are dropped.
pub fn make_bags<'a>(video: &'a Video, source_id: &str, geometry: BagGeometry) -> Result<Vec<Bag<'a>>> {
    geometry.validate()?;
    if video.is_empty() {
        return Err(Error::EmptyInput("video has no frames".into()));
    }
    let bags = geometry
        .bag_ranges(video.len())
        .map(|(start, end)| Bag {
            source_id: source_id.to_string(),
            start_frame: start,
            segments: video.frames[start..end]
                .chunks_exact(geometry.seg_len)
                .map(Segment::new)
                .collect(),
        })
        .collect();
    Ok(bags)
}

/// Overlap weights of an area-average resampling along one axis.
///
/// Output cell `o` spans `[o*n_in, (o+1)*n_in)` and input cell `i` spans
/// `[i*n_out, (i+1)*n_out)` in a common integer coordinate system, so the
/// weights for each output cell are exact integers summing to `n_in`.
pub(crate) fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, u64)>> {
    (0..n_out)
        .map(|o| {
            let lo = o * n_in;
            let hi = lo + n_in;
            let first = lo / n_out;
            let last = (hi - 1) / n_out;
            (first..=last)
                .filter_map(|i| {
                    let start = (i * n_out).max(lo);
                    let end = ((i + 1) * n_out).min(hi);
                    (end > start).then_some((i, (end - start) as u64))
                })
                .collect()
        })
        .collect()
}

/// Area-average resampling to `out_h × out_w`.
///
/// Each output sample is the exact mean of its source box (fractional
/// coverage weighted by area), rounded half-up to 8 bits.
pub fn resize_frame(frame: &Frame, out_h: usize, out_w: usize) -> Result<Frame> {
    if frame.height == 0 || frame.width == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::EmptyInput(format!(
            "cannot resize {}x{} to {out_h}x{out_w}",
            frame.height, frame.width
        )));
    }
    if frame.height == out_h && frame.width == out_w {
        return Ok(frame.clone());
    }
    let rows = area_weights(frame.height, out_h);
    let cols = area_weights(frame.width, out_w);
    let denom = (frame.height * frame.width) as u64;
    let mut out = vec![0u8; out_h * out_w * CHANNELS];
    let mut acc = [0u64; CHANNELS];
    for (oy, row_w) in rows.iter().enumerate() {
        for (ox, col_w) in cols.iter().enumerate() {
            acc.fill(0);
            for &(sy, wy) in row_w {
                let src = frame.row(sy);
                for &(sx, wx) in col_w {
                    let w = wy * wx;
                    let p = &src[sx * CHANNELS..sx * CHANNELS + CHANNELS];
                    for c in 0..CHANNELS {
                        acc[c] += w * p[c] as u64;
                    }
                }
            }
            let o = (oy * out_w + ox) * CHANNELS;
            for c in 0..CHANNELS {
                out[o + c] = ((2 * acc[c] + denom) / (2 * denom)) as u8;
            }
        }
    }
    Frame::new(out_h, out_w, out)
}

/// Area-average resampling of a float plane with `channels` interleaved channels.
///
/// Per output sample the weighted source values are summed in row-major order
/// and divided once by the box area.
pub fn area_resample_f64(
    src: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), height * width * channels);
    let rows = area_weights(height, out_h);
    let cols = area_weights(width, out_w);
    let denom = (height * width) as f64;
    let mut out = vec![0.0; out_h * out_w * channels];
    for (oy, row_w) in rows.iter().enumerate() {
        for (ox, col_w) in cols.iter().enumerate() {
            let o = (oy * out_w + ox) * channels;
            for &(sy, wy) in row_w {
                for &(sx, wx) in col_w {
                    let w = (wy * wx) as f64;
                    let s = (sy * width + sx) * channels;
                    for c in 0..channels {
                        out[o + c] += w * src[s + c];
                    }
                }
            }
            for v in &mut out[o..o + channels] {
                *v /= denom;
            }
        }
    }
    out
}

/// Square crop around the frame center; `size` must not exceed either dimension.
pub fn center_crop(frame: &Frame, size: usize) -> Result<Frame> {
    if size > frame.height || size > frame.width {
        return Err(Error::Shape(format!(
            "cannot crop {size}x{size} from {}x{}",
            frame.height, frame.width
        )));
    }
    let top = (frame.height - size) / 2;
    let left = (frame.width - size) / 2;
    let mut data = Vec::with_capacity(size * size * CHANNELS);
    for r in top..top + size {
        data.extend_from_slice(&frame.row(r)[left * CHANNELS..(left + size) * CHANNELS]);
    }
    Frame::new(size, size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_video(n: usize, h: usize, w: usize) -> Video {
        let frames = (0..n)
            .map(|t| {
                let data = (0..h * w * CHANNELS).map(|i| ((i + t * 7) % 251) as u8).collect();
                Frame::new(h, w, data).unwrap()
            })
            .collect();
        Video::new(frames).unwrap()
    }

    // Independent box-average oracle: integrates the source image over each
    // output box using rational coordinates, one pixel at a time.
    fn naive_resize(frame: &Frame, out_h: usize, out_w: usize) -> Frame {
        let (h, w) = (frame.height(), frame.width());
        let mut out = Frame::filled(out_h, out_w, [0, 0, 0]);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut sums = [0u64; 3];
                for sy in 0..h {
                    let oy_lo = oy * h;
                    let oy_hi = (oy + 1) * h;
                    let ov_y = ((sy + 1) * out_h).min(oy_hi).saturating_sub((sy * out_h).max(oy_lo));
                    if ov_y == 0 {
                        continue;
                    }
                    for sx in 0..w {
                        let ox_lo = ox * w;
                        let ox_hi = (ox + 1) * w;
                        let ov_x = ((sx + 1) * out_w).min(ox_hi).saturating_sub((sx * out_w).max(ox_lo));
                        let p = frame.pixel(sy, sx);
                        for c in 0..3 {
                            sums[c] += (ov_y * ov_x) as u64 * p[c] as u64;
                        }
                    }
                }
                let area = (h * w) as f64;
                let px = sums.map(|s| (s as f64 / area + 0.5).floor() as u8);
                out.set_pixel(oy, ox, px);
            }
        }
        out
    }

    #[test]
    fn one_bag_from_512_frames() {
        let video = ramp_video(512, 2, 2);
        let bags = make_bags(&video, "v", BagGeometry::default()).unwrap();
        assert_eq!(bags.len(), 1);
        assert_eq!(bags[0].segments.len(), 32);
        assert!(bags[0].segments.iter().all(|s| s.len() == 16));
    }

    #[test]
    fn second_bag_starts_at_512() {
        let video = ramp_video(1024, 2, 2);
        let bags = make_bags(&video, "v", BagGeometry::default()).unwrap();
        assert_eq!(bags.len(), 2);
        assert_eq!(bags[1].start_frame, 512);
        assert_eq!(bags[1].segments[0].frames()[0], video.frames()[512]);
    }

    #[test]
    fn short_video_yields_no_bags() {
        let video = ramp_video(300, 2, 2);
        assert!(make_bags(&video, "v", BagGeometry::default()).unwrap().is_empty());
    }

    #[test]
    fn bag_errors() {
        let video = ramp_video(32, 2, 2);
        let bad = BagGeometry {
            bag_len: 512,
            seg_len: 15,
        };
        assert!(matches!(make_bags(&video, "v", bad), Err(Error::Config(_))));
        let empty = Video::default();
        assert!(matches!(
            make_bags(&empty, "v", BagGeometry::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn resize_identity_and_constant() {
        let f = ramp_video(1, 112, 112).frames()[0].clone();
        assert_eq!(resize_frame(&f, 112, 112).unwrap(), f);
        let c = Frame::filled(224, 224, [37, 37, 37]);
        assert_eq!(resize_frame(&c, 112, 112).unwrap(), Frame::filled(112, 112, [37, 37, 37]));
    }

    #[test]
    fn checkerboard_rounds_half_up() {
        let mut f = Frame::filled(224, 224, [0, 0, 0]);
        for r in 0..224 {
            for c in 0..224 {
                if (r + c) % 2 == 0 {
                    f.set_pixel(r, c, [255, 255, 255]);
                }
            }
        }
        let out = resize_frame(&f, 112, 112).unwrap();
        assert_eq!(out, naive_resize(&f, 112, 112));
        assert!(out.data().iter().all(|&v| v == 128));
    }

    #[test]
    fn resize_rejects_empty() {
        let f = Frame::new(0, 4, vec![]).unwrap();
        assert!(matches!(resize_frame(&f, 112, 112), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn crop_takes_center() {
        let f = ramp_video(1, 112, 112).frames()[0].clone();
        let c = center_crop(&f, 96).unwrap();
        assert_eq!(c.pixel(0, 0), f.pixel(8, 8));
        assert_eq!(c.pixel(95, 95), f.pixel(103, 103));
        assert!(center_crop(&f, 113).is_err());
    }

    proptest! {
        #[test]
        fn bags_partition_the_prefix(n in 1usize..1700, seg_pow in 0u32..5) {
            let seg_len = 1usize << seg_pow;
            let geometry = BagGeometry { bag_len: 512, seg_len };
            let video = ramp_video(n, 1, 1);
            let bags = make_bags(&video, "v", geometry).unwrap();
            prop_assert_eq!(bags.len(), n / 512);
            let joined: Vec<&Frame> = bags
                .iter()
                .flat_map(|b| b.segments.iter().flat_map(|s| s.frames().iter()))
                .collect();
            let prefix: Vec<&Frame> = video.frames()[..(n / 512) * 512].iter().collect();
            prop_assert_eq!(joined, prefix);
        }

        #[test]
        fn resize_matches_oracle(h in 1usize..24, w in 1usize..24, oh in 1usize..20, ow in 1usize..20, seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data = (0..h * w * 3).map(|_| rng.below(256) as u8).collect();
            let f = Frame::new(h, w, data).unwrap();
            prop_assert_eq!(resize_frame(&f, oh, ow).unwrap(), naive_resize(&f, oh, ow));
        }

        #[test]
        fn resize_preserves_constants(h in 1usize..40, w in 1usize..40, v in any::<u8>()) {
            let f = Frame::filled(h, w, [v, v, v]);
            prop_assert_eq!(resize_frame(&f, 112, 112).unwrap(), Frame::filled(112, 112, [v, v, v]));
        }
    }
}
