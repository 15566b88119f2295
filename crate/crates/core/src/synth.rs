//! Procedural test videos and the corruption injectors.
//!
//! Base videos are rendered from a small scene description using only IEEE
//! basic arithmetic and SplitMix64, so every implementation that follows the
//! same recipe reproduces them sample for sample. Corruptions are pure
//! functions of `(video, event)`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::manifest::{DatasetManifest, ManifestEntry, Split, WeakLabel};
use crate::rng::{derive_seed, mix64, SplitMix64};
use crate::video::{Frame, Video, CHANNELS};

/// The closed catalog of visual corruptions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorruptionKind {
    Flicker,
    DisplayStride,
    Lines,
    GreenFlash,
    ColorSpaceChange,
    MessagePopup,
    MacroBlock,
    HalfScreen,
    BottomSplit,
    SuddenBlackout,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::Flicker,
        CorruptionKind::DisplayStride,
        CorruptionKind::Lines,
        CorruptionKind::GreenFlash,
        CorruptionKind::ColorSpaceChange,
        CorruptionKind::MessagePopup,
        CorruptionKind::MacroBlock,
        CorruptionKind::HalfScreen,
        CorruptionKind::BottomSplit,
        CorruptionKind::SuddenBlackout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Flicker => "Flicker",
            CorruptionKind::DisplayStride => "DisplayStride",
            CorruptionKind::Lines => "Lines",
            CorruptionKind::GreenFlash => "GreenFlash",
            CorruptionKind::ColorSpaceChange => "ColorSpaceChange",
            CorruptionKind::MessagePopup => "MessagePopup",
            CorruptionKind::MacroBlock => "MacroBlock",
            CorruptionKind::HalfScreen => "HalfScreen",
            CorruptionKind::BottomSplit => "BottomSplit",
            CorruptionKind::SuddenBlackout => "SuddenBlackout",
        }
    }

    /// Inclusive range event durations are drawn from, in frames.
    pub fn duration_range(self) -> (u64, u64) {
        match self {
            CorruptionKind::GreenFlash => (1, 3),
            CorruptionKind::SuddenBlackout => (8, 48),
            _ => (16, 128),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown corruption kind '{s}'")))
    }
}

/// One corruption applied to frames `[start, start + duration)`.
///
/// `params` holds the kind-specific scalars; missing keys fall back to the
/// kind's defaults (see [`inject`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionEvent {
    pub kind: CorruptionKind,
    pub start: usize,
    pub duration: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl CorruptionEvent {
    pub fn new(kind: CorruptionKind, start: usize, duration: usize) -> Self {
        Self {
            kind,
            start,
            duration,
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn end(&self) -> usize {
        self.start + self.duration
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Motion {
    DriftingGradient,
    BouncingRects,
    ScrollingBars,
}

impl Motion {
    const ALL: [Motion; 3] = [Motion::DriftingGradient, Motion::BouncingRects, Motion::ScrollingBars];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub motion: Motion,
    pub palette_seed: u64,
}

/// Triangle wave of period 1 with range `[-1, 1]`.
#[inline]
fn tri(u: f64) -> f64 {
    4.0 * (u - u.floor() - 0.5).abs() - 1.0
}

/// Position of a point bouncing between `0` and `span`.
fn bounce(u: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let m = u - (u / period).floor() * period;
    if m > span {
        period - m
    } else {
        m
    }
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Warm color: red ≥ green ≥ blue, red in `[lo, hi)`.
fn warm_color(rng: &mut SplitMix64, lo: f64, hi: f64) -> [f64; 3] {
    let r = rng.uniform(lo, hi);
    let g = r * rng.uniform(0.55, 0.85);
    let b = g * rng.uniform(0.45, 0.85);
    [r, g, b]
}

/// Small static texture value in `[-12, 12]` for a pixel.
#[inline]
fn texture(seed: u64, y: usize, x: usize) -> f64 {
    (mix64(seed ^ ((y as u64) << 32 | x as u64)) % 25) as f64 - 12.0
}

struct Rect {
    h: usize,
    w: usize,
    y0: f64,
    x0: f64,
    vy: f64,
    vx: f64,
    color: [f64; 3],
}

struct Bars {
    pitch: usize,
    cell: usize,
    speed: f64,
    color: [f64; 3],
}

/// Static application frame drawn over the moving content: a title bar, a
/// sidebar with menu entries and a status bar. It gives every scene fixed
/// spatial anchors, as captured test content has.
struct Chrome {
    title_rows: usize,
    side_cols: usize,
    status_rows: usize,
    item_pitch: usize,
    title: [f64; 3],
    panel: [f64; 3],
    item: [f64; 3],
    status: [f64; 3],
}

impl Chrome {
    fn color_at(&self, y: usize, x: usize, h: usize) -> Option<[f64; 3]> {
        if y < self.title_rows {
            return Some(self.title);
        }
        if y >= h - self.status_rows {
            return Some(self.status);
        }
        if x < self.side_cols {
            let within = (y - self.title_rows) % self.item_pitch;
            let entry = within >= self.item_pitch / 3 && within < self.item_pitch / 3 + 2;
            let inset = x >= 2 && x + 2 < self.side_cols;
            return Some(if entry && inset { self.item } else { self.panel });
        }
        None
    }
}

struct Scene {
    height: usize,
    width: usize,
    base: [f64; 3],
    amp_x: f64,
    amp_y: f64,
    period_x: f64,
    period_y: f64,
    drift_x: f64,
    drift_y: f64,
    tex_seed: u64,
    rects: Vec<Rect>,
    bars: Option<Bars>,
    chrome: Chrome,
}

impl Scene {
    fn new(spec: &SceneSpec, seed: u64) -> Self {
        let mut palette = SplitMix64::new(derive_seed(spec.palette_seed, &[0]));
        let base = warm_color(&mut palette, 110.0, 190.0);
        let accents: Vec<[f64; 3]> = (0..4).map(|_| warm_color(&mut palette, 150.0, 250.0)).collect();
        let ink = warm_color(&mut palette, 25.0, 60.0);
        let (h, w) = (spec.height as f64, spec.width as f64);
        let chrome = Chrome {
            title_rows: ((0.08 * h).round() as usize).max(1),
            side_cols: ((0.2 * w).round() as usize).max(1),
            status_rows: ((0.08 * h).round() as usize).max(1),
            item_pitch: ((0.1 * h).round() as usize).max(3),
            title: warm_color(&mut palette, 30.0, 70.0),
            panel: warm_color(&mut palette, 60.0, 100.0),
            item: warm_color(&mut palette, 180.0, 230.0),
            status: warm_color(&mut palette, 200.0, 250.0),
        };

        let mut rng = SplitMix64::new(derive_seed(seed, &[1]));
        let sign = |rng: &mut SplitMix64| if rng.below(2) == 0 { -1.0 } else { 1.0 };
        let fast = spec.motion == Motion::DriftingGradient;
        let speed = if fast { (0.8, 2.0) } else { (0.3, 0.9) };
        let amp_x = rng.uniform(0.10, 0.22);
        let amp_y = rng.uniform(0.10, 0.22);
        let period_x = w * rng.uniform(0.6, 1.5);
        let period_y = h * rng.uniform(0.6, 1.5);
        let drift_x = sign(&mut rng) * rng.uniform(speed.0, speed.1);
        let drift_y = sign(&mut rng) * rng.uniform(speed.0, speed.1);
        let tex_seed = rng.next_u64();

        let mut rects = Vec::new();
        let mut bars = None;
        match spec.motion {
            Motion::DriftingGradient => {}
            Motion::BouncingRects => {
                let n = rng.range_inclusive(2, 4);
                for i in 0..n {
                    let rh = ((h * rng.uniform(0.15, 0.35)) as usize).max(2);
                    let rw = ((w * rng.uniform(0.15, 0.35)) as usize).max(2);
                    rects.push(Rect {
                        h: rh,
                        w: rw,
                        y0: rng.uniform(0.0, h),
                        x0: rng.uniform(0.0, w),
                        vy: sign(&mut rng) * rng.uniform(0.6, 2.5),
                        vx: sign(&mut rng) * rng.uniform(0.6, 2.5),
                        color: accents[i as usize % accents.len()],
                    });
                }
            }
            Motion::ScrollingBars => {
                bars = Some(Bars {
                    pitch: rng.range_inclusive(7, 14) as usize,
                    cell: rng.range_inclusive(3, 6) as usize,
                    speed: rng.uniform(0.5, 2.0),
                    color: ink,
                });
            }
        }
        Scene {
            height: spec.height,
            width: spec.width,
            base,
            amp_x,
            amp_y,
            period_x,
            period_y,
            drift_x,
            drift_y,
            tex_seed,
            rects,
            bars,
            chrome,
        }
    }

    fn render(&self, t: usize, noise: &[f64]) -> Frame {
        let (h, w) = (self.height, self.width);
        let tf = t as f64;
        let cols: Vec<f64> = (0..w)
            .map(|x| self.amp_x * tri((x as f64 + self.drift_x * tf) / self.period_x))
            .collect();
        let rows: Vec<f64> = (0..h)
            .map(|y| self.amp_y * tri((y as f64 + self.drift_y * tf) / self.period_y))
            .collect();
        let mut data = vec![0u8; h * w * CHANNELS];
        let unit = self.base.map(|c| c / self.base[0]);
        for y in 0..h {
            for x in 0..w {
                let factor = 1.0 + cols[x] + rows[y];
                let n = noise[y * w + x];
                let i = (y * w + x) * CHANNELS;
                for c in 0..CHANNELS {
                    data[i + c] = to_u8(self.base[c] * factor + n * unit[c]);
                }
            }
        }
        if let Some(bars) = &self.bars {
            let shift = (bars.speed * tf).floor() as usize;
            let glyph_rows = bars.pitch.div_ceil(2);
            for y in 0..h {
                let doc = y + shift;
                let line = (doc / bars.pitch) as u64;
                if doc % bars.pitch >= glyph_rows {
                    continue;
                }
                for x in 0..w {
                    let cell = (x / bars.cell) as u64;
                    if mix64(self.tex_seed ^ (line << 24) ^ cell).is_multiple_of(4) {
                        continue;
                    }
                    let n = noise[y * w + x] * 0.5;
                    let i = (y * w + x) * CHANNELS;
                    for c in 0..CHANNELS {
                        data[i + c] = to_u8(bars.color[c] + n);
                    }
                }
            }
        }
        for r in &self.rects {
            let top = bounce(r.y0 + r.vy * tf, (h - r.h.min(h)) as f64).floor() as usize;
            let left = bounce(r.x0 + r.vx * tf, (w - r.w.min(w)) as f64).floor() as usize;
            for y in top..(top + r.h).min(h) {
                for x in left..(left + r.w).min(w) {
                    let n = texture(self.tex_seed ^ 0x5bd1, y - top, x - left);
                    let i = (y * w + x) * CHANNELS;
                    for c in 0..CHANNELS {
                        data[i + c] = to_u8(r.color[c] + n * 0.8);
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                if let Some(color) = self.chrome.color_at(y, x, h) {
                    let n = noise[y * w + x] * 0.3;
                    let i = (y * w + x) * CHANNELS;
                    for c in 0..CHANNELS {
                        data[i + c] = to_u8(color[c] + n);
                    }
                }
            }
        }
        Frame::new(h, w, data).expect("frame buffer sized by construction")
    }
}

/// Renders `n_frames` of moving, textured content. Deterministic in all inputs.
pub fn render_base_video(spec: &SceneSpec, n_frames: usize, seed: u64) -> Result<Video> {
    if spec.height < 16 || spec.width < 16 {
        return Err(Error::Config(format!(
            "scene resolution {}x{} is below 16x16",
            spec.height, spec.width
        )));
    }
    if n_frames == 0 {
        return Err(Error::EmptyInput("n_frames must be at least 1".into()));
    }
    let scene = Scene::new(spec, seed);
    let noise: Vec<f64> = (0..spec.height * spec.width)
        .map(|i| texture(scene.tex_seed, i / spec.width, i % spec.width))
        .collect();
    Video::new((0..n_frames).map(|t| scene.render(t, &noise)).collect())
}

/// Returns a copy of `video` with `event` applied.
pub fn inject(video: &Video, event: &CorruptionEvent) -> Result<Video> {
    let mut out = video.clone();
    inject_in_place(&mut out, event)?;
    Ok(out)
}

/// Applies a corruption to frames `[start, start + duration)` only.
///
/// Pixel definitions, with `i` the frame's offset inside the event:
///
/// * `GreenFlash`: every pixel becomes (0, 255, 0).
/// * `SuddenBlackout`: every sample becomes 0.
/// * `HalfScreen`: the left `⌈w/2⌉` columns become 0.
/// * `BottomSplit` (`fraction`, 0.25): the bottom `⌈f·h⌉` rows (at most `h/2`)
///   are replaced by a copy of the rows directly above them.
/// * `Lines` (`spacing` k, 8; `vertical`, 0): rows (or columns when
///   `vertical != 0`) with index `≡ 0 mod k` become white.
/// * `Flicker` (`gain` g, 1.6): even `i` scales samples by g, rounded half-up
///   and clamped to 255; odd `i` is untouched.
/// * `DisplayStride` (`offset` δ, 2): row r is rotated left by `r·δ mod w`.
/// * `ColorSpaceChange`: channels rotate R→G→B→R.
/// * `MessagePopup` (`x`, `y`, `width`, `height`; default a centered box of
///   half the width and a quarter of the height): interior 200, 1-pixel black
///   border, clipped to the frame.
/// * `MacroBlock` (`blocks` n, 6; `seed`, 0): n 16×16 blocks per frame, with
///   position and color drawn from `SplitMix64(derive_seed(seed, [i]))`.
pub fn inject_in_place(video: &mut Video, event: &CorruptionEvent) -> Result<()> {
    if event.duration == 0 || event.end() > video.len() {
        return Err(Error::Range(format!(
            "event [{}, {}) outside video of {} frames",
            event.start,
            event.end(),
            video.len()
        )));
    }
    for (i, frame) in video.frames_mut()[event.start..event.end()].iter_mut().enumerate() {
        corrupt_frame(frame, event, i);
    }
    Ok(())
}

fn corrupt_frame(frame: &mut Frame, event: &CorruptionEvent, offset: usize) {
    let (h, w) = (frame.height(), frame.width());
    match event.kind {
        CorruptionKind::GreenFlash => {
            for px in frame.data_mut().chunks_exact_mut(CHANNELS) {
                px.copy_from_slice(&[0, 255, 0]);
            }
        }
        CorruptionKind::SuddenBlackout => frame.data_mut().fill(0),
        CorruptionKind::HalfScreen => {
            let cols = w.div_ceil(2);
            for r in 0..h {
                frame.row_mut(r)[..cols * CHANNELS].fill(0);
            }
        }
        CorruptionKind::BottomSplit => {
            let f = event.param("fraction", 0.25).clamp(0.0, 1.0);
            let n = ((f * h as f64).ceil() as usize).min(h / 2);
            let stride = w * CHANNELS;
            let data = frame.data_mut();
            data.copy_within((h - 2 * n) * stride..(h - n) * stride, (h - n) * stride);
        }
        CorruptionKind::Lines => {
            let k = (event.param("spacing", 8.0).round() as usize).max(1);
            if event.param("vertical", 0.0) != 0.0 {
                for r in 0..h {
                    for c in (0..w).step_by(k) {
                        frame.set_pixel(r, c, [255, 255, 255]);
                    }
                }
            } else {
                for r in (0..h).step_by(k) {
                    frame.row_mut(r).fill(255);
                }
            }
        }
        CorruptionKind::Flicker => {
            if offset.is_multiple_of(2) {
                let g = event.param("gain", 1.6).max(0.0);
                for v in frame.data_mut() {
                    *v = (*v as f64 * g + 0.5).floor().min(255.0) as u8;
                }
            }
        }
        CorruptionKind::DisplayStride => {
            let delta = event.param("offset", 2.0).round().max(0.0) as usize;
            for r in 0..h {
                let shift = (r * delta) % w;
                frame.row_mut(r).rotate_left(shift * CHANNELS);
            }
        }
        CorruptionKind::ColorSpaceChange => {
            for px in frame.data_mut().chunks_exact_mut(CHANNELS) {
                let [r, g, b] = [px[0], px[1], px[2]];
                px.copy_from_slice(&[b, r, g]);
            }
        }
        CorruptionKind::MessagePopup => {
            let bw = event.param("width", (w / 2) as f64).round().max(1.0) as usize;
            let bh = event.param("height", (h / 4) as f64).round().max(1.0) as usize;
            let x0 = event.param("x", ((w - bw.min(w)) / 2) as f64).round().max(0.0) as usize;
            let y0 = event.param("y", ((h - bh.min(h)) / 2) as f64).round().max(0.0) as usize;
            let (x1, y1) = (x0 + bw, y0 + bh);
            for r in y0..y1.min(h) {
                for c in x0..x1.min(w) {
                    let edge = r == y0 || r == y1 - 1 || c == x0 || c == x1 - 1;
                    let v = if edge { 0 } else { 200 };
                    frame.set_pixel(r, c, [v, v, v]);
                }
            }
        }
        CorruptionKind::MacroBlock => {
            let blocks = event.param("blocks", 6.0).round().max(0.0) as usize;
            let seed = event.param("seed", 0.0) as u64;
            let mut rng = SplitMix64::new(derive_seed(seed, &[offset as u64]));
            let (bh, bw) = (16.min(h), 16.min(w));
            for _ in 0..blocks {
                let y0 = rng.below((h - bh + 1) as u64) as usize;
                let x0 = rng.below((w - bw + 1) as u64) as usize;
                let color = [rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8];
                for r in y0..y0 + bh {
                    for c in x0..x0 + bw {
                        frame.set_pixel(r, c, color);
                    }
                }
            }
        }
    }
}

/// Draws kind-specific parameters for a generated event.
fn draw_params(kind: CorruptionKind, h: usize, w: usize, rng: &mut SplitMix64) -> BTreeMap<String, f64> {
    let mut p = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        p.insert(k.to_string(), v);
    };
    match kind {
        CorruptionKind::Flicker => put("gain", rng.uniform(1.5, 2.2)),
        CorruptionKind::DisplayStride => put("offset", rng.range_inclusive(1, 6) as f64),
        CorruptionKind::Lines => {
            put("spacing", rng.range_inclusive(3, 8) as f64);
            put("vertical", rng.below(2) as f64);
        }
        CorruptionKind::BottomSplit => put("fraction", rng.uniform(0.2, 0.45)),
        CorruptionKind::MessagePopup => {
            let bw = ((w as f64 * rng.uniform(0.3, 0.6)) as usize).max(3);
            let bh = ((h as f64 * rng.uniform(0.15, 0.35)) as usize).max(3);
            put("width", bw as f64);
            put("height", bh as f64);
            put("x", rng.below((w - bw + 1) as u64) as f64);
            put("y", rng.below((h - bh + 1) as u64) as f64);
        }
        CorruptionKind::MacroBlock => {
            put("blocks", rng.range_inclusive(4, 12) as f64);
            put("seed", (rng.next_u64() >> 32) as f64);
        }
        _ => {}
    }
    p
}

fn default_events_per_positive() -> (u64, u64) {
    (1, 2)
}

fn default_kinds() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}

fn default_side() -> usize {
    crate::video::FRAME_SIDE
}

fn default_frames() -> usize {
    crate::video::BAG_LEN
}

fn default_one() -> f64 {
    1.0
}

fn default_fraction() -> f64 {
    0.2
}

/// Settings for a synthetic weakly labeled corpus.
///
/// Each label group is split in order: the first videos go to training, then
/// `round(n·validation_fraction)` to validation and `round(n·test_fraction)`
/// to test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub n_corrupted: usize,
    pub n_normal: usize,
    #[serde(default = "default_frames")]
    pub frames_per_video: usize,
    /// Probability that a corrupted-labeled video actually contains events.
    #[serde(default = "default_one")]
    pub p_corrupt: f64,
    #[serde(default = "default_events_per_positive")]
    pub events_per_positive: (u64, u64),
    pub seed: u64,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<CorruptionKind>,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
}

fn default_version() -> u32 {
    1
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            version: 1,
            n_corrupted: 30,
            n_normal: 30,
            frames_per_video: default_frames(),
            p_corrupt: 1.0,
            events_per_positive: default_events_per_positive(),
            seed: 7,
            height: default_side(),
            width: default_side(),
            kinds: default_kinds(),
            validation_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.p_corrupt) {
            return fail(format!("p_corrupt {} outside [0, 1]", self.p_corrupt));
        }
        if self.frames_per_video == 0 {
            return fail("frames_per_video must be positive".into());
        }
        if self.height < 16 || self.width < 16 {
            return fail(format!("resolution {}x{} below 16x16", self.height, self.width));
        }
        let (lo, hi) = self.events_per_positive;
        if lo == 0 || lo > hi {
            return fail(format!("events_per_positive [{lo}, {hi}] must satisfy 1 <= lo <= hi"));
        }
        if self.kinds.is_empty() && self.n_corrupted > 0 && self.p_corrupt > 0.0 {
            return fail("no corruption kinds enabled".into());
        }
        let (v, t) = (self.validation_fraction, self.test_fraction);
        if !(0.0..=1.0).contains(&v) || !(0.0..=1.0).contains(&t) || v + t > 1.0 {
            return fail(format!("split fractions {v} + {t} must lie in [0, 1]"));
        }
        Ok(())
    }

    fn split_of(&self, index_in_group: usize, group_size: usize) -> Split {
        let n_val = (group_size as f64 * self.validation_fraction).round() as usize;
        let n_test = (group_size as f64 * self.test_fraction).round() as usize;
        let n_train = group_size.saturating_sub(n_val + n_test);
        if index_in_group < n_train {
            Split::Train
        } else if index_in_group < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

/// Everything needed to render one video of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPlan {
    pub entry: ManifestEntry,
    pub scene: SceneSpec,
    pub render_seed: u64,
    pub n_frames: usize,
}

impl VideoPlan {
    pub fn render(&self) -> Result<Video> {
        let mut video = render_base_video(&self.scene, self.n_frames, self.render_seed)?;
        for e in &self.entry.events {
            inject_in_place(&mut video, e)?;
        }
        Ok(video)
    }
}

/// Plans every video of the dataset without rendering any pixels.
///
/// Corrupted-labeled videos come first (`videos/c00000.wmv`, ...), then
/// normal ones (`videos/n00000.wmv`, ...). Video `i` draws its scene from
/// `derive_seed(seed, [1, i])`, its event count from `derive_seed(seed, [2, i])`
/// and event `e` from `derive_seed(seed, [3, i, e])`.
pub fn plan_dataset(config: &GeneratorConfig) -> Result<Vec<VideoPlan>> {
    config.validate()?;
    let total = config.n_corrupted + config.n_normal;
    let mut plans = Vec::with_capacity(total);
    for i in 0..total {
        let corrupted = i < config.n_corrupted;
        let (group_idx, group_size) = if corrupted {
            (i, config.n_corrupted)
        } else {
            (i - config.n_corrupted, config.n_normal)
        };
        let mut rng = SplitMix64::new(derive_seed(config.seed, &[1, i as u64]));
        let motion = Motion::ALL[rng.below(3) as usize];
        let scene = SceneSpec {
            height: config.height,
            width: config.width,
            motion,
            palette_seed: rng.next_u64(),
        };
        let render_seed = rng.next_u64();

        let mut events = Vec::new();
        if corrupted {
            let mut count_rng = SplitMix64::new(derive_seed(config.seed, &[2, i as u64]));
            if count_rng.next_f64() < config.p_corrupt {
                let (lo, hi) = config.events_per_positive;
                let n = count_rng.range_inclusive(lo, hi);
                for e in 0..n {
                    let mut erng = SplitMix64::new(derive_seed(config.seed, &[3, i as u64, e]));
                    let kind = config.kinds[erng.below(config.kinds.len() as u64) as usize];
                    let (dlo, dhi) = kind.duration_range();
                    let duration = (erng.range_inclusive(dlo, dhi) as usize).min(config.frames_per_video);
                    let start = erng.below((config.frames_per_video - duration + 1) as u64) as usize;
                    events.push(CorruptionEvent {
                        kind,
                        start,
                        duration,
                        params: draw_params(kind, config.height, config.width, &mut erng),
                    });
                }
            }
        }
        let prefix = if corrupted { 'c' } else { 'n' };
        plans.push(VideoPlan {
            entry: ManifestEntry {
                path: format!("videos/{prefix}{group_idx:05}.wmv"),
                label: WeakLabel::from(corrupted),
                split: config.split_of(group_idx, group_size),
                events,
            },
            scene,
            render_seed,
            n_frames: config.frames_per_video,
        });
    }
    Ok(plans)
}

/// Renders the dataset into `out_dir` (videos plus `manifest.json`).
pub fn generate_dataset(config: &GeneratorConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let plans = plan_dataset(config)?;
    std::fs::create_dir_all(out_dir.join("videos")).map_err(|e| Error::io(out_dir, e))?;
    for plan in &plans {
        formats::write_video(out_dir.join(&plan.entry.path), &plan.render()?)?;
    }
    let manifest = DatasetManifest::new(plans.into_iter().map(|p| p.entry).collect());
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
