//! Binary on-disk formats: WMIL feature files and the raw video container.
//!
//! All integers and floats are little-endian.
//!
//! Feature file (`.wmil`):
//!
//! ```text
//! "WMIL" | u32 version=1 | u32 n_bags | u32 segs_per_bag | u32 dim
//! f32 × n_bags·segs_per_bag·dim   (bag-major, then segment, then dim)
//! ```
//!
//! Video container (`.wmv`):
//!
//! ```text
//! "WMVD" | u32 version=1 | u32 n_frames | u32 height | u32 width | u32 channels=3
//! u8 × n_frames·height·width·3     (frame-major, row-major, RGB interleaved)
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::video::{Frame, Video, CHANNELS};

pub const FEATURE_MAGIC: &[u8; 4] = b"WMIL";
pub const VIDEO_MAGIC: &[u8; 4] = b"WMVD";
pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 20;

/// Contents of a WMIL file, kept as raw 32-bit values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub n_bags: u32,
    pub segs_per_bag: u32,
    pub dim: u32,
    pub values: Vec<f32>,
}

impl FeatureFile {
    /// Packs bags that share one geometry; values are rounded to f32.
    pub fn from_bags(bags: &[FeatureBag]) -> Result<Self> {
        let (segs, dim) = crate::features::uniform_shape(bags)?;
        let values = bags
            .iter()
            .flat_map(|b| b.values().iter().map(|&v| v as f32))
            .collect();
        Ok(Self {
            n_bags: bags.len() as u32,
            segs_per_bag: segs as u32,
            dim: dim as u32,
            values,
        })
    }

    /// Promotes the stored values to f64 bags named `{prefix}#{index}`.
    pub fn into_bags(self, prefix: &str) -> Result<Vec<FeatureBag>> {
        let per_bag = self.segs_per_bag as usize * self.dim as usize;
        if per_bag == 0 {
            return Ok(Vec::new());
        }
        self.values
            .chunks_exact(per_bag)
            .enumerate()
            .map(|(i, chunk)| {
                FeatureBag::new(
                    format!("{prefix}#{i}"),
                    self.segs_per_bag as usize,
                    self.dim as usize,
                    chunk.iter().map(|&v| v as f64).collect(),
                )
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        for v in [FORMAT_VERSION, self.n_bags, self.segs_per_bag, self.dim] {
            out.write_u32::<LittleEndian>(v).unwrap();
        }
        for &v in &self.values {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        read_magic(&mut cur, FEATURE_MAGIC)?;
        let version = read_u32(&mut cur)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        let n_bags = read_u32(&mut cur)?;
        let segs_per_bag = read_u32(&mut cur)?;
        let dim = read_u32(&mut cur)?;
        if segs_per_bag == 0 || dim == 0 {
            return Err(Error::Format("feature file declares zero segments or zero dim".into()));
        }
        let count = (n_bags as u64)
            .checked_mul(segs_per_bag as u64)
            .and_then(|c| c.checked_mul(dim as u64))
            .ok_or_else(|| Error::Format("feature file dimensions overflow".into()))?;
        let payload = (bytes.len() - FEATURE_HEADER_LEN) as u64;
        if payload != count * 4 {
            return Err(Error::Corrupt(format!(
                "feature payload is {payload} bytes, header implies {}",
                count * 4
            )));
        }
        let mut values = vec![0f32; count as usize];
        cur.read_f32_into::<LittleEndian>(&mut values)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(Self {
            n_bags,
            segs_per_bag,
            dim,
            values,
        })
    }
}

pub fn write_features(path: impl AsRef<Path>, bags: &[FeatureBag]) -> Result<()> {
    let file = FeatureFile::from_bags(bags)?;
    write_bytes(path, &file.encode())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    FeatureFile::decode(&read_bytes(path)?)
}

pub fn encode_video(video: &Video) -> Vec<u8> {
    let (h, w) = video.dims().unwrap_or((0, 0));
    let mut out = Vec::with_capacity(24 + video.len() * h * w * CHANNELS);
    out.extend_from_slice(VIDEO_MAGIC);
    for v in [FORMAT_VERSION, video.len() as u32, h as u32, w as u32, CHANNELS as u32] {
        out.write_u32::<LittleEndian>(v).unwrap();
    }
    for f in video.frames() {
        out.extend_from_slice(f.data());
    }
    out
}

pub fn decode_video(bytes: &[u8]) -> Result<Video> {
    let mut cur = Cursor::new(bytes);
    read_magic(&mut cur, VIDEO_MAGIC)?;
    let version = read_u32(&mut cur)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported video version {version}")));
    }
    let n = read_u32(&mut cur)? as usize;
    let h = read_u32(&mut cur)? as usize;
    let w = read_u32(&mut cur)? as usize;
    let c = read_u32(&mut cur)? as usize;
    if c != CHANNELS {
        return Err(Error::Format(format!("video has {c} channels, expected 3")));
    }
    let frame_len = h * w * CHANNELS;
    let body = &bytes[cur.position() as usize..];
    if body.len() != n * frame_len {
        return Err(Error::Corrupt(format!(
            "video payload is {} bytes, header implies {}",
            body.len(),
            n * frame_len
        )));
    }
    let frames = if frame_len == 0 {
        Vec::new()
    } else {
        body.chunks_exact(frame_len)
            .map(|chunk| Frame::new(h, w, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?
    };
    Video::new(frames)
}

pub fn write_video(path: impl AsRef<Path>, video: &Video) -> Result<()> {
    write_bytes(path, &encode_video(video))
}

/// Reads a `.wmv` container, or a directory of PNG/PPM frames in file-name order.
pub fn read_video(path: impl AsRef<Path>) -> Result<Video> {
    let path = path.as_ref();
    if path.is_dir() {
        return read_frame_dir(path);
    }
    decode_video(&read_bytes(path)?)
}

fn read_frame_dir(dir: &Path) -> Result<Video> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pnm")
            )
        })
        .collect();
    files.sort();
    let frames = files
        .iter()
        .map(|p| {
            let img = image::open(p)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
                .into_rgb8();
            let (w, h) = img.dimensions();
            Frame::new(h as usize, w as usize, img.into_raw())
        })
        .collect::<Result<Vec<_>>>()?;
    Video::new(frames)
}

pub(crate) fn read_magic(cur: &mut Cursor<&[u8]>, magic: &[u8; 4]) -> Result<()> {
    let mut got = [0u8; 4];
    cur.read_exact(&mut got)
        .map_err(|_| Error::Format("file too short for header".into()))?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    cur.read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("file too short for header".into()))
}

pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    fs::read(path.as_ref()).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
