//! `FVID` feature-video files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! | offset | field                    |
//! |--------|--------------------------|
//! | 0      | magic `b"FVID"`          |
//! | 4      | version (= 1)            |
//! | 8      | T (frames)               |
//! | 12     | D (channels)             |
//! | 16     | H                        |
//! | 20     | W                        |
//! | 24     | stride (pixels per cell) |
//! | 28     | source height (pixels)   |
//! | 32     | source width (pixels)    |
//! | 36     | payload                  |
//!
//! The payload is `T*D*H*W` little-endian `f32`, frame-major, then channel,
//! row, column. Image videos use the same container with `D = 3`, `stride = 1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Grid;
use crate::tracker::FeatureVideo;

pub const FVID_MAGIC: [u8; 4] = *b"FVID";
pub const FVID_VERSION: u32 = 1;
pub const FVID_HEADER_LEN: usize = 36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub frames: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub stride: u32,
    pub source_h: u32,
    pub source_w: u32,
}

impl FeatureFileHeader {
    pub fn for_video<S: Real>(video: &FeatureVideo<S>) -> Self {
        let (d, h, w) = video.frame_shape();
        Self {
            version: FVID_VERSION,
            frames: video.num_frames() as u32,
            channels: d as u32,
            height: h as u32,
            width: w as u32,
            stride: video.stride,
            source_h: video.source_resolution.0,
            source_w: video.source_resolution.1,
        }
    }

    /// Payload size in bytes declared by the header.
    pub fn payload_len(&self) -> u64 {
        self.frames as u64 * self.channels as u64 * self.height as u64 * self.width as u64 * 4
    }

    pub fn to_bytes(&self) -> [u8; FVID_HEADER_LEN] {
        let mut out = [0u8; FVID_HEADER_LEN];
        out[..4].copy_from_slice(&FVID_MAGIC);
        let fields = [
            self.version,
            self.frames,
            self.channels,
            self.height,
            self.width,
            self.stride,
            self.source_h,
            self.source_w,
        ];
        for (k, v) in fields.iter().enumerate() {
            out[4 + 4 * k..8 + 4 * k].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FVID_HEADER_LEN {
            return Err(corrupt(
                bytes.len(),
                format!("truncated header: {} of {FVID_HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if bytes[..4] != FVID_MAGIC {
            return Err(corrupt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let field = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
        let header = Self {
            version: field(0),
            frames: field(1),
            channels: field(2),
            height: field(3),
            width: field(4),
            stride: field(5),
            source_h: field(6),
            source_w: field(7),
        };
        if header.version != FVID_VERSION {
            return Err(corrupt(
                4,
                format!("unsupported version {} (expected {FVID_VERSION})", header.version),
            ));
        }
        let positive = [
            (8, header.frames, "T"),
            (12, header.channels, "D"),
            (16, header.height, "H"),
            (20, header.width, "W"),
            (24, header.stride, "stride"),
            (28, header.source_h, "source height"),
            (32, header.source_w, "source width"),
        ];
        for (offset, value, name) in positive {
            if value == 0 {
                return Err(corrupt(offset, format!("{name} must be positive")));
            }
        }
        Ok(header)
    }
}

fn corrupt(offset: usize, reason: String) -> Error {
    Error::CorruptFile {
        offset: offset as u64,
        reason,
    }
}

/// Serialize as `f32`, whatever the in-memory precision.
pub fn encode_feature_video<S: Real>(video: &FeatureVideo<S>) -> Vec<u8> {
    let header = FeatureFileHeader::for_video(video);
    let mut out = Vec::with_capacity(FVID_HEADER_LEN + header.payload_len() as usize);
    out.extend_from_slice(&header.to_bytes());
    for frame in video.frames() {
        for &v in frame.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_feature_video(bytes: &[u8]) -> Result<FeatureVideo<f32>> {
    let header = FeatureFileHeader::parse(bytes)?;
    let expected = FVID_HEADER_LEN as u64 + header.payload_len();
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::CorruptFile {
            offset: actual,
            reason: format!("truncated payload: file has {actual} bytes, header declares {expected}"),
        });
    }
    if actual > expected {
        return Err(Error::CorruptFile {
            offset: expected,
            reason: format!("{} trailing bytes after payload", actual - expected),
        });
    }
    let (d, h, w) = (
        header.channels as usize,
        header.height as usize,
        header.width as usize,
    );
    let per_frame = d * h * w;
    let mut frames = Vec::with_capacity(header.frames as usize);
    for t in 0..header.frames as usize {
        let start = FVID_HEADER_LEN + t * per_frame * 4;
        let mut data = Vec::with_capacity(per_frame);
        for k in 0..per_frame {
            let off = start + 4 * k;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(corrupt(off, format!("non-finite feature value {v}")));
            }
            data.push(v);
        }
        frames.push(Grid::new(d, h, w, data)?);
    }
    FeatureVideo::new(
        frames,
        header.stride,
        (header.source_h, header.source_w),
    )
}

pub fn write_feature_video<S: Real>(path: impl AsRef<Path>, video: &FeatureVideo<S>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_feature_video(video))?;
    Ok(())
}

pub fn read_feature_video(path: impl AsRef<Path>) -> Result<FeatureVideo<f32>> {
    decode_feature_video(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn video(seed: u64, t: usize, d: usize, h: usize, w: usize) -> FeatureVideo<f32> {
        let mut rng = SeededRng::new(seed);
        let frames = (0..t)
            .map(|_| Grid::from_fn(d, h, w, |_, _, _| rng.normal() as f32))
            .collect();
        FeatureVideo::new(frames, 8, ((h * 8) as u32, (w * 8) as u32)).unwrap()
    }

    #[test]
    fn header_declares_payload() {
        let h = FeatureFileHeader {
            version: 1,
            frames: 24,
            channels: 16,
            height: 32,
            width: 32,
            stride: 8,
            source_h: 256,
            source_w: 256,
        };
        assert_eq!(h.payload_len(), 24 * 16 * 32 * 32 * 4);
        assert_eq!(FeatureFileHeader::parse(&h.to_bytes()).unwrap(), h);
    }

    #[test]
    fn rejects_malformed_files() {
        let bytes = encode_feature_video(&video(1, 2, 3, 4, 5));
        match decode_feature_video(&bytes[..bytes.len() - 3]) {
            Err(Error::CorruptFile { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_feature_video(&bad), Err(Error::CorruptFile { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_feature_video(&bad), Err(Error::CorruptFile { offset: 4, .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_feature_video(&long), Err(Error::CorruptFile { .. })));
        let mut nan = bytes.clone();
        nan[40..44].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_feature_video(&nan), Err(Error::CorruptFile { offset: 40, .. })));
        assert!(matches!(decode_feature_video(&bytes[..10]), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.fvid");
        let v = video(3, 3, 4, 5, 6);
        write_feature_video(&path, &v).unwrap();
        assert_eq!(read_feature_video(&path).unwrap(), v);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn encode_decode_is_bit_identical(seed in any::<u64>(), t in 1usize..4, d in 1usize..5, h in 1usize..6, w in 1usize..6) {
            let v = video(seed, t, d, h, w);
            let bytes = encode_feature_video(&v);
            prop_assert_eq!(bytes.len(), FVID_HEADER_LEN + t * d * h * w * 4);
            let back = decode_feature_video(&bytes).unwrap();
            for (a, b) in v.frames().iter().zip(back.frames()) {
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            prop_assert_eq!(back, v);
        }
    }
}
