//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}malformed header at byte offset {offset}: {msg}")]
    Header { context: String, offset: usize, msg: String },
    #[error("{context}truncated pixel data: expected {expected} bytes starting at byte offset {offset}, file ends at byte offset {end}")]
    Truncated {
        context: String,
        offset: usize,
        expected: usize,
        end: usize,
    },
    #[error("{context}{msg}")]
    Invalid { context: String, msg: String },
}

impl PnmError {
    fn in_file(self, path: &Path) -> Self {
        let ctx = format!("{}: ", path.display());
        match self {
            Self::Header { offset, msg, .. } => Self::Header { context: ctx, offset, msg },
            Self::Truncated { offset, expected, end, .. } => Self::Truncated {
                context: ctx,
                offset,
                expected,
                end,
            },
            Self::Invalid { msg, .. } => Self::Invalid { context: ctx, msg },
            io => io,
        }
    }
}

/// Row-major 8-bit image with `channels` samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u8,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, PnmError> {
        if data.len() != width * height * channels {
            return Err(PnmError::Invalid {
                context: String::new(),
                msg: format!("{}x{}x{} image needs {} samples, got {}", width, height, channels, width * height * channels, data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval: 255,
            data,
        })
    }
}

/// `round(255·clamp(v, 0, 1))`
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn header_err(&self, msg: impl Into<String>) -> PnmError {
        PnmError::Header {
            context: String::new(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PnmError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.header_err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.header_err(format!("{what} out of range")))
    }
}

/// Decodes P6 (3 channels) or P5 (1 channel).
pub fn decode(bytes: &[u8]) -> Result<Image, PnmError> {
    let mut c = Cursor { bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(c.header_err("expected magic P6 or P5")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.header_err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(c.header_err(format!("maxval {maxval} unsupported (1..=255)")));
    }
    match bytes.get(c.pos) {
        Some(b' ' | b'\t' | b'\n' | b'\r') => c.pos += 1,
        _ => return Err(c.header_err("expected single whitespace before pixel data")),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| c.header_err("image dimensions overflow"))?;
    let data = &bytes[c.pos..];
    if data.len() < expected {
        return Err(PnmError::Truncated {
            context: String::new(),
            offset: c.pos,
            expected,
            end: bytes.len(),
        });
    }
    if data.len() > expected {
        return Err(PnmError::Invalid {
            context: String::new(),
            msg: format!("{} trailing bytes after pixel data at byte offset {}", data.len() - expected, c.pos + expected),
        });
    }
    if let Some(i) = data.iter().position(|&v| v as usize > maxval) {
        return Err(PnmError::Invalid {
            context: String::new(),
            msg: format!("sample {} exceeds maxval {maxval} at byte offset {}", data[i], c.pos + i),
        });
    }
    Ok(Image {
        width,
        height,
        channels,
        maxval: maxval as u8,
        data: data.to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Image, PnmError> {
    let bytes = std::fs::read(path).map_err(|source| PnmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

pub fn write(path: &Path, img: &Image) -> Result<(), PnmError> {
    std::fs::write(path, encode(img)).map_err(|source| PnmError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantization() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.3), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(dequantize(77)), 77);
    }

    #[test]
    fn header_layout() {
        let img = Image::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(encode(&img), b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06".to_vec());
    }

    #[test]
    fn comments_and_whitespace_are_accepted() {
        let img = decode(b"P5 # gray\n3  # width\n1\n9\n\x00\x05\x09").unwrap();
        assert_eq!((img.width, img.height, img.channels, img.maxval), (3, 1, 1, 9));
        assert_eq!(img.data, vec![0, 5, 9]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let e = decode(b"P3\n1 1\n255\n").unwrap_err().to_string();
        assert!(e.contains("byte offset 0"), "{e}");
        let e = decode(b"P6\n4 x\n255\n").unwrap_err().to_string();
        assert!(e.contains("height") && e.contains("byte offset 5"), "{e}");
        let e = decode(b"P5\n1 1\n255\n\x01\x02").unwrap_err().to_string();
        assert!(e.contains("trailing"), "{e}");
        let e = decode(b"P5\n1 1\n9\n\x0a").unwrap_err().to_string();
        assert!(e.contains("exceeds maxval"), "{e}");
    }

    #[test]
    fn truncation_at_every_offset_is_rejected() {
        let img = Image::new(4, 3, 3, (0..36).collect()).unwrap();
        let bytes = encode(&img);
        let header = bytes.len() - 36;
        for cut in 0..bytes.len() {
            let err = decode(&bytes[..cut]).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains("byte offset"), "cut {cut}: {msg}");
            if cut >= header {
                assert!(matches!(err, PnmError::Truncated { offset, end, .. } if offset == header && end == cut));
            }
        }
    }

    #[test]
    fn file_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P6\n2 2\n255\n\x00").unwrap();
        let msg = read(&p).unwrap_err().to_string();
        assert!(msg.contains("bad.ppm") && msg.contains("byte offset 11"), "{msg}");
        assert!(read(&dir.path().join("missing.pgm")).unwrap_err().to_string().contains("missing.pgm"));
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..9, h in 1usize..9, gray in any::<bool>(), seed in any::<u64>()) {
            let ch = if gray { 1 } else { 3 };
            let data: Vec<u8> = (0..w * h * ch).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = Image::new(w, h, ch, data).unwrap();
            prop_assert_eq!(decode(&encode(&img)).unwrap(), img);
        }
    }
}
