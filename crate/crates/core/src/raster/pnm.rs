use std::fs;
use std::path::{Path, PathBuf};

use super::{BinaryMask, Frame};
use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

struct Header {
    ascii: bool,
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first raster byte (binary) or first sample token (ASCII).
    data_start: usize,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Cursor over Netpbm header tokens, skipping whitespace and `#` comments.
struct Tokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if start >= self.bytes.len() {
                parse_err(start, format!("truncated header, expected {what}"))
            } else {
                parse_err(start, format!("expected {what}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| parse_err(start, format!("{what} out of range")))
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(parse_err(0, "truncated magic"));
    }
    let ascii = match &bytes[..2] {
        b"P5" => false,
        b"P2" => true,
        _ => {
            return Err(parse_err(
                0,
                format!(
                    "unsupported magic {:?}, expected P5 or P2",
                    String::from_utf8_lossy(&bytes[..2])
                ),
            ))
        }
    };
    let mut tok = Tokens { bytes, pos: 2 };
    let width = tok.number("width")? as usize;
    let height = tok.number("height")? as usize;
    let maxval_at = {
        tok.skip_space();
        tok.pos
    };
    let maxval = tok.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image dimension"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(parse_err(
            maxval_at,
            format!("maxval {maxval} outside [1, 65535]"),
        ));
    }
    // Exactly one whitespace byte separates the header from a binary raster.
    if tok.pos >= bytes.len() || !bytes[tok.pos].is_ascii_whitespace() {
        return Err(parse_err(tok.pos, "missing whitespace after maxval"));
    }
    Ok(Header {
        ascii,
        width,
        height,
        maxval,
        data_start: tok.pos + 1,
    })
}

/// Decode a P5 (binary) or P2 (ASCII) graymap into a frame with index 0.
pub fn read_pgm(bytes: &[u8]) -> Result<Frame> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height;
    let scale = h.maxval as f64;
    let mut samples = Vec::with_capacity(n);
    if h.ascii {
        let mut tok = Tokens {
            bytes,
            pos: h.data_start,
        };
        for _ in 0..n {
            let at = tok.pos;
            let v = tok.number("sample")?;
            if v > h.maxval {
                return Err(parse_err(at, format!("sample {v} exceeds maxval")));
            }
            samples.push(v as f64 / scale);
        }
    } else {
        let wide = h.maxval > 255;
        let need = if wide { 2 * n } else { n };
        let payload = &bytes[h.data_start..];
        if payload.len() < need {
            return Err(parse_err(
                bytes.len(),
                format!("truncated payload: {} of {need} bytes", payload.len()),
            ));
        }
        for i in 0..n {
            let v = if wide {
                u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]]) as u32
            } else {
                payload[i] as u32
            };
            if v > h.maxval {
                let at = h.data_start + if wide { 2 * i } else { i };
                return Err(parse_err(at, format!("sample {v} exceeds maxval")));
            }
            samples.push(v as f64 / scale);
        }
    }
    Frame::new(0, h.width, h.height, samples)
}

#[inline]
fn quantize(s: f64) -> u8 {
    (s.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode as binary P5 with maxval 255.
pub fn write_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.samples().iter().map(|&s| quantize(s)));
    out
}

/// Mask as P5 with 0/255 samples.
pub fn write_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// Binary P6 color image.
pub fn write_ppm(width: usize, height: usize, pixels: &[Rgb]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::param(format!(
            "ppm has {} pixels, expected {}",
            pixels.len(),
            width * height
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in pixels {
        out.extend_from_slice(px);
    }
    Ok(out)
}

/// Load every `*.pgm` file of a directory in lexicographic file-name order.
/// Frame indices are assigned by position in that order.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|ext| ext.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let bytes = fs::read(p)?;
            read_pgm(&bytes)
                .map(|f| f.with_index(i as u64))
                .map_err(|e| match e {
                    Error::Parse { offset, msg } => Error::Parse {
                        offset,
                        msg: format!("{}: {msg}", p.display()),
                    },
                    other => other,
                })
        })
        .collect()
}

/// Write frames as `frame_NNNNNN.pgm`, returning the written paths.
pub fn write_frame_dir(dir: &Path, frames: &[Frame]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    frames
        .iter()
        .map(|f| {
            let path = dir.join(format!("frame_{:06}.pgm", f.index()));
            fs::write(&path, write_pgm(f))?;
            Ok(path)
        })
        .collect()
}
