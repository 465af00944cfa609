//! PGM reading (P2/P5) and writing (P5, 8 bit).

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::RealGrid;

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Pgm {
        offset,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, format!("{what} out of range")))
    }
}

/// Parses a P2 or P5 image and scales it to `[0, 1]` by `maxval`.
pub fn parse_pgm(bytes: &[u8]) -> Result<RealGrid> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'2' || bytes[1] == b'5') {
        return Err(err(0, "missing P2/P5 magic number"));
    }
    let binary = bytes[1] == b'5';
    let mut c = Cursor { bytes, pos: 2 };
    let cols = c.token("width")? as usize;
    let rows = c.token("height")? as usize;
    let max_at = c.pos;
    let maxval = c.token("maxval")?;
    if cols == 0 || rows == 0 {
        return Err(err(max_at, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(max_at, format!("maxval {maxval} outside 1..=65535")));
    }
    let count = rows * cols;
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(count);
    if binary {
        if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
            return Err(err(c.pos, "expected a single whitespace before the raster"));
        }
        let start = c.pos + 1;
        let width = if maxval < 256 { 1 } else { 2 };
        let needed = count * width;
        if bytes.len() < start + needed {
            return Err(err(bytes.len(), format!("truncated raster: need {needed} bytes after offset {start}")));
        }
        for k in 0..count {
            let off = start + k * width;
            let v = if width == 1 {
                bytes[off] as u64
            } else {
                ((bytes[off] as u64) << 8) | bytes[off + 1] as u64
            };
            if v > maxval {
                return Err(err(off, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 / scale);
        }
    } else {
        for _ in 0..count {
            c.skip_space_and_comments();
            if c.pos >= bytes.len() {
                return Err(err(c.pos, "truncated raster"));
            }
            let at = c.pos;
            let v = c.token("sample")?;
            if v > maxval {
                return Err(err(at, format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 / scale);
        }
    }
    RealGrid::new(rows, cols, data)
}

pub fn read_pgm(path: &Path) -> Result<RealGrid> {
    parse_pgm(&std::fs::read(path)?)
}

/// P5 bytes with maxval 255; values are clamped to `[0, 1]` and rounded
/// half up.
pub fn encode_pgm(u: &RealGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", u.cols(), u.rows()).into_bytes();
    out.extend(u.data().iter().map(|&v| quantize(v)));
    out
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn write_pgm(u: &RealGrid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(u))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::seeded_rng;
    use rand::Rng;

    #[test]
    fn round_trip_quantizes() {
        let mut rng = seeded_rng(4);
        let u = RealGrid::from_fn(7, 5, |_, _| rng.random::<f64>());
        let back = parse_pgm(&encode_pgm(&u)).unwrap();
        for (a, b) in u.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
            assert_eq!(*b, quantize(*a) as f64 / 255.0);
        }
    }

    #[test]
    fn white_pixel_is_255() {
        let u = RealGrid::filled(1, 1, 1.0);
        assert_eq!(*encode_pgm(&u).last().unwrap(), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
    }

    #[test]
    fn p2_and_p5_agree() {
        let p2 = b"P2\n# comment\n3 2\n255\n0 128 255\n1 2 3\n";
        let mut p5 = b"P5\n3 2\n255\n".to_vec();
        p5.extend([0u8, 128, 255, 1, 2, 3]);
        assert_eq!(parse_pgm(p2).unwrap(), parse_pgm(&p5).unwrap());
    }

    #[test]
    fn sixteen_bit_p5() {
        let mut p5 = b"P5 2 1 65535\n".to_vec();
        p5.extend([0xff, 0xff, 0x00, 0x00]);
        let g = parse_pgm(&p5).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        assert!(matches!(parse_pgm(b"P6\n1 1\n255\n"), Err(Error::Pgm { offset: 0, .. })));
        match parse_pgm(b"P5\n4 4\n255\n\x01\x02") {
            Err(Error::Pgm { offset, message }) => {
                assert_eq!(offset, 13);
                assert!(message.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_pgm(b"P2\n2 1\n255\n7").is_err());
        assert!(parse_pgm(b"P2\n2 1\n70000\n1 2").is_err());
        assert!(parse_pgm(b"P2\nx 1\n255\n1").is_err());
    }
}
