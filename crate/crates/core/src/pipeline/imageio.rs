//! Single-channel image files: binary PGM (P5, 8- or 16-bit, big-endian
//! samples) and grayscale PNG for reading; 16-bit PGM for writing.

use std::fs;
use std::io::{self, Cursor};
use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

const PNG_MAGIC: &[u8] = b"\x89PNG";

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes)
    } else {
        Err(Error::UnsupportedFormat(format!("{} is neither P5 PGM nor PNG", path.display())))
    }
}

/// Writes a 16-bit binary PGM; values are clamped to [0, 1] and rounded to
/// the nearest of 65536 levels.
pub fn write_image(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm16(img)).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm16(img: &ImageGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    out.reserve(img.len() * 2);
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptHeader(format!("missing or invalid {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::UnsupportedFormat("not a binary PGM".into()));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::CorruptHeader(format!("invalid dimensions or maxval: {width}x{height}, {maxval}")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::CorruptHeader("missing separator after maxval".into()));
    }
    let data = &bytes[cur.pos + 1..];
    let sample = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * sample;
    if data.len() < needed {
        return Err(Error::io(
            "<pgm data>",
            io::Error::new(io::ErrorKind::UnexpectedEof, format!("expected {needed} bytes of pixels, found {}", data.len())),
        ));
    }
    let scale = 1.0 / maxval as f64;
    let values = if sample == 1 {
        data[..needed].iter().map(|&b| (b as f64 * scale).min(1.0)).collect()
    } else {
        data[..needed]
            .chunks_exact(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f64 * scale).min(1.0))
            .collect()
    };
    ImageGrid::new(height, width, values)
}

fn decode_png(bytes: &[u8]) -> Result<ImageGrid> {
    let img = ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .decode()
        .map_err(|e| Error::CorruptHeader(format!("png: {e}")))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!("png colour type {:?} is not single-channel", other.color())));
        }
    };
    ImageGrid::new(h, w, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn eight_bit_example() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img, ImageGrid::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P5\n# made by hand\n1 1\n# depth\n255\n".to_vec();
        bytes.push(51);
        assert!((decode_pgm(&bytes).unwrap().get(0, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn round_trip_within_half_level() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = Rng::new(4).uniform_grid(13, 7);
        write_image(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 1.0 / (2.0 * 65535.0) + 1e-15);
    }

    #[test]
    fn truncation_and_garbage_are_errors() {
        let full = encode_pgm16(&ImageGrid::filled(4, 4, 0.5));
        for cut in [3, 5, 9, full.len() - 1] {
            let err = decode_pgm(&full[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptHeader(_) | Error::Io { .. }), "{cut}: {err}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"GIF89a").unwrap();
        assert!(matches!(read_image(&path), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(read_image(dir.path().join("missing.pgm")), Err(Error::Io { .. })));
    }

    #[test]
    fn reads_grayscale_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let buf = image::GrayImage::from_raw(3, 2, vec![0, 51, 102, 153, 204, 255]).unwrap();
        buf.save(&path).unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(img.shape(), (2, 3));
        assert!((img.get(1, 2) - 1.0).abs() < 1e-15);
        assert!((img.get(0, 1) - 0.2).abs() < 1e-15);
    }
}
