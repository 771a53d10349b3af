//! NetPBM (P2/P3/P5/P6, maxval 255) reading and writing.
//!
//! Canonical files carry a minimal header, `P5\n<w> <h>\n255\n`, followed by
//! the row-major payload; ASCII variants put one raster row per line. Masks
//! are stored as grayscale with 0 = masked and 255 = keep.

use std::path::Path;

use crate::raster::{Image, Mask};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NetpbmError {
    #[error("bad magic number {0:?}")]
    BadMagic([u8; 2]),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 255)")]
    UnsupportedMaxval(u64),
    #[error("truncated payload: expected {expected} samples, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("bad sample: {0}")]
    BadSample(String),
    #[error("mask sample {value} at index {index} is neither 0 nor 255")]
    MaskDomain { value: u8, index: usize },
    #[error("expected a {expected}-channel file, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Ascii,
    Binary,
}

/// A decoded 8-bit NetPBM raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub encoding: Encoding,
    pub samples: Vec<u8>,
}

impl Pnm {
    fn magic(&self) -> &'static str {
        match (self.channels, self.encoding) {
            (1, Encoding::Ascii) => "P2",
            (1, Encoding::Binary) => "P5",
            (_, Encoding::Ascii) => "P3",
            (_, Encoding::Binary) => "P6",
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn header_number(&mut self, what: &str) -> Result<u64, NetpbmError> {
        let tok = self
            .token()
            .ok_or_else(|| NetpbmError::BadHeader(format!("missing {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                NetpbmError::BadHeader(format!("{what} {:?}", String::from_utf8_lossy(tok)))
            })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm, NetpbmError> {
    if bytes.len() < 2 {
        let mut m = [0u8; 2];
        m[..bytes.len()].copy_from_slice(bytes);
        return Err(NetpbmError::BadMagic(m));
    }
    let magic = [bytes[0], bytes[1]];
    let (channels, encoding) = match &magic {
        b"P2" => (1, Encoding::Ascii),
        b"P3" => (3, Encoding::Ascii),
        b"P5" => (1, Encoding::Binary),
        b"P6" => (3, Encoding::Binary),
        _ => return Err(NetpbmError::BadMagic(magic)),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.header_number("width")? as usize;
    let height = cur.header_number("height")? as usize;
    let maxval = cur.header_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(NetpbmError::BadHeader(format!(
            "empty raster {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(NetpbmError::UnsupportedMaxval(maxval));
    }
    let expected = width * height * channels;
    let samples = match encoding {
        Encoding::Binary => {
            // exactly one whitespace byte separates header and payload
            match bytes.get(cur.pos) {
                Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
                _ => return Err(NetpbmError::Truncated { expected, found: 0 }),
            }
            let payload = &bytes[cur.pos..];
            if payload.len() < expected {
                return Err(NetpbmError::Truncated {
                    expected,
                    found: payload.len(),
                });
            }
            payload[..expected].to_vec()
        }
        Encoding::Ascii => {
            let mut out = Vec::with_capacity(expected);
            while out.len() < expected {
                let Some(tok) = cur.token() else {
                    return Err(NetpbmError::Truncated {
                        expected,
                        found: out.len(),
                    });
                };
                let v: u16 = std::str::from_utf8(tok)
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| {
                        NetpbmError::BadSample(String::from_utf8_lossy(tok).into_owned())
                    })?;
                if v > 255 {
                    return Err(NetpbmError::BadSample(format!("{v} exceeds maxval")));
                }
                out.push(v as u8);
            }
            out
        }
    };
    Ok(Pnm {
        width,
        height,
        channels,
        encoding,
        samples,
    })
}

pub fn encode(pnm: &Pnm) -> Vec<u8> {
    let mut out = format!("{}\n{} {}\n255\n", pnm.magic(), pnm.width, pnm.height).into_bytes();
    match pnm.encoding {
        Encoding::Binary => out.extend_from_slice(&pnm.samples),
        Encoding::Ascii => {
            for row in pnm.samples.chunks(pnm.width * pnm.channels) {
                let line: Vec<String> = row.iter().map(u8::to_string).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
        }
    }
    out
}

pub fn read_image(bytes: &[u8]) -> crate::Result<Image> {
    let pnm = decode(bytes)?;
    Image::from_u8(pnm.width, pnm.height, pnm.channels, &pnm.samples)
}

pub fn read_mask(bytes: &[u8]) -> crate::Result<Mask> {
    let pnm = decode(bytes)?;
    if pnm.channels != 1 {
        return Err(NetpbmError::ChannelMismatch {
            expected: 1,
            found: pnm.channels,
        }
        .into());
    }
    let bits = pnm
        .samples
        .iter()
        .enumerate()
        .map(|(index, &value)| match value {
            0 => Ok(false),
            255 => Ok(true),
            _ => Err(NetpbmError::MaskDomain { value, index }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Mask::new(pnm.width, pnm.height, bits)
}

pub fn write_image(image: &Image, encoding: Encoding) -> Vec<u8> {
    encode(&Pnm {
        width: image.width(),
        height: image.height(),
        channels: image.channels(),
        encoding,
        samples: image.to_u8(),
    })
}

pub fn write_mask(mask: &Mask) -> Vec<u8> {
    encode(&Pnm {
        width: mask.width(),
        height: mask.height(),
        channels: 1,
        encoding: Encoding::Binary,
        samples: mask
            .bits()
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect(),
    })
}

pub fn load_image(path: impl AsRef<Path>) -> crate::Result<Image> {
    read_image(&std::fs::read(path)?)
}

pub fn save_image(path: impl AsRef<Path>, image: &Image) -> crate::Result<()> {
    std::fs::write(path, write_image(image, Encoding::Binary))?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> crate::Result<Mask> {
    read_mask(&std::fs::read(path)?)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> crate::Result<()> {
    std::fs::write(path, write_mask(mask))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_p5() {
        let img = read_image(b"P5 2 2 255 \x00\x10\x80\xff").unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
        assert_eq!(img.samples()[1], 16.0 / 255.0);
        assert_eq!(img.samples()[3], 1.0);
    }

    #[test]
    fn parses_ascii_with_comments() {
        let img = read_image(b"P3\n# comment\n1 1\n255\n10 20 30\n").unwrap();
        assert_eq!(img.to_u8(), vec![10, 20, 30]);
    }

    #[test]
    fn canonical_files_round_trip_bytes() {
        for bytes in [
            &b"P5\n2 1\n255\n\x01\x02"[..],
            &b"P6\n1 1\n255\n\x01\x02\x03"[..],
            &b"P2\n2 2\n255\n0 5\n255 7\n"[..],
            &b"P3\n1 2\n255\n1 2 3\n4 5 6\n"[..],
        ] {
            assert_eq!(encode(&decode(bytes).unwrap()), bytes);
        }
    }

    #[test]
    fn distinct_parse_errors() {
        assert!(matches!(
            decode(b"P4 1 1 255 x"),
            Err(NetpbmError::BadMagic(_))
        ));
        assert!(matches!(
            decode(b"P5 2 2 255 \x00\x00"),
            Err(NetpbmError::Truncated { .. })
        ));
        assert!(matches!(
            decode(b"P2 2 2 255 0 0 0"),
            Err(NetpbmError::Truncated { .. })
        ));
        assert!(matches!(
            decode(b"P5 1 1 65535 \x00\x00"),
            Err(NetpbmError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            decode(b"P5 x 1 255 \x00"),
            Err(NetpbmError::BadHeader(_))
        ));
        assert!(matches!(
            decode(b"P2 1 1 255 300"),
            Err(NetpbmError::BadSample(_))
        ));
    }

    #[test]
    fn mask_domain_error() {
        let err = read_mask(b"P5\n2 1\n255\n\xff\x07").unwrap_err();
        assert!(matches!(
            err,
            Error::Netpbm(NetpbmError::MaskDomain { value: 7, index: 1 })
        ));
        let err = read_mask(b"P6\n1 1\n255\n\xff\xff\xff").unwrap_err();
        assert!(matches!(
            err,
            Error::Netpbm(NetpbmError::ChannelMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn mask_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..200), w in 1usize..20) {
            let h = bits.len() / w;
            prop_assume!(h > 0);
            let m = Mask::new(w, h, bits[..w * h].to_vec()).unwrap();
            let bytes = write_mask(&m);
            let back = read_mask(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(write_mask(&back), bytes);
        }

        #[test]
        fn image_round_trip(bytes in proptest::collection::vec(any::<u8>(), 12), ascii in any::<bool>()) {
            let img = Image::from_u8(2, 2, 3, &bytes).unwrap();
            let enc = if ascii { Encoding::Ascii } else { Encoding::Binary };
            let back = read_image(&write_image(&img, enc)).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
