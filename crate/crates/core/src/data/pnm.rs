//! Binary PGM (`P5`, grayscale) and PPM (`P6`, RGB) with maxval 255.

use std::path::Path;

use super::cifar::quantize;
use super::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest accepted width or height.
const MAX_SIDE: usize = 1 << 16;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::Format(
                "unsupported image: expected binary P5 or P6 magic".into(),
            ))
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and `#` comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed image header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *f = text
            .parse()
            .map_err(|_| Error::Format(format!("header value `{text}` overflows")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "unsupported maxval {maxval}; only 8-bit (255) images are read"
        )));
    }
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(Error::Format(format!(
            "image dimensions {width}x{height} out of range"
        )));
    }
    // exactly one whitespace byte ends the header
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos + 1,
    })
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageSample> {
    let h = parse_header(bytes)?;
    let (c, hh, w) = (h.channels, h.height, h.width);
    let n = c * hh * w;
    let data = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::Format(format!("truncated pixel data: need {n} bytes")))?;
    // interleaved RGB to planar
    let px = Tensor::from_fn(&[c, hh, w], |i| {
        let (ch, p) = (i / (hh * w), i % (hh * w));
        data[p * c + ch] as f32 / 255.0
    });
    ImageSample::new(px)
}

/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn encode_pnm(pixels: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match *pixels.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            return Err(Error::Format(format!(
                "PNM needs 1 or 3 channels, got {:?}",
                pixels.shape()
            )))
        }
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let d = pixels.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(quantize(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageSample> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_pnm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_image(path: impl AsRef<Path>, pixels: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_pnm(pixels)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn white_pixel() {
        let s = decode_pnm(b"P5\n1 1\n255\n\xff").unwrap();
        assert_eq!(s.pixels.shape(), &[1, 1, 1]);
        assert_eq!(s.pixels.data(), &[1.0]);
    }

    #[test]
    fn comments_are_skipped() {
        let s =
            decode_pnm(b"P6 # made by hand\n# another\n2 1 # size\n255\n\x00\x10\x20\x30\x40\x50")
                .unwrap();
        assert_eq!(s.pixels.shape(), &[3, 1, 2]);
        assert_eq!(s.pixels.data()[0] * 255.0, 0.0);
        assert_eq!(s.pixels.data()[1] * 255.0, 48.0);
        assert_eq!(s.pixels.data()[2] * 255.0, 16.0);
    }

    #[test]
    fn round_trips_8_bit_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in [1, 3] {
            let px = Tensor::from_fn(&[c, 5, 7], |_| rng.gen::<u8>() as f32 / 255.0);
            let bytes = encode_pnm(&px).unwrap();
            let back = decode_pnm(&bytes).unwrap().pixels;
            assert_eq!(back, px);
            assert_eq!(encode_pnm(&back).unwrap(), bytes);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let px = Tensor::from_fn(&[1, 3, 3], |i| i as f32 / 8.0);
        write_image(&p, &px).unwrap();
        let back = read_image(&p).unwrap().pixels;
        assert!(back.sub(&px).unwrap().max_abs() <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn rejects_unsupported_files() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pnm(b"P5\n99999999999999999999999 1\n255\n").is_err());
        assert!(decode_pnm(b"P5\n100000 100000\n255\n").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(encode_pnm(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
