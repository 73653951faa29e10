//! Binary PPM (P6) and PGM (P5) image files, maxval 255, bit-exact.
//!
//! Images are tensors in [0,1]: [3,H,W] for color, [1,H,W] for masks and
//! attention maps. Writing quantizes with round(v*255); a read/write
//! roundtrip is exact up to 1/255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes [3,H,W] as binary PPM. Header is literally "P6\n<w> <h>\n255\n".
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch {
            context: "encode_ppm",
            expected: vec![3, 0, 0],
            got: shape,
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let v = img.values();
    let plane = h * w;
    for i in 0..plane {
        out.push(quantize(v[i]));
        out.push(quantize(v[plane + i]));
        out.push(quantize(v[2 * plane + i]));
    }
    Ok(out)
}

/// Encodes [1,H,W] (or [H,W]) as binary PGM.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let shape = img.shape();
    let (h, w) = match shape.as_slice() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        _ => {
            return Err(Error::ShapeMismatch {
                context: "encode_pgm",
                expected: vec![1, 0, 0],
                got: shape,
            })
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let v = img.values();
    for i in 0..h * w {
        out.push(quantize(v[i]));
    }
    Ok(out)
}

struct HeaderParse {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], kind: &'static str) -> Result<HeaderParse> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format {
            kind,
            detail: "bad magic number".into(),
        });
    }
    // three ASCII integers (width, height, maxval) separated by whitespace,
    // then a single whitespace byte before the payload
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                kind,
                detail: "missing header field".into(),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text.parse().map_err(|_| Error::Format {
            kind,
            detail: format!("unparsable header field `{text}`"),
        })?;
    }
    if fields[2] != 255 {
        return Err(Error::Format {
            kind,
            detail: format!("unsupported maxval {}", fields[2]),
        });
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format {
            kind,
            detail: "missing whitespace before payload".into(),
        });
    }
    Ok(HeaderParse {
        width: fields[0],
        height: fields[1],
        payload_start: pos + 1,
    })
}

/// Decodes binary PPM into [3,H,W] with values in [0,1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let hp = parse_header(bytes, b"P6", "ppm")?;
    let (w, h) = (hp.width, hp.height);
    let need = 3 * w * h;
    let payload = &bytes[hp.payload_start..];
    if payload.len() < need {
        return Err(Error::Format {
            kind: "ppm",
            detail: format!("truncated payload: need {need} bytes, have {}", payload.len()),
        });
    }
    let mut vals = vec![0.0f32; need];
    let plane = h * w;
    for i in 0..plane {
        vals[i] = payload[3 * i] as f32 / 255.0;
        vals[plane + i] = payload[3 * i + 1] as f32 / 255.0;
        vals[2 * plane + i] = payload[3 * i + 2] as f32 / 255.0;
    }
    Ok(Tensor::new(vec![3, h, w], vals))
}

/// Decodes binary PGM into [1,H,W] with values in [0,1].
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let hp = parse_header(bytes, b"P5", "pgm")?;
    let (w, h) = (hp.width, hp.height);
    let payload = &bytes[hp.payload_start..];
    if payload.len() < w * h {
        return Err(Error::Format {
            kind: "pgm",
            detail: format!("truncated payload: need {} bytes, have {}", w * h, payload.len()),
        });
    }
    let vals = payload[..w * h].iter().map(|b| *b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![1, h, w], vals))
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_ppm(img)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = encode_pgm(img)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn header_is_bit_exact() {
        let img = Tensor::zeros(vec![3, 3, 2]);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 3\n255\n"));
        // all-black image: payload is all zero bytes
        assert!(bytes[b"P6\n2 3\n255\n".len()..].iter().all(|b| *b == 0));
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let mut rng = SplitMix64::new(17);
        let vals: Vec<f32> = (0..3 * 4 * 5).map(|_| rng.next_f64() as f32).collect();
        let img = Tensor::new(vec![3, 4, 5], vals.clone());
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), vec![3, 4, 5]);
        for (a, b) in vals.iter().zip(back.values().iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_roundtrip_within_quantization() {
        let mut rng = SplitMix64::new(18);
        let vals: Vec<f32> = (0..6 * 7).map(|_| rng.next_f64() as f32).collect();
        let img = Tensor::new(vec![1, 6, 7], vals.clone());
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        for (a, b) in vals.iter().zip(back.values().iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(decode_ppm(b"P5\n2 2\n255\n----").is_err()); // wrong magic
        assert!(decode_ppm(b"P6\n2 2\n65535\n").is_err()); // bad maxval
        assert!(decode_ppm(b"P6\n2 2\n255\nxx").is_err()); // truncated
        assert!(decode_pgm(b"P5\n\n").is_err()); // missing fields
    }
}

