//! Image codecs (binary PPM/PGM and the raw ART tensor format) and resizing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ART_MAGIC: &[u8; 4] = b"ART1";

/// Decode a P6 PPM or a rank-3 `[3,H,W]` ART file to `[3,H,W]` in `[0,1]`.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let t = decode_any(path)?;
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::decode(path, format!("expected a [3,H,W] image, got {:?}", t.shape())));
    }
    Ok(t)
}

/// Decode PPM, PGM (as `[1,H,W]`) or ART of any shape.
pub fn decode_any(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = if bytes.starts_with(ART_MAGIC) {
        decode_art(&bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(&bytes).and_then(|t| {
            let (h, w) = (t.shape()[0], t.shape()[1]);
            t.reshaped([1, h, w]).map_err(|e| e.to_string())
        })
    } else {
        decode_ppm(&bytes)
    };
    t.map_err(|m| Error::decode(path, m))
}

/// Netpbm header: magic, width, height, maxval, then one whitespace byte.
fn netpbm_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> std::result::Result<(usize, usize, usize, &'a [u8]), String> {
    if !bytes.starts_with(magic) {
        return Err(format!("missing {} magic", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("header field out of range")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    Ok((w, h, maxval, &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let (w, h, maxval, body) = netpbm_header(bytes, b"P6")?;
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(3)).ok_or("image too large")?;
    if body.len() < need {
        return Err(format!("truncated pixel data: {} of {need} bytes", body.len()));
    }
    let maxval = maxval as f32;
    let mut data = vec![0f32; need];
    let plane = w * h;
    for (p, px) in body[..need].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f32 / maxval;
        }
    }
    Tensor::from_vec([3, h, w], data).map_err(|e| e.to_string())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode `[3,H,W]` values in `[0,1]` as P6 (values are clamped and rounded).
pub fn encode_ppm(x: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = x.shape() else {
        return Err(Error::Shape(format!("PPM encoding needs [3,H,W], got {:?}", x.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = x.data();
    for p in 0..plane {
        out.extend((0..3).map(|c| to_byte(d[c * plane + p])));
    }
    Ok(out)
}

/// Encode `[H,W]` values in `[0,1]` as binary P5.
pub fn encode_pgm(x: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w] = x.shape() else {
        return Err(Error::Shape(format!("PGM encoding needs [H,W], got {:?}", x.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(x.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let (w, h, maxval, body) = netpbm_header(bytes, b"P5")?;
    let need = w.checked_mul(h).ok_or("image too large")?;
    if body.len() < need {
        return Err(format!("truncated pixel data: {} of {need} bytes", body.len()));
    }
    let maxval = maxval as f32;
    Tensor::from_vec([h, w], body[..need].iter().map(|&b| b as f32 / maxval).collect()).map_err(|e| e.to_string())
}

pub fn encode_art(x: &Tensor<f32>) -> Result<Vec<u8>> {
    let rank = u8::try_from(x.rank()).map_err(|_| Error::Shape("ART rank exceeds 255".into()))?;
    let mut out = Vec::with_capacity(5 + 8 * x.rank() + 4 * x.numel());
    out.extend_from_slice(ART_MAGIC);
    out.push(rank);
    for &e in x.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_art(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if !bytes.starts_with(ART_MAGIC) {
        return Err("missing ART1 magic".into());
    }
    let rank = *bytes.get(4).ok_or("truncated header")? as usize;
    let dims_end = 5 + 8 * rank;
    let dims = bytes.get(5..dims_end).ok_or("truncated extents")?;
    let shape: Vec<usize> = dims
        .chunks_exact(8)
        .map(|c| usize::try_from(u64::from_le_bytes(c.try_into().unwrap())).map_err(|_| "extent overflow".to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let numel = crate::tensor::checked_numel(&shape).map_err(|e| e.to_string())?;
    let payload = &bytes[dims_end..];
    let need = numel.checked_mul(4).ok_or("payload too large")?;
    if payload.len() != need {
        return Err(format!("payload holds {} bytes, extents need {need}", payload.len()));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::from_vec(shape, data).map_err(|e| e.to_string())
}

/// Bilinear resize of `[C,H,W]` with pixel centers at `(i + 0.5) / n`.
pub fn resize(x: &Tensor<f32>, h_out: usize, w_out: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("resize needs [C,H,W], got {:?}", x.shape())));
    };
    if h_out == 0 || w_out == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("resize extents must be positive".into()));
    }
    if (h, w) == (h_out, w_out) {
        return Ok(x.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let ty = taps(h, h_out);
    let tx = taps(w, w_out);
    let src = x.data();
    let mut out = Vec::with_capacity(c * h_out * w_out);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec([c, h_out, w_out], out)
}
