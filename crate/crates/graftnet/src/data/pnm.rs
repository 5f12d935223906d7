//! Binary PPM (P6) / PGM (P5) reading and writing. Headers may contain
//! `#` comments; maxval is limited to 255 (one byte per sample). Images load
//! as [3,H,W] in [0,1]; masks load as [1,H,W] binarized at 128/255.

use std::path::Path;

use crate::error::{GraftError, Result};
use crate::tensor::Tensor;

struct Header {
    color: bool,
    w: usize,
    h: usize,
    maxval: u16,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<Vec<u8>> {
        // skip whitespace and comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(GraftError::parse(path, "truncated header"));
        }
        Ok(bytes[start..*pos].to_vec())
    };

    let magic = token(&mut pos)?;
    let color = match magic.as_slice() {
        b"P6" => true,
        b"P5" => false,
        other => {
            return Err(GraftError::parse(
                path,
                format!("unsupported magic {:?} (want binary P5/P6)", String::from_utf8_lossy(other)),
            ))
        }
    };
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        std::str::from_utf8(&t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| GraftError::parse(path, format!("bad {what} field")))
    };
    let w = num(&mut pos, "width")?;
    let h = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if w == 0 || h == 0 {
        return Err(GraftError::parse(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(GraftError::parse(path, format!("maxval {maxval} unsupported (want 1..=255)")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(GraftError::parse(path, "missing separator before payload"));
    }
    Ok(Header { color, w, h, maxval: maxval as u16, payload_start: pos + 1 })
}

fn read_raw(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| GraftError::io(path, e))?;
    let hdr = parse_header(&bytes, path)?;
    let channels = if hdr.color { 3 } else { 1 };
    let need = hdr.w * hdr.h * channels;
    let payload = &bytes[hdr.payload_start..];
    if payload.len() < need {
        return Err(GraftError::parse(
            path,
            format!("payload has {} bytes, need {need}", payload.len()),
        ));
    }
    Ok((hdr, payload[..need].to_vec()))
}

/// Loads a P6 (or grayscale P5, replicated) image as [3,H,W] in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (hdr, raw) = read_raw(path)?;
    let (h, w) = (hdr.h, hdr.w);
    let maxval = hdr.maxval as f32;
    let mut data = vec![0f32; 3 * h * w];
    if hdr.color {
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = raw[i * 3 + c] as f32 / maxval;
            }
        }
    } else {
        for i in 0..h * w {
            let v = raw[i] as f32 / maxval;
            data[i] = v;
            data[h * w + i] = v;
            data[2 * h * w + i] = v;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Loads a P5 mask as [1,H,W], binarized at 128/255 of full scale.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let (hdr, raw) = read_raw(path)?;
    if hdr.color {
        return Err(GraftError::parse(path, "mask must be grayscale P5, got P6"));
    }
    let threshold = 128.0 / 255.0;
    let maxval = hdr.maxval as f32;
    let data =
        raw.iter().map(|&b| if b as f32 / maxval >= threshold { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, hdr.h, hdr.w], data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| GraftError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| GraftError::io(path, e))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a [3,H,W] image in [0,1] as binary P6, maxval 255.
pub fn save_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(GraftError::shape("save_ppm", format!("want [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(to_byte(d[c * h * w + i]));
        }
    }
    write_file(path, &bytes)
}

/// Writes an [H,W] or [1,H,W] map in [0,1] as binary P5, maxval 255.
pub fn save_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    let (h, w) = match s {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        _ => return Err(GraftError::shape("save_pgm", format!("want [H,W] or [1,H,W], got {s:?}"))),
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| to_byte(v)));
    write_file(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        let img = Tensor::<f32>::from_fn(&[3, 4, 5], |i| ((i * 37) % 256) as f32 / 255.0);
        save_ppm(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // and the file itself is stable across a second save
        let bytes1 = std::fs::read(&p).unwrap();
        save_ppm(&p, &back).unwrap();
        assert_eq!(bytes1, std::fs::read(&p).unwrap());
    }

    #[test]
    fn pgm_mask_binarizes_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut bytes = b"P5\n# comment line\n4 1\n255\n".to_vec();
        bytes.extend([0u8, 127, 128, 255]);
        std::fs::write(&p, bytes).unwrap();
        let m = load_mask(&p).unwrap();
        assert_eq!(m.shape(), &[1, 1, 4]);
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gray_image_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        std::fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), &[3, 1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P3\n2 2\n255\n").unwrap();
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("bad.ppm"), "{err}");

        std::fs::write(&p, b"P6\n2 2\n255\nab").unwrap(); // truncated payload
        assert!(load_image(&p).is_err());

        std::fs::write(&p, b"P6\n2 2\n70000\n").unwrap(); // wide maxval
        assert!(load_image(&p).is_err());
    }
}
