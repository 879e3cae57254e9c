//! Netpbm graymap/pixmap codec (P2, P3, P5, P6).

use super::{Image, ImageShape};

/// Decodes a PGM/PPM file into an image on the 0–255 scale, whatever the
/// file's maxval.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image, String> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos).ok_or("missing magic number")?;
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        other => return Err(format!("unsupported netpbm magic `{other}`")),
    };
    let mut header = [0usize; 3];
    for (slot, what) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let t = token(bytes, &mut pos).ok_or_else(|| format!("missing {what}"))?;
        *slot = t.parse().map_err(|_| format!("bad {what} `{t}`"))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("bad header {width}x{height} maxval {maxval}"));
    }
    let count = width * height * channels;
    let scale = 255.0 / maxval as f32;
    let mut data = Vec::with_capacity(count);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raster = bytes.get(pos..pos + need).ok_or("truncated raster")?;
        if wide {
            data.extend(raster.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 * scale));
        } else {
            data.extend(raster.iter().map(|&b| b as f32 * scale));
        }
    } else {
        for _ in 0..count {
            let t = token(bytes, &mut pos).ok_or("truncated raster")?;
            let v: usize = t.parse().map_err(|_| format!("bad sample `{t}`"))?;
            data.push(v.min(maxval) as f32 * scale);
        }
    }
    Image::new(ImageShape::new(height, width, channels), data).map_err(|e| e.to_string())
}

/// Encodes a `[0, 1]` image as binary PGM (1 channel) or PPM (3 channels)
/// with maxval 255.
pub fn encode_pnm(image: &Image) -> Result<Vec<u8>, String> {
    let shape = image.shape();
    let magic = match shape.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(format!("cannot encode {c} channels as netpbm")),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", shape.width, shape.height).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn token(bytes: &[u8], pos: &mut usize) -> Option<String> {
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
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_pgm_with_comments() {
        let img = decode_pnm(b"P2\n# a comment\n2 1\n# another\n15\n0 15\n").unwrap();
        assert_eq!(img.shape(), ImageShape::new(1, 2, 1));
        assert_eq!(img.data(), &[0.0, 255.0]);
    }

    #[test]
    fn binary_ppm_round_trip() {
        let shape = ImageShape::new(2, 3, 3);
        let img = Image::from_fn(shape, |y, x, c| ((y * 9 + x * 3 + c) * 13) as f32 / 255.0);
        let bytes = encode_pnm(&img).unwrap();
        let back = decode_pnm(&bytes).unwrap().divided(255.0);
        assert_eq!(back.shape(), shape);
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn sixteen_bit_samples_rescale() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend([0xff, 0xff]);
        assert_eq!(decode_pnm(&bytes).unwrap().data(), &[255.0]);
    }

    #[test]
    fn truncated_and_unknown_inputs_fail() {
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(decode_pnm(b"P4\n1 1\n").is_err());
        assert!(decode_pnm(b"").is_err());
    }
}
