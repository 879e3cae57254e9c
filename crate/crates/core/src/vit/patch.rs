use super::{ModelError, Result};
use crate::tensor::{Element, Tensor, TensorError};

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(TensorError::Invalid { op: "patchify", reason: format!("expected [B, H, W, C], got {shape:?}") }.into()),
    }
}

/// Cuts `[B, H, W, C]` images into non-overlapping `P × P` patches and
/// returns `[B, N, P²·C]`, patches in row-major grid order and each patch
/// flattened row-major (row, column, channel).
pub fn patchify<T: Element>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (b, h, w, c) = image_dims(images.shape())?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(ModelError::Indivisible { height: h, width: w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    let start = ((bi * h + py * patch + y) * w + px * patch) * c;
                    out.extend_from_slice(&src[start..start + row]);
                }
            }
        }
    }
    Ok(Tensor::new(&[b, gh * gw, patch * patch * c], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Element>(patches: &Tensor<T>, height: usize, width: usize, channels: usize, patch: usize) -> Result<Tensor<T>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(ModelError::Indivisible { height, width, patch });
    }
    let (gh, gw) = (height / patch, width / patch);
    let b = match *patches.shape() {
        [b, n, d] if n == gh * gw && d == patch * patch * channels => b,
        ref other => {
            return Err(TensorError::ShapeMismatch {
                op: "unpatchify",
                lhs: other.to_vec(),
                rhs: vec![gh * gw, patch * patch * channels],
            }
            .into())
        }
    };
    let row = patch * channels;
    let mut out = vec![T::zero(); b * height * width * channels];
    for (i, chunk) in patches.data().chunks(row).enumerate() {
        let y = i % patch;
        let p = i / patch;
        let (bi, cell) = (p / (gh * gw), p % (gh * gw));
        let (py, px) = (cell / gw, cell % gw);
        let start = ((bi * height + py * patch + y) * width + px * patch) * channels;
        out[start..start + row].copy_from_slice(chunk);
    }
    Ok(Tensor::new(&[b, height, width, channels], out)?)
}
