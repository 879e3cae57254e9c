//! Numeric kernels shared by the forward ops and their backward rules.

use rayon::prelude::*;

use super::Element;

/// Rows of the output handled by one kernel call. The partition is fixed,
/// so results are bit-identical for any worker count.
const ROW_BLOCK: usize = 64;
/// Below this many multiply-adds the work stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

/// `C (m×n) = op(A) · op(B) (+ C if accumulate)`.
///
/// `a` holds an m×k matrix (or k×m when `a_t`), `b` a k×n matrix (or n×k
/// when `b_t`), all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };

    let block = |(bi, c_block): (usize, &mut [T])| {
        let r0 = bi * ROW_BLOCK;
        let rows = c_block.len() / n;
        let a_off = if a_t { r0 } else { r0 * k };
        // SAFETY: the block addresses rows r0..r0+rows of A and C, which lie
        // inside the slices checked above; B is read whole.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        // each output element's reduction order is the same whether or not
        // the rows are split, so this matches the blocked path bit for bit
        block((0, c));
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `src` (of `shape`) with its axes reordered so that output
/// axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Copy + Default>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // stride in the source for each output axis
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::default(); src.len()];
    if src.is_empty() {
        return out;
    }
    if rank == 0 {
        out[0] = src[0];
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = gather[rank - 1];
    let mut index = vec![0usize; rank];
    let mut base = 0usize;
    for chunk in out.chunks_mut(inner) {
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = src[base + j * inner_stride];
        }
        // odometer over the outer axes
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            index[axis] += 1;
            base += gather[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            base -= gather[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
