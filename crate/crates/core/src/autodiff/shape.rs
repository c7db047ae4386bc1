use crate::error::{shape_err, Result};
use crate::tensor::numel;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Resolves a possibly negative axis.
pub(crate) fn norm_axis(op: &'static str, shape: &[usize], axis: isize) -> Result<usize> {
    let r = shape.len() as isize;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(shape_err(op, shape, &[axis.unsigned_abs()]));
    }
    Ok(a as usize)
}

/// (outer, len, inner) decomposition around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        if da != db && da != 1 && db != 1 {
            return Err(shape_err(op, a, b));
        }
        out.push(da.max(db));
    }
    Ok(out)
}

/// For every flat output position, the flat position of the operand value
/// it reads. Returns `None` when the operand already matches `out`.
pub(crate) fn broadcast_index(operand: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if operand == out {
        return None;
    }
    let r = out.len();
    let mut aligned = vec![1; r - operand.len()];
    aligned.extend_from_slice(operand);
    let os = strides(&aligned);
    let eff: Vec<usize> = (0..r)
        .map(|d| if aligned[d] == 1 { 0 } else { os[d] })
        .collect();
    Some(gather_offsets(out, &eff))
}

/// Offsets obtained by walking `shape` in row-major order with the given
/// per-dimension strides.
pub(crate) fn gather_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let r = shape.len();
    let mut out = Vec::with_capacity(n);
    if r == 0 {
        out.push(0);
        return out;
    }
    let last = shape[r - 1];
    let last_stride = strides[r - 1];
    let mut counter = vec![0usize; r];
    let mut base = 0usize;
    loop {
        for j in 0..last {
            out.push(base + j * last_stride);
        }
        // advance all but the last dimension
        let mut d = r - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            counter[d] += 1;
            base += strides[d];
            if counter[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            counter[d] = 0;
        }
    }
}

pub(crate) fn permute_offsets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let s = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let offsets = gather_offsets(&out_shape, &out_strides);
    (out_shape, offsets)
}
