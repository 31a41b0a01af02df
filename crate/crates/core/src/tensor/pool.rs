use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

/// Winner positions recorded by [`maxpool2`], one flat input offset per
/// output cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Shape4,
    pub indices: Vec<usize>,
}

/// 2×2 stride-2 max pooling. Ties go to the first candidate in row-major
/// order within the window.
pub fn maxpool2(input: &Tensor4) -> Result<(Tensor4, PoolIndices)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::dim(format!(
            "maxpool2 needs even spatial dims, got {s}"
        )));
    }
    let oshape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(oshape);
    let mut indices = Vec::with_capacity(oshape.len());
    let data = input.data();
    let mut k = 0;
    for b in 0..s.n {
        for c in 0..s.c {
            let base = input.offset(b, c, 0, 0);
            for i in 0..oshape.h {
                for j in 0..oshape.w {
                    let top = base + 2 * i * s.w + 2 * j;
                    let mut best = top;
                    for cand in [top + 1, top + s.w, top + s.w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out.data_mut()[k] = data[best];
                    indices.push(best);
                    k += 1;
                }
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: s,
            indices,
        },
    ))
}

/// Routes each upstream gradient entry to its recorded winner.
pub fn maxpool2_backward(
    indices: &PoolIndices,
    grad_out: &Tensor4,
    input_shape: Shape4,
) -> Result<Tensor4> {
    if indices.input_shape != input_shape {
        return Err(Error::Internal(format!(
            "pool indices recorded for {} but backward asked for {input_shape}",
            indices.input_shape
        )));
    }
    if grad_out.len() != indices.indices.len() {
        return Err(Error::dim(format!(
            "maxpool2_backward: grad_out {} has {} entries, {} indices recorded",
            grad_out.shape(),
            grad_out.len(),
            indices.indices.len()
        )));
    }
    let mut grad_in = Tensor4::zeros(input_shape);
    let len = grad_in.len();
    let gin = grad_in.data_mut();
    for (&idx, &g) in indices.indices.iter().zip(grad_out.data()) {
        if idx >= len {
            return Err(Error::Internal(format!(
                "pool index {idx} out of range for input {input_shape}"
            )));
        }
        gin[idx] += g;
    }
    Ok(grad_in)
}
