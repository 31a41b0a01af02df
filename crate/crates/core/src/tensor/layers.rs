use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

pub fn relu(input: &Tensor4) -> Tensor4 {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    if input.shape() != grad_out.shape() {
        return Err(Error::dim(format!(
            "relu_backward: input {} vs grad_out {}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

/// Stacks `b`'s channels after `a`'s. No implicit cropping.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::dim(format!(
            "concat_channels: {sa} and {sb} disagree on batch or spatial size"
        )));
    }
    let plane = sa.plane_len();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        data.extend_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Tensor4::from_vec(Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)
}

/// Inverse of [`concat_channels`]: the first `first_channels` channels and
/// the rest. Also serves as the concat backward pass.
pub fn split_channels(t: &Tensor4, first_channels: usize) -> Result<(Tensor4, Tensor4)> {
    let s = t.shape();
    if first_channels > s.c {
        return Err(Error::dim(format!(
            "split_channels: cannot take {first_channels} channels from {s}"
        )));
    }
    let plane = s.plane_len();
    let rest = s.c - first_channels;
    let mut a = Vec::with_capacity(s.n * first_channels * plane);
    let mut b = Vec::with_capacity(s.n * rest * plane);
    for n in 0..s.n {
        let item = &t.data()[n * s.c * plane..(n + 1) * s.c * plane];
        a.extend_from_slice(&item[..first_channels * plane]);
        b.extend_from_slice(&item[first_channels * plane..]);
    }
    Ok((
        Tensor4::from_vec(Shape4::new(s.n, first_channels, s.h, s.w), a)?,
        Tensor4::from_vec(Shape4::new(s.n, rest, s.h, s.w), b)?,
    ))
}

/// Per-pixel softmax over the channel axis, stabilised by subtracting the
/// per-pixel maximum.
pub fn softmax_channels(input: &Tensor4) -> Result<Tensor4> {
    let s = input.shape();
    if s.c < 2 {
        return Err(Error::dim(format!(
            "softmax_channels needs at least 2 channels, got {s}"
        )));
    }
    let plane = s.plane_len();
    let mut out = Tensor4::zeros(s);
    let src = input.data();
    let dst = out.data_mut();
    let mut buf = vec![0.0; s.c];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = src[base + k * plane + p];
                max = max.max(*slot);
            }
            let mut sum = 0.0;
            for slot in buf.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            for (k, &e) in buf.iter().enumerate() {
                dst[base + k * plane + p] = e / sum;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor4::filled(x.shape(), 1.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let x = Tensor4::filled(Shape4::new(1, 2, 2, 2), -3.0);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
        let g = Tensor4::filled(x.shape(), 5.0);
        assert!(relu_backward(&x, &g).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor4::from_fn(Shape4::new(2, 2, 4, 4), |n, c, y, x| (n * 100 + c * 10 + y * 4 + x) as f64);
        let b = Tensor4::from_fn(Shape4::new(2, 3, 4, 4), |n, c, y, x| -((n * 100 + c * 10 + y * 4 + x) as f64));
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), Shape4::new(2, 5, 4, 4));
        assert_eq!(ab.get(1, 0, 2, 3), a.get(1, 0, 2, 3));
        assert_eq!(ab.get(1, 4, 2, 3), b.get(1, 2, 2, 3));
        let (a2, b2) = split_channels(&ab, 2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor4::zeros(Shape4::new(1, 2, 4, 4));
        let b = Tensor4::zeros(Shape4::new(1, 2, 4, 2));
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let x = Tensor4::filled(Shape4::new(1, 2, 3, 3), 0.4);
        let p = softmax_channels(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn softmax_saturates() {
        let x = Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![800.0, 0.0]).unwrap();
        let p = softmax_channels(&x).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
        assert!(p.data()[1] < 1e-300);
        assert!(p.is_finite());
    }

    #[test]
    fn softmax_needs_two_channels() {
        assert!(softmax_channels(&Tensor4::zeros(Shape4::new(1, 1, 2, 2))).is_err());
    }
}
