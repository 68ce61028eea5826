use crate::error::{mismatch, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2x2 stride-2 max pool over the last two axes. Returns the argmax source
/// index of every output; ties resolve to the first cell in row-major order.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = x.shape();
    let nd = shape.len();
    if nd < 2 {
        return Err(mismatch("maxpool2x2", "[..., H, W]", shape));
    }
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    for e in [h, w] {
        if e % 2 != 0 {
            return Err(TensorError::OddExtent { op: "maxpool2x2", extent: e });
        }
    }
    let lead: usize = shape[..nd - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(lead * oh * ow);
    let mut arg = Vec::with_capacity(lead * oh * ow);
    let d = x.data();
    for p in 0..lead {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for cand in [
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ] {
                    if d[cand] > d[best] {
                        best = cand;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    let mut out_shape = shape[..nd - 2].to_vec();
    out_shape.extend([oh, ow]);
    Ok((Tensor::new(out_shape, out)?, arg))
}

/// Maximum over all axes after the first `keep`, first occurrence on ties.
pub fn max_trailing<T: Scalar>(x: &Tensor<T>, keep: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = x.shape();
    if keep == 0 || keep >= shape.len() {
        return Err(mismatch("max_trailing", format!("1..{} kept axes", shape.len()), keep));
    }
    let lead: usize = shape[..keep].iter().product();
    let inner: usize = shape[keep..].iter().product();
    let d = x.data();
    let mut out = Vec::with_capacity(lead);
    let mut arg = Vec::with_capacity(lead);
    for p in 0..lead {
        let mut best = p * inner;
        for i in p * inner + 1..(p + 1) * inner {
            if d[i] > d[best] {
                best = i;
            }
        }
        out.push(d[best]);
        arg.push(best);
    }
    Ok((Tensor::new(shape[..keep].to_vec(), out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_blocks() {
        let x = Tensor::<f32>::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_pick_first() {
        let x = Tensor::<f32>::full([2, 2], 1.5);
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[1.5]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f32>::zeros([3, 4]);
        assert_eq!(maxpool2x2(&x).unwrap_err(), TensorError::OddExtent { op: "maxpool2x2", extent: 3 });
    }
}
