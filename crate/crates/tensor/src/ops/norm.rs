use crate::error::{mismatch, Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }
}

pub(crate) struct BatchNormSaved<T> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub axis: usize,
    pub mode: BatchNormMode,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `(outer, channels, inner)` view around `axis`.
fn split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(mismatch("batchnorm", format!("axis < {}", shape.len()), axis));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_forward<T: Scalar>(
    xv: Var,
    x: &Tensor<T>,
    gv: Var,
    gamma: &Tensor<T>,
    bv: Var,
    beta: &Tensor<T>,
    axis: usize,
    stats: &mut BatchNormStats<T>,
    mode: BatchNormMode,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let (outer, c, inner) = split(x.shape(), axis)?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(mismatch("batchnorm", format!("gamma/beta of length {c}"), (gamma.numel(), beta.numel())));
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(mismatch("batchnorm", format!("running stats of length {c}"), stats.mean.len()));
    }
    let d = x.data();
    let m = outer * inner;
    let (mean, inv_std) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for o in 0..outer {
                for (ch, mu) in mean.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *mu += d[base..base + inner].iter().copied().sum::<T>();
                }
            }
            let mf = T::lit(m as f64);
            mean.iter_mut().for_each(|v| *v = *v / mf);
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    var[ch] += d[base..base + inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / mf);
            let unbias = if m > 1 { mf / T::lit((m - 1) as f64) } else { T::one() };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - stats.momentum) * stats.mean[ch] + stats.momentum * mean[ch];
                stats.var[ch] = (T::one() - stats.momentum) * stats.var[ch] + stats.momentum * var[ch] * unbias;
            }
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
            (mean, inv)
        }
        BatchNormMode::Eval => {
            (stats.mean.clone(), stats.var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect())
        }
    };
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let (g, b, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in base..base + inner {
                out[i] = g * (d[i] - mu) * is + b;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormSaved { x: xv, gamma: gv, beta: bv, axis, mode, mean, inv_std },
    ))
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    s: &BatchNormSaved<T>,
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (outer, c, inner) = split(x.shape(), s.axis)?;
    let (d, g) = (x.data(), dy.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                let xhat = (d[i] - s.mean[ch]) * s.inv_std[ch];
                dgamma[ch] += g[i] * xhat;
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![T::zero(); d.len()];
    let mf = T::lit((outer * inner) as f64);
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            let (gm, is) = (gamma.data()[ch], s.inv_std[ch]);
            for i in base..base + inner {
                dx[i] = match s.mode {
                    BatchNormMode::Eval => g[i] * gm * is,
                    BatchNormMode::Train => {
                        // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                        let xhat = (d[i] - s.mean[ch]) * s.inv_std[ch];
                        gm * is * (g[i] - dbeta[ch] / mf - xhat * dgamma[ch] / mf)
                    }
                };
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(gamma.shape().to_vec(), dgamma)?,
        Tensor::new(gamma.shape().to_vec(), dbeta)?,
    ))
}

/// Returns the mean loss and the softmax probabilities.
pub(crate) fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(mismatch("softmax_cross_entropy", format!("[{}, K]", labels.len()), shape));
    }
    let (b, k) = (shape[0], shape[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let mut probs = vec![T::zero(); b * k];
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lz = z.ln() + mx;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - lz).exp();
        }
        loss += lz - row[label];
    }
    Ok((loss / T::lit(b as f64), probs))
}

pub(crate) fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, c, inner) = split(x.shape(), axis)?;
    if bias.numel() != c {
        return Err(mismatch("add_bias", c, bias.numel()));
    }
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            out[base..base + inner].iter_mut().for_each(|v| *v += bias.data()[ch]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn bias_grad<T: Scalar>(g: &Tensor<T>, c: usize, axis: usize) -> Tensor<T> {
    let (outer, _, inner) = split(g.shape(), axis).expect("validated in forward");
    let mut d = vec![T::zero(); c];
    for o in 0..outer {
        for (ch, acc) in d.iter_mut().enumerate() {
            let base = (o * c + ch) * inner;
            *acc += g.data()[base..base + inner].iter().copied().sum::<T>();
        }
    }
    Tensor::new([c], d).expect("bias shape")
}
