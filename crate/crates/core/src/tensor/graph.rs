use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{softmax_channels, Scalar, Tensor};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Floor applied to probabilities before taking the log in cross-entropy.
const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean / biased variance tracked by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Upsample {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
    },
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient, leaves only.
    grad: Option<Vec<T>>,
}

/// Tape of recorded operations. Nodes are stored in creation order, so every
/// node's inputs precede it and a reverse sweep is a valid backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.tracked(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<T>() / T::of(x.len() as f64);
        let rg = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Unweighted mean of several same-shape tensors (typically scalar losses).
    pub fn average(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::ShapeMismatch("average of nothing".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, T::of(1.0 / vars.len() as f64)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.tracked(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// Stride-1 zero-padded "same" convolution (cross-correlation).
    ///
    /// `x` is `(N, Cin, H, W)`, `weight` is `(Cout, Cin, k, k)` with odd `k`,
    /// `bias` is `(Cout)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, cin, h, w) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin || kh != kw || kh % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv weight {:?} against input {:?}",
                self.value(weight).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::ShapeMismatch(format!(
                    "conv bias {:?}, expected [{cout}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            cout,
            h,
            w,
            k: kh,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(&[n, cout, h, w], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let rg = self.tracked(&parents);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geom,
            },
            rg,
        ))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::OddSpatialDim {
                height: h,
                width: w,
            });
        }
        let (out, arg) = kernels::max_pool2x2(self.value(x).data(), n * c, h, w);
        let t = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(t, Op::MaxPool { x, arg }, rg))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2x(self.value(x).data(), n * c, h, w);
        let t = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(
            t,
            Op::Upsample {
                x,
                planes: n * c,
                h,
                w,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat_many(&[a, b])
    }

    /// Stacks `(N, Ci, H, W)` tensors along the channel axis.
    pub fn concat_many(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat of {:?} with {:?}",
                    self.value(*first).shape(),
                    self.value(p).shape()
                )));
            }
            channels += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * channels * hw);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let t = Tensor::new(&[n, channels, h, w], out)?;
        let rg = self.tracked(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Per-channel batch normalisation over `(N, H, W)`.
    ///
    /// Train mode normalises with the batch mean and biased variance and
    /// folds them into `stats` with momentum [`BN_MOMENTUM`]; eval mode uses
    /// `stats` as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || stats.mean.len() != c
            || stats.var.len() != c
        {
            return Err(Error::ShapeMismatch(format!(
                "batch norm over {c} channels with gamma {:?}, beta {:?}, {} running stats",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                stats.mean.len()
            )));
        }
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let eps = T::of(BN_EPS);
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let plane = |b: usize| b * c * hw + ch * hw;
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xs[plane(b)..plane(b) + hw].iter().copied().sum::<T>();
                    }
                    let mean = s / m;
                    let mut v = T::zero();
                    for b in 0..n {
                        for &val in &xs[plane(b)..plane(b) + hw] {
                            let d = val - mean;
                            v += d * d;
                        }
                    }
                    let var = v / m;
                    let mom = T::of(BN_MOMENTUM);
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean;
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var;
                    (mean, var)
                }
                Mode::Eval => (stats.mean[ch], stats.var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                let o = plane(b);
                for i in o..o + hw {
                    let xh = (xs[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gs[ch] * xh + bs[ch];
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Inverted dropout: train mode zeroes each element with probability `p`
    /// and scales survivors by `1 / (1 - p)`. The mask is a pure function of
    /// `seed`. Eval mode and `p = 0` return `x` untouched.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidP(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.value(x).shape(), data)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Mean over all `N*H*W` pixels of `-sum_k t_k ln softmax(logits)_k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, onehot: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        lv.dims4()?;
        if lv.shape() != onehot.shape() {
            return Err(Error::ShapeMismatch(format!(
                "logits {:?} vs targets {:?}",
                lv.shape(),
                onehot.shape()
            )));
        }
        let (n, _, h, w) = lv.dims4()?;
        let probs = softmax_channels(lv)?.into_data();
        let floor = T::of(LOG_FLOOR);
        let mut total = T::zero();
        for (&p, &t) in probs.iter().zip(onehot.data()) {
            if t != T::zero() {
                total -= t * p.max(floor).ln();
            }
        }
        let loss = total / T::of((n * h * w) as f64);
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                target: onehot.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, adding into the gradient buffers
    /// of every tracked leaf it reaches. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, &g)| *a += g),
                    None => node.grad = Some(gout),
                }
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn take_slot(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]),
        )
    }

    fn with_slot(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(mut buf) = self.take_slot(grads, v) {
            f(&mut buf);
            grads[v.0] = Some(buf);
        }
    }

    fn propagate(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.with_slot(grads, v, |d| {
                        d.iter_mut().zip(gout).for_each(|(d, &g)| *d += g)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.with_slot(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gout).zip(bv) {
                        *d += g * y;
                    }
                });
                self.with_slot(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gout).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => self.with_slot(grads, *a, |d| {
                d.iter_mut().zip(gout).for_each(|(d, &g)| *d += g * *c)
            }),
            Op::Sum(a) => self.with_slot(grads, *a, |d| d.iter_mut().for_each(|d| *d += gout[0])),
            Op::Mean(a) => {
                let g = gout[0] / T::of(self.value(*a).len() as f64);
                self.with_slot(grads, *a, |d| d.iter_mut().for_each(|d| *d += g))
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                self.with_slot(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gout).zip(xv) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                })
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut dx = self.take_slot(grads, *x);
                let mut dw = self.take_slot(grads, *w);
                let mut db = b.and_then(|b| self.take_slot(grads, b));
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gout,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dw {
                    grads[w.0] = Some(d);
                }
                if let (Some(b), Some(d)) = (b, db) {
                    grads[b.0] = Some(d);
                }
            }
            Op::MaxPool { x, arg } => self.with_slot(grads, *x, |d| {
                for (&idx, &g) in arg.iter().zip(gout) {
                    d[idx] += g;
                }
            }),
            Op::Upsample { x, planes, h, w } => self.with_slot(grads, *x, |d| {
                kernels::upsample2x_backward(gout, *planes, *h, *w, d)
            }),
            Op::Concat(parts) => {
                let out_shape = self.nodes[i].value.shape();
                let (n, total_c, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    self.with_slot(grads, p, |d| {
                        for b in 0..n {
                            let src =
                                &gout[(b * total_c + offset) * hw..(b * total_c + offset + c) * hw];
                            let dst = &mut d[b * c * hw..(b + 1) * c * hw];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    });
                    offset += c;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("bn input is 4-d");
                let hw = h * w;
                let m = T::of((n * hw) as f64);
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * hw;
                        for j in o..o + hw {
                            sum_g[ch] += gout[j];
                            sum_gx[ch] += gout[j] * xhat[j];
                        }
                    }
                }
                self.with_slot(grads, *x, |d| {
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            if *batch_stats {
                                let mean_g = sum_g[ch] / m;
                                let mean_gx = sum_gx[ch] / m;
                                for j in o..o + hw {
                                    d[j] += k * (gout[j] - mean_g - xhat[j] * mean_gx);
                                }
                            } else {
                                for j in o..o + hw {
                                    d[j] += k * gout[j];
                                }
                            }
                        }
                    }
                });
                self.with_slot(grads, *gamma, |d| {
                    d.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s)
                });
                self.with_slot(grads, *beta, |d| {
                    d.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s)
                });
            }
            Op::Dropout { x, mask } => self.with_slot(grads, *x, |d| {
                for ((d, &g), &m) in d.iter_mut().zip(gout).zip(mask) {
                    *d += g * m;
                }
            }),
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            } => {
                let (n, _, h, w) = self.value(*logits).dims4().expect("logits are 4-d");
                let scale = gout[0] / T::of((n * h * w) as f64);
                self.with_slot(grads, *logits, |d| {
                    for ((d, &p), &t) in d.iter_mut().zip(probs).zip(target) {
                        *d += scale * (p - t);
                    }
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&shape, data).unwrap()
    }

    #[test]
    fn conv_of_ones_counts_neighbours() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t4([1, 1, 3, 3], &[1.0; 9]));
        let w = g.constant(t4([1, 1, 3, 3], &[1.0; 9]));
        let b = g.constant(Tensor::from_f64(&[1], &[0.0]).unwrap());
        let y = g.conv2d(x, w, Some(b)).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn identity_and_zero_kernels() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 - 3.5).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t4([1, 1, 4, 4], &data));
        let mut ident = [0.0; 9];
        ident[4] = 1.0;
        let w = g.constant(t4([1, 1, 3, 3], &ident));
        let y = g.conv2d(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let w0 = g.constant(t4([1, 1, 3, 3], &[0.0; 9]));
        let b = g.constant(Tensor::from_f64(&[1], &[2.5]).unwrap());
        let y = g.conv2d(x, w0, Some(b)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None), Err(Error::ShapeMismatch(_))));
        let w = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.conv2d(x, w, None).is_err());
    }

    #[test]
    fn relu_pool_concat_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let x = g.constant(t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.max_pool2x2(x).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(p).data(), &[4.0]);

        let a = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let b = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4, 4, 4]);

        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(
            g.max_pool2x2(odd),
            Err(Error::OddSpatialDim { .. })
        ));
        let small = g.constant(Tensor::zeros(&[2, 1, 2, 2]));
        assert!(matches!(
            g.concat_channels(a, small),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn concat_interleaves_per_sample() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t4([2, 1, 1, 1], &[1.0, 2.0]));
        let b = g.constant(t4([2, 2, 1, 1], &[10.0, 11.0, 20.0, 21.0]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
    }

    #[test]
    fn pool_then_upsample_restores_dims() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 8, 6]));
        let p = g.max_pool2x2(x).unwrap();
        let u = g.upsample2x(p).unwrap();
        assert_eq!(g.value(u).shape(), g.value(x).shape());
    }

    #[test]
    fn batch_norm_train_standardises_channels() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 4)
            .map(|i| ((i * 29 % 17) as f64) * 0.7 + (i / 32) as f64)
            .collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t4([2, 3, 4, 4], &data));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        let y = g
            .batch_norm(x, gamma, beta, &mut stats, Mode::Train)
            .unwrap();
        let yv = g.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| yv[(b * 3 + ch) * 16..(b * 3 + ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5, "{mean}");
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
        // running stats moved 10% of the way from (0, 1)
        assert!(stats.mean.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn batch_norm_eval_identity_and_constant_batch() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.25).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t4([1, 1, 4, 4], &data));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let y = g
            .batch_norm(x, gamma, beta, &mut stats, Mode::Eval)
            .unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b * scale).abs() < 1e-12);
        }
        assert_eq!(stats, RunningStats::new(1));

        let same = g.constant(t4([2, 1, 2, 2], &[3.0; 8]));
        let y = g
            .batch_norm(same, gamma, beta, &mut stats, Mode::Train)
            .unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_identity_cases_and_rate() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1_000_000], 1.0));
        assert_eq!(g.dropout(x, 0.0, Mode::Train, 1).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, Mode::Eval, 1).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, Mode::Train, 1),
            Err(Error::InvalidP(_))
        ));
        assert!(g.dropout(x, -0.1, Mode::Train, 1).is_err());

        let y = g.dropout(x, 0.5, Mode::Train, 42).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / 1e6;
        assert!((frac - 0.5).abs() < 0.002, "{frac}");
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));

        let again = g.dropout(x, 0.5, Mode::Train, 42).unwrap();
        assert_eq!(g.value(y), g.value(again));
    }

    fn onehot(k: usize, classes: &[usize]) -> Tensor<f64> {
        // classes are per pixel of a (1, k, 1, P) tensor
        let p = classes.len();
        let mut t = vec![0.0; k * p];
        for (i, &c) in classes.iter().enumerate() {
            t[c * p + i] = 1.0;
        }
        Tensor::new(&[1, k, 1, p], t).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::full(&[1, 4, 1, 3], 0.7));
        let loss = g.softmax_cross_entropy(l, &onehot(4, &[0, 2, 3])).unwrap();
        assert!((g.value(loss).data()[0] - 1.386_294_361_119_890_6).abs() < 1e-12);

        let l = g.constant(t4([1, 2, 1, 1], &[0.0, 50.0]));
        let loss = g.softmax_cross_entropy(l, &onehot(2, &[1])).unwrap();
        assert!(g.value(loss).data()[0] < 1e-9);

        let l = g.constant(t4([1, 2, 1, 1], &[0.0, 3f64.ln()]));
        let loss = g.softmax_cross_entropy(l, &onehot(2, &[1])).unwrap();
        assert!((g.value(loss).data()[0] - 0.287_682_072_451_780_9).abs() < 1e-12);

        let bad = onehot(3, &[1]);
        assert!(g.softmax_cross_entropy(l, &bad).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
        // a second sweep accumulates
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -8.0, 2.0, 12.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let p = g.param(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let prod = g.mul(c, p).unwrap();
        let y = g.sum(prod);
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert!(!g.requires_grad(c));
        assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(p), Err(Error::NotScalar(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let data: Vec<f64> = (0..2 * 5 * 3 * 3)
            .map(|i| ((i * 7 % 13) as f64) - 6.0)
            .collect();
        let p = softmax_channels(&t4([2, 5, 3, 3], &data)).unwrap();
        for b in 0..2 {
            for px in 0..9 {
                let s: f64 = (0..5).map(|c| p.data()[(b * 5 + c) * 9 + px]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
