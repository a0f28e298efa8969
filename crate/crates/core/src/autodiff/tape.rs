use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, used to update
/// running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

enum Op<T: Scalar> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    MeanOverLength(Var),
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMulT(Var, Var),
    RowNormalize {
        input: Var,
        norms: Vec<T>,
    },
    Scale(Var, T),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    SelectChannelMean {
        input: Var,
        channels: Vec<usize>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation and replays it backwards.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the graph is acyclic by construction.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T>(msg: impl Into<String>) -> Result<T, TensorError> {
    Err(TensorError::ShapeMismatch(msg.into()))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v` was
    /// reachable and tracked.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient shape matches value"))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Cross-correlation of `[B, C_in, L]` with `[C_out, C_in, K]` weights.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || stride == 0 {
            return mismatch(format!("conv1d input {xs:?} with weight {ws:?}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return mismatch(format!("conv1d bias {:?} for {} filters", self.shape(b), ws[0]));
            }
        }
        let padded = xs[2] + 2 * padding;
        if padded < ws[2] {
            return mismatch(format!("conv1d length {} shorter than kernel {}", xs[2], ws[2]));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            in_channels: xs[1],
            len: xs[2],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            padding,
            out_len: (padded - ws[2]) / stride + 1,
        };
        let out = kernels::conv1d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_len], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            },
            &parents,
        ))
    }

    /// Training-mode batch normalization over batch and length.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), TensorError> {
        let xs = self.shape(input).to_vec();
        self.check_channel_params(&xs, gamma, beta)?;
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        let m = b * l;
        if m < 2 {
            return Err(TensorError::DegenerateBatch(m));
        }
        let x = self.value(input).data();
        let (mean, var) = kernels::channel_moments(x, &xs);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut normalized = vec![T::ZERO; x.len()];
        let mut out = vec![T::ZERO; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * l;
                for i in off..off + l {
                    let xh = (x[i].to_f64() - mean[ch]) * inv_std[ch];
                    normalized[i] = T::from_f64(xh);
                    out[i] = T::from_f64(g[ch].to_f64() * xh + bt[ch].to_f64());
                }
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect(),
        };
        let value = Tensor::new(xs, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std: inv_std.into_iter().map(T::from_f64).collect(),
            },
            &[input, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        self.check_channel_params(&xs, gamma, beta)?;
        if running_mean.len() != xs[1] || running_var.len() != xs[1] {
            return mismatch("batchnorm running statistics do not match channels");
        }
        let (c, l) = (xs[1], xs[2]);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
            .collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let out: Vec<T> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / l) % c;
                g[ch] * (v - running_mean[ch]) * inv_std[ch] + bt[ch]
            })
            .collect();
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[input, gamma, beta],
        ))
    }

    fn check_channel_params(&self, xs: &[usize], gamma: Var, beta: Var) -> Result<(), TensorError> {
        if xs.len() != 3 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return mismatch(format!(
                "batchnorm input {xs:?} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(())
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(sigmoid);
        self.push(value, Op::Sigmoid(input), &[input])
    }

    /// Non-overlapping max pooling along the last axis of `[B, C, L]`.
    /// Trailing samples that do not fill a window are dropped; ties go to the
    /// lowest index.
    pub fn maxpool1d(&mut self, input: Var, pool: usize) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 || pool == 0 || xs[2] < pool {
            return mismatch(format!("maxpool{pool} on {xs:?}"));
        }
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        let lout = l / pool;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * lout);
        let mut argmax = Vec::with_capacity(b * c * lout);
        for row in 0..b * c {
            for t in 0..lout {
                let start = row * l + t * pool;
                let mut best = start;
                for i in start + 1..start + pool {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![b, c, lout], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// `[B, C, L] -> [B, C]` by averaging over `L`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 {
            return mismatch(format!("global_avg_pool on {xs:?}"));
        }
        let l = xs[2];
        let out = self
            .value(input)
            .data()
            .chunks(l)
            .map(|r| T::from_f64(r.iter().map(|v| v.to_f64()).sum::<f64>() / l as f64))
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.push(value, Op::MeanOverLength(input), &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// `x · Wᵀ + b` with `x: [B, in]`, `W: [out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return mismatch(format!("linear input {xs:?} with weight {ws:?}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return mismatch(format!("linear bias {:?} for {} outputs", self.shape(b), ws[0]));
            }
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = match bias {
            Some(b) => {
                let bv = self.value(b).data();
                (0..n).flat_map(|_| bv.iter().copied()).collect()
            }
            None => vec![T::ZERO; n * dout],
        };
        T::gemm(
            n,
            din,
            dout,
            self.value(input).data(),
            (din as isize, 1),
            self.value(weight).data(),
            (1, din as isize),
            T::ONE,
            &mut out,
        );
        let value = Tensor::new(vec![n, dout], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &parents,
        ))
    }

    /// `a · bᵀ` for `a: [n, d]`, `b: [m, d]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return mismatch(format!("matmul_t {as_:?} x {bs:?}ᵀ"));
        }
        let (n, d, m) = (as_[0], as_[1], bs[0]);
        let mut out = vec![T::ZERO; n * m];
        T::gemm(
            n,
            d,
            m,
            self.value(a).data(),
            (d as isize, 1),
            self.value(b).data(),
            (1, d as isize),
            T::ZERO,
            &mut out,
        );
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    /// Scales every row of a 2-D tensor to unit Euclidean norm.
    pub fn row_normalize(&mut self, input: Var) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 2 {
            return mismatch(format!("row_normalize on {xs:?}"));
        }
        let x = self.value(input);
        let mut norms = Vec::with_capacity(xs[0]);
        let mut out = Vec::with_capacity(x.len());
        for i in 0..xs[0] {
            let row = x.row(i);
            let norm = row.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::ZeroVector(i));
            }
            norms.push(T::from_f64(norm));
            out.extend(row.iter().map(|v| T::from_f64(v.to_f64() / norm)));
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::RowNormalize { input, norms }, &[input]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale(input, factor), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return mismatch(format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|v| v.to_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input).data();
        let s = x.iter().map(|v| v.to_f64()).sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(T::from_f64(s)), Op::Mean(input), &[input])
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var, TensorError> {
        if weights.len() != self.value(input).len() {
            return mismatch("weighted_sum weights do not match input");
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(&weights)
            .map(|(x, w)| x.to_f64() * w.to_f64())
            .sum::<f64>();
        Ok(self.push(
            Tensor::scalar(T::from_f64(s)),
            Op::WeightedSum { input, weights },
            &[input],
        ))
    }

    /// Mean softmax cross-entropy of `[n, m]` logits against one target
    /// column per row. With `exclude_self`, column `i` is removed from row
    /// `i`'s softmax (requires a square matrix).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        exclude_self: bool,
    ) -> Result<Var, TensorError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || targets.len() != ls[0] || targets.iter().any(|&t| t >= ls[1]) {
            return mismatch(format!("cross_entropy logits {ls:?} with {} targets", targets.len()));
        }
        if exclude_self && (ls[0] != ls[1] || targets.iter().enumerate().any(|(i, &t)| i == t)) {
            return mismatch("cross_entropy with exclude_self needs a square matrix and t_i != i");
        }
        let (n, m) = (ls[0], ls[1]);
        let z = self.value(logits);
        let mut probs = vec![T::ZERO; n * m];
        let mut total = 0.0;
        for i in 0..n {
            let row = z.row(i);
            let keep = |k: usize| !(exclude_self && k == i);
            let max = (0..m)
                .filter(|&k| keep(k))
                .map(|k| row[k].to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for k in (0..m).filter(|&k| keep(k)) {
                let e = (row[k].to_f64() - max).exp();
                probs[i * m + k] = T::from_f64(e);
                denom += e;
            }
            for k in 0..m {
                probs[i * m + k] = T::from_f64(probs[i * m + k].to_f64() / denom);
            }
            total += denom.ln() + max - row[targets[i]].to_f64();
        }
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / n as f64)),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var, TensorError> {
        if self.shape(logits) != targets.shape() {
            return mismatch(format!(
                "bce logits {:?} with targets {:?}",
                self.shape(logits),
                targets.shape()
            ));
        }
        let z = self.value(logits).data();
        let t = targets.data();
        let total: f64 = z
            .iter()
            .zip(t)
            .map(|(&x, &y)| {
                let x = x.to_f64();
                x.max(0.0) - x * y.to_f64() + (-x.abs()).exp().ln_1p()
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(T::from_f64(total / z.len() as f64)),
            Op::BceWithLogits {
                logits,
                targets: t.to_vec(),
            },
            &[logits],
        ))
    }

    /// `[B, C, L] -> [B]`: for item `b`, the mean over length of channel
    /// `channels[b]`.
    pub fn select_channel_mean(&mut self, input: Var, channels: Vec<usize>) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 3 || channels.len() != xs[0] || channels.iter().any(|&c| c >= xs[1]) {
            return mismatch(format!("select_channel_mean on {xs:?}"));
        }
        let (c, l) = (xs[1], xs[2]);
        let x = self.value(input).data();
        let out = channels
            .iter()
            .enumerate()
            .map(|(b, &ch)| {
                let off = (b * c + ch) * l;
                T::from_f64(x[off..off + l].iter().map(|v| v.to_f64()).sum::<f64>() / l as f64)
            })
            .collect();
        let value = Tensor::new(vec![xs[0]], out)?;
        Ok(self.push(value, Op::SelectChannelMean { input, channels }, &[input]))
    }

    /// Reverse pass from a scalar. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = kernels::conv1d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    tracked(*input),
                );
                if tracked(*input) {
                    acc(*input, cg.input);
                }
                acc(*weight, cg.weight);
                if let Some(b) = bias {
                    acc(*b, cg.bias);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let s = node.value.shape();
                let (b, c, l) = (s[0], s[1], s[2]);
                let m = (b * l) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * l;
                        for i in off..off + l {
                            dgamma[ch] += g[i].to_f64() * normalized[i].to_f64();
                            dbeta[ch] += g[i].to_f64();
                        }
                    }
                }
                if tracked(*input) {
                    let mut dx = vec![T::ZERO; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * l;
                            // sums of dxhat and dxhat * xhat, expressed through dbeta/dgamma
                            let gm = gam[ch].to_f64();
                            let k = gm * inv_std[ch].to_f64() / m;
                            for i in off..off + l {
                                let v = m * g[i].to_f64()
                                    - dbeta[ch]
                                    - normalized[i].to_f64() * dgamma[ch];
                                dx[i] = T::from_f64(k * v);
                            }
                        }
                    }
                    acc(*input, dx);
                }
                acc(*gamma, dgamma.into_iter().map(T::from_f64).collect());
                acc(*beta, dbeta.into_iter().map(T::from_f64).collect());
            }
            Op::ChannelAffine {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = node.value.shape();
                let (c, l) = (s[1], s[2]);
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = vec![T::ZERO; g.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = (i / l) % c;
                    dgamma[ch] += (gi * (x[i] - mean[ch]) * inv_std[ch]).to_f64();
                    dbeta[ch] += gi.to_f64();
                    dx[i] = gi * gam[ch] * inv_std[ch];
                }
                acc(*input, dx);
                acc(*gamma, dgamma.into_iter().map(T::from_f64).collect());
                acc(*beta, dbeta.into_iter().map(T::from_f64).collect());
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                acc(*input, zip_map(g, x, |gi, xi| if xi > T::ZERO { gi } else { T::ZERO }));
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                acc(*input, zip_map(g, y, |gi, yi| gi * yi * (T::ONE - yi)));
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::ZERO; self.value(*input).len()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
                acc(*input, dx);
            }
            Op::MeanOverLength(input) => {
                let l = self.shape(*input)[2];
                let inv = T::from_f64(1.0 / l as f64);
                acc(*input, g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, l)).collect());
            }
            Op::Reshape(input) => acc(*input, g.to_vec()),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*weight)[0];
                if tracked(*input) {
                    let mut dx = vec![T::ZERO; n * din];
                    T::gemm(
                        n,
                        dout,
                        din,
                        g,
                        (dout as isize, 1),
                        self.value(*weight).data(),
                        (din as isize, 1),
                        T::ZERO,
                        &mut dx,
                    );
                    acc(*input, dx);
                }
                if tracked(*weight) {
                    let mut dw = vec![T::ZERO; dout * din];
                    T::gemm(
                        dout,
                        n,
                        din,
                        g,
                        (1, dout as isize),
                        self.value(*input).data(),
                        (din as isize, 1),
                        T::ZERO,
                        &mut dw,
                    );
                    acc(*weight, dw);
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0f64; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v.to_f64());
                    }
                    acc(*b, db.into_iter().map(T::from_f64).collect());
                }
            }
            Op::MatMulT(a, b) => {
                let (n, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[0];
                if tracked(*a) {
                    let mut da = vec![T::ZERO; n * d];
                    T::gemm(
                        n,
                        m,
                        d,
                        g,
                        (m as isize, 1),
                        self.value(*b).data(),
                        (d as isize, 1),
                        T::ZERO,
                        &mut da,
                    );
                    acc(*a, da);
                }
                if tracked(*b) {
                    let mut db = vec![T::ZERO; m * d];
                    T::gemm(
                        m,
                        n,
                        d,
                        g,
                        (1, m as isize),
                        self.value(*a).data(),
                        (d as isize, 1),
                        T::ZERO,
                        &mut db,
                    );
                    acc(*b, db);
                }
            }
            Op::RowNormalize { input, norms } => {
                let y = &node.value;
                let d = y.shape()[1];
                let mut dx = Vec::with_capacity(y.len());
                for (i, norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    let inv = 1.0 / norm.to_f64();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(yv, gv)| T::from_f64((gv.to_f64() - yv.to_f64() * dot) * inv)),
                    );
                }
                acc(*input, dx);
            }
            Op::Scale(input, f) => acc(*input, g.iter().map(|&v| v * *f).collect()),
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, zip_map(g, bv, |gi, y| gi * y));
                acc(*b, zip_map(g, av, |gi, x| gi * x));
            }
            Op::Sum(input) => acc(*input, vec![g[0]; self.value(*input).len()]),
            Op::Mean(input) => {
                let n = self.value(*input).len();
                acc(*input, vec![g[0] * T::from_f64(1.0 / n as f64); n]);
            }
            Op::WeightedSum { input, weights } => {
                acc(*input, weights.iter().map(|&w| w * g[0]).collect())
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let m = probs.len() / n;
                let scale = g[0] * T::from_f64(1.0 / n as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dz[i * m + t] -= scale;
                }
                acc(*logits, dz);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] * T::from_f64(1.0 / z.len() as f64);
                acc(*logits, zip_map(z, targets, |x, y| (sigmoid(x) - y) * scale));
            }
            Op::SelectChannelMean { input, channels } => {
                let xs = self.shape(*input);
                let (c, l) = (xs[1], xs[2]);
                let mut dx = vec![T::ZERO; self.value(*input).len()];
                let inv = T::from_f64(1.0 / l as f64);
                for (b, &ch) in channels.iter().enumerate() {
                    let off = (b * c + ch) * l;
                    dx[off..off + l].iter_mut().for_each(|v| *v = g[b] * inv);
                }
                acc(*input, dx);
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let v = x.to_f64();
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    T::from_f64(s)
}
