use super::kernels::{col2im, im2col, Padding};
use super::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics carried by one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![T::zero(); channels], running_var: vec![T::one(); channels] }
    }

    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[T], batch_var_unbiased: &[T]) {
        let m = T::from_f64_lossy(Self::MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: Padding },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPoolGlobal { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Mse { pred: Var, target: Var },
    Bce { prob: Var, labels: Vec<T>, weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording tape. Values are computed eagerly as operations are appended;
/// [`Graph::backward`] replays the records in exact reverse order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Cross-correlation of `x: [batch, in_ch, len]` with `w: [out_ch, in_ch, k]`
    /// plus bias `b: [out_ch]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: Padding,
    ) -> Result<Var, TensorError> {
        let (batch, in_ch, len) = match *self.shape(x) {
            [b, c, l] => (b, c, l),
            ref s => return Err(mismatch("conv1d", format!("input must be rank 3, got {s:?}"))),
        };
        let (out_ch, k) = match *self.shape(w) {
            [o, i, k] if i == in_ch => (o, k),
            ref s => {
                return Err(mismatch("conv1d", format!("weight {s:?} vs input channels {in_ch}")))
            }
        };
        if self.shape(b) != [out_ch] {
            return Err(mismatch("conv1d", format!("bias {:?} vs {out_ch}", self.shape(b))));
        }
        let out_len = pad.output_len(len, k, stride).ok_or_else(|| {
            mismatch("conv1d", format!("kernel {k} stride {stride} too large for length {len}"))
        })?;

        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut out = vec![T::zero(); batch * out_ch * out_len];
        let mut cols = vec![T::zero(); in_ch * k * out_len];
        for n in 0..batch {
            let xn = &xs[n * in_ch * len..(n + 1) * in_ch * len];
            let yn = &mut out[n * out_ch * out_len..(n + 1) * out_ch * out_len];
            for (o, row) in yn.chunks_exact_mut(out_len).enumerate() {
                row.fill(bs[o]);
            }
            im2col(xn, in_ch, len, k, stride, pad, out_len, &mut cols);
            T::gemm(out_ch, in_ch * k, out_len, T::one(), ws, false, &cols, false, T::one(), yn);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![batch, out_ch, out_len], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, stride, pad }, rg))
    }

    /// Batch normalization over the batch and length axes of `[batch, ch, len]`
    /// (or the batch axis of `[batch, ch]`).
    ///
    /// In train mode the batch statistics normalize the input and are folded
    /// into `stats` with momentum 0.1; in eval mode `stats` is used as is.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        train: bool,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (batch, ch, len) = match shape[..] {
            [b, c, l] => (b, c, l),
            [b, c] => (b, c, 1),
            _ => return Err(mismatch("batchnorm1d", format!("input must be rank 2 or 3, got {shape:?}"))),
        };
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(mismatch(
                "batchnorm1d",
                format!("gamma {:?} / beta {:?} vs {ch} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        if stats.running_mean.len() != ch || stats.running_var.len() != ch {
            return Err(mismatch("batchnorm1d", format!("running stats vs {ch} channels")));
        }
        let count = batch * len;
        if train && count == 0 {
            return Err(TensorError::EmptyBatch);
        }
        let eps = T::from_f64_lossy(BatchNormStats::<T>::EPS);
        let xs = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            let inv_n = T::one() / T::from_usize(count).unwrap();
            for c in 0..ch {
                let mut s = T::zero();
                for n in 0..batch {
                    let base = (n * ch + c) * len;
                    s = s + xs[base..base + len].iter().copied().sum::<T>();
                }
                let m = s * inv_n;
                let mut ss = T::zero();
                for n in 0..batch {
                    let base = (n * ch + c) * len;
                    ss = ss + xs[base..base + len].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[c] = m;
                var[c] = ss * inv_n;
            }
            let unbiased: Vec<T> = if count > 1 {
                let f = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
                var.iter().map(|&v| v * f).collect()
            } else {
                var.clone()
            };
            stats.update(&mean, &unbiased);
            (mean, var)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for n in 0..batch {
            for c in 0..ch {
                let base = (n * ch + c) * len;
                for i in base..base + len {
                    let h = (xs[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Max pooling over the length axis. With `ceil_mode` a trailing partial
    /// window is kept, giving `ceil((len - k) / stride) + 1` outputs. Ties go
    /// to the first index.
    pub fn maxpool1d(
        &mut self,
        x: Var,
        k: usize,
        stride: usize,
        ceil_mode: bool,
    ) -> Result<Var, TensorError> {
        let (batch, ch, len) = match *self.shape(x) {
            [b, c, l] => (b, c, l),
            ref s => return Err(mismatch("maxpool1d", format!("input must be rank 3, got {s:?}"))),
        };
        if k == 0 || stride == 0 || len == 0 || (!ceil_mode && k > len) {
            return Err(mismatch("maxpool1d", format!("window {k}/{stride} on length {len}")));
        }
        let out_len = if len <= k {
            1
        } else if ceil_mode {
            let o = (len - k).div_ceil(stride) + 1;
            if (o - 1) * stride >= len { o - 1 } else { o }
        } else {
            (len - k) / stride + 1
        };
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(batch * ch * out_len);
        let mut argmax = Vec::with_capacity(batch * ch * out_len);
        for row in 0..batch * ch {
            let base = row * len;
            for t in 0..out_len {
                let start = t * stride;
                let end = (start + k).min(len);
                let mut best = base + start;
                for i in base + start + 1..base + end {
                    if xs[i] > xs[best] {
                        best = i;
                    }
                }
                out.push(xs[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![batch, ch, out_len], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Mean over the length axis: `[batch, ch, len] -> [batch, ch]`.
    pub fn avgpool_global(&mut self, x: Var) -> Result<Var, TensorError> {
        let (batch, ch, len) = match *self.shape(x) {
            [b, c, l] if l > 0 => (b, c, l),
            ref s => return Err(mismatch("avgpool_global", format!("input {s:?}"))),
        };
        let inv = T::one() / T::from_usize(len).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks_exact(len)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        let value = Tensor::new(vec![batch, ch], out)?;
        Ok(self.push(value, Op::AvgPoolGlobal { x }, rg))
    }

    /// `x: [batch, in] · w: [out, in]ᵀ + b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (batch, inp) = match *self.shape(x) {
            [b, i] => (b, i),
            ref s => return Err(mismatch("dense", format!("input must be rank 2, got {s:?}"))),
        };
        let out_dim = match *self.shape(w) {
            [o, i] if i == inp => o,
            ref s => return Err(mismatch("dense", format!("weight {s:?} vs input width {inp}"))),
        };
        if self.shape(b) != [out_dim] {
            return Err(mismatch("dense", format!("bias {:?} vs {out_dim}", self.shape(b))));
        }
        let bs = self.value(b).data();
        let mut out: Vec<T> = (0..batch).flat_map(|_| bs.iter().copied()).collect();
        T::gemm(
            batch,
            inp,
            out_dim,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::one(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![batch, out_dim], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(Var, Var) -> Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Mean squared error over every element.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(mismatch(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let p = self.value(pred).data();
        let n = p.len();
        if n == 0 {
            return Err(mismatch("mse_loss", "empty input".into()));
        }
        let t = self.value(target).data();
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = s / T::from_usize(n).unwrap();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, rg))
    }

    /// `-mean(w_i * [y_i ln p_i + (1 - y_i) ln(1 - p_i)])` with `p` clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn weighted_bce_loss(
        &mut self,
        prob: Var,
        labels: &[T],
        weights: &[T],
    ) -> Result<Var, TensorError> {
        let p = self.value(prob).data();
        if p.len() != labels.len() || p.len() != weights.len() || p.is_empty() {
            return Err(mismatch(
                "weighted_bce_loss",
                format!("{} probabilities, {} labels, {} weights", p.len(), labels.len(), weights.len()),
            ));
        }
        for &y in labels {
            if y != T::zero() && y != T::one() {
                return Err(TensorError::InvalidLabel(y.to_f64_lossy()));
            }
        }
        let lo = T::from_f64_lossy(PROB_CLAMP);
        let hi = T::one() - lo;
        let mut s = T::zero();
        for ((&pi, &y), &w) in p.iter().zip(labels).zip(weights) {
            if !(pi >= T::zero() && pi <= T::one()) {
                return Err(TensorError::ProbabilityOutOfRange(pi.to_f64_lossy()));
            }
            let pc = pi.max(lo).min(hi);
            s = s + w * (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        }
        let loss = -s / T::from_usize(p.len()).unwrap();
        let rg = self.rg(prob);
        let op = Op::Bce { prob, labels: labels.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse-mode pass from a scalar `loss`. The tape can be replayed once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeReused);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, stride, pad } => {
                let (batch, in_ch, len) = dims3(self.shape(*x));
                let (out_ch, _, k) = dims3(self.shape(*w));
                let out_len = node.value.shape()[2];
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if self.rg(*b) {
                    let db = grad_buf(grads, *b, out_ch);
                    for n in 0..batch {
                        for o in 0..out_ch {
                            let base = (n * out_ch + o) * out_len;
                            db[o] = db[o] + g[base..base + out_len].iter().copied().sum::<T>();
                        }
                    }
                }
                let need_w = self.rg(*w);
                let need_x = self.rg(*x);
                if need_w || need_x {
                    let mut cols = vec![T::zero(); in_ch * k * out_len];
                    let mut dw = if need_w { vec![T::zero(); ws.len()] } else { Vec::new() };
                    let mut dx = if need_x { vec![T::zero(); xs.len()] } else { Vec::new() };
                    for n in 0..batch {
                        let gn = &g[n * out_ch * out_len..(n + 1) * out_ch * out_len];
                        if need_w {
                            let xn = &xs[n * in_ch * len..(n + 1) * in_ch * len];
                            im2col(xn, in_ch, len, k, *stride, *pad, out_len, &mut cols);
                            T::gemm(out_ch, out_len, in_ch * k, T::one(), gn, false, &cols, true, T::one(), &mut dw);
                        }
                        if need_x {
                            T::gemm(in_ch * k, out_ch, out_len, T::one(), ws, true, gn, false, T::zero(), &mut cols);
                            let dxn = &mut dx[n * in_ch * len..(n + 1) * in_ch * len];
                            col2im(&cols, in_ch, len, k, *stride, *pad, out_len, dxn);
                        }
                    }
                    if need_w {
                        accumulate(grads, *w, &dw);
                    }
                    if need_x {
                        accumulate(grads, *x, &dx);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = self.shape(*x);
                let (batch, ch, len) = match *shape {
                    [b, c, l] => (b, c, l),
                    [b, c] => (b, c, 1),
                    _ => unreachable!(),
                };
                let gm = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); ch];
                let mut sum_dy_xhat = vec![T::zero(); ch];
                for n in 0..batch {
                    for c in 0..ch {
                        let base = (n * ch + c) * len;
                        for j in base..base + len {
                            sum_dy[c] = sum_dy[c] + g[j];
                            sum_dy_xhat[c] = sum_dy_xhat[c] + g[j] * xhat[j];
                        }
                    }
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, &sum_dy_xhat);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, &sum_dy);
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *train {
                        let cnt = T::from_usize(batch * len).unwrap();
                        for n in 0..batch {
                            for c in 0..ch {
                                let base = (n * ch + c) * len;
                                let scale = gm[c] * inv_std[c] / cnt;
                                for j in base..base + len {
                                    dx[j] = scale * (cnt * g[j] - sum_dy[c] - xhat[j] * sum_dy_xhat[c]);
                                }
                            }
                        }
                    } else {
                        for n in 0..batch {
                            for c in 0..ch {
                                let base = (n * ch + c) * len;
                                let scale = gm[c] * inv_std[c];
                                for j in base..base + len {
                                    dx[j] = scale * g[j];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let xs = self.value(*x).data();
                    let dx: Vec<T> = xs
                        .iter()
                        .zip(g)
                        .map(|(&a, &d)| if a > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, &dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    let dx = grad_buf(grads, *x, n);
                    for (&idx, &d) in argmax.iter().zip(g) {
                        dx[idx] = dx[idx] + d;
                    }
                }
            }
            Op::AvgPoolGlobal { x } => {
                if self.rg(*x) {
                    let len = self.shape(*x)[2];
                    let inv = T::one() / T::from_usize(len).unwrap();
                    let dx: Vec<T> = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, len)).collect();
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Dense { x, w, b } => {
                let (batch, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out_dim = self.shape(*w)[0];
                if self.rg(*b) {
                    let db = grad_buf(grads, *b, out_dim);
                    for row in g.chunks_exact(out_dim) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); out_dim * inp];
                    T::gemm(out_dim, batch, inp, T::one(), g, true, self.value(*x).data(), false, T::zero(), &mut dw);
                    accumulate(grads, *w, &dw);
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    T::gemm(batch, out_dim, inp, T::one(), g, false, self.value(*w).data(), false, T::zero(), &mut dx);
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.rg(*x) {
                    let y = node.value.data();
                    let dx: Vec<T> = y.iter().zip(g).map(|(&s, &d)| d * s * (T::one() - s)).collect();
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let da: Vec<T> = g.iter().zip(bv).map(|(&d, &v)| d * v).collect();
                    accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let db: Vec<T> = g.iter().zip(av).map(|(&d, &v)| d * v).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    accumulate(grads, *x, &vec![g[0]; n]);
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = T::from_f64_lossy(2.0) * g[0] / T::from_usize(p.len()).unwrap();
                let diff: Vec<T> = p.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect();
                if self.rg(*pred) {
                    accumulate(grads, *pred, &diff);
                }
                if self.rg(*target) {
                    let neg: Vec<T> = diff.iter().map(|&d| -d).collect();
                    accumulate(grads, *target, &neg);
                }
            }
            Op::Bce { prob, labels, weights } => {
                if self.rg(*prob) {
                    let p = self.value(*prob).data();
                    let lo = T::from_f64_lossy(PROB_CLAMP);
                    let hi = T::one() - lo;
                    let scale = -g[0] / T::from_usize(p.len()).unwrap();
                    let dp: Vec<T> = p
                        .iter()
                        .zip(labels)
                        .zip(weights)
                        .map(|((&pi, &y), &w)| {
                            let pc = pi.max(lo).min(hi);
                            scale * w * (y / pc - (T::one() - y) / (T::one() - pc))
                        })
                        .collect();
                    accumulate(grads, *prob, &dp);
                }
            }
        }
    }
}

/// Clamping window applied to probabilities inside the BCE loss.
pub const PROB_CLAMP: f64 = 1e-7;

fn sigmoid<T: Scalar>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &d) in acc.iter_mut().zip(g) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(t(vec![2], vec![-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(t(vec![3], vec![0.5, -2.0, 7.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2], vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(t(vec![1], vec![1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::TapeReused);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn identity_kernel_conv() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = g.input(t(vec![2, 1, 10], data.clone()));
        let w = g.param(t(vec![1, 1, 1], vec![1.0]));
        let b = g.param(t(vec![1], vec![0.0]));
        let y = g.conv1d(x, w, b, 1, Padding::NONE).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_matches_brute_force_with_flipped_kernel() {
        // cross-correlation with w equals true convolution with reversed w
        let xs = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0, 0.0, 2.0];
        let ws = [0.2, -0.7, 1.5];
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 1, 8], xs.to_vec()));
        let w = g.input(t(vec![1, 1, 3], ws.to_vec()));
        let b = g.input(t(vec![1], vec![0.0]));
        let y = g.conv1d(x, w, b, 1, Padding::NONE).unwrap();
        let flipped = [ws[2], ws[1], ws[0]];
        let full: Vec<f64> = (0..xs.len() + 2)
            .map(|n| {
                (0..3)
                    .filter(|&m| n >= m && n - m < xs.len())
                    .map(|m| flipped[m] * xs[n - m])
                    .sum()
            })
            .collect();
        // valid part of the full convolution
        for (a, b) in g.value(y).data().iter().zip(&full[2..8]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_ceil_mode_and_ties() {
        let mut g = Graph::new();
        let x = g.param(t(vec![1, 1, 5], vec![1.0, 1.0, 3.0, 2.0, 5.0]));
        let y = g.maxpool1d(x, 2, 2, true).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn avgpool_of_constant_channel() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 2, 4], vec![3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]));
        let y = g.avgpool_global(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);
        assert_eq!(g.value(y).shape(), &[1, 2]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.9 + 3.0).collect();
        let x = g.input(t(vec![3, 2, 4], data));
        let gamma = g.param(t(vec![2], vec![1.0, 1.0]));
        let beta = g.param(t(vec![2], vec![0.0, 0.0]));
        let mut stats = BatchNormStats::new(2);
        let y = g.batchnorm1d(x, gamma, beta, &mut stats, true).unwrap();
        let ys = g.value(y).data();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| ys[(n * 2 + c) * 4..(n * 2 + c + 1) * 4].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
        }
        assert!(stats.running_mean.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut g = Graph::new();
        let data = vec![0.3, -1.2, 2.5, 0.0];
        let x = g.input(t(vec![1, 2, 2], data.clone()));
        let gamma = g.param(t(vec![2], vec![1.0, 1.0]));
        let beta = g.param(t(vec![2], vec![0.0, 0.0]));
        let mut stats = BatchNormStats::new(2);
        let y = g.batchnorm1d(x, gamma, beta, &mut stats, false).unwrap();
        // y = x / sqrt(1 + eps)
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }
    }

    #[test]
    fn batchnorm_zero_batch_in_train_mode() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(vec![0, 2, 3]));
        let gamma = g.param(t(vec![2], vec![1.0, 1.0]));
        let beta = g.param(t(vec![2], vec![0.0, 0.0]));
        let mut stats = BatchNormStats::new(2);
        assert_eq!(
            g.batchnorm1d(x, gamma, beta, &mut stats, true).unwrap_err(),
            TensorError::EmptyBatch
        );
    }

    #[test]
    fn conv_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::<f64>::zeros(vec![1, 2, 10]));
        let w = g.param(Tensor::zeros(vec![4, 3, 3]));
        let b = g.param(Tensor::zeros(vec![4]));
        assert!(matches!(
            g.conv1d(x, w, b, 1, Padding::NONE),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.param(t(vec![2], vec![0.5, 0.5]));
        let l = g.weighted_bce_loss(p, &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_out_of_range() {
        let mut g = Graph::new();
        let p = g.param(t(vec![1], vec![1.5]));
        assert!(matches!(
            g.weighted_bce_loss(p, &[1.0], &[1.0]),
            Err(TensorError::ProbabilityOutOfRange(_))
        ));
    }
}
