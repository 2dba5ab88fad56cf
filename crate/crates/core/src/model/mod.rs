//! The IKres backbone and its four task heads.
//!
//! ```text
//! x [B,1,L] -> conv(k) -> bn -> relu
//!   4x residual block:
//!     main: conv(k, stride 2) -> bn -> relu -> conv(k) -> bn
//!     skip: maxpool(2, stride 2, ceil) -> conv(1)
//!     relu(main + skip)
//!   -> global average pool [B,E] -> dense(H) -> relu -> dense(out) [-> sigmoid]
//! ```
//!
//! All convolutions use "same" padding, so a 2500-sample input is reduced to
//! 1250, 625, 313 and 157 samples by the four blocks.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, ModelCheckpoint, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BatchNormStats, Graph, Padding, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("input has shape {got:?}, expected [batch, 1, {len}]")]
    InputShape { got: Vec<usize>, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Qt,
    Qrs,
    Pr,
    Prchk,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Qt, Task::Qrs, Task::Pr, Task::Prchk];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Qt => "qt",
            Task::Qrs => "qrs",
            Task::Pr => "pr",
            Task::Prchk => "prchk",
        }
    }

    pub fn outputs(self) -> usize {
        match self {
            Task::Qt => 2,
            _ => 1,
        }
    }

    pub fn is_classifier(self) -> bool {
        self == Task::Prchk
    }

    /// Names of the regression targets, in head-output order.
    pub fn target_names(self) -> &'static [&'static str] {
        match self {
            Task::Qt => &["qt_ms", "hr_bpm"],
            Task::Qrs => &["qrs_ms"],
            Task::Pr => &["pr_ms"],
            Task::Prchk => &[],
        }
    }
}

impl std::str::FromStr for Task {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qt" => Ok(Task::Qt),
            "qrs" => Ok(Task::Qrs),
            "pr" => Ok(Task::Pr),
            "prchk" => Ok(Task::Prchk),
            _ => Err(ModelError::UnknownTask(s.to_string())),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IKresConfig {
    pub ingest_filters: usize,
    pub block_filters: Vec<usize>,
    pub kernel: usize,
    pub input_len: usize,
    pub head_hidden: usize,
}

impl Default for IKresConfig {
    fn default() -> Self {
        Self {
            ingest_filters: 64,
            block_filters: vec![128, 196, 256, 320],
            kernel: 16,
            input_len: 2500,
            head_hidden: 64,
        }
    }
}

impl IKresConfig {
    /// Narrow variant that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            ingest_filters: 8,
            block_filters: vec![12, 16, 24, 32],
            kernel: 16,
            input_len: 2500,
            head_hidden: 32,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.block_filters.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.block_filters.len() != 4 {
            return bad("exactly four residual blocks are required");
        }
        if self.ingest_filters == 0 || self.block_filters.contains(&0) || self.head_hidden == 0 {
            return bad("filter counts and head width must be positive");
        }
        if self.kernel == 0 || self.input_len == 0 {
            return bad("kernel and input length must be positive");
        }
        Ok(())
    }

    /// Sequence length after each residual block.
    pub fn block_lengths(&self) -> Vec<usize> {
        let mut len = self.input_len;
        self.block_filters
            .iter()
            .map(|_| {
                len = len.div_ceil(2);
                len
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    /// Trainable parameter.
    Param,
    /// Batch-norm running statistic.
    Buffer,
}

/// Named tensor in canonical layer-path order.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub kind: TensorKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    conv1: ConvIdx,
    bn1: BnIdx,
    conv2: ConvIdx,
    bn2: BnIdx,
    skip: ConvIdx,
}

/// Network weights for one task. Parameters live in `params`; batch-norm
/// running statistics in `bn`.
#[derive(Debug, Clone)]
pub struct IKres<T> {
    config: IKresConfig,
    task: Task,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormStats<T>>,
    ingest: (ConvIdx, BnIdx),
    blocks: Vec<BlockIdx>,
    fc1: ConvIdx,
    fc2: ConvIdx,
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[batch, outputs]`; probabilities for the classifier head.
    pub output: Var,
    /// `[batch, embedding_dim]`.
    pub embedding: Var,
    /// Graph handles of the parameters, aligned with [`IKres::params`].
    pub params: Vec<Var>,
}

struct Builder<'a, T> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormStats<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn kaiming(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(self.rng))).collect();
        self.push(name, Tensor::new(shape, data).expect("shape matches"))
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn conv(&mut self, path: &str, out_ch: usize, in_ch: usize, k: usize) -> ConvIdx {
        let w = self.kaiming(format!("{path}.weight"), vec![out_ch, in_ch, k], in_ch * k);
        let b = self.push(format!("{path}.bias"), Tensor::zeros(vec![out_ch]));
        ConvIdx { w, b }
    }

    fn dense(&mut self, path: &str, out: usize, inp: usize) -> ConvIdx {
        let w = self.kaiming(format!("{path}.weight"), vec![out, inp], inp);
        let b = self.push(format!("{path}.bias"), Tensor::zeros(vec![out]));
        ConvIdx { w, b }
    }

    fn bn(&mut self, path: &str, ch: usize) -> BnIdx {
        let gamma = self.push(format!("{path}.gamma"), Tensor::full(vec![ch], T::one()));
        let beta = self.push(format!("{path}.beta"), Tensor::zeros(vec![ch]));
        self.bn_names.push(path.to_string());
        self.bn.push(BatchNormStats::new(ch));
        BnIdx { gamma, beta, stats: self.bn.len() - 1 }
    }
}

impl<T: Scalar> IKres<T> {
    /// Kaiming-normal weights (variance `2 / fan_in`), zero biases, unit
    /// batch-norm scales. Deterministic in `seed`.
    pub fn new(config: IKresConfig, task: Task, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { rng: &mut rng, names: vec![], params: vec![], bn_names: vec![], bn: vec![] };
        let k = config.kernel;
        let f0 = config.ingest_filters;
        let ingest = (b.conv("ingest.conv", f0, 1, k), b.bn("ingest.bn", f0));
        let mut blocks = Vec::with_capacity(4);
        let mut in_ch = f0;
        for (i, &out) in config.block_filters.iter().enumerate() {
            let p = format!("block{}", i + 1);
            blocks.push(BlockIdx {
                conv1: b.conv(&format!("{p}.conv1"), out, in_ch, k),
                bn1: b.bn(&format!("{p}.bn1"), out),
                conv2: b.conv(&format!("{p}.conv2"), out, out, k),
                bn2: b.bn(&format!("{p}.bn2"), out),
                skip: b.conv(&format!("{p}.skip"), out, in_ch, 1),
            });
            in_ch = out;
        }
        let fc1 = b.dense("head.fc1", config.head_hidden, in_ch);
        let fc2 = b.dense("head.fc2", task.outputs(), config.head_hidden);
        let Builder { names, params, bn_names, bn, .. } = b;
        Ok(Self { config, task, names, params, bn_names, bn, ingest, blocks, fc1, fc2 })
    }

    pub fn config(&self) -> &IKresConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BatchNormStats<T>] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BatchNormStats<T>] {
        &mut self.bn
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Every parameter and buffer in canonical order: parameters first (layer
    /// order), then `<bn path>.running_mean` / `.running_var` pairs.
    pub fn named_tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out: Vec<NamedTensor<T>> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| NamedTensor { name: n.clone(), kind: TensorKind::Param, value: p.clone() })
            .collect();
        for (path, s) in self.bn_names.iter().zip(&self.bn) {
            let ch = s.running_mean.len();
            for (suffix, v) in [("running_mean", &s.running_mean), ("running_var", &s.running_var)] {
                out.push(NamedTensor {
                    name: format!("{path}.{suffix}"),
                    kind: TensorKind::Buffer,
                    value: Tensor::new(vec![ch], v.clone()).expect("channel vector"),
                });
            }
        }
        out
    }

    /// Overwrites weights and buffers from canonical-order tensors.
    pub fn load_named(&mut self, tensors: &[NamedTensor<T>]) -> Result<(), ModelError> {
        let expected = self.named_tensors();
        if expected.len() != tensors.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (e, t) in expected.iter().zip(tensors) {
            if e.name != t.name || e.kind != t.kind || e.value.shape() != t.value.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name,
                    t.value.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        let np = self.params.len();
        for (p, t) in self.params.iter_mut().zip(&tensors[..np]) {
            *p = t.value.clone();
        }
        for (s, pair) in self.bn.iter_mut().zip(tensors[np..].chunks_exact(2)) {
            s.running_mean = pair[0].value.data().to_vec();
            s.running_var = pair[1].value.data().to_vec();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> IKres<U> {
        IKres {
            config: self.config.clone(),
            task: self.task,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            bn_names: self.bn_names.clone(),
            bn: self
                .bn
                .iter()
                .map(|s| BatchNormStats {
                    running_mean: s.running_mean.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                    running_var: s.running_var.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                })
                .collect(),
            ingest: self.ingest,
            blocks: self.blocks.clone(),
            fc1: self.fc1,
            fc2: self.fc2,
        }
    }

    /// Records a forward pass. In train mode batch statistics are used and
    /// folded into the running statistics.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, train: bool) -> Result<ForwardPass, ModelError> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.record(g, x, &mut bn, train);
        self.bn = bn;
        out
    }

    /// Inference-mode forward pass; running statistics are left untouched.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<ForwardPass, ModelError> {
        let mut bn = self.bn.clone();
        self.record(g, x, &mut bn, false)
    }

    /// Forward pass with caller-owned batch-norm statistics.
    pub fn forward_with_stats(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bn: &mut [BatchNormStats<T>],
        train: bool,
    ) -> Result<ForwardPass, ModelError> {
        self.record(g, x, bn, train)
    }

    /// Head applied to an existing embedding `[batch, embedding_dim]`.
    pub fn forward_head(&self, g: &mut Graph<T>, embedding: Var, params: &[Var]) -> Result<Var, ModelError> {
        let shape = g.value(embedding).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.embedding_dim() {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "forward_head",
                detail: format!("embedding {shape:?}, expected [batch, {}]", self.config.embedding_dim()),
            }));
        }
        let h = g.dense(embedding, params[self.fc1.w], params[self.fc1.b])?;
        let h = g.relu(h);
        let out = g.dense(h, params[self.fc2.w], params[self.fc2.b])?;
        Ok(if self.task.is_classifier() { g.sigmoid(out) } else { out })
    }

    fn record(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bn: &mut [BatchNormStats<T>],
        train: bool,
    ) -> Result<ForwardPass, ModelError> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != 1 || shape[2] != self.config.input_len {
            return Err(ModelError::InputShape { got: shape, len: self.config.input_len });
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let k = self.config.kernel;
        let p = &params;

        let conv = |g: &mut Graph<T>, h: Var, c: ConvIdx, k: usize, stride: usize| {
            let len = g.value(h).shape()[2];
            g.conv1d(h, p[c.w], p[c.b], stride, Padding::same(len, k, stride))
        };
        let norm = |g: &mut Graph<T>, h: Var, n: BnIdx, bn: &mut [BatchNormStats<T>]| {
            g.batchnorm1d(h, p[n.gamma], p[n.beta], &mut bn[n.stats], train)
        };

        let (ci, ni) = self.ingest;
        let h = conv(g, x, ci, k, 1)?;
        let h = norm(g, h, ni, bn)?;
        let mut h = g.relu(h);
        for blk in &self.blocks {
            let a = conv(g, h, blk.conv1, k, 2)?;
            let a = norm(g, a, blk.bn1, bn)?;
            let a = g.relu(a);
            let a = conv(g, a, blk.conv2, k, 1)?;
            let a = norm(g, a, blk.bn2, bn)?;
            let s = g.maxpool1d(h, 2, 2, true)?;
            let s = conv(g, s, blk.skip, 1, 1)?;
            let sum = g.add(a, s)?;
            h = g.relu(sum);
        }
        let embedding = g.avgpool_global(h)?;
        let output = self.forward_head(g, embedding, &params)?;
        Ok(ForwardPass { output, embedding, params })
    }
}

/// Batch of equal-length signals as a `[batch, 1, len]` tensor.
pub fn batch_tensor<T: Scalar>(signals: &[&[f32]]) -> Result<Tensor<T>, ModelError> {
    let len = signals.first().map_or(0, |s| s.len());
    if signals.iter().any(|s| s.len() != len) {
        return Err(ModelError::InvalidConfig("signals in a batch must share a length".into()));
    }
    let data = signals.iter().flat_map(|s| s.iter().map(|&v| T::from_f64_lossy(v as f64))).collect();
    Ok(Tensor::new(vec![signals.len(), 1, len], data)?)
}

/// Runs inference on one batch and returns `[batch][outputs]` raw head
/// values (z-scores or probabilities).
pub fn predict_batch(model: &IKres<f32>, signals: &[&[f32]]) -> Result<Vec<Vec<f32>>, ModelError> {
    let mut g = Graph::new();
    let x = g.input(batch_tensor(signals)?);
    let fp = model.forward_eval(&mut g, x)?;
    let out = g.value(fp.output);
    let width = out.shape()[1];
    Ok(out.data().chunks_exact(width).map(<[f32]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> IKresConfig {
        IKresConfig { ingest_filters: 4, block_filters: vec![4, 6, 6, 8], kernel: 5, input_len: 100, head_hidden: 8 }
    }

    #[test]
    fn lengths_halve() {
        assert_eq!(IKresConfig::default().block_lengths(), vec![1250, 625, 313, 157]);
        assert_eq!(IKresConfig::default().embedding_dim(), 320);
    }

    #[test]
    fn embedding_and_output_shapes() {
        for task in Task::ALL {
            let mut m = IKres::<f32>::new(tiny(), task, 1).unwrap();
            let mut g = Graph::new();
            let x = g.input(Tensor::full(vec![3, 1, 100], 0.1f32));
            let fp = m.forward(&mut g, x, true).unwrap();
            assert_eq!(g.value(fp.embedding).shape(), &[3, 8]);
            assert_eq!(g.value(fp.output).shape(), &[3, task.outputs()]);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = IKres::<f32>::new(tiny(), Task::Qt, 5).unwrap();
        let b = IKres::<f32>::new(tiny(), Task::Qt, 5).unwrap();
        let c = IKres::<f32>::new(tiny(), Task::Qt, 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn canonical_names() {
        let m = IKres::<f32>::new(tiny(), Task::Pr, 0).unwrap();
        let names: Vec<String> = m.named_tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names[0], "ingest.conv.weight");
        assert!(names.contains(&"block4.skip.weight".to_string()));
        assert!(names.contains(&"head.fc2.bias".to_string()));
        assert_eq!(names.last().unwrap(), "block4.bn2.running_var");
    }

    #[test]
    fn bad_input_shape() {
        let m = IKres::<f32>::new(tiny(), Task::Qrs, 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 1, 99]));
        assert!(matches!(m.forward_eval(&mut g, x), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn invalid_config() {
        let c = IKresConfig { block_filters: vec![4, 4, 4], ..tiny() };
        assert!(IKres::<f32>::new(c, Task::Qt, 0).is_err());
    }

    #[test]
    fn task_parse() {
        assert_eq!("PRchk".parse::<Task>().unwrap(), Task::Prchk);
        assert!("st".parse::<Task>().is_err());
    }
}
