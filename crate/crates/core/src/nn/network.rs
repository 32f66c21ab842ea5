use serde::{Deserialize, Serialize};

use super::layers::{Layer, LayerCache};
use super::{Mode, Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Stem,
    /// 1-based block id.
    Block(usize),
    Head,
}

/// A contiguous run of layers frozen or trained as a unit.
#[derive(Clone, Debug)]
pub struct Stage {
    pub kind: StageKind,
    pub layers: Vec<Layer>,
    pub trainable: bool,
}

impl Stage {
    pub fn new(kind: StageKind, layers: Vec<Layer>) -> Self {
        Stage {
            kind,
            layers,
            trainable: false,
        }
    }

    fn forward(&mut self, x: &Tensor) -> (Tensor, Vec<LayerCache>) {
        let mode = if self.trainable { Mode::Train } else { Mode::Infer };
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (y, c) = layer.forward(&h, mode);
            caches.push(c);
            h = y;
        }
        (h, caches)
    }

    pub fn infer(&mut self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.infer(&h);
        }
        h
    }

    fn backward(&mut self, caches: &[LayerCache], dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let accumulate = self.trainable;
        let mut d = dy;
        let n = self.layers.len();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            let want = need_dx || i > 0;
            match layer.backward(cache, &d, accumulate, want) {
                Some(next) => d = next,
                None => {
                    debug_assert!(i == 0 || n == 0);
                    return None;
                }
            }
        }
        need_dx.then_some(d)
    }

    /// Names of the layers in this stage that own parameters.
    pub fn layer_ids(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| l.learnable().into_iter().map(|(n, _)| n))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Every parameter and buffer value, in a fixed order, as raw bytes.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.layers {
            for (_, ps) in l.learnable() {
                for p in ps {
                    out.extend(p.value.iter().flat_map(|v| v.to_le_bytes()));
                }
            }
            for (_, b) in l.buffers() {
                out.extend(b.value.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        out
    }
}

/// Feed-forward network: stem, numbered blocks, head (in that order).
#[derive(Clone, Debug)]
pub struct Network {
    pub input_chw: [usize; 3],
    pub stages: Vec<Stage>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub loss: f32,
    pub correct: usize,
    pub count: usize,
}

/// Mean softmax cross-entropy, its gradient w.r.t. the logits, and the
/// number of argmax hits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor, usize) {
    let n = logits.batch();
    let c = logits.sample_len();
    assert_eq!(labels.len(), n);
    let mut grad = Tensor::zeros(logits.shape);
    let mut loss = 0.0f64;
    let mut correct = 0;
    for i in 0..n {
        let row = logits.sample(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f32 = exps.iter().sum();
        let y = labels[i];
        let p = exps[y] / z;
        // f32::max would swallow a NaN here
        let p = if p.is_nan() { p } else { p.max(f32::MIN_POSITIVE) };
        loss += -(p.ln()) as f64;
        if argmax(row) == y {
            correct += 1;
        }
        let g = &mut grad.data[i * c..(i + 1) * c];
        for (k, gv) in g.iter_mut().enumerate() {
            *gv = (exps[k] / z - if k == y { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    ((loss / n.max(1) as f64) as f32, grad, correct)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Network {
    pub fn num_blocks(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s.kind, StageKind::Block(_)))
            .count()
    }

    pub fn stage_index(&self, kind: StageKind) -> Option<usize> {
        self.stages.iter().position(|s| s.kind == kind)
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(Stage::param_count).sum()
    }

    /// Inference-mode logits.
    pub fn predict(&mut self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for s in &mut self.stages {
            h = s.infer(&h);
        }
        h
    }

    /// Inference-mode output of stage `index`.
    pub fn forward_to(&mut self, x: &Tensor, index: usize) -> Tensor {
        let mut h = x.clone();
        for s in &mut self.stages[..=index] {
            h = s.infer(&h);
        }
        h
    }

    /// One optimisation step on a batch. Stages before the first trainable
    /// one run in inference mode without caches; only trainable stages
    /// accumulate gradients and get updated.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize], opt: &mut Adam) -> TrainStats {
        let Some(first) = self.stages.iter().position(|s| s.trainable) else {
            let logits = self.predict(x);
            let (loss, _, correct) = softmax_cross_entropy(&logits, labels);
            return TrainStats { loss, correct, count: labels.len() };
        };
        for s in &mut self.stages[first..] {
            if s.trainable {
                s.params_mut().into_iter().for_each(|p| {
                    p.ensure_state();
                    p.zero_grad()
                });
            }
        }
        let mut h = x.clone();
        for s in &mut self.stages[..first] {
            h = s.infer(&h);
        }
        let mut caches = Vec::new();
        for s in &mut self.stages[first..] {
            let (y, c) = s.forward(&h);
            caches.push(c);
            h = y;
        }
        let (loss, mut d, correct) = softmax_cross_entropy(&h, labels);
        if !loss.is_finite() {
            return TrainStats { loss, correct, count: labels.len() };
        }
        for (offset, (s, c)) in self.stages[first..].iter_mut().zip(&caches).enumerate().rev() {
            match s.backward(c, d, offset > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
        opt.step(self);
        TrainStats { loss, correct, count: labels.len() }
    }

    /// `("layer/param", shape, values)` for every parameter and buffer.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for s in &self.stages {
            for l in &s.layers {
                for (name, ps) in l.learnable() {
                    for p in ps {
                        out.push((format!("{name}/{}", p.name), p.shape.clone(), p.value.clone()));
                    }
                }
                for (name, b) in l.buffers() {
                    out.push((format!("{name}/{}", b.name), vec![b.value.len()], b.value.clone()));
                }
            }
        }
        out
    }

    /// Overwrites the tensor called `"layer/param"`. Returns false when no
    /// such tensor exists; errors on a size mismatch.
    pub fn set_tensor(&mut self, full_name: &str, values: &[f32]) -> Result<bool, String> {
        let Some((layer, pname)) = full_name.rsplit_once('/') else {
            return Ok(false);
        };
        for s in &mut self.stages {
            for l in &mut s.layers {
                let lname_matches: Vec<String> = l.learnable().into_iter().map(|(n, _)| n).collect();
                if lname_matches.iter().any(|n| n == layer) {
                    // params of a composite layer are visited in learnable() order
                    let mut names = Vec::new();
                    for (n, ps) in l.learnable() {
                        for p in ps {
                            names.push((n.clone(), p.name.clone()));
                        }
                    }
                    if let Some(idx) = names.iter().position(|(n, p)| n == layer && p == pname) {
                        let p = &mut l.params_mut()[idx];
                        if p.value.len() != values.len() {
                            return Err(format!(
                                "{full_name}: expected {} values, got {}",
                                p.value.len(),
                                values.len()
                            ));
                        }
                        p.value.copy_from_slice(values);
                        return Ok(true);
                    }
                    for (n, b) in l.buffers_mut() {
                        if n == layer && b.name == pname {
                            if b.value.len() != values.len() {
                                return Err(format!(
                                    "{full_name}: expected {} values, got {}",
                                    b.value.len(),
                                    values.len()
                                ));
                            }
                            b.value.copy_from_slice(values);
                            return Ok(true);
                        }
                    }
                }
            }
        }
        Ok(false)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0 }
    }

    pub fn step(&mut self, net: &mut Network) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for s in net.stages.iter_mut().filter(|s| s.trainable) {
            for p in s.params_mut() {
                p.ensure_state();
                for i in 0..p.value.len() {
                    let g = p.grad[i];
                    p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                    p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = p.m[i] / bc1;
                    let vhat = p.v[i] / bc2;
                    p.value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
                p.zero_grad();
            }
        }
    }
}
