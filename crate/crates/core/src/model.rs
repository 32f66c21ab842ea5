//! Block-partitioned networks: freezing by genotype, parameter accounting,
//! activation extraction and weight I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, stratified_subsample, Dataset};
use crate::error::{Error, Result};
use crate::ga::Genotype;
use crate::nn::{Activation, BatchNorm, Conv2d, Dense, Layer, MbConv, MbConvSpec, Network, Padding, Stage, StageKind, Tensor};
use crate::otdd::LabeledFeatureSet;

/// One selectable block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    /// 1-based, input to output.
    pub block_id: usize,
    pub layer_ids: Vec<String>,
    pub param_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Three-block convolutional fixture.
    #[default]
    Toy,
    #[serde(rename = "efficientnet_b0")]
    EfficientNetB0,
}

/// A network whose stages are stem, blocks `1..=B` and head, with
/// trainability controlled per block.
#[derive(Clone, Debug)]
pub struct BlockedModel {
    pub arch: Architecture,
    net: Network,
    stem_trainable: bool,
    genotype: Option<Genotype>,
}

/// Where activations are captured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    /// Output of a block.
    Block(usize),
    /// Output of layer `layer` (0-based) inside block `block`.
    Layer { block: usize, layer: usize },
}

impl BlockedModel {
    /// Checks the stage layout and freezes everything except the head.
    pub fn new(arch: Architecture, net: Network) -> Result<Self> {
        let kinds: Vec<StageKind> = net.stages.iter().map(|s| s.kind).collect();
        let b = net.num_blocks();
        let mut expected = vec![StageKind::Stem];
        expected.extend((1..=b).map(StageKind::Block));
        expected.push(StageKind::Head);
        if b == 0 || kinds != expected {
            return Err(Error::AdapterUnsupported(format!(
                "expected stem, blocks 1..=B, head; found {kinds:?}"
            )));
        }
        let mut seen = BTreeSet::new();
        for s in &net.stages {
            for id in s.layer_ids() {
                if !seen.insert(id.clone()) {
                    return Err(Error::AdapterUnsupported(format!("layer {id} appears twice")));
                }
            }
        }
        let mut m = BlockedModel {
            arch,
            net,
            stem_trainable: false,
            genotype: None,
        };
        m.refresh_trainability();
        Ok(m)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn num_blocks(&self) -> usize {
        self.net.num_blocks()
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    /// Lets the stem train alongside the selected blocks. Off by default.
    pub fn set_stem_trainable(&mut self, on: bool) {
        self.stem_trainable = on;
        self.refresh_trainability();
    }

    pub fn stem_trainable(&self) -> bool {
        self.stem_trainable
    }

    fn refresh_trainability(&mut self) {
        let bits = self.genotype.as_ref().map(|g| g.bits().to_vec());
        let stem = self.stem_trainable;
        for s in &mut self.net.stages {
            s.trainable = match s.kind {
                StageKind::Stem => stem,
                StageKind::Head => true,
                StageKind::Block(b) => bits.as_ref().is_some_and(|v| v[b - 1]),
            };
        }
    }

    fn stage(&self, kind: StageKind) -> &Stage {
        &self.net.stages[self.net.stage_index(kind).expect("validated layout")]
    }

    pub fn describe_blocks(&self) -> Vec<BlockSpec> {
        (1..=self.num_blocks())
            .map(|b| {
                let s = self.stage(StageKind::Block(b));
                BlockSpec {
                    block_id: b,
                    layer_ids: s.layer_ids(),
                    param_count: s.param_count(),
                }
            })
            .collect()
    }

    pub fn stem_param_count(&self) -> usize {
        self.stage(StageKind::Stem).param_count()
    }

    pub fn head_param_count(&self) -> usize {
        self.stage(StageKind::Head).param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Marks block `i` trainable iff bit `i` is set. Weights are untouched.
    pub fn apply_genotype(&mut self, g: &Genotype) -> Result<()> {
        if g.len() != self.num_blocks() {
            return Err(Error::Contract(format!(
                "genotype has {} bits, model has {} blocks",
                g.len(),
                self.num_blocks()
            )));
        }
        self.genotype = Some(g.clone());
        self.refresh_trainability();
        Ok(())
    }

    pub fn with_genotype(mut self, g: &Genotype) -> Result<Self> {
        self.apply_genotype(g)?;
        Ok(self)
    }

    pub fn count_trainable_params(&self) -> usize {
        self.net
            .stages
            .iter()
            .filter(|s| s.trainable)
            .map(Stage::param_count)
            .sum()
    }

    /// Replaces the classifier with a freshly initialised one for
    /// `num_classes` outputs.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) {
        let idx = self.net.stage_index(StageKind::Head).expect("validated layout");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4ead));
        for l in &mut self.net.stages[idx].layers {
            if let Layer::Dense(d) = l {
                *d = Dense::new(&d.name, d.in_features, num_classes, &mut rng);
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.stage(StageKind::Head)
            .layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d.out_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Raw bytes of every parameter and buffer of a stage.
    pub fn stage_snapshot(&self, kind: StageKind) -> Vec<u8> {
        self.stage(kind).snapshot()
    }

    /// Globally average-pooled activations for every tap, over the whole
    /// dataset in dataset order. Inference mode only.
    pub fn extract_activations(&mut self, ds: &Dataset, taps: &[Tap], batch_size: usize) -> Result<Vec<LabeledFeatureSet>> {
        if ds.is_empty() {
            return Err(Error::EmptySplit("activation extraction on an empty dataset".into()));
        }
        for t in taps {
            let b = match t {
                Tap::Block(b) | Tap::Layer { block: b, .. } => *b,
            };
            if b == 0 || b > self.num_blocks() {
                return Err(Error::Contract(format!(
                    "block {b} outside 1..={}",
                    self.num_blocks()
                )));
            }
            if let Tap::Layer { block, layer } = t {
                if *layer >= self.stage(StageKind::Block(*block)).layers.len() {
                    return Err(Error::Contract(format!("block {block} has no layer {layer}")));
                }
            }
        }
        let last_block = taps
            .iter()
            .map(|t| match t {
                Tap::Block(b) | Tap::Layer { block: b, .. } => *b,
            })
            .max()
            .unwrap_or(0);
        let mut feats: Vec<Vec<f64>> = vec![Vec::new(); taps.len()];
        let mut dims = vec![0usize; taps.len()];
        let mut labels = Vec::new();
        let order: Vec<usize> = (0..ds.len()).collect();
        for batch in ds.batches(&order, batch_size, None) {
            if batch.labels.is_empty() {
                continue;
            }
            labels.extend_from_slice(&batch.labels);
            let mut h = batch.x;
            for s in &mut self.net.stages {
                let block = match s.kind {
                    StageKind::Stem => 0,
                    StageKind::Block(b) => b,
                    StageKind::Head => break,
                };
                if block > last_block {
                    break;
                }
                let n_layers = s.layers.len();
                for (li, layer) in s.layers.iter_mut().enumerate() {
                    h = layer.infer(&h);
                    for (k, t) in taps.iter().enumerate() {
                        let hit = match *t {
                            Tap::Layer { block: b, layer } => b == block && layer == li,
                            Tap::Block(b) => b == block && li + 1 == n_layers,
                        };
                        if hit {
                            dims[k] = h.channels();
                            feats[k].extend(pool_rows(&h));
                        }
                    }
                }
            }
        }
        taps.iter()
            .enumerate()
            .map(|(k, t)| {
                let id = match t {
                    Tap::Block(b) | Tap::Layer { block: b, .. } => *b,
                };
                Ok(LabeledFeatureSet::new(std::mem::take(&mut feats[k]), dims[k], labels.clone())?
                    .with_provenance(id, &ds.name, 0))
            })
            .collect()
    }

    /// Block-output features for a stratified sample of `n_samples` items.
    pub fn extract_block_activations(
        &mut self,
        ds: &Dataset,
        block_id: usize,
        n_samples: usize,
        seed: u64,
        batch_size: usize,
    ) -> Result<LabeledFeatureSet> {
        if ds.is_empty() {
            return Err(Error::EmptySplit("activation extraction on an empty dataset".into()));
        }
        let sample = stratified_subsample(ds, n_samples, seed)?;
        let mut out = self.extract_activations(&sample, &[Tap::Block(block_id)], batch_size)?;
        let fs = out.remove(0);
        Ok(LabeledFeatureSet { seed, ..fs })
    }

    /// Writes every parameter and buffer as a safetensors file.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let tensors = self.net.named_tensors();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .into_iter()
            .map(|(n, s, v)| (n, s, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views: Vec<(String, TensorView<'_>)> = bytes
            .iter()
            .map(|(n, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Format(format!("{n}: {e}")))
            })
            .collect::<Result<_>>()?;
        let data = safetensors::serialize(views, &None).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, data).map_err(|e| Error::io(path, e))
    }

    /// Loads weights saved by [`BlockedModel::save_weights`] or produced by
    /// the Keras exporter. Head tensors whose shape differs (another class
    /// count) are skipped and keep their fresh initialisation; any other
    /// missing or mismatched tensor is an error.
    pub fn load_weights(&mut self, path: &Path) -> Result<LoadReport> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let head_layers: BTreeSet<String> = self.stage(StageKind::Head).layer_ids().into_iter().collect();
        let mut report = LoadReport::default();
        let expected: BTreeMap<String, Vec<usize>> =
            self.net.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for (name, shape) in &expected {
            let in_head = name.rsplit_once('/').is_some_and(|(l, _)| head_layers.contains(l));
            let view = match st.tensor(name) {
                Ok(v) => v,
                Err(_) if in_head => {
                    report.skipped.push(name.clone());
                    continue;
                }
                Err(_) => {
                    report.missing.push(name.clone());
                    continue;
                }
            };
            if view.dtype() != Dtype::F32 {
                return Err(Error::Format(format!("{name}: expected f32, found {:?}", view.dtype())));
            }
            let numel: usize = view.shape().iter().product();
            if numel != shape.iter().product::<usize>() {
                if in_head {
                    report.skipped.push(name.clone());
                    continue;
                }
                return Err(Error::Format(format!(
                    "{name}: shape {:?} does not match {:?}",
                    view.shape(),
                    shape
                )));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            self.net.set_tensor(name, &values).map_err(Error::Format)?;
            report.loaded += 1;
        }
        if !report.missing.is_empty() {
            return Err(Error::Format(format!(
                "{}: missing {} tensors, first {}",
                path.display(),
                report.missing.len(),
                report.missing[0]
            )));
        }
        report.unexpected = st
            .names()
            .into_iter()
            .filter(|n| !expected.contains_key(*n))
            .cloned()
            .collect();
        report.unexpected.sort();
        Ok(report)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Head tensors left at their initialisation.
    pub skipped: Vec<String>,
    pub missing: Vec<String>,
    /// Tensors in the file with no counterpart in the model.
    pub unexpected: Vec<String>,
}

/// Spatial mean per `(sample, channel)`, as rows.
fn pool_rows(h: &Tensor) -> Vec<f64> {
    let plane = h.plane() as f64;
    let n = h.plane();
    h.data
        .chunks(n)
        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / plane)
        .collect()
}

fn conv_bn_act(
    conv: Conv2d,
    bn_name: &str,
    act: Activation,
) -> Vec<Layer> {
    let c = conv.out_channels;
    vec![
        Layer::Conv(conv),
        Layer::BatchNorm(BatchNorm::new(bn_name, c)),
        Layer::Act(act),
    ]
}

/// Channel widths of the toy fixture: stem, then blocks 1..=3.
pub const TOY_WIDTHS: [usize; 4] = [8, 16, 24, 32];

/// Small CNN: a 3x3 stem, three conv-BN-ReLU-pool blocks and a pooled dense
/// head.
pub fn toy_network(num_classes: usize, input_hw: (usize, usize), seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x70f));
    let w = TOY_WIDTHS;
    let mut stages = vec![Stage::new(
        StageKind::Stem,
        conv_bn_act(
            Conv2d::new("stem_conv", 3, w[0], 3, 1, Padding::same(3), false, &mut rng),
            "stem_bn",
            Activation::Relu,
        ),
    )];
    for b in 1..=3 {
        let mut layers = conv_bn_act(
            Conv2d::new(&format!("block{b}_conv"), w[b - 1], w[b], 3, 1, Padding::same(3), false, &mut rng),
            &format!("block{b}_bn"),
            Activation::Relu,
        );
        layers.push(Layer::AvgPool2);
        stages.push(Stage::new(StageKind::Block(b), layers));
    }
    stages.push(Stage::new(
        StageKind::Head,
        vec![
            Layer::GlobalAvgPool,
            Layer::Dense(Dense::new("head_dense", w[3], num_classes, &mut rng)),
        ],
    ));
    Network {
        input_chw: [3, input_hw.0, input_hw.1],
        stages,
    }
}

pub fn toy_model(num_classes: usize, input_hw: (usize, usize), seed: u64) -> BlockedModel {
    BlockedModel::new(Architecture::Toy, toy_network(num_classes, input_hw, seed)).expect("toy layout is valid")
}

/// `(repeats, kernel, stride, in, out, expand)` per stage of the reference
/// network.
pub const EFFICIENTNET_B0_STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (2, 3, 2, 16, 24, 6),
    (2, 5, 2, 24, 40, 6),
    (3, 3, 2, 40, 80, 6),
    (3, 5, 1, 80, 112, 6),
    (4, 5, 2, 112, 192, 6),
    (1, 3, 1, 192, 320, 6),
];

fn stride2_padding(kernel: usize, h: usize) -> Padding {
    if h % 2 == 0 {
        Padding::stride2_even(kernel)
    } else {
        Padding::same(kernel)
    }
}

/// EfficientNetB0 with Keras layer names. The head holds the 1x1 top
/// convolution, its batch norm, pooling and the classifier.
pub fn efficientnet_b0_network(num_classes: usize, input_hw: (usize, usize), seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xef0));
    let (mut h, mut w) = input_hw;
    let stem_conv = Conv2d::new("stem_conv", 3, 32, 3, 2, stride2_padding(3, h), false, &mut rng);
    (h, w) = stem_conv.output_hw(h, w);
    let mut stages = vec![Stage::new(
        StageKind::Stem,
        conv_bn_act(stem_conv, "stem_bn", Activation::Swish),
    )];
    for (b, &(repeats, kernel, stride, cin, cout, expand)) in EFFICIENTNET_B0_STAGES.iter().enumerate() {
        let mut layers = Vec::new();
        for r in 0..repeats {
            let spec = MbConvSpec {
                prefix: format!("block{}{}_", b + 1, (b'a' + r as u8) as char),
                in_channels: if r == 0 { cin } else { cout },
                out_channels: cout,
                kernel,
                stride: if r == 0 { stride } else { 1 },
                expand_ratio: expand,
                se_ratio: 0.25,
                input_hw: (h, w),
            };
            let m = MbConv::new(&spec, &mut rng);
            (h, w) = m.dwconv.output_hw(h, w);
            layers.push(Layer::MbConv(Box::new(m)));
        }
        stages.push(Stage::new(StageKind::Block(b + 1), layers));
    }
    let mut head = conv_bn_act(
        Conv2d::new("top_conv", 320, 1280, 1, 1, Padding::default(), false, &mut rng),
        "top_bn",
        Activation::Swish,
    );
    head.push(Layer::GlobalAvgPool);
    head.push(Layer::Dense(Dense::new("predictions", 1280, num_classes, &mut rng)));
    stages.push(Stage::new(StageKind::Head, head));
    Network {
        input_chw: [3, input_hw.0, input_hw.1],
        stages,
    }
}

pub fn efficientnet_b0(num_classes: usize, input_hw: (usize, usize), seed: u64) -> BlockedModel {
    BlockedModel::new(Architecture::EfficientNetB0, efficientnet_b0_network(num_classes, input_hw, seed))
        .expect("reference layout is valid")
}

pub fn build(arch: Architecture, num_classes: usize, input_hw: (usize, usize), seed: u64) -> BlockedModel {
    match arch {
        Architecture::Toy => toy_model(num_classes, input_hw, seed),
        Architecture::EfficientNetB0 => efficientnet_b0(num_classes, input_hw, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_partition() {
        let m = toy_model(3, (16, 16), 0);
        let blocks = m.describe_blocks();
        assert_eq!(blocks.len(), 3);
        let ids: Vec<usize> = blocks.iter().map(|b| b.block_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        let mut all = BTreeSet::new();
        for b in &blocks {
            for id in &b.layer_ids {
                assert!(all.insert(id.clone()));
            }
        }
        let total: usize = blocks.iter().map(|b| b.param_count).sum::<usize>() + m.stem_param_count() + m.head_param_count();
        assert_eq!(total, m.total_param_count());
    }

    #[test]
    fn toy_counts_by_hand() {
        let m = toy_model(3, (16, 16), 0);
        // conv k*k*in*out, BN 2*out
        assert_eq!(m.stem_param_count(), 9 * 3 * 8 + 16);
        let counts: Vec<usize> = m.describe_blocks().iter().map(|b| b.param_count).collect();
        assert_eq!(counts, vec![9 * 8 * 16 + 32, 9 * 16 * 24 + 48, 9 * 24 * 32 + 64]);
        assert_eq!(m.head_param_count(), 32 * 3 + 3);
    }

    #[test]
    fn genotype_trainability() {
        let mut m = toy_model(3, (16, 16), 0);
        m.apply_genotype(&"000".parse().unwrap()).unwrap();
        assert_eq!(m.count_trainable_params(), m.head_param_count());
        m.apply_genotype(&"010".parse().unwrap()).unwrap();
        let b2 = m.describe_blocks()[1].param_count;
        assert_eq!(m.count_trainable_params(), b2 + m.head_param_count());
        let flags: Vec<bool> = m.network().stages.iter().map(|s| s.trainable).collect();
        assert_eq!(flags, vec![false, false, true, false, true]);
        assert!(matches!(m.apply_genotype(&"01".parse().unwrap()), Err(Error::Contract(_))));
        m.set_stem_trainable(true);
        assert!(m.network().stages[0].trainable);
    }

    #[test]
    fn unpartitionable_network() {
        let mut net = toy_network(3, (16, 16), 0);
        net.stages.retain(|s| !matches!(s.kind, StageKind::Block(_)));
        assert!(matches!(
            BlockedModel::new(Architecture::Toy, net),
            Err(Error::AdapterUnsupported(_))
        ));
    }

    #[test]
    fn reference_block_counts() {
        let m = efficientnet_b0(101, (224, 224), 0);
        assert_eq!(m.num_blocks(), 7);
        let counts: Vec<usize> = m.describe_blocks().iter().map(|b| b.param_count).collect();
        assert_eq!(counts, vec![1448, 16714, 46640, 242930, 543148, 2026348, 717232]);
        assert_eq!(m.stem_param_count(), 928);
        // top conv + BN + 1280 x 101 classifier
        assert_eq!(m.head_param_count(), 409_600 + 2560 + 129_381);
        assert_eq!(m.total_param_count(), 4_136_929);
    }

    #[test]
    fn weights_roundtrip_and_head_skip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.safetensors");
        let a = toy_model(3, (16, 16), 1);
        a.save_weights(&p).unwrap();
        let mut b = toy_model(5, (16, 16), 2);
        let r = b.load_weights(&p).unwrap();
        assert_eq!(r.skipped, vec!["head_dense/bias".to_string(), "head_dense/kernel".to_string()]);
        for k in [StageKind::Stem, StageKind::Block(1), StageKind::Block(3)] {
            assert_eq!(a.stage_snapshot(k), b.stage_snapshot(k));
        }
        assert_eq!(b.num_classes(), 5);
        let mut c = toy_model(3, (16, 16), 3);
        c.load_weights(&p).unwrap();
        assert_eq!(a.network().named_tensors(), c.network().named_tensors());
    }
}
