//! Network topologies: pix2pix-style U-Net generator, whole-image discriminator
//! and the segmentation U-Net, plus weight snapshots.
//!
//! Conventions shared by every topology:
//! - in-block convolutions are 3x3 / stride 1 / pad 1,
//! - down- and upsampling use 4x4 / stride 2 / pad 1 (transposed) convolutions,
//! - every convolution is followed by batch norm and the activation, and by
//!   dropout when `dropout_p > 0`,
//! - stage `i` has `initial_filters * 2^i` channels, capped at
//!   [`FILTER_CAP`] times the initial width,
//! - weights start from N(0, 0.02), biases and BN shifts from 0, BN scales from 1.
//!
//! # Snapshot file format (`<tag>_step<NNNNN>.wts`)
//!
//! ```text
//! offset 0   8 bytes   magic "SCARWTS1"
//! offset 8   u64 LE    header length H
//! offset 16  H bytes   UTF-8 JSON: {"tag", "step", "net": NetworkSpec,
//!                      "tensors": [{"name", "shape"}, ...]}
//! then                 each tensor's values as f32 LE, in header order
//! ```
//!
//! Tensor names are dotted paths: `enc{i}.conv{j}.weight`, `enc{i}.bn{j}.gamma`,
//! `down{i}.conv.bias`, `mid.conv{j}.weight`, `up{i}.convt.weight`,
//! `dec{i}.bn{j}.running_var`, `head.conv.weight`, `aux.conv.weight`,
//! `block{i}.conv.weight`, `score.linear.weight`. Running BN statistics are
//! included; trainable parameter counts exclude them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Layer, LeakyRelu, Linear, Mode, ParamStore, Relu, Sequential,
    Sigmoid, Softmax,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FILTER_CAP: usize = 8;
pub const INIT_STD: f64 = 0.02;
/// Number of strided blocks in the discriminator.
pub const DISC_BLOCKS: usize = 4;
/// Side length of the slices the paper's networks consume.
pub const DEFAULT_SIZE: usize = 192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Generator,
    Discriminator,
    Segnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputNonlinearity {
    Softmax,
    Sigmoid,
    Linear,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub kind: NetKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Extra sigmoid head (segnet scar map); 0 disables it.
    pub aux_channels: usize,
    pub initial_filters: usize,
    pub depth: usize,
    pub convs_per_block: usize,
    pub dropout_p: f64,
    pub output_nonlinearity: OutputNonlinearity,
    pub norm: Norm,
    pub activation: Activation,
    /// Square input side; fixes the discriminator's dense head size.
    pub input_size: usize,
    /// Adds the inverse of the output nonlinearity applied to the clamped
    /// input (`logit` for sigmoid, `ln` for softmax) to the head
    /// pre-activation, so the network starts near the identity map.
    pub input_residual: bool,
}

/// pix2pix-style U-Net: 64 filters, four stages, dropout 0.25 after every nonlinearity.
pub fn build_generator(in_channels: usize, out_channels: usize, output_nonlinearity: OutputNonlinearity) -> NetworkSpec {
    NetworkSpec {
        kind: NetKind::Generator,
        in_channels,
        out_channels,
        aux_channels: 0,
        initial_filters: 64,
        depth: 4,
        convs_per_block: 1,
        dropout_p: 0.25,
        output_nonlinearity,
        norm: Norm::Batch,
        activation: Activation::Relu,
        input_size: DEFAULT_SIZE,
        input_residual: false,
    }
}

/// Four strided conv/BN/LeakyReLU(0.2) blocks and a dense scalar head with no output nonlinearity.
pub fn build_discriminator(in_channels: usize) -> NetworkSpec {
    NetworkSpec {
        kind: NetKind::Discriminator,
        in_channels,
        out_channels: 1,
        aux_channels: 0,
        initial_filters: 64,
        depth: DISC_BLOCKS,
        convs_per_block: 0,
        dropout_p: 0.0,
        output_nonlinearity: OutputNonlinearity::None,
        norm: Norm::Batch,
        activation: Activation::LeakyRelu(0.2),
        input_size: DEFAULT_SIZE,
        input_residual: false,
    }
}

/// Segmentation U-Net: 96 filters, four stages, three convolutions per block,
/// softmax over {background, RV endo, LV endo, LV epi} plus a sigmoid scar head.
pub fn build_segnet() -> NetworkSpec {
    NetworkSpec {
        kind: NetKind::Segnet,
        in_channels: 1,
        out_channels: 4,
        aux_channels: 1,
        initial_filters: 96,
        depth: 4,
        convs_per_block: 3,
        dropout_p: 0.0,
        output_nonlinearity: OutputNonlinearity::Softmax,
        norm: Norm::Batch,
        activation: Activation::Relu,
        input_size: DEFAULT_SIZE,
        input_residual: false,
    }
}

impl NetworkSpec {
    /// Same topology at a reduced width, depth and resolution.
    pub fn scaled(&self, initial_filters: usize, depth: usize, input_size: usize) -> Self {
        Self { initial_filters, depth, input_size, ..self.clone() }
    }

    pub fn stage_filters(&self, stage: usize) -> usize {
        self.initial_filters * (1usize << stage).min(FILTER_CAP)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be at least 1".into());
        }
        if self.initial_filters == 0 || self.depth == 0 {
            return bad("initial_filters and depth must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        let factor = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % factor != 0 {
            return bad(format!("input size {} not divisible by 2^{}", self.input_size, self.depth));
        }
        match self.kind {
            NetKind::Discriminator => {
                if self.output_nonlinearity != OutputNonlinearity::None || self.out_channels != 1 {
                    return bad("discriminator must emit one raw score".into());
                }
            }
            NetKind::Generator | NetKind::Segnet => {
                if self.convs_per_block == 0 {
                    return bad("U-Net blocks need at least one convolution".into());
                }
                if self.input_residual
                    && (!matches!(self.output_nonlinearity, OutputNonlinearity::Sigmoid | OutputNonlinearity::Softmax)
                        || self.in_channels != self.out_channels)
                {
                    return bad("input residual needs a sigmoid or softmax head with matching channels".into());
                }
            }
        }
        Ok(())
    }

    /// Output shape for a `[n, in_channels, side, side]` input.
    pub fn output_shape(&self, n: usize, side: usize) -> [usize; 4] {
        match self.kind {
            NetKind::Discriminator => [n, 1, 1, 1],
            _ => [n, self.out_channels, side, side],
        }
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != self.in_channels {
            return Err(Error::Topology(format!("expected {} input channels, got {c}", self.in_channels)));
        }
        if h != w {
            return Err(Error::Topology(format!("non-square input {h}x{w}")));
        }
        match self.kind {
            NetKind::Discriminator if h != self.input_size => {
                Err(Error::Topology(format!("discriminator built for {0}x{0}, got {h}x{w}", self.input_size)))
            }
            _ if h % (1 << self.depth) != 0 => {
                Err(Error::Topology(format!("side {h} not divisible by 2^{}", self.depth)))
            }
            _ => Ok(()),
        }
    }
}

fn activation_layer<T: Scalar>(a: Activation) -> Layer<T> {
    match a {
        Activation::Relu => Layer::Relu(Relu::default()),
        Activation::LeakyRelu(s) => Layer::LeakyRelu(LeakyRelu::new(s)),
    }
}

struct Builder<'a, T> {
    spec: &'a NetworkSpec,
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    dropout_seed: u64,
}

impl<'a, T: Scalar> Builder<'a, T> {
    fn finish_block(&mut self, seq: &mut Sequential<T>, name: &str, c: usize) {
        seq.push(Layer::BatchNorm(BatchNorm2d::new(&mut self.store, name, c)));
        seq.push(activation_layer(self.spec.activation));
        if self.spec.dropout_p > 0.0 {
            self.dropout_seed += 1;
            seq.push(Layer::Dropout(Dropout::new(self.spec.dropout_p, self.dropout_seed)));
        }
    }

    fn conv_stack(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Sequential<T> {
        let mut seq = Sequential::new();
        let mut c = c_in;
        for j in 0..self.spec.convs_per_block {
            let conv = Conv2d::new(&mut self.store, &format!("{prefix}.conv{j}"), c, c_out, 3, 1, 1, INIT_STD, &mut self.rng);
            seq.push(Layer::Conv(conv));
            self.finish_block(&mut seq, &format!("{prefix}.bn{j}"), c_out);
            c = c_out;
        }
        seq
    }

    fn down(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Sequential<T> {
        let mut seq = Sequential::new();
        let conv = Conv2d::new(&mut self.store, &format!("{prefix}.conv"), c_in, c_out, 4, 2, 1, INIT_STD, &mut self.rng);
        seq.push(Layer::Conv(conv));
        self.finish_block(&mut seq, &format!("{prefix}.bn"), c_out);
        seq
    }

    fn up(&mut self, prefix: &str, c_in: usize, c_out: usize) -> Sequential<T> {
        let mut seq = Sequential::new();
        let conv =
            ConvTranspose2d::new(&mut self.store, &format!("{prefix}.convt"), c_in, c_out, 4, 2, 1, INIT_STD, &mut self.rng);
        seq.push(Layer::ConvTranspose(conv));
        self.finish_block(&mut seq, &format!("{prefix}.bn"), c_out);
        seq
    }
}

#[derive(Clone, Debug)]
struct UNet<T> {
    enc: Vec<Sequential<T>>,
    down: Vec<Sequential<T>>,
    mid: Sequential<T>,
    up: Vec<Sequential<T>>,
    dec: Vec<Sequential<T>>,
    head: Conv2d<T>,
    head_act: Option<Layer<T>>,
    aux: Option<(Conv2d<T>, Sigmoid<T>)>,
    skip_channels: Vec<usize>,
    residual_input: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct Disc<T> {
    blocks: Sequential<T>,
    score: Linear<T>,
    feature_shape: [usize; 4],
}

#[derive(Clone, Debug)]
enum Body<T> {
    UNet(Box<UNet<T>>),
    Disc(Disc<T>),
}

/// Head outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct NetOutput<T> {
    /// Generator/segnet main head `[N, C, H, W]`, or discriminator scores `[N, 1, 1, 1]`.
    pub main: Tensor<T>,
    pub aux: Option<Tensor<T>>,
}

/// Instantiated network with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    store: ParamStore<T>,
    body: Body<T>,
}

const RESIDUAL_CLAMP: f64 = 1e-4;
/// Softmax residual floor: a one-hot input starts at a logit gap of ln(0.95 / 0.05).
const SOFTMAX_RESIDUAL_FLOOR: f64 = 0.05;

impl<T: Scalar> Network<T> {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            spec,
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout_seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        };
        let body = match spec.kind {
            NetKind::Discriminator => {
                let mut blocks = Sequential::new();
                let mut c = spec.in_channels;
                let mut side = spec.input_size;
                for i in 0..spec.depth {
                    let f = spec.stage_filters(i);
                    blocks.push(Layer::Conv(Conv2d::new(
                        &mut b.store,
                        &format!("block{i}.conv"),
                        c,
                        f,
                        4,
                        2,
                        1,
                        INIT_STD,
                        &mut b.rng,
                    )));
                    b.finish_block(&mut blocks, &format!("block{i}.bn"), f);
                    c = f;
                    side /= 2;
                }
                let score = Linear::new(&mut b.store, "score.linear", c * side * side, 1, INIT_STD, &mut b.rng);
                Body::Disc(Disc { blocks, score, feature_shape: [0, c, side, side] })
            }
            NetKind::Generator | NetKind::Segnet => {
                let mut enc = Vec::new();
                let mut down = Vec::new();
                let mut skip_channels = Vec::new();
                let mut c = spec.in_channels;
                for i in 0..spec.depth {
                    let f = spec.stage_filters(i);
                    enc.push(b.conv_stack(&format!("enc{i}"), c, f));
                    skip_channels.push(f);
                    down.push(b.down(&format!("down{i}"), f, f));
                    c = f;
                }
                let mid_f = spec.stage_filters(spec.depth);
                let mid = b.conv_stack("mid", c, mid_f);
                c = mid_f;
                let mut up = Vec::new();
                let mut dec = Vec::new();
                for i in (0..spec.depth).rev() {
                    let f = spec.stage_filters(i);
                    up.push(b.up(&format!("up{i}"), c, f));
                    dec.push(b.conv_stack(&format!("dec{i}"), 2 * f, f));
                    c = f;
                }
                let head = Conv2d::new(&mut b.store, "head.conv", c, spec.out_channels, 1, 1, 0, INIT_STD, &mut b.rng);
                let head_act = match spec.output_nonlinearity {
                    OutputNonlinearity::Softmax => Some(Layer::Softmax(Softmax::default())),
                    OutputNonlinearity::Sigmoid => Some(Layer::Sigmoid(Sigmoid::default())),
                    OutputNonlinearity::Linear | OutputNonlinearity::None => None,
                };
                let aux = (spec.aux_channels > 0).then(|| {
                    let conv = Conv2d::new(&mut b.store, "aux.conv", c, spec.aux_channels, 1, 1, 0, INIT_STD, &mut b.rng);
                    (conv, Sigmoid::default())
                });
                Body::UNet(Box::new(UNet {
                    enc,
                    down,
                    mid,
                    up,
                    dec,
                    head,
                    head_act,
                    aux,
                    skip_channels,
                    residual_input: None,
                }))
            }
        };
        Ok(Self { spec: spec.clone(), store: b.store, body })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn zero_grad(&mut self) {
        self.store.zero_grad();
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> NetOutput<T> {
        if let Err(e) = self.spec.check_input(x.shape()) {
            panic!("{e}");
        }
        let store = &mut self.store;
        match &mut self.body {
            Body::Disc(d) => {
                let feat = d.blocks.forward(store, x, mode);
                let main = d.score.forward(store, &feat, mode);
                NetOutput { main, aux: None }
            }
            Body::UNet(u) => {
                let mut skips = Vec::with_capacity(u.enc.len());
                let mut cur = x.clone();
                for (enc, down) in u.enc.iter_mut().zip(&mut u.down) {
                    let s = enc.forward(store, &cur, mode);
                    cur = down.forward(store, &s, mode);
                    skips.push(s);
                }
                cur = u.mid.forward(store, &cur, mode);
                for (up, dec) in u.up.iter_mut().zip(&mut u.dec) {
                    let upsampled = up.forward(store, &cur, mode);
                    let skip = skips.pop().expect("one skip per stage");
                    cur = dec.forward(store, &Tensor::concat_channels(&upsampled, &skip), mode);
                }
                let mut pre = u.head.forward(store, &cur, mode);
                if self.spec.input_residual {
                    if self.spec.output_nonlinearity == OutputNonlinearity::Softmax {
                        let lo = T::of(SOFTMAX_RESIDUAL_FLOOR);
                        for (p, &v) in pre.data_mut().iter_mut().zip(x.data()) {
                            *p += v.max(lo).ln();
                        }
                    } else {
                        let lo = T::of(RESIDUAL_CLAMP);
                        let hi = T::one() - lo;
                        for (p, &v) in pre.data_mut().iter_mut().zip(x.data()) {
                            let v = v.max(lo).min(hi);
                            *p += (v / (T::one() - v)).ln();
                        }
                    }
                    u.residual_input = mode.record.then(|| x.clone());
                }
                let main = match &mut u.head_act {
                    Some(act) => act.forward(store, &pre, mode),
                    None => pre,
                };
                let aux = u.aux.as_mut().map(|(conv, sig)| {
                    let a = conv.forward(store, &cur, mode);
                    sig.forward(&a, mode)
                });
                NetOutput { main, aux }
            }
        }
    }

    /// Backpropagates head gradients, accumulating parameter gradients, and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_main: &Tensor<T>, grad_aux: Option<&Tensor<T>>) -> Tensor<T> {
        let store = &mut self.store;
        match &mut self.body {
            Body::Disc(d) => {
                let g = d.score.backward(store, grad_main);
                let [n, ..] = g.shape();
                let [_, c, h, w] = d.feature_shape;
                let g = g.reshape([n, c, h, w]);
                d.blocks.backward(store, &g)
            }
            Body::UNet(u) => {
                let g_pre = match &mut u.head_act {
                    Some(act) => act.backward(store, grad_main),
                    None => grad_main.clone(),
                };
                let mut g = u.head.backward(store, &g_pre);
                if let Some((conv, sig)) = u.aux.as_mut() {
                    let zeros;
                    let ga_out = match grad_aux {
                        Some(ga) => ga,
                        None => {
                            let [n, _, h, w] = grad_main.shape();
                            zeros = Tensor::zeros([n, self.spec.aux_channels, h, w]);
                            &zeros
                        }
                    };
                    let ga = sig.backward(ga_out);
                    g.add_assign(&conv.backward(store, &ga));
                }
                let mut skip_grads = Vec::with_capacity(u.dec.len());
                // up/dec are stored deepest-first; walk them back from the shallowest.
                for (stage, (up, dec)) in u.up.iter_mut().zip(&mut u.dec).rev().enumerate() {
                    let gcat = dec.backward(store, &g);
                    let (g_up, g_skip) = gcat.split_channels(gcat.channels() - u.skip_channels[stage]);
                    skip_grads.push(g_skip);
                    g = up.backward(store, &g_up);
                }
                g = u.mid.backward(store, &g);
                for (enc, down) in u.enc.iter_mut().zip(&mut u.down).rev() {
                    let mut gs = down.backward(store, &g);
                    gs.add_assign(&skip_grads.pop().expect("one skip gradient per stage"));
                    g = enc.backward(store, &gs);
                }
                if let Some(x) = u.residual_input.take() {
                    let pairs = g.data_mut().iter_mut().zip(g_pre.data()).zip(x.data());
                    if self.spec.output_nonlinearity == OutputNonlinearity::Softmax {
                        let lo = T::of(SOFTMAX_RESIDUAL_FLOOR);
                        for ((d, &gp), &v) in pairs {
                            if v > lo {
                                *d += gp / v;
                            }
                        }
                    } else {
                        let lo = T::of(RESIDUAL_CLAMP);
                        let hi = T::one() - lo;
                        for ((d, &gp), &v) in pairs {
                            if v > lo && v < hi {
                                *d += gp / (v * (T::one() - v));
                            }
                        }
                    }
                }
                g
            }
        }
    }

    pub fn snapshot(&self, step: u64, tag: &str) -> WeightSnapshot {
        WeightSnapshot {
            net: self.spec.clone(),
            step,
            tag: tag.to_string(),
            tensors: self
                .store
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.value.iter().map(|v| v.f64() as f32).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a network from a snapshot; `seed` only affects dropout masks.
    pub fn from_snapshot(snapshot: &WeightSnapshot, seed: u64) -> Result<Self> {
        let mut net = Self::new(&snapshot.net, seed)?;
        net.load(snapshot)?;
        Ok(net)
    }

    pub fn load(&mut self, snapshot: &WeightSnapshot) -> Result<()> {
        if snapshot.net != self.spec {
            return Err(Error::Topology(format!("snapshot '{}' was taken from a different network spec", snapshot.tag)));
        }
        if snapshot.tensors.len() != self.store.len() {
            return Err(Error::Topology(format!(
                "snapshot '{}' has {} tensors, network has {}",
                snapshot.tag,
                snapshot.tensors.len(),
                self.store.len()
            )));
        }
        for (p, t) in self.store.iter_mut().zip(&snapshot.tensors) {
            if p.name != t.name || p.shape != t.shape {
                return Err(Error::Topology(format!(
                    "snapshot tensor {} {:?} does not match {} {:?}",
                    t.name, t.shape, p.name, p.shape
                )));
            }
            p.value = t.data.iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

/// Serialized parameter set tagged with its training step.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSnapshot {
    pub net: NetworkSpec,
    pub step: u64,
    pub tag: String,
    pub tensors: Vec<NamedTensor>,
}

const MAGIC: &[u8; 8] = b"SCARWTS1";

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    tag: String,
    step: u64,
    net: NetworkSpec,
    tensors: Vec<NamedTensor>,
}

impl WeightSnapshot {
    pub fn file_name(&self) -> String {
        format!("{}_step{:05}.wts", self.tag, self.step)
    }

    /// Stable identifier used in manifests and provenance records.
    pub fn id(&self) -> String {
        format!("{}_step{:05}", self.tag, self.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SnapshotHeader {
            tag: self.tag.clone(),
            step: self.step,
            net: self.net.clone(),
            tensors: self.tensors.clone(),
        };
        let json = serde_json::to_vec(&header).expect("snapshot header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::parse(path, 0, "missing SCARWTS1 magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len());
        let Some(end) = end else {
            return Err(Error::parse(path, 8, format!("header length {len} exceeds file size")));
        };
        let header: SnapshotHeader = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| Error::parse(path, 16 + e.column(), format!("bad header: {e}")))?;
        let mut offset = end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for mut t in header.tensors {
            let n: usize = t.shape.iter().product();
            if offset + 4 * n > bytes.len() {
                return Err(Error::parse(path, offset, format!("truncated data for tensor {}", t.name)));
            }
            t.data = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            tensors.push(t);
        }
        if offset != bytes.len() {
            return Err(Error::parse(path, offset, "trailing bytes after last tensor"));
        }
        Ok(Self { net: header.net, step: header.step, tag: header.tag, tensors })
    }

    /// Writes `<dir>/<tag>_step<NNNNN>.wts` and returns the path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(self.file_name());
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Loads every `.wts` file in `dir`, ordered by (tag, step).
pub fn load_snapshots(dir: &Path) -> Result<Vec<WeightSnapshot>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "wts") {
            out.push(WeightSnapshot::load(&path)?);
        }
    }
    out.sort_by(|a, b| (&a.tag, a.step).cmp(&(&b.tag, b.step)));
    Ok(out)
}
