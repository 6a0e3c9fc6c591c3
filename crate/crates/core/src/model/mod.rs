//! The per-slice segmenter: convolutional encoder, k-means cross-attention
//! decoder and mask/class heads, plus the parameter store they share with the
//! memory and click-initialization modules.

mod attention;
mod decoder;
mod encoder;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use attention::{
    kmeans_assign, kmeans_cross_attention, kmeans_cross_attention_fused, standard_cross_attention,
};
pub use decoder::{decode, decode_graph, DecodeVars, DecoderOutput, LayerOutput, LayerVars};
pub use encoder::{encode_graph, encode_slice, positional_encoding, EncodeVars, EncodedSlice};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding dimension D.
    pub dim: usize,
    pub n_decoder_layers: usize,
    /// Total encoder downsampling; 2 or 4.
    pub stride: usize,
    pub n_classes: usize,
    pub per_class_centers: usize,
    pub ffn_hidden: usize,
    /// Channels of the first two encoder blocks.
    pub enc_channels: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_decoder_layers: 4,
            stride: 4,
            n_classes: 4,
            per_class_centers: crate::volume::DEFAULT_PER_CLASS_CENTERS,
            ffn_hidden: 64,
            enc_channels: [16, 32],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 || self.dim % 4 != 0 {
            return Err(Error::Config(format!("dim must be a multiple of 4 and >= 8, got {}", self.dim)));
        }
        if self.n_decoder_layers == 0 {
            return Err(Error::Config("need at least one decoder layer".into()));
        }
        if self.per_class_centers == 0 || self.n_classes == 0 {
            return Err(Error::Config("need at least one class and one center per class".into()));
        }
        if self.stride != 2 && self.stride != 4 {
            return Err(Error::Config(format!("encoder stride must be 2 or 4, got {}", self.stride)));
        }
        if self.ffn_hidden == 0 || self.enc_channels.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }

    /// Total number of learned centers N.
    pub fn n_centers(&self) -> usize {
        self.per_class_centers * self.n_classes
    }

    /// Downsampling of the per-pixel embedding used for mask dot products.
    pub fn mask_stride(&self) -> usize {
        2
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.dim;
        let h = self.ffn_hidden;
        let [c1, c2] = self.enc_channels;
        let k1 = self.n_classes + 1;
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));
        let fan = |n: usize| Init::FanIn(n);

        push("enc.conv1.w".into(), vec![c1, 9], fan(9));
        push("enc.conv1.b".into(), vec![c1], Init::Zeros);
        push("enc.conv2.w".into(), vec![c2, c1 * 9], fan(c1 * 9));
        push("enc.conv2.b".into(), vec![c2], Init::Zeros);
        push("enc.conv3.w".into(), vec![d, c2 * 9], fan(c2 * 9));
        push("enc.conv3.b".into(), vec![d], Init::Zeros);
        push("enc.conv4.w".into(), vec![d, d * 9], fan(d * 9));
        push("enc.conv4.b".into(), vec![d], Init::Zeros);
        push("enc.lateral.w".into(), vec![d, c2], fan(c2));
        push("enc.lateral.b".into(), vec![d], Init::Zeros);
        push("enc.top.w".into(), vec![d, d], fan(d));
        push("enc.top.b".into(), vec![d], Init::Zeros);
        push("enc.pixel.w".into(), vec![d, d], fan(d));
        push("enc.pixel.b".into(), vec![d], Init::Zeros);

        push("query.embed".into(), vec![self.n_centers(), d], Init::Uniform(1.0));

        for l in 0..self.n_decoder_layers {
            let p = format!("dec.{l}");
            for proj in ["q", "k", "v"] {
                push(format!("{p}.{proj}.w"), vec![d, d], fan(d));
                push(format!("{p}.{proj}.b"), vec![d], Init::Zeros);
            }
            push_attention(&mut push, &format!("{p}.sa"), d);
            push_ffn(&mut push, &format!("{p}.ffn"), d, h);
            for norm in ["norm1", "norm2", "norm3"] {
                push(format!("{p}.{norm}.g"), vec![d], Init::Ones);
                push(format!("{p}.{norm}.b"), vec![d], Init::Zeros);
            }
        }

        push("head.norm.g".into(), vec![d], Init::Ones);
        push("head.norm.b".into(), vec![d], Init::Zeros);
        push("head.cls.w".into(), vec![d, k1], fan(d));
        push("head.cls.b".into(), vec![k1], Init::Zeros);
        push_ffn(&mut push, "head.mask", d, d);

        push_attention(&mut push, "mem.sa", d);
        push_ffn(&mut push, "mem.ffn", d, h);
        push_attention(&mut push, "mem.ca", d);

        push_ffn(&mut push, "click.ffn", d, 2 * d);
        specs
    }
}

fn push_attention(push: &mut impl FnMut(String, Vec<usize>, Init), prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        push(format!("{prefix}.{proj}.w"), vec![d, d], Init::FanIn(d));
        push(format!("{prefix}.{proj}.b"), vec![d], Init::Zeros);
    }
}

fn push_ffn(push: &mut impl FnMut(String, Vec<usize>, Init), prefix: &str, d: usize, h: usize) {
    push(format!("{prefix}.w1"), vec![d, h], Init::FanIn(d));
    push(format!("{prefix}.b1"), vec![h], Init::Zeros);
    push(format!("{prefix}.w2"), vec![h, d], Init::FanIn(h));
    push(format!("{prefix}.b2"), vec![d], Init::Zeros);
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Uniform(f64),
}

/// Named parameter tensors plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    /// Fixed-seed initialization.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in config.param_specs() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            };
            tensors.insert(name, Tensor::new(shape, data));
        }
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Lazily binds parameters into a [`Graph`], as trainable leaves or constants.
pub struct Bound<'p> {
    params: &'p Params,
    trainable: bool,
    vars: HashMap<&'p str, Var>,
}

impl<'p> Bound<'p> {
    pub fn new(params: &'p Params, trainable: bool) -> Self {
        Self { params, trainable, vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn config(&self) -> &'p ModelConfig {
        &self.params.config
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let (key, t) = self
            .params
            .tensors
            .get_key_value(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = if self.trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        self.vars.insert(key.as_str(), v);
        v
    }

    /// `x · W + b` with parameters `{prefix}.w`, `{prefix}.b`.
    pub fn linear(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let w = self.var(g, &format!("{prefix}.w"));
        let b = self.var(g, &format!("{prefix}.b"));
        g.linear(x, w, b)
    }

    /// `W2 relu(W1 x + b1) + b2`.
    pub fn ffn(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let w1 = self.var(g, &format!("{prefix}.w1"));
        let b1 = self.var(g, &format!("{prefix}.b1"));
        let w2 = self.var(g, &format!("{prefix}.w2"));
        let b2 = self.var(g, &format!("{prefix}.b2"));
        let h = g.linear(x, w1, b1);
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }

    pub fn layer_norm(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let gain = self.var(g, &format!("{prefix}.g"));
        let bias = self.var(g, &format!("{prefix}.b"));
        g.layer_norm(x, gain, bias)
    }

    /// Single-head scaled dot-product attention of `queries` over `keys`, with output projection.
    pub fn attention(&mut self, g: &mut Graph, queries: Var, keys: Var, prefix: &str) -> Var {
        let d = self.config().dim as f64;
        let q = self.linear(g, queries, &format!("{prefix}.q"));
        let k = self.linear(g, keys, &format!("{prefix}.k"));
        let v = self.linear(g, keys, &format!("{prefix}.v"));
        let logits = g.matmul(q, false, k, true);
        let logits = g.scale(logits, 1.0 / d.sqrt());
        let att = g.softmax_rows(logits);
        let ctx = g.matmul(att, false, v, false);
        self.linear(g, ctx, &format!("{prefix}.o"))
    }

    /// Parameter gradients keyed by name, for every bound parameter that received one.
    pub fn collect_grads(&self, grads: &mut Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, v)| grads.take(*v).map(|t| (name.to_string(), t)))
            .collect()
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CPSEGCK1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub iteration: u64,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Writes `magic | u64 header length | JSON header | f64 LE tensor data in header order`.
pub fn save_checkpoint(path: &Path, params: &Params, iteration: u64, seed: u64) -> Result<()> {
    let header = CheckpointHeader {
        config: params.config.clone(),
        iteration,
        seed,
        tensors: params.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + params.count() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in params.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Loads a checkpoint, failing on any parameter name or shape mismatch with its config.
pub fn load_checkpoint(path: &Path) -> Result<(Params, CheckpointHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    header.config.validate()?;

    let expected: Vec<TensorEntry> = {
        let mut specs: Vec<TensorEntry> = header
            .config
            .param_specs()
            .into_iter()
            .map(|(name, shape, _)| TensorEntry { name, shape })
            .collect();
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        specs
    };
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, checkpoint has {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    let mut offset = 16 + hlen;
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want != got {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: expected {} {:?}, found {} {:?}",
                want.name, want.shape, got.name, got.shape
            )));
        }
        let n: usize = got.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", got.name)))?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.insert(got.name.clone(), Tensor::new(got.shape.clone(), data));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((Params { config: header.config.clone(), tensors }, header))
}
