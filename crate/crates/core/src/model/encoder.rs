//! Convolutional slice encoder producing stride-`s` key/value features and a
//! stride-2 per-pixel embedding for mask prediction.

use super::Bound;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::FeatureMap;

/// Graph handles for one encoded slice.
pub struct EncodeVars {
    /// Backbone features `[P, D]`, one row per feature cell.
    pub features: Var,
    /// `features + positional encoding`, `[P, D]`.
    pub key_source: Var,
    /// Per-pixel embedding `[D, P2]` at the mask stride.
    pub pixel: Var,
    pub feat_hw: (usize, usize),
    pub pixel_hw: (usize, usize),
}

fn down(n: usize, s: usize) -> usize {
    n.div_ceil(s)
}

/// Sinusoidal 2D encoding `[h*w, d]`: the first half of the channels encodes the
/// row, the second half the column.
pub fn positional_encoding(d: usize, h: usize, w: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            for (offset, pos) in [(0, y as f64), (half, x as f64)] {
                for j in 0..half {
                    let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / half as f64);
                    row[offset + j] = if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                }
            }
        }
    }
    Tensor::new(vec![h * w, d], data)
}

fn conv(g: &mut Graph, b: &mut Bound, x: Var, name: &str, stride: usize) -> Var {
    let w = b.var(g, &format!("{name}.w"));
    let bias = b.var(g, &format!("{name}.b"));
    let y = g.conv2d(x, w, bias, 3, stride, 1);
    g.relu(y)
}

/// 1x1 convolution of `x[cin, n]`.
fn pointwise(g: &mut Graph, b: &mut Bound, x: Var, name: &str) -> Var {
    let w = b.var(g, &format!("{name}.w"));
    let bias = b.var(g, &format!("{name}.b"));
    let y = g.matmul(w, false, x, false);
    g.add_col_bias(y, bias)
}

/// Encodes one preprocessed slice (intensities in `[0, 255]`).
pub fn encode_graph(g: &mut Graph, b: &mut Bound, slice: &[f32], h: usize, w: usize) -> EncodeVars {
    let cfg = b.config().clone();
    let d = cfg.dim;
    let x = g.constant(Tensor::new(vec![1, h, w], slice.iter().map(|&v| v as f64 / 255.0 - 0.5).collect()));
    let c1 = conv(g, b, x, "enc.conv1", 1);
    let c2 = conv(g, b, c1, "enc.conv2", 2);
    let c3 = conv(g, b, c2, "enc.conv3", cfg.stride / 2);
    let c4 = conv(g, b, c3, "enc.conv4", 1);

    let (h2, w2) = (down(h, 2), down(w, 2));
    let (hf, wf) = (down(h2, cfg.stride / 2), down(w2, cfg.stride / 2));
    let c2_channels = cfg.enc_channels[1];

    let feat = g.reshape(c4, &[d, hf * wf]);
    let features = g.transpose(feat);
    let pe = g.constant(positional_encoding(d, hf, wf));
    let key_source = g.add(features, pe);

    let lat_in = g.reshape(c2, &[c2_channels, h2 * w2]);
    let lateral = pointwise(g, b, lat_in, "enc.lateral");
    let mut top = pointwise(g, b, feat, "enc.top");
    if cfg.stride == 4 {
        let t = g.reshape(top, &[d, hf, wf]);
        let t = g.upsample2x(t, h2, w2);
        top = g.reshape(t, &[d, h2 * w2]);
    }
    let merged = g.add(lateral, top);
    let merged = g.relu(merged);
    let pixel = pointwise(g, b, merged, "enc.pixel");

    EncodeVars { features, key_source, pixel, feat_hw: (hf, wf), pixel_hw: (h2, w2) }
}

/// Backbone output of one slice, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSlice {
    /// `[D, h/s, w/s]`, the value source of the decoder.
    pub features: FeatureMap,
    /// `[D, h/2, w/2]`.
    pub pixel_embedding: FeatureMap,
}

impl EncodedSlice {
    /// Features plus the 2D positional encoding, the decoder's key source.
    pub fn key_source(&self) -> FeatureMap {
        let f = &self.features;
        let pe = positional_encoding(f.channels, f.height, f.width);
        let hw = f.height * f.width;
        let mut data = f.data.clone();
        for p in 0..hw {
            for c in 0..f.channels {
                data[c * hw + p] += pe.data[p * f.channels + c];
            }
        }
        FeatureMap { data, ..f.clone() }
    }

    /// Features as `[P, D]` rows.
    pub fn feature_rows(&self) -> Tensor {
        let f = &self.features;
        Tensor::new(vec![f.channels, f.height * f.width], f.data.clone()).transpose2()
    }

    pub fn pixel_tensor(&self) -> Tensor {
        let p = &self.pixel_embedding;
        Tensor::new(vec![p.channels, p.height * p.width], p.data.clone())
    }
}

/// Runs the encoder on one `h x w` slice without tracking gradients.
pub fn encode_slice(params: &super::Params, slice: &[f32], h: usize, w: usize) -> Result<EncodedSlice> {
    if slice.len() != h * w || h == 0 || w == 0 {
        return Err(Error::Shape(format!("slice has {} values, expected {h}x{w}", slice.len())));
    }
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("slice contains non-finite intensities".into()));
    }
    let cfg = &params.config;
    let mut g = Graph::new();
    let mut b = Bound::new(params, false);
    let enc = encode_graph(&mut g, &mut b, slice, h, w);
    let (hf, wf) = enc.feat_hw;
    let (hp, wp) = enc.pixel_hw;
    let features = g.value(enc.features).transpose2();
    Ok(EncodedSlice {
        features: FeatureMap::new(cfg.dim, hf, wf, cfg.stride, features.data)?,
        pixel_embedding: FeatureMap::new(cfg.dim, hp, wp, cfg.mask_stride(), g.value(enc.pixel).data.clone())?,
    })
}
