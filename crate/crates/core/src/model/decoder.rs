//! Stack of k-means cross-attention decoder layers with shared class and mask
//! heads applied after every layer.

use super::{Bound, EncodedSlice, Params};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::AssignmentMatrix;

use super::attention::argmax_columns;

pub struct LayerVars {
    /// `[N, K+1]`, column 0 is no-object.
    pub class_logits: Var,
    /// `[N, P2]` at the mask stride.
    pub mask_logits: Var,
    /// Scaled `Q Kᵀ`, `[N, P]` at the feature stride.
    pub affinity: Var,
    /// Winning center per feature cell.
    pub winners: Vec<usize>,
}

pub struct DecodeVars {
    pub centers: Var,
    pub layers: Vec<LayerVars>,
}

/// Runs every decoder layer on `centers[N, D]`.
///
/// The hard assignment is a constant of the graph: gradients reach the
/// projections through the values and, via `affinity`, through any loss placed
/// on the logits.
pub fn decode_graph(
    g: &mut Graph,
    b: &mut Bound,
    key_source: Var,
    features: Var,
    pixel: Var,
    centers: Var,
) -> DecodeVars {
    let cfg = b.config().clone();
    let n = g.value(centers).rows();
    let inv_sqrt_d = 1.0 / (cfg.dim as f64).sqrt();
    let mut c = centers;
    let mut layers = Vec::with_capacity(cfg.n_decoder_layers);
    for l in 0..cfg.n_decoder_layers {
        let p = format!("dec.{l}");
        let q = b.linear(g, c, &format!("{p}.q"));
        let k = b.linear(g, key_source, &format!("{p}.k"));
        let v = b.linear(g, features, &format!("{p}.v"));
        let logits = g.matmul(q, false, k, true);
        let affinity = g.scale(logits, inv_sqrt_d);
        let winners = argmax_columns(g.value(affinity));
        let update = g.cluster_sum(v, &winners, n);
        let c1 = g.add(c, update);
        let c1 = b.layer_norm(g, c1, &format!("{p}.norm1"));
        let sa = b.attention(g, c1, c1, &format!("{p}.sa"));
        let c2 = g.add(c1, sa);
        let c2 = b.layer_norm(g, c2, &format!("{p}.norm2"));
        let ff = b.ffn(g, c2, &format!("{p}.ffn"));
        let c3 = g.add(c2, ff);
        c = b.layer_norm(g, c3, &format!("{p}.norm3"));

        let (class_logits, mask_logits) = heads(g, b, c, pixel);
        layers.push(LayerVars { class_logits, mask_logits, affinity, winners });
    }
    DecodeVars { centers: c, layers }
}

fn heads(g: &mut Graph, b: &mut Bound, centers: Var, pixel: Var) -> (Var, Var) {
    let h = b.layer_norm(g, centers, "head.norm");
    let class_logits = b.linear(g, h, "head.cls");
    let embed = b.ffn(g, h, "head.mask");
    let mask_logits = g.matmul(embed, false, pixel, false);
    (class_logits, mask_logits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub class_logits: Tensor,
    pub mask_logits: Tensor,
    pub assignment: AssignmentMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    /// Updated centers `[N, D]` after the last layer.
    pub centers: Tensor,
    pub layers: Vec<LayerOutput>,
    /// Height and width of the mask logits grid.
    pub mask_hw: (usize, usize),
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("decoder has at least one layer")
    }
}

/// Decodes `centers[N, D]` against an encoded slice without tracking gradients.
pub fn decode(params: &Params, enc: &EncodedSlice, centers: &Tensor) -> Result<DecoderOutput> {
    let d = params.config.dim;
    if centers.rows() == 0 {
        return Err(Error::EmptyCenters);
    }
    if centers.cols() != d || enc.features.channels != d {
        return Err(Error::Shape(format!(
            "centers {:?} / features with {} channels do not match D={d}",
            centers.shape, enc.features.channels
        )));
    }
    let key_rows = {
        let ks = enc.key_source();
        Tensor::new(vec![d, ks.height * ks.width], ks.data).transpose2()
    };
    let mut g = Graph::new();
    let mut b = Bound::new(params, false);
    let ks = g.constant(key_rows);
    let feats = g.constant(enc.feature_rows());
    let pixel = g.constant(enc.pixel_tensor());
    let c = g.constant(centers.clone());
    let out = decode_graph(&mut g, &mut b, ks, feats, pixel, c);
    let n = centers.rows();
    let mut layers = Vec::with_capacity(out.layers.len());
    for (i, l) in out.layers.iter().enumerate() {
        let class_logits = g.value(l.class_logits).clone();
        let mask_logits = g.value(l.mask_logits).clone();
        if !class_logits.all_finite() || !mask_logits.all_finite() || !g.value(l.affinity).all_finite() {
            return Err(Error::Numeric(format!("non-finite values in decoder layer {i}")));
        }
        layers.push(LayerOutput { class_logits, mask_logits, assignment: AssignmentMatrix::from_winners(n, &l.winners) });
    }
    Ok(DecoderOutput {
        centers: g.value(out.centers).clone(),
        layers,
        mask_hw: (enc.pixel_embedding.height, enc.pixel_embedding.width),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softmax_in_place;
    use crate::model::{encode_slice, ModelConfig};

    fn slice(h: usize, w: usize) -> Vec<f32> {
        (0..h * w).map(|i| ((i * 37) % 255) as f32).collect()
    }

    #[test]
    fn zero_heads_give_zero_masks_and_uniform_classes() {
        let cfg = ModelConfig { n_decoder_layers: 1, ..Default::default() };
        let mut params = Params::init(&cfg).unwrap();
        params.zero_prefix("head.cls");
        params.zero_prefix("head.mask");
        let enc = encode_slice(&params, &slice(16, 16), 16, 16).unwrap();
        let out = decode(&params, &enc, params.get("query.embed")).unwrap();
        let last = out.last();
        assert_eq!(last.mask_logits.shape, vec![80, 64]);
        assert!(last.mask_logits.data.iter().all(|&v| v == 0.0));
        let mut row = last.class_logits.row(0).to_vec();
        softmax_in_place(&mut row);
        assert!(row.iter().all(|&p| (p - 0.2).abs() < 1e-12));
    }

    #[test]
    fn every_layer_assignment_is_one_hot() {
        let params = Params::init(&ModelConfig::default()).unwrap();
        let enc = encode_slice(&params, &slice(24, 20), 24, 20).unwrap();
        let out = decode(&params, &enc, params.get("query.embed")).unwrap();
        assert_eq!(out.layers.len(), 4);
        for layer in &out.layers {
            assert!(layer.assignment.is_one_hot());
            assert_eq!(layer.assignment.pixels, 6 * 5);
        }
    }

    #[test]
    fn center_permutation_permutes_outputs() {
        let params = Params::init(&ModelConfig::default()).unwrap();
        let enc = encode_slice(&params, &slice(16, 16), 16, 16).unwrap();
        let centers = params.get("query.embed");
        let perm: Vec<usize> = (0..centers.rows()).rev().collect();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| centers.row(i).to_vec()).collect();
        let a = decode(&params, &enc, centers).unwrap();
        let b = decode(&params, &enc, &Tensor::from_rows(&rows)).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in b.last().class_logits.row(new).iter().zip(a.last().class_logits.row(old)) {
                assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in b.last().mask_logits.row(new).iter().zip(a.last().mask_logits.row(old)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_centers_fail() {
        let params = Params::init(&ModelConfig::default()).unwrap();
        let enc = encode_slice(&params, &slice(8, 8), 8, 8).unwrap();
        assert!(matches!(decode(&params, &enc, &Tensor::zeros(&[0, 32])), Err(Error::EmptyCenters)));
    }

    #[test]
    fn non_finite_weights_name_the_layer() {
        let params = Params::init(&ModelConfig { n_decoder_layers: 2, ..Default::default() }).unwrap();
        let mut bad = params.clone();
        bad.get_mut("dec.1.ffn.b2").data[0] = f64::NAN;
        let enc = encode_slice(&params, &slice(8, 8), 8, 8).unwrap();
        match decode(&bad, &enc, params.get("query.embed")) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer 1"), "{msg}"),
            other => panic!("expected a numeric error, got {:?}", other.map(|_| ())),
        }
    }
}
