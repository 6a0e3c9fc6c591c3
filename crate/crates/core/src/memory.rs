//! Constant-size recurrent memory per tracked center.
//!
//! `fuse`: tokens `[H; C]` pass through one residual self-attention layer, are
//! mean-pooled, then pass a residual feed-forward layer. `init_next`: the
//! decoded center attends to its memory (a single key) and adds the result.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, Params};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub fused: Vec<f64>,
    /// Number of centers fused so far.
    pub step: usize,
}

impl MemoryState {
    pub fn byte_size(&self) -> usize {
        self.fused.len() * std::mem::size_of::<f64>()
    }
}

/// Graph form of [`fuse_memory`]; `prev` and `center` are `[1, D]`.
pub fn fuse_graph(g: &mut Graph, b: &mut Bound, prev: Option<Var>, center: Var) -> Var {
    let tokens = match prev {
        Some(h) => g.concat_rows(&[h, center]),
        None => center,
    };
    let att = b.attention(g, tokens, tokens, "mem.sa");
    let x = g.add(tokens, att);
    let pooled = g.mean_rows(x);
    let ff = b.ffn(g, pooled, "mem.ffn");
    g.add(pooled, ff)
}

/// Graph form of [`init_next_center`]; `center` and `memory` are `[1, D]`.
pub fn init_next_graph(g: &mut Graph, b: &mut Bound, center: Var, memory: Var) -> Var {
    let att = b.attention(g, center, memory, "mem.ca");
    g.add(center, att)
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec())
}

fn check_dim(params: &Params, v: &[f64], what: &str) -> Result<()> {
    if v.len() != params.config.dim {
        return Err(Error::Shape(format!("{what} has length {}, expected {}", v.len(), params.config.dim)));
    }
    Ok(())
}

/// Folds a newly decoded center into the memory of its track.
pub fn fuse_memory(prev: Option<&MemoryState>, center: &[f64], params: &Params) -> Result<MemoryState> {
    check_dim(params, center, "center")?;
    if let Some(h) = prev {
        check_dim(params, &h.fused, "memory")?;
    }
    let mut g = Graph::new();
    let mut b = Bound::new(params, false);
    let h = prev.map(|h| g.constant(row(&h.fused)));
    let c = g.constant(row(center));
    let out = fuse_graph(&mut g, &mut b, h, c);
    Ok(MemoryState { fused: g.value(out).data.clone(), step: prev.map_or(0, |h| h.step) + 1 })
}

/// Initial value of a propagated center on the next slice; unchanged without memory.
pub fn init_next_center(center: &[f64], memory: Option<&MemoryState>, params: &Params) -> Result<Vec<f64>> {
    check_dim(params, center, "center")?;
    let Some(h) = memory else { return Ok(center.to_vec()) };
    check_dim(params, &h.fused, "memory")?;
    let mut g = Graph::new();
    let mut b = Bound::new(params, false);
    let c = g.constant(row(center));
    let m = g.constant(row(&h.fused));
    let out = init_next_graph(&mut g, &mut b, c, m);
    Ok(g.value(out).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> Params {
        Params::init(&ModelConfig { dim: 8, ..Default::default() }).unwrap()
    }

    #[test]
    fn identity_sublayers_pass_the_first_center_through() {
        let mut p = params();
        p.zero_prefix("mem.sa.o");
        p.zero_prefix("mem.ffn.w2");
        p.zero_prefix("mem.ffn.b2");
        let c: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let h = fuse_memory(None, &c, &p).unwrap();
        assert_eq!(h.fused, c);
        assert_eq!(h.step, 1);
        let c2 = vec![1.0; 8];
        let h2 = fuse_memory(Some(&h), &c2, &p).unwrap();
        for i in 0..8 {
            assert!((h2.fused[i] - 0.5 * (c[i] + 1.0)).abs() < 1e-12);
        }
        assert_eq!(h2.byte_size(), h.byte_size());
    }

    #[test]
    fn init_without_memory_or_values_is_residual_only() {
        let mut p = params();
        let c = vec![0.25; 8];
        assert_eq!(init_next_center(&c, None, &p).unwrap(), c);
        p.zero_prefix("mem.ca.v");
        let h = MemoryState { fused: vec![3.0; 8], step: 2 };
        assert_eq!(init_next_center(&c, Some(&h), &p).unwrap(), c);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(fuse_memory(None, &[1.0; 3], &params()).is_err());
    }
}
