//! Cross-attention of cluster centers over pixel features, standard (softmax
//! over pixels) and k-means (hard argmax over centers).
//!
//! All functions take row-major `centers[N, D]`, `q[N, D]`, `k[P, D]`, `v[P, D]`.

use crate::autograd::{scatter_rows, softmax_in_place};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};
use crate::volume::AssignmentMatrix;

fn check_shapes(centers: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, d) = (centers.rows(), centers.cols());
    if n == 0 {
        return Err(Error::EmptyCenters);
    }
    if q.shape != centers.shape {
        return Err(Error::Shape(format!("queries {:?} do not match centers {:?}", q.shape, centers.shape)));
    }
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::Shape(format!("keys {:?} / values {:?} incompatible with D={d}", k.shape, v.shape)));
    }
    Ok((n, k.rows(), d))
}

/// `C + softmax_pixels(Q Kᵀ) V`.
pub fn standard_cross_attention(centers: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_shapes(centers, q, k, v)?;
    let mut logits = gemm(q, false, k, true);
    let p = logits.cols();
    for row in logits.data.chunks_mut(p) {
        softmax_in_place(row);
    }
    let mut out = gemm(&logits, false, v, false);
    out.add_assign(centers);
    Ok(out)
}

/// Winning center of each pixel column of `Q Kᵀ`; ties go to the lowest center index.
pub fn argmax_columns(logits: &Tensor) -> Vec<usize> {
    let (n, p) = (logits.rows(), logits.cols());
    let mut best = vec![0usize; p];
    let mut best_val: Vec<f64> = logits.row(0).to_vec();
    for c in 1..n {
        for (px, &val) in logits.row(c).iter().enumerate() {
            if val > best_val[px] {
                best_val[px] = val;
                best[px] = c;
            }
        }
    }
    best
}

/// The hard assignment `argmax_N(Q Kᵀ)` together with the affinity logits.
pub fn kmeans_assign(q: &Tensor, k: &Tensor) -> Result<(AssignmentMatrix, Tensor)> {
    if q.rows() == 0 {
        return Err(Error::EmptyCenters);
    }
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!("queries {:?} and keys {:?} differ in width", q.shape, k.shape)));
    }
    let logits = gemm(q, false, k, true);
    let winners = argmax_columns(&logits);
    Ok((AssignmentMatrix::from_winners(q.rows(), &winners), logits))
}

/// Two-step form: build the one-hot assignment `A`, then `C + A V`.
pub fn kmeans_cross_attention(centers: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, AssignmentMatrix)> {
    let (n, p, d) = check_shapes(centers, q, k, v)?;
    let (assignment, _) = kmeans_assign(q, k)?;
    let mut update = vec![0.0; n * d];
    for c in 0..n {
        let out = &mut update[c * d..(c + 1) * d];
        for px in 0..p {
            let a = assignment.get(c, px) as f64;
            for (o, &x) in out.iter_mut().zip(v.row(px)) {
                *o += a * x;
            }
        }
    }
    let data = centers.data.iter().zip(&update).map(|(c, u)| c + u).collect();
    Ok((Tensor::new(vec![n, d], data), assignment))
}

/// Single-pass form: each pixel's value is added straight into its winning center.
pub fn kmeans_cross_attention_fused(centers: &Tensor, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, _, d) = check_shapes(centers, q, k, v)?;
    let winners = argmax_columns(&gemm(q, false, k, true));
    let update = scatter_rows(&v.data, d, &winners, n);
    let data = centers.data.iter().zip(&update).map(|(c, u)| c + u).collect();
    Ok(Tensor::new(vec![n, d], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn hand_computed_kmeans_update() {
        // Pixel 0 prefers center 0, pixel 1 prefers center 1.
        let c = t(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let q = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let k = t(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let v = t(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let (out, a) = kmeans_cross_attention(&c, &q, &k, &v).unwrap();
        assert_eq!(out.data, vec![5.0, 6.0, 8.0, 9.0]);
        assert_eq!(a.data, vec![1, 0, 0, 1]);
    }

    #[test]
    fn ties_go_to_the_lowest_center() {
        let c = Tensor::zeros(&[3, 2]);
        let q = Tensor::zeros(&[3, 2]);
        let k = t(&[&[1.0, 1.0]]);
        let v = t(&[&[4.0, 4.0]]);
        let (out, a) = kmeans_cross_attention(&c, &q, &k, &v).unwrap();
        assert_eq!(a.data, vec![1, 0, 0]);
        assert_eq!(out.data, vec![4.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_queries_give_uniform_softmax_attention() {
        let c = Tensor::zeros(&[2, 2]);
        let q = Tensor::zeros(&[2, 2]);
        let k = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let v = t(&[&[2.0, 0.0], &[4.0, 2.0]]);
        let out = standard_cross_attention(&c, &q, &k, &v).unwrap();
        assert_eq!(out.data, vec![3.0, 1.0, 3.0, 1.0]);
    }

    #[test]
    fn empty_centers_and_bad_shapes_are_errors() {
        let e = Tensor::zeros(&[0, 2]);
        let k = Tensor::zeros(&[3, 2]);
        assert!(matches!(kmeans_cross_attention(&e, &e, &k, &k), Err(Error::EmptyCenters)));
        let c = Tensor::zeros(&[2, 2]);
        let k3 = Tensor::zeros(&[3, 3]);
        assert!(matches!(standard_cross_attention(&c, &c, &k3, &k3), Err(Error::Shape(_))));
    }
}
