//! Edge-list primitives for message passing.
//!
//! Edges are grouped by the node that receives them: node `i` owns edges
//! `offsets[i]..offsets[i + 1]`. Reductions walk each segment in edge order,
//! so results never depend on anything but the order of the edge list.

use std::rc::Rc;

use super::{expect_rank, Tensor, Var};
use crate::error::{Error, Result};

fn check_offsets(op: &'static str, rows: usize, offsets: &[usize]) -> Result<()> {
    let ok = !offsets.is_empty()
        && offsets[0] == 0
        && *offsets.last().unwrap() == rows
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if !ok {
        return Err(Error::Dimension {
            op,
            lhs: vec![rows],
            rhs: vec![offsets.len(), offsets.last().copied().unwrap_or(0)],
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// `out[e] = self[indices[e]]` for a rank-2 tensor.
    pub fn gather_rows(self, indices: Rc<[usize]>) -> Result<Var<'t>> {
        let (value, rows, cols) = {
            let x = self.value();
            expect_rank("gather_rows", &x, 2)?;
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    lhs: x.shape().to_vec(),
                    rhs: vec![bad],
                });
            }
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &i in indices.iter() {
                out.extend_from_slice(x.row(i));
            }
            (Tensor::new(&[indices.len(), cols], out)?, rows, cols)
        };
        Ok(self.tape.push_op("gather_rows", value, &[self], move |g| {
            let mut dx = vec![0.0; rows * cols];
            for (e, &i) in indices.iter().enumerate() {
                for (d, v) in dx[i * cols..(i + 1) * cols].iter_mut().zip(g.row(e)) {
                    *d += v;
                }
            }
            vec![Some(Tensor::new(&[rows, cols], dx).unwrap())]
        }))
    }

    /// Per-segment sum of edge rows; empty segments give zero rows.
    pub fn segment_sum(self, offsets: Rc<[usize]>) -> Result<Var<'t>> {
        let ones: Rc<[f64]> = vec![1.0; offsets.len().saturating_sub(1)].into();
        self.segment_weighted_sum("segment_sum", offsets, ones)
    }

    /// Per-segment mean of edge rows; empty segments give zero rows.
    pub fn segment_mean(self, offsets: Rc<[usize]>) -> Result<Var<'t>> {
        let inv: Rc<[f64]> = offsets
            .windows(2)
            .map(|w| if w[1] > w[0] { 1.0 / (w[1] - w[0]) as f64 } else { 0.0 })
            .collect();
        self.segment_weighted_sum("segment_mean", offsets, inv)
    }

    fn segment_weighted_sum(
        self,
        op: &'static str,
        offsets: Rc<[usize]>,
        seg_scale: Rc<[f64]>,
    ) -> Result<Var<'t>> {
        let (value, edges, cols) = {
            let x = self.value();
            expect_rank(op, &x, 2)?;
            let (edges, cols) = (x.shape()[0], x.shape()[1]);
            check_offsets(op, edges, &offsets)?;
            let nodes = offsets.len() - 1;
            let mut out = vec![0.0; nodes * cols];
            for i in 0..nodes {
                let row = &mut out[i * cols..(i + 1) * cols];
                for e in offsets[i]..offsets[i + 1] {
                    for (o, v) in row.iter_mut().zip(x.row(e)) {
                        *o += v;
                    }
                }
                row.iter_mut().for_each(|o| *o *= seg_scale[i]);
            }
            (Tensor::new(&[nodes, cols], out)?, edges, cols)
        };
        Ok(self.tape.push_op(op, value, &[self], move |g| {
            let mut dx = vec![0.0; edges * cols];
            for i in 0..offsets.len() - 1 {
                for e in offsets[i]..offsets[i + 1] {
                    for (d, v) in dx[e * cols..(e + 1) * cols].iter_mut().zip(g.row(i)) {
                        *d = v * seg_scale[i];
                    }
                }
            }
            vec![Some(Tensor::new(&[edges, cols], dx).unwrap())]
        }))
    }

    /// Per-segment, per-column maximum; empty segments give zero rows.
    /// Ties go to the earliest edge.
    pub fn segment_max(self, offsets: Rc<[usize]>) -> Result<Var<'t>> {
        let (value, argmax, edges, cols) = {
            let x = self.value();
            expect_rank("segment_max", &x, 2)?;
            let (edges, cols) = (x.shape()[0], x.shape()[1]);
            check_offsets("segment_max", edges, &offsets)?;
            let nodes = offsets.len() - 1;
            let mut out = vec![0.0; nodes * cols];
            let mut argmax = vec![usize::MAX; nodes * cols];
            for i in 0..nodes {
                for e in offsets[i]..offsets[i + 1] {
                    for (c, &v) in x.row(e).iter().enumerate() {
                        let slot = i * cols + c;
                        if argmax[slot] == usize::MAX || v > out[slot] {
                            out[slot] = v;
                            argmax[slot] = e;
                        }
                    }
                }
            }
            (Tensor::new(&[nodes, cols], out)?, argmax, edges, cols)
        };
        Ok(self.tape.push_op("segment_max", value, &[self], move |g| {
            let mut dx = vec![0.0; edges * cols];
            for (slot, &e) in argmax.iter().enumerate() {
                if e != usize::MAX {
                    dx[e * cols + slot % cols] += g.data()[slot];
                }
            }
            vec![Some(Tensor::new(&[edges, cols], dx).unwrap())]
        }))
    }

    /// Softmax over each segment, independently per column.
    pub fn segment_softmax(self, offsets: Rc<[usize]>) -> Result<Var<'t>> {
        let (value, cols) = {
            let x = self.value();
            expect_rank("segment_softmax", &x, 2)?;
            let (edges, cols) = (x.shape()[0], x.shape()[1]);
            check_offsets("segment_softmax", edges, &offsets)?;
            let mut out = vec![0.0; edges * cols];
            for w in offsets.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                for c in 0..cols {
                    let max = (lo..hi)
                        .map(|e| x.data()[e * cols + c])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for e in lo..hi {
                        let v = (x.data()[e * cols + c] - max).exp();
                        out[e * cols + c] = v;
                        denom += v;
                    }
                    for e in lo..hi {
                        out[e * cols + c] /= denom;
                    }
                }
            }
            (Tensor::new(&[edges, cols], out)?, cols)
        };
        let probs = Rc::new(value.clone());
        Ok(self.tape.push_op("segment_softmax", value, &[self], move |g| {
            let p = probs.data();
            let mut dx = vec![0.0; p.len()];
            for w in offsets.windows(2) {
                for c in 0..cols {
                    let dot: f64 = (w[0]..w[1])
                        .map(|e| p[e * cols + c] * g.data()[e * cols + c])
                        .sum();
                    for e in w[0]..w[1] {
                        let k = e * cols + c;
                        dx[k] = p[k] * (g.data()[k] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(probs.shape(), dx).unwrap())]
        }))
    }

    /// Per-head cosine similarity between matching rows.
    ///
    /// `self` (queries) and `keys` are `[E, C]`; columns split into `heads`
    /// contiguous blocks of `C / heads`. Output is `[E, heads]` with
    /// `s = ⟨q, k⟩ / (max(‖q‖, eps) · max(‖k‖, eps))`.
    pub fn head_cosine(self, keys: Var<'t>, heads: usize, eps: f64) -> Result<Var<'t>> {
        let (q, k) = (self.rc(), keys.rc());
        expect_rank("head_cosine", &q, 2)?;
        if q.shape() != k.shape() {
            return Err(Error::Dimension {
                op: "head_cosine",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let (edges, cols) = (q.shape()[0], q.shape()[1]);
        if heads == 0 || cols % heads != 0 {
            return Err(Error::config(format!(
                "{cols} channels do not split into {heads} heads"
            )));
        }
        let d = cols / heads;
        self.tape.add_macs((edges * cols) as u64);
        // per (edge, head): dot, |q|, |k|
        let mut stats = vec![[0.0f64; 3]; edges * heads];
        let mut out = vec![0.0; edges * heads];
        for e in 0..edges {
            for h in 0..heads {
                let qs = &q.row(e)[h * d..(h + 1) * d];
                let ks = &k.row(e)[h * d..(h + 1) * d];
                let dot: f64 = qs.iter().zip(ks).map(|(a, b)| a * b).sum();
                let nq = qs.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nk = ks.iter().map(|a| a * a).sum::<f64>().sqrt();
                stats[e * heads + h] = [dot, nq, nk];
                out[e * heads + h] = dot / (nq.max(eps) * nk.max(eps));
            }
        }
        let value = Tensor::new(&[edges, heads], out)?;
        Ok(self.tape.push_op("head_cosine", value, &[self, keys], move |g| {
            let mut dq = vec![0.0; edges * cols];
            let mut dk = vec![0.0; edges * cols];
            for e in 0..edges {
                for h in 0..heads {
                    let [dot, nq, nk] = stats[e * heads + h];
                    let gs = g.data()[e * heads + h];
                    let (dq_den, dk_den) = (nq.max(eps), nk.max(eps));
                    let inv = 1.0 / (dq_den * dk_den);
                    let s = dot * inv;
                    // the clamp makes the norm constant below eps
                    let cq = if nq > eps { s / (nq * nq) } else { 0.0 };
                    let ck = if nk > eps { s / (nk * nk) } else { 0.0 };
                    let span = e * cols + h * d..e * cols + (h + 1) * d;
                    let qs = &q.data()[span.clone()];
                    let ks = &k.data()[span.clone()];
                    for j in 0..d {
                        dq[span.start + j] = gs * (ks[j] * inv - cq * qs[j]);
                        dk[span.start + j] = gs * (qs[j] * inv - ck * ks[j]);
                    }
                }
            }
            vec![
                Some(Tensor::new(&[edges, cols], dq).unwrap()),
                Some(Tensor::new(&[edges, cols], dk).unwrap()),
            ]
        }))
    }

    /// Scales each head block of `[E, C]` by the matching entry of `[E, heads]`.
    pub fn head_scale(self, weights: Var<'t>) -> Result<Var<'t>> {
        let (v, w) = (self.rc(), weights.rc());
        expect_rank("head_scale", &v, 2)?;
        expect_rank("head_scale", &w, 2)?;
        let (edges, cols, heads) = (v.shape()[0], v.shape()[1], w.shape()[1]);
        if w.shape()[0] != edges || heads == 0 || cols % heads != 0 {
            return Err(Error::Dimension {
                op: "head_scale",
                lhs: v.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let d = cols / heads;
        self.tape.add_macs((edges * cols) as u64);
        let mut out = vec![0.0; edges * cols];
        for e in 0..edges {
            for c in 0..cols {
                out[e * cols + c] = v.data()[e * cols + c] * w.data()[e * heads + c / d];
            }
        }
        let value = Tensor::new(&[edges, cols], out)?;
        Ok(self.tape.push_op("head_scale", value, &[self, weights], move |g| {
            let mut dv = vec![0.0; edges * cols];
            let mut dw = vec![0.0; edges * heads];
            for e in 0..edges {
                for c in 0..cols {
                    let k = e * cols + c;
                    dv[k] = g.data()[k] * w.data()[e * heads + c / d];
                    dw[e * heads + c / d] += g.data()[k] * v.data()[k];
                }
            }
            vec![
                Some(Tensor::new(&[edges, cols], dv).unwrap()),
                Some(Tensor::new(&[edges, heads], dw).unwrap()),
            ]
        }))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(self, factors: Rc<[f64]>) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            expect_rank("scale_rows", &x, 2)?;
            if x.shape()[0] != factors.len() {
                return Err(Error::Dimension {
                    op: "scale_rows",
                    lhs: x.shape().to_vec(),
                    rhs: vec![factors.len()],
                });
            }
            scale_rows_raw(&x, &factors)
        };
        Ok(self.tape.push_op("scale_rows", value, &[self], move |g| {
            vec![Some(scale_rows_raw(g, &factors))]
        }))
    }
}

fn scale_rows_raw(x: &Tensor, factors: &[f64]) -> Tensor {
    let cols = x.shape()[1];
    let mut out = x.clone();
    if cols > 0 {
        for (row, f) in out.data_mut().chunks_mut(cols).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn offsets(v: &[usize]) -> Rc<[usize]> {
        v.to_vec().into()
    }

    #[test]
    fn cosine_hand_values() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 0.0, 0.3, -2.0]).unwrap());
        let k = tape.constant(Tensor::new(&[3, 2], vec![1.0, 1.0, 0.0, 5.0, 0.3, -2.0]).unwrap());
        let s = q.head_cosine(k, 1, 1e-12).unwrap();
        let s = s.value();
        assert!((s.data()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero_not_nan() {
        let tape = Tape::new();
        let q = tape.param(Tensor::zeros(&[1, 4]));
        let k = tape.param(Tensor::ones(&[1, 4]));
        let s = q.head_cosine(k, 2, 1e-12).unwrap();
        assert_eq!(s.value().data(), &[0.0, 0.0]);
        let grads = tape.backward(s.sum()).unwrap();
        assert!(grads.get(q).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn segment_reductions_handle_empty_segments() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 2], vec![1.0, -4.0, 3.0, -2.0, -5.0, 7.0]).unwrap());
        let off = offsets(&[0, 2, 2, 3]);
        let sum = x.segment_sum(off.clone()).unwrap();
        assert_eq!(sum.value().data(), &[4.0, -6.0, 0.0, 0.0, -5.0, 7.0]);
        let mean = x.segment_mean(off.clone()).unwrap();
        assert_eq!(mean.value().data(), &[2.0, -3.0, 0.0, 0.0, -5.0, 7.0]);
        let max = x.segment_max(off).unwrap();
        assert_eq!(max.value().data(), &[3.0, -2.0, 0.0, 0.0, -5.0, 7.0]);
    }

    #[test]
    fn segment_softmax_normalizes_each_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[7, 3], 2.0, &mut rng));
        let p = x.segment_softmax(offsets(&[0, 1, 4, 4, 7])).unwrap();
        let p = p.value();
        for (lo, hi) in [(0, 1), (1, 4), (4, 7)] {
            for c in 0..3 {
                let s: f64 = (lo..hi).map(|e| p.data()[e * 3 + c]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn gather_rejects_out_of_range_index() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(x.gather_rows(offsets(&[0, 2])).is_err());
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let idx = offsets(&[2, 0, 1, 1, 3, 0]);
        let off = offsets(&[0, 2, 2, 5, 6]);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 2], 1.0, &mut rng);
        let proj = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let report = check_gradients(&[x, y, w], GradCheck::default(), |tape, v| {
            let qe = v[0].gather_rows(idx.clone())?;
            let ke = v[1].gather_rows(idx.clone())?;
            let s = qe.head_cosine(ke, 2, 1e-12)?;
            let a = s.add(v[2])?.segment_softmax(off.clone())?;
            let m = ke.head_scale(a)?;
            let agg = m.segment_sum(off.clone())?
                .add(m.segment_max(off.clone())?)?
                .add(qe.segment_mean(off.clone())?)?;
            Ok(agg.mul(tape.constant(proj.clone()))?.sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
