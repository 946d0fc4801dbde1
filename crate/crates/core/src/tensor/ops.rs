use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{expect_rank, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Standard normal CDF via `erf`.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Plain row-major product of `[m, k]` and `[k, n]` slices.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ·b` for `a: [k, m]`, `b: [k, n]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a·bᵀ` for `a: [m, k]`, `b: [n, k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape("add", &a, &b)?;
            a.zip_map(&b, |x, y| x + y)
        };
        Ok(self.tape.push_op("add", value, &[self, other], |g| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (a, b) = (self.value(), other.value());
            same_shape("sub", &a, &b)?;
            a.zip_map(&b, |x, y| x - y)
        };
        Ok(self.tape.push_op("sub", value, &[self, other], |g| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        same_shape("mul", &a, &b)?;
        let value = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.push_op("mul", value, &[self, other], move |g| {
            vec![Some(g.zip_map(&b, |g, y| g * y)), Some(g.zip_map(&a, |g, x| g * x))]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v * c);
        self.tape
            .push_op("scale", value, &[self], move |g| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v + c);
        self.tape
            .push_op("add_scalar", value, &[self], |g| vec![Some(g.clone())])
    }

    /// Multiplies every entry by a rank-0 variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (x, sv) = (self.rc(), s.rc());
        if sv.numel() != 1 {
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: x.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let c = sv.item();
        let scalar_shape = sv.shape().to_vec();
        let value = x.map(|v| v * c);
        Ok(self.tape.push_op("mul_scalar", value, &[self, s], move |g| {
            let ds: f64 = g.data().iter().zip(x.data()).map(|(g, v)| g * v).sum();
            vec![
                Some(g.map(|v| v * c)),
                Some(Tensor::full(&scalar_shape, ds)),
            ]
        }))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        let out = std::rc::Rc::new(value.clone());
        self.tape.push_op("exp", value, &[self], move |g| {
            vec![Some(g.zip_map(&out, |g, y| g * y))]
        })
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(self) -> Var<'t> {
        let x = self.rc();
        let value = x.map(gelu_scalar);
        self.tape.push_op("gelu", value, &[self], move |g| {
            vec![Some(g.zip_map(&x, |g, x| g * gelu_grad_scalar(x)))]
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let x = self.rc();
        let value = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.tape.push_op("leaky_relu", value, &[self], move |g| {
            vec![Some(g.zip_map(&x, |g, x| if x > 0.0 { g } else { slope * g }))]
        })
    }

    pub fn sum(self) -> Var<'t> {
        let (value, shape) = {
            let x = self.value();
            (Tensor::scalar(x.sum()), x.shape().to_vec())
        };
        self.tape.push_op("sum", value, &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.rc(), other.rc());
        expect_rank("matmul", &a, 2)?;
        expect_rank("matmul", &b, 2)?;
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        if b.shape()[0] != k {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        self.tape.add_macs((m * k * n) as u64);
        let value = Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        Ok(self.tape.push_op("matmul", value, &[self, other], move |g| {
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            let da = matmul_nt(g.data(), b.data(), m, n, k);
            let db = matmul_tn(a.data(), g.data(), m, k, n);
            vec![
                Some(Tensor::new(&[m, k], da).unwrap()),
                Some(Tensor::new(&[k, n], db).unwrap()),
            ]
        }))
    }

    /// Adds a bias vector `[n]` to every row of `[m, n]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let (x, b) = (self.value(), bias.value());
            expect_rank("add_bias", &x, 2)?;
            let n = x.shape()[1];
            if b.shape() != [n] {
                return Err(Error::Dimension {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        };
        Ok(self.tape.push_op("add_bias", value, &[self, bias], |g| {
            let n = g.shape()[1];
            let mut db = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(&[n], db).unwrap())]
        }))
    }

    /// `x·W + b` for `x: [m, in]`, `W: [in, out]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, orig) = {
            let x = self.value();
            (x.clone().reshape(shape)?, x.shape().to_vec())
        };
        Ok(self.tape.push_op("reshape", value, &[self], move |g| {
            vec![Some(g.clone().reshape(&orig).unwrap())]
        }))
    }

    /// `[m, a]` ++ `[m, b]` → `[m, a + b]`.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, a_cols, b_cols) = {
            let (a, b) = (self.value(), other.value());
            expect_rank("concat_cols", &a, 2)?;
            expect_rank("concat_cols", &b, 2)?;
            if a.shape()[0] != b.shape()[0] {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = Vec::with_capacity(m * (ca + cb));
            for i in 0..m {
                out.extend_from_slice(a.row(i));
                out.extend_from_slice(b.row(i));
            }
            (Tensor::new(&[m, ca + cb], out)?, ca, cb)
        };
        Ok(self.tape.push_op("concat_cols", value, &[self, other], move |g| {
            let m = g.shape()[0];
            let mut ga = Vec::with_capacity(m * a_cols);
            let mut gb = Vec::with_capacity(m * b_cols);
            for row in g.data().chunks(a_cols + b_cols) {
                ga.extend_from_slice(&row[..a_cols]);
                gb.extend_from_slice(&row[a_cols..]);
            }
            vec![
                Some(Tensor::new(&[m, a_cols], ga).unwrap()),
                Some(Tensor::new(&[m, b_cols], gb).unwrap()),
            ]
        }))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let (value, rows, cols) = {
            let x = self.value();
            expect_rank("slice_rows", &x, 2)?;
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            if start > end || end > rows {
                return Err(Error::Dimension {
                    op: "slice_rows",
                    lhs: x.shape().to_vec(),
                    rhs: vec![start, end],
                });
            }
            let data = x.data()[start * cols..end * cols].to_vec();
            (Tensor::new(&[end - start, cols], data)?, rows, cols)
        };
        Ok(self.tape.push_op("slice_rows", value, &[self], move |g| {
            let mut full = Tensor::zeros(&[rows, cols]);
            full.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
            vec![Some(full)]
        }))
    }

    /// `[N, C, H, W]` → `[N·H·W, C]`, one row per spatial position.
    pub fn nchw_to_rows(self) -> Result<Var<'t>> {
        let (value, dims) = {
            let x = self.value();
            expect_rank("nchw_to_rows", &x, 4)?;
            let d = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            (Tensor::new(&[d[0] * d[2] * d[3], d[1]], nchw_to_nhwc(x.data(), d))?, d)
        };
        Ok(self.tape.push_op("nchw_to_rows", value, &[self], move |g| {
            vec![Some(Tensor::new(&dims, nhwc_to_nchw(g.data(), dims)).unwrap())]
        }))
    }

    /// Inverse of [`Var::nchw_to_rows`].
    pub fn rows_to_nchw(self, n: usize, c: usize, h: usize, w: usize) -> Result<Var<'t>> {
        let dims = [n, c, h, w];
        let value = {
            let x = self.value();
            if x.shape() != [n * h * w, c] {
                return Err(Error::Dimension {
                    op: "rows_to_nchw",
                    lhs: x.shape().to_vec(),
                    rhs: dims.to_vec(),
                });
            }
            Tensor::new(&dims, nhwc_to_nchw(x.data(), dims))?
        };
        Ok(self.tape.push_op("rows_to_nchw", value, &[self], move |g| {
            vec![Some(
                Tensor::new(&[n * h * w, c], nchw_to_nhwc(g.data(), dims)).unwrap(),
            )]
        }))
    }

    /// Spatial mean, `[N, C, H, W]` → `[N, C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let (value, dims) = {
            let x = self.value();
            expect_rank("global_avg_pool", &x, 4)?;
            let d = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            let hw = d[2] * d[3];
            let data = x
                .data()
                .chunks(hw)
                .map(|plane| plane.iter().sum::<f64>() / hw as f64)
                .collect();
            (Tensor::new(&[d[0], d[1]], data)?, d)
        };
        Ok(self.tape.push_op("global_avg_pool", value, &[self], move |g| {
            let hw = dims[2] * dims[3];
            let mut out = Vec::with_capacity(g.numel() * hw);
            for &v in g.data() {
                out.extend(std::iter::repeat_n(v / hw as f64, hw));
            }
            vec![Some(Tensor::new(&dims, out).unwrap())]
        }))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.rc();
        expect_rank("cross_entropy", &logits, 2)?;
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != b {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::input(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            loss += max + denom.ln() - row[label];
        }
        let labels = labels.to_vec();
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.tape.push_op("cross_entropy", value, &[self], move |g| {
            let scale = g.item() / b as f64;
            let mut grad = probs.clone();
            for (i, &label) in labels.iter().enumerate() {
                grad[i * k + label] -= 1.0;
            }
            grad.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::new(&[b, k], grad).unwrap())]
        }))
    }
}

fn nchw_to_nhwc(src: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let hw = h * w;
    for b in 0..n {
        for ch in 0..c {
            let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                out[(b * hw + p) * c + ch] = v;
            }
        }
    }
    out
}

fn nhwc_to_nchw(src: &[f64], [n, c, h, w]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let hw = h * w;
    for b in 0..n {
        for p in 0..hw {
            let row = &src[(b * hw + p) * c..(b * hw + p + 1) * c];
            for (ch, &v) in row.iter().enumerate() {
                out[(b * c + ch) * hw + p] = v;
            }
        }
    }
    out
}
