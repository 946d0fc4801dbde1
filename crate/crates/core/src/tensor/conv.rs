use super::{expect_rank, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    groups: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    fn macs(&self) -> u64 {
        (self.n * self.c_out * self.h_out * self.w_out * self.cin_per_group() * self.k * self.k)
            as u64
    }

    /// Output columns `ox` whose input column `ox·stride + kx − pad` is in range.
    fn valid_range(&self, k_off: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
        // need 0 <= o*s + k_off - pad < in_extent
        let lo = if k_off >= self.pad {
            0
        } else {
            (self.pad - k_off).div_ceil(self.stride)
        };
        let limit = in_extent + self.pad - k_off; // o*s < limit
        let hi = limit.div_ceil(self.stride).min(out_extent);
        (lo, hi.max(lo))
    }
}

/// Output extent of a zero-padded conv with "same" padding, `ceil(extent / stride)`.
pub fn conv_out_extent(extent: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (extent + 2 * pad - kernel) / stride + 1
}

fn forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let (hw_in, hw_out) = (g.h * g.w, g.h_out * g.w_out);
    let mut out = vec![0.0; g.n * g.c_out * hw_out];
    for b in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cog;
            let o_plane = &mut out[(b * g.c_out + co) * hw_out..(b * g.c_out + co + 1) * hw_out];
            for ci_local in 0..cig {
                let ci = grp * cig + ci_local;
                let i_plane = &x[(b * g.c_in + ci) * hw_in..(b * g.c_in + ci + 1) * hw_in];
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.h_out);
                    for kx in 0..g.k {
                        let wv = wt[((co * cig + ci_local) * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.w_out);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let o_row = &mut o_plane[oy * g.w_out..(oy + 1) * g.w_out];
                            let i_row = &i_plane[iy * g.w..(iy + 1) * g.w];
                            for ox in ox_lo..ox_hi {
                                o_row[ox] += wv * i_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients for input, kernel and bias.
fn backward(gout: &[f64], x: &[f64], wt: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    let (hw_in, hw_out) = (g.h * g.w, g.h_out * g.w_out);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; g.c_out];
    for b in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cog;
            let go_plane = &gout[(b * g.c_out + co) * hw_out..(b * g.c_out + co + 1) * hw_out];
            db[co] += go_plane.iter().sum::<f64>();
            for ci_local in 0..cig {
                let ci = grp * cig + ci_local;
                let base = (b * g.c_in + ci) * hw_in;
                for ky in 0..g.k {
                    let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.h_out);
                    for kx in 0..g.k {
                        let widx = ((co * cig + ci_local) * g.k + ky) * g.k + kx;
                        let wv = wt[widx];
                        let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.w_out);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.pad;
                            let go_row = &go_plane[oy * g.w_out..(oy + 1) * g.w_out];
                            let row_off = base + iy * g.w;
                            for ox in ox_lo..ox_hi {
                                let ix = row_off + ox * g.stride + kx - g.pad;
                                acc += go_row[ox] * x[ix];
                                dx[ix] += go_row[ox] * wv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

impl<'t> Var<'t> {
    /// Zero-padded 2-D cross-correlation.
    ///
    /// `self: [N, C_in, H, W]`, `weight: [C_out, C_in / groups, k, k]` with
    /// `k ∈ {1, 3}`, optional `bias: [C_out]`. Padding is `k / 2`, so stride 1
    /// keeps the spatial extent and stride 2 maps it to `ceil(extent / 2)`.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        groups: usize,
    ) -> Result<Var<'t>> {
        let (x, wt) = (self.rc(), weight.rc());
        expect_rank("conv2d", &x, 4)?;
        expect_rank("conv2d", &wt, 4)?;
        let [n, c_in, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [c_out, cig, k, k2] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
        if k != k2 || !(k == 1 || k == 3) {
            return Err(Error::config(format!(
                "conv2d kernel must be 1x1 or 3x3, got {k}x{k2}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::config(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::config(format!(
                "conv2d groups={groups} must divide C_in={c_in} and C_out={c_out}"
            )));
        }
        if cig != c_in / groups {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.value().shape() != [c_out] {
                return Err(Error::Dimension {
                    op: "conv2d bias",
                    lhs: wt.shape().to_vec(),
                    rhs: b.shape(),
                });
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            groups,
            pad: k / 2,
            h_out: conv_out_extent(h, k, stride),
            w_out: conv_out_extent(w, k, stride),
        };
        self.tape.add_macs(geom.macs());
        let mut out = forward(x.data(), wt.data(), &geom);
        if let Some(b) = bias {
            let b = b.value();
            let hw = geom.h_out * geom.w_out;
            for (idx, plane) in out.chunks_mut(hw).enumerate() {
                let bv = b.data()[idx % c_out];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(&[n, c_out, geom.h_out, geom.w_out], out)?;
        let x_shape = x.shape().to_vec();
        let w_shape = wt.shape().to_vec();
        let backward_fn = move |g: &Tensor| {
            let (dx, dw, db) = backward(g.data(), x.data(), wt.data(), &geom);
            vec![
                Some(Tensor::new(&x_shape, dx).unwrap()),
                Some(Tensor::new(&w_shape, dw).unwrap()),
                Some(Tensor::new(&[c_out], db).unwrap()),
            ]
        };
        Ok(match bias {
            Some(b) => self.tape.push_op("conv2d", value, &[self, weight, b], backward_fn),
            None => self.tape.push_op("conv2d", value, &[self, weight], move |g| {
                let mut grads = backward_fn(g);
                grads.truncate(2);
                grads
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window evaluation, one output element at a time.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, groups: usize) -> Tensor {
        let [n, c_in, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [c_out, cig, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let pad = (k / 2) as isize;
        let ho = (h + 2 * (k / 2) - k) / stride + 1;
        let wo = (wd + 2 * (k / 2) - k) / stride + 1;
        let cog = c_out / groups;
        let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
        for bi in 0..n {
            for co in 0..c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for cl in 0..cig {
                            let ci = (co / cog) * cig + cl;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * c_in + ci) * h + iy as usize) * wd + ix as usize];
                                    acc += xv * w.data()[((co * cig + cl) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((bi * c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[2, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        k.data_mut()[13] = 1.0;
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv2d(tape.constant(k), None, 1, 2).unwrap();
        assert!(y.value().bit_eq(&x));
    }

    #[test]
    fn pointwise_conv_equals_matmul_over_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 3, 1, 1], 1.0, &mut rng);
        let tape = Tape::new();
        let conv = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, 1, 1).unwrap();
        // W as [in, out]
        let wt = Tensor::from_fn(&[3, 5], |i| w.data()[(i % 5) * 3 + i / 5]);
        let rows = tape.constant(x).nchw_to_rows().unwrap();
        let mm = rows.matmul(tape.constant(wt)).unwrap().rows_to_nchw(2, 5, 4, 4).unwrap();
        assert!(conv.value().max_abs_diff(&mm.value()) < 1e-12);
    }

    #[test]
    fn stride_two_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), Some(tape.constant(b.clone())), 2, 1)
            .unwrap();
        assert_eq!(y.shape(), vec![1, 3, 3, 3]);
        let oracle = naive_conv(&x, &w, b.data(), 2, 1);
        assert!(y.value().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn grouped_and_odd_sizes_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (c_in, c_out, groups, stride, h, w, k) in [
            (4, 4, 4, 1, 7, 6, 3),
            (4, 6, 2, 2, 7, 5, 3),
            (3, 5, 1, 2, 6, 6, 1),
            (6, 6, 3, 2, 1, 2, 3),
        ] {
            let x = Tensor::randn(&[2, c_in, h, w], 1.0, &mut rng);
            let wt = Tensor::randn(&[c_out, c_in / groups, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[c_out], 1.0, &mut rng);
            let tape = Tape::new();
            let y = tape
                .constant(x.clone())
                .conv2d(tape.constant(wt.clone()), Some(tape.constant(b.clone())), stride, groups)
                .unwrap();
            let oracle = naive_conv(&x, &wt, b.data(), stride, groups);
            assert_eq!(y.shape(), oracle.shape().to_vec());
            assert!(y.value().max_abs_diff(&oracle) < 1e-12);
        }
    }

    #[test]
    fn stride_two_halves_with_ceiling() {
        assert_eq!(conv_out_extent(224, 3, 2), 112);
        assert_eq!(conv_out_extent(7, 3, 2), 4);
        assert_eq!(conv_out_extent(1, 3, 2), 1);
        assert_eq!(conv_out_extent(9, 3, 1), 9);
        assert_eq!(conv_out_extent(9, 1, 1), 9);
    }

    #[test]
    fn rejects_bad_configuration() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 4, 4]));
        let k5 = tape.constant(Tensor::zeros(&[4, 4, 5, 5]));
        assert!(matches!(x.conv2d(k5, None, 1, 1), Err(Error::Config(_))));
        let k3 = tape.constant(Tensor::zeros(&[4, 1, 3, 3]));
        assert!(matches!(x.conv2d(k3, None, 1, 3), Err(Error::Config(_))));
        assert!(matches!(x.conv2d(k3, None, 3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (groups, stride) in [(1, 1), (1, 2), (3, 1), (3, 2)] {
            let x = Tensor::randn(&[2, 3, 5, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 3 / groups, 3, 3], 1.0, &mut rng);
            let b = Tensor::randn(&[3], 1.0, &mut rng);
            let proj = Tensor::randn(&[2, 3, 5usize.div_ceil(stride), 4usize.div_ceil(stride)], 1.0, &mut rng);
            let report = check_gradients(&[x, w, b], GradCheck::default(), |tape, v| {
                let y = v[0].conv2d(v[1], Some(v[2]), stride, groups)?;
                Ok(y.mul(tape.constant(proj.clone()))?.sum())
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "{report:?}");
        }
    }
}
