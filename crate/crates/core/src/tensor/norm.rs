use serde::{Deserialize, Serialize};

use super::{expect_rank, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Per-channel statistics of one training-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the estimate folded into running statistics.
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn update_running(&self, running_mean: &mut Tensor, running_var: &mut Tensor) {
        for (r, m) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

impl<'t> Var<'t> {
    /// Per-channel batch normalization of `[N, C, H, W]`.
    ///
    /// Train mode normalizes with the batch's own statistics and returns them
    /// so the owner can fold them into the running estimates; infer mode uses
    /// the running estimates as given.
    pub fn batchnorm2d(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: Mode,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let x = self.rc();
        expect_rank("batchnorm2d", &x, 4)?;
        let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        for t in [&*gamma.value(), &*beta.value(), running_mean, running_var] {
            if t.shape() != [c] {
                return Err(Error::Dimension {
                    op: "batchnorm2d",
                    lhs: x.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let count = n * h * w;
        let hw = h * w;
        let gamma_t = gamma.rc();
        let beta_v = beta.value().data().to_vec();

        let (mean, var) = match mode {
            Mode::Train => {
                if count == 0 {
                    return Err(Error::input("batchnorm2d on an empty batch in train mode"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (idx, plane) in x.data().chunks(hw).enumerate() {
                    mean[idx % c] += plane.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for (idx, plane) in x.data().chunks(hw).enumerate() {
                    let m = mean[idx % c];
                    var[idx % c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
            Mode::Infer => (running_mean.data().to_vec(), running_var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut xhat = vec![0.0; x.numel()];
        let mut out = vec![0.0; x.numel()];
        for (idx, (plane, (xh, o))) in x
            .data()
            .chunks(hw)
            .zip(xhat.chunks_mut(hw).zip(out.chunks_mut(hw)))
            .enumerate()
        {
            let ch = idx % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma_t.data()[ch], beta_v[ch]);
            for ((v, xh), o) in plane.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - m) * s;
                *o = g * *xh + b;
            }
        }
        let stats = (mode == Mode::Train).then(|| BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v })
                .collect(),
        });
        let value = Tensor::new(x.shape(), out)?;
        let shape = x.shape().to_vec();
        let var_out = self.tape.push_op("batchnorm2d", value, &[self, gamma, beta], move |g| {
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for (idx, (gp, xp)) in g.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                let ch = idx % c;
                for (dy, xh) in gp.iter().zip(xp) {
                    sum_dy[ch] += dy;
                    sum_dy_xhat[ch] += dy * xh;
                }
            }
            let mut dx = vec![0.0; g.numel()];
            for (idx, ((gp, xp), dp)) in g
                .data()
                .chunks(hw)
                .zip(xhat.chunks(hw))
                .zip(dx.chunks_mut(hw))
                .enumerate()
            {
                let ch = idx % c;
                let scale = gamma_t.data()[ch] * inv_std[ch];
                match mode {
                    Mode::Train => {
                        let m = count as f64;
                        for ((d, dy), xh) in dp.iter_mut().zip(gp).zip(xp) {
                            *d = scale / m * (m * dy - sum_dy[ch] - xh * sum_dy_xhat[ch]);
                        }
                    }
                    Mode::Infer => {
                        for (d, dy) in dp.iter_mut().zip(gp) {
                            *d = scale * dy;
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(&shape, dx).unwrap()),
                Some(Tensor::new(&[c], sum_dy_xhat.clone()).unwrap()),
                Some(Tensor::new(&[c], sum_dy.clone()).unwrap()),
            ]
        });
        Ok((var_out, stats))
    }
}
