//! Normalization over the trailing axis: layer norm and softmax.

use super::graph::{Graph, NodeKind, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Graph<T> {
    /// Layer norm over the last axis: per-position zero mean / unit variance
    /// (population variance), then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::ZERO {
            return Err(Error::config("layer_norm eps must be > 0".into()));
        }
        let t = &self.nodes[x.0].value;
        let c = *t
            .shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm on rank-0 tensor".into()))?;
        if self.nodes[gamma.0].value.shape != [c] || self.nodes[beta.0].value.shape != [c] {
            return Err(Error::shape(format!(
                "layer_norm params {:?}/{:?} vs channel {c}",
                self.nodes[gamma.0].value.shape, self.nodes[beta.0].value.shape
            )));
        }
        let rows = t.numel() / c;
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut inv_std = Vec::with_capacity(rows);
        let gd = &self.nodes[gamma.0].value.data;
        let bd = &self.nodes[beta.0].value.data;
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data.chunks_exact(c) {
            let mut m = T::ZERO;
            for &v in row {
                m += v;
            }
            m *= inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - m;
                var += d * d;
            }
            var *= inv_c;
            let inv = T::ONE / (var + eps).sqrt();
            mean.push(m);
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                data.push((v - m) * inv * gd[j] + bd[j]);
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(
            Tensor { shape, data, requires_grad: false, grad: None },
            vec![x, gamma, beta],
            NodeKind::LayerNormLast { eps, mean, inv_std },
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let c = *t
            .shape
            .last()
            .ok_or_else(|| Error::shape("softmax on rank-0 tensor".into()))?;
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data.chunks_exact(c) {
            let mut m = row[0];
            for &v in row {
                m = m.maxv(v);
            }
            let mut sum = T::ZERO;
            let base = data.len();
            for &v in row {
                let e = (v - m).exp();
                data.push(e);
                sum += e;
            }
            let inv = T::ONE / sum;
            for v in &mut data[base..] {
                *v *= inv;
            }
        }
        let shape = t.shape.clone();
        Ok(self.push(
            Tensor { shape, data, requires_grad: false, grad: None },
            vec![x],
            NodeKind::SoftmaxLast,
        ))
    }

    pub(crate) fn backward_layer_norm(
        &self,
        node: usize,
        mean: &[T],
        inv_std: &[T],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let px = self.nodes[node].parents[0].0;
        let pg = self.nodes[node].parents[1].0;
        let pb = self.nodes[node].parents[2].0;
        let c = self.nodes[pg].value.shape[0];
        let xd = &self.nodes[px].value.data;
        let gd = &self.nodes[pg].value.data;
        let inv_c = T::from_f64(1.0 / c as f64);

        if self.nodes[pb].requires_grad {
            let gb = self.grad_buf(grads, pb);
            for row in gout.chunks_exact(c) {
                for (dst, &gv) in gb.iter_mut().zip(row) {
                    *dst += gv;
                }
            }
        }
        if self.nodes[pg].requires_grad {
            let gg = self.grad_buf(grads, pg);
            for (r, row) in gout.chunks_exact(c).enumerate() {
                let x_row = &xd[r * c..(r + 1) * c];
                for j in 0..c {
                    let xhat = (x_row[j] - mean[r]) * inv_std[r];
                    gg[j] += row[j] * xhat;
                }
            }
        }
        if self.nodes[px].requires_grad {
            let gx = self.grad_buf(grads, px);
            for (r, row) in gout.chunks_exact(c).enumerate() {
                let x_row = &xd[r * c..(r + 1) * c];
                let mut sum_gy = T::ZERO;
                let mut sum_gy_xhat = T::ZERO;
                for j in 0..c {
                    let gy = row[j] * gd[j];
                    let xhat = (x_row[j] - mean[r]) * inv_std[r];
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                }
                let mean_gy = sum_gy * inv_c;
                let mean_gy_xhat = sum_gy_xhat * inv_c;
                for j in 0..c {
                    let gy = row[j] * gd[j];
                    let xhat = (x_row[j] - mean[r]) * inv_std[r];
                    gx[r * c + j] += inv_std[r] * (gy - mean_gy - xhat * mean_gy_xhat);
                }
            }
        }
    }

    pub(crate) fn backward_softmax(&self, node: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let p = self.nodes[node].parents[0].0;
        let c = *self.nodes[node].value.shape.last().unwrap();
        let yd = &self.nodes[node].value.data;
        let g = self.grad_buf(grads, p);
        for r in 0..gout.len() / c {
            let y_row = &yd[r * c..(r + 1) * c];
            let g_row = &gout[r * c..(r + 1) * c];
            let mut dot = T::ZERO;
            for j in 0..c {
                dot += g_row[j] * y_row[j];
            }
            for j in 0..c {
                g[r * c + j] += y_row[j] * (g_row[j] - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn constant_rows_normalize_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.7));
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.data(y).iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn two_point_standardization() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!((g.data(y)[0] + 1.0).abs() < 1e-5);
        assert!((g.data(y)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let gamma = g.constant(Tensor::zeros(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        assert!(g.layer_norm(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.3).sin() * 4.0));
        let y = g.softmax(x).unwrap();
        for row in g.data(y).chunks_exact(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 4], 2.0));
        let y = g.softmax(x).unwrap();
        assert!(g.data(y).iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
