//! Matrix products. The i-k-j loop order keeps the inner accumulation over
//! contiguous rows, which the compiler vectorizes well.

use super::graph::{Graph, NodeKind};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Graph<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut out = vec![T::ZERO; m * n];
        matmul_acc(&ta.data, &tb.data, &mut out, m, k, n);
        let t = Tensor { shape: vec![m, n], data: out, requires_grad: false, grad: None };
        Ok(self.push(t, vec![a, b], NodeKind::Matmul))
    }

    /// Batched `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 3 || tb.rank() != 3 {
            return Err(Error::shape(format!(
                "bmm expects rank-3 operands, got {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let (ba, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let (bb, k2, n) = (tb.shape[0], tb.shape[1], tb.shape[2]);
        if ba != bb || k != k2 {
            return Err(Error::shape(format!(
                "bmm shapes disagree: {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut out = vec![T::ZERO; ba * m * n];
        for i in 0..ba {
            matmul_acc(
                &ta.data[i * m * k..(i + 1) * m * k],
                &tb.data[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor { shape: vec![ba, m, n], data: out, requires_grad: false, grad: None };
        Ok(self.push(t, vec![a, b], NodeKind::Bmm))
    }

    pub(crate) fn backward_matmul(
        &self,
        node: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let pa = self.nodes[node].parents[0].0;
        let pb = self.nodes[node].parents[1].0;
        let (m, k) = (self.nodes[pa].value.shape[0], self.nodes[pa].value.shape[1]);
        let n = self.nodes[pb].value.shape[1];
        if self.nodes[pa].requires_grad {
            let b = &self.nodes[pb].value.data;
            let ga = self.grad_buf(grads, pa);
            matmul_bt_acc(gout, b, ga, m, k, n);
        }
        if self.nodes[pb].requires_grad {
            let a = &self.nodes[pa].value.data;
            let gb = self.grad_buf(grads, pb);
            matmul_at_acc(a, gout, gb, m, k, n);
        }
    }

    pub(crate) fn backward_bmm(&self, node: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let pa = self.nodes[node].parents[0].0;
        let pb = self.nodes[node].parents[1].0;
        let (bs, m, k) =
            (self.nodes[pa].value.shape[0], self.nodes[pa].value.shape[1], self.nodes[pa].value.shape[2]);
        let n = self.nodes[pb].value.shape[2];
        if self.nodes[pa].requires_grad {
            let b = &self.nodes[pb].value.data;
            let ga = self.grad_buf(grads, pa);
            for i in 0..bs {
                matmul_bt_acc(
                    &gout[i * m * n..(i + 1) * m * n],
                    &b[i * k * n..(i + 1) * k * n],
                    &mut ga[i * m * k..(i + 1) * m * k],
                    m,
                    k,
                    n,
                );
            }
        }
        if self.nodes[pb].requires_grad {
            let a = &self.nodes[pa].value.data;
            let gb = self.grad_buf(grads, pb);
            for i in 0..bs {
                matmul_at_acc(
                    &a[i * m * k..(i + 1) * m * k],
                    &gout[i * m * n..(i + 1) * m * n],
                    &mut gb[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

use super::graph::Var;

/// out[m,n] += a[m,k] * b[k,n]
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// ga[m,k] += g[m,n] * b[k,n]^T  (dot of contiguous rows)
fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], ga: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::ZERO;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            ga[i * k + p] += acc;
        }
    }
}

/// gb[k,n] += a[m,k]^T * g[m,n]  (axpy over contiguous rows)
fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], gb: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for (o, &gv) in gb_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn identity_is_neutral() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let y = g.matmul(a, eye).unwrap();
        assert_eq!(g.data(y), g.data(a));
    }

    #[test]
    fn hand_multiplied_2x2() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![5., 6., 7., 8.]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.data(y), &[19., 22., 43., 50.]);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.5));
        let b = g.constant(Tensor::from_fn(&[2, 3, 2], |i| 1.0 - i as f64 * 0.25));
        let y = g.bmm(a, b).unwrap();
        for batch in 0..2 {
            let mut g2 = Graph::<f64>::new();
            let a2 = g2.constant(Tensor::new(
                vec![2, 3],
                g.data(a)[batch * 6..(batch + 1) * 6].to_vec(),
            ).unwrap());
            let b2 = g2.constant(Tensor::new(
                vec![3, 2],
                g.data(b)[batch * 6..(batch + 1) * 6].to_vec(),
            ).unwrap());
            let y2 = g2.matmul(a2, b2).unwrap();
            assert_eq!(&g.data(y)[batch * 4..(batch + 1) * 4], g2.data(y2));
        }
    }
}
