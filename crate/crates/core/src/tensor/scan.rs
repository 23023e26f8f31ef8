//! Input-dependent state-space recurrence (selective scan).
//!
//! Per batch element, channel `c`, and step `t`, with state size `N`:
//!
//! ```text
//! abar_t = exp(delta[t,c] * a[c,:])          (vector over N)
//! h_t    = abar_t .* h_{t-1} + delta[t,c] * b_seq[t,:] * x[t,c]
//! y[t,c] = <c_seq[t,:], h_t> + d[c] * x[t,c]
//! ```
//!
//! The scan is sequential by design; the forward pass stashes the state
//! history and decays so backward is a single reverse sweep without
//! recomputing exponentials.

use super::graph::{Graph, NodeKind, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Graph<T> {
    /// Batched selective scan.
    ///
    /// Shapes: `x, delta: [B,L,C]`, `b_seq, c_seq: [B,L,N]`, `a: [C,N]`,
    /// `d: [C]`. Output `[B,L,C]`. Differentiable w.r.t. every input.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        b_seq: Var,
        c_seq: Var,
        a: Var,
        d: Var,
    ) -> Result<Var> {
        let xs = &self.nodes[x.0].value.shape;
        if xs.len() != 3 {
            return Err(Error::shape(format!("selective_scan x must be [B,L,C], got {xs:?}")));
        }
        let (bsz, l, c) = (xs[0], xs[1], xs[2]);
        if self.nodes[delta.0].value.shape != [bsz, l, c] {
            return Err(Error::shape(format!(
                "selective_scan delta shape {:?} vs x {:?}",
                self.nodes[delta.0].value.shape, xs
            )));
        }
        let bs = &self.nodes[b_seq.0].value.shape;
        if bs.len() != 3 || bs[0] != bsz || bs[1] != l {
            return Err(Error::shape(format!(
                "selective_scan b_seq shape {bs:?} disagrees with x length {l}"
            )));
        }
        let n = bs[2];
        if self.nodes[c_seq.0].value.shape != [bsz, l, n] {
            return Err(Error::shape(format!(
                "selective_scan c_seq shape {:?} vs b_seq {:?}",
                self.nodes[c_seq.0].value.shape, bs
            )));
        }
        if self.nodes[a.0].value.shape != [c, n] {
            return Err(Error::shape(format!(
                "selective_scan a shape {:?}, expected [{c}, {n}]",
                self.nodes[a.0].value.shape
            )));
        }
        if self.nodes[d.0].value.shape != [c] {
            return Err(Error::shape(format!(
                "selective_scan d shape {:?}, expected [{c}]",
                self.nodes[d.0].value.shape
            )));
        }

        let xd = &self.nodes[x.0].value.data;
        let dd = &self.nodes[delta.0].value.data;
        let bd = &self.nodes[b_seq.0].value.data;
        let cd = &self.nodes[c_seq.0].value.data;
        let ad = &self.nodes[a.0].value.data;
        let skip = &self.nodes[d.0].value.data;

        let track = self.grad_enabled
            && [x, delta, b_seq, c_seq, a, d]
                .iter()
                .any(|v| self.nodes[v.0].requires_grad);
        let stash_len = if track { bsz * l * c * n } else { 0 };
        let mut stash_h = vec![T::ZERO; stash_len];
        let mut stash_abar = vec![T::ZERO; stash_len];

        let mut out = vec![T::ZERO; bsz * l * c];
        let mut h = vec![T::ZERO; c * n];
        for bi in 0..bsz {
            for v in h.iter_mut() {
                *v = T::ZERO;
            }
            for t in 0..l {
                let brow = &bd[(bi * l + t) * n..(bi * l + t + 1) * n];
                let crow = &cd[(bi * l + t) * n..(bi * l + t + 1) * n];
                for ci in 0..c {
                    let flat = (bi * l + t) * c + ci;
                    let dt = dd[flat];
                    let xv = xd[flat];
                    let a_row = &ad[ci * n..(ci + 1) * n];
                    let h_row = &mut h[ci * n..(ci + 1) * n];
                    let mut acc = T::ZERO;
                    if track {
                        let s = flat * n;
                        for j in 0..n {
                            let abar = (dt * a_row[j]).exp();
                            let hv = abar * h_row[j] + dt * brow[j] * xv;
                            h_row[j] = hv;
                            stash_abar[s + j] = abar;
                            stash_h[s + j] = hv;
                            acc += crow[j] * hv;
                        }
                    } else {
                        for j in 0..n {
                            let abar = (dt * a_row[j]).exp();
                            let hv = abar * h_row[j] + dt * brow[j] * xv;
                            h_row[j] = hv;
                            acc += crow[j] * hv;
                        }
                    }
                    out[flat] = acc + skip[ci] * xv;
                }
            }
        }
        let t = Tensor { shape: vec![bsz, l, c], data: out, requires_grad: false, grad: None };
        Ok(self.push(
            t,
            vec![x, delta, b_seq, c_seq, a, d],
            NodeKind::SelectiveScan { state: n, stash_h, stash_abar },
        ))
    }

    pub(crate) fn backward_selective_scan(
        &self,
        node: usize,
        n: usize,
        stash_h: &[T],
        stash_abar: &[T],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let parents = &self.nodes[node].parents;
        let (px, pdelta, pb, pc, pa, pd) =
            (parents[0].0, parents[1].0, parents[2].0, parents[3].0, parents[4].0, parents[5].0);
        let shape = &self.nodes[node].value.shape;
        let (bsz, l, c) = (shape[0], shape[1], shape[2]);

        let xd = &self.nodes[px].value.data;
        let dd = &self.nodes[pdelta].value.data;
        let bd = &self.nodes[pb].value.data;
        let cd = &self.nodes[pc].value.data;
        let ad = &self.nodes[pa].value.data;
        let skip = &self.nodes[pd].value.data;

        let mut gx = vec![T::ZERO; bsz * l * c];
        let mut gdelta = vec![T::ZERO; bsz * l * c];
        let mut gb = vec![T::ZERO; bsz * l * n];
        let mut gc = vec![T::ZERO; bsz * l * n];
        let mut ga = vec![T::ZERO; c * n];
        let mut gskip = vec![T::ZERO; c];

        // gh[c,:] carries dL/dh_t while sweeping t downward.
        let mut gh = vec![T::ZERO; c * n];
        for bi in 0..bsz {
            for v in gh.iter_mut() {
                *v = T::ZERO;
            }
            for t in (0..l).rev() {
                let row_off = (bi * l + t) * n;
                let brow = &bd[row_off..row_off + n];
                let crow = &cd[row_off..row_off + n];
                for ci in 0..c {
                    let flat = (bi * l + t) * c + ci;
                    let go = gout[flat];
                    let dt = dd[flat];
                    let xv = xd[flat];
                    let a_row = &ad[ci * n..(ci + 1) * n];
                    let gh_row = &mut gh[ci * n..(ci + 1) * n];
                    let s = flat * n;
                    let h_now = &stash_h[s..s + n];
                    let abar = &stash_abar[s..s + n];

                    gskip[ci] += go * xv;
                    let mut gx_acc = go * skip[ci];
                    let mut gd_acc = T::ZERO;
                    for j in 0..n {
                        gc[row_off + j] += go * h_now[j];
                        let ghv = gh_row[j] + go * crow[j];
                        let h_prev = if t > 0 {
                            stash_h[((bi * l + t - 1) * c + ci) * n + j]
                        } else {
                            T::ZERO
                        };
                        gx_acc += ghv * dt * brow[j];
                        gd_acc += ghv * (a_row[j] * abar[j] * h_prev + brow[j] * xv);
                        gb[row_off + j] += ghv * dt * xv;
                        ga[ci * n + j] += ghv * h_prev * dt * abar[j];
                        gh_row[j] = ghv * abar[j];
                    }
                    gx[flat] += gx_acc;
                    gdelta[flat] += gd_acc;
                }
            }
        }

        let add_into = |dst: &mut [T], src: &[T]| {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        if self.nodes[px].requires_grad {
            add_into(self.grad_buf(grads, px), &gx);
        }
        if self.nodes[pdelta].requires_grad {
            add_into(self.grad_buf(grads, pdelta), &gdelta);
        }
        if self.nodes[pb].requires_grad {
            add_into(self.grad_buf(grads, pb), &gb);
        }
        if self.nodes[pc].requires_grad {
            add_into(self.grad_buf(grads, pc), &gc);
        }
        if self.nodes[pa].requires_grad {
            add_into(self.grad_buf(grads, pa), &ga);
        }
        if self.nodes[pd].requires_grad {
            add_into(self.grad_buf(grads, pd), &gskip);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    fn scan_once(
        x: Vec<f64>,
        delta: Vec<f64>,
        b_seq: Vec<f64>,
        c_seq: Vec<f64>,
        a: Vec<f64>,
        d: Vec<f64>,
        l: usize,
        c: usize,
        n: usize,
    ) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, l, c], x).unwrap());
        let dt = g.constant(Tensor::new(vec![1, l, c], delta).unwrap());
        let b = g.constant(Tensor::new(vec![1, l, n], b_seq).unwrap());
        let cc = g.constant(Tensor::new(vec![1, l, n], c_seq).unwrap());
        let a = g.constant(Tensor::new(vec![c, n], a).unwrap());
        let d = g.constant(Tensor::new(vec![c], d).unwrap());
        let y = g.selective_scan(x, dt, b, cc, a, d).unwrap();
        g.data(y).to_vec()
    }

    #[test]
    fn zero_decay_reduces_to_prefix_sum() {
        // A = 0, delta = 1, B = C = 1, D = 0 => y = cumsum(x)
        let y = scan_once(
            vec![1.0, 1.0, 1.0],
            vec![1.0; 3],
            vec![1.0; 3],
            vec![1.0; 3],
            vec![0.0],
            vec![0.0],
            3,
            1,
            1,
        );
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn skip_only_path() {
        let y = scan_once(
            vec![3.0, -1.0],
            vec![1.0; 2],
            vec![0.0; 2],
            vec![1.0; 2],
            vec![-1.0],
            vec![2.0],
            2,
            1,
            1,
        );
        assert_eq!(y, vec![6.0, -2.0]);
    }

    #[test]
    fn rejects_length_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2]));
        let dt = g.constant(Tensor::zeros(&[1, 4, 2]));
        let b = g.constant(Tensor::zeros(&[1, 3, 2]));
        let c = g.constant(Tensor::zeros(&[1, 3, 2]));
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let d = g.constant(Tensor::zeros(&[2]));
        assert!(g.selective_scan(x, dt, b, c, a, d).is_err());
    }
}
