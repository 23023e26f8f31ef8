//! Data-movement ops: bijective gathers (which realize axis permutation,
//! window partitioning, cyclic rolls, and scan-path flattening), concat,
//! slice, and zero padding.

use super::graph::{Graph, NodeKind, Var};
use super::{strides_of, Scalar, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

impl<T: Scalar> Graph<T> {
    /// `out[i] = in[index[i]]` where `index` is a bijection onto the input.
    /// Backward scatters gradients through the same map.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<u32>>, out_shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let numel: usize = out_shape.iter().product();
        if numel != t.numel() || numel != index.len() {
            return Err(Error::shape(format!(
                "gather map covers {} elements, input has {}, output shape {:?}",
                index.len(),
                t.numel(),
                out_shape
            )));
        }
        let data: Vec<T> = index.iter().map(|&i| t.data[i as usize]).collect();
        let out = Tensor { shape: out_shape.to_vec(), data, requires_grad: false, grad: None };
        Ok(self.push(out, vec![a], NodeKind::Gather { index }))
    }

    /// Reorder axes; `perm[d]` names the input axis that becomes output axis `d`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.nodes[a.0].value.shape.clone();
        if perm.len() != in_shape.len() {
            return Err(Error::shape(format!(
                "permute {:?} on rank-{} tensor",
                perm,
                in_shape.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::shape(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides_of(&in_shape);
        let numel: usize = in_shape.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut out_idx = vec![0usize; perm.len()];
        for _ in 0..numel {
            let mut src = 0usize;
            for (d, &p) in perm.iter().enumerate() {
                src += out_idx[d] * in_strides[p];
            }
            index.push(src as u32);
            for d in (0..perm.len()).rev() {
                out_idx[d] += 1;
                if out_idx[d] < out_shape[d] {
                    break;
                }
                out_idx[d] = 0;
            }
        }
        self.gather(a, Arc::new(index), &out_shape)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors".into()));
        }
        let base = self.nodes[parts[0].0].value.shape.clone();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} on shape {base:?}")));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].value.shape;
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat operand {:?} incompatible with {:?} on axis {axis}",
                    s, base
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let block = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor { shape: out_shape, data, requires_grad: false, grad: None };
        Ok(self.push(out, parts.to_vec(), NodeKind::Concat { axis }))
    }

    /// General N-d slice: `out = in[starts[d] .. starts[d] + lens[d]]` per axis.
    pub fn slice(&mut self, a: Var, starts: &[usize], lens: &[usize]) -> Result<Var> {
        let in_shape = self.nodes[a.0].value.shape.clone();
        if starts.len() != in_shape.len() || lens.len() != in_shape.len() {
            return Err(Error::shape(format!(
                "slice rank mismatch: starts {starts:?}, lens {lens:?}, shape {in_shape:?}"
            )));
        }
        for d in 0..in_shape.len() {
            if lens[d] == 0 || starts[d] + lens[d] > in_shape[d] {
                return Err(Error::shape(format!(
                    "slice [{}, {}) out of bounds on axis {d} extent {}",
                    starts[d],
                    starts[d] + lens[d],
                    in_shape[d]
                )));
            }
        }
        let in_strides = strides_of(&in_shape);
        let numel: usize = lens.iter().product();
        let mut data = Vec::with_capacity(numel);
        let rank = in_shape.len();
        let last_len = lens[rank - 1];
        let rows = numel / last_len;
        let mut idx = vec![0usize; rank];
        for _ in 0..rows {
            let mut src = 0usize;
            for d in 0..rank - 1 {
                src += (starts[d] + idx[d]) * in_strides[d];
            }
            src += starts[rank - 1];
            data.extend_from_slice(&self.nodes[a.0].value.data[src..src + last_len]);
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < lens[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let out = Tensor { shape: lens.to_vec(), data, requires_grad: false, grad: None };
        Ok(self.push(
            out,
            vec![a],
            NodeKind::Slice { starts: starts.to_vec(), lens: lens.to_vec() },
        ))
    }

    /// Zero-pad the trailing two axes of a rank-4 map.
    pub fn pad2d(&mut self, a: Var, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 4 {
            return Err(Error::shape(format!("pad2d expects rank-4, got {:?}", t.shape)));
        }
        let (b, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut data = vec![T::ZERO; b * c * oh * ow];
        for bc in 0..b * c {
            let src_plane = &t.data[bc * h * w..(bc + 1) * h * w];
            let dst_plane = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for row in 0..h {
                let dst_off = (row + top) * ow + left;
                dst_plane[dst_off..dst_off + w]
                    .copy_from_slice(&src_plane[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor { shape: vec![b, c, oh, ow], data, requires_grad: false, grad: None };
        Ok(self.push(out, vec![a], NodeKind::Pad2d { top, bottom, left, right }))
    }

    pub(crate) fn backward_concat(
        &self,
        node: usize,
        axis: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let parents = self.nodes[node].parents.clone();
        let out_shape = &self.nodes[node].value.shape;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_block = out_shape[axis] * inner;
        let mut offset = 0usize;
        for &p in &parents {
            let block = self.nodes[p.0].value.shape[axis] * inner;
            if self.nodes[p.0].requires_grad {
                let g = self.grad_buf(grads, p.0);
                for o in 0..outer {
                    let src = &gout[o * total_block + offset..o * total_block + offset + block];
                    for (dst, &gv) in g[o * block..(o + 1) * block].iter_mut().zip(src) {
                        *dst += gv;
                    }
                }
            }
            offset += block;
        }
    }

    pub(crate) fn backward_slice(
        &self,
        node: usize,
        starts: &[usize],
        lens: &[usize],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let p = self.nodes[node].parents[0].0;
        let in_shape = &self.nodes[p].value.shape;
        let in_strides = strides_of(in_shape);
        let rank = in_shape.len();
        let last_len = lens[rank - 1];
        let rows = gout.len() / last_len;
        let g = self.grad_buf(grads, p);
        let mut idx = vec![0usize; rank];
        for r in 0..rows {
            let mut dst = 0usize;
            for d in 0..rank - 1 {
                dst += (starts[d] + idx[d]) * in_strides[d];
            }
            dst += starts[rank - 1];
            let src = &gout[r * last_len..(r + 1) * last_len];
            for (o, &gv) in g[dst..dst + last_len].iter_mut().zip(src) {
                *o += gv;
            }
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < lens[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }

    pub(crate) fn backward_pad2d(
        &self,
        node: usize,
        top: usize,
        left: usize,
        right: usize,
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let p = self.nodes[node].parents[0].0;
        let in_shape = self.nodes[p].value.shape.clone();
        let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let ow = w + left + right;
        let oh = gout.len() / (b * c * ow);
        let g = self.grad_buf(grads, p);
        for bc in 0..b * c {
            let src_plane = &gout[bc * oh * ow..(bc + 1) * oh * ow];
            let dst_plane = &mut g[bc * h * w..(bc + 1) * h * w];
            for row in 0..h {
                let src_off = (row + top) * ow + left;
                for (dst, &gv) in dst_plane[row * w..(row + 1) * w]
                    .iter_mut()
                    .zip(&src_plane[src_off..src_off + w])
                {
                    *dst += gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_2d() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let t = g.permute(a, &[1, 0]).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        assert_eq!(g.data(t), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64));
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(cat), &[2, 3, 3]);
        let sa = g.slice(cat, &[0, 0, 0], &[2, 2, 3]).unwrap();
        let sb = g.slice(cat, &[0, 2, 0], &[2, 1, 3]).unwrap();
        assert_eq!(g.data(sa), g.data(a));
        assert_eq!(g.data(sb), g.data(b));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64));
        let p = g.pad2d(a, 1, 2, 0, 1).unwrap();
        assert_eq!(g.shape(p), &[1, 2, 6, 4]);
        let back = g.slice(p, &[0, 0, 1, 0], &[1, 2, 3, 3]).unwrap();
        assert_eq!(g.data(back), g.data(a));
    }

    #[test]
    fn slice_rejects_out_of_bounds() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.slice(a, &[0, 2], &[2, 2]).is_err());
    }
}
