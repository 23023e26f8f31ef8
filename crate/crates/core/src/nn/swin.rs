//! Windowed multi-head self-attention with optional half-window shift.
//!
//! The shifted variant cyclically rolls the map before partitioning and masks
//! attention pairs whose tokens originate from different pre-roll windows
//! (additive -1e9 on the logits).

use super::ln_channels;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use std::sync::Arc;

const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub struct SwinSpec {
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    /// Cyclic roll applied before partitioning; 0 or window/2.
    pub shift: usize,
}

impl SwinSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.shift != 0 && self.shift != self.window / 2 {
            return Err(Error::config(format!(
                "shift {} must be 0 or window/2 = {}",
                self.shift,
                self.window / 2
            )));
        }
        Ok(())
    }
}

/// Graph leaves for one attention block.
pub struct SwinVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_qkv: Var,
    pub b_qkv: Var,
    pub w_proj: Var,
    pub b_proj: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_mlp1: Var,
    pub b_mlp1: Var,
    pub w_mlp2: Var,
    pub b_mlp2: Var,
}

/// Parameter registry entries for one attention block.
pub struct SwinIds {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_qkv: ParamId,
    pub b_qkv: ParamId,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w_mlp1: ParamId,
    pub b_mlp1: ParamId,
    pub w_mlp2: ParamId,
    pub b_mlp2: ParamId,
}

impl SwinIds {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &SwinSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let c = spec.channels;
        let hidden = 4 * c;
        let lim = 1.0 / (c as f64).sqrt();
        let lim_h = 1.0 / (hidden as f64).sqrt();
        SwinIds {
            ln1_gamma: store.add(format!("{prefix}.ln1.g"), Tensor::full(&[c], T::ONE)),
            ln1_beta: store.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[c])),
            w_qkv: store.add(
                format!("{prefix}.qkv.w"),
                Tensor::rand_uniform(&[c, 3 * c], -lim, lim, rng),
            ),
            b_qkv: store.add(format!("{prefix}.qkv.b"), Tensor::zeros(&[3 * c])),
            w_proj: store.add(
                format!("{prefix}.proj.w"),
                Tensor::rand_uniform(&[c, c], -lim, lim, rng),
            ),
            b_proj: store.add(format!("{prefix}.proj.b"), Tensor::zeros(&[c])),
            ln2_gamma: store.add(format!("{prefix}.ln2.g"), Tensor::full(&[c], T::ONE)),
            ln2_beta: store.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[c])),
            w_mlp1: store.add(
                format!("{prefix}.mlp1.w"),
                Tensor::rand_uniform(&[c, hidden], -lim, lim, rng),
            ),
            b_mlp1: store.add(format!("{prefix}.mlp1.b"), Tensor::zeros(&[hidden])),
            w_mlp2: store.add(
                format!("{prefix}.mlp2.w"),
                Tensor::rand_uniform(&[hidden, c], -lim_h, lim_h, rng),
            ),
            b_mlp2: store.add(format!("{prefix}.mlp2.b"), Tensor::zeros(&[c])),
        }
    }

    pub fn bind(&self, b: &Bound) -> SwinVars {
        SwinVars {
            ln1_gamma: b.var(self.ln1_gamma),
            ln1_beta: b.var(self.ln1_beta),
            w_qkv: b.var(self.w_qkv),
            b_qkv: b.var(self.b_qkv),
            w_proj: b.var(self.w_proj),
            b_proj: b.var(self.b_proj),
            ln2_gamma: b.var(self.ln2_gamma),
            ln2_beta: b.var(self.ln2_beta),
            w_mlp1: b.var(self.w_mlp1),
            b_mlp1: b.var(self.b_mlp1),
            w_mlp2: b.var(self.w_mlp2),
            b_mlp2: b.var(self.b_mlp2),
        }
    }
}

/// Partition a `[B,C,H,W]` map into `[B*(H/M)*(W/M), M*M, C]` windows,
/// rolling the grid by `shift` first.
pub fn window_partition<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    m: usize,
    shift: usize,
) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::shape(format!("window_partition expects rank-4, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!(
            "window_partition: {h}x{w} not divisible by window {m}"
        )));
    }
    let (nh, nw) = (h / m, w / m);
    let l = m * m;
    let mut index = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for wh in 0..nh {
            for ww in 0..nw {
                for mh in 0..m {
                    let hy = (wh * m + mh + shift) % h;
                    for mw in 0..m {
                        let wx = (ww * m + mw + shift) % w;
                        for ci in 0..c {
                            index.push((((bi * c + ci) * h + hy) * w + wx) as u32);
                        }
                    }
                }
            }
        }
    }
    g.gather(x, Arc::new(index), &[b * nh * nw, l, c])
}

/// Inverse of [`window_partition`] with the same shift.
pub fn window_reverse<T: Scalar>(
    g: &mut Graph<T>,
    windows: Var,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    m: usize,
    shift: usize,
) -> Result<Var> {
    let s = g.shape(windows);
    let (nh, nw) = (h / m, w / m);
    let l = m * m;
    if s != [b * nh * nw, l, c] {
        return Err(Error::shape(format!(
            "window_reverse: windows {s:?} vs expected [{}, {l}, {c}]",
            b * nh * nw
        )));
    }
    let mut index = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for hy in 0..h {
                // position hy holds the rolled value originating at (hy - shift) mod h
                let hsrc = (hy + h - (shift % h)) % h;
                let (wh, mh) = (hsrc / m, hsrc % m);
                for wx in 0..w {
                    let wsrc = (wx + w - (shift % w)) % w;
                    let (ww, mw) = (wsrc / m, wsrc % m);
                    let win = (bi * nh + wh) * nw + ww;
                    index.push(((win * l + mh * m + mw) * c + ci) as u32);
                }
            }
        }
    }
    g.gather(windows, Arc::new(index), &[b, c, h, w])
}

/// Additive attention mask for a shifted grid: `[nH*nW, L, L]` with 0 where
/// both tokens share a pre-roll window and -1e9 otherwise.
pub fn attention_mask<T: Scalar>(h: usize, w: usize, m: usize, shift: usize) -> Tensor<T> {
    let (nh, nw) = (h / m, w / m);
    let l = m * m;
    // pre-roll window id of every post-roll position
    let region = |hy: usize, wx: usize| -> usize {
        let hp = (hy + shift) % h;
        let wp = (wx + shift) % w;
        (hp / m) * (w / m) + wp / m
    };
    let mut ids = vec![0usize; nh * nw * l];
    for wh in 0..nh {
        for ww in 0..nw {
            for mh in 0..m {
                for mw in 0..m {
                    ids[((wh * nw + ww) * l) + mh * m + mw] = region(wh * m + mh, ww * m + mw);
                }
            }
        }
    }
    let neg = T::from_f64(MASK_NEG);
    let mut data = vec![T::ZERO; nh * nw * l * l];
    for g in 0..nh * nw {
        let win = &ids[g * l..(g + 1) * l];
        for i in 0..l {
            for j in 0..l {
                if win[i] != win[j] {
                    data[(g * l + i) * l + j] = neg;
                }
            }
        }
    }
    Tensor { shape: vec![nh * nw, l, l], data, requires_grad: false, grad: None }
}

/// Multi-head self-attention within each window.
///
/// `mask`, when given, is the `[nW_grid, L, L]` additive mask; windows repeat
/// across the batch in grid order.
pub fn wmsa<T: Scalar>(
    g: &mut Graph<T>,
    windows: Var,
    vars: &SwinVars,
    spec: &SwinSpec,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    spec.validate()?;
    let s = g.shape(windows).to_vec();
    if s.len() != 3 || s[2] != spec.channels {
        return Err(Error::shape(format!(
            "wmsa expects [nW, L, {}], got {s:?}",
            spec.channels
        )));
    }
    let (nw, l, c) = (s[0], s[1], s[2]);
    let heads = spec.heads;
    let dh = c / heads;

    let flat = g.reshape(windows, &[nw * l, c])?;
    let qkv = g.matmul(flat, vars.w_qkv)?;
    let qkv = g.add_bias_last(qkv, vars.b_qkv)?;

    let to_heads = |g: &mut Graph<T>, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[nw, l, heads, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[nw * heads, l, dh])
    };
    let q = g.slice(qkv, &[0, 0], &[nw * l, c])?;
    let k = g.slice(qkv, &[0, c], &[nw * l, c])?;
    let v = g.slice(qkv, &[0, 2 * c], &[nw * l, c])?;
    let q = to_heads(g, q)?;
    let k = to_heads(g, k)?;
    let v = to_heads(g, v)?;

    let kt = g.permute(k, &[0, 2, 1])?;
    let logits = g.bmm(q, kt)?;
    let logits = g.mul_scalar(logits, T::from_f64(1.0 / (dh as f64).sqrt()));

    let logits = match mask {
        Some(mask) => {
            let grid = mask.shape[0];
            if nw % grid != 0 {
                return Err(Error::shape(format!(
                    "mask for {grid} grid windows incompatible with {nw} windows"
                )));
            }
            let mut data = Vec::with_capacity(nw * heads * l * l);
            for wi in 0..nw {
                let base = (wi % grid) * l * l;
                for _ in 0..heads {
                    data.extend_from_slice(&mask.data[base..base + l * l]);
                }
            }
            let mv = g.constant(Tensor {
                shape: vec![nw * heads, l, l],
                data,
                requires_grad: false,
                grad: None,
            });
            g.add(logits, mv)?
        }
        None => logits,
    };

    let attn = g.softmax(logits)?;
    let ctx = g.bmm(attn, v)?;
    let ctx = g.reshape(ctx, &[nw, heads, l, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[nw * l, c])?;
    let out = g.matmul(ctx, vars.w_proj)?;
    let out = g.add_bias_last(out, vars.b_proj)?;
    g.reshape(out, &[nw, l, c])
}

/// Full attention block: `x + WMSA(LN(x))`, then `+ MLP(LN(.))`.
/// Maps whose extents are not window multiples are zero-padded for the
/// attention and cropped back.
pub fn swin_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: &SwinVars,
    spec: &SwinSpec,
) -> Result<Var> {
    spec.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != spec.channels {
        return Err(Error::shape(format!(
            "swin_block expects [B, {}, H, W], got {s:?}",
            spec.channels
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let m = spec.window;
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = hp != h || wp != w;
    let xw = if padded { g.pad2d(x, 0, hp - h, 0, wp - w)? } else { x };

    let normed = ln_channels(g, xw, vars.ln1_gamma, vars.ln1_beta)?;
    let windows = window_partition(g, normed, m, spec.shift)?;
    let mask = if spec.shift > 0 { Some(attention_mask::<T>(hp, wp, m, spec.shift)) } else { None };
    let att = wmsa(g, windows, vars, spec, mask.as_ref())?;
    let merged = window_reverse(g, att, b, c, hp, wp, m, spec.shift)?;
    let x1 = g.add(xw, merged)?;

    let normed2 = ln_channels(g, x1, vars.ln2_gamma, vars.ln2_beta)?;
    let nhwc = g.permute(normed2, &[0, 2, 3, 1])?;
    let flat = g.reshape(nhwc, &[b * hp * wp, c])?;
    let hid = g.matmul(flat, vars.w_mlp1)?;
    let hid = g.add_bias_last(hid, vars.b_mlp1)?;
    let hid = g.silu(hid);
    let out = g.matmul(hid, vars.w_mlp2)?;
    let out = g.add_bias_last(out, vars.b_mlp2)?;
    let out = g.reshape(out, &[b, hp, wp, c])?;
    let out = g.permute(out, &[0, 3, 1, 2])?;
    let x2 = g.add(x1, out)?;

    if padded {
        g.slice(x2, &[0, 0, 0, 0], &[b, c, h, w])
    } else {
        Ok(x2)
    }
}

// ── gradient-check cases used by the verification suite ─────────────────

pub(crate) fn gradcheck_wmsa(rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    use crate::check::{finite_diff_check, DEFAULT_STEP};
    let spec = SwinSpec { channels: 4, window: 2, heads: 2, shift: 1 };
    let (nw, l, c) = (2usize, 4usize, 4usize);
    let x = Tensor::<f64>::rand_uniform(&[nw, l, c], -1.0, 1.0, rng);
    let tensors: Vec<(Tensor<f64>, &str)> = vec![
        (Tensor::rand_uniform(&[c, 3 * c], -0.5, 0.5, rng), "qkv_w"),
        (Tensor::rand_uniform(&[3 * c], -0.5, 0.5, rng), "qkv_b"),
        (Tensor::rand_uniform(&[c, c], -0.5, 0.5, rng), "proj_w"),
        (Tensor::rand_uniform(&[c], -0.5, 0.5, rng), "proj_b"),
    ];
    let mask = attention_mask::<f64>(2, 4, 2, 1);
    let mut worst: f64 = 0.0;
    // probe index 0 = x, 1..=4 = params
    for probe in 0..=tensors.len() {
        let target = if probe == 0 { &x } else { &tensors[probe - 1].0 };
        let err = finite_diff_check(
            |g, v| {
                let bind = |g: &mut Graph<f64>, idx: usize| -> Var {
                    if probe == idx + 1 {
                        v
                    } else {
                        g.constant(tensors[idx].0.clone())
                    }
                };
                let xv = if probe == 0 { v } else { g.constant(x.clone()) };
                let vars = SwinVars {
                    ln1_gamma: xv, // unused by wmsa
                    ln1_beta: xv,
                    w_qkv: bind(g, 0),
                    b_qkv: bind(g, 1),
                    w_proj: bind(g, 2),
                    b_proj: bind(g, 3),
                    ln2_gamma: xv,
                    ln2_beta: xv,
                    w_mlp1: xv,
                    b_mlp1: xv,
                    w_mlp2: xv,
                    b_mlp2: xv,
                };
                let y = wmsa(g, xv, &vars, &spec, Some(&mask))?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum_all(y2))
            },
            target,
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub(crate) fn gradcheck_swin_block(rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    use crate::check::{finite_diff_check, DEFAULT_STEP};
    let spec = SwinSpec { channels: 4, window: 2, heads: 2, shift: 1 };
    let c = 4usize;
    let x = Tensor::<f64>::rand_uniform(&[1, c, 4, 4], -1.0, 1.0, rng);
    let tensors: Vec<Tensor<f64>> = vec![
        Tensor::rand_uniform(&[c], 0.5, 1.5, rng),      // ln1 gamma
        Tensor::rand_uniform(&[c], -0.3, 0.3, rng),     // ln1 beta
        Tensor::rand_uniform(&[c, 3 * c], -0.5, 0.5, rng),
        Tensor::rand_uniform(&[3 * c], -0.3, 0.3, rng),
        Tensor::rand_uniform(&[c, c], -0.5, 0.5, rng),
        Tensor::rand_uniform(&[c], -0.3, 0.3, rng),
        Tensor::rand_uniform(&[c], 0.5, 1.5, rng),      // ln2 gamma
        Tensor::rand_uniform(&[c], -0.3, 0.3, rng),     // ln2 beta
        Tensor::rand_uniform(&[c, 4 * c], -0.5, 0.5, rng),
        Tensor::rand_uniform(&[4 * c], -0.3, 0.3, rng),
        Tensor::rand_uniform(&[4 * c, c], -0.3, 0.3, rng),
        Tensor::rand_uniform(&[c], -0.3, 0.3, rng),
    ];
    let mut worst: f64 = 0.0;
    for probe in 0..=tensors.len() {
        let target = if probe == 0 { &x } else { &tensors[probe - 1] };
        let err = finite_diff_check(
            |g, v| {
                let mut vs: Vec<Var> = Vec::new();
                for (i, t) in tensors.iter().enumerate() {
                    vs.push(if probe == i + 1 { v } else { g.constant(t.clone()) });
                }
                let xv = if probe == 0 { v } else { g.constant(x.clone()) };
                let vars = SwinVars {
                    ln1_gamma: vs[0],
                    ln1_beta: vs[1],
                    w_qkv: vs[2],
                    b_qkv: vs[3],
                    w_proj: vs[4],
                    b_proj: vs[5],
                    ln2_gamma: vs[6],
                    ln2_beta: vs[7],
                    w_mlp1: vs[8],
                    b_mlp1: vs[9],
                    w_mlp2: vs[10],
                    b_mlp2: vs[11],
                };
                let y = swin_block(g, xv, &vars, &spec)?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum_all(y2))
            },
            target,
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn make_block(
        g: &mut Graph<f64>,
        spec: &SwinSpec,
        seed: u64,
        zero_branches: bool,
    ) -> SwinVars {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = SwinIds::init(&mut store, "t", spec, &mut rng);
        if zero_branches {
            for id in [ids.w_qkv, ids.b_qkv, ids.w_proj, ids.b_proj, ids.w_mlp1, ids.b_mlp1, ids.w_mlp2, ids.b_mlp2] {
                let shape = store.get(id).shape.clone();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let bound = store.bind(g, false);
        ids.bind(&bound)
    }

    #[test]
    fn partition_enumerates_window_zero_first() {
        let mut g = Graph::<f64>::new();
        // 4x4 single-channel map holding its own flat index
        let x = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let win = window_partition(&mut g, x, 2, 0).unwrap();
        assert_eq!(g.shape(win), &[4, 4, 1]);
        // window 0 holds pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(&g.data(win)[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn partition_reverse_roundtrip_unshifted() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.7).sin()));
        let win = window_partition(&mut g, x, 2, 0).unwrap();
        let back = window_reverse(&mut g, win, 2, 3, 4, 4, 2, 0).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn partition_reverse_roundtrip_shifted() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 6, 6], |i| i as f64));
        let win = window_partition(&mut g, x, 2, 1).unwrap();
        let back = window_reverse(&mut g, win, 1, 2, 6, 6, 2, 1).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn partition_rejects_non_divisible() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(window_partition(&mut g, x, 2, 0).is_err());
    }

    #[test]
    fn identical_tokens_pass_through_identity_value_path() {
        // all tokens equal; v-projection = identity, out projection = identity
        let c = 4;
        let spec = SwinSpec { channels: c, window: 2, heads: 2, shift: 0 };
        let mut g = Graph::<f64>::new();
        let token: Vec<f64> = vec![0.3, -0.7, 1.1, 0.25];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&token);
        }
        let x = g.constant(Tensor::new(vec![1, 4, c], data).unwrap());
        // qkv weight: q,k arbitrary, v block = identity
        let mut qkv = Tensor::<f64>::rand_uniform(
            &[c, 3 * c],
            -0.5,
            0.5,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        for i in 0..c {
            for j in 0..c {
                qkv.data[i * 3 * c + 2 * c + j] = if i == j { 1.0 } else { 0.0 };
            }
        }
        let eye = Tensor::from_fn(&[c, c], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 });
        let w_qkv = g.constant(qkv);
        let b_qkv = g.constant(Tensor::zeros(&[3 * c]));
        let w_proj = g.constant(eye);
        let b_proj = g.constant(Tensor::zeros(&[c]));
        let vars = SwinVars {
            ln1_gamma: w_qkv,
            ln1_beta: w_qkv,
            w_qkv,
            b_qkv,
            w_proj,
            b_proj,
            ln2_gamma: w_qkv,
            ln2_beta: w_qkv,
            w_mlp1: w_qkv,
            b_mlp1: w_qkv,
            w_mlp2: w_qkv,
            b_mlp2: w_qkv,
        };
        let y = wmsa(&mut g, x, &vars, &spec, None).unwrap();
        for tok in g.data(y).chunks_exact(c) {
            for (a, b) in tok.iter().zip(&token) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_window_ignores_qk() {
        let c = 2;
        let spec = SwinSpec { channels: c, window: 1, heads: 1, shift: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x_t = Tensor::<f64>::rand_uniform(&[3, 1, c], -1.0, 1.0, &mut rng);
        let x = g.constant(x_t.clone());
        let qkv_t = Tensor::<f64>::rand_uniform(&[c, 3 * c], -1.0, 1.0, &mut rng);
        let proj_t = Tensor::<f64>::rand_uniform(&[c, c], -1.0, 1.0, &mut rng);
        let w_qkv = g.constant(qkv_t.clone());
        let b_qkv = g.constant(Tensor::zeros(&[3 * c]));
        let w_proj = g.constant(proj_t.clone());
        let b_proj = g.constant(Tensor::zeros(&[c]));
        let vars = SwinVars {
            ln1_gamma: w_qkv,
            ln1_beta: w_qkv,
            w_qkv,
            b_qkv,
            w_proj,
            b_proj,
            ln2_gamma: w_qkv,
            ln2_beta: w_qkv,
            w_mlp1: w_qkv,
            b_mlp1: w_qkv,
            w_mlp2: w_qkv,
            b_mlp2: w_qkv,
        };
        let y = wmsa(&mut g, x, &vars, &spec, None).unwrap();
        // expected: out_proj(v_proj(token)) per token
        for (w_idx, tok) in x_t.data.chunks_exact(c).enumerate() {
            for j in 0..c {
                let mut v = [0.0f64; 8];
                for (jj, vv) in v.iter_mut().enumerate().take(c) {
                    let mut acc = 0.0;
                    for i in 0..c {
                        acc += tok[i] * qkv_t.data[i * 3 * c + 2 * c + jj];
                    }
                    *vv = acc;
                }
                let mut out = 0.0;
                for i in 0..c {
                    out += v[i] * proj_t.data[i * c + j];
                }
                assert!((g.data(y)[w_idx * c + j] - out).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_branch_weights_make_block_identity() {
        let spec = SwinSpec { channels: 8, window: 4, heads: 4, shift: 2 };
        let mut g = Graph::<f64>::new();
        let vars = make_block(&mut g, &spec, 9, true);
        let x = g.constant(Tensor::from_fn(&[2, 8, 8, 8], |i| (i as f64 * 0.13).cos()));
        let y = swin_block(&mut g, x, &vars, &spec).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn block_preserves_shape() {
        let spec = SwinSpec { channels: 8, window: 4, heads: 4, shift: 0 };
        let mut g = Graph::<f64>::new();
        let vars = make_block(&mut g, &spec, 10, false);
        let x = g.constant(Tensor::from_fn(&[2, 8, 8, 8], |i| (i as f64 * 0.21).sin()));
        let y = swin_block(&mut g, x, &vars, &spec).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 8, 8]);
    }

    #[test]
    fn block_pads_non_divisible_maps() {
        let spec = SwinSpec { channels: 4, window: 4, heads: 2, shift: 2 };
        let mut g = Graph::<f64>::new();
        let vars = make_block(&mut g, &spec, 11, false);
        let x = g.constant(Tensor::from_fn(&[1, 4, 6, 5], |i| (i as f64 * 0.31).sin()));
        let y = swin_block(&mut g, x, &vars, &spec).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 6, 5]);
    }
}
