//! Gated state-space block over feature maps:
//!
//! ```text
//! x0  = LN(x)
//! x1  = LN(SS2D(SiLU(Conv2d(LP(x0)))))
//! out = LP(SiLU(x0) gate x1) + x
//! ```
//!
//! LayerNorm acts per spatial position over channels. The inner width is
//! `expansion * channels`; the gate branch is projected to the inner width so
//! the elementwise product is well-typed, and the final projection maps back
//! to the input channel count, which the residual requires.

use super::ssm::{ss2d, SsmDirIds, SsmDirVars, SsmSpec};
use super::{linear_1x1, ln_channels};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct MambaSpec {
    pub channels: usize,
    pub expansion: usize,
    pub state: usize,
}

impl MambaSpec {
    pub fn inner(&self) -> usize {
        self.channels * self.expansion
    }

    pub fn ssm(&self) -> SsmSpec {
        SsmSpec { inner: self.inner(), state: self.state }
    }
}

pub struct MambaVars {
    pub ln_in_gamma: Var,
    pub ln_in_beta: Var,
    pub w_in: Var,
    pub b_in: Var,
    pub dw_kernel: Var,
    pub dw_bias: Var,
    pub dirs: [SsmDirVars; 4],
    pub ln_mid_gamma: Var,
    pub ln_mid_beta: Var,
    pub w_gate: Var,
    pub b_gate: Var,
    pub w_out: Var,
    pub b_out: Var,
}

pub struct MambaIds {
    pub ln_in_gamma: ParamId,
    pub ln_in_beta: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub dw_kernel: ParamId,
    pub dw_bias: ParamId,
    pub dirs: [SsmDirIds; 4],
    pub ln_mid_gamma: ParamId,
    pub ln_mid_beta: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl MambaIds {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &MambaSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let c = spec.channels;
        let ci = spec.inner();
        let lim_c = 1.0 / (c as f64).sqrt();
        let lim_ci = 1.0 / (ci as f64).sqrt();
        let ssm = spec.ssm();
        MambaIds {
            ln_in_gamma: store.add(format!("{prefix}.ln_in.g"), Tensor::full(&[c], T::ONE)),
            ln_in_beta: store.add(format!("{prefix}.ln_in.b"), Tensor::zeros(&[c])),
            w_in: store.add(
                format!("{prefix}.lp_in.w"),
                Tensor::rand_uniform(&[ci, c, 1, 1], -lim_c, lim_c, rng),
            ),
            b_in: store.add(format!("{prefix}.lp_in.b"), Tensor::zeros(&[ci])),
            dw_kernel: store.add(
                format!("{prefix}.dw.k"),
                Tensor::rand_uniform(&[ci, 3, 3], -1.0 / 3.0, 1.0 / 3.0, rng),
            ),
            dw_bias: store.add(format!("{prefix}.dw.b"), Tensor::zeros(&[ci])),
            dirs: [
                SsmDirIds::init(store, &format!("{prefix}.dir0"), &ssm, rng),
                SsmDirIds::init(store, &format!("{prefix}.dir1"), &ssm, rng),
                SsmDirIds::init(store, &format!("{prefix}.dir2"), &ssm, rng),
                SsmDirIds::init(store, &format!("{prefix}.dir3"), &ssm, rng),
            ],
            ln_mid_gamma: store.add(format!("{prefix}.ln_mid.g"), Tensor::full(&[ci], T::ONE)),
            ln_mid_beta: store.add(format!("{prefix}.ln_mid.b"), Tensor::zeros(&[ci])),
            w_gate: store.add(
                format!("{prefix}.lp_gate.w"),
                Tensor::rand_uniform(&[ci, c, 1, 1], -lim_c, lim_c, rng),
            ),
            b_gate: store.add(format!("{prefix}.lp_gate.b"), Tensor::zeros(&[ci])),
            w_out: store.add(
                format!("{prefix}.lp_out.w"),
                Tensor::rand_uniform(&[c, ci, 1, 1], -lim_ci, lim_ci, rng),
            ),
            b_out: store.add(format!("{prefix}.lp_out.b"), Tensor::zeros(&[c])),
        }
    }

    pub fn bind(&self, b: &Bound) -> MambaVars {
        MambaVars {
            ln_in_gamma: b.var(self.ln_in_gamma),
            ln_in_beta: b.var(self.ln_in_beta),
            w_in: b.var(self.w_in),
            b_in: b.var(self.b_in),
            dw_kernel: b.var(self.dw_kernel),
            dw_bias: b.var(self.dw_bias),
            dirs: [
                self.dirs[0].bind(b),
                self.dirs[1].bind(b),
                self.dirs[2].bind(b),
                self.dirs[3].bind(b),
            ],
            ln_mid_gamma: b.var(self.ln_mid_gamma),
            ln_mid_beta: b.var(self.ln_mid_beta),
            w_gate: b.var(self.w_gate),
            b_gate: b.var(self.b_gate),
            w_out: b.var(self.w_out),
            b_out: b.var(self.b_out),
        }
    }
}

pub fn mamba_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    vars: &MambaVars,
    spec: &MambaSpec,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != spec.channels {
        return Err(Error::shape(format!(
            "mamba_block expects [B, {}, H, W], got {s:?}",
            spec.channels
        )));
    }
    let x0 = ln_channels(g, x, vars.ln_in_gamma, vars.ln_in_beta)?;
    let inner = linear_1x1(g, x0, vars.w_in, vars.b_in)?;
    let conv = g.dwconv2d(inner, vars.dw_kernel, vars.dw_bias, 1)?;
    let act = g.silu(conv);
    let scanned = ss2d(g, act, &vars.dirs, &spec.ssm())?;
    let x1 = ln_channels(g, scanned, vars.ln_mid_gamma, vars.ln_mid_beta)?;
    let gate_act = g.silu(x0);
    let gate = linear_1x1(g, gate_act, vars.w_gate, vars.b_gate)?;
    let gated = g.mul(gate, x1)?;
    let out = linear_1x1(g, gated, vars.w_out, vars.b_out)?;
    g.add(out, x)
}

pub(crate) fn gradcheck_mamba_block(rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    use crate::check::{finite_diff_check, DEFAULT_STEP};
    let spec = MambaSpec { channels: 4, expansion: 1, state: 2 };
    let mut store = ParamStore::<f64>::new();
    let ids = MambaIds::init(&mut store, "m", &spec, rng);
    let x = Tensor::<f64>::rand_uniform(&[1, 4, 3, 3], -1.0, 1.0, rng);

    let mut worst: f64 = 0.0;
    // probe x plus every registered parameter
    let param_ids: Vec<_> = store.ids().collect();
    for probe in 0..=param_ids.len() {
        let target = if probe == 0 { x.clone() } else { store.get(param_ids[probe - 1]).clone() };
        let err = finite_diff_check(
            |g, v| {
                let mut bound_vars = Vec::with_capacity(param_ids.len());
                for (i, pid) in param_ids.iter().enumerate() {
                    bound_vars.push(if probe == i + 1 {
                        v
                    } else {
                        g.constant(store.get(*pid).clone())
                    });
                }
                let bound = crate::params::Bound { vars: bound_vars };
                let vars = ids.bind(&bound);
                let xv = if probe == 0 { v } else { g.constant(x.clone()) };
                let y = mamba_block(g, xv, &vars, &spec)?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum_all(y2))
            },
            &target,
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(
        g: &mut Graph<f64>,
        spec: &MambaSpec,
        seed: u64,
        zero_final: bool,
    ) -> MambaVars {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = MambaIds::init(&mut store, "m", spec, &mut rng);
        if zero_final {
            for id in [ids.w_out, ids.b_out] {
                let shape = store.get(id).shape.clone();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let bound = store.bind(g, false);
        ids.bind(&bound)
    }

    #[test]
    fn zero_final_projection_is_identity() {
        let spec = MambaSpec { channels: 4, expansion: 2, state: 2 };
        let mut g = Graph::<f64>::new();
        let vars = build(&mut g, &spec, 17, true);
        let x = g.constant(Tensor::from_fn(&[1, 4, 5, 4], |i| (i as f64 * 0.29).sin()));
        let y = mamba_block(&mut g, x, &vars, &spec).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn preserves_shape() {
        let spec = MambaSpec { channels: 4, expansion: 2, state: 2 };
        let mut g = Graph::<f64>::new();
        let vars = build(&mut g, &spec, 18, false);
        let x = g.constant(Tensor::from_fn(&[1, 4, 6, 5], |i| (i as f64 * 0.17).cos()));
        let y = mamba_block(&mut g, x, &vars, &spec).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 6, 5]);
    }
}
