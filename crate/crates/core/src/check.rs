//! Finite-difference verification of backward rules.
//!
//! Everything here runs in 64-bit. `finite_diff_check` compares the analytic
//! gradient of a scalar-valued function against central differences;
//! `run_suite` sweeps every differentiable op and block and is the engine
//! behind the `gradcheck` command.

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-5;
pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over elements of `|analytic - central| / max(|analytic|, |central|, 1e-12)`
/// for the gradient of `f` at `x`. `f` must build a scalar output.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::config("finite_diff_check step must be > 0".into()));
    }
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.leaf(t.clone().with_requires_grad(false));
        let y = f(&mut g, v)?;
        if g.value(y).numel() != 1 {
            return Err(Error::shape("finite_diff_check needs a scalar-valued f".into()));
        }
        let out = g.data(y)[0];
        if !out.is_finite() {
            return Err(Error::numeric(format!("f(x) is not finite: {out}")));
        }
        Ok(out)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let y = f(&mut g, xv)?;
    if g.value(y).numel() != 1 {
        return Err(Error::shape("finite_diff_check needs a scalar-valued f".into()));
    }
    if !g.data(y)[0].is_finite() {
        return Err(Error::numeric(format!("f(x) is not finite: {}", g.data(y)[0])));
    }
    g.backward(y)?;
    let analytic = g.grad(xv).expect("leaf gradient populated").to_vec();

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let central = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(central.abs()).max(1e-12);
        worst = worst.max((analytic[i] - central).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckScope {
    Op,
    Block,
    Model,
    All,
}

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// Random values kept away from zero so kinked ops (relu, huber) see no
/// crossing within the difference step.
fn rand_tensor_offset(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.15..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

struct Suite {
    seeds: Vec<u64>,
    report: SuiteReport,
    sabotage: bool,
}

impl Suite {
    fn check<F>(&mut self, name: &str, tol: f64, mut case: F)
    where
        F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
    {
        let mut worst = 0.0f64;
        for &seed in &self.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match case(&mut rng) {
                Ok(err) => worst = worst.max(err),
                Err(e) => {
                    worst = f64::INFINITY;
                    eprintln!("gradcheck {name}: {e}");
                }
            }
        }
        self.report.rows.push(CheckRow { name: name.to_string(), max_rel_err: worst, tolerance: tol });
    }
}

/// Run the finite-difference suite. `sabotage` swaps one backward rule for a
/// deliberately wrong one; a healthy checker must then report a failure.
pub fn run_suite(scope: CheckScope, seed: u64, sabotage: bool) -> SuiteReport {
    let mut suite = Suite {
        seeds: (0..5).map(|i| seed.wrapping_add(i)).collect(),
        report: SuiteReport::default(),
        sabotage,
    };
    if matches!(scope, CheckScope::Op | CheckScope::All) {
        op_checks(&mut suite);
    }
    if matches!(scope, CheckScope::Block | CheckScope::All) {
        block_checks(&mut suite);
    }
    if matches!(scope, CheckScope::Model | CheckScope::All) {
        model_checks(&mut suite);
    }
    suite.report
}

fn op_checks(s: &mut Suite) {
    let sab = s.sabotage;
    s.check("silu", OP_TOL, move |rng| {
        let x = rand_tensor(&[3, 4], rng);
        finite_diff_check(
            |g, v| {
                let y = if sab { g_silu_broken(g, v) } else { g.silu(v) };
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("sigmoid", OP_TOL, |rng| {
        let x = rand_tensor(&[2, 5], rng);
        finite_diff_check(|g, v| { let y = g.sigmoid(v); Ok(g.sum_all(y)) }, &x, DEFAULT_STEP)
    });
    s.check("softplus", OP_TOL, |rng| {
        let x = rand_tensor(&[7], rng);
        finite_diff_check(|g, v| { let y = g.softplus(v); Ok(g.sum_all(y)) }, &x, DEFAULT_STEP)
    });
    s.check("exp", OP_TOL, |rng| {
        let x = rand_tensor(&[6], rng);
        finite_diff_check(|g, v| { let y = g.exp(v); Ok(g.sum_all(y)) }, &x, DEFAULT_STEP)
    });
    s.check("relu", OP_TOL, |rng| {
        let x = rand_tensor_offset(&[8], rng);
        finite_diff_check(|g, v| { let y = g.relu(v); Ok(g.sum_all(y)) }, &x, DEFAULT_STEP)
    });
    s.check("huber", OP_TOL, |rng| {
        let x = rand_tensor_offset(&[8], rng);
        finite_diff_check(|g, v| { let y = g.huber(v); Ok(g.sum_all(y)) }, &x, DEFAULT_STEP)
    });
    s.check("add", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 3], rng);
        let b = rand_tensor(&[3, 3], rng);
        finite_diff_check(
            |g, v| {
                let bv = g.constant(b.clone());
                let y = g.add(v, bv)?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum_all(y2))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("sub", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 3], rng);
        let b = rand_tensor(&[3, 3], rng);
        finite_diff_check(
            |g, v| {
                let bv = g.constant(b.clone());
                let y = g.sub(bv, v)?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum_all(y2))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("mul", OP_TOL, |rng| {
        let x = rand_tensor(&[4, 2], rng);
        let b = rand_tensor(&[4, 2], rng);
        finite_diff_check(
            |g, v| {
                let bv = g.constant(b.clone());
                let y = g.mul(v, bv)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("scalar_ops", OP_TOL, |rng| {
        let x = rand_tensor(&[5], rng);
        finite_diff_check(
            |g, v| {
                let y = g.mul_scalar(v, 1.7);
                let y = g.add_scalar(y, -0.3);
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("add_bias_last", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 4], rng);
        let bias = rand_tensor(&[4], rng);
        let xc = x.clone();
        let err_b = finite_diff_check(
            |g, v| {
                let xv = g.constant(xc.clone());
                let y = g.add_bias_last(xv, v)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &bias,
            DEFAULT_STEP,
        )?;
        let bc = bias.clone();
        let err_x = finite_diff_check(
            |g, v| {
                let bv = g.constant(bc.clone());
                let y = g.add_bias_last(v, bv)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )?;
        Ok(err_b.max(err_x))
    });
    s.check("matmul", OP_TOL, |rng| {
        let a = rand_tensor(&[3, 4], rng);
        let b = rand_tensor(&[4, 2], rng);
        let ac = a.clone();
        let err_b = finite_diff_check(
            |g, v| {
                let av = g.constant(ac.clone());
                let y = g.matmul(av, v)?;
                Ok(g.sum_all(y))
            },
            &b,
            DEFAULT_STEP,
        )?;
        let bc = b.clone();
        let err_a = finite_diff_check(
            |g, v| {
                let bv = g.constant(bc.clone());
                let y = g.matmul(v, bv)?;
                Ok(g.sum_all(y))
            },
            &a,
            DEFAULT_STEP,
        )?;
        Ok(err_a.max(err_b))
    });
    s.check("bmm", OP_TOL, |rng| {
        let a = rand_tensor(&[2, 3, 4], rng);
        let b = rand_tensor(&[2, 4, 2], rng);
        let bc = b.clone();
        finite_diff_check(
            |g, v| {
                let bv = g.constant(bc.clone());
                let y = g.bmm(v, bv)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &a,
            DEFAULT_STEP,
        )
    });
    s.check("reshape_permute", OP_TOL, |rng| {
        let x = rand_tensor(&[2, 3, 4], rng);
        finite_diff_check(
            |g, v| {
                let y = g.permute(v, &[2, 0, 1])?;
                let y = g.reshape(y, &[4, 6])?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("concat_slice", OP_TOL, |rng| {
        let x = rand_tensor(&[2, 3], rng);
        let other = rand_tensor(&[2, 2], rng);
        finite_diff_check(
            |g, v| {
                let o = g.constant(other.clone());
                let y = g.concat(&[v, o], 1)?;
                let y = g.slice(y, &[0, 1], &[2, 3])?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("pad2d", OP_TOL, |rng| {
        let x = rand_tensor(&[1, 2, 3, 3], rng);
        finite_diff_check(
            |g, v| {
                let y = g.pad2d(v, 1, 0, 2, 1)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("conv2d", OP_TOL, |rng| {
        let x = rand_tensor(&[1, 2, 5, 5], rng);
        let w = rand_tensor(&[3, 2, 3, 3], rng);
        let b = rand_tensor(&[3], rng);
        let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
        let err_x = finite_diff_check(
            |g, v| {
                let wv = g.constant(wc.clone());
                let bv = g.constant(bc.clone());
                let y = g.conv2d(v, wv, bv, 1, 1)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )?;
        let (xc2, bc2) = (xc.clone(), b.clone());
        let err_w = finite_diff_check(
            |g, v| {
                let xv = g.constant(xc2.clone());
                let bv = g.constant(bc2.clone());
                let y = g.conv2d(xv, v, bv, 2, 1)?;
                Ok(g.sum_all(y))
            },
            &w,
            DEFAULT_STEP,
        )?;
        let wc2 = w.clone();
        let err_b = finite_diff_check(
            |g, v| {
                let xv = g.constant(xc.clone());
                let wv = g.constant(wc2.clone());
                let y = g.conv2d(xv, wv, v, 1, 0)?;
                Ok(g.sum_all(y))
            },
            &b,
            DEFAULT_STEP,
        )?;
        Ok(err_x.max(err_w).max(err_b))
    });
    s.check("dwconv2d", OP_TOL, |rng| {
        let x = rand_tensor(&[1, 3, 4, 4], rng);
        let k = rand_tensor(&[3, 3, 3], rng);
        let b = rand_tensor(&[3], rng);
        let (kc, bc) = (k.clone(), b.clone());
        let err_x = finite_diff_check(
            |g, v| {
                let kv = g.constant(kc.clone());
                let bv = g.constant(bc.clone());
                let y = g.dwconv2d(v, kv, bv, 1)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )?;
        let xc = x.clone();
        let bc2 = b.clone();
        let err_k = finite_diff_check(
            |g, v| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(bc2.clone());
                let y = g.dwconv2d(xv, v, bv, 1)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &k,
            DEFAULT_STEP,
        )?;
        Ok(err_x.max(err_k))
    });
    s.check("avg_pool2", OP_TOL, |rng| {
        let x = rand_tensor(&[2, 2, 4, 4], rng);
        finite_diff_check(
            |g, v| {
                let y = g.avg_pool2(v)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("upsample_nearest2", OP_TOL, |rng| {
        let x = rand_tensor(&[1, 2, 3, 3], rng);
        finite_diff_check(
            |g, v| {
                let y = g.upsample_nearest2(v)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("upsample_bilinear2", OP_TOL, |rng| {
        let x = rand_tensor(&[1, 2, 3, 4], rng);
        finite_diff_check(
            |g, v| {
                let y = g.upsample_bilinear2(v)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("layer_norm", OP_TOL, |rng| {
        let x = rand_tensor(&[3, 6], rng);
        let gamma = rand_tensor(&[6], rng);
        let beta = rand_tensor(&[6], rng);
        let (gc, bc) = (gamma.clone(), beta.clone());
        let err_x = finite_diff_check(
            |g, v| {
                let gv = g.constant(gc.clone());
                let bv = g.constant(bc.clone());
                let y = g.layer_norm(v, gv, bv, 1e-5)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )?;
        let (xc, bc2) = (x.clone(), beta.clone());
        let err_g = finite_diff_check(
            |g, v| {
                let xv = g.constant(xc.clone());
                let bv = g.constant(bc2.clone());
                let y = g.layer_norm(xv, v, bv, 1e-5)?;
                let y = g.mul(y, y)?;
                Ok(g.sum_all(y))
            },
            &gamma,
            DEFAULT_STEP,
        )?;
        Ok(err_x.max(err_g))
    });
    s.check("softmax", OP_TOL, |rng| {
        let x = rand_tensor(&[4, 5], rng);
        let w = rand_tensor(&[4, 5], rng);
        finite_diff_check(
            |g, v| {
                let y = g.softmax(v)?;
                let wv = g.constant(w.clone());
                let y = g.mul(y, wv)?;
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_STEP,
        )
    });
    s.check("selective_scan", OP_TOL, |rng| {
        let (l, c, n) = (5, 3, 2);
        let x = rand_tensor(&[1, l, c], rng);
        let delta = Tensor::rand_uniform(&[1, l, c], 0.05, 0.8, rng);
        let b_seq = rand_tensor(&[1, l, n], rng);
        let c_seq = rand_tensor(&[1, l, n], rng);
        let a = Tensor::rand_uniform(&[c, n], -1.5, -0.1, rng);
        let d = rand_tensor(&[c], rng);
        let mut worst: f64 = 0.0;
        let all = [&x, &delta, &b_seq, &c_seq, &a, &d];
        for probe_idx in 0..6 {
            let fixed: Vec<Tensor<f64>> = all.iter().map(|t| (*t).clone()).collect();
            let err = finite_diff_check(
                |g, v| {
                    let vars: Vec<Var> = fixed
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == probe_idx { v } else { g.constant(t.clone()) })
                        .collect();
                    let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?;
                    let y = g.mul(y, y)?;
                    Ok(g.sum_all(y))
                },
                all[probe_idx],
                DEFAULT_STEP,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    });
}

fn g_silu_broken(g: &mut Graph<f64>, v: Var) -> Var {
    g.silu_broken_grad(v)
}

fn block_checks(s: &mut Suite) {
    s.check("wmsa", OP_TOL, |rng| nn::swin::gradcheck_wmsa(rng));
    s.check("swin_block", OP_TOL, |rng| nn::swin::gradcheck_swin_block(rng));
    s.check("double_conv", OP_TOL, |rng| nn::conv_block::gradcheck_double_conv(rng));
    s.check("ss2d", BLOCK_TOL, |rng| nn::ssm::gradcheck_ss2d(rng));
    s.check("mamba_block", BLOCK_TOL, |rng| nn::mamba::gradcheck_mamba_block(rng));
}

fn model_checks(s: &mut Suite) {
    s.check("model_end_to_end", MODEL_TOL, |rng| crate::model::gradcheck_model(rng));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gradient_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 * 0.3);
        let err = finite_diff_check(|g, v| Ok(g.sum_all(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn silu_matches_central_differences() {
        let x = Tensor::full(&[4], 0.5);
        let err = finite_diff_check(
            |g, v| {
                let y = g.silu(v);
                Ok(g.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn broken_backward_rule_is_detected() {
        let x = Tensor::full(&[4], 0.5);
        let err = finite_diff_check(
            |g, v| {
                let y = g.silu_broken_grad(v);
                Ok(g.sum_all(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "negative control failed: err = {err}");
    }

    #[test]
    fn random_five_op_chain_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let a = g.matmul(v, wv)?;
                let b = g.silu(a);
                let c = g.softmax(b)?;
                let d = g.mul(c, c)?;
                Ok(g.sum_all(d))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn op_suite_passes() {
        let report = run_suite(CheckScope::Op, 7, false);
        for row in &report.rows {
            assert!(
                row.passed(),
                "{} failed: {} >= {}",
                row.name,
                row.max_rel_err,
                row.tolerance
            );
        }
    }

    #[test]
    fn sabotaged_suite_fails() {
        let report = run_suite(CheckScope::Op, 7, true);
        assert!(!report.all_passed());
    }
}
