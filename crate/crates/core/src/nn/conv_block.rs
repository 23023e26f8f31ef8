//! DoubleConv: two conv3x3 -> norm -> ReLU stages, spatial extent preserved.

use super::ln_channels;
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;

pub struct DoubleConvVars {
    pub w1: Var,
    pub b1: Var,
    pub n1_gamma: Var,
    pub n1_beta: Var,
    pub w2: Var,
    pub b2: Var,
    pub n2_gamma: Var,
    pub n2_beta: Var,
}

pub struct DoubleConvIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub n1_gamma: ParamId,
    pub n1_beta: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub n2_gamma: ParamId,
    pub n2_beta: ParamId,
}

impl DoubleConvIds {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let lim1 = 1.0 / ((c_in * 9) as f64).sqrt();
        let lim2 = 1.0 / ((c_out * 9) as f64).sqrt();
        DoubleConvIds {
            w1: store.add(
                format!("{prefix}.conv1.w"),
                Tensor::rand_uniform(&[c_out, c_in, 3, 3], -lim1, lim1, rng),
            ),
            b1: store.add(format!("{prefix}.conv1.b"), Tensor::zeros(&[c_out])),
            n1_gamma: store.add(format!("{prefix}.norm1.g"), Tensor::full(&[c_out], T::ONE)),
            n1_beta: store.add(format!("{prefix}.norm1.b"), Tensor::zeros(&[c_out])),
            w2: store.add(
                format!("{prefix}.conv2.w"),
                Tensor::rand_uniform(&[c_out, c_out, 3, 3], -lim2, lim2, rng),
            ),
            b2: store.add(format!("{prefix}.conv2.b"), Tensor::zeros(&[c_out])),
            n2_gamma: store.add(format!("{prefix}.norm2.g"), Tensor::full(&[c_out], T::ONE)),
            n2_beta: store.add(format!("{prefix}.norm2.b"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn bind(&self, b: &Bound) -> DoubleConvVars {
        DoubleConvVars {
            w1: b.var(self.w1),
            b1: b.var(self.b1),
            n1_gamma: b.var(self.n1_gamma),
            n1_beta: b.var(self.n1_beta),
            w2: b.var(self.w2),
            b2: b.var(self.b2),
            n2_gamma: b.var(self.n2_gamma),
            n2_beta: b.var(self.n2_beta),
        }
    }
}

pub fn double_conv<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &DoubleConvVars) -> Result<Var> {
    let y = g.conv2d(x, vars.w1, vars.b1, 1, 1)?;
    let y = ln_channels(g, y, vars.n1_gamma, vars.n1_beta)?;
    let y = g.relu(y);
    let y = g.conv2d(y, vars.w2, vars.b2, 1, 1)?;
    let y = ln_channels(g, y, vars.n2_gamma, vars.n2_beta)?;
    Ok(g.relu(y))
}

pub(crate) fn gradcheck_double_conv(rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    use crate::check::{finite_diff_check, DEFAULT_STEP};
    let (c_in, c_out) = (2usize, 3usize);
    let x = Tensor::<f64>::rand_uniform(&[1, c_in, 4, 4], -1.0, 1.0, rng);
    let tensors: Vec<Tensor<f64>> = vec![
        Tensor::rand_uniform(&[c_out, c_in, 3, 3], -0.5, 0.5, rng),
        Tensor::rand_uniform(&[c_out], -0.3, 0.3, rng),
        Tensor::rand_uniform(&[c_out], 0.5, 1.5, rng),
        Tensor::rand_uniform(&[c_out], -0.3, 0.3, rng),
        Tensor::rand_uniform(&[c_out, c_out, 3, 3], -0.5, 0.5, rng),
        Tensor::rand_uniform(&[c_out], -0.3, 0.3, rng),
        Tensor::rand_uniform(&[c_out], 0.5, 1.5, rng),
        Tensor::rand_uniform(&[c_out], -0.3, 0.3, rng),
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
                let vars = DoubleConvVars {
                    w1: vs[0],
                    b1: vs[1],
                    n1_gamma: vs[2],
                    n1_beta: vs[3],
                    w2: vs[4],
                    b2: vs[5],
                    n2_gamma: vs[6],
                    n2_beta: vs[7],
                };
                let y = double_conv(g, xv, &vars)?;
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
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(g: &mut Graph<f64>, c_in: usize, c_out: usize, seed: u64, zero: bool) -> DoubleConvVars {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = DoubleConvIds::init(&mut store, "dc", c_in, c_out, &mut rng);
        if zero {
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.get(id).shape.clone();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let bound = store.bind(g, false);
        ids.bind(&bound)
    }

    #[test]
    fn preserves_spatial_extent() {
        for (h, w) in [(1usize, 1usize), (3, 5), (8, 8)] {
            let mut g = Graph::<f64>::new();
            let vars = build(&mut g, 2, 4, 1, false);
            let x = g.constant(Tensor::from_fn(&[1, 2, h, w], |i| (i as f64 * 0.3).sin()));
            let y = double_conv(&mut g, x, &vars).unwrap();
            assert_eq!(g.shape(y), &[1, 4, h, w]);
        }
    }

    #[test]
    fn all_zero_weights_give_zero_output() {
        let mut g = Graph::<f64>::new();
        let vars = build(&mut g, 2, 4, 2, true);
        let x = g.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64));
        let y = double_conv(&mut g, x, &vars).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }
}
