use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

/// Token pooling from stage-1 decoder states to one stage-2 feature vector.
///
/// A kernel-2, stride-2 convolution over the token axis (the last token is
/// repeated when the count is odd), the mean over windows, then a 1×1
/// convolution to `D` channels and ReLU.
#[derive(Clone, Debug)]
pub struct Bridge {
    pub w0: ParamId,
    pub w1: ParamId,
    pub b_pool: ParamId,
    pub proj: ParamId,
    pub b_proj: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Bridge {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = (1.0 / d_in as f64).sqrt();
        Ok(Bridge {
            w0: store.add_normal(format!("{name}.pool.w0"), &[d_in, d_in], std, rng)?,
            w1: store.add_normal(format!("{name}.pool.w1"), &[d_in, d_in], std, rng)?,
            b_pool: store.add_zeros(format!("{name}.pool.b"), &[d_in])?,
            proj: store.add_normal(format!("{name}.proj.w"), &[d_in, d_out], std, rng)?,
            b_proj: store.add_zeros(format!("{name}.proj.b"), &[d_out])?,
            d_in,
            d_out,
        })
    }

    /// `[N, d_in]` tokens to a `[d_out]` feature.
    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, tokens: Var) -> Result<Var> {
        let n = g.shape(tokens)[0];
        let windows = n.div_ceil(2);
        let even: Vec<usize> = (0..windows).map(|i| 2 * i).collect();
        let odd: Vec<usize> = (0..windows).map(|i| (2 * i + 1).min(n - 1)).collect();
        let a = g.matmul(g.gather_rows(tokens, &even)?, g.param(self.w0))?;
        let b = g.matmul(g.gather_rows(tokens, &odd)?, g.param(self.w1))?;
        let pooled = g.add_row(g.add(a, b)?, g.param(self.b_pool))?;
        let mean = g.scale(g.sum_rows(pooled)?, S::lit(1.0 / windows as f64))?;
        let mean = g.reshape(mean, &[1, self.d_in])?;
        let y = g.add_row(g.matmul(mean, g.param(self.proj))?, g.param(self.b_proj))?;
        g.reshape(g.relu(y)?, &[self.d_out])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn output_width_and_constant_invariance() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let br = Bridge::new(&mut store, "bridge", 6, 64, &mut rng).unwrap();
        let row: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut outs = Vec::new();
        for n in [1, 2, 5, 9] {
            let g = Graph::inference(&store);
            let x = g.input(Tensor::from_fn(&[n, 6], |k| row[k % 6])).unwrap();
            let y = br.forward(&g, x).unwrap();
            let v = g.to_tensor(y);
            assert_eq!(v.shape(), &[64]);
            assert!(v.data().iter().all(|&x| x >= 0.0));
            outs.push(v);
        }
        for o in &outs[1..] {
            assert!(o.max_abs_diff(&outs[0]) < 1e-12);
        }
    }
}
