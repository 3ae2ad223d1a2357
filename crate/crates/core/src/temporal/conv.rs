use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

/// Same-padded dilated temporal convolution with bias.
#[derive(Clone, Debug)]
pub struct DilatedConv {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl DilatedConv {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = (1.0 / (k * c_in) as f64).sqrt();
        Ok(DilatedConv {
            w: store.add_normal(format!("{name}.w"), &[k, c_in, c_out], std, rng)?,
            b: store.add_zeros(format!("{name}.b"), &[c_out])?,
            dilation,
        })
    }

    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<Var> {
        g.add_row(g.conv1d(x, g.param(self.w), self.dilation)?, g.param(self.b))
    }
}

/// Dilations `1, 2, 4, ...` while a kernel-3 tap span `2d + 1` fits in `max_kernel`.
pub fn dilation_ladder(max_kernel: usize) -> Vec<usize> {
    let mut out = vec![1];
    while 2 * (2 * out.last().unwrap()) < max_kernel {
        out.push(2 * out.last().unwrap());
    }
    out
}
