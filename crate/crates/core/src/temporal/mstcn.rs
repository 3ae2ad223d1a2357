use rand::Rng;

use super::conv::{dilation_ladder, DilatedConv};
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Real, Var};
use crate::vlm::layers::Linear;

/// Prediction stage with paired dilations that shrink and grow across layers.
#[derive(Clone, Debug)]
pub struct PredictionStage {
    pub input: Linear,
    pub down: Vec<DilatedConv>,
    pub up: Vec<DilatedConv>,
    pub fuse: Vec<Linear>,
    pub output: Linear,
}

#[derive(Clone, Debug)]
pub struct ResidualLayer {
    pub conv: DilatedConv,
    pub mix: Linear,
}

/// Refinement stage over the previous stage's class probabilities.
#[derive(Clone, Debug)]
pub struct RefinementStage {
    pub input: Linear,
    pub layers: Vec<ResidualLayer>,
    pub output: Linear,
}

/// Multi-stage temporal convolutional network: one prediction stage and
/// `stages - 1` refinement stages, each emitting `[L, K]` logits.
#[derive(Clone, Debug)]
pub struct MsTcn {
    pub prediction: PredictionStage,
    pub refinements: Vec<RefinementStage>,
}

impl MsTcn {
    pub fn build<S: Real>(
        store: &mut ParamStore<S>,
        d_in: usize,
        hidden: usize,
        classes: usize,
        stages: usize,
        max_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dil = dilation_ladder(max_kernel);
        let n = dil.len();
        let prediction = PredictionStage {
            input: Linear::new(store, "tcn.0.in", d_in, hidden, rng)?,
            down: (0..n)
                .map(|i| DilatedConv::new(store, &format!("tcn.0.{i}.down"), 3, hidden, hidden, dil[n - 1 - i], rng))
                .collect::<Result<_>>()?,
            up: (0..n).map(|i| DilatedConv::new(store, &format!("tcn.0.{i}.up"), 3, hidden, hidden, dil[i], rng)).collect::<Result<_>>()?,
            fuse: (0..n).map(|i| Linear::new(store, &format!("tcn.0.{i}.fuse"), 2 * hidden, hidden, rng)).collect::<Result<_>>()?,
            output: Linear::new(store, "tcn.0.out", hidden, classes, rng)?,
        };
        let refinements = (1..stages)
            .map(|s| {
                Ok(RefinementStage {
                    input: Linear::new(store, &format!("tcn.{s}.in"), classes, hidden, rng)?,
                    layers: dil
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| {
                            Ok(ResidualLayer {
                                conv: DilatedConv::new(store, &format!("tcn.{s}.{i}.conv"), 3, hidden, hidden, d, rng)?,
                                mix: Linear::new(store, &format!("tcn.{s}.{i}.mix"), hidden, hidden, rng)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                    output: Linear::new(store, &format!("tcn.{s}.out"), hidden, classes, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MsTcn { prediction, refinements })
    }

    /// Per-stage logits for features `[L, D]`.
    pub fn forward<S: Real>(&self, g: &Graph<'_, S>, x: Var) -> Result<Vec<Var>> {
        let p = &self.prediction;
        let mut f = p.input.forward(g, x)?;
        for ((down, up), fuse) in p.down.iter().zip(&p.up).zip(&p.fuse) {
            let both = g.concat_cols(&[down.forward(g, f)?, up.forward(g, f)?])?;
            f = g.add(f, g.relu(fuse.forward(g, both)?)?)?;
        }
        let mut outs = vec![p.output.forward(g, f)?];
        for stage in &self.refinements {
            let prev = *outs.last().unwrap();
            let mut h = stage.input.forward(g, g.softmax(prev)?)?;
            for l in &stage.layers {
                let y = l.mix.forward(g, g.relu(l.conv.forward(g, h)?)?)?;
                h = g.add(h, y)?;
            }
            outs.push(stage.output.forward(g, h)?);
        }
        Ok(outs)
    }
}
