use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::workflow::{evaluate_stage2, train_stage2, VideoFeatures};
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub videos: usize,
    pub accuracy: f64,
    pub edit: f64,
    pub f1_50: f64,
    pub acc_micro: f64,
}

/// Size of the training subset for `fraction` of `n` videos (rounded up).
pub fn subset_size(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(Config, "fraction {fraction} outside (0, 1]");
    }
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    if k == 0 {
        bail!(Config, "fraction {fraction} of {n} videos selects none");
    }
    Ok(k.min(n))
}

/// Retrain stage 2 on nested seeded subsets of `train` and score each on `test`.
///
/// Subsets are prefixes of one seeded permutation, restored to corpus order,
/// so fraction 1.0 trains on exactly the full set.
pub fn ablate_subset(
    train: &[VideoFeatures],
    test: &[VideoFeatures],
    names: &[String],
    fractions: &[f64],
    cfg: &RunConfig,
) -> Result<Vec<AblationRow>> {
    if fractions.is_empty() {
        bail!(Config, "no fractions given");
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(cfg.seed));
    fractions
        .iter()
        .map(|&fraction| {
            let k = subset_size(fraction, train.len())?;
            let mut pick = order[..k].to_vec();
            pick.sort_unstable();
            let samples: Vec<_> = pick.iter().map(|&i| train[i].sample()).collect();
            let (m, store, _) = train_stage2(cfg, names, &samples)?;
            let r = evaluate_stage2(&m, &store, test)?;
            log::info!("fraction {fraction}: {k} videos, accuracy {:.2}", r.mean("accuracy"));
            Ok(AblationRow {
                fraction,
                videos: k,
                accuracy: r.mean("accuracy"),
                edit: r.mean("edit"),
                f1_50: r.mean("f1@50"),
                acc_micro: r.acc_micro,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("fraction,videos,accuracy,edit,f1@50,acc_micro\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.4},{:.4},{:.4},{:.4}", r.fraction, r.videos, r.accuracy, r.edit, r.f1_50, r.acc_micro);
    }
    s
}

/// Accuracy per fraction as a bar chart.
pub fn ablation_svg(rows: &[AblationRow]) -> String {
    let mut s = String::from("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"420\" height=\"240\">\n");
    let w = 360.0 / rows.len().max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let h = 180.0 * r.accuracy / 100.0;
        let x = 40.0 + i as f64 * w;
        let _ = writeln!(s, "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"#4c72b0\"/>", x + 4.0, 200.0 - h, w - 8.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"220\" font-size=\"11\">{}</text>", x + 4.0, r.fraction);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{:.1}</text>", x + 4.0, 195.0 - h, r.accuracy);
    }
    s.push_str("</svg>\n");
    s
}
