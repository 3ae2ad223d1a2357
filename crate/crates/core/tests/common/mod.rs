#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use wl_core::lora;
use wl_core::objectives::{Prompts, Sample, TrainConfig};
use wl_core::tensor::{Graph, ParamStore, Tensor};
use wl_core::vlm::model::random_clip;
use wl_core::vlm::{FrameGrid, LoraTargets, ModelConfig, Stage1Model};

/// Stage-1 config with widths up to 64 drawn from `rng`.
pub fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let c = heads * [2, 4, 8, 16][rng.gen_range(0..4)];
    let c_v = c.min(64);
    let patch = [4, 8][rng.gen_range(0..2)];
    ModelConfig {
        frame_h: patch * rng.gen_range(1..3),
        frame_w: patch * rng.gen_range(1..3),
        patch,
        n_frames: rng.gen_range(1..4),
        c_v,
        c_t: c_v,
        video_layers: rng.gen_range(1..3),
        text_layers: rng.gen_range(1..3),
        heads,
        ffn_dim: rng.gen_range(4..32),
        vocab_size: rng.gen_range(12..30),
        max_text_len: 10,
        embed_dim: rng.gen_range(2..16),
        feature_dim: 8,
        ..ModelConfig::default()
    }
}

/// Causal decoder logits of `ids` over the encoded clip, computed in one graph.
pub fn outputs(m: &Stage1Model, store: &ParamStore<f32>, clip: &FrameGrid, ids: &[usize]) -> Tensor<f32> {
    let g = Graph::inference(store);
    let v = m.encode_video(&g, clip).unwrap();
    let l = m.decode(&g, ids, v, true).unwrap();
    g.to_tensor(l)
}

#[derive(Debug)]
pub struct LoraTrial {
    pub zero_init_diff: f64,
    pub count_matches: bool,
    pub freeze_ok: bool,
    pub disable_exact: bool,
    pub merge_diff: f64,
    pub double_merge_rejected: bool,
}

impl LoraTrial {
    pub fn passes(&self) -> bool {
        self.zero_init_diff <= 1e-6
            && self.count_matches
            && self.freeze_ok
            && self.disable_exact
            && self.merge_diff <= 1e-5
            && self.double_merge_rejected
    }
}

/// Attach, fine-tune briefly, disable, re-enable and merge adapters on a random model.
pub fn lora_trial(seed: u64) -> LoraTrial {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let cfg = random_config(&mut rng);
    let (mut m, mut store) = Stage1Model::init(&cfg, seed).unwrap();
    let clip = random_clip(&cfg, 3, &mut rng);
    let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(5..cfg.vocab_size)).collect();
    let base = outputs(&m, &store, &clip, &ids);

    let rank = rng.gen_range(1..=8.min(cfg.c_v));
    let expected: usize = 2 * (cfg.video_layers + 2 * cfg.text_layers) * rank * 2 * cfg.c_v;
    let added = lora::attach(&mut m, &mut store, rank, None, LoraTargets::default(), &mut rng).unwrap();
    let count_matches = added == expected && lora::adapter_count(&m) == expected && store.trainable_count() == expected;
    let zero_init_diff = outputs(&m, &store, &clip, &ids).max_abs_diff(&base);

    let digest = lora::base_digest(&store);
    let samples: Vec<Sample> = (0..2)
        .map(|_| Sample { clip: random_clip(&cfg, 2, &mut rng), caption: (0..3).map(|_| rng.gen_range(5..cfg.vocab_size)).collect() })
        .collect();
    let prompts = Prompts { caption: vec![5], align: vec![6] };
    let tc = TrainConfig { epochs: 2, batch_size: 2, seed, ..TrainConfig::lora() };
    lora::finetune_lora(&m, &mut store, &samples, &prompts, &tc).unwrap();
    let freeze_ok = lora::base_digest(&store) == digest;

    lora::set_enabled(&mut m, false);
    let disable_exact = outputs(&m, &store, &clip, &ids) == base;
    lora::set_enabled(&mut m, true);

    let b_ids: Vec<_> = m.adapted_linears().iter().map(|l| l.lora.as_ref().unwrap().b).collect();
    for id in b_ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::from_fn(&shape, |_| rng.gen_range(-0.1..0.1))).unwrap();
    }
    let adapted = outputs(&m, &store, &clip, &ids);
    lora::merge(&mut m, &mut store).unwrap();
    let merge_diff = outputs(&m, &store, &clip, &ids).max_abs_diff(&adapted);
    let double_merge_rejected = matches!(lora::merge(&mut m, &mut store), Err(wl_core::Error::State(_)));
    LoraTrial { zero_init_diff, count_matches, freeze_ok, disable_exact, merge_diff, double_merge_rejected }
}

/// Independent scorer: frame sets, full-matrix edit distance and set-based IoU.
pub mod oracle {
    use std::collections::BTreeSet;

    pub fn accuracy(p: &[usize], g: &[usize]) -> f64 {
        let mut hits = 0;
        for i in 0..g.len() {
            if p[i] == g[i] {
                hits += 1;
            }
        }
        100.0 * hits as f64 / g.len() as f64
    }

    fn frames_of(x: &[usize], c: usize) -> BTreeSet<usize> {
        (0..x.len()).filter(|&i| x[i] == c).collect()
    }

    /// (precision, recall, jaccard, mean per-phase f1)
    pub fn phase_scores(p: &[usize], g: &[usize]) -> (f64, f64, f64, f64) {
        let classes: BTreeSet<usize> = p.iter().chain(g.iter()).copied().collect();
        let (mut sp, mut sr, mut sj, mut sf) = (0.0, 0.0, 0.0, 0.0);
        for &c in &classes {
            let ps = frames_of(p, c);
            let gs = frames_of(g, c);
            let inter = ps.intersection(&gs).count() as f64;
            let union = ps.union(&gs).count() as f64;
            let prec = if ps.is_empty() { 0.0 } else { 100.0 * inter / ps.len() as f64 };
            let rec = if gs.is_empty() { 0.0 } else { 100.0 * inter / gs.len() as f64 };
            sp += prec;
            sr += rec;
            sj += 100.0 * inter / union;
            sf += if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
        }
        let n = classes.len() as f64;
        (sp / n, sr / n, sj / n, sf / n)
    }

    /// `(label, start, end)` runs found by comparing neighbours.
    pub fn runs(x: &[usize]) -> Vec<(usize, usize, usize)> {
        let mut starts = vec![0];
        for i in 1..x.len() {
            if x[i] != x[i - 1] {
                starts.push(i);
            }
        }
        let mut out = Vec::new();
        for (k, &s) in starts.iter().enumerate() {
            let e = if k + 1 < starts.len() { starts[k + 1] } else { x.len() };
            out.push((x[s], s, e));
        }
        out
    }

    pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = *[d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost].iter().min().unwrap();
            }
        }
        d[a.len()][b.len()]
    }

    pub fn edit(p: &[usize], g: &[usize]) -> f64 {
        let a: Vec<usize> = runs(p).iter().map(|r| r.0).collect();
        let b: Vec<usize> = runs(g).iter().map(|r| r.0).collect();
        100.0 * (1.0 - levenshtein(&a, &b) as f64 / a.len().max(b.len()) as f64)
    }

    pub fn overlap_f1(p: &[usize], g: &[usize], tau: f64) -> f64 {
        let ps = runs(p);
        let gs = runs(g);
        let mut used = vec![false; gs.len()];
        let mut tp = 0;
        for &(lp, s, e) in &ps {
            let pset: BTreeSet<usize> = (s..e).collect();
            let mut best = -1.0;
            let mut best_j = None;
            for (j, &(lg, s2, e2)) in gs.iter().enumerate() {
                if lg != lp || used[j] {
                    continue;
                }
                let gset: BTreeSet<usize> = (s2..e2).collect();
                let iou = pset.intersection(&gset).count() as f64 / pset.union(&gset).count() as f64;
                if iou > best {
                    best = iou;
                    best_j = Some(j);
                }
            }
            if let Some(j) = best_j {
                if best >= tau {
                    used[j] = true;
                    tp += 1;
                }
            }
        }
        let fp = ps.len() - tp;
        let fn_ = gs.len() - tp;
        100.0 * (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }

    pub fn micro(videos: &[(Vec<usize>, Vec<usize>)]) -> f64 {
        let hits: usize = videos.iter().map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count()).sum();
        let total: usize = videos.iter().map(|(_, g)| g.len()).sum();
        100.0 * hits as f64 / total as f64
    }
}

/// Random `(pred, gt)` label sequences with piecewise-constant structure.
pub fn random_pair(rng: &mut impl Rng, max_len: usize, max_k: usize) -> (Vec<usize>, Vec<usize>) {
    let l = rng.gen_range(1..=max_len);
    let k = rng.gen_range(1..=max_k);
    let seq = |rng: &mut dyn rand::RngCore| {
        let mut out = Vec::with_capacity(l);
        let mut c = rng.gen_range(0..k);
        for _ in 0..l {
            if rng.gen_bool(0.15) {
                c = rng.gen_range(0..k);
            }
            out.push(c);
        }
        out
    };
    let g = seq(rng);
    let p = if rng.gen_bool(0.1) { g.clone() } else { seq(rng) };
    (p, g)
}

/// Compare the library scorer with the oracle on one pair; returns the first mismatch.
pub fn metric_mismatch(p: &[usize], g: &[usize]) -> Option<String> {
    use wl_core::metrics::*;
    let v = VideoMetrics::compute("x", p, g).unwrap();
    let (op, or, oj, of) = oracle::phase_scores(p, g);
    let mut checks = vec![
        ("accuracy", v.accuracy, oracle::accuracy(p, g)),
        ("precision", v.precision, op),
        ("recall", v.recall, or),
        ("jaccard", v.jaccard, oj),
        ("f1", v.f1, of),
        ("edit", v.edit, oracle::edit(p, g)),
    ];
    for (k, tau) in OVERLAP_TAUS.iter().enumerate() {
        checks.push(("overlap_f1", v.overlap_f1[k], oracle::overlap_f1(p, g, *tau)));
    }
    checks.into_iter().find(|(_, a, b)| a != b).map(|(n, a, b)| format!("{n}: {a} vs oracle {b} for pred {p:?} gt {g:?}"))
}

/// Largest empty rectangle by enumerating every rectangle whose edges lie on box edges or frame borders.
pub fn exhaustive_crop(w: usize, h: usize, boxes: &[wl_core::corpus::filters::TextBox]) -> usize {
    use wl_core::corpus::filters::TextBox;
    let mut xs: Vec<usize> = vec![0, w];
    let mut ys: Vec<usize> = vec![0, h];
    for b in boxes {
        xs.extend([b.x0.min(w), b.x1.min(w)]);
        ys.extend([b.y0.min(h), b.y1.min(h)]);
    }
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut best = 0;
    for (i, &x0) in xs.iter().enumerate() {
        for &x1 in &xs[i + 1..] {
            for (j, &y0) in ys.iter().enumerate() {
                for &y1 in &ys[j + 1..] {
                    let r = TextBox::new(x0, y0, x1, y1);
                    if r.area() > best && boxes.iter().all(|b| !b.intersects(&r)) {
                        best = r.area();
                    }
                }
            }
        }
    }
    best
}

/// Up to `max_boxes` random boxes inside a `size`×`size` frame.
pub fn random_boxes(rng: &mut impl Rng, size: usize, max_boxes: usize) -> Vec<wl_core::corpus::filters::TextBox> {
    let n = rng.gen_range(1..=max_boxes);
    (0..n)
        .map(|_| {
            let (bw, bh) = (rng.gen_range(2..size / 3), rng.gen_range(2..size / 3));
            let (x0, y0) = (rng.gen_range(0..size - bw), rng.gen_range(0..size - bh));
            wl_core::corpus::filters::TextBox::new(x0, y0, x0 + bw, y0 + bh)
        })
        .collect()
}
