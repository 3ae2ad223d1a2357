//! Phase segmentation metrics. All scores are percentages in `[0, 100]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::timeline::PhaseTimeline;

pub const OVERLAP_TAUS: [f64; 3] = [0.10, 0.25, 0.50];

fn check(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        bail!(Input, "prediction has {} frames, ground truth {}", pred.len(), gt.len());
    }
    if gt.is_empty() {
        bail!(Input, "empty label sequences");
    }
    Ok(())
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Frame-pooled accuracy over several videos.
pub fn acc_micro(videos: &[(&[usize], &[usize])]) -> Result<f64> {
    if videos.is_empty() {
        bail!(Input, "no videos");
    }
    let (mut hits, mut total) = (0, 0);
    for (p, g) in videos {
        check(p, g)?;
        hits += p.iter().zip(g.iter()).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    Ok(100.0 * hits as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseScores {
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    /// Mean over phases of each phase's harmonic mean of precision and recall.
    pub f1: f64,
    /// Harmonic mean of the averaged precision and recall.
    pub f1_of_means: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Macro-averaged frame-level scores over the phases present in `pred` or `gt`.
pub fn per_phase_metrics(pred: &[usize], gt: &[usize]) -> Result<PhaseScores> {
    check(pred, gt)?;
    let phases: BTreeSet<usize> = pred.iter().chain(gt).copied().collect();
    let (mut sp, mut sr, mut sj, mut sf) = (0.0, 0.0, 0.0, 0.0);
    for &c in &phases {
        let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            tp += (p == c && g == c) as usize;
            np += (p == c) as usize;
            ng += (g == c) as usize;
        }
        let p = if np > 0 { 100.0 * tp as f64 / np as f64 } else { 0.0 };
        let r = if ng > 0 { 100.0 * tp as f64 / ng as f64 } else { 0.0 };
        sp += p;
        sr += r;
        sj += 100.0 * tp as f64 / (np + ng - tp) as f64;
        sf += harmonic(p, r);
    }
    let n = phases.len() as f64;
    let (precision, recall) = (sp / n, sr / n);
    Ok(PhaseScores { precision, recall, jaccard: sj / n, f1: sf / n, f1_of_means: harmonic(precision, recall) })
}

/// Maximal runs `(label, start, end)` with `end` exclusive.
pub fn segments(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.0 == l => s.2 = i + 1,
            _ => out.push((l, i, i + 1)),
        }
    }
    out
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + (a[i - 1] != b[j - 1]) as usize;
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check(pred, gt)?;
    let p: Vec<usize> = segments(pred).iter().map(|s| s.0).collect();
    let g: Vec<usize> = segments(gt).iter().map(|s| s.0).collect();
    let d = levenshtein(&p, &g);
    Ok(100.0 * (1.0 - d as f64 / p.len().max(g.len()) as f64))
}

/// Segmental F1 at IoU threshold `tau` over explicit segment lists.
///
/// Each predicted segment takes its best-IoU unmatched ground-truth segment of
/// the same label; it is a true positive when that IoU is at least `tau`.
/// Segments are visited in temporal order, so list order does not matter.
pub fn overlap_f1_segments(pred: &[(usize, usize, usize)], gt: &[(usize, usize, usize)], tau: f64) -> f64 {
    let mut matched = vec![false; gt.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by_key(|&i| (pred[i].1, pred[i].2));
    let mut gt_order: Vec<usize> = (0..gt.len()).collect();
    gt_order.sort_by_key(|&j| (gt[j].1, gt[j].2));
    for i in order {
        let (lp, sp, ep) = pred[i];
        let mut best: Option<(f64, usize)> = None;
        for &j in &gt_order {
            let (lg, sg, eg) = gt[j];
            if lg != lp || matched[j] {
                continue;
            }
            let inter = ep.min(eg).saturating_sub(sp.max(sg));
            let union = ep.max(eg) - sp.min(sg);
            let iou = inter as f64 / union as f64;
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        match best {
            Some((iou, j)) if iou >= tau => {
                matched[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    let fn_ = matched.iter().filter(|m| !**m).count();
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return 100.0;
    }
    100.0 * 2.0 * tp as f64 / denom as f64
}

pub fn overlap_f1(pred: &[usize], gt: &[usize], tau: f64) -> Result<f64> {
    check(pred, gt)?;
    Ok(overlap_f1_segments(&segments(pred), &segments(gt), tau))
}

/// All per-video scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub frames: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub f1: f64,
    pub f1_of_means: f64,
    pub edit: f64,
    /// Overlap F1 at each of [`OVERLAP_TAUS`].
    pub overlap_f1: [f64; 3],
    pub avg_overlap_f1: f64,
}

impl VideoMetrics {
    pub fn compute(video_id: &str, pred: &[usize], gt: &[usize]) -> Result<Self> {
        let ph = per_phase_metrics(pred, gt)?;
        let mut overlap = [0.0; 3];
        for (o, &tau) in overlap.iter_mut().zip(&OVERLAP_TAUS) {
            *o = overlap_f1(pred, gt, tau)?;
        }
        Ok(VideoMetrics {
            video_id: video_id.to_string(),
            frames: gt.len(),
            accuracy: frame_accuracy(pred, gt)?,
            precision: ph.precision,
            recall: ph.recall,
            jaccard: ph.jaccard,
            f1: ph.f1,
            f1_of_means: ph.f1_of_means,
            edit: edit_score(pred, gt)?,
            overlap_f1: overlap,
            avg_overlap_f1: overlap.iter().sum::<f64>() / 3.0,
        })
    }

    fn values(&self) -> [f64; 11] {
        let o = self.overlap_f1;
        [self.accuracy, self.precision, self.recall, self.jaccard, self.f1, self.f1_of_means, self.edit, o[0], o[1], o[2], self.avg_overlap_f1]
    }
}

pub const METRIC_NAMES: [&str; 11] = ["accuracy", "precision", "recall", "jaccard", "f1", "f1_of_means", "edit", "f1@10", "f1@25", "f1@50", "avg_f1"];

/// Mean and population standard deviation of one metric over videos.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub videos: Vec<VideoMetrics>,
    /// Video-level mean and standard deviation, keyed by [`METRIC_NAMES`].
    pub aggregate: BTreeMap<String, Stat>,
    pub acc_micro: f64,
}

impl MetricReport {
    /// Score label sequences given as `(video_id, pred, gt)`.
    pub fn from_sequences(videos: &[(String, Vec<usize>, Vec<usize>)]) -> Result<Self> {
        if videos.is_empty() {
            bail!(Input, "no videos to evaluate");
        }
        let rows: Vec<VideoMetrics> = videos.iter().map(|(id, p, g)| VideoMetrics::compute(id, p, g)).collect::<Result<_>>()?;
        let pairs: Vec<(&[usize], &[usize])> = videos.iter().map(|(_, p, g)| (p.as_slice(), g.as_slice())).collect();
        let mut aggregate = BTreeMap::new();
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            let xs: Vec<f64> = rows.iter().map(|r| r.values()[k]).collect();
            aggregate.insert(name.to_string(), stat(&xs));
        }
        Ok(MetricReport { videos: rows, aggregate, acc_micro: acc_micro(&pairs)? })
    }

    pub fn mean(&self, name: &str) -> f64 {
        self.aggregate.get(name).map_or(f64::NAN, |s| s.mean)
    }

    /// One row per video plus `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("video,frames,{}\n", METRIC_NAMES.join(","));
        for v in &self.videos {
            let _ = write!(s, "{},{}", v.video_id, v.frames);
            v.values().iter().for_each(|x| {
                let _ = write!(s, ",{x:.4}");
            });
            s.push('\n');
        }
        let total: usize = self.videos.iter().map(|v| v.frames).sum();
        for (row, pick) in [("mean", 0), ("std", 1)] {
            let _ = write!(s, "{row},{total}");
            for name in METRIC_NAMES {
                let st = self.aggregate[name];
                let _ = write!(s, ",{:.4}", if pick == 0 { st.mean } else { st.std });
            }
            s.push('\n');
        }
        let _ = writeln!(s, "acc_micro,{total},{:.4}", self.acc_micro);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Bar chart of aggregate means with standard-deviation whiskers.
    pub fn to_svg(&self) -> String {
        let (w, h, pad, bar) = (60 * METRIC_NAMES.len() + 80, 320, 40.0, 36.0);
        let scale = |v: f64| (h as f64 - 2.0 * pad) * v.clamp(0.0, 100.0) / 100.0;
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"10\">\n");
        let base = h as f64 - pad;
        let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>", w as f64 - pad / 2.0);
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            let st = self.aggregate[*name];
            let x = pad + 10.0 + 60.0 * i as f64;
            let top = base - scale(st.mean);
            let _ = writeln!(s, "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{bar}\" height=\"{:.1}\" fill=\"#4c78a8\"/>", scale(st.mean));
            let cx = x + bar / 2.0;
            let (lo, hi) = (base - scale(st.mean - st.std), base - scale(st.mean + st.std));
            let _ = writeln!(s, "<line x1=\"{cx:.1}\" y1=\"{lo:.1}\" x2=\"{cx:.1}\" y2=\"{hi:.1}\" stroke=\"black\"/>");
            let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.1}</text>", top - 4.0, st.mean);
            let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{name}</text>", base + 14.0);
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Rasterize timelines at `fps` and score them. Every ground-truth video must
/// have a prediction; frames a prediction leaves uncovered count as errors.
pub fn evaluate(pred: &[PhaseTimeline], gt: &[PhaseTimeline], fps: f64) -> Result<MetricReport> {
    if !(fps > 0.0) {
        bail!(Config, "evaluation fps must be positive");
    }
    let mut names: BTreeMap<String, usize> = BTreeMap::new();
    for t in gt.iter().chain(pred) {
        for s in &t.segments {
            let n = names.len();
            names.entry(s.label.clone()).or_insert(n);
        }
    }
    let uncovered = names.len();
    let by_id: BTreeMap<&str, &PhaseTimeline> = pred.iter().map(|t| (t.video_id.as_str(), t)).collect();
    if by_id.len() != pred.len() {
        bail!(Input, "duplicate video id among predictions");
    }
    let mut seqs = Vec::with_capacity(gt.len());
    for g in gt {
        let Some(p) = by_id.get(g.video_id.as_str()) else {
            bail!(Input, "no prediction for video {}", g.video_id);
        };
        let n = g.frame_count(fps);
        let ids = |t: &PhaseTimeline| -> Vec<usize> { t.rasterize(fps, n).into_iter().map(|l| l.map_or(uncovered, |l| names[l])).collect() };
        seqs.push((g.video_id.clone(), ids(p), ids(g)));
    }
    if let Some(extra) = pred.iter().find(|p| !gt.iter().any(|g| g.video_id == p.video_id)) {
        bail!(Input, "prediction for unknown video {}", extra.video_id);
    }
    MetricReport::from_sequences(&seqs)
}
