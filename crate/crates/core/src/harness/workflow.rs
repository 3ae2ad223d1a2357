//! Stage-wise orchestration over a corpus directory.

use std::thread;

use super::config::RunConfig;
use crate::corpus::{prototype, Corpus};
use crate::error::{bail, Result};
use crate::lora;
use crate::metrics::MetricReport;
use crate::objectives::{train_stage1, CurveRow};
use crate::pipeline::data::{build_vocab, clip_labels, clip_samples};
use crate::pipeline::{extract_features, partition_video, zero_shot, ClipPartition, Stage1Bundle};
use crate::temporal::features::{self, FeatureSequence};
use crate::temporal::{train_temporal, TemporalModel, TemporalSample};
use crate::tensor::{ParamStore, Tensor};

/// Worker threads: `WL_THREADS` when set, otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("WL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving map over `items` on up to [`worker_count`] threads.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || items.iter().enumerate().skip(w).step_by(workers).map(|(i, x)| (i, f(x))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

/// Training and held-out ids: the last `test_videos` videos are held out.
pub fn split(corpus: &Corpus, test_videos: usize) -> Result<(Vec<String>, Vec<String>)> {
    let ids = corpus.ids();
    if test_videos >= ids.len() {
        bail!(Config, "cannot hold out {test_videos} of {} videos", ids.len());
    }
    let (a, b) = ids.split_at(ids.len() - test_videos);
    Ok((a.to_vec(), b.to_vec()))
}

/// Build a vocabulary over the training captions and pretrain stage 1 on all three objectives.
pub fn pretrain(corpus: &Corpus, train_ids: &[String], cfg: &RunConfig) -> Result<(Stage1Bundle, Vec<CurveRow>)> {
    let texts: Vec<&str> = corpus.manifest.iter().filter(|r| train_ids.contains(&r.video)).map(|r| r.text.as_str()).collect();
    let vocab = build_vocab(texts, &corpus.spec.class_names());
    let mut b = Stage1Bundle::init(&cfg.model, vocab, cfg.init_seed())?;
    let samples = clip_samples(corpus, train_ids, &b.vocab, cfg.corpus.clips_per_video, cfg.pretrain.seed)?;
    let prompts = b.prompts()?;
    let curve = train_stage1(&b.model, &mut b.store, &samples, &prompts, &cfg.pretrain)?;
    Ok((b, curve))
}

/// Attach adapters to a copy of `base` and train them on the clips of `ids`.
pub fn finetune(base: &Stage1Bundle, corpus: &Corpus, ids: &[String], cfg: &RunConfig) -> Result<(Stage1Bundle, Vec<CurveRow>)> {
    let mut b = base.clone();
    b.attach_lora(cfg.lora.rank, cfg.lora.alpha, cfg.lora.targets, cfg.lora.train.seed)?;
    let samples = clip_samples(corpus, ids, &b.vocab, cfg.corpus.clips_per_video, cfg.lora.train.seed)?;
    let prompts = b.prompts()?;
    let curve = lora::finetune_lora(&b.model, &mut b.store, &samples, &prompts, &cfg.lora.train)?;
    Ok((b, curve))
}

/// Stage-1 features and ground-truth clip labels of one video.
#[derive(Clone, Debug)]
pub struct VideoFeatures {
    pub id: String,
    pub partition: ClipPartition,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl VideoFeatures {
    pub fn sample(&self) -> TemporalSample {
        TemporalSample { features: self.features.clone(), labels: self.labels.clone() }
    }
}

pub fn extract(b: &Stage1Bundle, corpus: &Corpus, ids: &[String], clip_s: f64) -> Result<Vec<VideoFeatures>> {
    let names = corpus.spec.class_names();
    par_map(ids, |id| {
        let video = corpus.load_video(id)?;
        let partition = partition_video(&video, clip_s, corpus.spec.fps)?;
        let features = extract_features(b, &video, &partition)?;
        let labels = clip_labels(corpus.timeline(id)?, &names, partition.len(), clip_s)?;
        Ok(VideoFeatures { id: id.clone(), partition, features, labels })
    })
}

/// Fresh stage-2 model of `cfg.temporal` trained on `train`; returns the epoch losses too.
pub fn train_stage2(cfg: &RunConfig, names: &[String], train: &[TemporalSample]) -> Result<(TemporalModel, ParamStore<f32>, Vec<f64>)> {
    let Some(first) = train.first() else {
        bail!(Config, "no training videos for stage 2");
    };
    let tcfg = crate::temporal::TemporalConfig {
        feature_dim: first.features.shape()[1],
        num_classes: names.len(),
        class_names: names.to_vec(),
        ..cfg.temporal.clone()
    };
    let (m, mut store) = TemporalModel::init(&tcfg, cfg.temporal_seed())?;
    let hist = train_temporal(&m, &mut store, train, &cfg.temporal_train)?;
    Ok((m, store, hist))
}

/// Final-stage predictions of `videos` scored against their labels.
pub fn evaluate_stage2(m: &TemporalModel, store: &ParamStore<f32>, videos: &[VideoFeatures]) -> Result<MetricReport> {
    let rows = videos
        .iter()
        .map(|v| {
            let pred = m.predict(store, &v.features)?.pop().expect("at least one stage");
            Ok((v.id.clone(), pred.labels, v.labels.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_sequences(&rows)
}

/// `(label, prototype sentence)` for every class of the corpus.
pub fn prototypes(corpus: &Corpus) -> Vec<(String, String)> {
    corpus.spec.class_names().into_iter().map(|n| (n.clone(), prototype(&n))).collect()
}

/// Zero-shot clip labels of `ids` scored against the ground truth.
pub fn evaluate_zero_shot(b: &Stage1Bundle, corpus: &Corpus, ids: &[String], clip_s: f64) -> Result<MetricReport> {
    let classes = prototypes(corpus);
    let names = corpus.spec.class_names();
    let rows = par_map(ids, |id| {
        let video = corpus.load_video(id)?;
        let part = partition_video(&video, clip_s, corpus.spec.fps)?;
        let (_, labels) = zero_shot(b, id, &video, &part, &classes)?;
        let gt = clip_labels(corpus.timeline(id)?, &names, part.len(), clip_s)?;
        Ok((id.clone(), labels, gt))
    })?;
    MetricReport::from_sequences(&rows)
}

/// Index written next to a directory of feature files.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureIndex {
    pub classes: Vec<String>,
    pub clip_s: f64,
    pub fps: f64,
    pub videos: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub duration_s: f64,
    pub labels: Vec<usize>,
}

pub const FEATURE_INDEX: &str = "index.json";

/// Write one `.wlft` file per video plus [`FEATURE_INDEX`]; returns the written paths.
pub fn save_features(dir: &std::path::Path, classes: &[String], videos: &[VideoFeatures]) -> Result<Vec<std::path::PathBuf>> {
    let Some(first) = videos.first() else {
        bail!(Input, "no videos to save");
    };
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::with_capacity(videos.len() + 1);
    for v in videos {
        let seq = FeatureSequence { video_id: v.id.clone(), features: v.features.clone() };
        out.push(features::save(dir, &seq)?);
    }
    let index = FeatureIndex {
        classes: classes.to_vec(),
        clip_s: first.partition.clip_s,
        fps: first.partition.fps,
        videos: videos.iter().map(|v| IndexEntry { id: v.id.clone(), duration_s: v.partition.duration_s, labels: v.labels.clone() }).collect(),
    };
    let path = dir.join(FEATURE_INDEX);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?)?;
    out.push(path);
    Ok(out)
}

pub fn load_features(dir: &std::path::Path) -> Result<(FeatureIndex, Vec<VideoFeatures>)> {
    let index: FeatureIndex = serde_json::from_str(&std::fs::read_to_string(dir.join(FEATURE_INDEX))?)?;
    let videos = index
        .videos
        .iter()
        .map(|e| {
            let seq = features::load(&dir.join(format!("{}.wlft", e.id)))?;
            let partition = crate::pipeline::partition(e.duration_s, index.clip_s, index.fps)?;
            if seq.len() != partition.len() || e.labels.len() != partition.len() {
                bail!(Input, "{}: {} features and {} labels for {} clips", e.id, seq.len(), e.labels.len(), partition.len());
            }
            Ok(VideoFeatures { id: e.id.clone(), partition, features: seq.features, labels: e.labels.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, videos))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order_and_propagates_errors() {
        let xs: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&xs, |&x| Ok(x * 2)).unwrap(), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        let r = par_map(&xs, |&x| if x == 20 { Err(crate::Error::Input("boom".into())) } else { Ok(x) });
        assert!(matches!(r, Err(crate::Error::Input(_))));
    }

    #[test]
    fn feature_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let partition = crate::pipeline::partition(2.5, 1.0, 4.0).unwrap();
        let v = VideoFeatures { id: "a".into(), features: Tensor::from_fn(&[3, 2], |k| k as f32), labels: vec![0, 1, 1], partition };
        let names = vec!["x".to_string(), "y".to_string()];
        assert_eq!(save_features(dir.path(), &names, std::slice::from_ref(&v)).unwrap().len(), 2);
        let (index, back) = load_features(dir.path()).unwrap();
        assert_eq!(index.classes, names);
        assert_eq!(back[0].features, v.features);
        assert_eq!(back[0].partition, v.partition);
    }
}
