use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::corpus::{prototype, Corpus};
use crate::error::{bail, Result};
use crate::objectives::Sample;
use crate::timeline::PhaseTimeline;
use crate::vlm::model::{ALIGN_PROMPT, CAPTION_PROMPT};
use crate::vlm::Vocabulary;

/// Vocabulary over the prompts, the prototype sentences of `classes` and `texts`.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, classes: &[String]) -> Vocabulary {
    let mut all: Vec<String> = vec![CAPTION_PROMPT.to_string(), ALIGN_PROMPT.to_string()];
    all.extend(classes.iter().map(|c| prototype(c)));
    all.extend(texts.into_iter().map(str::to_string));
    Vocabulary::build(all.iter().map(String::as_str))
}

/// Paired clip/caption samples from the manifest records of `ids`.
///
/// With `per_video`, a seeded random subset of that many clips is kept per video.
pub fn clip_samples(corpus: &Corpus, ids: &[String], vocab: &Vocabulary, per_video: Option<usize>, seed: u64) -> Result<Vec<Sample>> {
    let fps = corpus.spec.fps;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut out = Vec::new();
    for id in ids {
        let video = corpus.load_video(id)?;
        let mut records: Vec<_> = corpus.manifest.iter().filter(|r| r.video == *id).collect();
        if records.is_empty() {
            bail!(Input, "manifest has no clips for {id}");
        }
        if let Some(n) = per_video {
            records.shuffle(&mut rng);
            records.truncate(n);
            records.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        }
        for r in records {
            let (s, e) = ((r.start_s * fps).round() as usize, (r.end_s * fps).round() as usize);
            out.push(Sample { clip: video.slice(s, e.min(video.frames()))?, caption: vocab.encode(&r.text) });
        }
    }
    Ok(out)
}

/// Class id of each of `n` clips of `clip_s` seconds, read at the clip centres.
pub fn clip_labels(timeline: &PhaseTimeline, names: &[String], n: usize, clip_s: f64) -> Result<Vec<usize>> {
    timeline
        .rasterize(1.0 / clip_s, n)
        .into_iter()
        .enumerate()
        .map(|(i, l)| match l.and_then(|l| names.iter().position(|n| n == l)) {
            Some(c) => Ok(c),
            None => bail!(Input, "{}: clip {i} has label {l:?} outside {names:?}", timeline.video_id),
        })
        .collect()
}
