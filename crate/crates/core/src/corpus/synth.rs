//! Procedurally generated surgical-workflow corpus.
//!
//! Every phase renders a moving shape of its own colour over a tinted
//! background; idle gaps show a dim noisy frame. Durations are whole seconds
//! so one-second clips never straddle a phase boundary.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::text::{project_labels, read_manifest, write_manifest, LabelRecord, ManifestRecord, Template};
use crate::error::{bail, Result};
use crate::timeline::{self, PhaseTimeline, Segment};
use crate::vlm::FrameGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Bar,
    Ring,
    Cross,
}

impl Shape {
    fn covers(self, dx: f32, dy: f32) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        let d2 = dx * dx + dy * dy;
        match self {
            Shape::Square => ax <= 5.0 && ay <= 5.0,
            Shape::Disc => d2 <= 36.0,
            Shape::Bar => ax <= 10.0 && ay <= 2.0,
            Shape::Ring => (16.0..=49.0).contains(&d2),
            Shape::Cross => (ax <= 1.0 && ay <= 6.0) || (ay <= 1.0 && ax <= 6.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePattern {
    pub name: String,
    pub tool: String,
    pub color: [f32; 3],
    pub shape: Shape,
    /// Pixels per frame.
    pub velocity: [f32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub phases: Vec<PhasePattern>,
    pub idle_label: String,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of phase durations in seconds.
    pub phase_s: [usize; 2],
    pub idle_s: [usize; 2],
    /// Chance of an idle gap before each phase and after the last one.
    pub idle_prob: f64,
    pub noise: f32,
    /// Chance that a phase clip is captioned with the phase-only template.
    pub phase_only_prob: f64,
    /// Rotate colour channels (r, g, b) → (g, b, r): the shifted target domain.
    pub remap: bool,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let p =
            |name: &str, tool: &str, color: [f32; 3], shape, velocity| PhasePattern { name: name.into(), tool: tool.into(), color, shape, velocity };
        SyntheticSpec {
            phases: vec![
                p("incision", "keratome", [1.0, 0.2, 0.2], Shape::Square, [1.0, 0.0]),
                p("capsulorhexis", "cystotome", [0.2, 1.0, 0.2], Shape::Disc, [0.0, 1.0]),
                p("phacoemulsification", "handpiece", [0.2, 0.2, 1.0], Shape::Bar, [-1.0, 1.0]),
                p("irrigation", "cannula", [1.0, 1.0, 0.2], Shape::Ring, [1.0, 1.0]),
                p("implantation", "injector", [0.2, 1.0, 1.0], Shape::Cross, [-1.0, 0.0]),
            ],
            idle_label: "idle".into(),
            fps: 5.0,
            height: 32,
            width: 32,
            phase_s: [6, 12],
            idle_s: [2, 4],
            idle_prob: 0.5,
            noise: 0.05,
            phase_only_prob: 0.3,
            remap: false,
            id_prefix: "vid".into(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            bail!(Config, "synthetic spec needs at least one phase");
        }
        let mut names: Vec<&str> = self.phases.iter().map(|p| p.name.as_str()).collect();
        names.push(&self.idle_label);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            bail!(Config, "phase names must be distinct from each other and from the idle label");
        }
        let distinct = self
            .phases
            .iter()
            .enumerate()
            .all(|(i, a)| self.phases[..i].iter().all(|b| a.color != b.color || a.shape != b.shape || a.velocity != b.velocity));
        if !distinct {
            bail!(Config, "phase patterns must be distinct");
        }
        if !(self.fps > 0.0 && self.fps.fract() == 0.0) {
            bail!(Config, "fps must be a positive integer");
        }
        if self.height == 0 || self.width == 0 {
            bail!(Config, "frame size must be positive");
        }
        if self.phase_s[0] == 0 || self.phase_s[0] > self.phase_s[1] || self.idle_s[0] == 0 || self.idle_s[0] > self.idle_s[1] {
            bail!(Config, "duration ranges must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.idle_prob) || !(0.0..=1.0).contains(&self.phase_only_prob) {
            bail!(Config, "probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    /// Class names in label-id order: the phases, then idle.
    pub fn class_names(&self) -> Vec<String> {
        self.phases.iter().map(|p| p.name.clone()).chain([self.idle_label.clone()]).collect()
    }

    fn frames_per_second(&self) -> usize {
        self.fps as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    pub frames: FrameGrid,
    pub timeline: PhaseTimeline,
    /// One record per one-second clip.
    pub clips: Vec<ManifestRecord>,
}

impl SyntheticVideo {
    /// Class id of every second, in [`SyntheticSpec::class_names`] order.
    pub fn second_labels(&self, names: &[String]) -> Result<Vec<usize>> {
        self.clips
            .iter()
            .map(|c| names.iter().position(|n| *n == c.phase).ok_or_else(|| crate::Error::Input(format!("unknown phase {}", c.phase))))
            .collect()
    }
}

fn video_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generate `n_videos` videos; video `i` depends only on `spec` and `i`.
pub fn generate(spec: &SyntheticSpec, n_videos: usize) -> Result<Vec<SyntheticVideo>> {
    spec.validate()?;
    (0..n_videos).map(|i| generate_one(spec, i)).collect()
}

pub fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<SyntheticVideo> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(video_seed(spec.seed, index));
    let id = format!("{}_{index:03}", spec.id_prefix);
    let idle = spec.phases.len();
    let mut plan: Vec<(usize, usize)> = Vec::new();
    for p in 0..=spec.phases.len() {
        if rng.gen_bool(spec.idle_prob) {
            plan.push((idle, rng.gen_range(spec.idle_s[0]..=spec.idle_s[1])));
        }
        if p < spec.phases.len() {
            plan.push((p, rng.gen_range(spec.phase_s[0]..=spec.phase_s[1])));
        }
    }
    let fps = spec.frames_per_second();
    let (h, w) = (spec.height, spec.width);
    let total_s: usize = plan.iter().map(|p| p.1).sum();
    let mut frames = FrameGrid::zeros(total_s * fps, h, w, 3);
    let names = spec.class_names();
    let mut segments = Vec::with_capacity(plan.len());
    let mut clips = Vec::with_capacity(total_s);
    let mut t0 = 0;
    for &(class, secs) in &plan {
        let origin = [rng.gen_range(0.0..w as f32), rng.gen_range(0.0..h as f32)];
        for k in 0..secs * fps {
            render(spec, class, origin, k, frames.frame_mut(t0 * fps + k), &mut rng);
        }
        segments.push(Segment::new(t0 as f64, (t0 + secs) as f64, names[class].clone()));
        for s in 0..secs {
            let (text, tools) = caption(spec, class, &mut rng)?;
            clips.push(ManifestRecord {
                video: id.clone(),
                start_s: (t0 + s) as f64,
                end_s: (t0 + s + 1) as f64,
                text,
                phase: names[class].clone(),
                tools,
            });
        }
        t0 += secs;
    }
    let timeline = PhaseTimeline { video_id: id.clone(), fps: 1.0, segments };
    Ok(SyntheticVideo { id, frames, timeline, clips })
}

fn caption(spec: &SyntheticSpec, class: usize, rng: &mut impl Rng) -> Result<(String, Vec<String>)> {
    let Some(p) = spec.phases.get(class) else {
        let rec = LabelRecord { phase: Some(spec.idle_label.clone()), ..LabelRecord::default() };
        return Ok((project_labels(&rec, Template::Phase)?, Vec::new()));
    };
    let tools = if rng.gen_bool(spec.phase_only_prob) { Vec::new() } else { vec![p.tool.clone()] };
    let rec = LabelRecord { phase: Some(p.name.clone()), tools: tools.clone(), ..LabelRecord::default() };
    Ok((project_labels(&rec, Template::PhaseTool)?, tools))
}

fn wrap(d: f32, size: f32) -> f32 {
    let r = d.rem_euclid(size);
    if r >= size / 2.0 {
        r - size
    } else {
        r
    }
}

fn render(spec: &SyntheticSpec, class: usize, origin: [f32; 2], k: usize, out: &mut [f32], rng: &mut impl Rng) {
    let (h, w) = (spec.height, spec.width);
    let pattern = spec.phases.get(class);
    let (bg, fg) = match pattern {
        Some(p) => (p.color.map(|c| 0.3 * c), p.color),
        None => ([0.12; 3], [0.12; 3]),
    };
    let centre = pattern.map(|p| [origin[0] + p.velocity[0] * k as f32, origin[1] + p.velocity[1] * k as f32]);
    for y in 0..h {
        for x in 0..w {
            let inside = match (pattern, centre) {
                (Some(p), Some(c)) => p.shape.covers(wrap(x as f32 - c[0], w as f32), wrap(y as f32 - c[1], h as f32)),
                _ => false,
            };
            let base = if inside { fg } else { bg };
            let px = &mut out[(y * w + x) * 3..(y * w + x) * 3 + 3];
            for ch in 0..3 {
                let v = base[ch] + rng.gen_range(-spec.noise..=spec.noise);
                px[ch] = v.clamp(0.0, 1.0);
            }
            if spec.remap {
                px.rotate_left(1);
            }
        }
    }
}

/// Write `videos/<id>.wlfg`, `timelines.json`, `manifest.jsonl` and `spec.json` under `dir`.
pub fn write_corpus(dir: &Path, spec: &SyntheticSpec, videos: &[SyntheticVideo]) -> Result<()> {
    fs::create_dir_all(dir.join("videos"))?;
    for v in videos {
        v.frames.save(&dir.join("videos").join(format!("{}.wlfg", v.id)))?;
    }
    let timelines: Vec<PhaseTimeline> = videos.iter().map(|v| v.timeline.clone()).collect();
    timeline::save_many(&dir.join("timelines.json"), &timelines)?;
    let records: Vec<ManifestRecord> = videos.iter().flat_map(|v| v.clips.iter().cloned()).collect();
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    fs::write(dir.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

/// A corpus directory written by [`write_corpus`]; videos load on demand.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: std::path::PathBuf,
    pub spec: SyntheticSpec,
    pub timelines: Vec<PhaseTimeline>,
    pub manifest: Vec<ManifestRecord>,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let spec: SyntheticSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        Ok(Corpus {
            dir: dir.to_path_buf(),
            spec,
            timelines: timeline::load_many(&dir.join("timelines.json"))?,
            manifest: read_manifest(&dir.join("manifest.jsonl"))?,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.timelines.iter().map(|t| t.video_id.clone()).collect()
    }

    pub fn video_path(&self, id: &str) -> std::path::PathBuf {
        self.dir.join("videos").join(format!("{id}.wlfg"))
    }

    pub fn load_video(&self, id: &str) -> Result<FrameGrid> {
        FrameGrid::load(&self.video_path(id))
    }

    pub fn timeline(&self, id: &str) -> Result<&PhaseTimeline> {
        match self.timelines.iter().find(|t| t.video_id == id) {
            Some(t) => Ok(t),
            None => bail!(Input, "corpus has no video {id:?}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let spec = SyntheticSpec { seed: 3, ..SyntheticSpec::default() };
        let a = generate(&spec, 2).unwrap();
        let b = generate(&spec, 2).unwrap();
        assert_eq!(a, b);
        for v in &a {
            v.timeline.validate(true).unwrap();
            assert_eq!(v.frames.frames(), v.timeline.duration() as usize * 5);
            assert_eq!(v.clips.len(), v.timeline.duration() as usize);
            for c in &v.clips {
                assert!(c.text.contains(&c.phase), "{c:?}");
            }
        }
        let other = generate(&SyntheticSpec { seed: 4, ..spec.clone() }, 1).unwrap();
        assert_ne!(other[0].frames, a[0].frames);
    }

    #[test]
    fn remap_rotates_channels() {
        let spec = SyntheticSpec { noise: 0.0, idle_prob: 0.0, ..SyntheticSpec::default() };
        let src = generate_one(&spec, 0).unwrap();
        let dst = generate_one(&SyntheticSpec { remap: true, ..spec }, 0).unwrap();
        let (a, b) = (src.frames.pixel(0, 0, 0), dst.frames.pixel(0, 0, 0));
        assert_eq!([a[1], a[2], a[0]], [b[0], b[1], b[2]]);
    }
}
