use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use wl_core::corpus::filters::{validity, FilterConfig, NoFaces, TextBox};
use wl_core::corpus::synth::{generate, write_corpus};
use wl_core::corpus::text::{correct_terms, split_clips, LookupTable, TranscriptWord};
use wl_core::corpus::{project_labels, Corpus, LabelRecord, Template};
use wl_core::error::Error;
use wl_core::harness::ablation::{ablate_subset, ablation_csv, ablation_svg};
use wl_core::harness::manifest::{ensure_writable, git_describe, RunManifest};
use wl_core::harness::workflow::{self, load_features, save_features};
use wl_core::harness::RunConfig;
use wl_core::metrics::evaluate;
use wl_core::objectives::pretrain::write_curve;
use wl_core::pipeline::pca::pca_export;
use wl_core::pipeline::{dense_caption, partition_video, segment_features, zero_shot, Stage1Bundle};
use wl_core::temporal::TemporalModel;
use wl_core::tensor::gradcheck::Precision;
use wl_core::timeline::{load_many, save_many, PhaseTimeline};
use wl_core::vlm::FrameGrid;
use wl_core::{gradsuite, Result};

#[derive(Parser)]
#[command(name = "wl", version, about = "Surgical workflow video-language pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (.toml or .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus directory.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        videos: Option<usize>,
        /// Permute pattern colours to make a shifted target domain.
        #[arg(long)]
        remap: bool,
        #[arg(long)]
        id_prefix: Option<String>,
    },
    /// Per-frame validity mask of a video file.
    Filter {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        fps: f64,
        /// JSON array (per frame) of text boxes `[x0, y0, x1, y1]`.
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long)]
        min_crop: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sentence clips from a timed transcript (JSON array of words).
    SplitClips {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        min_s: f64,
        /// Tab-separated term corrections.
        #[arg(long)]
        lookup: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption sentences from label records (JSON array or JSONL).
    ProjectLabels {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "phase_tool")]
        template: Template,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the stage-1 model on a corpus's training split.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit low-rank adapters of a stage-1 model to a target corpus.
    FinetuneLora {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 clip features of every video of a corpus.
    ExtractFeatures {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-2 temporal model on the training split of a feature directory.
    TrainTemporal {
        #[arg(long)]
        features: Option<PathBuf>,
        /// Train on every video instead of holding out the configured test split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment the held-out videos of a feature directory into phase timelines.
    Segment {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
        /// Segment every video, not only the held-out split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot phase timelines from prototype sentences.
    Zeroshot {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dense captions over the segments of phase timelines.
    Caption {
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        timelines: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted timelines against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        fps: Option<f64>,
        /// Output directory for report.json, report.csv and report.svg.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain stage 2 on growing subsets of the training videos.
    AblateSubset {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,1.0")]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-dimensional PCA of clip features, labelled by phase.
    PcaPlot {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long, default_value = "f64")]
        precision: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

struct Ctx {
    cfg: RunConfig,
    force: bool,
}

impl Ctx {
    fn new(common: &Common, needs_seed: bool) -> Result<Self> {
        let cfg = match (&common.config, common.seed) {
            (Some(path), seed) => {
                let mut cfg = RunConfig::load(path)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                    cfg = cfg.resolved();
                }
                cfg
            }
            (None, Some(s)) => RunConfig::with_seed(s),
            (None, None) if needs_seed => return Err(usage("a seed is required: pass --seed or a --config with `seed`")),
            (None, None) => RunConfig::with_seed(0),
        };
        Ok(Ctx { cfg, force: common.force })
    }

    fn path(&self, flag: &Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        flag.clone().or_else(|| configured.clone()).ok_or_else(|| usage(format!("--{name} is required (or set paths.{name})")))
    }

    fn corpus(&self, flag: &Option<PathBuf>) -> Result<Corpus> {
        Corpus::open(&self.path(flag, &self.cfg.paths.corpus, "corpus")?)
    }

    fn stage1(&self, flag: &Option<PathBuf>) -> Result<Stage1Bundle> {
        Stage1Bundle::load(&self.path(flag, &self.cfg.paths.stage1, "stage1")?)
    }

    fn features(&self, flag: &Option<PathBuf>) -> Result<(workflow::FeatureIndex, Vec<workflow::VideoFeatures>)> {
        load_features(&self.path(flag, &self.cfg.paths.features, "features")?)
    }

    fn out(&self, path: &Path) -> Result<()> {
        ensure_writable(path, self.force)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        Ok(())
    }

    /// Held-out split of ids in corpus order.
    fn held_out<'a>(&self, ids: &'a [String], all: bool) -> Result<(&'a [String], &'a [String])> {
        if all {
            return Ok((ids, ids));
        }
        let k = self.cfg.corpus.test_videos;
        if k >= ids.len() {
            return Err(usage(format!("cannot hold out {k} of {} videos", ids.len())));
        }
        Ok(ids.split_at(ids.len() - k))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Read a JSON array, or one JSON value per line.
fn read_records<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn subset<'a>(videos: &'a [workflow::VideoFeatures], ids: &[String]) -> Vec<&'a workflow::VideoFeatures> {
    let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    videos.iter().filter(|v| keep.contains(v.id.as_str())).collect()
}

fn run(cli: &Cli) -> Result<(u64, String, Vec<PathBuf>)> {
    let needs_seed = matches!(
        cli.cmd,
        Cmd::GenSynth { .. }
            | Cmd::Pretrain { .. }
            | Cmd::FinetuneLora { .. }
            | Cmd::TrainTemporal { .. }
            | Cmd::AblateSubset { .. }
            | Cmd::Gradcheck { .. }
    );
    let ctx = Ctx::new(&cli.common, needs_seed)?;
    let cfg = &ctx.cfg;
    let outputs = match &cli.cmd {
        Cmd::GenSynth { out, videos, remap, id_prefix } => {
            ctx.out(out)?;
            let mut spec = cfg.synth.clone();
            spec.remap |= *remap;
            if let Some(p) = id_prefix {
                spec.id_prefix = p.clone();
            }
            let vids = generate(&spec, videos.unwrap_or(cfg.corpus.videos))?;
            write_corpus(out, &spec, &vids)?;
            println!("wrote {} videos to {}", vids.len(), out.display());
            vec![out.clone()]
        }
        Cmd::Filter { video, fps, boxes, min_crop, out } => {
            ctx.out(out)?;
            let grid = FrameGrid::load(video)?;
            let boxes: Vec<Vec<TextBox>> = match boxes {
                Some(p) => {
                    let raw: Vec<Vec<[usize; 4]>> = serde_json::from_str(&fs::read_to_string(p)?)?;
                    raw.into_iter().map(|f| f.into_iter().map(|[a, b, c, d]| TextBox::new(a, b, c, d)).collect()).collect()
                }
                None => Vec::new(),
            };
            let fc = FilterConfig { min_crop: min_crop.unwrap_or(FilterConfig::default().min_crop), seed: cfg.seed, ..FilterConfig::default() };
            let mask = validity(&grid, *fps, &boxes, &NoFaces, &fc)?;
            println!("{} of {} frames valid", mask.iter().filter(|&&v| v).count(), mask.len());
            write_json(out, &mask)?;
            vec![out.clone()]
        }
        Cmd::SplitClips { transcript, min_s, lookup, out } => {
            ctx.out(out)?;
            let words: Vec<TranscriptWord> = read_records(transcript)?;
            let mut clips = split_clips(&words, *min_s)?;
            if let Some(p) = lookup {
                let table = LookupTable::load(p)?;
                for c in &mut clips {
                    c.text = correct_terms(&c.text, &table);
                }
            }
            println!("{} clips", clips.len());
            write_json(out, &clips)?;
            vec![out.clone()]
        }
        Cmd::ProjectLabels { labels, template, out } => {
            ctx.out(out)?;
            let records: Vec<LabelRecord> = read_records(labels)?;
            let texts = records.iter().map(|r| project_labels(r, *template)).collect::<Result<Vec<_>>>()?;
            write_json(out, &texts)?;
            vec![out.clone()]
        }
        Cmd::Pretrain { corpus, out } => {
            ctx.out(out)?;
            let corpus = ctx.corpus(corpus)?;
            let (train, _) = workflow::split(&corpus, cfg.corpus.test_videos)?;
            let (bundle, curve) = workflow::pretrain(&corpus, &train, cfg)?;
            bundle.save(out)?;
            let curve_path = out.with_extension("curve.csv");
            write_curve(&curve_path, &curve)?;
            if let Some(last) = curve.last() {
                println!("pretrained {} steps, final loss {:.4}", curve.len(), last.total);
            }
            vec![out.clone(), curve_path]
        }
        Cmd::FinetuneLora { stage1, corpus, out } => {
            ctx.out(out)?;
            let base = ctx.stage1(stage1)?;
            let corpus = ctx.corpus(corpus)?;
            let (train, _) = workflow::split(&corpus, cfg.corpus.test_videos)?;
            let (bundle, curve) = workflow::finetune(&base, &corpus, &train, cfg)?;
            bundle.save(out)?;
            let curve_path = out.with_extension("curve.csv");
            write_curve(&curve_path, &curve)?;
            println!("fine-tuned adapters for {} steps", curve.len());
            vec![out.clone(), curve_path]
        }
        Cmd::ExtractFeatures { stage1, corpus, out } => {
            ctx.out(out)?;
            let bundle = ctx.stage1(stage1)?;
            let corpus = ctx.corpus(corpus)?;
            let vids = workflow::extract(&bundle, &corpus, &corpus.ids(), cfg.pipeline.clip_s)?;
            save_features(out, &corpus.spec.class_names(), &vids)?;
            println!("extracted features of {} videos", vids.len());
            vec![out.clone()]
        }
        Cmd::TrainTemporal { features, all, out } => {
            ctx.out(out)?;
            let (index, vids) = ctx.features(features)?;
            let ids: Vec<String> = vids.iter().map(|v| v.id.clone()).collect();
            let (train, _) = ctx.held_out(&ids, *all)?;
            let samples: Vec<_> = subset(&vids, train).into_iter().map(|v| v.sample()).collect();
            let (m, store, hist) = workflow::train_stage2(cfg, &index.classes, &samples)?;
            m.save(&store, out)?;
            println!("trained {:?} on {} videos, final loss {:.4}", m.cfg.variant, samples.len(), hist.last().copied().unwrap_or(f64::NAN));
            vec![out.clone()]
        }
        Cmd::Segment { features, stage2, all, out } => {
            ctx.out(out)?;
            let (_, vids) = ctx.features(features)?;
            let (m, store) = TemporalModel::load(&ctx.path(stage2, &cfg.paths.stage2, "stage2")?)?;
            let ids: Vec<String> = vids.iter().map(|v| v.id.clone()).collect();
            let (_, test) = ctx.held_out(&ids, *all)?;
            let timelines = subset(&vids, test)
                .into_iter()
                .map(|v| Ok(segment_features(&m, &store, &v.id, &v.features, &v.partition)?.0))
                .collect::<Result<Vec<PhaseTimeline>>>()?;
            save_many(out, &timelines)?;
            println!("segmented {} videos", timelines.len());
            vec![out.clone()]
        }
        Cmd::Zeroshot { stage1, corpus, all, out } => {
            ctx.out(out)?;
            let bundle = ctx.stage1(stage1)?;
            let corpus = ctx.corpus(corpus)?;
            let ids = corpus.ids();
            let (_, test) = ctx.held_out(&ids, *all)?;
            let classes = workflow::prototypes(&corpus);
            let timelines = workflow::par_map(test, |id| {
                let video = corpus.load_video(id)?;
                let part = partition_video(&video, cfg.pipeline.clip_s, corpus.spec.fps)?;
                Ok(zero_shot(&bundle, id, &video, &part, &classes)?.0)
            })?;
            save_many(out, &timelines)?;
            println!("zero-shot timelines for {} videos", timelines.len());
            vec![out.clone()]
        }
        Cmd::Caption { stage1, corpus, timelines, out } => {
            ctx.out(out)?;
            let bundle = ctx.stage1(stage1)?;
            let corpus = ctx.corpus(corpus)?;
            let timelines = load_many(timelines)?;
            let sets = workflow::par_map(&timelines, |t| {
                let video = corpus.load_video(&t.video_id)?;
                dense_caption(&bundle, t, &video, corpus.spec.fps, &cfg.pipeline.idle_label)
            })?;
            write_json(out, &sets)?;
            println!("{} captions", sets.iter().map(|s| s.captions.len()).sum::<usize>());
            vec![out.clone()]
        }
        Cmd::Evaluate { pred, gt, fps, out } => {
            ctx.out(out)?;
            fs::create_dir_all(out)?;
            let pred = load_many(pred)?;
            let gt_all = load_many(gt)?;
            let ids: BTreeSet<&str> = pred.iter().map(|t| t.video_id.as_str()).collect();
            let gt: Vec<PhaseTimeline> = gt_all.iter().filter(|t| ids.contains(t.video_id.as_str())).cloned().collect();
            if gt.len() != ids.len() {
                return Err(Error::Input(format!("{} predicted videos have no ground truth", ids.len() - gt.len())));
            }
            let report = evaluate(&pred, &gt, fps.unwrap_or(cfg.pipeline.eval_fps))?;
            let paths = [out.join("report.json"), out.join("report.csv"), out.join("report.svg")];
            fs::write(&paths[0], report.to_json()?)?;
            fs::write(&paths[1], report.to_csv())?;
            fs::write(&paths[2], report.to_svg())?;
            print!("{}", report.to_csv());
            vec![out.clone()]
        }
        Cmd::AblateSubset { features, fractions, out } => {
            ctx.out(out)?;
            fs::create_dir_all(out)?;
            let (index, vids) = ctx.features(features)?;
            let ids: Vec<String> = vids.iter().map(|v| v.id.clone()).collect();
            let (train, test) = ctx.held_out(&ids, false)?;
            let train: Vec<_> = subset(&vids, train).into_iter().cloned().collect();
            let test: Vec<_> = subset(&vids, test).into_iter().cloned().collect();
            let rows = ablate_subset(&train, &test, &index.classes, fractions, cfg)?;
            fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
            fs::write(out.join("ablation.svg"), ablation_svg(&rows))?;
            print!("{}", ablation_csv(&rows));
            vec![out.clone()]
        }
        Cmd::PcaPlot { features, out } => {
            ctx.out(out)?;
            fs::create_dir_all(out)?;
            let (index, vids) = ctx.features(features)?;
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for v in &vids {
                let d = v.features.shape()[1];
                for (t, &l) in v.labels.iter().enumerate() {
                    rows.push(v.features.data()[t * d..(t + 1) * d].iter().map(|&x| x as f64).collect());
                    labels.push(index.classes[l].clone());
                }
            }
            let pca = pca_export(&rows, 2)?;
            fs::write(out.join("pca.csv"), pca.to_csv(&labels)?)?;
            fs::write(out.join("pca.svg"), pca.to_svg(&labels))?;
            println!("explained variance ratios {:.4?}", pca.explained_ratio);
            vec![out.clone()]
        }
        Cmd::Gradcheck { precision, out } => {
            ctx.out(out)?;
            let p = match precision.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(usage(format!("unknown precision {other:?} (f32 or f64)"))),
            };
            let results = gradsuite::run(p, cfg.seed)?;
            let rows: Vec<_> = results
                .iter()
                .map(|r| serde_json::json!({"loss": r.name, "max_rel_err": r.report.max_rel_err, "worst": r.report.worst, "coords": r.report.coords, "pass": r.passes()}))
                .collect();
            for r in &results {
                println!("{:<16} max rel err {:.3e} {}", r.name, r.report.max_rel_err, if r.passes() { "PASS" } else { "FAIL" });
            }
            write_json(out, &rows)?;
            if let Some(bad) = results.iter().find(|r| !r.passes()) {
                return Err(Error::Numeric(format!("{} gradient check failed ({:.3e})", bad.name, bad.report.max_rel_err)));
            }
            vec![out.clone()]
        }
    };
    Ok((cfg.seed, cfg.hash(), outputs))
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::GenSynth { .. } => "gen-synth",
        Cmd::Filter { .. } => "filter",
        Cmd::SplitClips { .. } => "split-clips",
        Cmd::ProjectLabels { .. } => "project-labels",
        Cmd::Pretrain { .. } => "pretrain",
        Cmd::FinetuneLora { .. } => "finetune-lora",
        Cmd::ExtractFeatures { .. } => "extract-features",
        Cmd::TrainTemporal { .. } => "train-temporal",
        Cmd::Segment { .. } => "segment",
        Cmd::Zeroshot { .. } => "zeroshot",
        Cmd::Caption { .. } => "caption",
        Cmd::Evaluate { .. } => "evaluate",
        Cmd::AblateSubset { .. } => "ablate-subset",
        Cmd::PcaPlot { .. } => "pca-plot",
        Cmd::Gradcheck { .. } => "gradcheck",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    let result = run(&cli).and_then(|(seed, config_hash, outputs)| {
        let manifest = RunManifest {
            command: command_name(&cli.cmd).into(),
            args: std::env::args().skip(1).collect(),
            config_hash,
            seed,
            git_describe: git_describe(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_time_s: start.elapsed().as_secs_f64(),
            outputs: outputs.clone(),
        };
        manifest.write(&outputs[0])
    });
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
