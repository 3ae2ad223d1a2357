//! The full acceptance suite: every criterion prints one PASS/FAIL line and the
//! test fails if any criterion does.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use wl_core::corpus::filters::*;
use wl_core::corpus::synth::{generate, write_corpus, Corpus, SyntheticSpec};
use wl_core::corpus::text::*;
use wl_core::gradsuite::{self, stage1_case, Term};
use wl_core::harness::ablation::ablate_subset;
use wl_core::harness::workflow::{self, VideoFeatures};
use wl_core::harness::RunConfig;
use wl_core::lora;
use wl_core::metrics::*;
use wl_core::objectives::losses::{masked_cross_entropy, mga_from_similarity};
use wl_core::objectives::{MaskingPlan, Sample};
use wl_core::pipeline::{dense_caption, partition_video, segment_features, Stage1Bundle};
use wl_core::temporal::Variant;
use wl_core::tensor::gradcheck::Precision;
use wl_core::tensor::graph::Segments;
use wl_core::tensor::{Graph, Tensor};
use wl_core::timeline::PhaseTimeline;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut ok = true;
    for p in [Precision::F32, Precision::F64] {
        let results = gradsuite::run(p, 3).map_err(|e| e.to_string())?;
        let max = results.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
        ok &= results.len() == 6 && results.iter().all(|r| r.passes());
        for r in results.iter().filter(|r| !r.passes()) {
            worst.push(format!("{} {:?} {:.2e}", r.name, p, r.report.max_rel_err));
        }
        worst.push(format!("{p:?} max {max:.2e}"));
    }
    let took = start.elapsed();
    check(ok && took < Duration::from_secs(120), format!("{} in {:.1}s", worst.join(", "), took.as_secs_f64()))
}

fn closed_form_oracles() -> Outcome {
    let g = Graph::<f64>::new();
    let zero = g.input(Tensor::scalar(0.0)).unwrap();
    let one = g.input(Tensor::new(&[1, 1], vec![0.37]).unwrap()).unwrap();
    let b1 = g.scalar(mga_from_similarity(&g, one, zero, false).unwrap());
    let id = g.input(Tensor::eye(2)).unwrap();
    let b2 = g.scalar(mga_from_similarity(&g, id, zero, false).unwrap());
    let logits = g.input(Tensor::zeros(&[5, 6])).unwrap();
    let plan = MaskingPlan::at(&[0, 1, 2, 3, 4], &[0, 2, 4]);
    let ce = g.scalar(masked_cross_entropy(&g, &[logits], &[&plan]).unwrap());

    let (case, store) = stage1_case(Term::Valor, 3, 5).unwrap();
    let batch: Vec<&Sample> = case.batch.iter().collect();
    let g = Graph::inference(&store);
    let terms = case.model.valor_loss(&g, &batch, &case.prompts, &case.plans, &case.settings).unwrap();
    let parts = [terms.mga, terms.mgc, terms.mlm].map(|v| g.scalar(v));
    let mean_gap = (g.scalar(terms.total) - parts.iter().sum::<f64>() / 3.0).abs();

    let detail = format!("B=1 {b1}, B=2 {b2:.6}, CE-lnK {:.1e}, valor gap {mean_gap:.1e}", (ce - 6f64.ln()).abs());
    check(b1 == 0.0 && (b2 - 0.62652).abs() <= 1e-5 && (ce - 6f64.ln()).abs() <= 1e-6 && mean_gap <= 1e-6, detail)
}

fn similarity_oracle() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (nt, nv, d) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=8));
        let mut rand = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
        let (et, ev, wt, wv) = (rand(&[nt, d], -1.0, 1.0), rand(&[nv, d], -1.0, 1.0), rand(&[nt], 0.0, 1.0), rand(&[nv], 0.0, 1.0));
        let g = Graph::<f64>::new();
        let s = g
            .similarity_matrix(
                g.input(et.clone()).unwrap(),
                g.input(wt.clone()).unwrap(),
                Segments::from_lengths(&[nt]),
                g.input(ev.clone()).unwrap(),
                g.input(wv.clone()).unwrap(),
                Segments::from_lengths(&[nv]),
            )
            .unwrap();
        let mut t2v = 0.0;
        for i in 0..nt {
            let mut best = f64::NEG_INFINITY;
            for j in 0..nv {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += et.at2(i, k) * ev.at2(j, k);
                }
                best = best.max(dot);
            }
            t2v += wt.data()[i] * best;
        }
        let mut v2t = 0.0;
        for j in 0..nv {
            let mut best = f64::NEG_INFINITY;
            for i in 0..nt {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += et.at2(i, k) * ev.at2(j, k);
                }
                best = best.max(dot);
            }
            v2t += wv.data()[j] * best;
        }
        worst = worst.max((g.scalar(s) - 0.5 * (t2v + v2t)).abs());
    }
    check(worst <= 1e-12, format!("max abs diff {worst:.1e} over 100 instances"))
}

fn lora_contracts() -> Outcome {
    let trials: Vec<_> = (0..20).map(common::lora_trial).collect();
    let zero = trials.iter().map(|t| t.zero_init_diff).fold(0.0, f64::max);
    let merge = trials.iter().map(|t| t.merge_diff).fold(0.0, f64::max);
    let failed = trials.iter().filter(|t| !t.passes()).count();
    check(failed == 0, format!("20 configs, zero-init {zero:.1e}, merge {merge:.1e}, {failed} failing"))
}

fn r2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn metric_suite() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let mut pairs = Vec::new();
    for i in 0..200 {
        let (p, g) = common::random_pair(&mut rng, 50, 5);
        if let Some(m) = common::metric_mismatch(&p, &g) {
            return Err(format!("pair {i}: {m}"));
        }
        pairs.push((p, g));
    }
    let refs: Vec<(&[usize], &[usize])> = pairs.iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
    if acc_micro(&refs).unwrap() != common::oracle::micro(&pairs) {
        return Err("acc_micro differs from the oracle".into());
    }
    let s = per_phase_metrics(&[1; 5], &[0; 5]).unwrap();
    let v1 = (vec![0; 10], vec![0; 10]);
    let v2 = (vec![1; 90], vec![0; 90]);
    let examples = [
        frame_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap() == 100.0,
        frame_accuracy(&[1, 1], &[0, 0]).unwrap() == 0.0,
        r2(frame_accuracy(&[0, 0, 1], &[0, 1, 1]).unwrap()) == 66.67,
        per_phase_metrics(&[2, 0], &[2, 0]).unwrap().f1 == 100.0,
        (s.precision, s.recall, s.jaccard) == (0.0, 0.0, 0.0),
        acc_micro(&[(&v1.0, &v1.1)]).unwrap() == frame_accuracy(&v1.0, &v1.1).unwrap(),
        acc_micro(&[(&v1.0, &v1.1), (&v2.0, &v2.1)]).unwrap() == 10.0,
        edit_score(&[0, 1, 1], &[0, 1, 1]).unwrap() == 100.0,
        r2(edit_score(&[0, 2, 1], &[0, 1, 1]).unwrap()) == 66.67,
        overlap_f1_segments(&[(0, 0, 8)], &[(0, 0, 10)], 0.5) == 100.0,
        overlap_f1_segments(&[(0, 0, 8)], &[(0, 0, 10)], 0.9) == 0.0,
    ];
    let bad: Vec<usize> = examples.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i).collect();
    check(bad.is_empty(), format!("200 random pairs match the oracle; worked examples failing: {bad:?}"))
}

fn word(text: &str, s: f64, e: f64) -> TranscriptWord {
    TranscriptWord { text: text.into(), start_s: s, end_s: e, punct: false }
}

fn corpus_tooling() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let mut worst: f64 = 1.0;
    for i in 0..100 {
        let boxes = common::random_boxes(&mut rng, 64, 10);
        let best = common::exhaustive_crop(64, 64, &boxes);
        let Some(found) = crop_search(64, 64, &boxes, 1, CROP_RESTARTS, i) else {
            return Err(format!("instance {i}: no crop found"));
        };
        if boxes.iter().any(|b| b.intersects(&found)) {
            return Err(format!("instance {i}: crop touches text"));
        }
        worst = worst.min(found.area() as f64 / best as f64);
    }

    let bits = |s: &[u8]| s.iter().map(|&b| b == 1).collect::<Vec<_>>();
    let a = vec![0.5f32; 10 * 3];
    let mut shifted = a.clone();
    shifted.iter_mut().take(6 * 3).for_each(|v| *v += 0.2);
    let sub: Vec<f32> = a.iter().map(|v| v + NOISE_DELTA / 2.0).collect();
    let two = [word("first", 0.0, 1.0), word("part.", 1.0, 2.5), word("second", 3.0, 4.0), word("part?", 4.0, 6.0)];
    let clips = split_clips(&two, 2.0).unwrap();
    let table = LookupTable::from_tsv("fake o emulsification\tphacoemulsification\ncapsule\tX\ncapsule rhexis\tcapsulorhexis\n").unwrap();
    let rec = |phase: Option<&str>, tools: &[&str], verb: Option<&str>, target: Option<&str>| LabelRecord {
        phase: phase.map(Into::into),
        tools: tools.iter().map(|t| t.to_string()).collect(),
        verb: verb.map(Into::into),
        target: target.map(Into::into),
    };
    let examples = [
        crop_search(50, 40, &[], 10, 8, 0) == Some(TextBox::new(0, 0, 50, 40)),
        crop_search(100, 100, &[TextBox::new(40, 40, 60, 60)], 20, CROP_RESTARTS, 1).map(|b| b.area()) == Some(4000),
        crop_search(300, 300, &[TextBox::new(200, 0, 300, 300), TextBox::new(0, 200, 200, 300)], 224, CROP_RESTARTS, 2).is_none(),
        median_filter_validity(&bits(&[1, 1, 1, 1]), 1.0, 3.0).unwrap() == bits(&[1, 1, 1, 1]),
        median_filter_validity(&bits(&[1, 1, 0, 1, 1]), 1.0, 3.0).unwrap() == bits(&[1, 1, 1, 1, 1]),
        median_filter_validity(&bits(&[0, 0, 1, 0, 0]), 1.0, 3.0).unwrap() == bits(&[0, 0, 0, 0, 0]),
        !detect_static(&a, &a, 3, NOISE_DELTA).unwrap(),
        detect_static(&shifted, &a, 3, NOISE_DELTA).unwrap(),
        !detect_static(&sub, &a, 3, NOISE_DELTA).unwrap(),
        split_clips(&[word("we", 0.0, 1.0), word("cut", 1.0, 3.0), word("here.", 3.0, 5.0)], 2.0).unwrap().len() == 1,
        split_clips(&[word("ok.", 0.0, 1.5)], 2.0).unwrap().is_empty(),
        clips.len() == 2 && clips[0].end_s == 2.5 && clips[1].start_s == 3.0 && clips[1].end_s == 6.0,
        correct_terms("the fake o emulsification", &LookupTable::default()) == "the fake o emulsification",
        correct_terms("the fake O emulsification.", &table) == "the phacoemulsification.",
        correct_terms("a capsule rhexis and capsule", &table) == "a capsulorhexis and X",
        project_labels(&rec(Some("incision"), &["keratome"], None, None), Template::PhaseTool).unwrap()
            == "The surgeon is using a keratome during the incision phase of cataract surgery.",
        project_labels(&rec(None, &["grasper"], Some("retract"), Some("gallbladder")), Template::Triplet).unwrap()
            == "The surgeon is using a grasper to retract the gallbladder.",
        project_labels(&rec(Some("incision"), &[], None, None), Template::PhaseTool).unwrap() == "This is the incision phase of cataract surgery.",
    ];
    let bad: Vec<usize> = examples.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i).collect();
    check(worst >= 0.95 && bad.is_empty(), format!("worst crop ratio {worst:.3}; worked examples failing: {bad:?}"))
}

/// State shared by the end-to-end criteria.
struct Run {
    cfg: RunConfig,
    corpus: Corpus,
    names: Vec<String>,
    test_ids: Vec<String>,
    stage1: Stage1Bundle,
    train: Vec<VideoFeatures>,
    test: Vec<VideoFeatures>,
    _dir: tempfile::TempDir,
}

fn setup() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::with_seed(7);
    let videos = generate(&cfg.synth, cfg.corpus.videos).unwrap();
    write_corpus(dir.path(), &cfg.synth, &videos).unwrap();
    drop(videos);
    let corpus = Corpus::open(dir.path()).unwrap();
    let names = corpus.spec.class_names();
    let (train_ids, test_ids) = workflow::split(&corpus, cfg.corpus.test_videos).unwrap();
    let t = Instant::now();
    let (stage1, curve) = workflow::pretrain(&corpus, &train_ids, &cfg).unwrap();
    let (first, last) = (&curve[0], curve.last().unwrap());
    println!("  pretrained {} steps in {:.0}s, loss {:.3} -> {:.3}", curve.len(), t.elapsed().as_secs_f64(), first.total, last.total);
    let train = workflow::extract(&stage1, &corpus, &train_ids, cfg.pipeline.clip_s).unwrap();
    let test = workflow::extract(&stage1, &corpus, &test_ids, cfg.pipeline.clip_s).unwrap();
    Run { cfg, corpus, names, test_ids, stage1, train, test, _dir: dir }
}

/// Returns the TCN's held-out timelines for the captioning criterion.
fn two_stage(run: &Run) -> (Outcome, Vec<PhaseTimeline>) {
    let samples: Vec<_> = run.train.iter().map(VideoFeatures::sample).collect();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut timelines = Vec::new();
    for (variant, epochs) in [(Variant::Tcn, 150), (Variant::Asformer, 30)] {
        let mut cfg = run.cfg.clone();
        cfg.temporal.variant = variant;
        cfg.temporal_train.epochs = epochs;
        let t = Instant::now();
        let (m, store, _) = workflow::train_stage2(&cfg, &run.names, &samples).unwrap();
        let r = workflow::evaluate_stage2(&m, &store, &run.test).unwrap();
        let (acc, edit, f1) = (r.mean("accuracy"), r.mean("edit"), r.mean("f1@50"));
        ok &= acc >= 90.0 && edit >= 80.0 && f1 >= 80.0;
        lines.push(format!("{variant:?} acc {acc:.1} edit {edit:.1} F1@50 {f1:.1} ({:.0}s)", t.elapsed().as_secs_f64()));
        if variant == Variant::Tcn {
            timelines = run.test.iter().map(|v| segment_features(&m, &store, &v.id, &v.features, &v.partition).unwrap().0).collect();
        }
    }
    (check(ok, lines.join("; ")), timelines)
}

fn zero_shot_accuracy(b: &Stage1Bundle, corpus: &Corpus, ids: &[String], clip_s: f64) -> f64 {
    workflow::evaluate_zero_shot(b, corpus, ids, clip_s).unwrap().mean("accuracy")
}

fn zero_shot(run: &Run) -> Outcome {
    let acc = zero_shot_accuracy(&run.stage1, &run.corpus, &run.test_ids, run.cfg.pipeline.clip_s);
    let chance = 100.0 / run.names.len() as f64;
    check(acc >= 60.0, format!("held-out accuracy {acc:.1} (chance {chance:.1})"))
}

fn domain_shift(run: &Run) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { seed: 99, remap: true, id_prefix: "tgt".into(), ..run.cfg.synth.clone() };
    write_corpus(dir.path(), &spec, &generate(&spec, 16).unwrap()).unwrap();
    let target = Corpus::open(dir.path()).unwrap();
    let (adapt_ids, eval_ids) = workflow::split(&target, 8).unwrap();
    let clip_s = run.cfg.pipeline.clip_s;

    let base_digest = lora::base_digest(&run.stage1.store);
    let before = zero_shot_accuracy(&run.stage1, &target, &eval_ids, clip_s);
    let (mut tuned, _) = workflow::finetune(&run.stage1, &target, &adapt_ids, &run.cfg).unwrap();
    let after = zero_shot_accuracy(&tuned, &target, &eval_ids, clip_s);
    let frozen = lora::base_digest(&tuned.store) == base_digest;

    lora::set_enabled(&mut tuned.model, false);
    let video = target.load_video(&eval_ids[0]).unwrap();
    let part = partition_video(&video, clip_s, target.spec.fps).unwrap();
    let identical = (0..part.len()).all(|i| {
        let clip = part.clip_frames(&video, i).unwrap();
        tuned.embed_video(&clip).unwrap() == run.stage1.embed_video(&clip).unwrap()
    }) && run.names.iter().all(|n| tuned.embed_text(&prototype(n)).unwrap() == run.stage1.embed_text(&prototype(n)).unwrap())
        && wl_core::pipeline::extract_features(&tuned, &video, &part).unwrap()
            == wl_core::pipeline::extract_features(&run.stage1, &video, &part).unwrap();
    let disabled = zero_shot_accuracy(&tuned, &target, &eval_ids, clip_s);
    check(
        after - before >= 10.0 && frozen && identical && disabled == before,
        format!("target zero-shot {before:.1} -> {after:.1}; base frozen {frozen}; disabled bit-identical {identical}"),
    )
}

fn captions(run: &Run, timelines: &[PhaseTimeline]) -> Outcome {
    let idle = &run.cfg.pipeline.idle_label;
    let (mut total, mut hits) = (0, 0);
    for tl in timelines {
        let video = run.corpus.load_video(&tl.video_id).unwrap();
        let set = dense_caption(&run.stage1, tl, &video, run.corpus.spec.fps, idle).unwrap();
        for (k, c) in set.captions.iter().enumerate() {
            if k > 0 && c.start_s < set.captions[k - 1].end_s {
                return Err(format!("{}: captions {k} overlap or are unsorted", tl.video_id));
            }
            if c.end_s - c.start_s > 10.0 + 1e-9 || c.end_s <= c.start_s {
                return Err(format!("{}: caption {k} spans {}..{}", tl.video_id, c.start_s, c.end_s));
            }
            let Some(seg) = tl.segments.iter().find(|s| s.start_s <= c.start_s + 1e-9 && c.end_s <= s.end_s + 1e-9) else {
                return Err(format!("{}: caption {k} crosses a segment boundary", tl.video_id));
            };
            if &seg.label == idle {
                return Err(format!("{}: caption {k} inside idle", tl.video_id));
            }
            total += 1;
            hits += c.text.contains(&seg.label) as usize;
        }
    }
    let rate = 100.0 * hits as f64 / total.max(1) as f64;
    check(total > 0 && rate >= 80.0, format!("{hits}/{total} captions name their phase ({rate:.1}%) over {} videos", timelines.len()))
}

fn ablation(run: &Run) -> Outcome {
    let rows = ablate_subset(&run.train, &run.test, &run.names, &[0.1, 0.25, 0.5, 1.0], &run.cfg).unwrap();
    let line: Vec<String> = rows.iter().map(|r| format!("{}:{:.1}", r.fraction, r.accuracy)).collect();
    let (first, last) = (&rows[0], rows.last().unwrap());
    check(rows.len() == 4 && last.accuracy >= first.accuracy - 2.0, format!("accuracy by fraction {}", line.join(" ")))
}

fn report(results: &mut Vec<(usize, &'static str, Outcome)>, n: usize, name: &'static str, outcome: Outcome) {
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {name}: {detail}");
    results.push((n, name, outcome));
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut results = Vec::new();
    report(&mut results, 1, "gradient suite", gradient_suite());
    report(&mut results, 2, "closed-form loss oracles", closed_form_oracles());
    report(&mut results, 3, "fine-grained similarity oracle", similarity_oracle());
    report(&mut results, 4, "adapter contracts", lora_contracts());
    report(&mut results, 5, "metric oracle suite", metric_suite());

    let run = setup();
    let (outcome, timelines) = two_stage(&run);
    let headline = start.elapsed();
    report(&mut results, 6, "synthetic two-stage segmentation", outcome.and_then(|d| check(headline < Duration::from_secs(1800), d)));
    report(&mut results, 7, "zero-shot phase prediction", zero_shot(&run));
    report(&mut results, 8, "adapter domain shift", domain_shift(&run));
    report(&mut results, 9, "dense captions", captions(&run, &timelines));
    report(&mut results, 10, "corpus tooling", corpus_tooling());
    report(&mut results, 11, "subset ablation", ablation(&run));
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());

    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).map(|r| format!("{} ({})", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
