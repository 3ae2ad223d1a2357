use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use wl_core::corpus::{generate, prototype, SyntheticSpec};
use wl_core::pipeline::data::build_vocab;
use wl_core::pipeline::infer::{best_class, fine_grained_score};
use wl_core::pipeline::*;
use wl_core::tensor::Tensor;
use wl_core::vlm::{FrameGrid, LoraTargets, ModelConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        n_frames: 2,
        c_v: 16,
        c_t: 16,
        video_layers: 1,
        text_layers: 1,
        heads: 2,
        ffn_dim: 16,
        embed_dim: 8,
        feature_dim: 8,
        ..ModelConfig::default()
    }
}

fn bundle(seed: u64) -> Stage1Bundle {
    let spec = SyntheticSpec::default();
    let names = spec.class_names();
    Stage1Bundle::init(&small_model(), build_vocab(["the surgeon is using a keratome"], &names), seed).unwrap()
}

/// `n` tokens of width `d`; `n == 0` draws a count in 1..7.
fn random_embedding(rng: &mut impl Rng, n: usize, d: usize) -> ClipEmbedding {
    let n = if n == 0 { rng.gen_range(1..7) } else { n };
    let raw: Vec<f32> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f32 = raw.iter().sum();
    ClipEmbedding { tokens: Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0)), weights: raw.iter().map(|w| w / total).collect() }
}

/// Cosine similarity matrix, then weighted row and column maxima.
fn oracle_score(text: &ClipEmbedding, video: &ClipEmbedding) -> f64 {
    let rows = |t: &Tensor<f32>| {
        let (n, d) = (t.shape()[0], t.shape()[1]);
        (0..n).map(|i| t.data()[i * d..(i + 1) * d].iter().map(|&x| x as f64).collect::<Vec<f64>>()).collect::<Vec<_>>()
    };
    let (a, b) = (rows(&text.tokens), rows(&video.tokens));
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sim: Vec<Vec<f64>> =
        a.iter().map(|x| b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (norm(x) * norm(y))).collect()).collect();
    let mut t2v = 0.0;
    for (i, row) in sim.iter().enumerate() {
        t2v += text.weights[i] as f64 * row.iter().cloned().fold(f64::MIN, f64::max);
    }
    let mut v2t = 0.0;
    for j in 0..b.len() {
        v2t += video.weights[j] as f64 * sim.iter().map(|r| r[j]).fold(f64::MIN, f64::max);
    }
    (t2v + v2t) / 2.0
}

#[test]
fn zero_shot_choice_matches_brute_force() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    for _ in 0..100 {
        let d = rng.gen_range(2..9);
        let video = random_embedding(&mut rng, 0, d);
        let protos: Vec<_> = (0..rng.gen_range(2..7)).map(|_| random_embedding(&mut rng, 0, d)).collect();
        let scores: Vec<f64> = protos.iter().map(|p| oracle_score(p, &video)).collect();
        for (p, s) in protos.iter().zip(&scores) {
            assert!((fine_grained_score(p, &video) - s).abs() < 1e-9);
        }
        let best = (0..scores.len()).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
        assert_eq!(best_class(&video, &protos), best);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn fine_grained_score_ignores_token_scale(seed in 0u64..10_000, scale in 0.01f32..100.0) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let text = random_embedding(&mut rng, 4, 6);
        let video = random_embedding(&mut rng, 5, 6);
        let scaled = ClipEmbedding { tokens: Tensor::from_fn(&[5, 6], |k| video.tokens.data()[k] * scale), weights: video.weights.clone() };
        let (s, t) = (fine_grained_score(&text, &video), fine_grained_score(&text, &scaled));
        prop_assert!((s - t).abs() < 1e-5);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
    }

    #[test]
    fn partitions_tile_the_video(dur in 0.2f64..40.0, clip_s in 0.5f64..5.0) {
        let p = partition(dur, clip_s, 5.0).unwrap();
        prop_assert_eq!(p.len(), (dur / clip_s - 1e-9).ceil() as usize);
        prop_assert_eq!(p.clips[0].start_s, 0.0);
        prop_assert!((p.clips.last().unwrap().end_s - dur).abs() < 1e-9);
        for w in p.clips.windows(2) {
            prop_assert_eq!(w[0].end_s, w[1].start_s);
            prop_assert!(w[0].end_frame <= w[1].start_frame + 1);
        }
    }
}

#[test]
fn features_are_computed_clip_by_clip() {
    let b = bundle(1);
    let spec = SyntheticSpec { seed: 4, ..SyntheticSpec::default() };
    let video = generate(&spec, 1).unwrap().remove(0).frames;
    let part = partition_video(&video, 1.0, spec.fps).unwrap();
    let feats = extract_features(&b, &video, &part).unwrap();
    assert_eq!(feats.shape(), &[part.len(), 8]);

    let k = part.len() / 2;
    let mut edited = video.clone();
    for f in part.clips[k].start_frame..part.clips[k].end_frame {
        edited.frame_mut(f).iter_mut().for_each(|x| *x = 1.0 - *x);
    }
    let after = extract_features(&b, &edited, &part).unwrap();
    for i in 0..part.len() {
        let same = feats.row(i) == after.row(i);
        assert_eq!(same, i != k, "clip {i}");
    }
}

#[test]
fn short_final_clip_is_padded_with_its_last_frame() {
    let video = FrameGrid::new(7, 1, 1, 1, (0..7).map(|v| v as f32).collect()).unwrap();
    let part = partition_video(&video, 1.0, 5.0).unwrap();
    assert_eq!(part.len(), 2);
    assert_eq!(part.clip_frames(&video, 1).unwrap().data(), &[5.0, 6.0, 6.0, 6.0, 6.0]);
}

#[test]
fn zero_shot_timeline_covers_the_video() {
    let b = bundle(2);
    let spec = SyntheticSpec { seed: 5, ..SyntheticSpec::default() };
    let video = generate(&spec, 1).unwrap().remove(0).frames;
    let part = partition_video(&video, 1.0, spec.fps).unwrap();
    let classes: Vec<(String, String)> = spec.class_names().iter().map(|n| (n.clone(), prototype(n))).collect();
    let (tl, labels) = zero_shot(&b, "v", &video, &part, &classes).unwrap();
    assert_eq!(labels.len(), part.len());
    tl.validate(true).unwrap();
    assert!((tl.duration() - part.duration_s).abs() < 1e-9);
    assert!(matches!(zero_shot(&b, "v", &video, &part, &classes[..1]), Err(wl_core::Error::Config(_))));
}

#[test]
fn bundles_roundtrip_with_and_without_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = bundle(3);
    let clip = generate(&SyntheticSpec { seed: 6, ..SyntheticSpec::default() }, 1).unwrap().remove(0).frames.slice(0, 5).unwrap();
    for round in 0..2 {
        let path = dir.path().join(format!("b{round}.wlcp"));
        b.save(&path).unwrap();
        let back = Stage1Bundle::load(&path).unwrap();
        assert_eq!(back.vocab, b.vocab);
        assert_eq!(back.embed_video(&clip).unwrap(), b.embed_video(&clip).unwrap());
        assert_eq!(back.embed_text("incision").unwrap(), b.embed_text("incision").unwrap());
        if round == 1 {
            break;
        }
        b.attach_lora(2, None, LoraTargets::default(), 9).unwrap();
        let a = b.model.adapted_linears()[0].lora.as_ref().unwrap().b;
        let shape = b.store.get(a).shape().to_vec();
        b.store.set(a, Tensor::from_fn(&shape, |k| 0.01 * (k % 5) as f32)).unwrap();
    }
}

#[test]
fn pca_recovers_axis_variances() {
    // Variance 4 along x and 1 along y.
    let rows: Vec<Vec<f64>> =
        vec![vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0], vec![2.0, 1.0], vec![-2.0, -1.0], vec![2.0, -1.0], vec![-2.0, 1.0]];
    let p = pca_export(&rows, 2).unwrap();
    let var = |j: usize| rows.iter().map(|r| r[j] * r[j]).sum::<f64>() / rows.len() as f64;
    assert_eq!((var(0) / (var(0) + var(1)) * 10.0).round(), 8.0);
    assert!((p.explained_ratio[0] - var(0) / (var(0) + var(1))).abs() < 1e-9);
    assert!((p.explained_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(p.components[0][0].abs() > 0.999_999);

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|j| rng.gen_range(-1.0..1.0) * (j + 1) as f64).collect()).collect();
    let p = pca_export(&rows, 4).unwrap();
    for (r, pt) in rows.iter().zip(&p.points) {
        for (j, &x) in r.iter().enumerate() {
            let rec = p.mean[j] + (0..4).map(|c| pt[c] * p.components[c][j]).sum::<f64>();
            assert!((rec - x).abs() < 1e-4);
        }
    }
    assert!(pca_export(&rows[..1], 2).is_err());
    assert!(pca_export(&rows, 5).is_err());
}
