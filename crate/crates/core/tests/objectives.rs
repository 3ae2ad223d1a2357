use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use wl_core::gradsuite::{self, stage1_case, tiny_stage1_config, Term};
use wl_core::objectives::masking::mask_count;
use wl_core::objectives::pretrain::{curve_csv, write_curve};
use wl_core::objectives::*;
use wl_core::tensor::checkpoint;
use wl_core::tensor::gradcheck::Precision;
use wl_core::tensor::Graph;
use wl_core::vlm::model::random_clip;
use wl_core::vlm::vocab::{BOS, EOS, MASK, PAD, UNK};
use wl_core::vlm::Stage1Model;

#[test]
fn loss_gradients_match_finite_differences() {
    for p in [Precision::F32, Precision::F64] {
        for r in gradsuite::run(p, 3).unwrap() {
            assert!(r.passes(), "{} {:?}: {:.3e} at {}", r.name, p, r.report.max_rel_err, r.report.worst);
        }
    }
}

#[test]
fn masking_never_touches_prompt_or_reserved() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
    let prompts = Prompts { caption: vec![7, 8, 9], align: vec![10] };
    let settings = LossSettings::default();
    let cfg = tiny_stage1_config();
    let reserved = [PAD, MASK, BOS, EOS, UNK];
    for _ in 0..1000 {
        let len = rng.gen_range(0..6);
        let caption: Vec<usize> = (0..len).map(|_| rng.gen_range(0..16)).collect();
        let s = Sample { clip: random_clip(&cfg, 1, &mut rng), caption };
        let plans = sample_plans(&[&s], &prompts, &settings, &mut rng).unwrap();
        let maskable = s.caption.iter().filter(|c| !reserved.contains(c)).count();
        for (p, ratio) in [(&plans.mgc[0], 0.6), (&plans.mlm[0], 0.1)] {
            assert_eq!(p.positions.len(), mask_count(maskable, ratio));
            for (&pos, &t) in p.positions.iter().zip(&p.targets) {
                assert!(pos >= prompts.caption.len());
                assert!(!reserved.contains(&t));
                assert_eq!(p.input_ids[pos], MASK);
            }
        }
    }
}

#[test]
fn combined_loss_is_the_mean_of_independent_terms() {
    let (case, store) = stage1_case(Term::Valor, 3, 5).unwrap();
    let store = store.cast::<f32>();
    let batch: Vec<&Sample> = case.batch.iter().collect();
    let g = Graph::inference(&store);
    let t = case.model.valor_loss(&g, &batch, &case.prompts, &case.plans, &case.settings).unwrap();
    let total = g.scalar(t.total) as f64;

    let g = Graph::inference(&store);
    let videos: Vec<_> = batch.iter().map(|s| case.model.encode_video(&g, &s.clip).unwrap()).collect();
    let caps: Vec<Vec<usize>> = batch.iter().map(|s| s.caption.clone()).collect();
    let mga = g.scalar(case.model.mga_loss(&g, &videos, &caps, &case.prompts, true).unwrap()) as f64;
    let g = Graph::inference(&store);
    let videos: Vec<_> = batch.iter().map(|s| case.model.encode_video(&g, &s.clip).unwrap()).collect();
    let mgc = g.scalar(case.model.masked_loss(&g, &videos, &case.plans.mgc, true).unwrap()) as f64;
    let mlm = g.scalar(case.model.masked_loss(&g, &videos, &case.plans.mlm, false).unwrap()) as f64;
    assert!((total - (mga + mgc + mlm) / 3.0).abs() < 1e-6);
}

#[test]
fn empty_plans_are_rejected() {
    let (case, store) = stage1_case(Term::Mgc, 1, 1).unwrap();
    let g = Graph::inference(&store);
    let v = case.model.encode_video(&g, &case.batch[0].clip).unwrap();
    let empty = MaskingPlan::at(&[5, 6, 9], &[]);
    assert!(matches!(case.model.masked_loss(&g, &[v], &[empty], true), Err(wl_core::Error::Input(_))));
    assert!(matches!(case.model.mga_loss(&g, &[], &[], &case.prompts, true), Err(wl_core::Error::Input(_))));
}

fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
    let cfg = tiny_stage1_config();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n).map(|i| Sample { clip: random_clip(&cfg, 2, &mut rng), caption: vec![8 + i % 8, 9 + (i * 3) % 7, 12] }).collect()
}

#[test]
fn pretraining_plumbing_and_determinism() {
    let cfg = tiny_stage1_config();
    let prompts = Prompts { caption: vec![5, 6], align: vec![7] };
    let samples = tiny_samples(2, 1);
    let tc = TrainConfig { batch_size: 1, epochs: 1, seed: 4, ..TrainConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for run in 0..2 {
        let (m, mut store) = Stage1Model::init(&cfg, 2).unwrap();
        let curve = train_stage1(&m, &mut store, &samples, &prompts, &tc).unwrap();
        assert_eq!(curve.len(), 2);
        let ck = dir.path().join(format!("run{run}.wlcp"));
        checkpoint::save_store(&store, &ck, |_| true).unwrap();
        assert!(ck.exists());
        write_curve(&dir.path().join("curve.csv"), &curve).unwrap();
        digests.push(std::fs::read(&ck).unwrap());
    }
    assert_eq!(digests[0], digests[1]);
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert!(csv.starts_with("step,lr,L_MGA,L_MGC,L_MLM,L_total\n"));
    assert_eq!(csv.lines().count(), 3);

    let (m, mut store) = Stage1Model::init(&cfg, 2).unwrap();
    assert!(matches!(train_stage1(&m, &mut store, &[], &prompts, &tc), Err(wl_core::Error::Config(_))));
}

#[test]
fn two_hundred_steps_reduce_the_losses() {
    let cfg = tiny_stage1_config();
    let prompts = Prompts { caption: vec![5, 6], align: vec![7] };
    let samples = tiny_samples(8, 2);
    let tc = TrainConfig { batch_size: 4, epochs: 100, lr_max: 3e-3, seed: 1, ..TrainConfig::default() };
    let (m, mut store) = Stage1Model::init(&cfg, 3).unwrap();
    let curve = train_stage1(&m, &mut store, &samples, &prompts, &tc).unwrap();
    assert_eq!(curve.len(), 200);
    let head = &curve[..10];
    let tail = &curve[190..];
    let avg = |rows: &[CurveRow], f: fn(&CurveRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    assert!(avg(tail, |r| r.mgc) < avg(head, |r| r.mgc));
    assert!(avg(tail, |r| r.mga) < 0.5 * avg(head, |r| r.mga));
    assert!(curve_csv(&curve).lines().count() == 201);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn mask_count_is_the_ceiling(n in 0usize..200, ratio in 0.0f64..=1.0) {
        let c = mask_count(n, ratio);
        prop_assert!(c <= n);
        prop_assert!(c as f64 >= ratio * n as f64 - 1e-6);
        prop_assert!((c as f64) < ratio * n as f64 + 1.0);
    }
}
