use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use wl_core::tensor::checkpoint;
use wl_core::tensor::gradcheck::{grad_check, Objective, Precision};
use wl_core::tensor::graph::Segments;
use wl_core::tensor::optim::{clip_global_norm, AdamW, CosineSchedule};
use wl_core::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use wl_core::Result;

const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "mul_row",
    "mul_scalar_var",
    "scale",
    "add_scalar",
    "matmul",
    "matmul_nt",
    "transpose",
    "reshape",
    "relu",
    "gelu",
    "exp",
    "log",
    "clamp_max",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l2_normalize_rows",
    "sum",
    "mean",
    "sum_rows",
    "sum_cols",
    "gather_rows",
    "concat_rows",
    "concat_cols",
    "slice_cols",
    "pick",
    "cross_entropy",
    "conv1d",
    "similarity_matrix",
];

struct Case {
    op: &'static str,
    ids: Vec<ParamId>,
    idx: Vec<usize>,
    dims: Vec<usize>,
}

impl Objective for Case {
    fn eval<S: Real>(&self, g: &Graph<'_, S>) -> Result<Var> {
        let p = |i: usize| g.param(self.ids[i]);
        let d = &self.dims;
        let y = match self.op {
            "add" => g.add(p(0), p(1))?,
            "sub" => g.sub(p(0), p(1))?,
            "mul" => g.mul(p(0), p(1))?,
            "div" => g.div(p(0), p(1))?,
            "add_row" => g.add_row(p(0), p(1))?,
            "mul_row" => g.mul_row(p(0), p(1))?,
            "mul_scalar_var" => g.mul_scalar_var(p(0), p(1))?,
            "scale" => g.scale(p(0), S::lit(-1.7))?,
            "add_scalar" => g.add_scalar(p(0), S::lit(0.3))?,
            "matmul" => g.matmul(p(0), p(1))?,
            "matmul_nt" => g.matmul_nt(p(0), p(1))?,
            "transpose" => g.transpose(p(0))?,
            "reshape" => g.reshape(p(0), &[d[0] * d[1]])?,
            "relu" => g.relu(p(0))?,
            "gelu" => g.gelu(p(0))?,
            "exp" => g.exp(p(0))?,
            "log" => g.log(p(0))?,
            "clamp_max" => g.clamp_max(p(0), S::lit(0.1))?,
            "softmax" => g.softmax(p(0))?,
            "log_softmax" => g.log_softmax(p(0))?,
            "layer_norm" => g.layer_norm(p(0), p(1), p(2), 1e-5)?,
            "l2_normalize_rows" => g.l2_normalize_rows(p(0))?,
            "sum" => g.sum(p(0))?,
            "mean" => g.mean(p(0))?,
            "sum_rows" => g.sum_rows(p(0))?,
            "sum_cols" => g.sum_cols(p(0))?,
            "gather_rows" => g.gather_rows(p(0), &self.idx)?,
            "concat_rows" => g.concat_rows(&[p(0), p(1)])?,
            "concat_cols" => g.concat_cols(&[p(0), p(1)])?,
            "slice_cols" => g.slice_cols(p(0), self.idx[0], self.idx[1])?,
            "pick" => g.pick(p(0), &self.idx)?,
            "cross_entropy" => g.cross_entropy(p(0), &self.idx)?,
            "conv1d" => g.conv1d(p(0), p(1), self.idx[0])?,
            "similarity_matrix" => {
                let (a, b) = (self.idx[0], self.idx[1]);
                let tseg = Segments::from_lengths(&self.idx[2..2 + a]);
                let vseg = Segments::from_lengths(&self.idx[2 + a..2 + a + b]);
                g.similarity_matrix(p(0), p(1), tseg, p(2), p(3), vseg)?
            }
            other => panic!("unknown op {other}"),
        };
        // fixed irregular weights so that sum-preserving ops still have informative gradients
        let n = g.value(y).len();
        let w = Tensor::from_fn(&[n], |k| S::lit((1.3 * k as f64 + 0.7).sin()));
        let w = g.input(w)?;
        let flat = g.reshape(y, &[n])?;
        g.sum(g.mul(flat, w)?)
    }
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn build(op: &'static str, seed: u64) -> (ParamStore<f64>, Case) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut s = ParamStore::<f64>::new();
    let r = rng.gen_range(1..=5usize);
    let c = rng.gen_range(1..=5usize);
    let mut ids = Vec::new();
    let mut idx = Vec::new();
    let mut add = |s: &mut ParamStore<f64>, t: Tensor<f64>| {
        let id = s.add(format!("p{}", s.len()), t).unwrap();
        ids.push(id);
    };
    match op {
        "add" | "sub" | "mul" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
        }
        "div" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            add(&mut s, rand_tensor(&mut rng, &[r, c], 0.5, 2.0));
        }
        "add_row" | "mul_row" | "layer_norm" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c + 1], -2.0, 2.0));
            add(&mut s, rand_tensor(&mut rng, &[c + 1], -2.0, 2.0));
            if op == "layer_norm" {
                add(&mut s, rand_tensor(&mut rng, &[c + 1], -2.0, 2.0));
            }
        }
        "mul_scalar_var" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            add(&mut s, rand_tensor(&mut rng, &[1], -2.0, 2.0));
        }
        "matmul" => {
            let k = rng.gen_range(1..=5);
            add(&mut s, rand_tensor(&mut rng, &[r, k], -2.0, 2.0));
            add(&mut s, rand_tensor(&mut rng, &[k, c], -2.0, 2.0));
        }
        "matmul_nt" => {
            let k = rng.gen_range(1..=5);
            add(&mut s, rand_tensor(&mut rng, &[r, k], -2.0, 2.0));
            add(&mut s, rand_tensor(&mut rng, &[c, k], -2.0, 2.0));
        }
        "log" => add(&mut s, rand_tensor(&mut rng, &[r, c], 0.2, 3.0)),
        "gather_rows" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            idx = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..r)).collect();
        }
        "concat_rows" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            let extra = rng.gen_range(1..=4);
            add(&mut s, rand_tensor(&mut rng, &[extra, c], -2.0, 2.0));
        }
        "concat_cols" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            let extra = rng.gen_range(1..=4);
            add(&mut s, rand_tensor(&mut rng, &[r, extra], -2.0, 2.0));
        }
        "slice_cols" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            let start = rng.gen_range(0..c);
            idx = vec![start, rng.gen_range(1..=c - start)];
        }
        "pick" | "cross_entropy" => {
            add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0));
            idx = (0..r).map(|_| rng.gen_range(0..c)).collect();
        }
        "conv1d" => {
            let len = rng.gen_range(1..=8);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            add(&mut s, rand_tensor(&mut rng, &[len, c], -2.0, 2.0));
            let cout = rng.gen_range(1..=4);
            add(&mut s, rand_tensor(&mut rng, &[k, c, cout], -1.0, 1.0));
            idx = vec![rng.gen_range(1..=4)];
        }
        "similarity_matrix" => {
            let (a, b) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let tl: Vec<usize> = (0..a).map(|_| rng.gen_range(1..=4)).collect();
            let vl: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=4)).collect();
            let (nt, nv): (usize, usize) = (tl.iter().sum(), vl.iter().sum());
            let d = rng.gen_range(1..=4);
            add(&mut s, rand_tensor(&mut rng, &[nt, d], -1.0, 1.0));
            add(&mut s, rand_tensor(&mut rng, &[nt], 0.0, 1.0));
            add(&mut s, rand_tensor(&mut rng, &[nv, d], -1.0, 1.0));
            add(&mut s, rand_tensor(&mut rng, &[nv], 0.0, 1.0));
            idx = vec![a, b];
            idx.extend(tl);
            idx.extend(vl);
        }
        _ => add(&mut s, rand_tensor(&mut rng, &[r, c], -2.0, 2.0)),
    }
    let dims = s.get(ids[0]).shape().to_vec();
    let dims = if dims.len() == 1 { vec![dims[0], 1] } else { dims };
    (s, Case { op, ids, idx, dims })
}

fn check_op(op: &'static str, seed: u64) {
    let (store, case) = build(op, seed);
    for prec in [Precision::F32, Precision::F64] {
        let r = grad_check(&case, &store, 1e-6, prec).unwrap();
        assert!(r.passes(prec), "{op} seed {seed} {prec:?}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn every_op_passes_gradient_check(seed in any::<u64>()) {
        for op in OPS {
            check_op(op, seed);
        }
    }

    #[test]
    fn similarity_matches_nested_loops(seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let (nt, nv, d) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=5));
        let et = rand_tensor(&mut rng, &[nt, d], -1.0, 1.0);
        let ev = rand_tensor(&mut rng, &[nv, d], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[nt], 0.0, 1.0);
        let wv = rand_tensor(&mut rng, &[nv], 0.0, 1.0);
        let g = Graph::<f64>::new();
        let s = g.similarity_matrix(
            g.input(et.clone()).unwrap(), g.input(wt.clone()).unwrap(), Segments::from_lengths(&[nt]),
            g.input(ev.clone()).unwrap(), g.input(wv.clone()).unwrap(), Segments::from_lengths(&[nv]),
        ).unwrap();
        let dotp = |i: usize, j: usize| (0..d).map(|k| et.at2(i, k) * ev.at2(j, k)).sum::<f64>();
        let mut text = 0.0;
        for i in 0..nt {
            let m = (0..nv).map(|j| dotp(i, j)).fold(f64::NEG_INFINITY, f64::max);
            text += wt.data()[i] * m;
        }
        let mut video = 0.0;
        for j in 0..nv {
            let m = (0..nt).map(|i| dotp(i, j)).fold(f64::NEG_INFINITY, f64::max);
            video += wv.data()[j] * m;
        }
        prop_assert!((g.scalar(s) - (0.5 * text + 0.5 * video)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[4, 7], -50.0, 50.0);
        let g = Graph::<f32>::new();
        let y = g.softmax(g.input(x.cast()).unwrap()).unwrap();
        let v = g.value(y);
        for r in 0..4 {
            prop_assert!((v.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrips(seed in any::<u64>()) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let entries: Vec<(String, Tensor<f32>)> = (0..rng.gen_range(0..5))
            .map(|i| {
                let shape: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=4)).collect();
                (format!("t{i}"), rand_tensor(&mut rng, &shape, -3.0, 3.0).cast())
            })
            .collect();
        let bytes = checkpoint::encode(entries.iter().map(|(n, t)| (n.as_str(), t)));
        prop_assert_eq!(checkpoint::decode(&bytes).unwrap(), entries);
    }
}

fn train_trajectory(seed: u64) -> Vec<f32> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let w = store.add_normal("w", &[4, 3], 0.5, &mut rng).unwrap();
    let x = Tensor::<f32>::from_fn(&[6, 4], |_| rng.gen_range(-1.0..1.0));
    let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
    let sched = CosineSchedule { lr_max: 0.05, lr_min: 1e-4, warmup_steps: 3, total_steps: 20 };
    let mut opt = AdamW::default();
    for step in 0..20 {
        let g = Graph::with_params(&store);
        let logits = g.matmul(g.input(x.clone()).unwrap(), g.param(w)).unwrap();
        let loss = g.cross_entropy(logits, &targets).unwrap();
        let mut grads = g.backward(loss).unwrap().into_param_grads();
        drop(g);
        clip_global_norm(&mut grads, 5.0);
        opt.step(&mut store, &grads, sched.lr(step));
    }
    store.get(w).data().to_vec()
}

#[test]
fn identical_seeds_give_bit_identical_trajectories() {
    let a = train_trajectory(7);
    let b = train_trajectory(7);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_ne!(a, train_trajectory(8));
}

#[test]
fn random_matmul_gradient_matches_finite_differences() {
    let (store, case) = build("matmul", 4242);
    let r = grad_check(&case, &store, 1e-6, Precision::F32).unwrap();
    assert!(r.max_rel_err < 1e-3);
}
