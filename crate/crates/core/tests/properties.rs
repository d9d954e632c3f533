use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use usd_core::checkpoint::Checkpoint;
use usd_core::config::{world_document, world_from_document};
use usd_core::dataset::{read_dataset, write_dataset};
use usd_core::debias::{debias_weight, raw_weight, ClipRange};
use usd_core::gradcheck::finite_diff_check;
use usd_core::graph::{ComputeGraph, Var};
use usd_core::metrics::{self, GaucWeighting};
use usd_core::params::ParamStore;
use usd_core::sampling::{self, Cohort};
use usd_core::tensor::Tensor;
use usd_core::world::{generate_world, WorldConfig, FIRST_LABEL_DAY};
use usd_core::Result;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    // keep away from relu's kink so central differences stay valid
    Tensor::from_fn(rows, cols, |_, _| {
        let v: f64 = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Transpose,
    Sigmoid,
    Relu,
    Softmax,
    MaskedSoftmax,
    MeanRows,
    MeanCols,
    Gather,
    Concat,
    SliceRows,
    SliceCols,
    LayerNorm,
    Bce,
}

const OPS: [Op; 19] = [
    Op::Matmul,
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::Scale,
    Op::AddBias,
    Op::Transpose,
    Op::Sigmoid,
    Op::Relu,
    Op::Softmax,
    Op::MaskedSoftmax,
    Op::MeanRows,
    Op::MeanCols,
    Op::Gather,
    Op::Concat,
    Op::SliceRows,
    Op::SliceCols,
    Op::LayerNorm,
    Op::Bce,
];

/// Parameters `a` and `b` with shapes suited to `op`.
fn op_params(op: Op, m: usize, k: usize, n: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let (sa, sb) = match op {
        Op::Matmul => ((m, k), (k, n)),
        Op::AddBias => ((m, k), (1, k)),
        Op::Concat => ((m, k), (m, n)),
        // with fewer than 3 columns the normalized row is (nearly) constant
        // and its true gradient is of order eps, below what central
        // differences resolve at this tolerance
        Op::LayerNorm => ((m, k + 2), (1, k + 2)),
        _ => ((m, k), (m, k)),
    };
    let mut p = ParamStore::new();
    p.insert("a", random_tensor(rng, sa.0, sa.1));
    p.insert("b", random_tensor(rng, sb.0, sb.1));
    p
}

fn op_loss(op: Op, p: &ParamStore, seed: u64) -> Result<(ComputeGraph, Var)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = ComputeGraph::new();
    let a = g.param("a", p.get("a")?)?;
    let b = g.param("b", p.get("b")?)?;
    let (m, k) = (p.get("a")?.rows(), p.get("a")?.cols());
    let out = match op {
        Op::Matmul => g.matmul(a, b)?,
        Op::Add => g.add(a, b)?,
        Op::Sub => g.sub(a, b)?,
        Op::Mul => g.mul(a, b)?,
        Op::Scale => {
            let s = g.scale(a, -1.7)?;
            g.add(s, b)?
        }
        Op::AddBias => g.add_bias(a, b)?,
        Op::Transpose => {
            let t = g.transpose(a)?;
            let bt = g.transpose(b)?;
            g.mul(t, bt)?
        }
        Op::Sigmoid => {
            let s = g.sigmoid(a)?;
            g.mul(s, b)?
        }
        Op::Relu => {
            let r = g.relu(a)?;
            g.mul(r, b)?
        }
        Op::Softmax => g.softmax(a, None)?,
        Op::MaskedSoftmax => {
            let keep: Vec<bool> = (0..m * k).map(|i| i % k == 0 || rng.random_bool(0.6)).collect();
            g.softmax(a, Some(&keep))?
        }
        Op::MeanRows => g.mean_axis(a, 0)?,
        Op::MeanCols => g.mean_axis(a, 1)?,
        Op::Gather => {
            let ids: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..m)).collect();
            let rows = g.gather_rows(a, &ids)?;
            let other = g.gather_rows(b, &ids)?;
            g.mul(rows, other)?
        }
        Op::Concat => g.concat_cols(&[a, b])?,
        Op::SliceRows => {
            let lo = rng.random_range(0..m);
            let hi = rng.random_range(lo + 1..=m);
            g.slice_rows(a, lo, hi)?
        }
        Op::SliceCols => {
            let lo = rng.random_range(0..k);
            let hi = rng.random_range(lo + 1..=k);
            g.slice_cols(a, lo, hi)?
        }
        Op::LayerNorm => {
            let gain = g.sigmoid(b)?;
            g.layer_norm(a, gain, b, 1e-5)?
        }
        Op::Bce => {
            let pred = g.sigmoid(a)?;
            let n = m * k;
            let labels: Vec<f64> = (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..15.0)).collect();
            let l = g.bce(pred, &labels, &weights)?;
            let bs = g.sum_all(b)?;
            let small = g.scale(bs, 1e-3)?;
            g.add(l, small)?
        }
    };
    // random projection so that no op reduces to a constant-sum output
    let shape = g.value(out).shape().to_vec();
    let proj = Tensor::from_fn(shape[0], shape[1], |_, _| rng.random_range(-1.0..1.0));
    let c = g.constant(proj);
    let weighted = g.mul(out, c)?;
    let loss = g.sum_all(weighted)?;
    Ok((g, loss))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn primitive_gradients_match_finite_differences(
        op in 0..OPS.len(),
        m in 1usize..5,
        k in 1usize..5,
        n in 1usize..5,
        seed in any::<u64>(),
    ) {
        let op = OPS[op];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = op_params(op, m, k, n, &mut rng);
        let report = finite_diff_check(&params, |p| op_loss(op, p, seed), 1e-6, None).unwrap();
        prop_assert!(report.passed, "{op:?} m={m} k={k} n={n}: {report}");
    }
}

fn small_world(users: usize, items: usize, days: u32) -> WorldConfig {
    WorldConfig {
        users,
        items,
        num_days: days,
        eval_days: 1,
        ..WorldConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_round_trips(seed in any::<u64>(), users in 1usize..15, items in 2usize..12, extra in 1u32..6) {
        let sim = generate_world(&small_world(users, items, FIRST_LABEL_DAY + 1 + extra), seed)
            .unwrap()
            .simulate()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sim.exposures, &sim.contexts).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        prop_assert_eq!(back.exposures, sim.exposures);
        prop_assert_eq!(back.contexts, sim.contexts);
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive(seed in any::<u64>(), users in 1usize..25, extra in 1u32..8) {
        let sim = generate_world(&small_world(users, 10, FIRST_LABEL_DAY + 1 + extra), seed)
            .unwrap()
            .simulate()
            .unwrap();
        let exposures: Vec<_> = sim.exposures.iter().filter(|e| e.day >= FIRST_LABEL_DAY).cloned().collect();
        let confident = sampling::sample_confident(&exposures, &sim.contexts).unwrap();
        prop_assert!(confident.len() <= exposures.len());
        let (portal, block) = sampling::partition(&confident, &sim.contexts).unwrap();
        let keys: BTreeSet<(u32, u32)> = confident.iter().map(|e| (e.user_id, e.day)).collect();
        prop_assert!(portal.is_disjoint(&block));
        prop_assert_eq!(portal.union(&block).copied().collect::<BTreeSet<_>>(), keys);
        // every label-1 exposure belongs to a block-click user-day
        for e in &confident {
            if e.label == 1 {
                prop_assert!(block.contains(&(e.user_id, e.day)));
            }
        }
    }

    #[test]
    fn world_config_round_trips(
        users in 1usize..5000,
        taste in 0.0f64..=1.0,
        tilt in 0.0f64..5.0,
        promo in 0.0f64..3.0,
        bias in -3.0f64..3.0,
    ) {
        let cfg = WorldConfig {
            users,
            taste_share: taste,
            portal_exposure_tilt: tilt,
            promotion_strength: promo,
            click_bias: bias,
            ..WorldConfig::default()
        };
        let back = world_from_document(&world_document(&cfg), &[]).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn checkpoint_round_trips(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let mut params = ParamStore::new();
        let n = values.len();
        params.insert("ctr.w", Tensor::matrix(1, n, values.clone()).unwrap());
        params.insert("uiem.x", Tensor::matrix(n, 1, values).unwrap());
        let ckpt = Checkpoint {
            meta: vec![("variant".into(), "usd".into())],
            params,
        };
        let back = Checkpoint::parse(&ckpt.render().unwrap()).unwrap();
        prop_assert_eq!(back.params, ckpt.params);
        prop_assert_eq!(back.meta, ckpt.meta);
    }
}

fn oracle_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut hits = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                hits += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| hits / pairs)
}

fn scored_samples() -> impl Strategy<Value = (Vec<u32>, Vec<f64>, Vec<u8>)> {
    prop::collection::vec((0u32..8, 0i32..20, 0u8..2), 2..1000).prop_map(|rows| {
        let ids = rows.iter().map(|r| r.0).collect();
        let scores = rows.iter().map(|r| r.1 as f64 / 4.0).collect();
        let labels = rows.iter().map(|r| r.2).collect();
        (ids, scores, labels)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_matches_pairwise_oracle((_, scores, labels) in scored_samples()) {
        let got = metrics::auc(&scores, &labels).ok();
        let want = oracle_auc(&scores, &labels);
        match (got, want) {
            (Some(g), Some(w)) => prop_assert!((g - w).abs() <= 1e-12, "{g} vs {w}"),
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn metrics_invariant_under_monotone_transform((ids, scores, labels) in scored_samples()) {
        let moved: Vec<f64> = scores.iter().map(|s| 3.0 * s * s * s + s - 7.0).collect();
        prop_assert_eq!(metrics::auc(&scores, &labels).ok(), metrics::auc(&moved, &labels).ok());
        for w in [GaucWeighting::Avg, GaucWeighting::Show, GaucWeighting::Click] {
            prop_assert_eq!(
                metrics::gauc(&ids, &scores, &labels, w).ok(),
                metrics::gauc(&ids, &moved, &labels, w).ok()
            );
        }
    }

    #[test]
    fn perfect_and_reversed_scores((ids, _, labels) in scored_samples()) {
        let perfect: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let reversed: Vec<f64> = labels.iter().map(|&l| 1.0 - l as f64).collect();
        if let Ok(a) = metrics::auc(&perfect, &labels) {
            prop_assert_eq!(a, 1.0);
            prop_assert_eq!(metrics::auc(&reversed, &labels).unwrap(), 0.0);
        }
        if let Ok(g) = metrics::gauc(&ids, &perfect, &labels, GaucWeighting::Avg) {
            prop_assert_eq!(g, 1.0);
        }
    }

    #[test]
    fn gauc_lies_within_per_user_range((ids, scores, labels) in scored_samples()) {
        let users = metrics::per_user_auc(&ids, &scores, &labels).unwrap();
        let defined: Vec<f64> = users.iter().filter_map(|u| u.auc).collect();
        if let Ok(g) = metrics::gauc(&ids, &scores, &labels, GaucWeighting::Show) {
            let lo = defined.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = defined.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
        } else {
            prop_assert!(defined.is_empty());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn weights_stay_inside_the_clip_range(
        p in prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0],
        b in prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0],
        lo in 1.0f64..5.0,
        width in 0.0f64..20.0,
    ) {
        let clip = ClipRange::new(lo, lo + width).unwrap();
        for cohort in [Cohort::Portal, Cohort::Block] {
            let w = debias_weight(cohort, p, b, clip);
            prop_assert!(w >= clip.lo && w <= clip.hi, "{cohort:?} p={p} b={b} -> {w}");
        }
    }

    #[test]
    fn weights_are_monotone_in_the_propensity(p in 0.0f64..0.99, q in 0.0f64..0.99) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(raw_weight(Cohort::Portal, lo, 0.5) <= raw_weight(Cohort::Portal, hi, 0.5));
        let (lo, hi) = (lo + 0.01, hi + 0.01);
        prop_assert!(raw_weight(Cohort::Block, 0.5, lo) >= raw_weight(Cohort::Block, 0.5, hi));
    }
}
