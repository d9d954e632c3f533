//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use usd_core::config::RunConfig;
use usd_core::debias::{debias_weight, final_loss, ips_mean, ClipRange};
use usd_core::experiment::{self, run_ablation};
use usd_core::graph::{bce_term, sigmoid, ComputeGraph};
use usd_core::metrics::{self, pairwise_concordance, GaucWeighting};
use usd_core::parallel;
use usd_core::sampling::{self, Cohort};
use usd_core::train::{self, CtrSample, TrainConfig, TrainingSet, Variant};
use usd_core::uiem::{UiemConfig, UiemParams};
use usd_core::world::{
    generate_world, item_click_probability, simulate_days, ExposureRecord, SimParams, UserDayContext,
    WorldConfig, FIRST_LABEL_DAY, LOOKBACK_DAYS, SEQ_LEN,
};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all = true;
    for seed in [1, 2, 3] {
        let report = experiment::gradcheck(seed, 1e-4, 1e-4, 1e-4, None).unwrap();
        worst = worst.max(report.max_rel_err());
        all &= report.passed && report.max_rel_err() < 1e-4;
    }
    let elapsed = t0.elapsed();
    let (u, c) = experiment::gradcheck_configs();
    let shapes = u.d_model == 8 && u.seq_len == 8 && u.layers == 1 && c.dim == 8 && c.max_behaviors == 4;
    outcome(
        all && shapes && elapsed < Duration::from_secs(120),
        format!("3 seeds, max rel err {worst:.2e} (< 1e-4), {elapsed:.1?} (< 120s)"),
    )
}

/// Counts ordered pairs directly.
fn oracle_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut hits = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| hits / pairs)
}

fn metric_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA0C0 + trial);
        let users = rng.random_range(1..=20u32);
        let (mut ids, mut scores, mut labels) = (vec![], vec![], vec![]);
        for u in 0..users {
            for _ in 0..rng.random_range(1..=30) {
                ids.push(u);
                // coarse grid so ties are common
                scores.push((rng.random_range(0..12) as f64) / 7.0);
                labels.push(rng.random_bool(0.3) as u8);
            }
        }
        let mut groups: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for ((&u, &s), &l) in ids.iter().zip(&scores).zip(&labels) {
            let g = groups.entry(u).or_default();
            g.0.push(s);
            g.1.push(l);
        }
        let per_user: Vec<(f64, f64, f64)> = groups
            .values()
            .filter_map(|(s, l)| {
                let clicks = l.iter().filter(|&&x| x == 1).count() as f64;
                oracle_auc(s, l).map(|a| (a, l.len() as f64, clicks))
            })
            .collect();
        let weighted = |w: fn(&(f64, f64, f64)) -> f64| -> Option<f64> {
            let den: f64 = per_user.iter().map(w).sum();
            (den > 0.0).then(|| per_user.iter().map(|t| w(t) * t.0).sum::<f64>() / den)
        };
        let pairs = [
            (metrics::auc(&scores, &labels).ok(), oracle_auc(&scores, &labels)),
            (
                metrics::gauc(&ids, &scores, &labels, GaucWeighting::Avg).ok(),
                weighted(|_| 1.0),
            ),
            (
                metrics::gauc(&ids, &scores, &labels, GaucWeighting::Show).ok(),
                weighted(|t| t.1),
            ),
            (
                metrics::gauc(&ids, &scores, &labels, GaucWeighting::Click).ok(),
                weighted(|t| t.2),
            ),
        ];
        for (got, want) in pairs {
            match (got, want) {
                (Some(g), Some(w)) => {
                    worst = worst.max((g - w).abs());
                    checked += 1;
                }
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
        }
    }
    outcome(
        worst <= 1e-12,
        format!("50 datasets, {checked} metric values, max |diff| {worst:.1e} (<= 1e-12)"),
    )
}

fn random_world_config(rng: &mut impl Rng) -> WorldConfig {
    WorldConfig {
        users: rng.random_range(1..=30),
        items: rng.random_range(3..=20),
        num_days: rng.random_range(FIRST_LABEL_DAY + 2..=FIRST_LABEL_DAY + 12),
        exposures_per_user_day: rng.random_range(1..=3),
        portal_beta: (rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)),
        block_beta: (rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)),
        eval_days: 1,
        ..WorldConfig::default()
    }
}

fn sampler_exactness() -> Outcome {
    let mut failures = Vec::new();
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5A30 + trial);
        let cfg = random_world_config(&mut rng);
        let sim = generate_world(&cfg, trial).unwrap().simulate().unwrap();
        let exposures: Vec<ExposureRecord> = sim
            .exposures
            .iter()
            .filter(|e| e.day >= FIRST_LABEL_DAY)
            .cloned()
            .collect();
        let contexts = &sim.contexts;

        let visited: HashSet<(u32, u32)> = contexts.iter().filter(|c| c.y_p == 1).map(|c| c.key()).collect();
        let clicked: HashSet<(u32, u32)> = contexts.iter().filter(|c| c.y_b == 1).map(|c| c.key()).collect();
        let want_confident: Vec<ExposureRecord> = exposures
            .iter()
            .filter(|e| visited.contains(&(e.user_id, e.day)))
            .cloned()
            .collect();
        let confident = sampling::sample_confident(&exposures, contexts).unwrap();
        if confident != want_confident {
            failures.push(format!("world {trial}: sample_confident"));
        }

        // recomputed from the raw sequence, not from the stored r_p flag
        let want_uiem: Vec<&UserDayContext> = contexts
            .iter()
            .filter(|c| c.sequence[SEQ_LEN - LOOKBACK_DAYS..].iter().any(|&t| t != -1))
            .collect();
        let uiem = sampling::sample_uiem_training(contexts);
        if uiem.iter().collect::<Vec<_>>() != want_uiem {
            failures.push(format!("world {trial}: sample_uiem_training"));
        }

        let keys: BTreeSet<(u32, u32)> = confident.iter().map(|e| (e.user_id, e.day)).collect();
        let want_block: BTreeSet<(u32, u32)> = keys.iter().copied().filter(|k| clicked.contains(k)).collect();
        let want_portal: BTreeSet<(u32, u32)> = keys.iter().copied().filter(|k| !clicked.contains(k)).collect();
        let (portal, block) = sampling::partition(&confident, contexts).unwrap();
        let disjoint = portal.is_disjoint(&block);
        let exhaustive = portal.union(&block).copied().collect::<BTreeSet<_>>() == keys;
        if portal != want_portal || block != want_block || !disjoint || !exhaustive {
            failures.push(format!("world {trial}: partition"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "100 worlds, 3 samplers equal their oracles; partition disjoint and exhaustive".into()
        } else {
            format!("{} mismatches, first: {}", failures.len(), failures[0])
        },
    )
}

fn constants() -> Outcome {
    let clip = ClipRange::DEFAULT;
    let defaults = TrainConfig::default();
    let configured = defaults.alpha == 1e-4
        && defaults.beta == 1e-4
        && defaults.clip_lo == 1.0
        && defaults.clip_hi == 15.0
        && defaults.learning_rate == 0.01
        && defaults.batch_size_ctr == 1024;

    let mut outputs = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut record = |p: f64, b: f64| {
        for cohort in [Cohort::Portal, Cohort::Block] {
            let w = debias_weight(cohort, p, b, clip);
            lo = lo.min(w);
            hi = hi.max(w);
        }
        outputs += 1;
    };
    // 90k outputs of randomly initialised intent models on random histories
    let ucfg = UiemConfig::default();
    for model in 0..9u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0 + model);
        let uiem = UiemParams::init(&ucfg, &mut rng).unwrap();
        let seqs: Vec<Vec<i8>> = (0..10_000)
            .map(|_| (0..SEQ_LEN).map(|_| rng.random_range(-1..=1i8)).collect())
            .collect();
        let ctxs: Vec<UserDayContext> = seqs
            .into_iter()
            .enumerate()
            .map(|(i, sequence)| UserDayContext {
                user_id: i as u32,
                day: FIRST_LABEL_DAY,
                y_p: 0,
                y_b: 0,
                r_p: 1,
                sequence,
            })
            .collect();
        let refs: Vec<&UserDayContext> = ctxs.iter().collect();
        for e in uiem.predict_contexts(&refs).unwrap() {
            record(e.y_hat_p, e.y_hat_b);
        }
    }
    // 10k arbitrary sigmoid outputs, including the saturated ends
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    for i in 0..10_000 {
        let (p, b) = match i {
            0 => (0.0, 0.0),
            1 => (1.0, 1.0),
            2 => (1.0, 0.0),
            _ => (rng.random::<f64>(), rng.random::<f64>()),
        };
        record(p, b);
    }
    let hand = final_loss(1.0, 0.7, 0.7, defaults.alpha, defaults.beta);
    let pass = configured && outputs == 100_000 && lo >= 1.0 && hi <= 15.0 && (hand - 1.00014).abs() <= 1e-12;
    outcome(
        pass,
        format!(
            "{outputs} outputs, weights in [{lo:.3}, {hi:.3}] within [1, 15]; final_loss(1, 0.7, 0.7) = {hand:?}"
        ),
    )
}

fn ips_unbiasedness() -> Outcome {
    let t0 = Instant::now();
    let cfg = WorldConfig {
        users: 500,
        ..WorldConfig::default()
    };
    let world = generate_world(&cfg, 17).unwrap();
    let params = SimParams::of(&cfg);

    // A fixed per-user-day loss, defined for every user-day whether or not
    // it is sampled: BCE of a crude predictor on a counterfactual label
    // drawn as if the user had looked at the block.
    let loss_of = |user: u32, day: u32| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(((user as u64) << 32) | day as u64);
        let u = &world.users[user as usize];
        let item = &world.items[rng.random_range(0..world.items.len())];
        let p = item_click_probability(u, item, cfg.click_bias);
        let label = rng.random_bool(p) as u8 as f64;
        let pred = sigmoid(0.5 * u.preference.iter().zip(&item.embedding).map(|(a, b)| a * b).sum::<f64>());
        bce_term(label, pred)
    };

    let mut covered = 0;
    for trial in 0..100u64 {
        let sim = simulate_days(&world.users, &world.items, &params, 1000 + trial).unwrap();
        let population = sim.contexts.len();
        let truth = sim.contexts.iter().map(|c| loss_of(c.user_id, c.day)).sum::<f64>() / population as f64;
        let sampled: Vec<(f64, f64)> = sim
            .contexts
            .iter()
            .filter(|c| c.y_b == 1)
            .map(|c| {
                let (p, b) = world.oracle_propensities(c.user_id).unwrap();
                (loss_of(c.user_id, c.day), p * b)
            })
            .collect();
        let est = ips_mean(&sampled, population).unwrap();
        if (est.mean - truth).abs() <= 3.0 * est.std_error {
            covered += 1;
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        covered >= 95 && elapsed < Duration::from_secs(300),
        format!("{covered}/100 trials within 3 SE (>= 95), {elapsed:.1?} (< 300s)"),
    )
}

fn uiem_learnability() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let world_cfg = WorldConfig {
        users: 2000,
        ..cfg.world.clone()
    };
    let world = generate_world(&world_cfg, 23).unwrap();
    let sim = world.simulate().unwrap();
    let dataset = usd_core::dataset::Dataset {
        exposures: sim.exposures,
        contexts: sim.contexts,
    };
    let eval_start = world_cfg.eval_start_day();
    let set = TrainingSet::build(&dataset, Variant::Usd, eval_start, cfg.ctr.max_behaviors).unwrap();
    let out = train::train(&set, &world_cfg, &cfg.uiem, &cfg.ctr, &cfg.train).unwrap();

    let held_out: Vec<&UserDayContext> = dataset.contexts.iter().filter(|c| c.day >= eval_start).collect();
    let est = out.uiem.predict_contexts(&held_out).unwrap();
    let mut per_user: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (c, e) in held_out.iter().zip(&est) {
        let s = per_user.entry(c.user_id).or_default();
        s.0 += e.y_hat_p;
        s.1 += 1;
    }
    let (scores, truth): (Vec<f64>, Vec<f64>) = per_user
        .iter()
        .map(|(&u, &(sum, n))| (sum / n as f64, world.oracle_propensities(u).unwrap().0))
        .unzip();
    let conc = pairwise_concordance(&scores, &truth).unwrap();
    let elapsed = t0.elapsed();
    outcome(
        conc >= 0.75 && elapsed < Duration::from_secs(300),
        format!(
            "held-out AUC of y_hat_p vs portal_affinity {conc:.4} (>= 0.75) over {} users, {elapsed:.1?} (< 300s)",
            scores.len()
        ),
    )
}

fn ablation_directionality() -> Outcome {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    experiment::cmd_gen(&cfg, dir.path()).unwrap();
    let data = experiment::load_data(dir.path()).unwrap();
    let table = run_ablation(&cfg, &data, &[Variant::Usd, Variant::WoD, Variant::WoPs], &[1, 2, 3, 4, 5]).unwrap();
    let median = |v| table.median_of(v).map(|m| m.gauc_avg).unwrap_or(f64::NAN);
    let (usd, wo_d, wo_ps) = (median(Variant::Usd), median(Variant::WoD), median(Variant::WoPs));
    outcome(
        table.failures() == 0 && usd >= wo_d && usd >= wo_ps,
        format!("median gauc_avg over 5 seeds: usd {usd:.5}, wo_d {wo_d:.5}, wo_ps {wo_ps:.5}"),
    )
}

fn pipeline_metrics(cfg: &RunConfig, root: &Path, threads: usize) -> Vec<u8> {
    parallel::with_threads(threads, || {
        let (data, model, eval) = (root.join("data"), root.join("model"), root.join("eval"));
        experiment::cmd_gen(cfg, &data).unwrap();
        experiment::cmd_train(cfg, &data, Some(Variant::Usd), &model).unwrap();
        experiment::cmd_eval(&model.join(experiment::CHECKPOINT_FILE), &data, &eval).unwrap();
        std::fs::read(eval.join(experiment::METRICS_FILE)).unwrap()
    })
}

fn determinism() -> Outcome {
    let cfg = RunConfig::default();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let a = pipeline_metrics(&cfg, dirs[0].path(), 1);
    let b = pipeline_metrics(&cfg, dirs[1].path(), 1);
    let c = pipeline_metrics(&cfg, dirs[2].path(), 4);
    outcome(
        !a.is_empty() && a == b && a == c,
        format!(
            "metrics.csv ({} bytes) identical across two runs and 1 vs 4 threads: {}",
            a.len(),
            a == b && a == c
        ),
    )
}

fn variant_identities() -> Outcome {
    let cfg = RunConfig::default();
    let world_cfg = WorldConfig {
        users: 150,
        ..cfg.world.clone()
    };
    let sim = generate_world(&world_cfg, 5).unwrap().simulate().unwrap();
    let dataset = usd_core::dataset::Dataset {
        exposures: sim.exposures,
        contexts: sim.contexts,
    };
    let start = world_cfg.eval_start_day();
    let max_beh = cfg.ctr.max_behaviors;

    // wo_d batch loss against a hand-rolled mean BCE
    let wo_d_set = TrainingSet::build(&dataset, Variant::WoD, start, max_beh).unwrap();
    let (uiem, ctr) = train::init_models(&cfg.uiem, &cfg.ctr, world_cfg.users, world_cfg.items, 9).unwrap();
    let batch: Vec<&CtrSample> = wo_d_set.ctr.iter().take(64).collect();
    let weights = train::batch_weights(Variant::WoD, &batch, &uiem, &wo_d_set.contexts, ClipRange::DEFAULT).unwrap();
    let mut g = ComputeGraph::new();
    let node = train::ctr_loss_node(&mut g, &ctr, &batch, &weights).unwrap();
    let graph_loss = g.value(node).values()[0];
    let inputs: Vec<_> = batch.iter().map(|s| s.input()).collect();
    let preds = ctr.predict_many(&inputs).unwrap();
    let mean_bce = batch
        .iter()
        .zip(&preds)
        .map(|(s, &p)| bce_term(s.record.label as f64, p))
        .sum::<f64>()
        / batch.len() as f64;
    let bce_diff = (graph_loss - mean_bce).abs();
    let bce_ok = weights.iter().all(|&w| w == 1.0) && bce_diff <= 4.0 * f64::EPSILON * mean_bce.abs();

    // usd with clip [1, 1] trains exactly like wo_d
    let tc = TrainConfig {
        epochs: 2,
        ..cfg.train.clone()
    };
    let usd_set = TrainingSet::build(&dataset, Variant::Usd, start, max_beh).unwrap();
    let usd = train::train(
        &usd_set,
        &world_cfg,
        &cfg.uiem,
        &cfg.ctr,
        &TrainConfig {
            variant: Variant::Usd,
            clip_hi: 1.0,
            ..tc.clone()
        },
    )
    .unwrap();
    let wo_d = train::train(
        &wo_d_set,
        &world_cfg,
        &cfg.uiem,
        &cfg.ctr,
        &TrainConfig {
            variant: Variant::WoD,
            ..tc
        },
    )
    .unwrap();
    let same = usd.losses == wo_d.losses && usd.ctr.store == wo_d.ctr.store && !usd.losses.is_empty();
    outcome(
        bce_ok && same,
        format!(
            "wo_d loss vs mean BCE |diff| {bce_diff:.1e}; usd clip [1,1] vs wo_d: {} steps, identical losses and weights: {same}",
            usd.losses.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("metric oracle equivalence", metric_oracle),
        ("sampler exactness", sampler_exactness),
        ("constants", constants),
        ("ips unbiasedness", ips_unbiasedness),
        ("uiem learnability", uiem_learnability),
        ("ablation directionality", ablation_directionality),
        ("determinism", determinism),
        ("variant identities", variant_identities),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "[{}] {}. {name}: {} ({:.1?})",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            t0.elapsed()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
