//! Joint training of the CTR model and the intent model.
//!
//! Every step draws one CTR mini-batch from the variant's sample set and one
//! intent mini-batch from the intent training set, and descends
//! `L'_CTR + alpha * L_portal + beta * L_block`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::ctr::{BehaviorIndex, CtrConfig, CtrInput, CtrParams};
use crate::dataset::Dataset;
use crate::debias::{debias_weight, ClipRange};
use crate::error::{Error, Result};
use crate::graph::ComputeGraph;
use crate::optim::AdagradDecay;
use crate::sampling::{self, Cohort, UserDay};
use crate::uiem::{self, IntentEstimate, UiemConfig, UiemParams};
use crate::world::{stream_rng, ExposureRecord, UserDayContext, WorldConfig, FIRST_LABEL_DAY};

const STREAM_UIEM_INIT: u64 = 0x5549_454d;
const STREAM_CTR_INIT: u64 = 0x0043_5452;
const STREAM_CTR_SHUFFLE: u64 = 0x5348_5546;
const STREAM_UIEM_SHUFFLE: u64 = 0x5553_4855;
const STREAM_PRETRAIN: u64 = 0x5052_4554;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Every exposure, unweighted.
    Base,
    /// Intent-driven sampling plus dual weighting.
    Usd,
    /// Block-click user-days only, dual weighting kept.
    WoPs,
    /// Intent-driven sampling, unit weights.
    WoD,
    /// Intent-driven sampling, block weighting only.
    WoP,
    /// Intent-driven sampling, portal weighting only.
    WoB,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::Usd,
        Variant::WoPs,
        Variant::WoD,
        Variant::WoP,
        Variant::WoB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Usd => "usd",
            Variant::WoPs => "wo_ps",
            Variant::WoD => "wo_d",
            Variant::WoP => "wo_p",
            Variant::WoB => "wo_b",
        }
    }

    /// Whether any sample of this variant can get a non-unit weight.
    pub fn uses_weights(self) -> bool {
        !matches!(self, Variant::Base | Variant::WoD)
    }

    /// Weight of one sample given its cohort and the intent estimates of
    /// its user-day.
    pub fn weight(self, cohort: Option<Cohort>, y_hat_p: f64, y_hat_b: f64, clip: ClipRange) -> f64 {
        let portal = matches!(self, Variant::Usd | Variant::WoPs | Variant::WoB);
        let block = matches!(self, Variant::Usd | Variant::WoPs | Variant::WoP);
        match cohort {
            Some(Cohort::Portal) if portal => debias_weight(Cohort::Portal, y_hat_p, y_hat_b, clip),
            Some(Cohort::Block) if block => debias_weight(Cohort::Block, y_hat_p, y_hat_b, clip),
            _ => 1.0,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UiemMode {
    /// Both models descend the joint objective together.
    CoTrain,
    /// The intent model is fit on its own losses first, then frozen.
    PretrainFreeze,
}

impl UiemMode {
    pub fn name(self) -> &'static str {
        match self {
            UiemMode::CoTrain => "cotrain",
            UiemMode::PretrainFreeze => "pretrain_freeze",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub learning_rate: f64,
    pub batch_size_ctr: usize,
    pub batch_size_uiem: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub decay: f64,
    pub epsilon: f64,
    pub accumulator_init: f64,
    pub uiem_mode: UiemMode,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-4,
            clip_lo: 1.0,
            clip_hi: 15.0,
            learning_rate: 0.01,
            batch_size_ctr: 1024,
            // the intent model sees one batch per CTR step; 1024 would
            // quadruple its cost for no measurable gain in the weights
            batch_size_uiem: 256,
            epochs: 20,
            seed: 0,
            variant: Variant::Usd,
            decay: 0.9999,
            epsilon: 1e-8,
            accumulator_init: 0.0,
            uiem_mode: UiemMode::CoTrain,
            pretrain_epochs: 3,
        }
    }
}

impl TrainConfig {
    /// Batch size 1024 for both models; everything else as the defaults.
    pub fn large_batch_preset() -> Self {
        Self {
            batch_size_ctr: 1024,
            batch_size_uiem: 1024,
            ..Self::default()
        }
    }

    pub fn clip(&self) -> Result<ClipRange> {
        ClipRange::new(self.clip_lo, self.clip_hi)
    }

    pub fn validate(&self) -> Result<()> {
        self.clip()?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "train.alpha and train.beta must be finite and >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.batch_size_ctr == 0 || self.batch_size_uiem == 0 {
            return Err(Error::Config("train batch sizes must be > 0".into()));
        }
        AdagradDecay::new(self.learning_rate, self.decay, self.epsilon, self.accumulator_init)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("train: {m}")),
                other => other,
            })?;
        Ok(())
    }

    fn optimizer(&self) -> Result<AdagradDecay> {
        AdagradDecay::new(self.learning_rate, self.decay, self.epsilon, self.accumulator_init)
    }
}

/// One CTR training or evaluation sample with its behavior list resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct CtrSample {
    pub record: ExposureRecord,
    pub cohort: Option<Cohort>,
    pub behaviors: Vec<u32>,
}

impl CtrSample {
    pub fn input(&self) -> CtrInput<'_> {
        CtrInput {
            user_id: self.record.user_id,
            item_id: self.record.item_id,
            behaviors: &self.behaviors,
        }
    }

    pub fn key(&self) -> UserDay {
        (self.record.user_id, self.record.day)
    }
}

/// The training and evaluation material of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub variant: Variant,
    pub ctr: Vec<CtrSample>,
    pub uiem: Vec<UserDayContext>,
    /// Contexts of training user-days, for weighting.
    pub contexts: BTreeMap<UserDay, UserDayContext>,
}

fn in_training_window(day: u32, eval_start: u32) -> bool {
    (FIRST_LABEL_DAY..eval_start).contains(&day)
}

fn with_behaviors(records: Vec<ExposureRecord>, cohorts: Vec<Option<Cohort>>, index: &BehaviorIndex) -> Vec<CtrSample> {
    records
        .into_iter()
        .zip(cohorts)
        .map(|(record, cohort)| {
            let behaviors = index.before(record.user_id, record.day);
            CtrSample {
                record,
                cohort,
                behaviors,
            }
        })
        .collect()
}

impl TrainingSet {
    /// Selects the variant's samples from the label days before
    /// `eval_start`. Earlier days only feed behavior lists.
    pub fn build(dataset: &Dataset, variant: Variant, eval_start: u32, max_behaviors: usize) -> Result<Self> {
        let exposures: Vec<ExposureRecord> = dataset
            .exposures
            .iter()
            .filter(|e| in_training_window(e.day, eval_start))
            .cloned()
            .collect();
        let contexts: Vec<UserDayContext> = dataset
            .contexts
            .iter()
            .filter(|c| in_training_window(c.day, eval_start))
            .cloned()
            .collect();
        let behaviors = BehaviorIndex::new(&dataset.exposures, max_behaviors);

        let (records, cohorts) = match variant {
            Variant::Base => {
                let n = exposures.len();
                (exposures, vec![None; n])
            }
            Variant::WoPs => {
                let recs = sampling::sample_block_clickers(&exposures, &contexts)?;
                let n = recs.len();
                (recs, vec![Some(Cohort::Block); n])
            }
            _ => {
                let sets = sampling::SampledSets::build(&exposures, &contexts)?;
                let cohorts = sets
                    .ctr_set
                    .iter()
                    .map(|r| sets.cohort((r.user_id, r.day)))
                    .collect();
                (sets.ctr_set, cohorts)
            }
        };
        if records.is_empty() {
            return Err(Error::Precondition(format!(
                "variant {variant} has no training samples before day {eval_start}"
            )));
        }
        let uiem = sampling::sample_uiem_training(&contexts);
        if uiem.is_empty() {
            return Err(Error::Precondition(
                "no intent-model training contexts (no user visited the portal in any lookback week)".into(),
            ));
        }
        Ok(Self {
            variant,
            ctr: with_behaviors(records, cohorts, &behaviors),
            uiem,
            contexts: contexts.into_iter().map(|c| (c.key(), c)).collect(),
        })
    }
}

/// Evaluation samples: intent-sampled exposures on days `>= eval_start`.
pub fn eval_samples(dataset: &Dataset, eval_start: u32, max_behaviors: usize) -> Result<Vec<CtrSample>> {
    let exposures: Vec<ExposureRecord> = dataset
        .exposures
        .iter()
        .filter(|e| e.day >= eval_start)
        .cloned()
        .collect();
    let contexts: Vec<UserDayContext> = dataset
        .contexts
        .iter()
        .filter(|c| c.day >= eval_start)
        .cloned()
        .collect();
    let records = sampling::sample_confident(&exposures, &contexts)?;
    if records.is_empty() {
        return Err(Error::Precondition(format!("no evaluation samples on days >= {eval_start}")));
    }
    let behaviors = BehaviorIndex::new(&dataset.exposures, max_behaviors);
    let n = records.len();
    Ok(with_behaviors(records, vec![None; n], &behaviors))
}

/// Per-sample weights of a CTR batch. Intent estimates are computed once
/// per distinct user-day and only when the variant weights anything.
pub fn batch_weights(
    variant: Variant,
    batch: &[&CtrSample],
    uiem: &UiemParams,
    contexts: &BTreeMap<UserDay, UserDayContext>,
    clip: ClipRange,
) -> Result<Vec<f64>> {
    if !variant.uses_weights() {
        return Ok(vec![1.0; batch.len()]);
    }
    let mut keys: Vec<UserDay> = batch.iter().map(|s| s.key()).collect();
    keys.sort_unstable();
    keys.dedup();
    let ctxs = keys
        .iter()
        .map(|k| {
            contexts
                .get(k)
                .ok_or_else(|| Error::Integrity(format!("no context for user {} day {}", k.0, k.1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let estimates = uiem.predict_contexts(&ctxs)?;
    let by_key: BTreeMap<UserDay, &IntentEstimate> = keys.iter().copied().zip(&estimates).collect();
    Ok(batch
        .iter()
        .map(|s| {
            let e = by_key[&s.key()];
            variant.weight(s.cohort, e.y_hat_p, e.y_hat_b, clip)
        })
        .collect())
}

/// `L'_CTR` of a batch as a graph node.
pub fn ctr_loss_node(
    g: &mut ComputeGraph,
    ctr: &CtrParams,
    batch: &[&CtrSample],
    weights: &[f64],
) -> Result<crate::graph::Var> {
    let bound = ctr.bind(g)?;
    let inputs: Vec<CtrInput<'_>> = batch.iter().map(|s| s.input()).collect();
    let preds = bound.predict_batch(g, &inputs)?;
    let labels: Vec<f64> = batch.iter().map(|s| s.record.label as f64).collect();
    g.bce(preds, &labels, weights)
}

/// Adds the intent losses of `uiem_batch` to `l_ctr`, returning
/// `(L_portal, L_block, L_final)` nodes.
pub fn add_intent_losses(
    g: &mut ComputeGraph,
    l_ctr: crate::graph::Var,
    uiem: &UiemParams,
    uiem_batch: &[&UserDayContext],
    alpha: f64,
    beta: f64,
) -> Result<(crate::graph::Var, crate::graph::Var, crate::graph::Var)> {
    let bound = uiem.bind(g)?;
    let (lp, lb) = bound.losses(g, uiem_batch)?;
    let ap = g.scale(lp, alpha)?;
    let bb = g.scale(lb, beta)?;
    let aux = g.add(ap, bb)?;
    let total = g.add(l_ctr, aux)?;
    Ok((lp, lb, total))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_ctr: f64,
    pub l_portal: f64,
    pub l_block: f64,
    pub l_final: f64,
}

pub const LOSSES_HEADER: &str = "step,l_ctr,l_portal,l_block,l_final";

pub fn render_losses(losses: &[LossRecord]) -> String {
    let mut s = String::from(LOSSES_HEADER);
    s.push('\n');
    for l in losses {
        s.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            l.step, l.l_ctr, l.l_portal, l.l_block, l.l_final
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub uiem: UiemParams,
    pub ctr: CtrParams,
    pub losses: Vec<LossRecord>,
}

/// Freshly initialized models for a run seed.
pub fn init_models(
    uiem_cfg: &UiemConfig,
    ctr_cfg: &CtrConfig,
    users: usize,
    items: usize,
    seed: u64,
) -> Result<(UiemParams, CtrParams)> {
    let uiem = UiemParams::init(uiem_cfg, &mut stream_rng(seed, STREAM_UIEM_INIT, 0))?;
    let ctr = CtrParams::init(ctr_cfg, users, items, &mut stream_rng(seed, STREAM_CTR_INIT, 0))?;
    Ok((uiem, ctr))
}

fn shuffled(len: usize, seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, stream, epoch as u64));
    order
}

fn pretrain_uiem(uiem: &mut UiemParams, contexts: &[UserDayContext], cfg: &TrainConfig) -> Result<()> {
    let mut opt = cfg.optimizer()?;
    for epoch in 0..cfg.pretrain_epochs {
        let order = shuffled(contexts.len(), cfg.seed, STREAM_PRETRAIN, epoch);
        for chunk in order.chunks(cfg.batch_size_uiem) {
            let batch: Vec<&UserDayContext> = chunk.iter().map(|&i| &contexts[i]).collect();
            let mut g = ComputeGraph::new();
            let bound = uiem.bind(&mut g)?;
            let (lp, lb) = bound.losses(&mut g, &batch)?;
            let total = g.add(lp, lb)?;
            let grads = g.backward(total)?;
            opt.step(&mut uiem.store, &grads)?;
        }
    }
    Ok(())
}

/// Trains both models on `set`. The world config supplies table sizes.
pub fn train(set: &TrainingSet, world: &WorldConfig, uiem_cfg: &UiemConfig, ctr_cfg: &CtrConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if set.variant != cfg.variant {
        return Err(Error::Config(format!(
            "training set was sampled for variant {} but train.variant is {}",
            set.variant, cfg.variant
        )));
    }
    let clip = cfg.clip()?;
    let (mut uiem, mut ctr) = init_models(uiem_cfg, ctr_cfg, world.users, world.items, cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutput {
            uiem,
            ctr,
            losses: Vec::new(),
        });
    }
    let frozen = cfg.uiem_mode == UiemMode::PretrainFreeze;
    if frozen {
        pretrain_uiem(&mut uiem, &set.uiem, cfg)?;
    }

    let mut opt_uiem = cfg.optimizer()?;
    let mut opt_ctr = cfg.optimizer()?;
    let mut losses = Vec::new();
    let mut uiem_epoch = 0;
    let mut uiem_order = shuffled(set.uiem.len(), cfg.seed, STREAM_UIEM_SHUFFLE, uiem_epoch);
    let mut uiem_pos = 0;

    for epoch in 0..cfg.epochs {
        let order = shuffled(set.ctr.len(), cfg.seed, STREAM_CTR_SHUFFLE, epoch);
        for chunk in order.chunks(cfg.batch_size_ctr) {
            let batch: Vec<&CtrSample> = chunk.iter().map(|&i| &set.ctr[i]).collect();

            let mut ub = Vec::with_capacity(cfg.batch_size_uiem);
            while ub.len() < cfg.batch_size_uiem.min(set.uiem.len()) {
                if uiem_pos == uiem_order.len() {
                    uiem_epoch += 1;
                    uiem_order = shuffled(set.uiem.len(), cfg.seed, STREAM_UIEM_SHUFFLE, uiem_epoch);
                    uiem_pos = 0;
                }
                ub.push(&set.uiem[uiem_order[uiem_pos]]);
                uiem_pos += 1;
            }

            let weights = batch_weights(set.variant, &batch, &uiem, &set.contexts, clip)?;

            let mut g = ComputeGraph::new();
            let l_ctr = ctr_loss_node(&mut g, &ctr, &batch, &weights)?;
            let record = if frozen {
                let est = uiem.predict_contexts(&ub)?;
                let (lp, lb) = uiem::uiem_losses(&est, &ub)?;
                let grads = g.backward(l_ctr)?;
                opt_ctr.step(&mut ctr.store, &grads)?;
                let lc = g.value(l_ctr).values()[0];
                (lc, lp, lb)
            } else {
                let (lp, lb, total) = add_intent_losses(&mut g, l_ctr, &uiem, &ub, cfg.alpha, cfg.beta)?;
                let grads = g.backward(total)?;
                let (gu, gc) = grads.split_prefix(uiem::PREFIX);
                opt_uiem.step(&mut uiem.store, &gu)?;
                opt_ctr.step(&mut ctr.store, &gc)?;
                let v = |x| g.value(x).values()[0];
                (v(l_ctr), v(lp), v(lb))
            };
            let (l_ctr, l_portal, l_block) = record;
            let l_final = crate::debias::final_loss(l_ctr, l_portal, l_block, cfg.alpha, cfg.beta);
            if !l_final.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {}", losses.len())));
            }
            losses.push(LossRecord {
                step: losses.len(),
                l_ctr,
                l_portal,
                l_block,
                l_final,
            });
        }
    }
    Ok(TrainOutput { uiem, ctr, losses })
}
