//! Synthetic homepage-marketing-block world.
//!
//! Each user has a daily portal-visit rate, a block-click rate on visit
//! days and an item preference vector. A simulated day goes:
//!
//! 1. portal visit ~ Bernoulli(portal_affinity)
//! 2. on a visit day, block click ~ Bernoulli(block_affinity)
//! 3. the block shows `exposures_per_user_day` distinct items; on a
//!    block-click day `d` item `i` is clicked with probability
//!    `sigmoid((preference + promotion_sensitivity * promo_d) . embedding_i + click_bias)`,
//!    otherwise every label is forced to zero (the user never looked:
//!    invalid exposure).
//!
//! Items are drawn uniformly, except on visit days without a block click when
//! `portal_exposure_tilt > 0`: those draws favour items the user dislikes,
//! with weight `(1 - sigmoid(preference . embedding_i + click_bias))^tilt`.
//! The visit and block-click marginals are untouched.
//!
//! With `h = 1 - (1 - block_affinity)^habit_coupling`, preference vectors are
//! `preference_scale * (1 - h) * (sqrt(r) mu + sqrt(1 - r) z)` with
//! `r = taste_share`, a population taste `mu ~ N(0, I)` drawn once per world
//! and a private `z ~ N(0, I)`. The promotion sensitivity is
//! `preference_scale * h * promotion_strength`, and `promo_d ~ N(0, I)` is a
//! fresh direction every day shared by all users. Habitual block clickers
//! therefore click whatever is promoted that day rather than what they like,
//! which is the click bias the debiasing weights are meant to discount: their
//! past clicks say nothing about future ones.
//!
//! Every user owns private RNG streams derived from `(master_seed, user_id)`,
//! so generation and simulation are order-independent and parallel-safe.

use rand::seq::index::{sample as sample_indices, sample_weighted};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::sigmoid;
use crate::parallel;

/// Length of the behavior sequence (days).
pub const SEQ_LEN: usize = 30;
/// Days before the label day that define `r_p`.
pub const LOOKBACK_DAYS: usize = 7;
/// First day that has a full sequence window and a full lookback window.
pub const FIRST_LABEL_DAY: u32 = (SEQ_LEN + LOOKBACK_DAYS) as u32;
/// Minimum simulated horizon: history windows plus one label day.
pub const MIN_DAYS: u32 = FIRST_LABEL_DAY + 1;

/// One day of user behavior as seen by the intent model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(i8)]
pub enum Behavior {
    NoVisit = -1,
    PortalVisit = 0,
    BlockClick = 1,
}

impl Behavior {
    pub fn token(self) -> i8 {
        self as i8
    }

    pub fn from_token(t: i8) -> Result<Self> {
        match t {
            -1 => Ok(Behavior::NoVisit),
            0 => Ok(Behavior::PortalVisit),
            1 => Ok(Behavior::BlockClick),
            other => Err(Error::Input(format!("behavior token {other} not in {{-1,0,1}}"))),
        }
    }

    fn of_day(visit: bool, block: bool) -> Self {
        match (visit, block) {
            (_, true) => Behavior::BlockClick,
            (true, false) => Behavior::PortalVisit,
            (false, false) => Behavior::NoVisit,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub users: usize,
    pub items: usize,
    pub item_dim: usize,
    pub item_features: u32,
    pub num_days: u32,
    pub exposures_per_user_day: usize,
    pub portal_beta: (f64, f64),
    pub block_beta: (f64, f64),
    pub preference_scale: f64,
    pub habit_coupling: f64,
    /// Share of preference variance coming from the population taste.
    pub taste_share: f64,
    /// Bias of portal-only-day exposures towards disliked items (0 = uniform).
    pub portal_exposure_tilt: f64,
    /// Pull of the daily promotion on habitual block clickers.
    pub promotion_strength: f64,
    pub click_bias: f64,
    /// Trailing label days held out for evaluation.
    pub eval_days: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            users: 1000,
            items: 200,
            item_dim: 8,
            item_features: 10,
            num_days: 60,
            exposures_per_user_day: 2,
            portal_beta: (2.0, 3.0),
            block_beta: (2.0, 2.0),
            preference_scale: 4.0,
            habit_coupling: 2.0,
            taste_share: 0.5,
            portal_exposure_tilt: 2.0,
            promotion_strength: 1.0,
            click_bias: -0.5,
            eval_days: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.users == 0 {
            return fail("world.users must be > 0".into());
        }
        if self.items == 0 {
            return fail("world.items must be > 0".into());
        }
        if self.item_dim == 0 {
            return fail("world.item_dim must be > 0".into());
        }
        if self.item_features == 0 {
            return fail("world.item_features must be > 0".into());
        }
        if self.exposures_per_user_day == 0 || self.exposures_per_user_day > self.items {
            return fail(format!(
                "world.exposures_per_user_day must be in 1..={}, got {}",
                self.items, self.exposures_per_user_day
            ));
        }
        if self.num_days < MIN_DAYS {
            return fail(format!(
                "world.num_days must be >= {MIN_DAYS}, got {}",
                self.num_days
            ));
        }
        if self.eval_days >= self.num_days - FIRST_LABEL_DAY {
            return fail(format!(
                "world.eval_days ({}) must leave at least one training label day (label days: {})",
                self.eval_days,
                self.num_days - FIRST_LABEL_DAY
            ));
        }
        for (key, (a, b)) in [("portal_beta", self.portal_beta), ("block_beta", self.block_beta)] {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return fail(format!("world.{key} parameters must be positive, got ({a}, {b})"));
            }
        }
        if !self.preference_scale.is_finite() || self.preference_scale < 0.0 {
            return fail("world.preference_scale must be finite and >= 0".into());
        }
        if !self.habit_coupling.is_finite() || self.habit_coupling < 0.0 {
            return fail("world.habit_coupling must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.taste_share) {
            return fail(format!("world.taste_share must be in [0, 1], got {}", self.taste_share));
        }
        if !self.portal_exposure_tilt.is_finite() || self.portal_exposure_tilt < 0.0 {
            return fail("world.portal_exposure_tilt must be finite and >= 0".into());
        }
        if !self.promotion_strength.is_finite() || self.promotion_strength < 0.0 {
            return fail("world.promotion_strength must be finite and >= 0".into());
        }
        if !self.click_bias.is_finite() {
            return fail("world.click_bias must be finite".into());
        }
        Ok(())
    }

    /// First label day held out for evaluation.
    pub fn eval_start_day(&self) -> u32 {
        self.num_days - self.eval_days
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentUser {
    pub user_id: u32,
    pub portal_affinity: f64,
    pub block_affinity: f64,
    pub preference: Vec<f64>,
    pub promotion_sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub item_id: u32,
    pub feature_id: u32,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub users: Vec<LatentUser>,
    pub items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExposureRecord {
    pub user_id: u32,
    pub item_id: u32,
    pub day: u32,
    pub label: u8,
    pub item_feature_id: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct UserDayContext {
    pub user_id: u32,
    pub day: u32,
    pub y_p: u8,
    pub y_b: u8,
    pub r_p: u8,
    /// Behavior tokens for days `day - SEQ_LEN ..= day - 1`, oldest first.
    pub sequence: Vec<i8>,
}

impl UserDayContext {
    pub fn key(&self) -> (u32, u32) {
        (self.user_id, self.day)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Simulation {
    pub exposures: Vec<ExposureRecord>,
    pub contexts: Vec<UserDayContext>,
}

const STREAM_USER: u64 = 0x5553_4552;
const STREAM_ITEM: u64 = 0x4954_454d;
const STREAM_SIM: u64 = 0x5349_4d55;
const STREAM_TASTE: u64 = 0x5441_5354;
const STREAM_PROMO: u64 = 0x5052_4f4d;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for an independent RNG stream keyed by `(master_seed, stream, id)`.
pub fn stream_seed(master_seed: u64, stream: u64, id: u64) -> u64 {
    splitmix(splitmix(splitmix(master_seed) ^ stream) ^ id)
}

pub fn stream_rng(master_seed: u64, stream: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master_seed, stream, id))
}

/// Keeps Beta draws strictly inside (0, 1).
fn open_unit(x: f64) -> f64 {
    x.clamp(1e-9, 1.0 - 1e-9)
}

pub fn generate_world(config: &WorldConfig, master_seed: u64) -> Result<World> {
    config.validate()?;
    let portal = Beta::new(config.portal_beta.0, config.portal_beta.1)
        .map_err(|e| Error::Config(format!("world.portal_beta: {e}")))?;
    let block = Beta::new(config.block_beta.0, config.block_beta.1)
        .map_err(|e| Error::Config(format!("world.block_beta: {e}")))?;

    let mut taste_rng = stream_rng(master_seed, STREAM_TASTE, 0);
    let taste: Vec<f64> = (0..config.item_dim)
        .map(|_| taste_rng.sample(StandardNormal))
        .collect();
    let (shared, private) = (config.taste_share.sqrt(), (1.0 - config.taste_share).sqrt());

    let users = parallel::map_indexed(config.users, |u| {
        let mut rng = stream_rng(master_seed, STREAM_USER, u as u64);
        let portal_affinity = open_unit(portal.sample(&mut rng));
        let block_affinity = open_unit(block.sample(&mut rng));
        let habit = 1.0 - (1.0 - block_affinity).powf(config.habit_coupling);
        let sharpness = config.preference_scale * (1.0 - habit);
        let preference = taste
            .iter()
            .map(|mu| sharpness * (shared * mu + private * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        LatentUser {
            user_id: u as u32,
            portal_affinity,
            block_affinity,
            preference,
            promotion_sensitivity: config.preference_scale * habit * config.promotion_strength,
        }
    });

    let mut rng = stream_rng(master_seed, STREAM_ITEM, 0);
    let std = 1.0 / (config.item_dim as f64).sqrt();
    let items = (0..config.items)
        .map(|i| Item {
            item_id: i as u32,
            feature_id: rng.random_range(0..config.item_features),
            embedding: (0..config.item_dim)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        })
        .collect();

    Ok(World {
        config: config.clone(),
        seed: master_seed,
        users,
        items,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Click probability of an attended exposure ignoring the day's promotion.
pub fn item_click_probability(user: &LatentUser, item: &Item, click_bias: f64) -> f64 {
    sigmoid(dot(&user.preference, &item.embedding) + click_bias)
}

/// Daily promotion direction, shared by every user of a world.
pub fn promotion(master_seed: u64, day: u32, dim: usize) -> Vec<f64> {
    let mut rng = stream_rng(master_seed, STREAM_PROMO, day as u64);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

impl World {
    /// Ground-truth `(portal_affinity, block_affinity)`. For tests and
    /// oracle baselines only; training reads datasets, which never carry it.
    pub fn oracle_propensities(&self, user_id: u32) -> Option<(f64, f64)> {
        self.users
            .get(user_id as usize)
            .map(|u| (u.portal_affinity, u.block_affinity))
    }

    pub fn simulate(&self) -> Result<Simulation> {
        simulate_days(&self.users, &self.items, &SimParams::of(&self.config), self.seed)
    }
}

/// The parts of a [`WorldConfig`] the day simulation reads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimParams {
    pub num_days: u32,
    pub exposures_per_user_day: usize,
    pub click_bias: f64,
    pub portal_exposure_tilt: f64,
}

impl SimParams {
    pub fn of(c: &WorldConfig) -> Self {
        Self {
            num_days: c.num_days,
            exposures_per_user_day: c.exposures_per_user_day,
            click_bias: c.click_bias,
            portal_exposure_tilt: c.portal_exposure_tilt,
        }
    }
}

/// Simulates `num_days` for every user. Exposures are emitted for every
/// day; contexts only for days `>= FIRST_LABEL_DAY`, built purely from
/// earlier days. Output is ordered by user, then day.
pub fn simulate_days(
    users: &[LatentUser],
    items: &[Item],
    params: &SimParams,
    master_seed: u64,
) -> Result<Simulation> {
    let SimParams {
        num_days,
        exposures_per_user_day,
        portal_exposure_tilt,
        ..
    } = *params;
    if users.is_empty() || items.is_empty() {
        return Err(Error::Config("simulation needs at least one user and one item".into()));
    }
    if num_days < MIN_DAYS {
        return Err(Error::Config(format!("num_days must be >= {MIN_DAYS}, got {num_days}")));
    }
    if exposures_per_user_day == 0 || exposures_per_user_day > items.len() {
        return Err(Error::Config(format!(
            "exposures_per_user_day must be in 1..={}, got {exposures_per_user_day}",
            items.len()
        )));
    }
    if !portal_exposure_tilt.is_finite() || portal_exposure_tilt < 0.0 {
        return Err(Error::Config("portal_exposure_tilt must be finite and >= 0".into()));
    }
    for u in users {
        if u.preference.len() != items[0].embedding.len() {
            return Err(Error::Config(format!(
                "user {} preference dim {} != item dim {}",
                u.user_id,
                u.preference.len(),
                items[0].embedding.len()
            )));
        }
    }

    let dim = items[0].embedding.len();
    // promo_scores[day][item] = promo_day . embedding_item
    let promo_scores: Vec<Vec<f64>> = (0..num_days)
        .map(|d| {
            let p = promotion(master_seed, d, dim);
            items.iter().map(|it| dot(&p, &it.embedding)).collect()
        })
        .collect();
    let per_user = parallel::map(users, |user| {
        simulate_user(user, items, &promo_scores, params, master_seed)
    });

    let mut out = Simulation::default();
    for (exposures, contexts) in per_user {
        out.exposures.extend(exposures);
        out.contexts.extend(contexts);
    }
    Ok(out)
}

fn simulate_user(
    user: &LatentUser,
    items: &[Item],
    promo_scores: &[Vec<f64>],
    params: &SimParams,
    master_seed: u64,
) -> (Vec<ExposureRecord>, Vec<UserDayContext>) {
    let (num_days, per_day, tilt) = (
        params.num_days,
        params.exposures_per_user_day,
        params.portal_exposure_tilt,
    );
    let mut rng = stream_rng(master_seed, STREAM_SIM, user.user_id as u64);
    let logits: Vec<f64> = items
        .iter()
        .map(|it| dot(&user.preference, &it.embedding) + params.click_bias)
        .collect();
    // floor keeps every item drawable even when the user surely clicks it
    let dislike: Vec<f64> = logits
        .iter()
        .map(|l| (1.0 - sigmoid(*l)).max(1e-12).powf(tilt))
        .collect();
    let mut history: Vec<Behavior> = Vec::with_capacity(num_days as usize);
    let mut exposures = Vec::with_capacity(num_days as usize * per_day);
    let mut contexts = Vec::new();

    for day in 0..num_days {
        let visit = rng.random_bool(user.portal_affinity.clamp(0.0, 1.0));
        let block = visit && rng.random_bool(user.block_affinity.clamp(0.0, 1.0));
        let shown = if visit && !block && tilt > 0.0 {
            sample_weighted(&mut rng, items.len(), |i| dislike[i], per_day)
                .expect("dislike weights are positive and finite")
        } else {
            sample_indices(&mut rng, items.len(), per_day)
        };
        for idx in shown {
            let item = &items[idx];
            let label = if block {
                let promo = user.promotion_sensitivity * promo_scores[day as usize][idx];
                rng.random_bool(sigmoid(logits[idx] + promo)) as u8
            } else {
                0
            };
            exposures.push(ExposureRecord {
                user_id: user.user_id,
                item_id: item.item_id,
                day,
                label,
                item_feature_id: item.feature_id,
            });
        }

        if day >= FIRST_LABEL_DAY {
            let d = day as usize;
            let sequence = history[d - SEQ_LEN..d].iter().map(|b| b.token()).collect();
            let r_p = history[d - LOOKBACK_DAYS..d]
                .iter()
                .any(|b| *b != Behavior::NoVisit);
            contexts.push(UserDayContext {
                user_id: user.user_id,
                day,
                y_p: visit as u8,
                y_b: block as u8,
                r_p: r_p as u8,
                sequence,
            });
        }
        history.push(Behavior::of_day(visit, block));
    }
    (exposures, contexts)
}
