//! AUC and per-user grouped AUC.
//!
//! AUC is the Mann-Whitney statistic computed from midrank sums, so ties
//! earn half credit. GAUC is the weighted mean of per-user AUCs over users
//! that have both classes; single-class users are excluded and counted.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaucWeighting {
    /// Every user counts once.
    Avg,
    /// Users weighted by exposure count.
    Show,
    /// Users weighted by click count.
    Click,
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score[{i}] = {}", scores[i])));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::Input(format!("label[{i}] = {} is not 0 or 1", labels[i])));
    }
    Ok(())
}

/// `P(score+ > score-) + 0.5 * P(score+ == score-)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{pos} positives and {neg} negatives; both classes are required"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based midranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Per-user evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct UserAuc {
    pub user_id: u32,
    /// `None` for single-class users.
    pub auc: Option<f64>,
    pub exposures: usize,
    pub clicks: usize,
}

impl UserAuc {
    pub fn weight(&self, w: GaucWeighting) -> f64 {
        match w {
            GaucWeighting::Avg => 1.0,
            GaucWeighting::Show => self.exposures as f64,
            GaucWeighting::Click => self.clicks as f64,
        }
    }
}

/// Per-user AUCs in user-id order.
pub fn per_user_auc(user_ids: &[u32], scores: &[f64], labels: &[u8]) -> Result<Vec<UserAuc>> {
    check_scores(scores, labels)?;
    if user_ids.len() != scores.len() {
        return Err(Error::Input(format!(
            "{} user ids for {} scores",
            user_ids.len(),
            scores.len()
        )));
    }
    let mut groups: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&u, &s), &l) in user_ids.iter().zip(scores).zip(labels) {
        let g = groups.entry(u).or_default();
        g.0.push(s);
        g.1.push(l);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    Ok(parallel::map(&groups, |(u, (s, l)): &(u32, (Vec<f64>, Vec<u8>))| {
        let clicks = l.iter().filter(|&&x| x == 1).count();
        UserAuc {
            user_id: *u,
            auc: auc(s, l).ok(),
            exposures: l.len(),
            clicks,
        }
    }))
}

/// Weighted mean of the defined per-user AUCs, reduced in input order.
pub fn gauc_from_users(users: &[UserAuc], weighting: GaucWeighting) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for u in users {
        if let Some(a) = u.auc {
            let w = u.weight(weighting);
            num += w * a;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedAuc("no user has both a click and a non-click".into()));
    }
    Ok(num / den)
}

pub fn gauc(user_ids: &[u32], scores: &[f64], labels: &[u8], weighting: GaucWeighting) -> Result<f64> {
    gauc_from_users(&per_user_auc(user_ids, scores, labels)?, weighting)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub gauc_avg: f64,
    pub gauc_show: f64,
    pub gauc_click: f64,
    pub users_evaluated: usize,
    pub users_excluded: usize,
    pub per_user: Vec<UserAuc>,
}

pub fn evaluate(user_ids: &[u32], scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let per_user = per_user_auc(user_ids, scores, labels)?;
    let evaluated = per_user.iter().filter(|u| u.auc.is_some()).count();
    Ok(MetricsReport {
        auc: auc(scores, labels)?,
        gauc_avg: gauc_from_users(&per_user, GaucWeighting::Avg)?,
        gauc_show: gauc_from_users(&per_user, GaucWeighting::Show)?,
        gauc_click: gauc_from_users(&per_user, GaucWeighting::Click)?,
        users_evaluated: evaluated,
        users_excluded: per_user.len() - evaluated,
        per_user,
    })
}

pub const METRICS_HEADER: &str = "variant,gauc_avg,gauc_show,gauc_click,auc,users_evaluated,users_excluded";

impl MetricsReport {
    /// One `metrics.csv` data row, values at full precision.
    pub fn csv_row(&self, variant: &str) -> String {
        format!(
            "{variant},{:?},{:?},{:?},{:?},{},{}",
            self.gauc_avg, self.gauc_show, self.gauc_click, self.auc, self.users_evaluated, self.users_excluded
        )
    }
}

pub fn render_metrics(rows: &[(String, MetricsReport)]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (v, r) in rows {
        s.push_str(&r.csv_row(v));
        s.push('\n');
    }
    s
}

/// Fraction of pairs with distinct `truth` that `scores` orders the same
/// way, ties in `scores` counting one half. This is the AUC of `scores`
/// against the ordering induced by `truth`.
pub fn pairwise_concordance(scores: &[f64], truth: &[f64]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Input(format!("{} scores for {} truths", scores.len(), truth.len())));
    }
    let mut hits = 0.0;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if truth[i] > truth[j] {
                pairs += 1;
                hits += match scores[i].partial_cmp(&scores[j]) {
                    Some(Ordering::Greater) => 1.0,
                    Some(Ordering::Equal) => 0.5,
                    _ => 0.0,
                };
            }
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedAuc("all truth values are equal".into()));
    }
    Ok(hits / pairs as f64)
}
