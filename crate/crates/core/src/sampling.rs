//! Intent-driven sample selection.
//!
//! * [`sample_confident`]: keep exposures whose user visited the portal that
//!   same day (their non-clicks are confident negatives).
//! * [`sample_uiem_training`]: intent-model training contexts, users who
//!   visited the portal during the previous week.
//! * [`partition`]: split confident user-days into block clickers and
//!   users who reached the portal through other channels.
//!
//! All keys are user-days: a user can be a block clicker one day and a
//! portal-only visitor the next.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::world::{ExposureRecord, UserDayContext};

pub type UserDay = (u32, u32);

/// Lookup from user-day to its context.
#[derive(Debug)]
pub struct ContextIndex<'a> {
    by_key: HashMap<UserDay, &'a UserDayContext>,
}

impl<'a> ContextIndex<'a> {
    pub fn new(contexts: &'a [UserDayContext]) -> Result<Self> {
        let mut by_key = HashMap::with_capacity(contexts.len());
        for c in contexts {
            if by_key.insert(c.key(), c).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate context for user {} day {}",
                    c.user_id, c.day
                )));
            }
        }
        Ok(Self { by_key })
    }

    pub fn get(&self, key: UserDay) -> Option<&'a UserDayContext> {
        self.by_key.get(&key).copied()
    }

    pub fn of(&self, r: &ExposureRecord) -> Result<&'a UserDayContext> {
        self.get((r.user_id, r.day)).ok_or_else(|| {
            Error::Integrity(format!(
                "exposure (user {}, item {}, day {}) has no matching context",
                r.user_id, r.item_id, r.day
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cohort {
    /// Reached the portal without clicking the block.
    Portal,
    /// Clicked the block.
    Block,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledSets {
    pub ctr_set: Vec<ExposureRecord>,
    pub uiem_set: Vec<UserDayContext>,
    pub portal_subset: BTreeSet<UserDay>,
    pub block_subset: BTreeSet<UserDay>,
}

impl SampledSets {
    pub fn build(exposures: &[ExposureRecord], contexts: &[UserDayContext]) -> Result<Self> {
        let index = ContextIndex::new(contexts)?;
        let ctr_set = filter_with(&index, exposures, |c| c.y_p == 1)?;
        let (portal_subset, block_subset) = partition_with(&index, &ctr_set)?;
        Ok(Self {
            ctr_set,
            uiem_set: sample_uiem_training(contexts),
            portal_subset,
            block_subset,
        })
    }

    pub fn cohort(&self, key: UserDay) -> Option<Cohort> {
        if self.block_subset.contains(&key) {
            Some(Cohort::Block)
        } else if self.portal_subset.contains(&key) {
            Some(Cohort::Portal)
        } else {
            None
        }
    }
}

fn filter_with(
    index: &ContextIndex<'_>,
    exposures: &[ExposureRecord],
    keep: impl Fn(&UserDayContext) -> bool,
) -> Result<Vec<ExposureRecord>> {
    let mut out = Vec::new();
    for r in exposures {
        if keep(index.of(r)?) {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Exposures of users who visited the portal on the exposure day, in input
/// order.
pub fn sample_confident(
    exposures: &[ExposureRecord],
    contexts: &[UserDayContext],
) -> Result<Vec<ExposureRecord>> {
    filter_with(&ContextIndex::new(contexts)?, exposures, |c| c.y_p == 1)
}

/// Click-based sampling: exposures of user-days with a block click.
pub fn sample_block_clickers(
    exposures: &[ExposureRecord],
    contexts: &[UserDayContext],
) -> Result<Vec<ExposureRecord>> {
    filter_with(&ContextIndex::new(contexts)?, exposures, |c| c.y_b == 1)
}

/// Contexts whose user visited the portal in the previous week.
pub fn sample_uiem_training(contexts: &[UserDayContext]) -> Vec<UserDayContext> {
    contexts.iter().filter(|c| c.r_p == 1).cloned().collect()
}

fn partition_with(
    index: &ContextIndex<'_>,
    ctr_set: &[ExposureRecord],
) -> Result<(BTreeSet<UserDay>, BTreeSet<UserDay>)> {
    let mut portal = BTreeSet::new();
    let mut block = BTreeSet::new();
    for r in ctr_set {
        let c = index.of(r)?;
        if c.y_p != 1 {
            return Err(Error::Precondition(format!(
                "partition input contains user {} day {} without a portal visit",
                c.user_id, c.day
            )));
        }
        if c.y_b == 1 {
            block.insert(c.key());
        } else {
            portal.insert(c.key());
        }
    }
    Ok((portal, block))
}

/// Splits the user-days of `ctr_set` into `(portal_only, block_clickers)`.
pub fn partition(
    ctr_set: &[ExposureRecord],
    contexts: &[UserDayContext],
) -> Result<(BTreeSet<UserDay>, BTreeSet<UserDay>)> {
    partition_with(&ContextIndex::new(contexts)?, ctr_set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::SEQ_LEN;

    fn ctx(user_id: u32, day: u32, y_p: u8, y_b: u8) -> UserDayContext {
        UserDayContext {
            user_id,
            day,
            y_p,
            y_b,
            r_p: 1,
            sequence: vec![0; SEQ_LEN],
        }
    }

    fn exp(user_id: u32, day: u32, label: u8) -> ExposureRecord {
        ExposureRecord {
            user_id,
            item_id: 3,
            day,
            label,
            item_feature_id: 0,
        }
    }

    #[test]
    fn no_visits_gives_empty_set() {
        let c = vec![ctx(1, 40, 0, 0), ctx(2, 40, 0, 0)];
        let e = vec![exp(1, 40, 0), exp(2, 40, 0)];
        assert!(sample_confident(&e, &c).unwrap().is_empty());
    }

    #[test]
    fn all_visits_is_identity() {
        let c = vec![ctx(1, 40, 1, 0), ctx(2, 40, 1, 1)];
        let e = vec![exp(2, 40, 1), exp(1, 40, 0), exp(2, 40, 0)];
        assert_eq!(sample_confident(&e, &c).unwrap(), e);
    }

    #[test]
    fn missing_context_is_integrity_error() {
        let c = vec![ctx(1, 40, 1, 0)];
        let e = vec![exp(1, 41, 0)];
        assert!(matches!(sample_confident(&e, &c), Err(Error::Integrity(_))));
    }

    #[test]
    fn partition_by_block_click() {
        let c = vec![ctx(1, 40, 1, 1), ctx(1, 41, 1, 0)];
        let e = vec![exp(1, 40, 1), exp(1, 41, 0)];
        let (portal, block) = partition(&e, &c).unwrap();
        assert!(block.contains(&(1, 40)));
        assert!(portal.contains(&(1, 41)));
        assert_eq!(portal.len() + block.len(), 2);
    }

    #[test]
    fn partition_rejects_non_visitors() {
        let c = vec![ctx(1, 40, 0, 0)];
        let e = vec![exp(1, 40, 0)];
        assert!(matches!(partition(&e, &c), Err(Error::Precondition(_))));
    }

    #[test]
    fn uiem_filter_uses_r_p() {
        let mut a = ctx(1, 40, 0, 0);
        a.r_p = 0;
        let b = ctx(2, 40, 0, 0);
        assert_eq!(sample_uiem_training(&[a.clone()]), vec![]);
        assert_eq!(sample_uiem_training(&[a, b.clone()]), vec![b]);
    }
}
