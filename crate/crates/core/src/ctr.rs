//! BASE click-through-rate model: user and item embeddings plus single-head
//! target attention from the candidate item over the user's recently
//! clicked items.
//!
//! ```text
//! q       = item_emb[i] W_q                       [1, d]
//! attn    = softmax(q B^T / sqrt(d), padding)     [1, L]
//! summary = attn B                                [1, d]   (zero if B is all padding)
//! y       = sigmoid(MLP([user_emb[u] ; item_emb[i] ; summary]))
//! ```
//!
//! The item table has one extra row, the null item used for padding.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Var};
use crate::params::{fan_in_matrix, normal_matrix, ParamStore};
use crate::tensor::Tensor;
use crate::world::ExposureRecord;

pub const PREFIX: &str = "ctr.";

/// Padding marker inside behavior lists.
pub const NULL_ITEM: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct CtrConfig {
    pub dim: usize,
    pub max_behaviors: usize,
    pub hidden: usize,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            max_behaviors: 20,
            hidden: 16,
        }
    }
}

impl CtrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_behaviors == 0 || self.hidden == 0 {
            return Err(Error::Config("ctr dims must all be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtrParams {
    pub config: CtrConfig,
    pub users: usize,
    pub items: usize,
    pub store: ParamStore,
}

/// One CTR input: `(user, candidate item, recent clicked items)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtrInput<'a> {
    pub user_id: u32,
    pub item_id: u32,
    pub behaviors: &'a [u32],
}

impl CtrParams {
    pub fn init(config: &CtrConfig, users: usize, items: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if users == 0 || items == 0 {
            return Err(Error::Config("ctr model needs at least one user and one item".into()));
        }
        let (d, h) = (config.dim, config.hidden);
        let mut s = ParamStore::new();
        s.insert(format!("{PREFIX}user_emb"), normal_matrix(rng, users, d, 0.1));
        s.insert(format!("{PREFIX}item_emb"), normal_matrix(rng, items + 1, d, 0.1));
        s.insert(format!("{PREFIX}attn.wq"), fan_in_matrix(rng, d, d));
        s.insert(format!("{PREFIX}mlp.w1"), fan_in_matrix(rng, 3 * d, h));
        s.insert(format!("{PREFIX}mlp.b1"), Tensor::zeros(1, h));
        s.insert(format!("{PREFIX}mlp.w2"), fan_in_matrix(rng, h, 1));
        s.insert(format!("{PREFIX}mlp.b2"), Tensor::zeros(1, 1));
        Ok(Self {
            config: config.clone(),
            users,
            items,
            store: s,
        })
    }

    /// Rebuilds from a store, inferring table sizes from the embeddings.
    pub fn from_store(config: &CtrConfig, store: &ParamStore) -> Result<Self> {
        let user_emb = store
            .get(&format!("{PREFIX}user_emb"))
            .map_err(|_| Error::Checkpoint("missing parameter `ctr.user_emb`".into()))?;
        let item_emb = store
            .get(&format!("{PREFIX}item_emb"))
            .map_err(|_| Error::Checkpoint("missing parameter `ctr.item_emb`".into()))?;
        if item_emb.rows() < 2 {
            return Err(Error::Checkpoint("ctr.item_emb needs at least two rows".into()));
        }
        let (users, items) = (user_emb.rows(), item_emb.rows() - 1);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::init(config, users, items, &mut rng)?;
        let mut out = ParamStore::new();
        for (name, t) in template.store.iter() {
            let got = store
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
            out.insert(name, got.clone());
        }
        Ok(Self {
            config: config.clone(),
            users,
            items,
            store: out,
        })
    }

    pub fn bind(&self, g: &mut ComputeGraph) -> Result<BoundCtr> {
        let p = |g: &mut ComputeGraph, name: &str| self.store.bind(g, &format!("{PREFIX}{name}"));
        Ok(BoundCtr {
            config: self.config.clone(),
            users: self.users,
            items: self.items,
            user_emb: p(g, "user_emb")?,
            item_emb: p(g, "item_emb")?,
            wq: p(g, "attn.wq")?,
            w1: p(g, "mlp.w1")?,
            b1: p(g, "mlp.b1")?,
            w2: p(g, "mlp.w2")?,
            b2: p(g, "mlp.b2")?,
        })
    }

    pub fn predict_ctr(&self, input: &CtrInput<'_>) -> Result<f64> {
        let mut g = ComputeGraph::new();
        let b = self.bind(&mut g)?;
        let y = b.predict(&mut g, input)?;
        Ok(g.value(y).values()[0])
    }

    /// Predictions for many inputs; order matches the input.
    pub fn predict_many(&self, inputs: &[CtrInput<'_>]) -> Result<Vec<f64>> {
        let chunks: Vec<&[CtrInput<'_>]> = inputs.chunks(256).collect();
        let parts = crate::parallel::map(&chunks, |chunk| -> Result<Vec<f64>> {
            let mut g = ComputeGraph::new();
            let b = self.bind(&mut g)?;
            chunk
                .iter()
                .map(|i| {
                    let y = b.predict(&mut g, i)?;
                    Ok(g.value(y).values()[0])
                })
                .collect()
        });
        let mut out = Vec::with_capacity(inputs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// CTR parameters registered on one graph.
#[derive(Debug)]
pub struct BoundCtr {
    config: CtrConfig,
    users: usize,
    items: usize,
    user_emb: Var,
    item_emb: Var,
    wq: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BoundCtr {
    fn check_item(&self, id: u32) -> Result<usize> {
        if (id as usize) < self.items {
            Ok(id as usize)
        } else {
            Err(Error::Input(format!(
                "item id {id} out of range (catalog has {} items)",
                self.items
            )))
        }
    }

    /// Padded behavior rows and the keep-mask over them.
    fn behavior_rows(&self, behaviors: &[u32]) -> Result<(Vec<usize>, Vec<bool>)> {
        let l = self.config.max_behaviors;
        if behaviors.len() > l {
            return Err(Error::Input(format!(
                "behavior list has {} entries, max is {l}",
                behaviors.len()
            )));
        }
        let mut rows = Vec::with_capacity(l);
        let mut keep = Vec::with_capacity(l);
        for &b in behaviors {
            if b == NULL_ITEM {
                rows.push(self.items);
                keep.push(false);
            } else {
                rows.push(self.check_item(b)?);
                keep.push(true);
            }
        }
        rows.resize(l, self.items);
        keep.resize(l, false);
        Ok((rows, keep))
    }

    /// Attention weights `[1, L]` of the candidate over the behavior list.
    pub fn attention(&self, g: &mut ComputeGraph, item: Var, behaviors: &[u32]) -> Result<(Var, Var)> {
        let (rows, keep) = self.behavior_rows(behaviors)?;
        let beh = g.gather_rows(self.item_emb, &rows)?;
        let q = g.matmul(item, self.wq)?;
        let bt = g.transpose(beh)?;
        let s = g.matmul(q, bt)?;
        let s = g.scale(s, 1.0 / (self.config.dim as f64).sqrt())?;
        let a = g.softmax(s, Some(&keep))?;
        Ok((a, beh))
    }

    /// Click probability `[1, 1]`.
    pub fn predict(&self, g: &mut ComputeGraph, input: &CtrInput<'_>) -> Result<Var> {
        if input.user_id as usize >= self.users {
            return Err(Error::Input(format!(
                "user id {} out of range ({} users)",
                input.user_id, self.users
            )));
        }
        let item = self.check_item(input.item_id)?;
        let u = g.gather_rows(self.user_emb, &[input.user_id as usize])?;
        let it = g.gather_rows(self.item_emb, &[item])?;
        let (a, beh) = self.attention(g, it, input.behaviors)?;
        let summary = g.matmul(a, beh)?;
        let x = g.concat_cols(&[u, it, summary])?;
        let h = g.matmul(x, self.w1)?;
        let h = g.add_bias(h, self.b1)?;
        let h = g.relu(h)?;
        let z = g.matmul(h, self.w2)?;
        let z = g.add_bias(z, self.b2)?;
        g.sigmoid(z)
    }

    /// Predictions for a batch as one `[1, B]` row.
    pub fn predict_batch(&self, g: &mut ComputeGraph, inputs: &[CtrInput<'_>]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch("ctr batch"));
        }
        let preds = inputs
            .iter()
            .map(|i| self.predict(g, i))
            .collect::<Result<Vec<_>>>()?;
        if preds.len() == 1 {
            Ok(preds[0])
        } else {
            g.concat_cols(&preds)
        }
    }
}

/// Per-user click history, for building behavior lists without leakage.
#[derive(Clone, Debug, Default)]
pub struct BehaviorIndex {
    clicks: HashMap<u32, Vec<(u32, u32)>>,
    max_len: usize,
}

impl BehaviorIndex {
    pub fn new(exposures: &[ExposureRecord], max_len: usize) -> Self {
        let mut clicks: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
        for e in exposures.iter().filter(|e| e.label == 1) {
            clicks.entry(e.user_id).or_default().push((e.day, e.item_id));
        }
        for list in clicks.values_mut() {
            list.sort_unstable();
        }
        Self { clicks, max_len }
    }

    /// The user's last `max_len` clicked items strictly before `day`,
    /// oldest first.
    pub fn before(&self, user_id: u32, day: u32) -> Vec<u32> {
        let Some(list) = self.clicks.get(&user_id) else {
            return Vec::new();
        };
        let end = list.partition_point(|(d, _)| *d < day);
        let start = end.saturating_sub(self.max_len);
        list[start..end].iter().map(|(_, i)| *i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> CtrParams {
        let cfg = CtrConfig {
            dim: 8,
            max_behaviors: 4,
            hidden: 8,
        };
        CtrParams::init(&cfg, 5, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn empty_behavior_list_gives_zero_summary() {
        let m = model();
        let mut g = ComputeGraph::new();
        let b = m.bind(&mut g).unwrap();
        let it = g.gather_rows(b.item_emb, &[2]).unwrap();
        let (a, beh) = b.attention(&mut g, it, &[]).unwrap();
        let s = g.matmul(a, beh).unwrap();
        assert!(g.value(s).values().iter().all(|v| *v == 0.0));
        let p = m
            .predict_ctr(&CtrInput {
                user_id: 0,
                item_id: 2,
                behaviors: &[],
            })
            .unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let mut m = model();
        for name in ["ctr.mlp.w2", "ctr.mlp.b2"] {
            m.store
                .get_mut(name)
                .unwrap()
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        for (u, i) in [(0, 0), (4, 9), (2, 5)] {
            let p = m
                .predict_ctr(&CtrInput {
                    user_id: u,
                    item_id: i,
                    behaviors: &[1, 3],
                })
                .unwrap();
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let m = model();
        let bad = [
            CtrInput { user_id: 5, item_id: 0, behaviors: &[] },
            CtrInput { user_id: 0, item_id: 10, behaviors: &[] },
            CtrInput { user_id: 0, item_id: 0, behaviors: &[11] },
            CtrInput { user_id: 0, item_id: 0, behaviors: &[1, 2, 3, 4, 5] },
        ];
        for input in &bad {
            assert!(matches!(m.predict_ctr(input), Err(Error::Input(_))), "{input:?}");
        }
    }

    #[test]
    fn attention_over_real_items_sums_to_one() {
        let m = model();
        let mut g = ComputeGraph::new();
        let b = m.bind(&mut g).unwrap();
        let it = g.gather_rows(b.item_emb, &[7]).unwrap();
        let (a, _) = b.attention(&mut g, it, &[1, NULL_ITEM, 4]).unwrap();
        let w = g.value(a).values();
        assert!((w[0] + w[2] - 1.0).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[3], 0.0);
    }

    #[test]
    fn padding_position_does_not_matter() {
        let m = model();
        let p = |beh: &[u32]| {
            m.predict_ctr(&CtrInput {
                user_id: 1,
                item_id: 3,
                behaviors: beh,
            })
            .unwrap()
        };
        let reference = p(&[2, 6]);
        assert_eq!(p(&[NULL_ITEM, 2, 6]), reference);
        assert_eq!(p(&[2, NULL_ITEM, 6, NULL_ITEM]), reference);
        assert_eq!(p(&[NULL_ITEM, NULL_ITEM, 2, 6]), reference);
    }

    #[test]
    fn behavior_index_excludes_label_day() {
        let e = |day, item, label| ExposureRecord {
            user_id: 1,
            item_id: item,
            day,
            label,
            item_feature_id: 0,
        };
        let idx = BehaviorIndex::new(&[e(3, 9, 1), e(1, 4, 1), e(2, 5, 0), e(5, 7, 1), e(4, 8, 1)], 2);
        assert_eq!(idx.before(1, 5), vec![9, 8]);
        assert_eq!(idx.before(1, 2), vec![4]);
        assert!(idx.before(1, 1).is_empty());
        assert!(idx.before(2, 10).is_empty());
    }
}
