//! User intent extraction: a small causal decoder over the daily behavior
//! sequence, followed by two sigmoid heads predicting today's portal visit
//! and block click.
//!
//! ```text
//! E_s = tok_emb[tokens]                       [T, d]
//! X   = decoder(E_s + pos_emb)                [T, d]   (causal, pre-norm)
//! H   = readout(X) + pool(E_s)                [1, d]
//! y_p = sigmoid(MLP_portal(H)),  y_b = sigmoid(MLP_block(H))
//! ```
//!
//! Tokens map `-1 -> row 0`, `0 -> row 1`, `1 -> row 2`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{bce_term, ComputeGraph, Var};
use crate::parallel;
use crate::params::{fan_in_matrix, normal_matrix, ParamStore};
use crate::tensor::Tensor;
use crate::world::{Behavior, UserDayContext, SEQ_LEN};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PREFIX: &str = "uiem.";

/// How the decoder's `[T, d]` output becomes one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Last position; under the causal mask it has seen the whole sequence.
    Last,
    Mean,
}

impl Readout {
    pub fn name(self) -> &'static str {
        match self {
            Readout::Last => "last",
            Readout::Mean => "mean",
        }
    }
}

/// Pooling of the raw token embeddings added to the readout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    None,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UiemConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub seq_len: usize,
    pub readout: Readout,
    pub pooling: Pooling,
}

impl Default for UiemConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            heads: 2,
            layers: 1,
            ffn_dim: 32,
            seq_len: SEQ_LEN,
            readout: Readout::Last,
            pooling: Pooling::Mean,
        }
    }
}

impl UiemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 || self.seq_len == 0 {
            return Err(Error::Config("uiem dims must all be > 0".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "uiem.d_model ({}) must be divisible by uiem.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.seq_len > SEQ_LEN {
            return Err(Error::Config(format!(
                "uiem.seq_len ({}) cannot exceed the stored sequence length {SEQ_LEN}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentEstimate {
    pub y_hat_p: f64,
    pub y_hat_b: f64,
    pub h: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UiemParams {
    pub config: UiemConfig,
    pub store: ParamStore,
}

fn layer_name(l: usize, part: &str) -> String {
    format!("{PREFIX}l{l}.{part}")
}

fn head_name(head: &str, part: &str) -> String {
    format!("{PREFIX}{head}.{part}")
}

impl UiemParams {
    pub fn init(config: &UiemConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.ffn_dim);
        let mut s = ParamStore::new();
        s.insert(format!("{PREFIX}tok_emb"), normal_matrix(rng, 3, d, 0.5));
        s.insert(format!("{PREFIX}pos_emb"), normal_matrix(rng, config.seq_len, d, 0.1));
        for l in 0..config.layers {
            s.insert(layer_name(l, "ln1.g"), Tensor::from_fn(1, d, |_, _| 1.0));
            s.insert(layer_name(l, "ln1.b"), Tensor::zeros(1, d));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                s.insert(layer_name(l, w), fan_in_matrix(rng, d, d));
            }
            s.insert(layer_name(l, "ln2.g"), Tensor::from_fn(1, d, |_, _| 1.0));
            s.insert(layer_name(l, "ln2.b"), Tensor::zeros(1, d));
            s.insert(layer_name(l, "ffn.w1"), fan_in_matrix(rng, d, f));
            s.insert(layer_name(l, "ffn.b1"), Tensor::zeros(1, f));
            s.insert(layer_name(l, "ffn.w2"), fan_in_matrix(rng, f, d));
            s.insert(layer_name(l, "ffn.b2"), Tensor::zeros(1, d));
        }
        for head in ["portal", "block"] {
            s.insert(head_name(head, "w1"), fan_in_matrix(rng, d, d));
            s.insert(head_name(head, "b1"), Tensor::zeros(1, d));
            s.insert(head_name(head, "w2"), fan_in_matrix(rng, d, 1));
            s.insert(head_name(head, "b2"), Tensor::zeros(1, 1));
        }
        Ok(Self {
            config: config.clone(),
            store: s,
        })
    }

    /// Rebuilds from a store (e.g. a checkpoint), checking every shape.
    pub fn from_store(config: &UiemConfig, store: &ParamStore) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::init(config, &mut rng)?;
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
            store: out,
        })
    }

    pub fn bind(&self, g: &mut ComputeGraph) -> Result<BoundUiem> {
        let p = |g: &mut ComputeGraph, name: String| self.store.bind(g, &name);
        let tok = p(g, format!("{PREFIX}tok_emb"))?;
        let pos = p(g, format!("{PREFIX}pos_emb"))?;
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            layers.push(LayerVars {
                ln1_g: p(g, layer_name(l, "ln1.g"))?,
                ln1_b: p(g, layer_name(l, "ln1.b"))?,
                wq: p(g, layer_name(l, "attn.wq"))?,
                wk: p(g, layer_name(l, "attn.wk"))?,
                wv: p(g, layer_name(l, "attn.wv"))?,
                wo: p(g, layer_name(l, "attn.wo"))?,
                ln2_g: p(g, layer_name(l, "ln2.g"))?,
                ln2_b: p(g, layer_name(l, "ln2.b"))?,
                w1: p(g, layer_name(l, "ffn.w1"))?,
                b1: p(g, layer_name(l, "ffn.b1"))?,
                w2: p(g, layer_name(l, "ffn.w2"))?,
                b2: p(g, layer_name(l, "ffn.b2"))?,
            });
        }
        let mut head = |name: &str| -> Result<HeadVars> {
            Ok(HeadVars {
                w1: p(g, head_name(name, "w1"))?,
                b1: p(g, head_name(name, "b1"))?,
                w2: p(g, head_name(name, "w2"))?,
                b2: p(g, head_name(name, "b2"))?,
            })
        };
        let portal = head("portal")?;
        let block = head("block")?;
        let t = self.config.seq_len;
        let causal_keep = (0..t * t).map(|i| i % t <= i / t).collect();
        Ok(BoundUiem {
            config: self.config.clone(),
            tok,
            pos,
            layers,
            portal,
            block,
            causal_keep,
        })
    }

    /// Forward pass on a scratch graph.
    pub fn predict(&self, tokens: &[i8]) -> Result<IntentEstimate> {
        let mut g = ComputeGraph::new();
        let bound = self.bind(&mut g)?;
        let h = bound.encode(&mut g, tokens)?;
        let (p, b) = bound.predict_intents(&mut g, h)?;
        Ok(IntentEstimate {
            y_hat_p: g.value(p).values()[0],
            y_hat_b: g.value(b).values()[0],
            h: g.value(h).values().to_vec(),
        })
    }

    /// Predictions for many contexts; order matches the input.
    pub fn predict_contexts(&self, contexts: &[&UserDayContext]) -> Result<Vec<IntentEstimate>> {
        parallel::map(contexts, |c| self.predict(self.window(&c.sequence)))
            .into_iter()
            .collect()
    }

    /// The trailing `seq_len` tokens of a stored sequence.
    pub fn window<'s>(&self, sequence: &'s [i8]) -> &'s [i8] {
        let t = self.config.seq_len;
        if sequence.len() > t {
            &sequence[sequence.len() - t..]
        } else {
            sequence
        }
    }
}

#[derive(Debug)]
struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_g: Var,
    ln2_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

#[derive(Debug)]
struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// UIEM parameters registered on one graph.
#[derive(Debug)]
pub struct BoundUiem {
    config: UiemConfig,
    tok: Var,
    pos: Var,
    layers: Vec<LayerVars>,
    portal: HeadVars,
    block: HeadVars,
    causal_keep: Vec<bool>,
}

pub fn token_rows(tokens: &[i8]) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&t| Behavior::from_token(t).map(|b| (b.token() + 1) as usize))
        .collect()
}

impl BoundUiem {
    /// Token embeddings `E_s`, `[T, d]`.
    pub fn embed(&self, g: &mut ComputeGraph, tokens: &[i8]) -> Result<Var> {
        if tokens.len() != self.config.seq_len {
            return Err(Error::Input(format!(
                "sequence has {} tokens, model expects {}",
                tokens.len(),
                self.config.seq_len
            )));
        }
        let rows = token_rows(tokens)?;
        g.gather_rows(self.tok, &rows)
    }

    /// Full decoder output `[T, d]` for a sequence.
    pub fn decode(&self, g: &mut ComputeGraph, es: Var) -> Result<Var> {
        self.decode_impl(g, es, false)
    }

    /// Decoder output at the last position only, `[1, d]`. Equal to the
    /// last row of [`decode`](Self::decode); the final layer skips the
    /// queries, attention rows and feed-forward rows nothing reads.
    pub fn decode_last(&self, g: &mut ComputeGraph, es: Var) -> Result<Var> {
        self.decode_impl(g, es, true)
    }

    fn decode_impl(&self, g: &mut ComputeGraph, es: Var, last_only: bool) -> Result<Var> {
        let mut x = g.add(es, self.pos)?;
        let t = self.config.seq_len;
        let d = self.config.d_model;
        let dh = d / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_layers = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let truncate = last_only && l + 1 == n_layers;
            let h = g.layer_norm(x, layer.ln1_g, layer.ln1_b, LAYER_NORM_EPS)?;
            let (hq, keep) = if truncate {
                x = g.slice_rows(x, t - 1, t)?;
                (g.slice_rows(h, t - 1, t)?, None)
            } else {
                (h, Some(self.causal_keep.as_slice()))
            };
            let q = g.matmul(hq, layer.wq)?;
            let k = g.matmul(h, layer.wk)?;
            let v = g.matmul(h, layer.wv)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for i in 0..self.config.heads {
                let (lo, hi) = (i * dh, (i + 1) * dh);
                let qh = g.slice_cols(q, lo, hi)?;
                let kh = g.slice_cols(k, lo, hi)?;
                let vh = g.slice_cols(v, lo, hi)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.softmax(scores, keep)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = g.matmul(cat, layer.wo)?;
            x = g.add(x, o)?;

            let h2 = g.layer_norm(x, layer.ln2_g, layer.ln2_b, LAYER_NORM_EPS)?;
            let f = g.matmul(h2, layer.w1)?;
            let f = g.add_bias(f, layer.b1)?;
            let f = g.relu(f)?;
            let f = g.matmul(f, layer.w2)?;
            let f = g.add_bias(f, layer.b2)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// `H`, `[1, d]`.
    pub fn encode(&self, g: &mut ComputeGraph, tokens: &[i8]) -> Result<Var> {
        let es = self.embed(g, tokens)?;
        let read = match self.config.readout {
            Readout::Last => self.decode_last(g, es)?,
            Readout::Mean => {
                let x = self.decode(g, es)?;
                g.mean_axis(x, 0)?
            }
        };
        match self.config.pooling {
            Pooling::Mean => {
                let pooled = g.mean_axis(es, 0)?;
                g.add(read, pooled)
            }
            Pooling::None => Ok(read),
        }
    }

    fn head(g: &mut ComputeGraph, vars: &HeadVars, h: Var) -> Result<Var> {
        let z = g.matmul(h, vars.w1)?;
        let z = g.add_bias(z, vars.b1)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, vars.w2)?;
        let z = g.add_bias(z, vars.b2)?;
        g.sigmoid(z)
    }

    /// `(y_hat_p, y_hat_b)`, each `[1, 1]`.
    pub fn predict_intents(&self, g: &mut ComputeGraph, h: Var) -> Result<(Var, Var)> {
        Ok((Self::head(g, &self.portal, h)?, Self::head(g, &self.block, h)?))
    }

    /// `(L_portal, L_block)` over a batch of training contexts. The batch is
    /// reduced in `(user_id, day)` order so the result does not depend on
    /// the caller's ordering.
    pub fn losses(&self, g: &mut ComputeGraph, batch: &[&UserDayContext]) -> Result<(Var, Var)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("uiem losses"));
        }
        let mut sorted: Vec<&UserDayContext> = batch.to_vec();
        sorted.sort_by_key(|c| c.key());
        let mut ps = Vec::with_capacity(sorted.len());
        let mut bs = Vec::with_capacity(sorted.len());
        for c in &sorted {
            let t = self.config.seq_len;
            let tokens = &c.sequence[c.sequence.len().saturating_sub(t)..];
            let h = self.encode(g, tokens)?;
            let (p, b) = self.predict_intents(g, h)?;
            ps.push(p);
            bs.push(b);
        }
        let yp: Vec<f64> = sorted.iter().map(|c| c.y_p as f64).collect();
        let yb: Vec<f64> = sorted.iter().map(|c| c.y_b as f64).collect();
        let ones = vec![1.0; sorted.len()];
        let p_all = g.concat_cols(&ps)?;
        let b_all = g.concat_cols(&bs)?;
        Ok((g.bce(p_all, &yp, &ones)?, g.bce(b_all, &yb, &ones)?))
    }
}

/// Mean binary cross-entropy of each head over a batch, summed in
/// `(user_id, day)` order.
pub fn uiem_losses(estimates: &[IntentEstimate], labels: &[&UserDayContext]) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::EmptyBatch("uiem losses"));
    }
    if estimates.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} estimates for {} labels",
            estimates.len(),
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i].key());
    let n = estimates.len() as f64;
    let (mut lp, mut lb) = (0.0, 0.0);
    for i in order {
        lp += bce_term(labels[i].y_p as f64, estimates[i].y_hat_p);
        lb += bce_term(labels[i].y_b as f64, estimates[i].y_hat_b);
    }
    Ok((lp / n, lb / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(layers: usize) -> UiemParams {
        let cfg = UiemConfig {
            d_model: 8,
            heads: 2,
            layers,
            ffn_dim: 8,
            seq_len: 8,
            ..UiemConfig::default()
        };
        UiemParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let m = tiny(1);
        assert!(matches!(m.predict(&[0, 1, -1, 2, 0, 0, 0, 0]), Err(Error::Input(_))));
        assert!(matches!(m.predict(&[0, 1]), Err(Error::Input(_))));
    }

    #[test]
    fn zero_heads_predict_half() {
        let mut m = tiny(1);
        for (name, t) in m.store.iter_mut() {
            if name.contains("portal.") || name.contains("block.") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let est = m.predict(&[1, 0, -1, 0, 1, 1, -1, 0]).unwrap();
        assert_eq!(est.y_hat_p, 0.5);
        assert_eq!(est.y_hat_b, 0.5);
    }

    /// With every decoder weight zero the attention and FFN branches vanish,
    /// leaving `H = (E_s + E_pos)[T-1] + mean(E_s)`, checked by hand on d=2, T=3.
    #[test]
    fn zero_decoder_reduces_to_residual_plus_pool() {
        let cfg = UiemConfig {
            d_model: 2,
            heads: 1,
            layers: 1,
            ffn_dim: 2,
            seq_len: 3,
            ..UiemConfig::default()
        };
        let mut m = UiemParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (name, t) in m.store.iter_mut() {
            if name.contains(".attn.") || name.contains(".ffn.") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        *m.store.get_mut("uiem.tok_emb").unwrap() =
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        *m.store.get_mut("uiem.pos_emb").unwrap() =
            Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        // tokens [-1, 1, 0] -> rows 0, 2, 1 = (1,2), (5,6), (3,4)
        let est = m.predict(&[-1, 1, 0]).unwrap();
        // last residual: (3,4)+(0.5,0.6); mean(E_s) = (3, 4)
        let expect = [3.5 + 3.0, 4.6 + 4.0];
        assert!((est.h[0] - expect[0]).abs() < 1e-12, "{:?}", est.h);
        assert!((est.h[1] - expect[1]).abs() < 1e-12, "{:?}", est.h);
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        for layers in [1, 2] {
            let m = tiny(layers);
            let base: Vec<i8> = vec![1, 0, -1, 0, 1, -1, -1, 0];
            let run = |tokens: &[i8]| {
                let mut g = ComputeGraph::new();
                let b = m.bind(&mut g).unwrap();
                let es = b.embed(&mut g, tokens).unwrap();
                let x = b.decode(&mut g, es).unwrap();
                g.value(x).clone()
            };
            let reference = run(&base);
            for t in 0..base.len() {
                let mut probe = base.clone();
                probe[t] = if probe[t] == 1 { -1 } else { 1 };
                let out = run(&probe);
                for pos in 0..base.len() {
                    let same = out.row_slice(pos) == reference.row_slice(pos);
                    if pos < t {
                        assert!(same, "layers={layers}: position {pos} saw token {t}");
                    } else {
                        assert!(!same, "layers={layers}: position {pos} ignored token {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn last_position_decode_matches_full_decode() {
        for layers in [1, 2, 3] {
            let m = tiny(layers);
            let tokens: Vec<i8> = vec![0, 1, 1, -1, 0, -1, 1, 0];
            let mut g = ComputeGraph::new();
            let b = m.bind(&mut g).unwrap();
            let es = b.embed(&mut g, &tokens).unwrap();
            let full = b.decode(&mut g, es).unwrap();
            let last = b.decode_last(&mut g, es).unwrap();
            assert_eq!(g.value(last).values(), g.value(full).row_slice(tokens.len() - 1));
        }
    }

    #[test]
    fn deterministic_encoding() {
        let m = tiny(2);
        let s = [1, 1, 0, -1, 0, 1, 0, -1];
        assert_eq!(m.predict(&s).unwrap(), m.predict(&s).unwrap());
    }

    fn ctx(user_id: u32, y_p: u8, y_b: u8) -> UserDayContext {
        UserDayContext {
            user_id,
            day: 40,
            y_p,
            y_b,
            r_p: 1,
            sequence: vec![0; SEQ_LEN],
        }
    }

    fn est(p: f64, b: f64) -> IntentEstimate {
        IntentEstimate {
            y_hat_p: p,
            y_hat_b: b,
            h: vec![],
        }
    }

    #[test]
    fn losses_at_half_are_ln2() {
        let c = [ctx(0, 1, 0), ctx(1, 0, 0), ctx(2, 1, 1)];
        let refs: Vec<&UserDayContext> = c.iter().collect();
        let e = vec![est(0.5, 0.5); 3];
        let (lp, lb) = uiem_losses(&e, &refs).unwrap();
        assert!((lp - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((lb - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_have_tiny_loss() {
        let c = [ctx(0, 1, 1), ctx(1, 0, 0)];
        let refs: Vec<&UserDayContext> = c.iter().collect();
        let e = vec![est(1.0, 1.0), est(0.0, 0.0)];
        let (lp, lb) = uiem_losses(&e, &refs).unwrap();
        assert!(lp < 1e-11 && lb < 1e-11);
        assert!(lp >= 0.0 && lb >= 0.0);
    }

    #[test]
    fn hand_batch() {
        let c = [ctx(0, 1, 1), ctx(1, 0, 0), ctx(2, 1, 1), ctx(3, 0, 0)];
        let refs: Vec<&UserDayContext> = c.iter().collect();
        let e: Vec<_> = [0.9, 0.2, 0.7, 0.4].iter().map(|&p| est(p, p)).collect();
        let (lp, lb) = uiem_losses(&e, &refs).unwrap();
        let expect = -(0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln()) / 4.0;
        assert!((lp - expect).abs() < 1e-15);
        assert!((lp - 0.2990).abs() < 1e-4);
        assert_eq!(lp, lb);
    }

    #[test]
    fn empty_batch_is_error() {
        assert!(matches!(uiem_losses(&[], &[]), Err(Error::EmptyBatch(_))));
        let m = tiny(1);
        let mut g = ComputeGraph::new();
        let b = m.bind(&mut g).unwrap();
        assert!(matches!(b.losses(&mut g, &[]), Err(Error::EmptyBatch(_))));
    }
}
