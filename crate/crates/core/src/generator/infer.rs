//! Inference without the tape: a cached forward pass, incremental
//! decoding and attention export.

use std::ops::Range;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inputs::{unmasked_inputs, Prefix};
use super::params::vkb_distribution;
use super::{GeneratorModel, SequenceLayout};
use crate::autodiff::{gelu, masked_softmax_rows, normalize_rows, Mat};
use crate::corpus::{Quadruple, TokenId, Tokenizer};
use crate::error::{Error, Result};

/// Keys and values of already-encoded rows, one pair per layer.
#[derive(Clone, Debug)]
pub(crate) struct KvCache {
    k: Vec<Mat>,
    v: Vec<Mat>,
}

impl KvCache {
    fn new(layers: usize, hidden: usize) -> Self {
        Self { k: vec![Mat::zeros((0, hidden)); layers], v: vec![Mat::zeros((0, hidden)); layers] }
    }

    fn len(&self) -> usize {
        self.k.first().map_or(0, |k| k.nrows())
    }

    fn truncate(&mut self, len: usize) {
        for m in self.k.iter_mut().chain(self.v.iter_mut()) {
            *m = m.slice(s![..len, ..]).to_owned();
        }
    }
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> Mat {
    let (xhat, _) = normalize_rows(x);
    xhat * g + b
}

fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    x.dot(w) + b
}

impl GeneratorModel {
    /// Input embeddings of `rows` of `layout`.
    fn embed(&self, layout: &SequenceLayout, rows: Range<usize>) -> Mat {
        let p = &self.params;
        let d = self.config.hidden;
        let o = layout.lengths[0];
        let mut x = Mat::zeros((rows.len(), d));
        for (r, i) in rows.enumerate() {
            let mut row = x.row_mut(r);
            if i < o {
                row.assign(&(layout.object_features.row(i).dot(&p.obj_w) + p.obj_b.row(0)));
            } else {
                row.assign(&p.token_emb.row(layout.token_ids[i] as usize));
            }
            row += &p.turn_emb.row(layout.turn_ids[i]);
            row += &p.pos_emb.row(layout.position_ids[i]);
            row += &p.seg_emb.row(layout.segment_ids[i]);
        }
        layer_norm(&x, &p.emb_ln_g, &p.emb_ln_b)
    }

    /// Encodes new rows `x` on top of `cache`. `mask` is `new x (cached +
    /// new)`. The new rows' keys and values are appended to the cache.
    /// When `capture` names a `(layer, head)`, its attention weights are
    /// written there.
    fn forward_rows(
        &self,
        mut x: Mat,
        cache: &mut KvCache,
        mask: ArrayView2<bool>,
        mut capture: Option<(usize, usize, &mut Mat)>,
    ) -> Mat {
        let heads = self.config.heads;
        let dh = self.config.hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = mask.to_owned();
        for (li, l) in self.params.layers.iter().enumerate() {
            let q = affine(&x, &l.wq, &l.bq);
            let k = affine(&x, &l.wk, &l.bk);
            let v = affine(&x, &l.wv, &l.bv);
            cache.k[li] = concatenate(Axis(0), &[cache.k[li].view(), k.view()]).expect("width");
            cache.v[li] = concatenate(Axis(0), &[cache.v[li].view(), v.view()]).expect("width");
            let keys = &cache.k[li];
            let values = &cache.v[li];
            let mut cat = Mat::zeros(x.dim());
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let scores = q.slice(cols).dot(&keys.slice(cols).t()) * scale;
                let probs = masked_softmax_rows(&scores, &mask);
                cat.slice_mut(cols).assign(&probs.dot(&values.slice(cols)));
                if let Some((cl, ch, ref mut out)) = capture {
                    if cl == li && ch == h {
                        **out = probs;
                    }
                }
            }
            let attn = affine(&cat, &l.wo, &l.bo);
            x = layer_norm(&(x + attn), &l.ln1_g, &l.ln1_b);
            let h1 = affine(&x, &l.w1, &l.b1).mapv(gelu);
            let ff = affine(&h1, &l.w2, &l.b2);
            x = layer_norm(&(x + ff), &l.ln2_g, &l.ln2_b);
        }
        x
    }

    fn fresh_cache(&self) -> KvCache {
        KvCache::new(self.config.layers, self.config.hidden)
    }

    /// Final hidden states of a whole layout through the cached path.
    pub fn infer_hidden(&self, layout: &SequenceLayout) -> Result<Mat> {
        layout.validate(&self.config)?;
        let x = self.embed(layout, 0..layout.len());
        Ok(self.forward_rows(x, &mut self.fresh_cache(), layout.attention_mask.view(), None))
    }

    pub fn generate(&self, q: &Quadruple, decode: Decode, max_len: usize, seed: u64) -> Result<Generation> {
        if max_len > self.config.max_response_len {
            return Err(Error::OutOfRange { what: "max_len", index: max_len, limit: self.config.max_response_len });
        }
        decode.validate()?;
        let mut dec = IncrementalDecoder::new(self, q)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut distributions = Vec::new();
        for _ in 0..max_len {
            let dist = dec.next_distribution()?;
            let pick = decode.pick(&dist, &mut rng);
            distributions.push(dist);
            if pick == Tokenizer::EOS {
                break;
            }
            dec.push(pick);
        }
        Ok(Generation { tokens: dec.tokens, distributions })
    }

    /// Post-softmax attention of one head, restricted to response rows and
    /// region columns, for the unmasked sequence built from `q`.
    pub fn export_attention(&self, q: &Quadruple, layer: usize, head: usize) -> Result<AttentionExport> {
        if layer >= self.config.layers {
            return Err(Error::OutOfRange { what: "layer", index: layer, limit: self.config.layers });
        }
        if head >= self.config.heads {
            return Err(Error::OutOfRange { what: "head", index: head, limit: self.config.heads });
        }
        let layout = unmasked_inputs(q, &self.config)?.layout;
        layout.validate(&self.config)?;
        let x = self.embed(&layout, 0..layout.len());
        let mut probs = Mat::zeros((0, 0));
        self.forward_rows(x, &mut self.fresh_cache(), layout.attention_mask.view(), Some((layer, head, &mut probs)));
        let o = layout.lengths[0];
        let r = layout.response_range();
        let weights = r
            .clone()
            .map(|i| (0..o).map(|j| (probs[[i, j]] * 1e6).round() / 1e6).collect())
            .collect();
        let rows = r.map(|i| self.tokenizer.token(layout.token_ids[i]).to_string()).collect();
        let boxes = q.regions.boxes.as_ref().map(|b| b.iter().take(o).copied().collect()).unwrap_or_default();
        Ok(AttentionExport { layer, head, rows, boxes, weights })
    }
}

/// Token choice rule for [`GeneratorModel::generate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decode {
    Greedy,
    /// Sample from the tempered distribution over the `top_k` most likely
    /// tokens (`0` keeps all).
    Sample { temperature: f64, top_k: usize },
}

impl Decode {
    fn validate(&self) -> Result<()> {
        match *self {
            Decode::Sample { temperature, .. } if !(temperature > 0.0) => {
                Err(Error::Config(format!("temperature must be positive, got {temperature}")))
            }
            _ => Ok(()),
        }
    }

    fn pick<R: Rng + ?Sized>(&self, dist: &[f64], rng: &mut R) -> TokenId {
        match *self {
            Decode::Greedy => argmax(dist) as TokenId,
            Decode::Sample { temperature, top_k } => {
                let mut order: Vec<usize> = (0..dist.len()).collect();
                order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
                if top_k > 0 {
                    order.truncate(top_k);
                }
                let logs: Vec<f64> = order.iter().map(|&i| dist[i].ln() / temperature).collect();
                let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
                let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
                for (w, &i) in weights.iter().zip(&order) {
                    if u < *w {
                        return i as TokenId;
                    }
                    u -= w;
                }
                *order.last().expect("non-empty vocabulary") as TokenId
            }
        }
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Generated tokens without BOS/EOS.
    pub tokens: Vec<TokenId>,
    /// The distribution each token (or the final EOS) was picked from.
    pub distributions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub layer: usize,
    pub head: usize,
    /// Response-block tokens, one per weight row.
    pub rows: Vec<String>,
    /// Region boxes, one per weight column, when known.
    pub boxes: Vec<[f64; 4]>,
    pub weights: Vec<Vec<f64>>,
}

/// Mask-append decoder. Each step appends the previous token and a fresh
/// `[MASK]`, reads the distribution at the mask and then drops the mask
/// from the cache.
#[derive(Clone, Debug)]
pub struct IncrementalDecoder<'m> {
    model: &'m GeneratorModel,
    prefix: SequenceLayout,
    cache: KvCache,
    e_q: Mat,
    concepts: Vec<TokenId>,
    tokens: Vec<TokenId>,
}

impl<'m> IncrementalDecoder<'m> {
    pub fn new(model: &'m GeneratorModel, q: &Quadruple) -> Result<Self> {
        let prefix = Prefix::new(q, &model.config)?;
        let concepts = prefix.concept_ids.clone();
        let layout = prefix.bare();
        layout.validate(&model.config)?;
        let mut cache = model.fresh_cache();
        let x = model.embed(&layout, 0..layout.len());
        let hidden = model.forward_rows(x, &mut cache, layout.attention_mask.view(), None);
        let e_q = hidden.slice(s![layout.concept_range(), ..]).to_owned();
        Ok(Self { model, prefix: layout, cache, e_q, concepts, tokens: Vec::new() })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn push(&mut self, token: TokenId) {
        self.tokens.push(token);
    }

    /// Distribution of the next token given everything pushed so far.
    pub fn next_distribution(&mut self) -> Result<Vec<f64>> {
        let cfg = &self.model.config;
        let base = self.prefix.len();
        let slot = self.tokens.len() + 1;
        if base + slot >= cfg.max_positions() {
            return Err(Error::OutOfRange { what: "position id", index: base + slot, limit: cfg.max_positions() });
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::OutOfRange { what: "token id", index: t as usize, limit: cfg.vocab_size });
        }
        let cached = self.cache.len() - base;
        let mut rows: Vec<(TokenId, usize)> = (cached..slot)
            .map(|s| (if s == 0 { Tokenizer::BOS } else { self.tokens[s - 1] }, s))
            .collect();
        rows.push((Tokenizer::MASK, slot));
        let n_new = rows.len();
        let layout = SequenceLayout {
            token_ids: rows.iter().map(|r| r.0).collect(),
            turn_ids: vec![0; n_new],
            position_ids: rows.iter().map(|r| base + r.1).collect(),
            segment_ids: vec![super::Segment::Response as usize; n_new],
            object_features: Mat::zeros((0, cfg.d_obj)),
            attention_mask: Default::default(),
            lengths: [0, 0, 0, n_new],
        };
        let before = self.cache.len();
        let mask = Array2::from_shape_fn((n_new, before + n_new), |(i, j)| j <= before + i);
        let x = self.model.embed(&layout, 0..n_new);
        let hidden = self.model.forward_rows(x, &mut self.cache, mask.view(), None);
        self.cache.truncate(before + n_new - 1);
        let e_r = hidden.row(n_new - 1);
        let head = self.model.head();
        Ok(if cfg.vkb_enabled {
            vkb_distribution(e_r, &self.e_q, self.model.scope_concepts(&self.concepts), &head)
        } else {
            head.distribution(e_r, None)
        })
    }
}
