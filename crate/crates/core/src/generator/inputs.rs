//! Sequence construction: ids, embeddings slots, attention masks and the
//! masking of concepts and response tokens.

use std::collections::BTreeSet;
use std::ops::Range;
use std::rc::Rc;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use super::GeneratorConfig;
use crate::autodiff::Mat;
use crate::corpus::{Quadruple, TokenId, Tokenizer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Regions = 0,
    Concepts = 1,
    Context = 2,
    Response = 3,
}

/// Hybrid mask over blocks of the given lengths `(|O|, |Q|, |C|, |R|)`.
///
/// `mask[i][j]` is true when query row `i` may attend to key column `j`:
/// every row sees all of O, Q and C; response rows additionally see the
/// response rows up to and including themselves.
pub fn build_attention_mask(lengths: [usize; 4]) -> Array2<bool> {
    let b = lengths[0] + lengths[1] + lengths[2];
    let n = b + lengths[3];
    Array2::from_shape_fn((n, n), |(i, j)| j < b || (i >= b && j <= i))
}

/// One model input: four parallel id sequences, region features for the
/// leading O slots and the attention mask.
#[derive(Clone, Debug)]
pub struct SequenceLayout {
    pub token_ids: Vec<TokenId>,
    pub turn_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// `|O| x d_obj`; row `i` feeds sequence slot `i`.
    pub object_features: Mat,
    pub attention_mask: Rc<Array2<bool>>,
    /// Block lengths `(|O|, |Q|, |C|, |R|)`.
    pub lengths: [usize; 4],
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn concept_range(&self) -> Range<usize> {
        self.lengths[0]..self.lengths[0] + self.lengths[1]
    }

    pub fn response_range(&self) -> Range<usize> {
        let b = self.lengths[0] + self.lengths[1] + self.lengths[2];
        b..b + self.lengths[3]
    }

    /// Checks the structural invariants.
    pub fn validate(&self, cfg: &GeneratorConfig) -> Result<()> {
        let n = self.len();
        let bad = |m: String| Err(Error::Config(format!("invalid sequence layout: {m}")));
        if self.turn_ids.len() != n || self.position_ids.len() != n || self.segment_ids.len() != n {
            return bad("id sequences differ in length".into());
        }
        if self.lengths.iter().sum::<usize>() != n {
            return bad("block lengths do not sum to the sequence length".into());
        }
        if self.attention_mask.dim() != (n, n) {
            return bad("attention mask shape".into());
        }
        if self.object_features.nrows() != self.lengths[0] || self.object_features.ncols() != cfg.d_obj {
            return Err(Error::DimensionMismatch { expected: cfg.d_obj, got: self.object_features.ncols() });
        }
        let mut start = 0;
        for (seg, &len) in self.lengths.iter().enumerate() {
            if self.segment_ids[start..start + len].iter().any(|&s| s != seg) {
                return bad(format!("segment block {seg} is not contiguous"));
            }
            start += len;
        }
        for (i, &t) in self.token_ids.iter().enumerate() {
            if t as usize >= cfg.vocab_size {
                return Err(Error::OutOfRange { what: "token id", index: t as usize, limit: cfg.vocab_size });
            }
            if self.position_ids[i] >= cfg.max_positions() {
                return Err(Error::OutOfRange { what: "position id", index: self.position_ids[i], limit: cfg.max_positions() });
            }
            if self.turn_ids[i] >= cfg.max_turns {
                return Err(Error::OutOfRange { what: "turn id", index: self.turn_ids[i], limit: cfg.max_turns });
            }
        }
        Ok(())
    }
}

/// A training example with its masked positions and targets.
#[derive(Clone, Debug)]
pub struct InputBatch {
    pub layout: SequenceLayout,
    pub mcp_positions: Vec<usize>,
    pub mcp_targets: Vec<TokenId>,
    pub mrp_positions: Vec<usize>,
    pub mrp_targets: Vec<TokenId>,
    /// Distinct concept-tag ids of this example (ascending).
    pub concept_ids: Vec<TokenId>,
}

/// The O, Q and C blocks shared by every layout of one example.
pub(crate) struct Prefix {
    tokens: Vec<TokenId>,
    turns: Vec<usize>,
    segments: Vec<usize>,
    features: Mat,
    lengths: [usize; 3],
    pub(crate) concept_ids: Vec<TokenId>,
}

impl Prefix {
    pub(crate) fn new(q: &Quadruple, cfg: &GeneratorConfig) -> Result<Self> {
        let k = q.regions.features.len().min(cfg.region_len);
        if q.concepts.len() < k {
            return Err(Error::RegionShape { image_id: q.image_id.clone(), reason: "fewer concepts than regions".into() });
        }
        let mut features = Mat::zeros((k, cfg.d_obj));
        for (i, f) in q.regions.features.iter().take(k).enumerate() {
            if f.len() != cfg.d_obj {
                return Err(Error::DimensionMismatch { expected: cfg.d_obj, got: f.len() });
            }
            features.row_mut(i).assign(&ndarray::ArrayView1::from(f));
        }
        let concepts = &q.concepts[..k];

        let n_utt = q.context.len();
        let mut ctx: Vec<(TokenId, usize)> = Vec::new();
        for (u, utt) in q.context.iter().enumerate() {
            let turn = (n_utt - u).min(cfg.max_turns - 1);
            ctx.extend(utt.iter().map(|&t| (t, turn)));
            ctx.push((Tokenizer::SEP, turn));
        }
        if ctx.len() > cfg.max_context_len {
            ctx.drain(..ctx.len() - cfg.max_context_len);
        }
        let first_turn = ctx.first().map_or(0, |&(_, t)| t);

        let mut tokens = vec![Tokenizer::REGION; k];
        tokens.extend_from_slice(concepts);
        tokens.extend(ctx.iter().map(|&(t, _)| t));
        let mut turns = vec![first_turn; 2 * k];
        turns.extend(ctx.iter().map(|&(_, t)| t));
        let mut segments = vec![Segment::Regions as usize; k];
        segments.extend(std::iter::repeat_n(Segment::Concepts as usize, k));
        segments.extend(std::iter::repeat_n(Segment::Context as usize, ctx.len()));

        let concept_ids: BTreeSet<TokenId> = concepts.iter().copied().filter(|&c| !Tokenizer::is_special(c)).collect();
        Ok(Self {
            tokens,
            turns,
            segments,
            features,
            lengths: [k, k, ctx.len()],
            concept_ids: concept_ids.into_iter().collect(),
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Appends response-block rows given as `(token, slot)`; the slot is the
    /// offset from the start of the response block and sets the position id.
    fn layout(&self, rows: &[(TokenId, usize)], mask: Array2<bool>) -> SequenceLayout {
        let b = self.len();
        let mut token_ids = self.tokens.clone();
        let mut turn_ids = self.turns.clone();
        let mut position_ids: Vec<usize> = (0..b).collect();
        let mut segment_ids = self.segments.clone();
        for &(t, slot) in rows {
            token_ids.push(t);
            turn_ids.push(0);
            position_ids.push(b + slot);
            segment_ids.push(Segment::Response as usize);
        }
        SequenceLayout {
            token_ids,
            turn_ids,
            position_ids,
            segment_ids,
            object_features: self.features.clone(),
            attention_mask: Rc::new(mask),
            lengths: [self.lengths[0], self.lengths[1], self.lengths[2], rows.len()],
        }
    }

    /// O, Q and C only.
    pub(crate) fn bare(&self) -> SequenceLayout {
        let [o, q, c] = self.lengths;
        self.layout(&[], build_attention_mask([o, q, c, 0]))
    }
}

/// Number of positions to mask: `floor(rate * len)`, at least one, never
/// more than are available.
pub(crate) fn mask_count(rate: f64, len: usize, available: usize) -> usize {
    (((rate * len as f64) + 1e-9).floor() as usize).max(1).min(available)
}

fn truncated_response(q: &Quadruple, cfg: &GeneratorConfig) -> Result<Vec<TokenId>> {
    if q.response.is_empty() {
        return Err(Error::EmptyResponse(q.dialog_id.clone()));
    }
    Ok(q.response[..q.response.len().min(cfg.max_response_len)].to_vec())
}

/// Builds one masked training example.
///
/// The response block is `[BOS] w_1 .. w_n [EOS]`. `floor(mrp_rate * n)`
/// (at least one) of the `w_i`/`EOS` slots and `floor(mcp_rate * K)` (at
/// least one) of the concept slots are replaced by `[MASK]`.
pub fn build_inputs<R: Rng + ?Sized>(q: &Quadruple, cfg: &GeneratorConfig, rng: &mut R) -> Result<InputBatch> {
    let mut batch = unmasked_inputs(q, cfg)?;
    let k = batch.layout.lengths[1];
    let q_start = batch.layout.lengths[0];
    if k > 0 {
        let n = mask_count(cfg.mcp_rate, k, k);
        let mut picks = sample(rng, k, n).into_vec();
        picks.sort_unstable();
        for p in picks {
            let pos = q_start + p;
            batch.mcp_positions.push(pos);
            batch.mcp_targets.push(batch.layout.token_ids[pos]);
            batch.layout.token_ids[pos] = Tokenizer::MASK;
        }
    }
    let r = batch.layout.response_range();
    let targets = r.len() - 1;
    let n = mask_count(cfg.mrp_rate, targets - 1, targets);
    let mut picks = sample(rng, targets, n).into_vec();
    picks.sort_unstable();
    for p in picks {
        let pos = r.start + 1 + p;
        batch.mrp_positions.push(pos);
        batch.mrp_targets.push(batch.layout.token_ids[pos]);
        batch.layout.token_ids[pos] = Tokenizer::MASK;
    }
    Ok(batch)
}

/// The training layout with nothing masked.
pub(crate) fn unmasked_inputs(q: &Quadruple, cfg: &GeneratorConfig) -> Result<InputBatch> {
    let response = truncated_response(q, cfg)?;
    let prefix = Prefix::new(q, cfg)?;
    let mut rows = vec![(Tokenizer::BOS, 0)];
    rows.extend(response.iter().enumerate().map(|(i, &t)| (t, i + 1)));
    rows.push((Tokenizer::EOS, response.len() + 1));
    let [o, qn, c] = prefix.lengths;
    let layout = prefix.layout(&rows, build_attention_mask([o, qn, c, rows.len()]));
    Ok(InputBatch {
        layout,
        mcp_positions: Vec::new(),
        mcp_targets: Vec::new(),
        mrp_positions: Vec::new(),
        mrp_targets: Vec::new(),
        concept_ids: prefix.concept_ids,
    })
}

/// Layout for teacher-forced prediction of every response token at once.
///
/// After O, Q and C come the gold rows `[BOS] w_1 .. w_n` (slots `0..=n`)
/// and then `n + 1` `[MASK]` rows, the `t`-th sitting at slot `t`. Gold
/// rows attend causally among themselves; `[MASK]` at slot `t` sees the
/// gold rows before slot `t` and itself, exactly what the incremental
/// decoder sees when it predicts token `t`. Returns the layout, the row of
/// each `[MASK]` and the targets (`w_1 .. w_n`, `EOS`).
pub(crate) fn teacher_forced_layout(
    prefix: &Prefix,
    response: &[TokenId],
) -> (SequenceLayout, Vec<usize>, Vec<TokenId>) {
    let n = response.len();
    let b = prefix.len();
    let mut rows = vec![(Tokenizer::BOS, 0)];
    rows.extend(response.iter().enumerate().map(|(i, &t)| (t, i + 1)));
    rows.extend((1..=n + 1).map(|t| (Tokenizer::MASK, t)));
    let total = b + rows.len();
    let gold_end = b + n + 1;
    let mask = Array2::from_shape_fn((total, total), |(i, j)| {
        if j < b {
            return true;
        }
        if i < b {
            return false;
        }
        if i < gold_end {
            return j <= i;
        }
        let slot = i - gold_end + 1;
        j < b + slot || j == i
    });
    let layout = prefix.layout(&rows, mask);
    let mask_rows = (gold_end..total).collect();
    let mut targets = response.to_vec();
    targets.push(Tokenizer::EOS);
    (layout, mask_rows, targets)
}

pub(crate) fn response_for(q: &Quadruple, cfg: &GeneratorConfig) -> Result<Vec<TokenId>> {
    truncated_response(q, cfg)
}
