//! Differentiable forward pass and the training objectives.

use std::sync::atomic::Ordering;

use ndarray::Axis;

use super::inputs::{response_for, teacher_forced_layout, Prefix};
use super::params::vkb_distribution;
use super::{Generator, GeneratorConfig, GeneratorModel, InputBatch, SequenceLayout, EMPTY_MCP, VKB_FALLBACK};
use crate::autodiff::{collect_grads, log_softmax_rows, to_tape, Mat, Tape, Var};
use crate::corpus::{Quadruple, TokenId};
use crate::error::{Error, Result};
use crate::matching::{solve_assignment, CostMatrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub mcp: f64,
    pub mrp: f64,
    pub total: f64,
}

/// Outputs of one forward pass over an [`InputBatch`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `N x D` final hidden states.
    pub hidden: Mat,
    /// Logits at the masked response positions, bias included when enabled.
    pub response_logits: Mat,
    /// Logits at the masked concept positions.
    pub concept_logits: Mat,
}

/// Teacher-forced distributions for every response token plus EOS.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub distributions: Vec<Vec<f64>>,
    pub targets: Vec<TokenId>,
}

impl TeacherForced {
    /// Summed negative log-likelihood of the targets.
    pub fn nll(&self) -> f64 {
        self.distributions.iter().zip(&self.targets).map(|(p, &t)| -p[t as usize].ln()).sum()
    }
}

/// Masked-concept loss: Hungarian-matched NLL of `targets` under the
/// row-wise softmax of `concept_logits`. Zero (and counted) when empty.
pub fn mcp_loss(concept_logits: &Mat, targets: &[TokenId]) -> f64 {
    if targets.is_empty() {
        EMPTY_MCP.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    let lp = log_softmax_rows(concept_logits);
    let cost = mcp_costs(&lp, targets);
    solve_assignment(&cost).total_cost
}

fn mcp_costs(log_probs: &Mat, targets: &[TokenId]) -> CostMatrix {
    let n = targets.len();
    let data = (0..n).flat_map(|i| targets.iter().map(move |&t| -log_probs[[i, t as usize]])).collect();
    CostMatrix::from_vec(n, data).expect("log-probabilities are finite")
}

/// Masked-response loss: summed NLL of `targets` row by row.
pub fn mrp_loss(response_logits: &Mat, targets: &[TokenId]) -> f64 {
    let lp = log_softmax_rows(response_logits);
    targets.iter().enumerate().map(|(i, &t)| -lp[[i, t as usize]]).sum()
}

pub(crate) struct TapeForward<'a> {
    pub tape: &'a Tape,
    pub p: &'a Generator<Var>,
    pub cfg: &'a GeneratorConfig,
}

pub(crate) struct ExampleLoss {
    pub total: Var,
    pub mcp: Option<Var>,
    pub mrp: Var,
    pub response_logits: Var,
    pub concept_logits: Option<Var>,
}

impl TapeForward<'_> {
    pub fn encode(&self, layout: &SequenceLayout) -> Var {
        let t = self.tape;
        let p = self.p;
        let o = layout.lengths[0];
        let ids: Vec<usize> = layout.token_ids.iter().map(|&i| i as usize).collect();
        let mut parts = Vec::with_capacity(2);
        if o > 0 {
            let f = t.leaf(layout.object_features.clone());
            let proj = t.matmul(f, p.obj_w);
            parts.push(t.add_row(proj, p.obj_b));
        }
        if ids.len() > o {
            parts.push(t.gather_rows(p.token_emb, &ids[o..]));
        }
        let mut x = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts) };
        x = t.add(x, t.gather_rows(p.turn_emb, &layout.turn_ids));
        x = t.add(x, t.gather_rows(p.pos_emb, &layout.position_ids));
        x = t.add(x, t.gather_rows(p.seg_emb, &layout.segment_ids));
        x = t.layer_norm(x, p.emb_ln_g, p.emb_ln_b);

        let dh = self.cfg.hidden / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &p.layers {
            let q = t.add_row(t.matmul(x, l.wq), l.bq);
            let k = t.add_row(t.matmul(x, l.wk), l.bk);
            let v = t.add_row(t.matmul(x, l.wv), l.bv);
            let heads: Vec<Var> = (0..self.cfg.heads)
                .map(|h| {
                    let qh = t.slice_cols(q, h * dh, dh);
                    let kh = t.slice_cols(k, h * dh, dh);
                    let vh = t.slice_cols(v, h * dh, dh);
                    let s = t.scale(t.matmul_t(qh, kh), scale);
                    let a = t.masked_softmax(s, &layout.attention_mask);
                    t.matmul(a, vh)
                })
                .collect();
            let cat = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
            let attn = t.add_row(t.matmul(cat, l.wo), l.bo);
            x = t.layer_norm(t.add(x, attn), l.ln1_g, l.ln1_b);
            let h1 = t.gelu(t.add_row(t.matmul(x, l.w1), l.b1));
            let ff = t.add_row(t.matmul(h1, l.w2), l.b2);
            x = t.layer_norm(t.add(x, ff), l.ln2_g, l.ln2_b);
        }
        x
    }

    fn logits(&self, hidden: Var, rows: &[usize]) -> Var {
        let h = self.tape.gather_rows(hidden, rows);
        self.tape.add_row(self.tape.matmul(h, self.p.head_w), self.p.head_b)
    }

    /// `F_q(mean of concept hidden states)` restricted to `concepts`.
    fn vkb_bias(&self, hidden: Var, layout: &SequenceLayout, concepts: &[TokenId]) -> Option<Var> {
        let q_rows: Vec<usize> = layout.concept_range().collect();
        if q_rows.is_empty() || concepts.is_empty() {
            VKB_FALLBACK.fetch_add(1, Ordering::Relaxed);
            return None;
        }
        let t = self.tape;
        let avg = t.mean_rows(t.gather_rows(hidden, &q_rows));
        let full = t.add_row(t.matmul(avg, self.p.vkb_w), self.p.vkb_b);
        let mut keep = Mat::zeros((1, self.cfg.vocab_size));
        for &c in concepts {
            keep[[0, c as usize]] = 1.0;
        }
        Some(t.mul_const(full, keep))
    }

    pub fn example_loss(&self, hidden: Var, batch: &InputBatch, concepts: &[TokenId]) -> ExampleLoss {
        let t = self.tape;

        let mut response_logits = self.logits(hidden, &batch.mrp_positions);
        if self.cfg.vkb_enabled {
            if let Some(bias) = self.vkb_bias(hidden, &batch.layout, concepts) {
                response_logits = t.add_row(response_logits, bias);
            }
        }
        let lp = t.log_softmax(response_logits);
        let entries: Vec<(usize, usize)> =
            batch.mrp_targets.iter().enumerate().map(|(i, &w)| (i, w as usize)).collect();
        let mrp = t.scale(t.pick_sum(lp, &entries), -1.0);

        let mut mcp = None;
        let mut concept_logits = None;
        if self.cfg.mcp_enabled {
            if batch.mcp_positions.is_empty() {
                EMPTY_MCP.fetch_add(1, Ordering::Relaxed);
            } else {
                let logits = self.logits(hidden, &batch.mcp_positions);
                let lp = t.log_softmax(logits);
                let cost = mcp_costs(&t.value(lp), &batch.mcp_targets);
                let assignment = solve_assignment(&cost);
                let entries: Vec<(usize, usize)> = assignment
                    .perm
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| (i, batch.mcp_targets[j] as usize))
                    .collect();
                mcp = Some(t.scale(t.pick_sum(lp, &entries), -1.0));
                concept_logits = Some(logits);
            }
        }
        let total = match mcp {
            Some(m) => t.add(mrp, m),
            None => mrp,
        };
        ExampleLoss { total, mcp, mrp, response_logits, concept_logits }
    }
}

impl GeneratorModel {
    fn check_layout(&self, layout: &SequenceLayout) -> Result<()> {
        layout.validate(&self.config)
    }

    fn check_batch(&self, batch: &InputBatch) -> Result<()> {
        self.check_layout(&batch.layout)?;
        if batch.mrp_positions.is_empty() || batch.mrp_positions.len() != batch.mrp_targets.len() {
            return Err(Error::Config("example needs matching, non-empty response positions and targets".into()));
        }
        if batch.mcp_positions.len() != batch.mcp_targets.len() {
            return Err(Error::Config("concept positions and targets differ in length".into()));
        }
        let n = batch.layout.len();
        if let Some(&p) = batch.mrp_positions.iter().chain(&batch.mcp_positions).find(|&&p| p >= n) {
            return Err(Error::OutOfRange { what: "masked position", index: p, limit: n });
        }
        Ok(())
    }

    /// `N x D` final hidden states of `layout`.
    pub fn hidden_states(&self, layout: &SequenceLayout) -> Result<Mat> {
        self.check_layout(layout)?;
        let tape = Tape::new();
        let p = to_tape(&self.params, &tape);
        let f = TapeForward { tape: &tape, p: &p, cfg: &self.config };
        let h = f.encode(layout);
        let out = tape.value(h).clone();
        Ok(out)
    }

    pub fn forward(&self, batch: &InputBatch) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let tape = Tape::new();
        let p = to_tape(&self.params, &tape);
        let f = TapeForward { tape: &tape, p: &p, cfg: &self.config };
        let hidden = f.encode(&batch.layout);
        let loss = f.example_loss(hidden, batch, self.bias_concepts(batch));
        let concept_logits = match loss.concept_logits {
            Some(c) => tape.value(c).clone(),
            None => {
                let v = f.logits(hidden, &batch.mcp_positions);
                tape.value(v).clone()
            }
        };
        let out = ForwardOutput {
            hidden: tape.value(hidden).clone(),
            response_logits: tape.value(loss.response_logits).clone(),
            concept_logits,
        };
        Ok(out)
    }

    pub fn loss_values(&self, batch: &InputBatch) -> Result<LossValues> {
        self.check_batch(batch)?;
        let tape = Tape::new();
        let p = to_tape(&self.params, &tape);
        let f = TapeForward { tape: &tape, p: &p, cfg: &self.config };
        let l = f.example_loss(f.encode(&batch.layout), batch, self.bias_concepts(batch));
        Ok(LossValues {
            mcp: l.mcp.map_or(0.0, |m| tape.scalar(m)),
            mrp: tape.scalar(l.mrp),
            total: tape.scalar(l.total),
        })
    }

    /// Mean total loss over `batches` and its gradient for every parameter.
    pub fn loss_and_grads(&self, batches: &[InputBatch]) -> Result<(f64, Vec<Mat>)> {
        if batches.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        for b in batches {
            self.check_batch(b)?;
        }
        let tape = Tape::new();
        let p = to_tape(&self.params, &tape);
        let f = TapeForward { tape: &tape, p: &p, cfg: &self.config };
        let totals: Vec<Var> = batches.iter().map(|b| f.example_loss(f.encode(&b.layout), b, self.bias_concepts(b)).total).collect();
        let mean = tape.scale(tape.sum_scalars(&totals), 1.0 / batches.len() as f64);
        let grads = tape.backward(mean);
        Ok((tape.scalar(mean), collect_grads(&self.params, &p, &grads)))
    }

    /// Teacher-forced distributions over the gold response of `q` (plus
    /// EOS), from a single full-sequence forward pass.
    pub fn teacher_forced(&self, q: &Quadruple) -> Result<TeacherForced> {
        let response = response_for(q, &self.config)?;
        self.teacher_forced_prefix(q, &response)
    }

    /// Teacher-forced distributions given an explicit response prefix.
    pub fn teacher_forced_prefix(&self, q: &Quadruple, response: &[TokenId]) -> Result<TeacherForced> {
        if response.len() > self.config.max_response_len {
            return Err(Error::OutOfRange {
                what: "response length",
                index: response.len(),
                limit: self.config.max_response_len,
            });
        }
        let prefix = Prefix::new(q, &self.config)?;
        let (layout, mask_rows, targets) = teacher_forced_layout(&prefix, response);
        let hidden = self.hidden_states(&layout)?;
        let head = self.head();
        let e_q = hidden.select(Axis(0), &layout.concept_range().collect::<Vec<_>>());
        let distributions = mask_rows
            .iter()
            .map(|&r| {
                let e_r = hidden.row(r);
                if self.config.vkb_enabled {
                    vkb_distribution(e_r, &e_q, self.scope_concepts(&prefix.concept_ids), &head)
                } else {
                    head.distribution(e_r, None)
                }
            })
            .collect();
        Ok(TeacherForced { distributions, targets })
    }

    pub(crate) fn scope_concepts<'a>(&'a self, per_instance: &'a [TokenId]) -> &'a [TokenId] {
        match self.config.vkb_scope {
            super::VkbScope::PerInstance => per_instance,
            super::VkbScope::Global => &self.global_concepts,
        }
    }
}
