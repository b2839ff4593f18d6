use ndarray::{Array1, ArrayView1};
use rand::Rng;

use super::GeneratorConfig;
use crate::autodiff::{init_normal, Mat, ParamTree};
use crate::corpus::TokenId;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_g: T,
    pub ln1_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln2_g: T,
    pub ln2_b: T,
}

impl<T> Layer<T> {
    fn fields(&self) -> [&T; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_g, &self.ln1_b,
            &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_g, &self.ln2_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo,
            &mut self.bo, &mut self.ln1_g, &mut self.ln1_b, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
            &mut self.ln2_g, &mut self.ln2_b,
        ]
    }

    fn from_fields<U>(mut it: impl Iterator<Item = U>) -> Layer<U> {
        let mut next = || it.next().expect("16 layer tensors");
        Layer {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln1_g: next(),
            ln1_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            ln2_g: next(),
            ln2_b: next(),
        }
    }
}

/// All generator weights. Matrices are stored input-major (`x · W`), so
/// the output head is `D x |V|`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub token_emb: T,
    /// Linear map from region features into the hidden space.
    pub obj_w: T,
    pub obj_b: T,
    pub turn_emb: T,
    pub pos_emb: T,
    pub seg_emb: T,
    pub emb_ln_g: T,
    pub emb_ln_b: T,
    pub layers: Vec<Layer<T>>,
    pub head_w: T,
    pub head_b: T,
    /// Visual knowledge bias projection `F_q`.
    pub vkb_w: T,
    pub vkb_b: T,
}

const TOP_FIELDS: usize = 8;

impl Generator<Mat> {
    pub fn init<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        let v = cfg.vocab_size;
        let s = cfg.init_std;
        let mut n = |shape| init_normal(rng, shape, s);
        let token_emb = n((v, d));
        let obj_w = n((cfg.d_obj, d));
        let turn_emb = n((cfg.max_turns, d));
        let pos_emb = n((cfg.max_positions(), d));
        let seg_emb = n((4, d));
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                wq: n((d, d)),
                bq: Mat::zeros((1, d)),
                wk: n((d, d)),
                bk: Mat::zeros((1, d)),
                wv: n((d, d)),
                bv: Mat::zeros((1, d)),
                wo: n((d, d)),
                bo: Mat::zeros((1, d)),
                ln1_g: Mat::ones((1, d)),
                ln1_b: Mat::zeros((1, d)),
                w1: n((d, cfg.ffn_dim)),
                b1: Mat::zeros((1, cfg.ffn_dim)),
                w2: n((cfg.ffn_dim, d)),
                b2: Mat::zeros((1, d)),
                ln2_g: Mat::ones((1, d)),
                ln2_b: Mat::zeros((1, d)),
            })
            .collect();
        let head_w = n((d, v));
        let vkb_w = n((d, v));
        Self {
            token_emb,
            obj_w,
            obj_b: Mat::zeros((1, d)),
            turn_emb,
            pos_emb,
            seg_emb,
            emb_ln_g: Mat::ones((1, d)),
            emb_ln_b: Mat::zeros((1, d)),
            layers,
            head_w,
            head_b: Mat::zeros((1, v)),
            vkb_w,
            vkb_b: Mat::zeros((1, v)),
        }
    }

    pub fn head(&self) -> DecodingHead<'_> {
        DecodingHead { w: &self.head_w, b: &self.head_b, fq_w: &self.vkb_w, fq_b: &self.vkb_b }
    }
}

impl<T> ParamTree<T> for Generator<T> {
    type Mapped<U> = Generator<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Generator<U> {
        let mut mapped = self.params().into_iter().map(f).collect::<Vec<U>>().into_iter();
        let mut next = || mapped.next().expect("tensor count");
        let token_emb = next();
        let obj_w = next();
        let obj_b = next();
        let turn_emb = next();
        let pos_emb = next();
        let seg_emb = next();
        let emb_ln_g = next();
        let emb_ln_b = next();
        let layers = (0..self.layers.len()).map(|_| Layer::<T>::from_fields((0..16).map(|_| next()))).collect();
        Generator {
            token_emb,
            obj_w,
            obj_b,
            turn_emb,
            pos_emb,
            seg_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            head_w: next(),
            head_b: next(),
            vkb_w: next(),
            vkb_b: next(),
        }
    }

    fn params(&self) -> Vec<&T> {
        let mut out = Vec::with_capacity(TOP_FIELDS + 16 * self.layers.len() + 4);
        out.extend([
            &self.token_emb, &self.obj_w, &self.obj_b, &self.turn_emb, &self.pos_emb, &self.seg_emb, &self.emb_ln_g,
            &self.emb_ln_b,
        ]);
        for l in &self.layers {
            out.extend(l.fields());
        }
        out.extend([&self.head_w, &self.head_b, &self.vkb_w, &self.vkb_b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::with_capacity(TOP_FIELDS + 16 * self.layers.len() + 4);
        out.extend([
            &mut self.token_emb,
            &mut self.obj_w,
            &mut self.obj_b,
            &mut self.turn_emb,
            &mut self.pos_emb,
            &mut self.seg_emb,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
        ]);
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.extend([&mut self.head_w, &mut self.head_b, &mut self.vkb_w, &mut self.vkb_b]);
        out
    }
}

/// Output head: `softmax(W e + b)`, optionally plus the visual knowledge
/// bias `F_q(mean(E_q))` restricted to concept vocabulary entries.
#[derive(Clone, Copy, Debug)]
pub struct DecodingHead<'a> {
    pub w: &'a Mat,
    pub b: &'a Mat,
    pub fq_w: &'a Mat,
    pub fq_b: &'a Mat,
}

impl DecodingHead<'_> {
    pub fn vocab_size(&self) -> usize {
        self.w.ncols()
    }

    /// `W e + b`.
    pub fn logits(&self, e: ArrayView1<f64>) -> Array1<f64> {
        e.dot(self.w) + self.b.row(0)
    }

    /// `F_q(mean(E_q))` zeroed outside `concepts`. `None` when there is
    /// nothing to pool or no concept entry to bias.
    pub fn bias(&self, e_q: &Mat, concepts: &[TokenId]) -> Option<Array1<f64>> {
        if e_q.nrows() == 0 || concepts.is_empty() {
            return None;
        }
        let avg = e_q.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let full = avg.dot(self.fq_w) + self.fq_b.row(0);
        let mut out = Array1::zeros(full.len());
        for &c in concepts {
            out[c as usize] = full[c as usize];
        }
        Some(out)
    }

    /// The output distribution for one position.
    pub fn distribution(&self, e_r: ArrayView1<f64>, bias: Option<&Array1<f64>>) -> Vec<f64> {
        let mut logits = self.logits(e_r);
        if let Some(b) = bias {
            logits += b;
        }
        softmax(logits.as_slice().expect("contiguous"))
    }
}

/// Distribution through the visual knowledge bias. Falls back to the plain
/// head (and counts the fallback) when `e_q` or `concepts` is empty.
pub fn vkb_distribution(e_r: ArrayView1<f64>, e_q: &Mat, concepts: &[TokenId], head: &DecodingHead) -> Vec<f64> {
    let bias = head.bias(e_q, concepts);
    if bias.is_none() {
        super::VKB_FALLBACK.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }
    head.distribution(e_r, bias.as_ref())
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
