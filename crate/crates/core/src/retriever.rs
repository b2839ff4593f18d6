//! Two-tower text/image matcher.
//!
//! Text tower: mean of token embeddings, then an MLP head. Image tower: mean
//! of region features, then an MLP head. Both heads end in L2
//! normalization, so relevance is a plain inner product and retrieval
//! reduces to maximum inner product search.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{collect_grads, init_normal, to_tape, Adam, AdamConfig, Mat, ParamTree, Tape, Var};
use crate::checkpoint::{assign_tensors, read_checkpoint, write_checkpoint};
use crate::corpus::{Dialog, ImageRecord, TokenId, Tokenizer};
use crate::error::{Error, Result};

pub const RETRIEVER_MAGIC: &[u8; 4] = b"MRT1";
/// Literal separator placed between utterances in a retrieval query.
pub const QUERY_SEPARATOR: &str = "[SEP]";
const UNIT_TOL: f64 = 1e-6;

/// A vector with unit L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    /// Wraps a vector that is already unit length (within 1e-6).
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = l2(&v);
        if !((norm - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::NotUnitNormalized(norm));
        }
        Ok(Self(v))
    }

    pub fn normalize(mut v: Vec<f64>) -> Result<Self> {
        let norm = l2(&v);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::NotUnitNormalized(norm));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(v))
    }

    /// Uniform random direction.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            if let Ok(u) = Self::normalize(v) {
                return u;
            }
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Inner product of two unit embeddings (their cosine similarity).
pub fn relevance(t: &UnitEmbedding, v: &UnitEmbedding) -> Result<f64> {
    if t.dim() != v.dim() {
        return Err(Error::DimensionMismatch { expected: t.dim(), got: v.dim() });
    }
    Ok(t.0.iter().zip(&v.0).map(|(a, b)| a * b).sum())
}

/// `Σ_i max(0, margin − s_pos + s_neg_i)`
pub fn hinge_loss(s_pos: f64, s_negs: &[f64], margin: f64) -> f64 {
    s_negs.iter().map(|s| (margin - s_pos + s).max(0.0)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Context and response: used when the response is known.
    Train,
    /// Context only.
    Infer,
}

pub fn build_query(d: &Dialog, mode: QueryMode) -> String {
    let sep = format!(" {QUERY_SEPARATOR} ");
    match mode {
        QueryMode::Train => {
            let mut parts: Vec<&str> = d.context.iter().map(String::as_str).collect();
            parts.push(&d.response);
            parts.join(&sep)
        }
        QueryMode::Infer => d.context.join(&sep),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    /// Width of the bag-of-embeddings text encoder output.
    pub text_encoder_dim: usize,
    /// Width of the image encoder output (the region feature width).
    pub image_encoder_dim: usize,
    /// MLP head widths shared by both towers.
    pub projection_dims: Vec<usize>,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Keep the token embeddings fixed and train only the heads.
    pub freeze_encoders: bool,
    pub seed: u64,
}

impl Default for TowerConfig {
    fn default() -> Self {
        Self {
            text_encoder_dim: 256,
            image_encoder_dim: 64,
            projection_dims: vec![1024, 1024, 512],
            margin: 0.5,
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            freeze_encoders: true,
            seed: 0,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_encoder_dim == 0 || self.image_encoder_dim == 0 {
            return Err(Error::Config("encoder dims must be >= 1".into()));
        }
        if self.projection_dims.is_empty() || self.projection_dims.contains(&0) {
            return Err(Error::Config("projection_dims must be non-empty and positive".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config("margin must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 for in-batch negatives".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.projection_dims.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl Mlp<Mat> {
    fn init<R: Rng>(rng: &mut R, input: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for &w in widths {
            layers.push(Linear {
                w: init_normal(rng, (fan_in, w), (2.0 / fan_in as f64).sqrt()),
                b: Mat::zeros((1, w)),
            });
            fan_in = w;
        }
        Self { layers }
    }
}

impl Mlp<Var> {
    /// GELU between layers, none after the last.
    fn forward(&self, tape: &Tape, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let h = tape.matmul(x, l.w);
            x = tape.add_row(h, l.b);
            if i < last {
                x = tape.gelu(x);
            }
        }
        x
    }
}

/// Parameters of both towers.
#[derive(Clone, Debug, PartialEq)]
pub struct Towers<T> {
    pub token_embeddings: T,
    pub text_head: Mlp<T>,
    pub image_head: Mlp<T>,
}

impl<T> ParamTree<T> for Towers<T> {
    type Mapped<U> = Towers<U>;

    fn map_params<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Towers<U> {
        let map_mlp = |m: &Mlp<T>, f: &mut dyn FnMut(&T) -> U| Mlp {
            layers: m.layers.iter().map(|l| Linear { w: f(&l.w), b: f(&l.b) }).collect(),
        };
        Towers {
            token_embeddings: f(&self.token_embeddings),
            text_head: map_mlp(&self.text_head, f),
            image_head: map_mlp(&self.image_head, f),
        }
    }

    fn params(&self) -> Vec<&T> {
        let mut out = vec![&self.token_embeddings];
        for l in self.text_head.layers.iter().chain(&self.image_head.layers) {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embeddings];
        for l in self.text_head.layers.iter_mut().chain(self.image_head.layers.iter_mut()) {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct RetrieverHeader {
    config: TowerConfig,
    tokenizer_hash: String,
    vocab: Vec<String>,
}

/// A trained (or freshly initialized) two-tower matcher.
#[derive(Clone, Debug)]
pub struct Retriever {
    pub config: TowerConfig,
    pub tokenizer: Tokenizer,
    pub params: Towers<Mat>,
}

impl Retriever {
    pub fn new(config: TowerConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token_embeddings = init_normal(&mut rng, (tokenizer.len(), config.text_encoder_dim), 1.0);
        let text_head = Mlp::init(&mut rng, config.text_encoder_dim, &config.projection_dims);
        let image_head = Mlp::init(&mut rng, config.image_encoder_dim, &config.projection_dims);
        Ok(Self { config, tokenizer, params: Towers { token_embeddings, text_head, image_head } })
    }

    fn query_ids(&self, text: &str) -> Result<Vec<TokenId>> {
        let ids = self.tokenizer.encode(text);
        if ids.is_empty() {
            return Err(Error::EmptyQuery);
        }
        Ok(ids)
    }

    fn image_input(&self, image: &ImageRecord) -> Result<Vec<f64>> {
        if image.embedding.len() != self.config.image_encoder_dim {
            return Err(Error::DimensionMismatch { expected: self.config.image_encoder_dim, got: image.embedding.len() });
        }
        Ok(image.embedding.clone())
    }

    fn forward_text(&self, tape: &Tape, vars: &Towers<Var>, queries: &[Vec<TokenId>]) -> Var {
        let rows: Vec<Var> = queries
            .iter()
            .map(|ids| {
                let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                let g = tape.gather_rows(vars.token_embeddings, &idx);
                tape.mean_rows(g)
            })
            .collect();
        let text_in = tape.concat_rows(&rows);
        let text = vars.text_head.forward(tape, text_in);
        tape.l2_normalize_rows(text)
    }

    fn forward_image(&self, tape: &Tape, head: &Mlp<Var>, images: Mat) -> Var {
        let img_in = tape.leaf(images);
        let img = head.forward(tape, img_in);
        tape.l2_normalize_rows(img)
    }

    pub fn encode_text(&self, text: &str) -> Result<UnitEmbedding> {
        let ids = self.query_ids(text)?;
        let tape = Tape::new();
        let vars = to_tape(&self.params, &tape);
        let t = self.forward_text(&tape, &vars, &[ids]);
        let row = tape.value(t).row(0).to_vec();
        UnitEmbedding::normalize(row)
    }

    pub fn encode_image(&self, image: &ImageRecord) -> Result<UnitEmbedding> {
        let x = self.image_input(image)?;
        let tape = Tape::new();
        let head = self.params.image_head.leaves(&tape);
        let out = self.forward_image(&tape, &head, Mat::from_shape_vec((1, x.len()), x).expect("row"));
        let row = tape.value(out).row(0).to_vec();
        UnitEmbedding::normalize(row)
    }

    /// Hinge loss of one batch with in-batch negatives, plus gradients for
    /// every parameter tensor (in `ParamTree` order).
    ///
    /// Batch entries that share an image id are not used as each other's
    /// negatives.
    pub fn batch_loss(&self, queries: &[String], images: &[&ImageRecord]) -> Result<(f64, Vec<Mat>)> {
        if queries.len() != images.len() {
            return Err(Error::LengthMismatch { hypotheses: queries.len(), references: images.len() });
        }
        let ids = queries.iter().map(|q| self.query_ids(q)).collect::<Result<Vec<_>>>()?;
        let d = self.config.image_encoder_dim;
        let mut img = Mat::zeros((images.len(), d));
        for (i, im) in images.iter().enumerate() {
            let x = self.image_input(im)?;
            img.row_mut(i).assign(&ndarray::ArrayView1::from(&x));
        }
        let n = images.len();
        let negatives = ndarray::Array2::from_shape_fn((n, n), |(i, j)| i != j && images[i].id != images[j].id);

        let tape = Tape::new();
        let vars = to_tape(&self.params, &tape);
        let t = self.forward_text(&tape, &vars, &ids);
        let v = self.forward_image(&tape, &vars.image_head, img);
        let scores = tape.matmul_t(t, v);
        let loss = tape.in_batch_hinge(scores, self.config.margin, negatives);
        let grads = tape.backward(loss);
        Ok((tape.scalar(loss), collect_grads(&self.params, &vars, &grads)))
    }

    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![self.config.freeze_encoders];
        mask.resize(self.params.params().len(), false);
        mask
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = RetrieverHeader {
            config: self.config.clone(),
            tokenizer_hash: self.tokenizer.hash(),
            vocab: self.tokenizer.tokens().to_vec(),
        };
        write_checkpoint(path, RETRIEVER_MAGIC, &header, &self.params.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors): (RetrieverHeader, Vec<Mat>) = read_checkpoint(path, RETRIEVER_MAGIC)?;
        let tokenizer = Tokenizer::from_tokens(header.vocab)?;
        if tokenizer.hash() != header.tokenizer_hash {
            return Err(Error::CheckpointMismatch("tokenizer hash does not match stored vocabulary".into()));
        }
        let mut r = Self::new(header.config, tokenizer)?;
        assign_tensors(r.params.params_mut(), tensors)?;
        Ok(r)
    }
}

impl Mlp<Mat> {
    fn leaves(&self, tape: &Tape) -> Mlp<Var> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear { w: tape.leaf(l.w.clone()), b: tape.leaf(l.b.clone()) })
                .collect(),
        }
    }
}

/// One retriever training example: a caption or dialog query and its image.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub query: String,
    pub image: ImageRecord,
}

/// Mini-batch hinge-loss training with in-batch negatives. Returns the
/// trained towers and the mean loss of every epoch.
pub fn train_retriever(pairs: &[TrainingPair], tokenizer: Tokenizer, config: TowerConfig) -> Result<(Retriever, Vec<f64>)> {
    if pairs.len() < 2 {
        return Err(Error::NotEnoughPairs(pairs.len()));
    }
    let mut model = Retriever::new(config, tokenizer)?;
    let shapes: Vec<(usize, usize)> = model.params.params().iter().map(|m| m.dim()).collect();
    let mut adam = Adam::new(AdamConfig { lr: model.config.lr, clip_norm: 0.0, ..Default::default() }, &shapes);
    let frozen = model.frozen_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(model.config.epochs);

    for epoch in 0..model.config.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(model.config.batch_size).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            // fold a trailing singleton into the previous batch
            let n = batches.len();
            let start = (n - 2) * model.config.batch_size;
            batches.truncate(n - 2);
            batches.push(&order[start..]);
        }
        let mut total = 0.0;
        for batch in batches {
            let queries: Vec<String> = batch.iter().map(|&i| pairs[i].query.clone()).collect();
            let images: Vec<&ImageRecord> = batch.iter().map(|&i| &pairs[i].image).collect();
            let (loss, grads) = model.batch_loss(&queries, &images)?;
            adam.step(model.params.params_mut(), &grads, &frozen);
            total += loss * batch.len() as f64;
        }
        let mean = total / pairs.len() as f64;
        log::debug!("retriever epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
    }
    Ok((model, curve))
}

/// Fraction of queries whose top-1 image (over `images`) is the expected one.
pub fn recall_at_1(model: &Retriever, queries: &[(String, String)], images: &[ImageRecord]) -> Result<f64> {
    let mut index = crate::index::VectorIndex::new(model.config.output_dim());
    for im in images {
        index.add(&im.id, &model.encode_image(im)?)?;
    }
    let embedded = queries.iter().map(|(q, _)| model.encode_text(q)).collect::<Result<Vec<_>>>()?;
    let hits = index.batch_search(&embedded, 1)?;
    let correct = hits.iter().zip(queries).filter(|(h, (_, want))| h[0].id == *want).count();
    Ok(correct as f64 / queries.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_world, SynthConfig};

    fn dialog(ctx: &[&str], resp: &str) -> Dialog {
        Dialog::new("d".into(), ctx.iter().map(|s| s.to_string()).collect(), resp.into()).unwrap()
    }

    fn small_config() -> TowerConfig {
        TowerConfig { text_encoder_dim: 8, image_encoder_dim: 6, projection_dims: vec![12, 5], ..Default::default() }
    }

    fn tiny_world() -> (crate::corpus::SyntheticWorld, Tokenizer) {
        let w = generate_synthetic_world(&SynthConfig {
            n_concepts: 10,
            n_images: 6,
            n_dialogs: 6,
            n_test: 0,
            d_obj: 6,
            k: 3,
            ..Default::default()
        })
        .unwrap();
        let tok = Tokenizer::build(&w.dialogs, &w.concepts, 1).unwrap();
        (w, tok)
    }

    #[test]
    fn query_construction() {
        let d = dialog(&["a", "b"], "c");
        assert_eq!(build_query(&d, QueryMode::Train), "a [SEP] b [SEP] c");
        assert_eq!(build_query(&d, QueryMode::Infer), "a [SEP] b");
        assert_eq!(build_query(&dialog(&["only one"], "r"), QueryMode::Infer), "only one");
    }

    #[test]
    fn hinge_values() {
        assert_eq!(hinge_loss(1.0, &[0.0], 0.5), 0.0);
        assert_eq!(hinge_loss(0.2, &[0.2], 0.5), 0.5);
        assert!((hinge_loss(0.4, &[0.3, 0.0], 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(hinge_loss(0.3, &[0.3, 0.1], 0.0), 0.0);
    }

    #[test]
    fn relevance_values() {
        let x = UnitEmbedding::new(vec![1.0, 0.0]).unwrap();
        let y = UnitEmbedding::new(vec![0.0, 1.0]).unwrap();
        let nx = UnitEmbedding::new(vec![-1.0, 0.0]).unwrap();
        assert_eq!(relevance(&x, &x).unwrap(), 1.0);
        assert_eq!(relevance(&x, &y).unwrap(), 0.0);
        assert_eq!(relevance(&x, &nx).unwrap(), -1.0);
        let z = UnitEmbedding::new(vec![0.0, 0.0, 1.0]).unwrap();
        assert!(relevance(&x, &z).is_err());
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let (w, tok) = tiny_world();
        let r = Retriever::new(small_config(), tok).unwrap();
        let a = r.encode_text("i saw a dog").unwrap();
        assert!((l2(a.as_slice()) - 1.0).abs() < 1e-6);
        assert_eq!(a, r.encode_text("i saw a dog").unwrap());
        assert_ne!(a, r.encode_text("pizza table").unwrap());
        assert!(matches!(r.encode_text("   "), Err(Error::EmptyQuery)));
        let v = r.encode_image(&w.images[0]).unwrap();
        assert!((l2(v.as_slice()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn image_embedding_ignores_region_order() {
        let (w, tok) = tiny_world();
        let r = Retriever::new(small_config(), tok).unwrap();
        let mut regions = w.images[0].regions.clone();
        regions.features.reverse();
        regions.concepts.reverse();
        let shuffled = ImageRecord::from_regions(regions);
        let a = r.encode_image(&w.images[0]).unwrap();
        let b = r.encode_image(&shuffled).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (w, tok) = tiny_world();
        let cfg = TowerConfig { freeze_encoders: false, ..small_config() };
        let mut r = Retriever::new(cfg, tok).unwrap();
        let queries = vec![build_query(&w.dialogs[0], QueryMode::Train), build_query(&w.dialogs[1], QueryMode::Train)];
        let images = vec![&w.images[0], &w.images[1]];
        let (_, grads) = r.batch_loss(&queries, &images).unwrap();
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for t in 1..r.params.params().len() {
            let len = r.params.params()[t].len();
            for k in 0..len {
                let orig = r.params.params()[t].as_slice().unwrap()[k];
                r.params.params_mut()[t].as_slice_mut().unwrap()[k] = orig + eps;
                let (lp, _) = r.batch_loss(&queries, &images).unwrap();
                r.params.params_mut()[t].as_slice_mut().unwrap()[k] = orig - eps;
                let (lm, _) = r.batch_loss(&queries, &images).unwrap();
                r.params.params_mut()[t].as_slice_mut().unwrap()[k] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let a = grads[t].as_slice().unwrap()[k];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_margin_loss_can_reach_zero() {
        let (w, tok) = tiny_world();
        let pairs: Vec<TrainingPair> = w
            .dialogs
            .iter()
            .zip(&w.images)
            .map(|(d, im)| TrainingPair { query: build_query(d, QueryMode::Train), image: im.clone() })
            .collect();
        let cfg = TowerConfig { margin: 0.0, epochs: 60, batch_size: 6, lr: 3e-3, ..small_config() };
        let (_, curve) = train_retriever(&pairs, tok, cfg).unwrap();
        assert!(curve.iter().all(|&l| l >= 0.0));
        assert_eq!(*curve.last().unwrap(), 0.0);
    }

    #[test]
    fn needs_two_pairs() {
        let (w, tok) = tiny_world();
        let pairs = vec![TrainingPair { query: "dog".into(), image: w.images[0].clone() }];
        assert!(matches!(train_retriever(&pairs, tok, small_config()), Err(Error::NotEnoughPairs(1))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (w, tok) = tiny_world();
        let r = Retriever::new(small_config(), tok).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        r.save(&path).unwrap();
        let back = Retriever::load(&path).unwrap();
        assert_eq!(back.params, r.params);
        assert_eq!(back.config, r.config);
        assert_eq!(back.encode_image(&w.images[2]).unwrap(), r.encode_image(&w.images[2]).unwrap());
        assert!(matches!(
            crate::index::VectorIndex::load(&path),
            Err(Error::BadMagic { .. })
        ));
    }
}
