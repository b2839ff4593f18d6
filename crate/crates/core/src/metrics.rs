//! Automatic evaluation: perplexity, BLEU-1, Rouge-L, Distinct-n and the
//! three embedding-based relevance scores.
//!
//! Text metrics work on lowercased whitespace tokens. Embedding scores use
//! a caller-supplied word table; [`evaluate`] takes it from the generator's
//! own token embeddings, so those numbers compare only within one run.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Quadruple, Tokenizer};
use crate::error::{Error, Result};
use crate::generator::{Decode, GeneratorModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub bleu1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub emb_average: f64,
    pub emb_extrema: f64,
    pub emb_greedy: f64,
    pub n_examples: usize,
}

impl EvalReport {
    /// Names of the real-valued metrics, as they appear in the JSON form.
    pub const METRIC_KEYS: [&'static str; 8] =
        ["ppl", "bleu1", "rougeL", "dist1", "dist2", "emb_average", "emb_extrema", "emb_greedy"];

    pub fn to_pretty(&self) -> String {
        format!(
            "examples     {}\nPPL          {:.4}\nBLEU-1       {:.4}\nRouge-L      {:.4}\nDist-1       {:.4}\nDist-2       {:.4}\nAverage      {:.4}\nExtrema      {:.4}\nGreedy       {:.4}\n",
            self.n_examples,
            self.ppl,
            self.bleu1,
            self.rouge_l,
            self.dist1,
            self.dist2,
            self.emb_average,
            self.emb_extrema,
            self.emb_greedy
        )
    }
}

/// What Distinct-n divides by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistDenominator {
    /// Total word count over all hypotheses.
    #[default]
    Words,
    /// Total n-gram count over all hypotheses.
    Ngrams,
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn check_lengths(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch { hypotheses: hyps.len(), references: refs.len() });
    }
    if hyps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

fn counts(ws: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for w in ws {
        *m.entry(w.as_str()).or_insert(0) += 1;
    }
    m
}

fn clipped_matches(hyp: &[String], reference: &[String]) -> usize {
    let r = counts(reference);
    counts(hyp).iter().map(|(w, &c)| c.min(r.get(w).copied().unwrap_or(0))).sum()
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU-1: clipped unigram precision pooled over the corpus, times
/// the brevity penalty. No smoothing.
pub fn bleu1(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let (mut matched, mut hyp_len, mut ref_len) = (0, 0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (words(h), words(r));
        matched += clipped_matches(&h, &r);
        hyp_len += h.len();
        ref_len += r.len();
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    Ok(matched as f64 / hyp_len as f64 * brevity_penalty(hyp_len, ref_len))
}

/// Sentence BLEU-1 with add-one smoothing on the precision.
pub fn sentence_bleu1(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (words(hyp), words(reference));
    if h.is_empty() {
        return 0.0;
    }
    let p = (clipped_matches(&h, &r) + 1) as f64 / (h.len() + 1) as f64;
    p * brevity_penalty(h.len(), r.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence Rouge-L F1 from the longest common subsequence.
pub fn sentence_rouge_l(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (words(hyp), words(reference));
    let lcs = lcs_len(&h, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / h.len() as f64;
    let rc = lcs as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Mean sentence-level Rouge-L F1.
pub fn rouge_l(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let sum: f64 = hyps.iter().zip(refs).map(|(h, r)| sentence_rouge_l(h, r)).sum();
    Ok(sum / hyps.len() as f64)
}

/// Corpus Distinct-n: distinct n-grams over all hypotheses divided by the
/// chosen denominator. Zero when the denominator is zero.
pub fn distinct_n(hyps: &[String], n: usize, denominator: DistDenominator) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let (mut total_words, mut total_ngrams) = (0, 0);
    for h in hyps {
        let ws = words(h);
        total_words += ws.len();
        for g in ws.windows(n) {
            total_ngrams += 1;
            seen.insert(g.to_vec());
        }
    }
    let denom = match denominator {
        DistDenominator::Words => total_words,
        DistDenominator::Ngrams => total_ngrams,
    };
    if denom == 0 {
        0.0
    } else {
        seen.len() as f64 / denom as f64
    }
}

/// Word vectors for the embedding-based scores.
#[derive(Clone, Debug, Default)]
pub struct WordVectors {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self { dim, table: HashMap::new() }
    }

    pub fn insert(&mut self, word: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        self.table.insert(word.to_lowercase(), v);
        Ok(())
    }

    /// Token-embedding rows of a generator, special tokens excluded.
    pub fn from_generator(model: &GeneratorModel) -> Self {
        let emb = &model.params.token_emb;
        let mut wv = Self::new(emb.ncols());
        for (id, tok) in model.tokenizer.tokens().iter().enumerate() {
            if !Tokenizer::is_special(id as u32) {
                wv.table.insert(tok.clone(), emb.row(id).to_vec());
            }
        }
        wv
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.table.get(word).map(Vec::as_slice)
    }

    fn lookup(&self, text: &str) -> Vec<&[f64]> {
        words(text).iter().filter_map(|w| self.get(w)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn mean_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for v in vs {
        for (a, x) in m.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= vs.len() as f64);
    m
}

/// Per dimension, the entry of largest magnitude (sign kept).
fn extrema_vector(vs: &[&[f64]], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|d| vs.iter().map(|v| v[d]).fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best }))
        .collect()
}

fn greedy_direction(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let sum: f64 = a.iter().map(|x| b.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max)).sum();
    sum / a.len() as f64
}

/// Sentence-level Average, Extrema and Greedy scores. Words missing from
/// the table are skipped; a side with no known words scores 0.
pub fn sentence_embedding_scores(hyp: &str, reference: &str, wv: &WordVectors) -> EmbeddingScores {
    let (h, r) = (wv.lookup(hyp), wv.lookup(reference));
    if h.is_empty() || r.is_empty() {
        return EmbeddingScores { average: 0.0, extrema: 0.0, greedy: 0.0 };
    }
    EmbeddingScores {
        average: cosine(&mean_vector(&h, wv.dim), &mean_vector(&r, wv.dim)),
        extrema: cosine(&extrema_vector(&h, wv.dim), &extrema_vector(&r, wv.dim)),
        greedy: 0.5 * (greedy_direction(&h, &r) + greedy_direction(&r, &h)),
    }
}

/// Corpus means of the sentence embedding scores.
pub fn embedding_scores(hyps: &[String], refs: &[String], wv: &WordVectors) -> Result<EmbeddingScores> {
    check_lengths(hyps, refs)?;
    let mut acc = EmbeddingScores { average: 0.0, extrema: 0.0, greedy: 0.0 };
    for (h, r) in hyps.iter().zip(refs) {
        let s = sentence_embedding_scores(h, r, wv);
        acc.average += s.average;
        acc.extrema += s.extrema;
        acc.greedy += s.greedy;
    }
    let n = hyps.len() as f64;
    Ok(EmbeddingScores { average: acc.average / n, extrema: acc.extrema / n, greedy: acc.greedy / n })
}

/// `exp` of the mean teacher-forced NLL over every response token and the
/// closing EOS, pooled by token count.
pub fn perplexity(model: &GeneratorModel, quads: &[Quadruple]) -> Result<f64> {
    if quads.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut nll, mut tokens) = (0.0, 0);
    for q in quads {
        let tf = model.teacher_forced(q)?;
        nll += tf.nll();
        tokens += tf.targets.len();
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub decode: Decode,
    pub seed: u64,
    pub dist_denominator: DistDenominator,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { decode: Decode::Greedy, seed: 0, dist_denominator: DistDenominator::Words }
    }
}

/// Generates a response for every quadruple. Returns `(hypotheses,
/// references)` as decoded text.
pub fn generate_pairs(model: &GeneratorModel, quads: &[Quadruple], opts: &EvalOptions) -> Result<(Vec<String>, Vec<String>)> {
    let mut hyps = Vec::with_capacity(quads.len());
    let mut refs = Vec::with_capacity(quads.len());
    for (i, q) in quads.iter().enumerate() {
        let g = model.generate(q, opts.decode, model.config.max_response_len, opts.seed.wrapping_add(i as u64))?;
        hyps.push(model.tokenizer.decode(&g.tokens));
        let n = q.response.len().min(model.config.max_response_len);
        refs.push(model.tokenizer.decode(&q.response[..n]));
    }
    Ok((hyps, refs))
}

/// Full report over `quads`.
pub fn evaluate(model: &GeneratorModel, quads: &[Quadruple], opts: &EvalOptions) -> Result<EvalReport> {
    let ppl = perplexity(model, quads)?;
    let (hyps, refs) = generate_pairs(model, quads, opts)?;
    report_from_text(ppl, &hyps, &refs, &WordVectors::from_generator(model), opts.dist_denominator)
}

/// Assembles a report from precomputed perplexity and text pairs.
pub fn report_from_text(
    ppl: f64,
    hyps: &[String],
    refs: &[String],
    wv: &WordVectors,
    dist_denominator: DistDenominator,
) -> Result<EvalReport> {
    let emb = embedding_scores(hyps, refs, wv)?;
    Ok(EvalReport {
        ppl,
        bleu1: bleu1(hyps, refs)?,
        rouge_l: rouge_l(hyps, refs)?,
        dist1: distinct_n(hyps, 1, dist_denominator),
        dist2: distinct_n(hyps, 2, dist_denominator),
        emb_average: emb.average,
        emb_extrema: emb.extrema,
        emb_greedy: emb.greedy,
        n_examples: hyps.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    fn table(entries: &[(&str, Vec<f64>)]) -> WordVectors {
        let mut wv = WordVectors::new(entries[0].1.len());
        for (w, v) in entries {
            wv.insert(w, v.clone()).unwrap();
        }
        wv
    }

    #[test]
    fn identity_scores_one() {
        let h = s(&["the cat sat", "a dog runs fast"]);
        assert_eq!(bleu1(&h, &h).unwrap(), 1.0);
        assert_eq!(rouge_l(&h, &h).unwrap(), 1.0);
    }

    #[test]
    fn bleu1_hand_computed() {
        // matches a and c out of four words, equal lengths so no penalty
        assert_eq!(bleu1(&s(&["a b c d"]), &s(&["a x c x"])).unwrap(), 0.5);
    }

    #[test]
    fn bleu1_clips_and_penalizes_short_output() {
        // "the the the" vs "the cat": one clipped match of three, no penalty
        assert!((bleu1(&s(&["the the the"]), &s(&["the cat"])).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // "cat" vs "the cat sat": precision 1, penalty exp(1 - 3)
        let b = bleu1(&s(&["cat"]), &s(&["the cat sat"])).unwrap();
        assert!((b - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn disjoint_scores_zero() {
        assert_eq!(bleu1(&s(&["a b"]), &s(&["c d"])).unwrap(), 0.0);
        assert_eq!(rouge_l(&s(&["a b"]), &s(&["c d"])).unwrap(), 0.0);
    }

    #[test]
    fn rouge_l_hand_computed() {
        // lcs("a b c d", "a c e") = 2, P = 1/2, R = 2/3, F = 4/7
        assert!((sentence_rouge_l("a b c d", "a c e") - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn sentence_bleu_smoothed() {
        assert!((sentence_bleu1("a b", "c d") - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(matches!(bleu1(&s(&["a"]), &s(&[])), Err(Error::LengthMismatch { .. })));
        assert!(matches!(rouge_l(&s(&["a"]), &s(&["a", "b"])), Err(Error::LengthMismatch { .. })));
        let wv = table(&[("a", vec![1.0])]);
        assert!(matches!(embedding_scores(&s(&[]), &s(&["a"]), &wv), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct_n(&s(&["a a b"]), 1, DistDenominator::Words) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&s(&["a b", "a b"]), 2, DistDenominator::Words), 0.25);
        assert_eq!(distinct_n(&s(&["a b", "a b"]), 2, DistDenominator::Ngrams), 0.5);
        assert_eq!(distinct_n(&s(&["x y z"]), 1, DistDenominator::Words), 1.0);
        assert_eq!(distinct_n(&s(&["", " "]), 1, DistDenominator::Words), 0.0);
    }

    #[test]
    fn single_words_reduce_to_cosine() {
        let wv = table(&[("u", vec![1.0, 2.0, -1.0]), ("v", vec![0.5, -1.0, 3.0])]);
        let c = cosine(&[1.0, 2.0, -1.0], &[0.5, -1.0, 3.0]);
        let e = sentence_embedding_scores("u", "v", &wv);
        for x in [e.average, e.extrema, e.greedy] {
            assert!((x - c).abs() < 1e-12);
        }
    }

    #[test]
    fn oov_words_skipped() {
        let wv = table(&[("u", vec![1.0, 0.0])]);
        let e = sentence_embedding_scores("u zzz", "u", &wv);
        assert!((e.average - 1.0).abs() < 1e-12);
        let e = sentence_embedding_scores("zzz", "u", &wv);
        assert_eq!((e.average, e.extrema, e.greedy), (0.0, 0.0, 0.0));
    }

    fn naive_greedy(h: &[Vec<f64>], r: &[Vec<f64>]) -> f64 {
        let dir = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            let mut total = 0.0;
            for x in a {
                let mut best = -2.0;
                for y in b {
                    let dot: f64 = (0..x.len()).map(|k| x[k] * y[k]).sum();
                    let nx: f64 = (0..x.len()).map(|k| x[k] * x[k]).sum::<f64>().sqrt();
                    let ny: f64 = (0..y.len()).map(|k| y[k] * y[k]).sum::<f64>().sqrt();
                    let c = dot / (nx * ny);
                    if c > best {
                        best = c;
                    }
                }
                total += best;
            }
            total / a.len() as f64
        };
        (dir(h, r) + dir(r, h)) / 2.0
    }

    fn sentences() -> impl Strategy<Value = Vec<(String, String)>> {
        let sentence = prop::collection::vec(0..8usize, 0..7)
            .prop_map(|ws| ws.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" "));
        prop::collection::vec((sentence.clone(), sentence), 1..6)
    }

    fn vocab_table(vecs: &[Vec<f64>]) -> WordVectors {
        let mut wv = WordVectors::new(vecs[0].len());
        for (i, v) in vecs.iter().enumerate() {
            wv.insert(&format!("w{i}"), v.clone()).unwrap();
        }
        wv
    }

    proptest! {
        #[test]
        fn greedy_matches_double_loop(
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 10),
            h in prop::collection::vec(0..10usize, 5),
            r in prop::collection::vec(0..10usize, 5),
        ) {
            prop_assume!(vecs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
            let wv = vocab_table(&vecs);
            let text = |ids: &[usize]| ids.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
            let got = sentence_embedding_scores(&text(&h), &text(&r), &wv).greedy;
            let hv: Vec<Vec<f64>> = h.iter().map(|&i| vecs[i].clone()).collect();
            let rv: Vec<Vec<f64>> = r.iter().map(|&i| vecs[i].clone()).collect();
            prop_assert!((got - naive_greedy(&hv, &rv)).abs() < 1e-9);
        }

        #[test]
        fn scores_in_range_and_order_free(
            pairs in sentences(),
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 8),
            rot in 0..6usize,
        ) {
            let wv = vocab_table(&vecs);
            let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
            let report = report_from_text(1.0, &h, &r, &wv, DistDenominator::Words).unwrap();
            for x in [report.bleu1, report.rouge_l, report.dist1, report.dist2] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            for x in [report.emb_average, report.emb_extrema, report.emb_greedy] {
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
            }
            let mut shuffled = pairs.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let (h2, r2): (Vec<String>, Vec<String>) = shuffled.into_iter().unzip();
            let again = report_from_text(1.0, &h2, &r2, &wv, DistDenominator::Words).unwrap();
            for (a, b) in [
                (report.bleu1, again.bleu1),
                (report.rouge_l, again.rouge_l),
                (report.dist1, again.dist1),
                (report.dist2, again.dist2),
                (report.emb_average, again.emb_average),
                (report.emb_extrema, again.emb_extrema),
                (report.emb_greedy, again.emb_greedy),
            ] {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn greedy_symmetric(
            pair in sentences(),
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 8),
        ) {
            let wv = vocab_table(&vecs);
            let (h, r) = &pair[0];
            let a = sentence_embedding_scores(h, r, &wv);
            let b = sentence_embedding_scores(r, h, &wv);
            prop_assert!((a.greedy - b.greedy).abs() < 1e-12);
            prop_assert!((a.average - b.average).abs() < 1e-12);
            prop_assert!((a.extrema - b.extrema).abs() < 1e-12);
        }

        #[test]
        fn identity_embeddings_one(
            sentence in prop::collection::vec(0..8usize, 1..7),
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 8),
        ) {
            prop_assume!(vecs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)));
            let wv = vocab_table(&vecs);
            let text = sentence.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
            let e = sentence_embedding_scores(&text, &text, &wv);
            prop_assert!((e.greedy - 1.0).abs() < 1e-9);
            prop_assert!((e.average - 1.0).abs() < 1e-9);
            prop_assert!((e.extrema - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_json_keys() {
        let wv = table(&[("a", vec![1.0])]);
        let r = report_from_text(2.0, &s(&["a"]), &s(&["a"]), &wv, DistDenominator::Words).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for k in EvalReport::METRIC_KEYS {
            assert!(v[k].is_f64(), "{k}");
        }
        assert_eq!(v["n_examples"], 1);
    }
}
