//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 8`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use std::rc::Rc;

use groundchat::autodiff::{Mat, ParamTree};
use groundchat::corpus::{generate_synthetic_world, Quadruple, Split, SynthConfig, TokenId, Tokenizer};
use groundchat::generator::{
    build_attention_mask, build_inputs, mcp_loss, mrp_loss, vkb_distribution, Decode, GeneratorConfig,
    GeneratorModel, IncrementalDecoder, SequenceLayout,
};
use groundchat::index::VectorIndex;
use groundchat::metrics::{
    bleu1, distinct_n, embedding_scores, perplexity, rouge_l, DistDenominator, EvalReport, WordVectors,
};
use groundchat::matching::{brute_force_assignment, solve_assignment, CostMatrix};
use groundchat::retriever::{
    build_query, recall_at_1, train_retriever, QueryMode, TowerConfig, TrainingPair, UnitEmbedding,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    if elapsed <= budget {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, budget {budget:?}"))
    }
}

fn assignment_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for n in 2..=6 {
        for _ in 0..100 {
            let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let c = CostMatrix::from_vec(n, data).unwrap();
            let fast = solve_assignment(&c);
            let slow = brute_force_assignment(&c).unwrap();
            worst = worst.max((fast.total_cost - slow.total_cost).abs());
        }
    }
    if worst > 1e-9 {
        return Err(format!("max cost gap {worst:e}"));
    }
    let data: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
    let c = CostMatrix::from_vec(64, data).unwrap();
    let start = Instant::now();
    let a = solve_assignment(&c);
    let t = start.elapsed();
    within(t, Duration::from_secs(1))?;
    check(a.perm.len() == 64, format!("max cost gap {worst:e}; n=64 in {t:.1?}"))
}

fn mips_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 128;
    let rows: Vec<UnitEmbedding> = (0..10_000).map(|_| UnitEmbedding::random(&mut rng, dim)).collect();
    let mut index = VectorIndex::new(dim);
    for (i, r) in rows.iter().enumerate() {
        index.add(&format!("v{i:05}"), r).unwrap();
    }
    index.freeze();
    let queries: Vec<UnitEmbedding> = (0..100).map(|_| UnitEmbedding::random(&mut rng, dim)).collect();
    for (qi, q) in queries.iter().enumerate() {
        let hits = index.search_top_k(q, 10).unwrap();
        // linear scan at the index's storage precision
        let qf: Vec<f64> = q.as_slice().iter().map(|&x| x as f32 as f64).collect();
        let mut scan: Vec<(f64, String)> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let s = r.as_slice().iter().zip(&qf).map(|(&a, &b)| (a as f32 as f64) * b).sum();
                (s, format!("v{i:05}"))
            })
            .collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let got: Vec<(&str, f64)> = hits.iter().map(|h| (h.id.as_str(), h.score)).collect();
        let want: Vec<(&str, f64)> = scan[..10].iter().map(|(s, id)| (id.as_str(), *s)).collect();
        if got != want {
            return Err(format!("query {qi}: top-10 differs from linear scan"));
        }
        let nearest = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d: f64 = r.as_slice().iter().zip(q.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        if hits[0].id != format!("v{nearest:05}") {
            return Err(format!("query {qi}: euclidean nearest neighbour differs from inner-product top-1"));
        }
    }
    let t = start.elapsed();
    within(t, Duration::from_secs(30))?;
    Ok(format!("100 queries over 10000 vectors exact in {t:.1?}"))
}

fn retrieval_sanity() -> Outcome {
    let start = Instant::now();
    let world = generate_synthetic_world(&SynthConfig { noise: 0.05, ..Default::default() }).unwrap();
    let train = world.dialogs_in(Split::Train);
    let test = world.dialogs_in(Split::Test);
    let image_of = |id: &str| {
        let g = world.ground_truth.iter().find(|g| g.dialog_id == id).unwrap();
        world.images[world.image_index(&g.image_id).unwrap()].clone()
    };
    let tok = Tokenizer::build(&train, &world.concepts, 1).unwrap();
    let pairs: Vec<TrainingPair> = train
        .iter()
        .map(|d| TrainingPair { query: build_query(d, QueryMode::Train), image: image_of(&d.id) })
        .collect();
    let cfg = TowerConfig { image_encoder_dim: world.latents.ncols(), ..Default::default() };
    let (model, curve) = train_retriever(&pairs, tok, cfg).unwrap();
    let queries: Vec<(String, String)> =
        test.iter().map(|d| (build_query(d, QueryMode::Infer), image_of(&d.id).id)).collect();
    let held_out: Vec<_> = test.iter().map(|d| image_of(&d.id)).collect();
    let recall = recall_at_1(&model, &queries, &held_out).unwrap();
    let t = start.elapsed();
    within(t, Duration::from_secs(300))?;
    check(
        recall >= 0.9,
        format!(
            "held-out recall@1 {recall:.3} over {} unseen images ({} train / {} test pairs), loss {:.4} -> {:.4}, {t:.1?}",
            held_out.len(),
            pairs.len(),
            queries.len(),
            curve[0],
            curve.last().unwrap()
        ),
    )
}

/// Synthetic quadruples and a tokenizer over them. With `vocab` set, the
/// vocabulary is cut or padded to exactly that many entries.
fn synthetic_quads(n: usize, k: usize, d_obj: usize, vocab: Option<usize>, seed: u64) -> (Tokenizer, Vec<Quadruple>) {
    let world = generate_synthetic_world(&SynthConfig {
        n_concepts: 12,
        n_images: n,
        n_dialogs: n,
        n_test: 0,
        d_obj,
        k,
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut tok = Tokenizer::build(&world.dialogs, &world.concepts, 1).unwrap();
    if let Some(v) = vocab {
        let mut tokens = tok.tokens().to_vec();
        tokens.truncate(v);
        let mut i = 0;
        while tokens.len() < v {
            tokens.push(format!("filler{i}"));
            i += 1;
        }
        tok = Tokenizer::from_tokens(tokens).unwrap();
    }
    let quads = world.quadruples(Split::Train, &tok).unwrap();
    (tok, quads)
}

fn tiny_generator(tok: Tokenizer, k: usize, d_obj: usize, init_std: f64, seed: u64) -> GeneratorModel {
    let cfg = GeneratorConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ffn_dim: 32,
        region_len: k,
        d_obj,
        max_context_len: 32,
        max_response_len: 12,
        init_std,
        seed,
        ..Default::default()
    };
    GeneratorModel::new(cfg, tok).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn mask_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (tok, _) = synthetic_quads(4, 3, 6, None, 0);
    let vocab = tok.len() as TokenId;
    let model = tiny_generator(tok, 4, 6, 0.3, 1);
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for trial in 0..50 {
        let lengths = [rng.random_range(0..=4), rng.random_range(0..=4), rng.random_range(0..=8), rng.random_range(0..=6)];
        let n: usize = lengths.iter().sum();
        if n == 0 {
            continue;
        }
        let mask = build_attention_mask(lengths);
        let b = lengths[0] + lengths[1] + lengths[2];
        for i in 0..n {
            for j in 0..n {
                let rule = j < b || (i >= b && j >= b && j <= i);
                if mask[[i, j]] != rule {
                    return Err(format!("trial {trial}: mask{lengths:?}[{i}][{j}] = {}", mask[[i, j]]));
                }
            }
        }
        let segment_ids: Vec<usize> = (0..4).flat_map(|s| std::iter::repeat_n(s, lengths[s])).collect();
        let layout = SequenceLayout {
            token_ids: (0..n).map(|i| if i < lengths[0] { Tokenizer::REGION } else { rng.random_range(0..vocab) }).collect(),
            turn_ids: (0..n).map(|_| rng.random_range(0..4)).collect(),
            position_ids: (0..n).collect(),
            segment_ids,
            object_features: Mat::from_shape_fn((lengths[0], 6), |_| rng.random_range(-1.0..1.0)),
            attention_mask: Rc::new(mask.clone()),
            lengths,
        };
        let base = model.hidden_states(&layout).map_err(|e| e.to_string())?;
        for j in 0..n {
            let hidden_from: Vec<usize> = (0..n).filter(|&i| !mask[[i, j]]).collect();
            if hidden_from.is_empty() {
                continue;
            }
            let mut changed = layout.clone();
            if j < lengths[0] {
                changed.object_features.row_mut(j).mapv_inplace(|x| x + 3.0);
            } else {
                changed.token_ids[j] = (changed.token_ids[j] + 1 + rng.random_range(0..vocab - 1)) % vocab;
            }
            let after = model.hidden_states(&changed).map_err(|e| e.to_string())?;
            for &i in &hidden_from {
                worst = worst.max(max_abs_diff(base.row(i).as_slice().unwrap(), after.row(i).as_slice().unwrap()));
            }
            if max_abs_diff(base.row(j).as_slice().unwrap(), after.row(j).as_slice().unwrap()) == 0.0 {
                return Err(format!("trial {trial}: perturbing key {j} did not change its own row"));
            }
            probes += 1;
        }
    }
    check(worst < 1e-9, format!("{probes} disallowed-key perturbations, max |delta| {worst:e}"))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let (tok, quads) = synthetic_quads(4, 4, 6, Some(50), 2);
    let mut model = tiny_generator(tok, 4, 6, 0.1, 3);
    model.collect_global_concepts(&quads);
    let c = &model.config;
    if (c.layers, c.hidden, c.vocab_size, c.region_len) != (2, 16, 50, 4) || !c.vkb_enabled || !c.mcp_enabled {
        return Err("fixture does not have the required shape".into());
    }
    let batch = build_inputs(&quads[0], &model.config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let parts = model.loss_values(&batch).unwrap();
    let (_, grads) = model.loss_and_grads(std::slice::from_ref(&batch)).unwrap();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_at = (0, 0, 0.0, 0.0);
    let mut checked = 0;
    for t in 0..grads.len() {
        for k in 0..grads[t].len() {
            let orig = model.params.params()[t].as_slice().unwrap()[k];
            model.params.params_mut()[t].as_slice_mut().unwrap()[k] = orig + eps;
            let up = model.loss_values(&batch).unwrap().total;
            model.params.params_mut()[t].as_slice_mut().unwrap()[k] = orig - eps;
            let down = model.loss_values(&batch).unwrap().total;
            model.params.params_mut()[t].as_slice_mut().unwrap()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = grads[t].as_slice().unwrap()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR);
            if rel > worst {
                worst = rel;
                worst_at = (t, k, a, fd);
            }
            checked += 1;
        }
    }
    let t = start.elapsed();
    within(t, Duration::from_secs(120))?;
    check(
        worst < 1e-4,
        format!(
            "{checked} parameters, loss {:.4} (mcp {:.4} + mrp {:.4}), max relative error {worst:.2e} at tensor {} entry {} (analytic {:.3e}, numeric {:.3e}), {t:.1?}",
            parts.total, parts.mcp, parts.mrp, worst_at.0, worst_at.1, worst_at.2, worst_at.3
        ),
    )
}

/// Denominator floor for the relative gradient error. Central differences
/// on a loss near 30 carry about 1e-10 of rounding noise at this step size,
/// so gradients below the floor are compared on an absolute scale.
const GRAD_FLOOR: f64 = 1e-6;

fn hungarian_dominance() -> Outcome {
    let (tok, quads) = synthetic_quads(16, 8, 6, None, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg_model = tiny_generator(tok, 8, 6, 0.5, 7);
    let mut strict = 0;
    for i in 0..100 {
        let q = &quads[rng.random_range(0..quads.len())];
        let cfg = GeneratorConfig { mcp_rate: 0.5, ..cfg_model.config.clone() };
        let batch = build_inputs(q, &cfg, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
        let out = cfg_model.forward(&batch).unwrap();
        let hungarian = mcp_loss(&out.concept_logits, &batch.mcp_targets);
        let identity = mrp_loss(&out.concept_logits, &batch.mcp_targets);
        if hungarian > identity + 1e-12 {
            return Err(format!("batch {i}: {hungarian} > identity {identity}"));
        }
        if hungarian < identity - 1e-12 {
            strict += 1;
        }
    }
    // first prediction favours the second target and vice versa
    let logits = Mat::from_shape_vec((2, 4), vec![0.1, 3.0, 0.0, 0.0, 2.5, 0.2, 0.0, 0.0]).unwrap();
    let hungarian = mcp_loss(&logits, &[0, 1]);
    let identity = mrp_loss(&logits, &[0, 1]);
    check(
        hungarian < identity,
        format!("100 batches dominated ({strict} strictly); swapped example {hungarian:.4} < {identity:.4}"),
    )
}

fn vkb_locality() -> Outcome {
    let (tok, quads) = synthetic_quads(8, 4, 6, None, 8);
    let on = tiny_generator(tok, 4, 6, 0.5, 9);
    let mut off = on.clone();
    off.config.vkb_enabled = false;
    let mut worst_sum: f64 = 0.0;
    let mut touched = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (i, q) in quads.iter().enumerate() {
        let batch = build_inputs(q, &on.config, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        let a = on.forward(&batch).unwrap();
        let b = off.forward(&batch).unwrap();
        if a.hidden != b.hidden {
            return Err("hidden states depend on the bias switch".into());
        }
        for r in 0..a.response_logits.nrows() {
            for v in 0..on.config.vocab_size {
                let delta = a.response_logits[[r, v]] - b.response_logits[[r, v]];
                let is_concept = batch.concept_ids.contains(&(v as TokenId));
                if !is_concept && delta != 0.0 {
                    return Err(format!("example {i}: non-concept entry {v} moved by {delta:e}"));
                }
                if is_concept && delta != 0.0 {
                    touched += 1;
                }
            }
        }
        let head = on.head();
        for &p in &batch.mrp_positions {
            let e_q = a.hidden.slice(ndarray::s![batch.layout.concept_range(), ..]).to_owned();
            let dist = vkb_distribution(a.hidden.row(p), &e_q, &batch.concept_ids, &head);
            worst_sum = worst_sum.max((dist.iter().sum::<f64>() - 1.0).abs());
        }
        let e_r = ndarray::Array1::from_shape_fn(16, |_| rng.random_range(-2.0..2.0));
        let e_q = Mat::from_shape_fn((4, 16), |_| rng.random_range(-2.0..2.0));
        let dist = vkb_distribution(e_r.view(), &e_q, &batch.concept_ids, &head);
        worst_sum = worst_sum.max((dist.iter().sum::<f64>() - 1.0).abs());
    }
    if touched == 0 {
        return Err("bias never changed a concept entry".into());
    }
    check(
        worst_sum <= 1e-6,
        format!("non-concept deltas exactly 0 over {} examples, {touched} concept entries biased, max |sum - 1| {worst_sum:e}", quads.len()),
    )
}

fn overfit_run() -> Outcome {
    let start = Instant::now();
    let (tok, quads) = synthetic_quads(32, 4, 16, None, 11);
    let cfg = GeneratorConfig {
        layers: 2,
        hidden: 64,
        heads: 4,
        ffn_dim: 256,
        region_len: 4,
        d_obj: 16,
        batch_size: 8,
        epochs: usize::MAX,
        max_steps: 500,
        lr: 1e-3,
        seed: 12,
        ..Default::default()
    };
    let mut model = GeneratorModel::new(cfg, tok).unwrap();
    let report = model.train(&quads, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let (mut nll, mut count) = (0.0, 0);
    let mut exact = 0;
    for q in &quads {
        let tf = model.teacher_forced(q).unwrap();
        nll += tf.nll();
        count += tf.targets.len();
        let g = model.generate(q, Decode::Greedy, model.config.max_response_len, 0).unwrap();
        if g.tokens == q.response {
            exact += 1;
        }
    }
    let ppl = (nll / count as f64).exp();
    let rate = exact as f64 / quads.len() as f64;
    let t = start.elapsed();
    within(t, Duration::from_secs(600))?;
    check(
        report.steps == 500 && ppl < 1.5 && rate >= 0.9,
        format!(
            "{} steps, loss {:.3} -> {:.3}, teacher-forced PPL {ppl:.4}, exact greedy {exact}/{} ({:.0}%), {t:.1?}",
            report.steps,
            report.step_losses[0],
            report.step_losses.last().unwrap(),
            quads.len(),
            rate * 100.0
        ),
    )
}

fn decoding_consistency() -> Outcome {
    let (tok, quads) = synthetic_quads(8, 4, 6, None, 13);
    let vocab = tok.len() as TokenId;
    let model = tiny_generator(tok, 4, 6, 0.5, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for _ in 0..20 {
        let q = &quads[rng.random_range(0..quads.len())];
        let len = rng.random_range(0..=8);
        let prefix: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let full = model.teacher_forced_prefix(q, &prefix).map_err(|e| e.to_string())?;
        let mut dec = IncrementalDecoder::new(&model, q).map_err(|e| e.to_string())?;
        for (t, want) in full.distributions.iter().enumerate() {
            let got = dec.next_distribution().map_err(|e| e.to_string())?;
            worst = worst.max(max_abs_diff(&got, want));
            steps += 1;
            if t < prefix.len() {
                dec.push(prefix[t]);
            }
        }
    }
    check(worst < 1e-5, format!("20 prefixes, {steps} steps, max |p_incremental - p_full| {worst:e}"))
}

fn metric_unit_values() -> Outcome {
    let pairs: Vec<String> = ["the cat sits on the mat", "a red ball near a dog", "hello there"].map(String::from).to_vec();
    let bleu = bleu1(&pairs, &pairs).map_err(|e| e.to_string())?;
    let rouge = rouge_l(&pairs, &pairs).map_err(|e| e.to_string())?;
    let dist1 = distinct_n(&["a a b".to_string()], 1, DistDenominator::Words);

    let (tok, quads) = synthetic_quads(8, 4, 6, None, 16);
    let mut model = tiny_generator(tok, 4, 6, 0.3, 17);
    let wv = WordVectors::from_generator(&model);
    let known: Vec<String> = quads.iter().map(|q| model.tokenizer.decode(&q.response)).collect();
    let emb = embedding_scores(&known, &known, &wv).map_err(|e| e.to_string())?;
    for m in [&mut model.params.head_w, &mut model.params.head_b, &mut model.params.vkb_w, &mut model.params.vkb_b] {
        m.fill(0.0);
    }
    let ppl = perplexity(&model, &quads).map_err(|e| e.to_string())?;
    let v = model.tokenizer.len() as f64;
    let ok = bleu == 1.0
        && rouge == 1.0
        && (dist1 - 2.0 / 3.0).abs() < 1e-12
        && (ppl - v).abs() < 1e-9
        && [emb.average, emb.extrema, emb.greedy].iter().all(|x| (x - 1.0).abs() < 1e-9);
    check(
        ok,
        format!(
            "BLEU-1 {bleu}, Rouge-L {rouge}, Dist-1 {dist1:.6}, uniform PPL {ppl:.9} (|V| = {v}), embedding {:.9}/{:.9}/{:.9}",
            emb.average, emb.extrema, emb.greedy
        ),
    )
}

fn run_cli(dir: &std::path::Path, args: &[&str]) -> Result<(), String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_groundchat"))
        .args(["--dir", dir.to_str().unwrap(), "--seed", "11"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let steps: [&[&str]; 6] = [
        &["train-retriever"],
        &["build-index"],
        &["retrieve", "--split", "train"],
        &["retrieve", "--split", "test"],
        &["train-generator"],
        &["evaluate"],
    ];
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = root.path().join(name);
        run_cli(root.path(), &["synth", "--out", dir.to_str().unwrap()])?;
        for step in steps {
            run_cli(&dir, step)?;
        }
        runs.push(dir);
    }
    let mut identical = Vec::new();
    for f in ["regions.jsonl", "retriever.bin", "index.bin", "quadruples.train.jsonl", "quadruples.test.jsonl", "generator.bin", "report.json"] {
        let a = std::fs::read(runs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(runs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
        identical.push(f);
    }
    let text = std::fs::read_to_string(runs[0].join("report.json")).map_err(|e| e.to_string())?;
    let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let report: EvalReport = serde_json::from_value(json.clone()).map_err(|e| e.to_string())?;
    let complete = EvalReport::METRIC_KEYS.iter().all(|k| json[k].as_f64().is_some_and(f64::is_finite))
        && report.n_examples > 0
        && report.ppl >= 1.0;
    let t = start.elapsed();
    within(t, Duration::from_secs(900))?;
    check(
        complete,
        format!(
            "two runs byte-identical ({} artifacts), {} test examples, PPL {:.3}, BLEU-1 {:.4}, Rouge-L {:.4}, Dist-1 {:.4}, Dist-2 {:.4}, {t:.1?}",
            identical.len(),
            report.n_examples,
            report.ppl,
            report.bleu1,
            report.rouge_l,
            report.dist1,
            report.dist2
        ),
    )
}

const CRITERIA: &[(u32, &str, fn() -> Outcome)] = &[
    (1, "assignment oracle", assignment_oracle),
    (2, "MIPS exactness", mips_exactness),
    (3, "retrieval sanity", retrieval_sanity),
    (4, "mask soundness", mask_soundness),
    (5, "gradient check", gradient_check),
    (6, "Hungarian dominance", hungarian_dominance),
    (7, "VKB locality", vkb_locality),
    (8, "overfit run", overfit_run),
    (9, "decoding consistency", decoding_consistency),
    (10, "metric unit values", metric_unit_values),
    (11, "end-to-end pipeline", end_to_end),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for &(n, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
