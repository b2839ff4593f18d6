//! Flat `key = value` pipeline configuration.
//!
//! Every setting has a dotted key (`generator.hidden`, `retriever.lr`,
//! `paths.dir`, ...). Blank lines and lines starting with `#` are ignored.
//! Values are parsed according to the type of the built-in default; lists
//! are comma separated. Component seeds follow the top-level `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::corpus::SynthConfig;
use crate::detector::DEFAULT_K;
use crate::generator::{Decode, GeneratorConfig};
use crate::metrics::{DistDenominator, EvalOptions};
use crate::retriever::TowerConfig;

/// Artifact file names, resolved against `dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dir: String,
    pub dialogs: String,
    pub train_dialogs: String,
    pub test_dialogs: String,
    pub regions: String,
    pub tags: String,
    pub vocab: String,
    pub ground_truth: String,
    pub retriever: String,
    pub index: String,
    pub train_pairs: String,
    pub test_pairs: String,
    pub generator: String,
    pub generations: String,
    pub report: String,
    pub attention: String,
    pub audit: String,
}

impl Default for Paths {
    fn default() -> Self {
        let s = |x: &str| x.to_string();
        Self {
            dir: s("."),
            dialogs: s("dialogs.jsonl"),
            train_dialogs: s("dialogs.train.jsonl"),
            test_dialogs: s("dialogs.test.jsonl"),
            regions: s("regions.jsonl"),
            tags: s("tags.txt"),
            vocab: s("vocab.txt"),
            ground_truth: s("ground_truth.jsonl"),
            retriever: s("retriever.bin"),
            index: s("index.bin"),
            train_pairs: s("quadruples.train.jsonl"),
            test_pairs: s("quadruples.test.jsonl"),
            generator: s("generator.bin"),
            generations: s("generations.jsonl"),
            report: s("report.json"),
            attention: s("attention.json"),
            audit: s("queries.audit.jsonl"),
        }
    }
}

impl Paths {
    pub fn resolve(&self, name: &str) -> PathBuf {
        Path::new(&self.dir).join(name)
    }
}

/// Synthetic world and detector settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub n_concepts: usize,
    pub n_images: usize,
    pub n_dialogs: usize,
    pub n_test: usize,
    pub d_obj: usize,
    /// Concepts per image bag.
    pub bag_size: usize,
    /// Noise of the latent image features.
    pub noise: f64,
    pub planted_rate: f64,
    /// Regions emitted per image by the detector.
    pub k: usize,
    /// Noise added by the detector to each region feature.
    pub region_noise: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let w = SynthConfig::default();
        Self {
            n_concepts: w.n_concepts,
            n_images: w.n_images,
            n_dialogs: w.n_dialogs,
            n_test: w.n_test,
            d_obj: w.d_obj,
            bag_size: w.k,
            noise: w.noise,
            planted_rate: w.planted_rate,
            k: DEFAULT_K,
            region_noise: w.noise,
        }
    }
}

impl SynthSettings {
    pub fn world(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_concepts: self.n_concepts,
            n_images: self.n_images,
            n_dialogs: self.n_dialogs,
            n_test: self.n_test,
            d_obj: self.d_obj,
            k: self.bag_size,
            noise: self.noise,
            planted_rate: self.planted_rate,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_k: usize,
    /// Longest reply; `0` uses the generator's response length limit.
    pub max_len: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, temperature: 1.0, top_k: 0, max_len: 0 }
    }
}

impl DecodeSettings {
    pub fn decode(&self) -> Decode {
        match self.mode {
            DecodeMode::Greedy => Decode::Greedy,
            DecodeMode::Sample => Decode::Sample { temperature: self.temperature, top_k: self.top_k },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub dist_denominator: DistDenominator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSettings,
    pub retriever: TowerConfig,
    pub generator: GeneratorConfig,
    pub decode: DecodeSettings,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            paths: Paths::default(),
            synth: SynthSettings::default(),
            retriever: TowerConfig::default(),
            generator: GeneratorConfig::default(),
            decode: DecodeSettings::default(),
            eval: EvalSettings::default(),
        };
        c.retriever.image_encoder_dim = c.synth.d_obj;
        c.generator.d_obj = c.synth.d_obj;
        c
    }
}

/// Keys that are derived rather than configured.
fn derived(key: &str) -> bool {
    key.ends_with(".seed") || key == "generator.vocab_size"
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config sections are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(xs) => xs.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn parse_like(template: &Value, raw: &str) -> Result<Value, String> {
    let raw = raw.trim();
    match template {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got {raw:?}")),
        Value::Number(n) if n.is_u64() => {
            raw.parse::<u64>().map(Value::from).map_err(|_| format!("expected a non-negative integer, got {raw:?}"))
        }
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().map(Value::from).map_err(|_| format!("expected an integer, got {raw:?}")),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a finite number, got {raw:?}")),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(xs) => {
            let elem = xs.first().ok_or("list without a default element type")?;
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            raw.split(',').map(|x| parse_like(elem, x)).collect::<Result<_, _>>().map(Value::Array)
        }
        _ => Err("unsupported value type".into()),
    }
}

impl PipelineConfig {
    fn flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Copies the top-level seed into every component.
    pub fn sync_seeds(&mut self) {
        self.retriever.seed = self.seed;
        self.generator.seed = self.seed;
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let mut flat = self.flat();
        let key = key.trim();
        let template = match flat.get(key) {
            Some(t) if !derived(key) => t,
            _ => return Err(format!("unknown config key {key:?}")),
        };
        let v = parse_like(template, raw).map_err(|e| format!("{key}: {e}"))?;
        flat.insert(key.to_string(), v);
        *self = serde_json::from_value(unflatten(&flat)).map_err(|e| format!("{key}: {e}"))?;
        self.sync_seeds();
        Ok(())
    }

    /// Parses the file format over the defaults. Errors name the line.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            cfg.set(k, v).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        cfg.sync_seeds();
        Ok(cfg)
    }

    /// Every configurable key with its current value.
    pub fn to_text(&self) -> String {
        self.flat()
            .iter()
            .filter(|(k, _)| !derived(k))
            .map(|(k, v)| format!("{k} = {}\n", render(v)))
            .collect()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.paths.resolve(name)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions { decode: self.decode.decode(), seed: self.seed, dist_denominator: self.eval.dist_denominator }
    }
}
