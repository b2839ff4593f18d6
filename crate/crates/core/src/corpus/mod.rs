//! Dialog/image data model, corpus file formats and corpus statistics.

mod synth;
mod tokenizer;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detector::RegionSet;
use crate::error::{Error, Result};

pub use synth::{generate_synthetic_world, SynthConfig, SyntheticWorld, CONCEPT_NAMES};
pub use tokenizer::{normalize_tag, TokenId, Tokenizer, SPECIALS};

/// A dialog: ordered context utterances plus the response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub context: Vec<String>,
    pub response: String,
}

impl Dialog {
    pub fn new(id: String, context: Vec<String>, response: String) -> Result<Self> {
        let d = Self { id, context, response };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::InvalidDialog { id: self.id.clone(), reason: reason.into() });
        if self.context.is_empty() {
            return bad("empty context");
        }
        if self.context.iter().any(|u| u.trim().is_empty()) {
            return bad("empty context utterance");
        }
        if self.response.trim().is_empty() {
            return bad("empty response");
        }
        Ok(())
    }
}

/// An image with a global embedding for retrieval and its detected regions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub embedding: Vec<f64>,
    pub regions: RegionSet,
}

impl ImageRecord {
    /// Global embedding = mean of the region features.
    pub fn from_regions(regions: RegionSet) -> Self {
        let embedding = regions.mean_feature();
        Self { id: regions.image_id.clone(), embedding, regions }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Line of `ground_truth.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dialog_id: String,
    pub image_id: String,
    pub split: Split,
}

/// Line of `quadruples.jsonl`: the image assigned to a dialog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub dialog_id: String,
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alternatives: Vec<(String, f64)>,
}

impl Pairing {
    pub fn new(dialog_id: impl Into<String>, image_id: impl Into<String>) -> Self {
        Self { dialog_id: dialog_id.into(), image_id: image_id.into(), score: None, alternatives: Vec::new() }
    }
}

/// The generator's training tuple (O, Q, C, R) in token-id form.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadruple {
    pub dialog_id: String,
    pub image_id: String,
    pub regions: RegionSet,
    /// Token ids of the K concept tags, aligned with `regions.concepts`.
    pub concepts: Vec<TokenId>,
    pub context: Vec<Vec<TokenId>>,
    pub response: Vec<TokenId>,
}

impl Quadruple {
    /// Tokenizes one dialog against its assigned regions. Returns the
    /// quadruple and the number of concept tags that fell back to `[UNK]`.
    pub fn build(dialog: &Dialog, regions: &RegionSet, tok: &Tokenizer) -> Result<(Self, usize)> {
        dialog.validate()?;
        let (mut q, unk) = Self::for_context(&dialog.id, &dialog.context, regions, tok)?;
        q.response = tok.encode(&dialog.response);
        Ok((q, unk))
    }

    /// Quadruple with an empty response, for generating a reply to `context`.
    pub fn for_context(id: &str, context: &[String], regions: &RegionSet, tok: &Tokenizer) -> Result<(Self, usize)> {
        regions.validate()?;
        let mut unk = 0;
        let concepts = regions
            .concepts
            .iter()
            .map(|c| {
                tok.tag_id(c).unwrap_or_else(|| {
                    unk += 1;
                    Tokenizer::UNK
                })
            })
            .collect();
        let q = Self {
            dialog_id: id.to_string(),
            image_id: regions.image_id.clone(),
            regions: regions.clone(),
            concepts,
            context: context.iter().map(|u| tok.encode(u)).collect(),
            response: Vec::new(),
        };
        Ok((q, unk))
    }
}

/// Joins dialogs with their paired regions. Returns the quadruples (in
/// pairing order) and the total count of `[UNK]` concept tags.
pub fn assemble_quadruples(
    dialogs: &[Dialog],
    regions: &BTreeMap<String, RegionSet>,
    pairings: &[Pairing],
    tok: &Tokenizer,
) -> Result<(Vec<Quadruple>, usize)> {
    let by_id: BTreeMap<&str, &Dialog> = dialogs.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = Vec::with_capacity(pairings.len());
    let mut unk = 0;
    for p in pairings {
        let d = by_id
            .get(p.dialog_id.as_str())
            .ok_or_else(|| Error::Config(format!("pairing references unknown dialog {}", p.dialog_id)))?;
        let r = regions.get(&p.image_id).ok_or_else(|| Error::UnknownImage(p.image_id.clone()))?;
        let (q, u) = Quadruple::build(d, r, tok)?;
        unk += u;
        out.push(q);
    }
    Ok((out, unk))
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads `dialogs.jsonl`, validating every dialog.
pub fn load_dialogs(path: &Path) -> Result<Vec<Dialog>> {
    let dialogs: Vec<Dialog> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for d in &dialogs {
        d.validate()?;
        if !seen.insert(d.id.as_str()) {
            return Err(Error::DuplicateId(d.id.clone()));
        }
    }
    Ok(dialogs)
}

/// Images containing both `anchor` and another tag, per other tag.
///
/// Sorted by descending count, ties alphabetical, anchor excluded.
pub fn tag_cooccurrence(
    records: &[ImageRecord],
    known_tags: &[String],
    anchor: &str,
    top_n: usize,
) -> Result<Vec<(String, usize)>> {
    let anchor = normalize_tag(anchor);
    if !known_tags.iter().any(|t| normalize_tag(t) == anchor) {
        return Err(Error::UnknownTag(anchor));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let tags: BTreeSet<String> = r.regions.concepts.iter().map(|c| normalize_tag(c)).collect();
        if !tags.contains(&anchor) {
            continue;
        }
        for t in tags {
            if t != anchor {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_n);
    Ok(ranked)
}
