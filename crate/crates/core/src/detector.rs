//! Visual concept detector boundary.
//!
//! Region features and tags are consumed as data (`regions.jsonl`) or
//! synthesized from a [`SyntheticWorld`]. The detector model itself is not
//! part of this crate.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::corpus::{read_jsonl, write_jsonl, ImageRecord, SyntheticWorld};
use crate::error::{Error, Result};

/// Region count used by the reference detector setup.
pub const DEFAULT_K: usize = 36;
/// Feature width of precomputed detector features.
pub const DEFAULT_D_OBJ: usize = 2048;

/// K region feature vectors and their concept tags for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub image_id: String,
    pub features: Vec<Vec<f64>>,
    pub concepts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn d_obj(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::RegionShape { image_id: self.image_id.clone(), reason });
        if self.features.is_empty() {
            return fail("no regions".into());
        }
        if self.features.len() != self.concepts.len() {
            return fail(format!("{} features but {} concepts", self.features.len(), self.concepts.len()));
        }
        let d = self.d_obj();
        if d == 0 {
            return fail("zero-width features".into());
        }
        if let Some(bad) = self.features.iter().position(|r| r.len() != d) {
            return fail(format!("feature row {bad} has width {} (expected {d})", self.features[bad].len()));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return fail("non-finite feature value".into());
        }
        if self.concepts.iter().any(|c| c.trim().is_empty()) {
            return fail("empty concept tag".into());
        }
        if let Some(b) = &self.boxes {
            if b.len() != self.features.len() {
                return fail(format!("{} boxes for {} regions", b.len(), self.features.len()));
            }
        }
        Ok(())
    }

    pub fn feature_matrix(&self) -> Mat {
        let d = self.d_obj();
        Mat::from_shape_fn((self.features.len(), d), |(i, j)| self.features[i][j])
    }

    pub fn mean_feature(&self) -> Vec<f64> {
        let d = self.d_obj();
        let mut mean = vec![0.0; d];
        for row in &self.features {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.features.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Loads `regions.jsonl` into a map keyed by image id.
pub fn load_regions(path: &Path) -> Result<BTreeMap<String, RegionSet>> {
    let sets: Vec<RegionSet> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for r in sets {
        r.validate()?;
        let id = r.image_id.clone();
        if out.insert(id.clone(), r).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(out)
}

pub fn write_regions<'a>(path: &Path, sets: impl IntoIterator<Item = &'a RegionSet>) -> Result<()> {
    let sets: Vec<&RegionSet> = sets.into_iter().collect();
    write_jsonl(path, &sets)
}

/// Reads `tags.txt`: one detector tag per line.
pub fn load_tags(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

pub fn save_tags(path: &Path, tags: &[String]) -> Result<()> {
    let mut text = tags.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Samples `k` regions from the image's concept bag.
///
/// With `k <= |bag|` the regions are a random subset; otherwise every bag
/// concept appears once and the rest are drawn with replacement. Each
/// feature is the concept latent plus Gaussian noise of scale `noise`.
pub fn synthetic_detect(
    image: &ImageRecord,
    world: &SyntheticWorld,
    k: usize,
    noise: f64,
    seed: u64,
) -> Result<RegionSet> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let idx = world.image_index(&image.id).ok_or_else(|| Error::UnknownImage(image.id.clone()))?;
    let bag = &world.bags[idx];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));

    let mut picks: Vec<usize> = if k <= bag.len() {
        bag.choose_multiple(&mut rng, k).copied().collect()
    } else {
        let mut p = bag.clone();
        while p.len() < k {
            p.push(*bag.choose(&mut rng).expect("non-empty bag"));
        }
        p
    };
    picks.shuffle(&mut rng);

    let normal = Normal::new(0.0, noise).expect("valid noise");
    let features = picks
        .iter()
        .map(|&c| {
            world
                .latents
                .row(c)
                .iter()
                .map(|&v| if noise > 0.0 { v + normal.sample(&mut rng) } else { v })
                .collect()
        })
        .collect();
    let boxes = picks
        .iter()
        .map(|_| {
            let x1 = rng.random_range(0.0..560.0);
            let y1 = rng.random_range(0.0..400.0);
            [x1, y1, x1 + rng.random_range(16.0..80.0), y1 + rng.random_range(16.0..80.0)]
        })
        .collect();
    let set = RegionSet {
        image_id: image.id.clone(),
        features,
        concepts: picks.iter().map(|&c| world.concepts[c].clone()).collect(),
        boxes: Some(boxes),
    };
    set.validate()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_world, SynthConfig};

    fn world() -> SyntheticWorld {
        generate_synthetic_world(&SynthConfig {
            n_concepts: 10,
            n_images: 3,
            n_dialogs: 3,
            n_test: 0,
            d_obj: 6,
            k: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn load_valid_file() {
        let w = world();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("regions.jsonl");
        write_regions(&path, w.images.iter().map(|i| &i.regions)).unwrap();
        let loaded = load_regions(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for img in &w.images {
            assert_eq!(loaded[&img.id], img.regions);
        }
    }

    #[test]
    fn ragged_record_names_image() {
        let mut r = world().images[0].regions.clone();
        r.concepts.pop();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("regions.jsonl");
        write_regions(&path, [&r]).unwrap();
        match load_regions(&path) {
            Err(Error::RegionShape { image_id, .. }) => assert_eq!(image_id, r.image_id),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut r = world().images[0].regions.clone();
        r.features[0][0] = f64::NAN;
        assert!(r.validate().is_err());
    }

    #[test]
    fn noiseless_detection_matches_latents() {
        let w = world();
        let set = synthetic_detect(&w.images[1], &w, 7, 0.0, 5).unwrap();
        assert_eq!(set.len(), 7);
        for (row, c) in set.features.iter().zip(&set.concepts) {
            let ci = w.concept_index(c).unwrap();
            assert!(w.bags[1].contains(&ci));
            assert_eq!(row.as_slice(), w.latents.row(ci).as_slice().unwrap());
        }
        // every bag concept is present when k exceeds the bag
        for &c in &w.bags[1] {
            assert!(set.concepts.contains(&w.concepts[c]));
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let w = world();
        let a = synthetic_detect(&w.images[0], &w, DEFAULT_K, 0.1, 11).unwrap();
        let b = synthetic_detect(&w.images[0], &w, DEFAULT_K, 0.1, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 36);
        assert!(synthetic_detect(&w.images[0], &w, 0, 0.1, 11).is_err());
    }

    #[test]
    fn tags_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tags.txt");
        let tags = vec!["dog".to_string(), "traffic_light".into()];
        save_tags(&path, &tags).unwrap();
        assert_eq!(load_tags(&path).unwrap(), tags);
    }
}
