//! Deterministic synthetic stand-in for an image pool plus a dialog corpus.
//!
//! Each concept has a fixed unit-norm latent vector. An image is a bag of
//! concepts whose region features are the latents plus isotropic noise, and
//! every dialog talks about the concepts of exactly one image.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dialog, GroundTruth, ImageRecord, Quadruple, Split, Tokenizer};
use crate::autodiff::Mat;
use crate::detector::RegionSet;
use crate::error::{Error, Result};

/// Concept names used before falling back to `concept_<i>`. The first two
/// form the planted co-occurring pair.
pub const CONCEPT_NAMES: [&str; 64] = [
    "pizza", "table", "dog", "cat", "beach", "sunset", "bicycle", "car", "tree", "flower",
    "guitar", "cake", "coffee", "book", "horse", "boat", "train", "mountain", "river", "bird",
    "umbrella", "kite", "surfboard", "skateboard", "laptop", "phone", "clock", "lamp", "sofa", "bed",
    "window", "door", "bridge", "tower", "castle", "snow", "sheep", "cow", "elephant", "giraffe",
    "zebra", "banana", "apple", "orange", "sandwich", "donut", "bottle", "cup", "bowl", "chair",
    "traffic_light", "hot_dog", "teddy_bear", "fire_hydrant", "stop_sign", "tennis_racket", "wine_glass", "ice_cream", "park", "garden",
    "lake", "candle", "fence", "bench",
];

const ONE: [&str; 6] = [
    "i just saw a {} on my way home",
    "have you ever seen such a big {}",
    "my friend really loves the {}",
    "look at this {} over here",
    "there was a {} at the party",
    "we talked about the {} all day",
];
const TWO: [&str; 4] = [
    "there is a {} right next to the {}",
    "the {} and the {} look nice together",
    "i like the {} more than the {}",
    "someone left a {} beside the {}",
];
const THREE: [&str; 2] = ["a {} , a {} and a {} all in one place", "i found a {} near the {} and the {}"];
const RESPONSE_ONE: [&str; 5] = [
    "wow that {} looks amazing",
    "i would love to see the {} too",
    "haha i also have a {}",
    "the {} sounds lovely",
    "send me a picture of the {}",
];
const RESPONSE_TWO: [&str; 3] = [
    "the {} near the {} sounds lovely",
    "a {} and a {} is a great combo",
    "i prefer the {} to the {}",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_concepts: usize,
    pub n_images: usize,
    pub n_dialogs: usize,
    /// The last `n_test` dialogs form the test split.
    pub n_test: usize,
    pub d_obj: usize,
    /// Concepts per image bag.
    pub k: usize,
    /// Standard deviation of the isotropic region-feature noise.
    pub noise: f64,
    /// Probability that an image's bag starts with the planted pair.
    pub planted_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_concepts: 40,
            n_images: 250,
            n_dialogs: 250,
            n_test: 50,
            d_obj: 64,
            k: 4,
            noise: 0.05,
            planted_rate: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub concepts: Vec<String>,
    /// `n_concepts x d_obj`, unit-norm rows.
    pub latents: Mat,
    pub images: Vec<ImageRecord>,
    /// Concept indices of each image's bag, aligned with `images`.
    pub bags: Vec<Vec<usize>>,
    pub dialogs: Vec<Dialog>,
    pub ground_truth: Vec<GroundTruth>,
}

impl SyntheticWorld {
    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == name)
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|i| i.id == id)
    }

    pub fn dialogs_in(&self, split: Split) -> Vec<Dialog> {
        self.dialogs
            .iter()
            .zip(&self.ground_truth)
            .filter(|(_, g)| g.split == split)
            .map(|(d, _)| d.clone())
            .collect()
    }

    /// Quadruples of one split, each dialog paired with its true image.
    pub fn quadruples(&self, split: Split, tok: &Tokenizer) -> Result<Vec<Quadruple>> {
        self.dialogs
            .iter()
            .zip(&self.ground_truth)
            .filter(|(_, g)| g.split == split)
            .map(|(d, g)| {
                let img = self.image_index(&g.image_id).ok_or_else(|| Error::UnknownImage(g.image_id.clone()))?;
                Quadruple::build(d, &self.images[img].regions, tok).map(|(q, _)| q)
            })
            .collect()
    }
}

pub fn generate_synthetic_world(cfg: &SynthConfig) -> Result<SyntheticWorld> {
    if cfg.n_concepts == 0 || cfg.n_images == 0 || cfg.n_dialogs == 0 || cfg.d_obj == 0 || cfg.k == 0 {
        return Err(Error::Config("synthetic world sizes must be >= 1".into()));
    }
    if cfg.k > cfg.n_concepts {
        return Err(Error::Config(format!("k = {} exceeds n_concepts = {}", cfg.k, cfg.n_concepts)));
    }
    if cfg.n_test > cfg.n_dialogs {
        return Err(Error::Config("n_test exceeds n_dialogs".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Config("noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let concepts: Vec<String> = (0..cfg.n_concepts)
        .map(|i| CONCEPT_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("concept_{i}")))
        .collect();

    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut latents = Mat::from_shape_fn((cfg.n_concepts, cfg.d_obj), |_| std_normal.sample(&mut rng));
    for mut row in latents.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }

    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("valid noise");
    let all: Vec<usize> = (0..cfg.n_concepts).collect();
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut bags = Vec::with_capacity(cfg.n_images);
    let mut seen_bags = std::collections::HashSet::new();
    for i in 0..cfg.n_images {
        // Bags are kept unique while the pool allows it (bounded retries).
        let mut bag: Vec<usize> = Vec::new();
        for _ in 0..64 {
            bag.clear();
            if cfg.k >= 2 && rng.random_bool(cfg.planted_rate.clamp(0.0, 1.0)) {
                bag.extend([0, 1]);
            }
            let rest: Vec<usize> = all.iter().copied().filter(|c| !bag.contains(c)).collect();
            bag.extend(rest.choose_multiple(&mut rng, cfg.k - bag.len()).copied());
            bag.sort_unstable();
            if !seen_bags.contains(&bag) {
                break;
            }
        }
        seen_bags.insert(bag.clone());

        let features: Vec<Vec<f64>> = bag
            .iter()
            .map(|&c| {
                latents
                    .row(c)
                    .iter()
                    .map(|&v| if cfg.noise > 0.0 { v + noise.sample(&mut rng) } else { v })
                    .collect()
            })
            .collect();
        let regions = RegionSet {
            image_id: format!("img-{i:05}"),
            features,
            concepts: bag.iter().map(|&c| concepts[c].clone()).collect(),
            boxes: None,
        };
        images.push(ImageRecord::from_regions(regions));
        bags.push(bag);
    }

    let mut dialogs = Vec::with_capacity(cfg.n_dialogs);
    let mut ground_truth = Vec::with_capacity(cfg.n_dialogs);
    let n_train = cfg.n_dialogs - cfg.n_test;
    for i in 0..cfg.n_dialogs {
        let img = i % cfg.n_images;
        let names: Vec<&str> = bags[img].iter().map(|&c| concepts[c].as_str()).collect();
        let (split, id) = if i < n_train {
            (Split::Train, format!("train-{i:05}"))
        } else {
            (Split::Test, format!("test-{:05}", i - n_train))
        };
        let (context, response) = templated_dialog(&names, &mut rng);
        dialogs.push(Dialog::new(id.clone(), context, response)?);
        ground_truth.push(GroundTruth { dialog_id: id, image_id: images[img].id.clone(), split });
    }

    Ok(SyntheticWorld { concepts, latents, images, bags, dialogs, ground_truth })
}

/// Context utterances jointly mention every concept in `names` (1-3
/// mentions each); the response mentions one or two of them.
fn templated_dialog(names: &[&str], rng: &mut ChaCha8Rng) -> (Vec<String>, String) {
    let min_turns = names.len().div_ceil(3).max(2);
    let n_turns = rng.random_range(min_turns..=min_turns.max(4));
    let mut order: Vec<&str> = names.to_vec();
    order.shuffle(rng);

    let mut slots: Vec<Vec<&str>> = vec![Vec::new(); n_turns];
    for (i, name) in order.iter().enumerate() {
        slots[i % n_turns].push(name);
    }
    for slot in slots.iter_mut() {
        if slot.is_empty() {
            slot.push(names.choose(rng).expect("non-empty bag"));
        }
    }
    let context = slots
        .iter()
        .map(|mentions| {
            let template = match mentions.len() {
                1 => *ONE.choose(rng).unwrap(),
                2 => *TWO.choose(rng).unwrap(),
                _ => *THREE.choose(rng).unwrap(),
            };
            fill(template, mentions)
        })
        .collect();

    let response = if names.len() >= 2 && rng.random_bool(0.5) {
        let picks: Vec<&str> = names.choose_multiple(rng, 2).copied().collect();
        fill(RESPONSE_TWO.choose(rng).unwrap(), &picks)
    } else {
        fill(RESPONSE_ONE.choose(rng).unwrap(), &[names.choose(rng).unwrap()])
    };
    (context, response)
}

fn fill(template: &str, words: &[&str]) -> String {
    let mut out = String::new();
    let mut parts = template.split("{}");
    out.push_str(parts.next().unwrap_or(""));
    for (part, w) in parts.zip(words.iter().cycle()) {
        out.push_str(w);
        out.push_str(part);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { n_concepts: 12, n_images: 10, n_dialogs: 10, n_test: 2, d_obj: 8, k: 3, ..Default::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic_world(&small()).unwrap();
        let b = generate_synthetic_world(&small()).unwrap();
        assert_eq!(a.dialogs, b.dialogs);
        assert_eq!(a.images, b.images);
        assert_eq!(a.ground_truth, b.ground_truth);
        let c = generate_synthetic_world(&SynthConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.dialogs, c.dialogs);
    }

    #[test]
    fn bags_have_k_distinct_concepts() {
        let w = generate_synthetic_world(&small()).unwrap();
        assert_eq!(w.images.len(), 10);
        for (img, bag) in w.images.iter().zip(&w.bags) {
            assert_eq!(img.regions.len(), 3);
            let mut b = bag.clone();
            b.dedup();
            assert_eq!(b.len(), 3);
            for c in &img.regions.concepts {
                assert!(w.concepts.contains(c));
            }
        }
    }

    #[test]
    fn zero_noise_features_equal_latents() {
        let w = generate_synthetic_world(&SynthConfig { noise: 0.0, ..small() }).unwrap();
        for (img, bag) in w.images.iter().zip(&w.bags) {
            for (row, &c) in img.regions.features.iter().zip(bag) {
                assert_eq!(row.as_slice(), w.latents.row(c).as_slice().unwrap());
            }
        }
    }

    #[test]
    fn k_above_pool_is_rejected() {
        assert!(generate_synthetic_world(&SynthConfig { k: 13, ..small() }).is_err());
    }

    #[test]
    fn context_mentions_every_concept() {
        let w = generate_synthetic_world(&SynthConfig { k: 5, n_concepts: 20, ..small() }).unwrap();
        for (d, g) in w.dialogs.iter().zip(&w.ground_truth) {
            let img = &w.images[w.image_index(&g.image_id).unwrap()];
            let text = d.context.join(" ");
            let words: Vec<&str> = text.split_whitespace().collect();
            for c in &img.regions.concepts {
                assert!(words.contains(&c.as_str()), "{c} not in {text}");
            }
            for u in &d.context {
                let n = u.split_whitespace().filter(|w| img.regions.concepts.iter().any(|c| c == w)).count();
                assert!((1..=3).contains(&n), "{u}");
            }
        }
    }

    #[test]
    fn split_counts() {
        let w = generate_synthetic_world(&small()).unwrap();
        assert_eq!(w.dialogs_in(Split::Train).len(), 8);
        assert_eq!(w.dialogs_in(Split::Test).len(), 2);
    }
}
