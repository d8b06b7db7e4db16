//! Image corpora: labels, loading, splitting, augmentation and synthetic scenes.

mod augment;
mod load;
pub mod pnm;
mod synth;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micronet::{Sample, Tensor};
use crate::scalar::Scalar;
use crate::CLASS_COUNT;

pub use augment::{reflect_h, reflect_pixels, translate, translate_pixels};
pub use load::{load_dir, resolve_source, write_dir, LoadOptions, LoadReport, SkippedFile};
pub use synth::{
    scene_seed, synth_dataset, synth_scene, synth_scene_in, Domain, SceneParams, SceneSummary,
};

/// Traffic density label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrafficClass {
    Empty = 0,
    Fluid = 1,
    Heavy = 2,
    Jam = 3,
}

impl TrafficClass {
    pub const ALL: [TrafficClass; CLASS_COUNT] = [
        TrafficClass::Empty,
        TrafficClass::Fluid,
        TrafficClass::Heavy,
        TrafficClass::Jam,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TrafficClass::Empty => "Empty",
            TrafficClass::Fluid => "Fluid",
            TrafficClass::Heavy => "Heavy",
            TrafficClass::Jam => "Jam",
        }
    }
}

impl fmt::Display for TrafficClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrafficClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown traffic class {s:?}")))
    }
}

/// Image with its label. Pixels are `[height, width, channels]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub pixels: Tensor<f64>,
    pub label: TrafficClass,
    pub source_id: String,
}

impl LabeledImage {
    pub fn new(pixels: Tensor<f64>, label: TrafficClass, source_id: impl Into<String>) -> Result<Self> {
        check_pixels(&pixels)?;
        Ok(Self {
            pixels,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }
}

pub(crate) fn check_pixels(pixels: &Tensor<f64>) -> Result<()> {
    match *pixels.shape() {
        [h, w, c] if h >= 8 && w >= 8 && (c == 1 || c == 3) => {}
        ref s => {
            return Err(Error::ImageFormat(format!(
                "images must be HxWxC with H,W >= 8 and C in {{1,3}}, got {s:?}"
            )))
        }
    }
    if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::ImageFormat(format!("pixel value {v} outside [0,1]")));
    }
    Ok(())
}

impl Sample for LabeledImage {
    fn input<T: Scalar>(&self) -> Cow<'_, Tensor<T>> {
        crate::micronet::borrow_or_cast(&self.pixels)
    }

    fn label(&self) -> usize {
        self.label.index()
    }
}

/// Ordered collection of labeled images with per-class counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    items: Vec<LabeledImage>,
    counts: [usize; CLASS_COUNT],
}

impl Dataset {
    pub fn new(items: Vec<LabeledImage>) -> Self {
        let mut counts = [0; CLASS_COUNT];
        for it in &items {
            counts[it.label.index()] += 1;
        }
        Self { items, counts }
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn into_items(self) -> Vec<LabeledImage> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn counts(&self) -> [usize; CLASS_COUNT] {
        self.counts
    }

    pub fn push(&mut self, item: LabeledImage) {
        self.counts[item.label.index()] += 1;
        self.items.push(item);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledImage> {
        self.items.iter()
    }
}

impl FromIterator<LabeledImage> for Dataset {
    fn from_iter<I: IntoIterator<Item = LabeledImage>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a LabeledImage;
    type IntoIter = std::slice::Iter<'a, LabeledImage>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train fraction must lie in (0,1), got {train_fraction}"
            )));
        }
        Ok(Self {
            train_fraction,
            seed,
        })
    }
}

/// Stratified shuffle split: each class contributes `round(fraction * count)`
/// images to the training side. Both sides keep the input's relative order.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    SplitSpec::new(spec.train_fraction, spec.seed)?;
    if d.len() < 2 {
        return Err(Error::DegenerateSplit(format!(
            "need at least 2 images, have {}",
            d.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut to_train = vec![false; d.len()];
    for class in TrafficClass::ALL {
        let mut idx: Vec<usize> = d
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.label == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let take = (spec.train_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..take] {
            to_train[i] = true;
        }
    }
    let (train, holdout): (Vec<_>, Vec<_>) = d
        .items
        .iter()
        .cloned()
        .zip(&to_train)
        .partition(|(_, &t)| t);
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "fraction {} of {} images leaves one side empty",
            spec.train_fraction,
            d.len()
        )));
    }
    Ok((
        train.into_iter().map(|(it, _)| it).collect(),
        holdout.into_iter().map(|(it, _)| it).collect(),
    ))
}

/// Keeps every `stride`-th frame starting at index 0.
///
/// # Panics
///
/// Panics if `stride` is zero.
pub fn subsample_stride<T: Clone>(frames: &[T], stride: usize) -> Vec<T> {
    assert!(stride >= 1, "stride must be at least 1");
    frames.iter().step_by(stride).cloned().collect()
}
