//! Shape-specific expert classifiers over sub-window blobs.
//!
//! Each window shape `(w, h)` has its own two-layer fully connected unit:
//! `flatten(blob) -> fcA -> ReLU -> fcB -> softmax` over `K + 1` outputs,
//! background first. The single-unit layout shares one unit among all shapes.

pub mod collect;
pub mod labeling;
pub mod train;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{mix64, SplitMix64};
use crate::scanner::{Blob, ShapeRange, WindowShape};
use crate::tensor::{softmax, FcLayer};
use crate::weights::{NamedTensor, WeightFile};

pub use collect::{collect_for_shapes, collect_training_samples, LabeledSample, Provenance};
pub use labeling::{label_subwindow, Label, LabelThresholds};
pub use train::{train_experts, train_unit, TrainingConfig, UnitReport};

/// `flatten -> fcA -> ReLU -> fcB`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertUnit {
    fc_a: FcLayer,
    fc_b: FcLayer,
}

/// Hidden activations and logits of one forward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct Activations {
    /// Pre-activation of the hidden layer.
    pub pre: Vec<f64>,
    /// Hidden layer after ReLU (and dropout while training).
    pub hidden: Vec<f32>,
    pub logits: Vec<f64>,
}

impl ExpertUnit {
    pub fn new(fc_a: FcLayer, fc_b: FcLayer) -> Result<Self> {
        if fc_a.out_dim() != fc_b.in_dim() {
            return Err(Error::Config(format!(
                "expert layers do not chain: fcA outputs {}, fcB takes {}",
                fc_a.out_dim(),
                fc_b.in_dim()
            )));
        }
        Ok(ExpertUnit { fc_a, fc_b })
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(in_dim: usize, hidden: usize, outputs: usize, rng: &mut SplitMix64) -> Self {
        let layer = |rng: &mut SplitMix64, i: usize, o: usize| {
            let bound = (6.0 / (i + o) as f64).sqrt();
            let w = (0..i * o).map(|_| rng.uniform(-bound, bound) as f32).collect();
            FcLayer::new(i, o, w, vec![0.0; o]).expect("dimensions are consistent")
        };
        let fc_a = layer(rng, in_dim, hidden);
        let fc_b = layer(rng, hidden, outputs);
        ExpertUnit { fc_a, fc_b }
    }

    pub fn fc_a(&self) -> &FcLayer {
        &self.fc_a
    }

    pub fn fc_b(&self) -> &FcLayer {
        &self.fc_b
    }

    pub(crate) fn layers_mut(&mut self) -> (&mut FcLayer, &mut FcLayer) {
        (&mut self.fc_a, &mut self.fc_b)
    }

    pub fn in_dim(&self) -> usize {
        self.fc_a.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.fc_a.out_dim()
    }

    pub fn outputs(&self) -> usize {
        self.fc_b.out_dim()
    }

    /// Forward pass over sparse input entries. `dropout` receives the hidden
    /// vector after ReLU and may rescale it in place.
    pub(crate) fn forward_into(
        &self,
        x: impl Iterator<Item = (usize, f32)>,
        act: &mut Activations,
        dropout: impl FnOnce(&mut [f32]),
    ) {
        self.fc_a.init_acc(&mut act.pre);
        self.fc_a.accumulate_rows(x, &mut act.pre);
        act.hidden.clear();
        act.hidden.extend(act.pre.iter().map(|&v| v.max(0.0) as f32));
        dropout(&mut act.hidden);
        self.fc_b.init_acc(&mut act.logits);
        self.fc_b
            .accumulate_rows(act.hidden.iter().copied().enumerate(), &mut act.logits);
    }

    /// Class probabilities for a blob, background at index 0.
    pub fn forward(&self, blob: &Blob) -> Result<Vec<f64>> {
        if blob.dense_len() != self.in_dim() {
            return Err(Error::Config(format!(
                "blob of {} values fed to an expert taking {}",
                blob.dense_len(),
                self.in_dim()
            )));
        }
        let mut act = Activations::default();
        self.forward_into(blob.entries(), &mut act, |_| {});
        Ok(softmax(&act.logits))
    }

    /// Probabilities for a dense input vector.
    pub fn forward_dense(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Config(format!(
                "input of {} values fed to an expert taking {}",
                x.len(),
                self.in_dim()
            )));
        }
        let mut act = Activations::default();
        self.forward_into(x.iter().copied().enumerate(), &mut act, |_| {});
        Ok(softmax(&act.logits))
    }
}

/// One unit per window shape, or one shared unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BankLayout {
    #[default]
    MultiFc,
    SingleFc,
}

impl FromStr for BankLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(BankLayout::MultiFc),
            "single" => Ok(BankLayout::SingleFc),
            other => Err(Error::Config(format!("unknown expert layout {other:?}"))),
        }
    }
}

impl fmt::Display for BankLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BankLayout::MultiFc => "multi",
            BankLayout::SingleFc => "single",
        })
    }
}

/// Trained expert units for every shape in a range. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    classes: Vec<String>,
    range: ShapeRange,
    layout: BankLayout,
    /// In `range.shapes()` order, or a single shared unit.
    units: Vec<ExpertUnit>,
}

impl ExpertBank {
    pub fn new(
        classes: Vec<String>,
        range: ShapeRange,
        layout: BankLayout,
        units: Vec<ExpertUnit>,
    ) -> Result<Self> {
        range.validate()?;
        let expected = match layout {
            BankLayout::MultiFc => range.shapes().len(),
            BankLayout::SingleFc => 1,
        };
        if units.len() != expected {
            return Err(Error::Config(format!(
                "{layout} expert bank needs {expected} units, got {}",
                units.len()
            )));
        }
        let first = &units[0];
        let side2 = range.max * range.max;
        if first.in_dim() % side2 != 0 {
            return Err(Error::Config(format!(
                "expert input {} is not a multiple of the {}x{} blob",
                first.in_dim(),
                range.max,
                range.max
            )));
        }
        for u in &units {
            if (u.in_dim(), u.hidden(), u.outputs()) != (first.in_dim(), first.hidden(), classes.len() + 1)
            {
                return Err(Error::Config(format!(
                    "expert units disagree on dimensions or do not output {} classes plus background",
                    classes.len()
                )));
            }
        }
        Ok(ExpertBank {
            classes,
            range,
            layout,
            units,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn shapes(&self) -> ShapeRange {
        self.range
    }

    pub fn layout(&self) -> BankLayout {
        self.layout
    }

    pub fn blob_side(&self) -> usize {
        self.range.max
    }

    pub fn channels(&self) -> usize {
        self.units[0].in_dim() / (self.range.max * self.range.max)
    }

    pub fn hidden(&self) -> usize {
        self.units[0].hidden()
    }

    fn index_of(&self, shape: WindowShape) -> Option<usize> {
        if !self.range.contains(shape) {
            return None;
        }
        Some(match self.layout {
            BankLayout::MultiFc => {
                let n = self.range.max - self.range.min + 1;
                (shape.h - self.range.min) * n + (shape.w - self.range.min)
            }
            BankLayout::SingleFc => 0,
        })
    }

    pub fn unit_for(&self, shape: WindowShape) -> Option<&ExpertUnit> {
        self.index_of(shape).map(|i| &self.units[i])
    }

    #[cfg(test)]
    pub(crate) fn unit_for_mut(&mut self, shape: WindowShape) -> Option<&mut ExpertUnit> {
        self.index_of(shape).map(|i| &mut self.units[i])
    }

    /// Probabilities over background and the object classes for one blob.
    pub fn classify(&self, blob: &Blob) -> Result<Vec<f64>> {
        let unit = self
            .unit_for(blob.shape())
            .ok_or_else(|| Error::Config(format!("no expert unit for window shape {}", blob.shape())))?;
        unit.forward(blob)
    }

    /// Hash of the bank's structure (not its weights).
    pub fn fingerprint(&self) -> u64 {
        let mut h = mix64(self.range.min as u64) ^ mix64(self.range.max as u64 + 17);
        h = mix64(h ^ self.layout as u64);
        h = mix64(h ^ self.units[0].in_dim() as u64);
        h = mix64(h ^ self.hidden() as u64);
        for c in &self.classes {
            for b in c.bytes() {
                h = mix64(h ^ b as u64);
            }
            h = mix64(h ^ 0xFF);
        }
        h
    }

    fn unit_prefixes(range: ShapeRange, layout: BankLayout) -> Vec<String> {
        match layout {
            BankLayout::MultiFc => range
                .shapes()
                .iter()
                .map(|s| format!("expert/{s}"))
                .collect(),
            BankLayout::SingleFc => vec!["expert/shared".to_string()],
        }
    }

    pub fn append_tensors(&self, file: &mut WeightFile) {
        for (prefix, unit) in Self::unit_prefixes(self.range, self.layout).iter().zip(&self.units) {
            for (name, layer) in [("fcA", &unit.fc_a), ("fcB", &unit.fc_b)] {
                file.push(NamedTensor::new(
                    format!("{prefix}/{name}.w"),
                    vec![layer.in_dim() as u32, layer.out_dim() as u32],
                    layer.weights().to_vec(),
                ));
                file.push(NamedTensor::new(
                    format!("{prefix}/{name}.b"),
                    vec![layer.out_dim() as u32],
                    layer.bias().to_vec(),
                ));
            }
        }
    }

    pub fn from_weight_file(
        file: &WeightFile,
        classes: Vec<String>,
        range: ShapeRange,
        layout: BankLayout,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        range.validate()?;
        let in_dim = range.max * range.max * channels;
        let outputs = classes.len() + 1;
        let mut units = Vec::new();
        for prefix in Self::unit_prefixes(range, layout) {
            let load = |name: &str, i: usize, o: usize| -> Result<FcLayer> {
                let w = file.expect(&format!("{prefix}/{name}.w"), &[i as u32, o as u32])?;
                let b = file.expect(&format!("{prefix}/{name}.b"), &[o as u32])?;
                FcLayer::new(i, o, w.data.clone(), b.data.clone())
                    .map_err(|e| Error::Format(format!("{prefix}/{name}: {e}")))
            };
            units.push(ExpertUnit::new(
                load("fcA", in_dim, hidden)?,
                load("fcB", hidden, outputs)?,
            )?);
        }
        ExpertBank::new(classes, range, layout, units)
    }
}

/// Image-level class scores: the maximum of each class score over all detections.
pub fn classify_image(scores: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Input("cannot classify an image without detections".into()))?;
    let mut out = first.clone();
    for s in &scores[1..] {
        for (o, &v) in out.iter_mut().zip(s) {
            *o = o.max(v);
        }
    }
    Ok(out)
}
