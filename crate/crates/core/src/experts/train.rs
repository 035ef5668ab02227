//! Mini-batch SGD with momentum on the expert units.

use log::{debug, warn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experts::collect::LabeledSample;
use crate::experts::labeling::{Label, LabelThresholds};
use crate::experts::{Activations, BankLayout, ExpertBank, ExpertUnit};
use crate::rng::SplitMix64;
use crate::scanner::{ShapeRange, WindowShape};
use crate::tensor::{softmax, FcGrads, FcLayer};

pub const DEFAULT_LAMBDAS: [f64; 9] = [1.0, 1.3, 1.6, 2.0, 2.4, 2.8, 3.2, 3.6, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Scale factors applied to the normalised image during collection.
    pub lambdas: Vec<f64>,
    /// Probability of keeping a background window.
    pub background_rate: f64,
    pub thresholds: LabelThresholds,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dropout rate on the hidden layer.
    pub dropout: f64,
    /// Learning rate multiplier applied from epoch `ceil(2 * epochs / 3)` on.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            background_rate: 0.1,
            thresholds: LabelThresholds::default(),
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 64,
            dropout: 0.5,
            lr_decay: 0.1,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return bad(format!("scale factors must be positive: {:?}", self.lambdas));
        }
        if !(self.background_rate > 0.0 && self.background_rate <= 1.0) {
            return bad(format!("background rate {} outside (0, 1]", self.background_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning rate must be positive and momentum in [0, 1)".into());
        }
        Ok(())
    }

    /// First epoch trained with the decayed learning rate.
    pub fn decay_epoch(&self) -> usize {
        (2 * self.epochs).div_ceil(3)
    }
}

/// Summary of one trained unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitReport {
    /// `None` for the shared unit.
    pub shape: Option<WindowShape>,
    pub positives: usize,
    pub backgrounds: usize,
    /// Mean training cross-entropy of each epoch (with dropout active).
    pub epoch_loss: Vec<f64>,
}

struct Momentum {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Momentum {
    fn new(layer: &FcLayer) -> Self {
        Momentum {
            weights: vec![0.0; layer.weights().len()],
            bias: vec![0.0; layer.bias().len()],
        }
    }

    fn step(&mut self, layer: &mut FcLayer, grads: &FcGrads, scale: f64, lr: f64, mu: f64) {
        let update = |p: &mut [f32], v: &mut [f64], g: &[f64]| {
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v - lr * g * scale;
                *p = (*p as f64 + *v) as f32;
            }
        };
        update(layer.weights_mut(), &mut self.weights, &grads.grad_weights);
        update(layer.bias_mut(), &mut self.bias, &grads.grad_bias);
    }
}

/// Trains one unit on labeled samples. Unused samples are skipped. `key`
/// selects the random stream, so different units draw independently.
pub fn train_unit(
    samples: &[&LabeledSample],
    hidden: usize,
    outputs: usize,
    config: &TrainingConfig,
    key: u64,
) -> Result<(ExpertUnit, Vec<f64>)> {
    config.validate()?;
    let samples: Vec<(&LabeledSample, usize)> = samples
        .iter()
        .filter_map(|s| s.label.target().map(|t| (*s, t)))
        .collect();
    let Some((first, _)) = samples.first() else {
        return Err(Error::Training("no usable samples".into()));
    };
    let in_dim = first.blob.dense_len();
    if let Some((s, _)) = samples.iter().find(|(s, _)| s.blob.dense_len() != in_dim) {
        return Err(Error::Training(format!(
            "sample blob of {} values among blobs of {in_dim}",
            s.blob.dense_len()
        )));
    }
    if let Some((_, t)) = samples.iter().find(|(_, t)| *t >= outputs) {
        return Err(Error::Training(format!("label {t} outside {outputs} outputs")));
    }

    let mut rng = SplitMix64::stream(config.seed, &[0x7EA1, key]);
    let mut unit = ExpertUnit::init(in_dim, hidden, outputs, &mut rng);
    let mut mom_a = Momentum::new(&unit.fc_a);
    let mut mom_b = Momentum::new(&unit.fc_b);
    let mut grads_a = FcGrads::zeros(&unit.fc_a);
    let mut grads_b = FcGrads::zeros(&unit.fc_b);
    grads_a.grad_x = Vec::new();
    let mut act = Activations::default();
    let mut grad_hidden = vec![0.0f64; hidden];
    let mut grad_logits = vec![0.0f64; outputs];
    let keep = 1.0 - config.dropout;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_loss = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = if epoch >= config.decay_epoch() {
            config.learning_rate * config.lr_decay
        } else {
            config.learning_rate
        };
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads_a.clear();
            grads_b.clear();
            for &i in batch {
                let (sample, target) = samples[i];
                unit.forward_into(sample.blob.entries(), &mut act, |h| {
                    if config.dropout > 0.0 {
                        for v in h.iter_mut() {
                            *v = if rng.next_f64() < keep {
                                (*v as f64 / keep) as f32
                            } else {
                                0.0
                            };
                        }
                    }
                });
                let p = softmax(&act.logits);
                loss_sum -= p[target].max(f64::MIN_POSITIVE).ln();
                grad_logits.copy_from_slice(&p);
                grad_logits[target] -= 1.0;
                unit.fc_b.accumulate_backward(
                    act.hidden.iter().copied().enumerate(),
                    &grad_logits,
                    &mut grads_b,
                    Some(&mut grad_hidden),
                );
                // Dropped or inactive units pass no gradient; kept ones carry
                // the same 1/keep factor as the forward pass.
                for ((g, &h), &pre) in grad_hidden.iter_mut().zip(&act.hidden).zip(&act.pre) {
                    if h == 0.0 || pre <= 0.0 {
                        *g = 0.0;
                    } else if config.dropout > 0.0 {
                        *g /= keep;
                    }
                }
                unit.fc_a
                    .accumulate_backward(sample.blob.entries(), &grad_hidden, &mut grads_a, None);
            }
            let scale = 1.0 / batch.len() as f64;
            let (fc_a, fc_b) = unit.layers_mut();
            mom_a.step(fc_a, &grads_a, scale, lr, config.momentum);
            mom_b.step(fc_b, &grads_b, scale, lr, config.momentum);
        }
        let mean = loss_sum / samples.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
        }
        epoch_loss.push(mean);
    }
    Ok((unit, epoch_loss))
}

fn counts(samples: &[LabeledSample]) -> (usize, usize) {
    samples.iter().fold((0, 0), |(p, b), s| match s.label {
        Label::Class(_) => (p + 1, b),
        Label::Background => (p, b + 1),
        Label::Unused => (p, b),
    })
}

/// Trains a bank from per-shape sample lists given in `range.shapes()` order.
/// The multi-unit layout trains each shape on its own samples (units in
/// parallel, each one sequential); the single-unit layout pools everything.
pub fn train_experts(
    per_shape: &[Vec<LabeledSample>],
    classes: Vec<String>,
    range: ShapeRange,
    layout: BankLayout,
    hidden: usize,
    config: &TrainingConfig,
) -> Result<(ExpertBank, Vec<UnitReport>)> {
    config.validate()?;
    let shapes = range.shapes();
    if per_shape.len() != shapes.len() {
        return Err(Error::Invariant(format!(
            "{} sample lists for {} shapes",
            per_shape.len(),
            shapes.len()
        )));
    }
    for (shape, samples) in shapes.iter().zip(per_shape) {
        let (pos, bg) = counts(samples);
        if pos + bg == 0 {
            return Err(Error::Training(format!("no training samples for window shape {shape}")));
        }
        if pos == 0 || bg == 0 {
            warn!("window shape {shape}: {pos} positives, {bg} backgrounds");
        }
        debug!("window shape {shape}: {pos} positives, {bg} backgrounds");
    }
    let outputs = classes.len() + 1;
    let trained: Vec<(ExpertUnit, UnitReport)> = match layout {
        BankLayout::MultiFc => shapes
            .par_iter()
            .zip(per_shape)
            .enumerate()
            .map(|(i, (&shape, samples))| {
                let refs: Vec<&LabeledSample> = samples.iter().collect();
                let (unit, epoch_loss) = train_unit(&refs, hidden, outputs, config, i as u64)
                    .map_err(|e| Error::Training(format!("window shape {shape}: {e}")))?;
                let (positives, backgrounds) = counts(samples);
                Ok((
                    unit,
                    UnitReport {
                        shape: Some(shape),
                        positives,
                        backgrounds,
                        epoch_loss,
                    },
                ))
            })
            .collect::<Result<_>>()?,
        BankLayout::SingleFc => {
            let refs: Vec<&LabeledSample> = per_shape.iter().flatten().collect();
            let (unit, epoch_loss) = train_unit(&refs, hidden, outputs, config, u64::MAX)?;
            let (positives, backgrounds) = per_shape
                .iter()
                .map(|s| counts(s))
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            vec![(
                unit,
                UnitReport {
                    shape: None,
                    positives,
                    backgrounds,
                    epoch_loss,
                },
            )]
        }
    };
    let (units, reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((ExpertBank::new(classes, range, layout, units)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::collect::Provenance;
    use crate::scanner::{extract_blob, SubWindowRef};
    use crate::tensor::Tensor3;

    fn sample(values: Vec<f32>, channels: usize, label: Label) -> LabeledSample {
        let fm = Tensor3::new(channels, 6, 6, values).unwrap();
        let window = SubWindowRef {
            level: 0,
            x: 0,
            y: 0,
            w: 6,
            h: 6,
        };
        LabeledSample {
            blob: extract_blob(&fm, &window, 6).unwrap(),
            label,
            provenance: Provenance {
                image: 0,
                lambda: 1.0,
                window,
            },
        }
    }

    fn cross_entropy(unit: &ExpertUnit, s: &LabeledSample) -> f64 {
        -unit.forward(&s.blob).unwrap()[s.label.target().unwrap()].ln()
    }

    #[test]
    fn memorises_a_single_sample() {
        let mut rng = SplitMix64::new(3);
        let s = sample((0..72).map(|_| rng.uniform(0.0, 1.0) as f32).collect(), 2, Label::Class(1));
        let cfg = TrainingConfig {
            epochs: 200,
            dropout: 0.0,
            ..TrainingConfig::default()
        };
        let (unit, losses) = train_unit(&[&s], 16, 3, &cfg, 0).unwrap();
        assert!(cross_entropy(&unit, &s) < 0.01, "{:?}", losses.last());
    }

    /// Two classes separated by the sign of the mean of channel 0.
    fn separable_set(n: usize, seed: u64) -> Vec<LabeledSample> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let shift = if positive { 0.6 } else { -0.6 };
                let values = (0..72)
                    .map(|j| {
                        let noise = rng.uniform(-0.5, 0.5);
                        (if j < 36 { shift + noise } else { noise }) as f32
                    })
                    .collect();
                let label = if positive { Label::Class(0) } else { Label::Background };
                sample(values, 2, label)
            })
            .collect()
    }

    #[test]
    fn separable_toy_set_reaches_full_training_accuracy() {
        let set = separable_set(200, 11);
        let refs: Vec<&LabeledSample> = set.iter().collect();
        let cfg = TrainingConfig {
            epochs: 50,
            ..TrainingConfig::default()
        };
        let (unit, _) = train_unit(&refs, 16, 2, &cfg, 0).unwrap();
        for s in &set {
            let p = unit.forward(&s.blob).unwrap();
            let predicted = if p[1] > p[0] { 1 } else { 0 };
            assert_eq!(predicted, s.label.target().unwrap());
        }
    }

    #[test]
    fn fixed_seed_gives_bit_identical_weights() {
        let set = separable_set(90, 12);
        let refs: Vec<&LabeledSample> = set.iter().collect();
        let cfg = TrainingConfig {
            epochs: 4,
            ..TrainingConfig::default()
        };
        let a = train_unit(&refs, 8, 2, &cfg, 5).unwrap();
        let b = train_unit(&refs, 8, 2, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = train_unit(&refs, 8, 2, &TrainingConfig { seed: 2, ..cfg }, 5).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn unused_samples_are_ignored() {
        let set = separable_set(40, 13);
        let mut with_unused: Vec<LabeledSample> = set.clone();
        with_unused.push(sample(vec![100.0; 72], 2, Label::Unused));
        let cfg = TrainingConfig {
            epochs: 3,
            ..TrainingConfig::default()
        };
        let a: Vec<&LabeledSample> = set.iter().collect();
        let b: Vec<&LabeledSample> = with_unused.iter().collect();
        assert_eq!(train_unit(&a, 8, 2, &cfg, 0).unwrap(), train_unit(&b, 8, 2, &cfg, 0).unwrap());
    }

    #[test]
    fn empty_shape_is_a_training_error_naming_it() {
        let range = ShapeRange::new(5, 6);
        let mut per_shape = vec![separable_set(10, 1); 4];
        per_shape[2].clear();
        let err = train_experts(
            &per_shape,
            vec!["a".into()],
            range,
            BankLayout::MultiFc,
            4,
            &TrainingConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::Training(msg) => assert!(msg.contains("5x6"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decay_starts_at_two_thirds() {
        let cfg = |epochs| TrainingConfig {
            epochs,
            ..TrainingConfig::default()
        };
        assert_eq!(cfg(30).decay_epoch(), 20);
        assert_eq!(cfg(10).decay_epoch(), 7);
        assert_eq!(cfg(1).decay_epoch(), 1);
    }
}
