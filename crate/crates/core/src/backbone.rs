//! Convolutional trunk: a configurable conv/ReLU/max-pool stack producing the
//! feature map that the scanner searches.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{conv2d_forward, maxpool2d, pool_output_side, relu_in_place, ConvSpec, Tensor3};
use crate::weights::{NamedTensor, WeightFile};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv(ConvSpec),
    Relu,
    MaxPool { kernel: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub name: String,
    pub layers: Vec<Layer>,
    pub feature_channels: usize,
}

/// Output geometry of the trunk for one input side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub featmap_side: usize,
    /// Input pixels per feature cell: product of all conv and pool strides.
    pub stride_total: usize,
}

impl BackboneConfig {
    /// AlexNet conv1..conv5 + pool5 geometry with 256 feature channels.
    pub fn alexnet_geom() -> Self {
        use Layer::*;
        let pool = MaxPool {
            kernel: 3,
            stride: 2,
        };
        BackboneConfig {
            name: "alexnet-geom".into(),
            layers: vec![
                Conv(ConvSpec::new(3, 96, 11, 4, 0)),
                Relu,
                pool,
                Conv(ConvSpec::new(96, 256, 5, 1, 2)),
                Relu,
                pool,
                Conv(ConvSpec::new(256, 384, 3, 1, 1)),
                Relu,
                Conv(ConvSpec::new(384, 384, 3, 1, 1)),
                Relu,
                Conv(ConvSpec::new(384, 256, 3, 1, 1)),
                Relu,
                pool,
            ],
            feature_channels: 256,
        }
    }

    /// Three conv stages with 2x2 pooling, 32 feature channels, stride 16.
    pub fn tinynet() -> Self {
        use Layer::*;
        let pool = MaxPool {
            kernel: 2,
            stride: 2,
        };
        BackboneConfig {
            name: "tinynet".into(),
            layers: vec![
                Conv(ConvSpec::new(3, 16, 5, 2, 2)),
                Relu,
                pool,
                Conv(ConvSpec::new(16, 32, 3, 1, 1)),
                Relu,
                pool,
                Conv(ConvSpec::new(32, 32, 3, 1, 1)),
                Relu,
                pool,
            ],
            feature_channels: 32,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "alexnet-geom" => Ok(Self::alexnet_geom()),
            "tinynet" => Ok(Self::tinynet()),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut channels = IMAGE_CHANNELS;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(spec) => {
                    spec.validate()?;
                    if spec.in_channels != channels {
                        return Err(Error::Config(format!(
                            "layer {i}: convolution expects {} channels but receives {channels}",
                            spec.in_channels
                        )));
                    }
                    channels = spec.out_channels;
                }
                Layer::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 {
                        return Err(Error::Config(format!("layer {i}: empty pooling window")));
                    }
                }
                Layer::Relu => {}
            }
        }
        if channels != self.feature_channels {
            return Err(Error::Config(format!(
                "backbone {} ends with {channels} channels, declared {}",
                self.name, self.feature_channels
            )));
        }
        Ok(())
    }

    pub fn conv_specs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(s) => Some(s),
            _ => None,
        })
    }

    /// Composes the per-layer output-size formulas for a square input.
    pub fn geometry(&self, input_side: usize) -> Result<Geometry> {
        let mut side = input_side;
        let mut stride_total = 1;
        if side == 0 {
            return Err(Error::Config("input side must be positive".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let next = match layer {
                Layer::Conv(spec) => {
                    stride_total *= spec.stride;
                    spec.output_side(side)
                }
                Layer::MaxPool { kernel, stride } => {
                    stride_total *= stride;
                    pool_output_side(side, *kernel, *stride)
                }
                Layer::Relu => Some(side),
            };
            side = match next {
                Some(s) if s > 0 => s,
                _ => {
                    return Err(Error::Config(format!(
                        "backbone {}: layer {i} leaves no output for input side {input_side}",
                        self.name
                    )))
                }
            };
        }
        Ok(Geometry {
            featmap_side: side,
            stride_total,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvParams {
    weights: Vec<f32>,
    bias: Vec<f32>,
}

/// A configured trunk with its convolution parameters. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    params: Vec<ConvParams>,
}

impl Backbone {
    /// He-uniform initialisation (`±sqrt(6 / fan_in)`), zero biases.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config
            .conv_specs()
            .enumerate()
            .map(|(i, spec)| {
                let mut rng = SplitMix64::stream(seed, &[0xBAC4_B0E5, i as u64]);
                let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
                let bound = (6.0 / fan_in).sqrt();
                ConvParams {
                    weights: (0..spec.weight_len())
                        .map(|_| rng.uniform(-bound, bound) as f32)
                        .collect(),
                    bias: vec![0.0; spec.out_channels],
                }
            })
            .collect();
        Ok(Backbone { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn geometry(&self, input_side: usize) -> Result<Geometry> {
        self.config.geometry(input_side)
    }

    /// Runs the trunk on a square image.
    pub fn forward(&self, image: &Tensor3) -> Result<Tensor3> {
        if image.height() != image.width() {
            return Err(Error::Input(format!(
                "backbone input must be square, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        if image.channels() != IMAGE_CHANNELS {
            return Err(Error::Input(format!(
                "backbone input must have {IMAGE_CHANNELS} channels, got {}",
                image.channels()
            )));
        }
        self.geometry(image.height())
            .map_err(|e| Error::Input(format!("input side {}: {e}", image.height())))?;

        let mut x = image.clone();
        let mut conv_idx = 0;
        for layer in &self.config.layers {
            x = match layer {
                Layer::Conv(spec) => {
                    let p = &self.params[conv_idx];
                    conv_idx += 1;
                    conv2d_forward(&x, spec, &p.weights, &p.bias)?
                }
                Layer::Relu => {
                    relu_in_place(&mut x);
                    x
                }
                Layer::MaxPool { kernel, stride } => maxpool2d(&x, *kernel, *stride)?,
            };
        }
        Ok(x)
    }

    fn tensor_names(i: usize) -> (String, String) {
        (
            format!("backbone/conv{}.w", i + 1),
            format!("backbone/conv{}.b", i + 1),
        )
    }

    pub fn append_tensors(&self, file: &mut WeightFile) {
        for (i, (spec, p)) in self.config.conv_specs().zip(&self.params).enumerate() {
            let (wn, bn) = Self::tensor_names(i);
            let k = spec.kernel as u32;
            file.push(NamedTensor::new(
                wn,
                vec![spec.out_channels as u32, spec.in_channels as u32, k, k],
                p.weights.clone(),
            ));
            file.push(NamedTensor::new(bn, vec![spec.out_channels as u32], p.bias.clone()));
        }
    }

    /// Rebuilds a trunk for `config` from the `backbone/conv{i}` tensors.
    pub fn from_weight_file(config: BackboneConfig, file: &WeightFile) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let specs: Vec<ConvSpec> = config.conv_specs().copied().collect();
        for (i, spec) in specs.iter().enumerate() {
            let (wn, bn) = Self::tensor_names(i);
            if file.get(&wn).is_none() {
                return Err(Error::Format(format!(
                    "weight file lacks layer conv{} required by backbone {} ({} conv layers)",
                    i + 1,
                    config.name,
                    specs.len()
                )));
            }
            let k = spec.kernel as u32;
            let w = file.expect(
                &wn,
                &[spec.out_channels as u32, spec.in_channels as u32, k, k],
            )?;
            let b = file.expect(&bn, &[spec.out_channels as u32])?;
            params.push(ConvParams {
                weights: w.data.clone(),
                bias: b.data.clone(),
            });
        }
        let extra = Self::tensor_names(specs.len()).0;
        if file.get(&extra).is_some() {
            return Err(Error::Format(format!(
                "weight file has layer conv{} but backbone {} has only {} conv layers",
                specs.len() + 1,
                config.name,
                specs.len()
            )));
        }
        if params
            .iter()
            .any(|p| p.weights.iter().chain(&p.bias).any(|v| !v.is_finite()))
        {
            return Err(Error::Format("non-finite backbone parameter".into()));
        }
        Ok(Backbone { config, params })
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut file = WeightFile::default();
        self.append_tensors(&mut file);
        file.save(path)
    }

    pub fn load_weights(config: BackboneConfig, path: &Path) -> Result<Self> {
        Self::from_weight_file(config, &WeightFile::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alexnet_geometry_matches_paper_sizes() {
        let c = BackboneConfig::alexnet_geom();
        assert_eq!(c.geometry(227).unwrap().featmap_side, 6);
        assert_eq!(c.geometry(454).unwrap().featmap_side, 13);
        assert_eq!(c.geometry(227).unwrap().stride_total, 32);
    }

    #[test]
    fn tinynet_geometry() {
        let g = BackboneConfig::tinynet().geometry(96).unwrap();
        assert_eq!(g, Geometry { featmap_side: 6, stride_total: 16 });
        assert_eq!(BackboneConfig::tinynet().geometry(192).unwrap().featmap_side, 12);
    }

    #[test]
    fn tiny_inputs_are_configuration_errors() {
        assert!(matches!(
            BackboneConfig::alexnet_geom().geometry(10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_rejects_non_square() {
        let b = Backbone::init(BackboneConfig::tinynet(), 1).unwrap();
        let img = Tensor3::zeros(3, 96, 80);
        assert!(matches!(b.forward(&img), Err(Error::Input(_))));
    }

    #[test]
    fn weight_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.fmsw");
        let b = Backbone::init(BackboneConfig::tinynet(), 5).unwrap();
        b.save_weights(&path).unwrap();
        let back = Backbone::load_weights(BackboneConfig::tinynet(), &path).unwrap();
        assert_eq!(back, b);

        let mut rng = SplitMix64::new(2);
        let img = Tensor3::new(3, 96, 96, (0..3 * 96 * 96).map(|_| rng.next_f64() as f32).collect())
            .unwrap();
        let f1 = b.forward(&img).unwrap();
        let f2 = back.forward(&img).unwrap();
        assert_eq!(
            f1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            f2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.fmsw");
        Backbone::init(BackboneConfig::tinynet(), 5)
            .unwrap()
            .save_weights(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            Backbone::load_weights(BackboneConfig::tinynet(), &path),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn layer_count_mismatch_names_the_layer() {
        let mut short = BackboneConfig::tinynet();
        short.layers.truncate(6);
        short.feature_channels = 32;
        let b = Backbone::init(short, 1).unwrap();
        let mut file = WeightFile::default();
        b.append_tensors(&mut file);
        match Backbone::from_weight_file(BackboneConfig::tinynet(), &file) {
            Err(Error::Format(msg)) => assert!(msg.contains("conv3"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }

        let full = Backbone::init(BackboneConfig::tinynet(), 1).unwrap();
        let mut file = WeightFile::default();
        full.append_tensors(&mut file);
        let short = {
            let mut c = BackboneConfig::tinynet();
            c.layers.truncate(6);
            c
        };
        match Backbone::from_weight_file(short, &file) {
            Err(Error::Format(msg)) => assert!(msg.contains("conv3"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    fn random_config(seed: u64) -> (BackboneConfig, usize) {
        let mut rng = SplitMix64::new(seed);
        let mut layers = Vec::new();
        let mut channels = IMAGE_CHANNELS;
        let n = rng.range_inclusive(1, 4);
        for _ in 0..n {
            let out = rng.range_inclusive(1, 4) as usize;
            let kernel = rng.range_inclusive(1, 5) as usize;
            let stride = rng.range_inclusive(1, 3) as usize;
            let pad = rng.range_inclusive(0, 2) as usize;
            layers.push(Layer::Conv(ConvSpec::new(channels, out, kernel, stride, pad)));
            channels = out;
            if rng.bernoulli(0.5) {
                layers.push(Layer::Relu);
            }
            if rng.bernoulli(0.5) {
                layers.push(Layer::MaxPool {
                    kernel: rng.range_inclusive(1, 3) as usize,
                    stride: rng.range_inclusive(1, 3) as usize,
                });
            }
        }
        let side = rng.range_inclusive(8, 40) as usize;
        (
            BackboneConfig {
                name: "random".into(),
                layers,
                feature_channels: channels,
            },
            side,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]
        #[test]
        fn forward_dims_match_geometry(seed in any::<u64>()) {
            let (config, side) = random_config(seed);
            let g = config.geometry(side);
            prop_assume!(g.is_ok());
            let g = g.unwrap();
            let b = Backbone::init(config.clone(), seed).unwrap();
            let img = Tensor3::zeros(3, side, side);
            let out = b.forward(&img).unwrap();
            prop_assert_eq!(out.dims(), (config.feature_channels, g.featmap_side, g.featmap_side));
        }
    }
}
