//! The U-Net: configuration, parameter layout, initialization, forward and
//! backward passes, and the binary checkpoint format.

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use net::{backward, forward, predict, PredictionMap, Tape};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::ConvKernel;

/// Network shape. Level `l` of the encoder runs at resolution
/// `input_size / 2^l` with `base_channels * 2^l` channels; every 3×3
/// convolution uses padding 1 so skip connections line up without cropping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub input_size: [usize; 2],
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            depth: 3,
            base_channels: 16,
            input_size: [64, 64],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 convolution, padding 1, followed by ReLU.
    Conv3,
    /// 2×2 stride-2 transposed convolution.
    Up2,
    /// 1×1 output convolution producing class logits.
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn kernel_size(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => 3,
            LayerKind::Up2 => 2,
            LayerKind::Head => 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        let factor = 1usize
            .checked_shl(self.depth as u32 - 1)
            .ok_or_else(|| Error::Config(format!("depth {} is too large", self.depth)))?;
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input_size {h}x{w} must be non-zero and divisible by 2^(depth-1) = {factor}"
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every learnable layer in declaration order. Names are stable and
    /// used in error messages and checkpoints.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let conv = |name: String, i, o| LayerSpec {
            name,
            kind: LayerKind::Conv3,
            in_channels: i,
            out_channels: o,
        };
        for l in 0..self.depth {
            let cin = if l == 0 { self.in_channels } else { self.channels(l - 1) };
            specs.push(conv(format!("enc{l}.conv_a"), cin, self.channels(l)));
            specs.push(conv(format!("enc{l}.conv_b"), self.channels(l), self.channels(l)));
        }
        for l in (0..self.depth - 1).rev() {
            specs.push(LayerSpec {
                name: format!("dec{l}.up"),
                kind: LayerKind::Up2,
                in_channels: self.channels(l + 1),
                out_channels: self.channels(l),
            });
            specs.push(conv(format!("dec{l}.conv_a"), 2 * self.channels(l), self.channels(l)));
            specs.push(conv(format!("dec{l}.conv_b"), self.channels(l), self.channels(l)));
        }
        specs.push(LayerSpec {
            name: "head".into(),
            kind: LayerKind::Head,
            in_channels: self.channels(0),
            out_channels: self.num_classes,
        });
        specs
    }

    pub fn param_count(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|s| s.out_channels * (s.in_channels * s.kernel_size().pow(2) + 1))
            .sum()
    }
}

/// One named kernel of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kernel: ConvKernel,
}

/// All learnable weights, in the order given by [`UNetConfig::layer_specs`].
/// The same type carries gradients and optimizer accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams {
    pub layers: Vec<Layer>,
}

impl UNetParams {
    pub fn zeros(config: &UNetConfig) -> Self {
        let layers = config
            .layer_specs()
            .into_iter()
            .map(|s| {
                let k = s.kernel_size();
                Layer {
                    kernel: ConvKernel::zeros(s.out_channels, s.in_channels, k, k),
                    name: s.name,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    kernel: ConvKernel::zeros(l.kernel.out_channels, l.kernel.in_channels, l.kernel.kh, l.kernel.kw),
                })
                .collect(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.param_count()).sum()
    }

    /// Checks that every layer matches the shape the config declares.
    pub fn check_against(&self, config: &UNetConfig) -> Result<()> {
        let specs = config.layer_specs();
        if specs.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "config declares {} layers, parameters have {}",
                specs.len(),
                self.layers.len()
            )));
        }
        for (s, l) in specs.iter().zip(&self.layers) {
            let k = s.kernel_size();
            let ok = l.name == s.name
                && (l.kernel.out_channels, l.kernel.in_channels, l.kernel.kh, l.kernel.kw)
                    == (s.out_channels, s.in_channels, k, k);
            if !ok {
                return Err(Error::Config(format!(
                    "layer {} has shape {}, config expects {} ({}, {}, {k}, {k})",
                    l.name,
                    l.kernel.dims_string(),
                    s.name,
                    s.out_channels,
                    s.in_channels
                )));
            }
            l.kernel.validate()?;
        }
        Ok(())
    }

    /// Element-wise accumulate; shapes must match.
    pub fn add_assign(&mut self, other: &UNetParams) {
        assert_eq!(self.layers.len(), other.layers.len(), "parameter layouts differ");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            assert!(a.kernel.same_shape(&b.kernel), "layer {} shape differs", a.name);
            for (x, y) in a.kernel.weights.iter_mut().zip(&b.kernel.weights) {
                *x += y;
            }
            for (x, y) in a.kernel.bias.iter_mut().zip(&b.kernel.bias) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.kernel.is_finite())
    }

    /// All values flattened in layer order, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.kernel.weights);
            v.extend_from_slice(&l.kernel.bias);
        }
        v
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim(format!(
                "flat vector has {} values, parameters need {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.kernel.weights.iter_mut().chain(l.kernel.bias.iter_mut()) {
                *w = it.next().expect("length checked above");
            }
        }
        Ok(())
    }

    /// Mutable views of every weight and bias buffer, in layer order.
    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<f64>)> {
        self.layers.iter_mut().flat_map(|l| {
            let name = l.name.as_str();
            [(name, &mut l.kernel.weights), (name, &mut l.kernel.bias)]
        })
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Vec<f64>)> {
        self.layers
            .iter()
            .flat_map(|l| [(l.name.as_str(), &l.kernel.weights), (l.name.as_str(), &l.kernel.bias)])
    }
}

/// He-initialized parameters: weights ~ N(0, sqrt(2 / fan_in)), zero
/// biases. Deterministic for a given seed.
pub fn build(config: &UNetConfig, seed: u64) -> Result<UNetParams> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::INIT_STREAM);
    let mut params = UNetParams::zeros(config);
    for layer in &mut params.layers {
        let k = &mut layer.kernel;
        let fan_in = (k.in_channels * k.kh * k.kw) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| Error::Internal(format!("init distribution: {e}")))?;
        for w in &mut k.weights {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(params)
}
