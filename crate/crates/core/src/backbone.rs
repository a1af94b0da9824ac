//! Small convolutional stack producing a mid-level and a final feature map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::conv_geometry;
use crate::numerics::{Padding, ParamSet, Real, Tape, Tensor, Var};

pub const CHANNEL_MEAN: &str = "backbone/channel_mean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub name: String,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: Padding,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    /// Index of the layer whose output is the mid map.
    pub mid_layer: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let layer = |name: &str, kernel, out_channels, stride| ConvLayerSpec {
            name: name.into(),
            kernel,
            out_channels,
            stride,
            padding: Padding::Same,
            trainable: true,
        };
        Self {
            input_height: 64,
            input_width: 64,
            input_channels: 3,
            layers: vec![
                layer("conv1", 5, 16, 4),
                layer("conv2", 3, 32, 2),
                layer("conv3", 3, 64, 1),
                layer("conv4", 1, 64, 1),
            ],
            mid_layer: 1,
        }
    }
}

impl BackboneConfig {
    /// Spatial shape after every layer, `(h, w, c)`.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.layers.is_empty() || self.mid_layer >= self.layers.len() {
            return Err(Error::Argument("backbone needs layers and a valid mid layer".into()));
        }
        let mut shape = (self.input_height, self.input_width, self.input_channels);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let g = conv_geometry((shape.0, shape.1), (l.kernel, l.kernel), l.stride, l.padding)?;
            shape = (g.out_h, g.out_w, l.out_channels);
            out.push(shape);
        }
        Ok(out)
    }

    pub fn mid_shape(&self) -> Result<(usize, usize, usize)> {
        Ok(self.layer_shapes()?[self.mid_layer])
    }

    pub fn last_shape(&self) -> Result<(usize, usize, usize)> {
        Ok(*self.layer_shapes()?.last().expect("non-empty"))
    }

    pub fn kernel_name(&self, layer: usize) -> String {
        format!("backbone/{}/kernel", self.layers[layer].name)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("backbone/{}/bias", self.layers[layer].name)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.layers.len())
            .flat_map(|i| [self.kernel_name(i), self.bias_name(i)])
            .collect();
        names.push(CHANNEL_MEAN.into());
        names
    }

    /// Whether a backbone tensor is updated in stages 1–2.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.layers.iter().enumerate().any(|(i, l)| {
            l.trainable && (name == self.kernel_name(i) || name == self.bias_name(i))
        })
    }

    /// `Σ k·k·C_in·C_out + C_out` over layers.
    pub fn parameter_count(&self) -> usize {
        let mut cin = self.input_channels;
        let mut total = 0;
        for l in &self.layers {
            total += l.kernel * l.kernel * cin * l.out_channels + l.out_channels;
            cin = l.out_channels;
        }
        total
    }
}

/// He-scaled Gaussian kernels, zero biases, zero channel means.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<ParamSet<f32>> {
    config.layer_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut cin = config.input_channels;
    for (i, l) in config.layers.iter().enumerate() {
        let fan_in = l.kernel * l.kernel * cin;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
        let kernel = Tensor::from_fn([l.kernel, l.kernel, cin, l.out_channels], |_| {
            normal.sample(&mut rng)
        });
        params.insert(config.kernel_name(i), kernel);
        params.insert(config.bias_name(i), Tensor::zeros([l.out_channels]));
        cin = l.out_channels;
    }
    params.insert(CHANNEL_MEAN, Tensor::zeros([config.input_channels]));
    Ok(params)
}

/// Per-channel mean over a set of images.
pub fn channel_means<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>, channels: usize) -> Tensor<f32> {
    let mut sums = vec![0.0f64; channels];
    let mut count = 0usize;
    for img in images {
        for px in img.data().chunks_exact(channels) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
            count += 1;
        }
    }
    let data = sums.iter().map(|s| (s / count.max(1) as f64) as f32).collect();
    Tensor::from_parts(vec![channels], data)
}

/// The two spatial feature tensors of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps<T: Real = f32> {
    pub mid: Tensor<T>,
    pub last: Tensor<T>,
}

/// Tape handles to the feature maps of one image.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub mid: Var,
    pub last: Var,
}

/// Forward pass on a tape; every conv layer is registered as a parameter.
pub fn extract_features<T: Real>(
    tape: &mut Tape<T>,
    config: &BackboneConfig,
    params: &ParamSet<T>,
    pixels: &Tensor<T>,
) -> Result<FeatureVars> {
    pixels.expect_shape(&[config.input_height, config.input_width, config.input_channels])?;
    let means = params.get(CHANNEL_MEAN)?;
    let c = config.input_channels;
    let centered = Tensor::from_fn(pixels.shape().to_vec(), |i| pixels.data()[i] - means.data()[i % c]);
    let mut x = tape.constant(centered);
    let mut mid = None;
    for (i, l) in config.layers.iter().enumerate() {
        let k = tape.param(&config.kernel_name(i), params.get(&config.kernel_name(i))?);
        let b = tape.param(&config.bias_name(i), params.get(&config.bias_name(i))?);
        let y = tape.conv2d(x, k, l.stride, l.padding)?;
        let y = tape.channel_bias(y, b)?;
        x = tape.relu(y)?;
        if i == config.mid_layer {
            mid = Some(x);
        }
    }
    Ok(FeatureVars { mid: mid.expect("mid layer validated"), last: x })
}

/// Forward pass without gradient bookkeeping.
pub fn features<T: Real>(config: &BackboneConfig, params: &ParamSet<T>, pixels: &Tensor<T>) -> Result<FeatureMaps<T>> {
    let mut tape = Tape::new();
    let vars = extract_features(&mut tape, config, params, pixels)?;
    Ok(FeatureMaps { mid: tape.value(vars.mid).clone(), last: tape.value(vars.last).clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.mid_shape().unwrap(), (8, 8, 32));
        assert_eq!(cfg.last_shape().unwrap(), (8, 8, 64));
        let params = init_backbone(&cfg, 1).unwrap();
        let img = Tensor::from_fn([64, 64, 3], |i| (i % 7) as f32 / 7.0);
        let f = features(&cfg, &params, &img).unwrap();
        assert_eq!(f.mid.shape(), &[8, 8, 32]);
        assert_eq!(f.last.shape(), &[8, 8, 64]);
        assert_eq!(f, features(&cfg, &params, &img).unwrap());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = BackboneConfig::default();
        assert_eq!(init_backbone(&cfg, 5).unwrap(), init_backbone(&cfg, 5).unwrap());
        assert_ne!(init_backbone(&cfg, 5).unwrap(), init_backbone(&cfg, 6).unwrap());
    }

    #[test]
    fn zero_image_gives_zero_maps() {
        let cfg = BackboneConfig::default();
        let params = init_backbone(&cfg, 2).unwrap();
        let f = features(&cfg, &params, &Tensor::zeros([64, 64, 3])).unwrap();
        assert!(f.mid.data().iter().chain(f.last.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_closed_form() {
        let cfg = BackboneConfig::default();
        let expected = (5 * 5 * 3 * 16 + 16) + (3 * 3 * 16 * 32 + 32) + (3 * 3 * 32 * 64 + 64) + (64 * 64 + 64);
        assert_eq!(cfg.parameter_count(), expected);
        let params = init_backbone(&cfg, 0).unwrap();
        let counted: usize = params.iter().filter(|(n, _)| n.as_str() != CHANNEL_MEAN).map(|(_, t)| t.len()).sum();
        assert_eq!(counted, expected);
    }

    #[test]
    fn rejects_wrong_pixel_shape() {
        let cfg = BackboneConfig::default();
        let params = init_backbone(&cfg, 0).unwrap();
        assert!(matches!(features(&cfg, &params, &Tensor::zeros([32, 32, 3])), Err(Error::Dimension(_))));
    }
}
