use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featuremap::FeatureMap;
use crate::real::Real;

use super::layers::{l2_normalize, l2_normalize_backward, relu_backward, relu_in_place, Conv2d, ConvCache};
use super::{Activation, ConvSpec, Module, Norm, Param, Tensor};

/// Stride-4 dense descriptor network.
///
/// Six convolutions: two stride-2 downsamples, widths 16, 32, 64, then a
/// linear 1x1 projection to the descriptor dimension. The output of the
/// third layer (stride 2) is exposed as the mid-level tap.
#[derive(Debug, Clone)]
pub struct DescriptorNet<T> {
    pub convs: Vec<Conv2d<T>>,
    pub normalize: bool,
}

pub const MID_LAYER: usize = 2;
pub const MID_CHANNELS: usize = 32;
pub const OUTPUT_STRIDE: usize = 4;
/// Mid-level tap stride relative to the input image.
pub const MID_STRIDE: usize = 2;

/// Forward results: the stride-4 descriptor map and the stride-2 mid-level activations.
#[derive(Debug, Clone)]
pub struct DescOutput<T> {
    pub fmap: FeatureMap<T>,
    pub mid: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DescCache<T> {
    convs: Vec<ConvCache<T>>,
    activations: Vec<Tensor<T>>,
    norms: Option<(Tensor<T>, Vec<f64>)>,
}

impl<T: Real> DescriptorNet<T> {
    pub fn layer_specs(channels: usize) -> Vec<ConvSpec> {
        let relu = |kernel, i, o, stride| ConvSpec { kernel, in_channels: i, out_channels: o, stride, activation: Activation::Relu, norm: Norm::None };
        vec![
            relu(3, 1, 16, 1),
            relu(3, 16, 32, 2),
            relu(3, 32, MID_CHANNELS, 1),
            relu(3, MID_CHANNELS, 64, 2),
            relu(3, 64, 64, 1),
            ConvSpec { kernel: 1, in_channels: 64, out_channels: channels, stride: 1, activation: Activation::None, norm: Norm::None },
        ]
    }

    pub fn new(channels: usize, normalize: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = Self::layer_specs(channels);
        let last = specs.len() - 1;
        let convs = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let gain = if i == last { 3.0 } else { 6.0 };
                Conv2d::new(&format!("desc.conv{}", i + 1), s.in_channels, s.out_channels, s.kernel, s.stride, gain, &mut rng)
            })
            .collect();
        Self { convs, normalize }
    }

    pub fn channels(&self) -> usize {
        self.convs.last().map(|c| c.out_channels).unwrap_or(0)
    }

    /// Input: single-channel image in [0, 1], row-major, dimensions divisible by 16.
    pub fn forward(&self, image: &Tensor<T>) -> Result<(DescOutput<T>, DescCache<T>)> {
        if image.c != 1 || !image.h.is_multiple_of(16) || !image.w.is_multiple_of(16) || image.h == 0 || image.w == 0 {
            return Err(Error::invalid(format!(
                "descriptor input must be 1 x H x W with H, W divisible by 16, got {}x{}x{}",
                image.c, image.h, image.w
            )));
        }
        let half = T::of(0.5);
        let mut x = Tensor::from_vec(1, image.h, image.w, image.data.iter().map(|&v| v - half).collect());
        let last = self.convs.len() - 1;
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut activations = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let (mut y, cache) = conv.forward(&x);
            if i != last {
                relu_in_place(&mut y);
            }
            convs.push(cache);
            activations.push(y.clone());
            x = y;
        }
        let norms = if self.normalize {
            let (y, n) = l2_normalize(&x);
            x = y;
            Some((x.clone(), n))
        } else {
            None
        };
        let fmap = FeatureMap::from_chw(x.c, x.h, x.w, OUTPUT_STRIDE, &x.data)?;
        let mid = activations[MID_LAYER].clone();
        let cache = DescCache { convs, activations, norms };
        Ok((DescOutput { fmap, mid }, cache))
    }

    /// Accumulates parameter gradients given `dL/dfmap` (HWC, same layout as the map)
    /// and optionally `dL/dmid`. Returns `dL/dimage` when `input_grad` is set.
    pub fn backward(&mut self, cache: &DescCache<T>, grad_fmap: &FeatureMap<T>, grad_mid: Option<&Tensor<T>>, input_grad: bool) -> Option<Tensor<T>> {
        let top = cache.activations.last().expect("non-empty network");
        let chw = grad_fmap.to_chw();
        let mut g = Tensor::from_vec(top.c, top.h, top.w, chw);
        if let Some((ref y, ref norms)) = cache.norms {
            g = l2_normalize_backward(y, norms, &g);
        }
        let last = self.convs.len() - 1;
        for i in (0..self.convs.len()).rev() {
            if i != last {
                relu_backward(&cache.activations[i], &mut g);
            }
            if i == MID_LAYER {
                if let Some(m) = grad_mid {
                    // The mid tap is post-ReLU, so its gradient joins before the ReLU mask.
                    let mut m = m.clone();
                    relu_backward(&cache.activations[i], &mut m);
                    g.add_assign(&m);
                }
            }
            let need = i > 0 || input_grad;
            {
                let dx = self.convs[i].backward(&cache.convs[i], &g, need)?;
                g = dx
            }
        }
        Some(g)
    }

    pub fn cast<U: Real>(&self) -> DescriptorNet<U> {
        DescriptorNet {
            convs: self
                .convs
                .iter()
                .map(|c| Conv2d {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    kernel: c.kernel,
                    stride: c.stride,
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            normalize: self.normalize,
        }
    }
}

impl<T: Real> Module<T> for DescriptorNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}
