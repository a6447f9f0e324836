use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::featuremap::FeatureMap;
use crate::real::Real;

use super::desc_net::{MID_CHANNELS, MID_STRIDE, OUTPUT_STRIDE};
use super::layers::{relu_backward, relu_in_place, Conv2d, ConvCache, InstanceNorm, NormCache, Upsampler};
use super::{Activation, ConvSpec, Module, Norm, Param, Tensor};

const WIDTH: usize = 16;

/// Three-layer detection head producing a full-resolution pre-sigmoid heatmap.
///
/// The first layer fuses the image with the descriptor map and the mid-level
/// tap, both projected by 1x1 convolutions at their native resolution and
/// then bilinearly upsampled (projection and upsampling commute).
#[derive(Debug, Clone)]
pub struct DetectorNet<T> {
    pub image_conv: Conv2d<T>,
    pub fmap_proj: Conv2d<T>,
    pub mid_proj: Conv2d<T>,
    pub norm1: InstanceNorm<T>,
    pub conv2: Conv2d<T>,
    pub norm2: InstanceNorm<T>,
    pub conv3: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct DetCache<T> {
    image: ConvCache<T>,
    fmap: ConvCache<T>,
    mid: ConvCache<T>,
    up_fmap: Upsampler,
    up_mid: Upsampler,
    fmap_dims: (usize, usize),
    norm1: NormCache<T>,
    act1: Tensor<T>,
    conv2: ConvCache<T>,
    norm2: NormCache<T>,
    act2: Tensor<T>,
    conv3: ConvCache<T>,
}

/// Gradients with respect to the detector's three inputs.
#[derive(Debug, Clone)]
pub struct DetInputGrads<T> {
    pub image: Tensor<T>,
    pub fmap: FeatureMap<T>,
    pub mid: Tensor<T>,
}

impl<T: Real> DetectorNet<T> {
    pub fn layer_specs(desc_channels: usize) -> Vec<ConvSpec> {
        let fused = |kernel, i| ConvSpec { kernel, in_channels: i, out_channels: WIDTH, stride: 1, activation: Activation::Relu, norm: Norm::Instance };
        vec![
            fused(3, 1),
            fused(1, desc_channels),
            fused(1, MID_CHANNELS),
            fused(3, WIDTH),
            ConvSpec { kernel: 3, in_channels: WIDTH, out_channels: 1, stride: 1, activation: Activation::None, norm: Norm::None },
        ]
    }

    pub fn new(desc_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            image_conv: Conv2d::new("det.image", 1, WIDTH, 3, 1, 6.0, &mut rng),
            fmap_proj: Conv2d::new("det.fmap", desc_channels, WIDTH, 1, 1, 6.0, &mut rng),
            mid_proj: Conv2d::new("det.mid", MID_CHANNELS, WIDTH, 1, 1, 6.0, &mut rng),
            norm1: InstanceNorm::new("det.norm1", WIDTH),
            conv2: Conv2d::new("det.conv2", WIDTH, WIDTH, 3, 1, 6.0, &mut rng),
            norm2: InstanceNorm::new("det.norm2", WIDTH),
            conv3: Conv2d::new("det.conv3", WIDTH, 1, 3, 1, 3.0, &mut rng),
        }
    }

    pub fn desc_channels(&self) -> usize {
        self.fmap_proj.in_channels
    }

    pub fn forward(&self, image: &Tensor<T>, fmap: &FeatureMap<T>, mid: &Tensor<T>) -> Result<(Tensor<T>, DetCache<T>)> {
        let (h, w) = (image.h, image.w);
        if image.c != 1
            || fmap.stride() != OUTPUT_STRIDE
            || fmap.height() * OUTPUT_STRIDE != h
            || fmap.width() * OUTPUT_STRIDE != w
            || fmap.channels() != self.desc_channels()
            || mid.c != MID_CHANNELS
            || mid.h * MID_STRIDE != h
            || mid.w * MID_STRIDE != w
        {
            return Err(Error::invalid("detector inputs are not spatially aligned"));
        }
        let half = T::of(0.5);
        let x = Tensor::from_vec(1, h, w, image.data.iter().map(|&v| v - half).collect());
        let (mut z, image_cache) = self.image_conv.forward(&x);

        let f = Tensor::from_vec(fmap.channels(), fmap.height(), fmap.width(), fmap.to_chw());
        let (pf, fmap_cache) = self.fmap_proj.forward(&f);
        let up_fmap = Upsampler::new(f.h, f.w, h, w);
        z.add_assign(&up_fmap.forward(&pf));

        let (pm, mid_cache) = self.mid_proj.forward(mid);
        let up_mid = Upsampler::new(mid.h, mid.w, h, w);
        z.add_assign(&up_mid.forward(&pm));

        let (mut a1, norm1) = self.norm1.forward(&z);
        relu_in_place(&mut a1);
        let (z2, conv2) = self.conv2.forward(&a1);
        let (mut a2, norm2) = self.norm2.forward(&z2);
        relu_in_place(&mut a2);
        let (heat, conv3) = self.conv3.forward(&a2);
        let cache = DetCache {
            image: image_cache,
            fmap: fmap_cache,
            mid: mid_cache,
            up_fmap,
            up_mid,
            fmap_dims: (fmap.height(), fmap.width()),
            norm1,
            act1: a1,
            conv2,
            norm2,
            act2: a2,
            conv3,
        };
        Ok((heat, cache))
    }

    /// Accumulates parameter gradients from `dL/dheatmap`; returns input gradients when asked.
    pub fn backward(&mut self, cache: &DetCache<T>, grad_heat: &Tensor<T>, input_grad: bool) -> Option<DetInputGrads<T>> {
        let mut g = self.conv3.backward(&cache.conv3, grad_heat, true).expect("input grad requested");
        relu_backward(&cache.act2, &mut g);
        let g = self.norm2.backward(&cache.norm2, &g);
        let mut g = self.conv2.backward(&cache.conv2, &g, true).expect("input grad requested");
        relu_backward(&cache.act1, &mut g);
        let g = self.norm1.backward(&cache.norm1, &g);

        let dimg = self.image_conv.backward(&cache.image, &g, input_grad);
        let dpf = cache.up_fmap.backward(&g);
        let df = self.fmap_proj.backward(&cache.fmap, &dpf, input_grad);
        let dpm = cache.up_mid.backward(&g);
        let dm = self.mid_proj.backward(&cache.mid, &dpm, input_grad);
        if !input_grad {
            return None;
        }
        let df = df.expect("input grad requested");
        let (fh, fw) = cache.fmap_dims;
        let fmap = FeatureMap::from_chw(df.c, fh, fw, OUTPUT_STRIDE, &df.data).expect("finite gradient");
        Some(DetInputGrads { image: dimg.expect("input grad requested"), fmap, mid: dm.expect("input grad requested") })
    }

    pub fn cast<U: Real>(&self) -> DetectorNet<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        let norm = |n: &InstanceNorm<T>| InstanceNorm { channels: n.channels, eps: n.eps, gamma: n.gamma.cast(), beta: n.beta.cast() };
        DetectorNet {
            image_conv: conv(&self.image_conv),
            fmap_proj: conv(&self.fmap_proj),
            mid_proj: conv(&self.mid_proj),
            norm1: norm(&self.norm1),
            conv2: conv(&self.conv2),
            norm2: norm(&self.norm2),
            conv3: conv(&self.conv3),
        }
    }
}

impl<T: Real> Module<T> for DetectorNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = Vec::new();
        v.extend(self.image_conv.params());
        v.extend(self.fmap_proj.params());
        v.extend(self.mid_proj.params());
        v.extend(self.norm1.params());
        v.extend(self.conv2.params());
        v.extend(self.norm2.params());
        v.extend(self.conv3.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        v.extend(self.image_conv.params_mut());
        v.extend(self.fmap_proj.params_mut());
        v.extend(self.mid_proj.params_mut());
        v.extend(self.norm1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.norm2.params_mut());
        v.extend(self.conv3.params_mut());
        v
    }
}
