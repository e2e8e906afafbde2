//! 1x1x1 convolution: a per-location linear mix of channels.

use rand::Rng;

use crate::cube::FeatureCube;
use crate::error::{Result, TcnnError};
use crate::exec;

use super::conv3d::gaussian;

#[derive(Debug, Clone)]
pub struct Conv1x1Layer {
    pub out_channels: usize,
    pub in_channels: usize,
    /// `out_channels x in_channels`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Conv1x1Grads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1x1Layer {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Conv1x1Layer {
            out_channels,
            in_channels,
            weights: vec![0.0; out_channels * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn init(out_channels: usize, in_channels: usize, rng: &mut impl Rng) -> Self {
        let mut l = Self::zeros(out_channels, in_channels);
        let std = (2.0 / in_channels as f64).sqrt();
        for w in l.weights.iter_mut() {
            *w = gaussian(rng) * std;
        }
        l
    }

    pub fn forward(&self, input: &FeatureCube) -> Result<FeatureCube> {
        let (c, d, h, w) = input.dims();
        if c != self.in_channels {
            return Err(TcnnError::ShapeMismatch(format!(
                "conv1x1 expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let vol = d * h * w;
        let mut out = FeatureCube::zeros(self.out_channels, d, h, w);
        let idat = input.data();
        let work = self.out_channels * vol * c;
        exec::for_each_slab(out.data_mut(), vol, work, |oc, slab| {
            let row = &self.weights[oc * c..(oc + 1) * c];
            let bias = self.bias[oc];
            for (p, o) in slab.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for (ic, wv) in row.iter().enumerate() {
                    acc += wv * idat[ic * vol + p];
                }
                *o = acc + bias;
            }
        });
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &FeatureCube,
        grad_out: &FeatureCube,
    ) -> Result<(FeatureCube, Conv1x1Grads)> {
        let (c, d, h, w) = input.dims();
        if grad_out.dims() != (self.out_channels, d, h, w) {
            return Err(TcnnError::ShapeMismatch(format!(
                "conv1x1 grad_out dims {:?} do not match ({}, {d}, {h}, {w})",
                grad_out.dims(),
                self.out_channels
            )));
        }
        let vol = d * h * w;
        let idat = input.data();
        let gdat = grad_out.data();

        let mut grad_input = FeatureCube::zeros(c, d, h, w);
        let work = c * vol * self.out_channels;
        exec::for_each_slab(grad_input.data_mut(), vol, work, |ic, slab| {
            for (p, g) in slab.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for oc in 0..self.out_channels {
                    acc += self.weights[oc * c + ic] * gdat[oc * vol + p];
                }
                *g = acc;
            }
        });

        let mut grads = Conv1x1Grads {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.out_channels],
        };
        exec::for_each_slab(&mut grads.weights, c, work, |oc, wrow| {
            for (ic, gw) in wrow.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for p in 0..vol {
                    acc += idat[ic * vol + p] * gdat[oc * vol + p];
                }
                *gw = acc;
            }
        });
        for oc in 0..self.out_channels {
            grads.bias[oc] = gdat[oc * vol..(oc + 1) * vol].iter().sum();
        }
        Ok((grad_input, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn single_weight_is_identity() {
        let mut l = Conv1x1Layer::zeros(1, 1);
        l.weights[0] = 1.0;
        let input = FeatureCube::from_vec(1, 2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = l.forward(&input).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn mixes_channels_per_location() {
        let mut l = Conv1x1Layer::zeros(1, 2);
        l.weights = vec![2.0, -1.0];
        l.bias = vec![0.5];
        let input = FeatureCube::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = l.forward(&input).unwrap();
        // 2*1 - 1*3 + 0.5 ; 2*2 - 1*4 + 0.5
        assert_eq!(out.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_shapes_and_zero_grad() {
        let mut rng = substream(9, "conv1x1");
        let l = Conv1x1Layer::init(3, 2, &mut rng);
        let data = (0..2 * 2 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = FeatureCube::from_vec(2, 2, 2, 2, data).unwrap();
        let go = FeatureCube::zeros(3, 2, 2, 2);
        let (gi, gw) = l.backward(&input, &go).unwrap();
        assert_eq!(gi.dims(), input.dims());
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.weights.iter().all(|&v| v == 0.0));
    }
}
