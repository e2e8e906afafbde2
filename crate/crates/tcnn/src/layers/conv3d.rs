//! Dense 3D convolution (stride 1) with an exact backward pass.
//!
//! Values are cross-correlation sums plus bias. Accumulation runs over
//! input channels then kernel depth/height/width in f64, rounded once per
//! output element, so a naive loop oracle using the same order matches
//! bitwise and the result is independent of how work is split over threads.

use rand::Rng;

use crate::cube::FeatureCube;
use crate::error::{Result, TcnnError};
use crate::exec;

#[derive(Debug, Clone)]
pub struct Conv3DLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    /// Kernel extent (depth, height, width).
    pub kernel_dims: (usize, usize, usize),
    /// Zero padding per axis (depth, height, width); stride is fixed at 1.
    pub padding: (usize, usize, usize),
    /// `out_channels * in_channels * kd * kh * kw`, row-major in that order.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients produced by [`Conv3DLayer::backward`].
#[derive(Debug, Clone)]
pub struct Conv3DGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3DLayer {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_dims: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Self {
        let (kd, kh, kw) = kernel_dims;
        assert!(
            padding.0 < kd && padding.1 < kh && padding.2 < kw,
            "padding must be smaller than the kernel extent"
        );
        Conv3DLayer {
            out_channels,
            in_channels,
            kernel_dims,
            padding,
            kernel: vec![0.0; out_channels * in_channels * kd * kh * kw],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-style init: kernel ~ N(0, sqrt(2 / fan_in)), bias 0.
    pub fn init(
        out_channels: usize,
        in_channels: usize,
        kernel_dims: (usize, usize, usize),
        padding: (usize, usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let mut layer = Self::zeros(out_channels, in_channels, kernel_dims, padding);
        let (kd, kh, kw) = kernel_dims;
        let fan_in = (in_channels * kd * kh * kw) as f64;
        let std = (2.0 / fan_in).sqrt();
        for w in layer.kernel.iter_mut() {
            *w = gaussian(rng) * std;
        }
        layer
    }

    #[inline]
    fn kidx(&self, oc: usize, ic: usize, kd: usize, kh: usize, kw: usize) -> usize {
        let (d, h, w) = self.kernel_dims;
        (((oc * self.in_channels + ic) * d + kd) * h + kh) * w + kw
    }

    /// Output dims for an input of the given dims.
    pub fn output_dims(&self, in_dims: (usize, usize, usize, usize)) -> Result<(usize, usize, usize, usize)> {
        let (c, d, h, w) = in_dims;
        if c != self.in_channels {
            return Err(TcnnError::ShapeMismatch(format!(
                "conv3d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (kd, kh, kw) = self.kernel_dims;
        let (pd, ph, pw) = self.padding;
        let (fd, fh, fw) = (d + 2 * pd, h + 2 * ph, w + 2 * pw);
        if fd < kd || fh < kh || fw < kw {
            return Err(TcnnError::ShapeMismatch(format!(
                "kernel {kd}x{kh}x{kw} larger than padded input {fd}x{fh}x{fw}"
            )));
        }
        Ok((
            self.out_channels,
            fd - kd + 1,
            fh - kh + 1,
            fw - kw + 1,
        ))
    }

    pub fn forward(&self, input: &FeatureCube) -> Result<FeatureCube> {
        self.forward_impl(input, true)
    }

    /// Always-sequential twin of [`forward`](Self::forward) for benchmarks.
    pub fn forward_seq(&self, input: &FeatureCube) -> Result<FeatureCube> {
        self.forward_impl(input, false)
    }

    fn forward_impl(&self, input: &FeatureCube, parallel: bool) -> Result<FeatureCube> {
        let (oc_n, od_n, oh_n, ow_n) = self.output_dims(input.dims())?;
        let (pd, ph, pw) = self.padding;
        let padded = input.zero_padded(pd, ph, pw);
        let (_, fd, fh, fw) = padded.dims();
        let (kd, kh, kw) = self.kernel_dims;
        let ic_n = self.in_channels;

        let mut out = FeatureCube::zeros(oc_n, od_n, oh_n, ow_n);
        let slab = oh_n * ow_n;
        let work = oc_n * od_n * slab * ic_n * kd * kh * kw;
        let work = if parallel { work } else { 0 };
        let pdat = padded.data();
        let run = |task: usize, slab_out: &mut [f64]| {
            let oc = task / od_n;
            let od = task % od_n;
            let bias = self.bias[oc];
            for oy in 0..oh_n {
                for ox in 0..ow_n {
                    let mut acc = 0.0f64;
                    for ic in 0..ic_n {
                        for dk in 0..kd {
                            let plane = (ic * fd + od + dk) * fh;
                            for hk in 0..kh {
                                let row = (plane + oy + hk) * fw + ox;
                                let krow = self.kidx(oc, ic, dk, hk, 0);
                                for wk in 0..kw {
                                    acc += self.kernel[krow + wk] * pdat[row + wk];
                                }
                            }
                        }
                    }
                    slab_out[oy * ow_n + ox] = acc + bias;
                }
            }
        };
        if parallel {
            exec::for_each_slab(out.data_mut(), slab, work, run);
        } else {
            exec::for_each_slab_seq(out.data_mut(), slab, run);
        }
        Ok(out)
    }

    /// Gradients of a scalar loss w.r.t. the input, kernel and bias given the
    /// loss gradient at the output.
    pub fn backward(
        &self,
        input: &FeatureCube,
        grad_out: &FeatureCube,
    ) -> Result<(FeatureCube, Conv3DGrads)> {
        self.backward_impl(input, grad_out, true)
    }

    pub fn backward_seq(
        &self,
        input: &FeatureCube,
        grad_out: &FeatureCube,
    ) -> Result<(FeatureCube, Conv3DGrads)> {
        self.backward_impl(input, grad_out, false)
    }

    fn backward_impl(
        &self,
        input: &FeatureCube,
        grad_out: &FeatureCube,
        parallel: bool,
    ) -> Result<(FeatureCube, Conv3DGrads)> {
        let expect = self.output_dims(input.dims())?;
        if grad_out.dims() != expect {
            return Err(TcnnError::ShapeMismatch(format!(
                "grad_out dims {:?} do not match forward output {:?}",
                grad_out.dims(),
                expect
            )));
        }
        let (kd, kh, kw) = self.kernel_dims;
        let (pd, ph, pw) = self.padding;
        let (ic_n, id_n, ih_n, iw_n) = input.dims();
        let (oc_n, od_n, oh_n, ow_n) = grad_out.dims();

        // grad wrt input: full correlation of grad_out with the flipped kernel.
        // Padding grad_out by (k - 1 - p) aligns it so the same sliding-window
        // loop produces input-sized output.
        let gpad = grad_out.zero_padded(kd - 1 - pd, kh - 1 - ph, kw - 1 - pw);
        let (_, gd, gh, gw) = gpad.dims();
        let gdat = gpad.data();
        let mut grad_input = FeatureCube::zeros(ic_n, id_n, ih_n, iw_n);
        let slab = ih_n * iw_n;
        let work = if parallel {
            ic_n * id_n * slab * oc_n * kd * kh * kw
        } else {
            0
        };
        let run_gi = |task: usize, slab_out: &mut [f64]| {
            let ic = task / id_n;
            let id = task % id_n;
            for iy in 0..ih_n {
                for ix in 0..iw_n {
                    let mut acc = 0.0f64;
                    for oc in 0..oc_n {
                        for dk in 0..kd {
                            let plane = (oc * gd + id + dk) * gh;
                            for hk in 0..kh {
                                let row = (plane + iy + hk) * gw + ix;
                                // flipped kernel taps
                                let kbase = self.kidx(oc, ic, kd - 1 - dk, kh - 1 - hk, 0);
                                for wk in 0..kw {
                                    acc += self.kernel[kbase + kw - 1 - wk] * gdat[row + wk];
                                }
                            }
                        }
                    }
                    slab_out[iy * iw_n + ix] = acc;
                }
            }
        };
        if parallel {
            exec::for_each_slab(grad_input.data_mut(), slab, work, run_gi);
        } else {
            exec::for_each_slab_seq(grad_input.data_mut(), slab, run_gi);
        }

        // grad wrt kernel and bias; one task per output channel.
        let padded = input.zero_padded(pd, ph, pw);
        let (_, fd, fh, fw) = padded.dims();
        let pdat = padded.data();
        let godat = grad_out.data();
        let ksl = self.in_channels * kd * kh * kw;
        let mut grad_kernel = vec![0.0f64; self.kernel.len()];
        let mut grad_bias = vec![0.0f64; oc_n];
        let kwork = if parallel {
            oc_n * ksl * od_n * oh_n * ow_n
        } else {
            0
        };
        let run_gk = |oc: usize, kslab: &mut [f64]| {
            for ic in 0..ic_n {
                for dk in 0..kd {
                    for hk in 0..kh {
                        for wk in 0..kw {
                            let mut acc = 0.0f64;
                            for od in 0..od_n {
                                let plane = (ic * fd + od + dk) * fh;
                                let gplane = (oc * od_n + od) * oh_n;
                                for oy in 0..oh_n {
                                    let row = (plane + oy + hk) * fw + wk;
                                    let grow = (gplane + oy) * ow_n;
                                    for ox in 0..ow_n {
                                        acc += pdat[row + ox] * godat[grow + ox];
                                    }
                                }
                            }
                            kslab[((ic * kd + dk) * kh + hk) * kw + wk] = acc;
                        }
                    }
                }
            }
        };
        if parallel {
            exec::for_each_slab(&mut grad_kernel, ksl, kwork, run_gk);
        } else {
            exec::for_each_slab_seq(&mut grad_kernel, ksl, run_gk);
        }
        for oc in 0..oc_n {
            let mut acc = 0.0f64;
            let base = oc * od_n * oh_n * ow_n;
            for v in &godat[base..base + od_n * oh_n * ow_n] {
                acc += v;
            }
            grad_bias[oc] = acc;
        }

        Ok((
            grad_input,
            Conv3DGrads {
                kernel: grad_kernel,
                bias: grad_bias,
            },
        ))
    }
}

/// Standard normal sample (Box-Muller; avoids a rand_distr dependency).
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
