//! Non-overlapping 3D max pooling with argmax-routed backward.
//!
//! Stride equals the kernel. When an axis is not divisible by the kernel the
//! trailing window is partial and the output extent is `ceil(in/k)`; that is
//! what produces the 75 -> 38 height step in the mid-network pooling of the
//! reference architecture. Ties go to the lowest linear index, which makes
//! the backward routing deterministic. Windows never overlap, so each input
//! element receives at most one gradient contribution and gradient mass is
//! conserved.

use crate::cube::FeatureCube;
use crate::error::{Result, TcnnError};
use crate::exec;

#[derive(Debug, Clone, Copy)]
pub struct MaxPool3DLayer {
    /// Kernel extent (depth, height, width); stride is the same.
    pub kernel_dims: (usize, usize, usize),
}

/// Per-output argmax record captured by the forward pass; required by backward.
#[derive(Debug, Clone)]
pub struct PoolRecord {
    pub in_dims: (usize, usize, usize, usize),
    pub out_dims: (usize, usize, usize, usize),
    /// For each output element, the linear index of the winning input element.
    pub argmax: Vec<u32>,
}

impl MaxPool3DLayer {
    pub fn new(kd: usize, kh: usize, kw: usize) -> Self {
        assert!(kd >= 1 && kh >= 1 && kw >= 1);
        MaxPool3DLayer {
            kernel_dims: (kd, kh, kw),
        }
    }

    pub fn output_dims(&self, in_dims: (usize, usize, usize, usize)) -> (usize, usize, usize, usize) {
        let (c, d, h, w) = in_dims;
        let (kd, kh, kw) = self.kernel_dims;
        (c, d.div_ceil(kd), h.div_ceil(kh), w.div_ceil(kw))
    }

    pub fn forward(&self, input: &FeatureCube) -> (FeatureCube, PoolRecord) {
        self.forward_impl(input, true)
    }

    pub fn forward_seq(&self, input: &FeatureCube) -> (FeatureCube, PoolRecord) {
        self.forward_impl(input, false)
    }

    fn forward_impl(&self, input: &FeatureCube, parallel: bool) -> (FeatureCube, PoolRecord) {
        let in_dims = input.dims();
        let (_, d, h, w) = in_dims;
        let (kd, kh, kw) = self.kernel_dims;
        let out_dims = self.output_dims(in_dims);
        let (oc_n, od_n, oh_n, ow_n) = out_dims;
        assert!(input.len() <= u32::MAX as usize, "cube too large for u32 argmax");

        let mut out = FeatureCube::zeros(oc_n, od_n, oh_n, ow_n);
        let mut argmax = vec![0u32; out.len()];
        let slab = od_n * oh_n * ow_n;
        let work = if parallel { input.len() } else { 0 };
        let idat = input.data();

        // One task per channel; each yields a (values, argmax) slab pair.
        let results: Vec<(Vec<f64>, Vec<u32>)> = exec::map_indexed(oc_n, work, |c| {
            let mut vals = vec![0.0f64; slab];
            let mut args = vec![0u32; slab];
            for od in 0..od_n {
                let d0 = od * kd;
                let d1 = (d0 + kd).min(d);
                for oy in 0..oh_n {
                    let y0 = oy * kh;
                    let y1 = (y0 + kh).min(h);
                    for ox in 0..ow_n {
                        let x0 = ox * kw;
                        let x1 = (x0 + kw).min(w);
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for di in d0..d1 {
                            for yi in y0..y1 {
                                let row = ((c * d + di) * h + yi) * w;
                                for xi in x0..x1 {
                                    let v = idat[row + xi];
                                    if v > best {
                                        best = v;
                                        best_idx = (row + xi) as u32;
                                    }
                                }
                            }
                        }
                        let o = (od * oh_n + oy) * ow_n + ox;
                        vals[o] = best;
                        args[o] = best_idx;
                    }
                }
            }
            (vals, args)
        });
        for (c, (vals, args)) in results.into_iter().enumerate() {
            out.data_mut()[c * slab..(c + 1) * slab].copy_from_slice(&vals);
            argmax[c * slab..(c + 1) * slab].copy_from_slice(&args);
        }

        (
            out,
            PoolRecord {
                in_dims,
                out_dims,
                argmax,
            },
        )
    }

    /// Routes each output gradient to the input element that won its window.
    pub fn backward(&self, record: &PoolRecord, grad_out: &FeatureCube) -> Result<FeatureCube> {
        if grad_out.dims() != record.out_dims {
            return Err(TcnnError::ShapeMismatch(format!(
                "grad_out dims {:?} do not match pooled dims {:?}",
                grad_out.dims(),
                record.out_dims
            )));
        }
        let (c, d, h, w) = record.in_dims;
        let mut grad_input = FeatureCube::zeros(c, d, h, w);
        let gi = grad_input.data_mut();
        for (j, &src) in record.argmax.iter().enumerate() {
            gi[src as usize] += grad_out.data()[j];
        }
        Ok(grad_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn random_cube(rng: &mut impl Rng, c: usize, d: usize, h: usize, w: usize) -> FeatureCube {
        let data = (0..c * d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureCube::from_vec(c, d, h, w, data).unwrap()
    }

    #[test]
    fn halves_divisible_axes() {
        let pool = MaxPool3DLayer::new(2, 2, 2);
        assert_eq!(pool.output_dims((128, 8, 150, 200)), (128, 4, 75, 100));
    }

    #[test]
    fn ceil_mode_on_odd_axis() {
        let pool = MaxPool3DLayer::new(2, 2, 2);
        assert_eq!(pool.output_dims((256, 4, 75, 100)), (256, 2, 38, 50));
    }

    #[test]
    fn constant_input_ties_to_first_index() {
        let pool = MaxPool3DLayer::new(1, 2, 2);
        let input = FeatureCube::from_vec(1, 1, 2, 4, vec![5.0; 8]).unwrap();
        let (out, rec) = pool.forward(&input);
        assert_eq!(out.dims(), (1, 1, 1, 2));
        assert!(out.data().iter().all(|&v| v == 5.0));
        assert_eq!(rec.argmax, vec![0, 2]);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = substream(5, "pool-oracle");
        let pool = MaxPool3DLayer::new(2, 2, 2);
        let input = random_cube(&mut rng, 1, 4, 4, 4);
        let (out, _) = pool.forward(&input);
        for od in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for yi in 0..2 {
                            for xi in 0..2 {
                                best = best.max(input.at(0, od * 2 + di, oy * 2 + yi, ox * 2 + xi));
                            }
                        }
                    }
                    assert_eq!(out.at(0, od, oy, ox), best);
                }
            }
        }
    }

    #[test]
    fn partial_window_takes_max_over_real_cells_only() {
        let pool = MaxPool3DLayer::new(1, 2, 1);
        // 3 rows; last window covers one row, value -4 must survive (no zero pad)
        let input = FeatureCube::from_vec(1, 1, 3, 1, vec![-1.0, -2.0, -4.0]).unwrap();
        let (out, _) = pool.forward(&input);
        assert_eq!(out.dims(), (1, 1, 2, 1));
        assert_eq!(out.data(), &[-1.0, -4.0]);
    }

    #[test]
    fn backward_routes_one_unit_per_window() {
        let mut rng = substream(6, "pool-bwd");
        let pool = MaxPool3DLayer::new(2, 2, 2);
        let input = random_cube(&mut rng, 2, 4, 4, 4);
        let (out, rec) = pool.forward(&input);
        let ones = FeatureCube::from_vec(2, 2, 2, 2, vec![1.0; 16]).unwrap();
        assert_eq!(out.dims(), ones.dims());
        let gi = pool.backward(&rec, &ones).unwrap();
        let nonzero = gi.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 16);
        assert_eq!(gi.data().iter().sum::<f64>(), 16.0);
    }

    #[test]
    fn zero_grad_out_zero_grad_in() {
        let mut rng = substream(7, "pool-bwd-zero");
        let pool = MaxPool3DLayer::new(2, 2, 2);
        let input = random_cube(&mut rng, 1, 2, 2, 2);
        let (_, rec) = pool.forward(&input);
        let go = FeatureCube::zeros(1, 1, 1, 1);
        let gi = pool.backward(&rec, &go).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_mass_is_conserved() {
        let mut rng = substream(8, "pool-mass");
        let pool = MaxPool3DLayer::new(2, 2, 2);
        for _ in 0..20 {
            let input = random_cube(&mut rng, 2, 4, 6, 6);
            let (out, rec) = pool.forward(&input);
            let (c, d, h, w) = out.dims();
            let go = random_cube(&mut rng, c, d, h, w);
            let gi = pool.backward(&rec, &go).unwrap();
            let a: f64 = gi.data().iter().sum();
            let b: f64 = go.data().iter().sum();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_wrong_dims() {
        let pool = MaxPool3DLayer::new(2, 2, 2);
        let input = FeatureCube::zeros(1, 2, 2, 2);
        let (_, rec) = pool.forward(&input);
        let go = FeatureCube::zeros(1, 2, 2, 2);
        assert!(pool.backward(&rec, &go).is_err());
    }
}
