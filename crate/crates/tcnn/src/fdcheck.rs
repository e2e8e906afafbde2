//! Central finite-difference checks for every backward pass.
//!
//! Each check builds a random small instance, defines the scalar loss
//! L = sum(g .* y) for a fixed random g, computes analytic gradients through
//! the backward path under test, and compares every element against
//! (L(x+h) - L(x-h)) / 2h. The loss is linear in the layer output, so for
//! linear layers the difference is exact up to rounding; for piecewise
//! layers the inputs are generated with margins so no kink sits within h of
//! the evaluation point. The composed proposal-network loss is checked the
//! same way over every trainable parameter; elements whose first comparison
//! fails are re-measured at smaller step sizes, which separates a genuine
//! analytic error (persists at every h) from an activation-boundary
//! crossing (vanishes as h shrinks).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{AnchorBox, AnchorSet};
use crate::cube::FeatureCube;
use crate::error::Result;
use crate::geom::Box2D;
use crate::layers::{
    l2norm_backward, l2norm_forward, relu_backward, relu_forward, Conv1x1Layer, Conv3DLayer,
    FCLayer, MaxPool3DLayer,
};
use crate::net::NetConfig;
use crate::rng::substream;
use crate::toi::{toi_pool_backward, toi_pool_forward, ToiOutputSpec, TubeOfInterest};
use crate::tpn::{
    anchor_grid_proposals, label_proposals, regression_targets, tpn_clip_loss, Label,
    RegressionSample, ScoreSample, TpnModel,
};

pub const FD_TOLERANCE: f64 = 1e-3;
const H: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub layer: String,
    pub max_rel_err: f64,
    pub checks: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values with pairwise margins >= ~0.09, shuffled; pooling argmaxes cannot
/// flip under perturbations of size h.
fn margin_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.1 + rng.random_range(-0.001..0.001))
        .collect();
    vals.shuffle(rng);
    vals
}

/// Central difference of `loss` wrt element `i` of a buffer accessed
/// through `select`.
fn central<F>(x: &mut [f64], i: usize, h: f64, mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[i];
    x[i] = orig + h;
    let up = loss(x);
    x[i] = orig - h;
    let down = loss(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Compares an analytic gradient buffer against finite differences of
/// `loss` over the same buffer, with step-size fallback on failures.
fn compare<F>(x: &mut [f64], analytic: &[f64], mut loss: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let fd = central(x, i, H, &mut loss);
        let mut err = relative_error(analytic[i], fd);
        if err > FD_TOLERANCE {
            for h in [1e-7, 1e-8] {
                let fd2 = central(x, i, h, &mut loss);
                err = err.min(relative_error(analytic[i], fd2));
            }
        }
        worst = worst.max(err);
    }
    worst
}

pub fn check_conv3d(seed: u64, instances: usize) -> GradReport {
    let mut rng = substream(seed, "fd-conv3d");
    let mut worst = 0.0f64;
    let mut checks = 0;
    for _ in 0..instances {
        let layer = Conv3DLayer::init(2, 2, (3, 3, 3), (1, 1, 1), &mut rng);
        let mut input =
            FeatureCube::from_vec(2, 3, 4, 4, rand_vec(&mut rng, 2 * 3 * 4 * 4)).unwrap();
        let out_dims = layer.output_dims(input.dims()).unwrap();
        let g = rand_vec(&mut rng, out_dims.0 * out_dims.1 * out_dims.2 * out_dims.3);
        let gcube =
            FeatureCube::from_vec(out_dims.0, out_dims.1, out_dims.2, out_dims.3, g.clone())
                .unwrap();
        let (gi, gw) = layer.backward(&input, &gcube).unwrap();

        let dims = input.dims();
        let layer_ref = layer.clone();
        let loss_in = |x: &[f64]| {
            let c = FeatureCube::from_vec(dims.0, dims.1, dims.2, dims.3, x.to_vec()).unwrap();
            dot(layer_ref.forward(&c).unwrap().data(), &g)
        };
        worst = worst.max(compare(
            &mut input.data_mut().to_vec(),
            gi.data(),
            loss_in,
        ));

        let input_c = input.clone();
        let mut kernel = layer.kernel.clone();
        let mut probe = layer.clone();
        let loss_k = |k: &[f64]| {
            probe_forward_kernel(&mut probe, k, &input_c, &g)
        };
        worst = worst.max(compare(&mut kernel, &gw.kernel, loss_k));

        let mut bias = layer.bias.clone();
        let input_c2 = input.clone();
        let mut probe2 = layer.clone();
        let loss_b = |b: &[f64]| {
            probe2.bias.copy_from_slice(b);
            dot(probe2.forward(&input_c2).unwrap().data(), &g)
        };
        worst = worst.max(compare(&mut bias, &gw.bias, loss_b));
        checks += 1;
    }
    GradReport {
        layer: "conv3d".into(),
        max_rel_err: worst,
        checks,
    }
}

fn probe_forward_kernel(
    probe: &mut Conv3DLayer,
    k: &[f64],
    input: &FeatureCube,
    g: &[f64],
) -> f64 {
    probe.kernel.copy_from_slice(k);
    dot(probe.forward(input).unwrap().data(), g)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn check_maxpool3d(seed: u64, instances: usize) -> GradReport {
    let mut rng = substream(seed, "fd-maxpool");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let pool = MaxPool3DLayer::new(2, 2, 2);
        let mut input =
            FeatureCube::from_vec(2, 4, 5, 6, margin_vec(&mut rng, 2 * 4 * 5 * 6)).unwrap();
        let (out, rec) = pool.forward(&input);
        let (c, d, h, w) = out.dims();
        let g = rand_vec(&mut rng, c * d * h * w);
        let gcube = FeatureCube::from_vec(c, d, h, w, g.clone()).unwrap();
        let gi = pool.backward(&rec, &gcube).unwrap();
        let dims = input.dims();
        let loss = |x: &[f64]| {
            let cube = FeatureCube::from_vec(dims.0, dims.1, dims.2, dims.3, x.to_vec()).unwrap();
            let (o, _) = pool.forward(&cube);
            dot(o.data(), &g)
        };
        worst = worst.max(compare(&mut input.data_mut().to_vec(), gi.data(), loss));
    }
    GradReport {
        layer: "maxpool3d".into(),
        max_rel_err: worst,
        checks: instances,
    }
}

pub fn check_fc(seed: u64, instances: usize) -> GradReport {
    let mut rng = substream(seed, "fd-fc");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let layer = FCLayer::init(5, 7, &mut rng);
        let mut x = rand_vec(&mut rng, 7);
        let g = rand_vec(&mut rng, 5);
        let mut grads = layer.zero_grads();
        let gx = layer.backward(&x, &g, &mut grads).unwrap();

        let loss_x = |v: &[f64]| dot(&layer.forward(v).unwrap(), &g);
        worst = worst.max(compare(&mut x, &gx, loss_x));

        let mut probe = layer.clone();
        let xc = x.clone();
        let mut wbuf = layer.weights.clone();
        let loss_w = |w: &[f64]| {
            probe.weights.copy_from_slice(w);
            dot(&probe.forward(&xc).unwrap(), &g)
        };
        worst = worst.max(compare(&mut wbuf, &grads.weights, loss_w));

        let mut probe2 = layer.clone();
        let mut bbuf = layer.bias.clone();
        let loss_b = |b: &[f64]| {
            probe2.bias.copy_from_slice(b);
            dot(&probe2.forward(&xc).unwrap(), &g)
        };
        worst = worst.max(compare(&mut bbuf, &grads.bias, loss_b));
    }
    GradReport {
        layer: "fc".into(),
        max_rel_err: worst,
        checks: instances,
    }
}

pub fn check_relu(seed: u64, instances: usize) -> GradReport {
    let mut rng = substream(seed, "fd-relu");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        // keep every element away from the kink
        let mut x: Vec<f64> = (0..20)
            .map(|_| {
                let mag = rng.random_range(0.05..1.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let g = rand_vec(&mut rng, 20);
        let ga = relu_backward(&x, &g);
        let loss = |v: &[f64]| dot(&relu_forward(v), &g);
        worst = worst.max(compare(&mut x, &ga, loss));
    }
    GradReport {
        layer: "relu".into(),
        max_rel_err: worst,
        checks: instances,
    }
}

pub fn check_l2norm(seed: u64, instances: usize) -> GradReport {
    let mut rng = substream(seed, "fd-l2norm");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        // norm bounded away from zero
        let mut x: Vec<f64> = rand_vec(&mut rng, 12);
        x[0] += 2.0;
        let g = rand_vec(&mut rng, 12);
        let (_, norm) = l2norm_forward(&x);
        let ga = l2norm_backward(&x, norm, &g);
        let loss = |v: &[f64]| {
            let (y, _) = l2norm_forward(v);
            dot(&y, &g)
        };
        worst = worst.max(compare(&mut x, &ga, loss));
    }
    GradReport {
        layer: "l2norm".into(),
        max_rel_err: worst,
        checks: instances,
    }
}

pub fn check_conv1x1(seed: u64, instances: usize) -> GradReport {
    let mut rng = substream(seed, "fd-conv1x1");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let layer = Conv1x1Layer::init(3, 4, &mut rng);
        let mut input = FeatureCube::from_vec(4, 2, 3, 3, rand_vec(&mut rng, 4 * 2 * 3 * 3)).unwrap();
        let g = rand_vec(&mut rng, 3 * 2 * 3 * 3);
        let gcube = FeatureCube::from_vec(3, 2, 3, 3, g.clone()).unwrap();
        let (gi, gw) = layer.backward(&input, &gcube).unwrap();

        let dims = input.dims();
        let loss_in = |x: &[f64]| {
            let c = FeatureCube::from_vec(dims.0, dims.1, dims.2, dims.3, x.to_vec()).unwrap();
            dot(layer.forward(&c).unwrap().data(), &g)
        };
        worst = worst.max(compare(&mut input.data_mut().to_vec(), gi.data(), loss_in));

        let mut probe = layer.clone();
        let input_c = input.clone();
        let mut wbuf = layer.weights.clone();
        let loss_w = |w: &[f64]| {
            probe.weights.copy_from_slice(w);
            dot(probe.forward(&input_c).unwrap().data(), &g)
        };
        worst = worst.max(compare(&mut wbuf, &gw.weights, loss_w));
    }
    GradReport {
        layer: "conv1x1".into(),
        max_rel_err: worst,
        checks: instances,
    }
}

pub fn check_toi_pool(seed: u64, instances: usize) -> GradReport {
    let mut rng = substream(seed, "fd-toi");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let mut input =
            FeatureCube::from_vec(2, 4, 6, 6, margin_vec(&mut rng, 2 * 4 * 6 * 6)).unwrap();
        let tube = TubeOfInterest::new(
            (0..4)
                .map(|_| {
                    let x1 = rng.random_range(0.0..3.0);
                    let y1 = rng.random_range(0.0..3.0);
                    Box2D::new(x1, y1, x1 + rng.random_range(1.0..3.0), y1 + rng.random_range(1.0..3.0))
                })
                .collect(),
        );
        let spec = ToiOutputSpec::new(2, 3, 3);
        let (out, arg) = toi_pool_forward(&input, &tube, spec).unwrap();
        let (c, d, h, w) = out.dims();
        let g = rand_vec(&mut rng, c * d * h * w);
        let gcube = FeatureCube::from_vec(c, d, h, w, g.clone()).unwrap();
        let gi = toi_pool_backward(&gcube, &arg).unwrap();
        let dims = input.dims();
        let loss = |x: &[f64]| {
            let cube = FeatureCube::from_vec(dims.0, dims.1, dims.2, dims.3, x.to_vec()).unwrap();
            let (o, _) = toi_pool_forward(&cube, &tube, spec).unwrap();
            dot(o.data(), &g)
        };
        worst = worst.max(compare(&mut input.data_mut().to_vec(), gi.data(), loss));
    }
    GradReport {
        layer: "toi_pool".into(),
        max_rel_err: worst,
        checks: instances,
    }
}

/// Builds a tiny TPN training instance with a fixed sample and checks the
/// composed loss gradient over every parameter group.
pub fn check_tpn_composed(seed: u64, instances: usize) -> GradReport {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let mut rng = substream(seed.wrapping_add(inst as u64), "fd-tpn");
        let cfg = NetConfig::tiny(2);
        let anchors = AnchorSet {
            anchors: vec![
                AnchorBox {
                    width: 0.45,
                    height: 0.45,
                },
                AnchorBox {
                    width: 0.8,
                    height: 0.7,
                },
            ],
        };
        let model = TpnModel::init(cfg.clone(), anchors, &mut rng);
        let dims = cfg.clip_dims();
        let clip = FeatureCube::from_vec(
            dims.0,
            dims.1,
            dims.2,
            dims.3,
            (0..dims.0 * dims.1 * dims.2 * dims.3)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        )
        .unwrap();

        // one synthetic ground-truth tube
        let gt: Vec<Box2D> = (0..cfg.clip_len)
            .map(|f| {
                let x = 4.0 + f as f64 * 0.8;
                Box2D::new(x, 5.0, x + 12.0, 17.0)
            })
            .collect();
        let mut proposals = anchor_grid_proposals(&cfg, &model.anchors);
        let gts5 = crate::tpn::gt_boxes_on_conv5(&cfg, &gt);
        label_proposals(&mut proposals, &gts5);
        let mut score_samples: Vec<ScoreSample> = Vec::new();
        let mut reg_samples: Vec<RegressionSample> = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            if p.label == Label::Positive && reg_samples.is_empty() {
                score_samples.push(ScoreSample {
                    proposal: i,
                    target: true,
                });
                reg_samples.push(RegressionSample {
                    proposal: i,
                    targets: regression_targets(&cfg, p, &gt),
                });
            }
        }
        score_samples.push(ScoreSample {
            proposal: 0,
            target: false,
        });

        let loss_of = |m: &TpnModel| -> f64 {
            let mut grads = m.zero_grads();
            let (report, _) =
                tpn_clip_loss(m, &clip, &proposals, &score_samples, &reg_samples, &mut grads)
                    .unwrap();
            report.total
        };
        let mut grads = model.zero_grads();
        let (_, _) = tpn_clip_loss(
            &model,
            &clip,
            &proposals,
            &score_samples,
            &reg_samples,
            &mut grads,
        )
        .unwrap();

        // every parameter group, subsampled to keep the suite fast
        let mut probe = model.clone();
        let mut check_group = |get: &dyn Fn(&mut TpnModel) -> &mut Vec<f64>,
                               analytic: &[f64],
                               rng: &mut ChaCha8Rng| {
            let n = analytic.len();
            let idx: Vec<usize> = if n <= 24 {
                (0..n).collect()
            } else {
                let mut v: Vec<usize> = (0..n).collect();
                v.shuffle(rng);
                v.truncate(24);
                v
            };
            for i in idx {
                let orig = get(&mut probe)[i];
                let mut measure = |h: f64| {
                    get(&mut probe)[i] = orig + h;
                    let up = loss_of(&probe);
                    get(&mut probe)[i] = orig - h;
                    let down = loss_of(&probe);
                    get(&mut probe)[i] = orig;
                    (up - down) / (2.0 * h)
                };
                let fd = measure(H);
                let mut err = relative_error(analytic[i], fd);
                if err > FD_TOLERANCE {
                    for h in [1e-7, 1e-5] {
                        let fd2 = measure(h);
                        err = err.min(relative_error(analytic[i], fd2));
                    }
                }
                worst = worst.max(err);
            }
        };

        for ci in 0..8 {
            let k = grads.backbone.convs[ci].kernel.clone();
            check_group(&|m| &mut m.backbone.convs[ci].kernel, &k, &mut rng);
            let b = grads.backbone.convs[ci].bias.clone();
            check_group(&|m| &mut m.backbone.convs[ci].bias, &b, &mut rng);
        }
        check_group(&|m| &mut m.heads.score.weights, &grads.score.weights.clone(), &mut rng);
        check_group(&|m| &mut m.heads.score.bias, &grads.score.bias.clone(), &mut rng);
        if let Some(rg) = grads.reduce.as_ref() {
            let w = rg.weights.clone();
            check_group(
                &|m| &mut m.heads.reduce.as_mut().unwrap().weights,
                &w,
                &mut rng,
            );
        }
        check_group(&|m| &mut m.heads.fc6.weights, &grads.fc6.weights.clone(), &mut rng);
        check_group(&|m| &mut m.heads.fc7.weights, &grads.fc7.weights.clone(), &mut rng);
        check_group(&|m| &mut m.heads.reg.weights, &grads.reg.weights.clone(), &mut rng);
        check_group(&|m| &mut m.heads.reg.bias, &grads.reg.bias.clone(), &mut rng);
    }
    GradReport {
        layer: "tpn_composed".into(),
        max_rel_err: worst,
        checks: instances,
    }
}

/// Runs every layer check. `corrupt` deliberately biases one analytic
/// gradient as a negative control, which must make the suite fail.
pub fn run_all(seed: u64, instances: usize, corrupt: bool) -> Result<Vec<GradReport>> {
    let mut reports = vec![
        check_conv3d(seed, instances),
        check_maxpool3d(seed, instances),
        check_fc(seed, instances),
        check_relu(seed, instances),
        check_l2norm(seed, instances),
        check_conv1x1(seed, instances),
        check_toi_pool(seed, instances),
        check_tpn_composed(seed, instances.min(3)),
    ];
    if corrupt {
        // negative control: a 5% bias on conv3d kernel grads must be caught
        let mut rng = substream(seed, "fd-corrupt");
        let layer = Conv3DLayer::init(2, 2, (3, 3, 3), (1, 1, 1), &mut rng);
        let input = FeatureCube::from_vec(2, 3, 4, 4, rand_vec(&mut rng, 2 * 3 * 4 * 4)).unwrap();
        let out_dims = layer.output_dims(input.dims()).unwrap();
        let g = rand_vec(&mut rng, out_dims.0 * out_dims.1 * out_dims.2 * out_dims.3);
        let gcube =
            FeatureCube::from_vec(out_dims.0, out_dims.1, out_dims.2, out_dims.3, g.clone())
                .unwrap();
        let (_, mut gw) = layer.backward(&input, &gcube).unwrap();
        for v in gw.kernel.iter_mut() {
            *v *= 1.05;
        }
        let mut probe = layer.clone();
        let mut kernel = layer.kernel.clone();
        let worst = compare(&mut kernel, &gw.kernel, |k| {
            probe_forward_kernel(&mut probe, k, &input, &g)
        });
        reports.push(GradReport {
            layer: "conv3d(corrupted)".into(),
            max_rel_err: worst,
            checks: 1,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_layer_gradients_match_finite_differences() {
        for r in run_all(123, 3, false).unwrap() {
            assert!(
                r.passed(),
                "{} failed: max rel err {:.3e}",
                r.layer,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let reports = run_all(7, 1, true).unwrap();
        let bad = reports
            .iter()
            .find(|r| r.layer == "conv3d(corrupted)")
            .unwrap();
        assert!(!bad.passed(), "corruption must be detected");
    }
}
