//! Network architecture: the 3D conv/pool backbone, scale presets and
//! checkpoint IO.
//!
//! The backbone is eight 3x3x3 convolutions (stride 1, pad 1, ReLU) with
//! four interleaved max-pool layers; the first pool is 1x2x2, the rest
//! 2x2x2. At the reference 300x400 scale this reproduces the published
//! layer table exactly; the desk preset keeps the same kernels on smaller
//! frames with fewer channels so CPU training finishes in minutes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::cube::{read_tensor, write_tensor, FeatureCube};
use crate::error::{Result, TcnnError};
use crate::layers::{
    relu_backward_from_output, relu_forward_inplace, Conv3DGrads, Conv3DLayer, MaxPool3DLayer,
    PoolRecord,
};
use crate::toi::ToiOutputSpec;

pub const CONV_NAMES: [&str; 8] = [
    "conv1", "conv2", "conv3a", "conv3b", "conv4a", "conv4b", "conv5a", "conv5b",
];

/// (index of the conv a pool follows, pool kernel)
pub const POOL_AFTER: [(usize, (usize, usize, usize)); 4] =
    [(0, (1, 2, 2)), (1, (2, 2, 2)), (3, (2, 2, 2)), (5, (2, 2, 2))];

pub const POOL_NAMES: [&str; 4] = ["max-pool1", "max-pool2", "max-pool3", "max-pool4"];

/// Which earlier conv layer feeds the temporal skip connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipSource {
    /// No skip pooling: box regression sees only the conv5 descriptor.
    None,
    Conv1,
    Conv2,
    Conv3,
    Conv4,
}

impl SkipSource {
    /// Index into the conv stack of the tapped (post-ReLU) output.
    pub fn conv_index(self) -> Option<usize> {
        match self {
            SkipSource::None => None,
            SkipSource::Conv1 => Some(0),
            SkipSource::Conv2 => Some(1),
            SkipSource::Conv3 => Some(3),
            SkipSource::Conv4 => Some(5),
        }
    }
}

impl fmt::Display for SkipSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SkipSource::None => "none",
            SkipSource::Conv1 => "conv1",
            SkipSource::Conv2 => "conv2",
            SkipSource::Conv3 => "conv3",
            SkipSource::Conv4 => "conv4",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for SkipSource {
    type Err = TcnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SkipSource::None),
            "conv1" => Ok(SkipSource::Conv1),
            "conv2" => Ok(SkipSource::Conv2),
            "conv3" => Ok(SkipSource::Conv3),
            "conv4" => Ok(SkipSource::Conv4),
            other => Err(TcnnError::Config(format!(
                "unknown skip source '{other}' (use none|conv1|conv2|conv3|conv4)"
            ))),
        }
    }
}

/// Architecture hyperparameters; a preset fully determines all layer shapes.
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub clip_len: usize,
    pub in_channels: usize,
    pub conv_channels: [usize; 8],
    /// Width of fc6/fc7.
    pub fc_dim: usize,
    pub num_anchors: usize,
    /// N action classes; the classifier emits N+1 with background at index 0.
    pub num_classes: usize,
    pub skip_source: SkipSource,
    /// ToI output bins for the skip tube.
    pub toi_skip: ToiOutputSpec,
    /// ToI output bins for the conv5 box (and the recognition head).
    pub toi5: ToiOutputSpec,
    pub dropout: f64,
}

impl NetConfig {
    /// The published full-scale architecture on 300x400 frames.
    pub fn paper_300x400(num_classes: usize) -> Self {
        NetConfig {
            frame_height: 300,
            frame_width: 400,
            clip_len: 8,
            in_channels: 3,
            conv_channels: [64, 128, 256, 256, 512, 512, 512, 512],
            fc_dim: 4096,
            num_anchors: 12,
            num_classes,
            skip_source: SkipSource::Conv2,
            toi_skip: ToiOutputSpec::new(8, 8, 8),
            toi5: ToiOutputSpec::new(1, 4, 4),
            dropout: 0.5,
        }
    }

    /// Scaled-down architecture on 60x80 frames for CPU-budget training:
    /// same kernels and pooling chain, fewer channels, narrower fc layers.
    pub fn desk_60x80(num_classes: usize) -> Self {
        NetConfig {
            frame_height: 60,
            frame_width: 80,
            clip_len: 8,
            in_channels: 3,
            conv_channels: [8, 12, 16, 16, 24, 24, 32, 32],
            fc_dim: 96,
            num_anchors: 12,
            num_classes,
            skip_source: SkipSource::Conv2,
            toi_skip: ToiOutputSpec::new(8, 8, 8),
            toi5: ToiOutputSpec::new(1, 4, 4),
            dropout: 0.5,
        }
    }

    /// Miniature config for gradient checks and unit tests.
    pub fn tiny(num_classes: usize) -> Self {
        NetConfig {
            frame_height: 24,
            frame_width: 32,
            clip_len: 8,
            in_channels: 2,
            conv_channels: [2, 2, 3, 3, 3, 3, 4, 4],
            fc_dim: 8,
            num_anchors: 2,
            num_classes,
            skip_source: SkipSource::Conv2,
            toi_skip: ToiOutputSpec::new(8, 2, 2),
            toi5: ToiOutputSpec::new(1, 2, 2),
            dropout: 0.5,
        }
    }

    pub fn clip_dims(&self) -> (usize, usize, usize, usize) {
        (
            self.in_channels,
            self.clip_len,
            self.frame_height,
            self.frame_width,
        )
    }

    /// Walks the conv/pool chain, returning each stage's output dims.
    /// Convolutions are 3x3x3 pad-1 stride-1 and preserve extents; pools
    /// divide by their kernel with ceil on non-divisible axes.
    pub fn stage_dims(&self) -> Vec<(String, (usize, usize, usize, usize))> {
        let mut rows = Vec::new();
        let mut dims = self.clip_dims();
        for (i, &oc) in self.conv_channels.iter().enumerate() {
            dims = (oc, dims.1, dims.2, dims.3);
            rows.push((CONV_NAMES[i].to_string(), dims));
            if let Some(pi) = POOL_AFTER.iter().position(|(after, _)| *after == i) {
                let pool = MaxPool3DLayer::new(
                    POOL_AFTER[pi].1 .0,
                    POOL_AFTER[pi].1 .1,
                    POOL_AFTER[pi].1 .2,
                );
                dims = pool.output_dims(dims);
                rows.push((POOL_NAMES[pi].to_string(), dims));
            }
        }
        rows
    }

    /// Spatial grid (height, width) of the conv5 feature cube.
    pub fn conv5_grid(&self) -> (usize, usize) {
        let rows = self.stage_dims();
        let (_, (_, _, h, w)) = rows.last().unwrap();
        (*h, *w)
    }

    /// Dims of the skip tap cube, when a skip source is configured.
    pub fn skip_dims(&self) -> Option<(usize, usize, usize, usize)> {
        let idx = self.skip_source.conv_index()?;
        let rows = self.stage_dims();
        let name = CONV_NAMES[idx];
        rows.iter().find(|(n, _)| n == name).map(|(_, d)| *d)
    }

    /// Per-frame descriptor width before the 1x1 reduction.
    pub fn descriptor_dim(&self) -> usize {
        let conv5_part = self.conv_channels[7] * self.toi5.height * self.toi5.width;
        match self.skip_source.conv_index() {
            Some(idx) => {
                let skip_part =
                    self.conv_channels[idx] * self.toi_skip.height * self.toi_skip.width;
                skip_part + conv5_part
            }
            None => conv5_part,
        }
    }

    /// Width after the 1x1 reduction; equals the fc6 input so the TPN and
    /// recognition head can share fc6/fc7.
    pub fn reduced_dim(&self) -> usize {
        self.conv_channels[7] * self.toi5.height * self.toi5.width
    }
}

/// The 3D conv/pool feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub convs: Vec<Conv3DLayer>,
}

/// Activations retained by a forward pass for the exact backward.
pub struct BackboneActs {
    pub input: FeatureCube,
    /// Post-ReLU output of each conv layer.
    pub conv_out: Vec<FeatureCube>,
    pub pool_out: Vec<FeatureCube>,
    pub pool_recs: Vec<PoolRecord>,
}

impl BackboneActs {
    pub fn conv5(&self) -> &FeatureCube {
        &self.conv_out[7]
    }

    pub fn tap(&self, skip: SkipSource) -> Option<&FeatureCube> {
        skip.conv_index().map(|i| &self.conv_out[i])
    }
}

pub struct BackboneGrads {
    pub convs: Vec<Conv3DGrads>,
}

/// Source of conv layer `i`'s input in the stage chain.
fn input_source(i: usize) -> InputSource {
    if i == 0 {
        return InputSource::ClipInput;
    }
    match POOL_AFTER.iter().position(|(after, _)| *after == i - 1) {
        Some(p) => InputSource::Pool(p),
        None => InputSource::Conv(i - 1),
    }
}

enum InputSource {
    ClipInput,
    Conv(usize),
    Pool(usize),
}

impl Backbone {
    pub fn init(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(8);
        let mut prev = cfg.in_channels;
        for &oc in &cfg.conv_channels {
            convs.push(Conv3DLayer::init(oc, prev, (3, 3, 3), (1, 1, 1), rng));
            prev = oc;
        }
        Backbone { convs }
    }

    fn pools() -> Vec<MaxPool3DLayer> {
        POOL_AFTER
            .iter()
            .map(|&(_, k)| MaxPool3DLayer::new(k.0, k.1, k.2))
            .collect()
    }

    /// Full forward pass retaining every activation (needed for training).
    pub fn forward(&self, clip: &FeatureCube) -> Result<BackboneActs> {
        let pools = Self::pools();
        let mut conv_out: Vec<FeatureCube> = Vec::with_capacity(8);
        let mut pool_out: Vec<FeatureCube> = Vec::new();
        let mut pool_recs = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            let input = match input_source(i) {
                InputSource::ClipInput => clip,
                InputSource::Conv(j) => &conv_out[j],
                InputSource::Pool(p) => &pool_out[p],
            };
            let mut out = conv.forward(input)?;
            relu_forward_inplace(out.data_mut());
            if let Some(p) = POOL_AFTER.iter().position(|(after, _)| *after == i) {
                let (pout, rec) = pools[p].forward(&out);
                pool_recs.push(rec);
                pool_out.push(pout);
            }
            conv_out.push(out);
        }
        Ok(BackboneActs {
            input: clip.clone(),
            conv_out,
            pool_out,
            pool_recs,
        })
    }

    /// Inference forward keeping only the skip tap and conv5 cubes; the rest
    /// of the activations are dropped as soon as possible.
    pub fn forward_features(
        &self,
        clip: &FeatureCube,
        skip: SkipSource,
    ) -> Result<(Option<FeatureCube>, FeatureCube)> {
        let pools = Self::pools();
        let tap_idx = skip.conv_index();
        let mut tap = None;
        let mut cur = clip.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let mut out = conv.forward(&cur)?;
            relu_forward_inplace(out.data_mut());
            if tap_idx == Some(i) {
                tap = Some(out.clone());
            }
            cur = out;
            if let Some(p) = POOL_AFTER.iter().position(|(after, _)| *after == i) {
                let (pout, _) = pools[p].forward(&cur);
                cur = pout;
            }
        }
        Ok((tap, cur))
    }

    /// Backpropagates loss gradients injected at the conv5 output and
    /// optionally at a skip tap; returns parameter grads and the gradient
    /// with respect to the input clip.
    pub fn backward(
        &self,
        acts: &BackboneActs,
        grad_conv5: FeatureCube,
        skip_grad: Option<(usize, &FeatureCube)>,
    ) -> Result<(BackboneGrads, FeatureCube)> {
        let pools = Self::pools();
        let mut conv_grads: Vec<Option<Conv3DGrads>> = (0..8).map(|_| None).collect();
        let mut grad = grad_conv5; // wrt conv_out[7]
        for i in (0..8).rev() {
            if let Some((tap_idx, g)) = skip_grad {
                if tap_idx == i {
                    if g.dims() != grad.dims() {
                        return Err(TcnnError::ShapeMismatch(format!(
                            "skip grad dims {:?} vs {:?}",
                            g.dims(),
                            grad.dims()
                        )));
                    }
                    for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            relu_backward_from_output(acts.conv_out[i].data(), grad.data_mut());
            let input: &FeatureCube = match input_source(i) {
                InputSource::ClipInput => &acts.input,
                InputSource::Conv(j) => &acts.conv_out[j],
                InputSource::Pool(p) => &acts.pool_out[p],
            };
            let (g_in, cg) = self.convs[i].backward(input, &grad)?;
            conv_grads[i] = Some(cg);
            grad = match input_source(i) {
                InputSource::ClipInput => return Ok((
                    BackboneGrads {
                        convs: conv_grads.into_iter().map(|g| g.unwrap()).collect(),
                    },
                    g_in,
                )),
                InputSource::Conv(_) => g_in,
                InputSource::Pool(p) => pools[p].backward(&acts.pool_recs[p], &g_in)?,
            };
        }
        unreachable!("loop returns at conv index 0")
    }

    pub fn zero_grads(&self) -> BackboneGrads {
        BackboneGrads {
            convs: self
                .convs
                .iter()
                .map(|c| Conv3DGrads {
                    kernel: vec![0.0; c.kernel.len()],
                    bias: vec![0.0; c.bias.len()],
                })
                .collect(),
        }
    }
}

impl BackboneGrads {
    pub fn accumulate(&mut self, other: &BackboneGrads) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            for (x, y) in a.kernel.iter_mut().zip(&b.kernel) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

/// Named parameter tensors for checkpointing; BTreeMap keeps the manifest
/// ordering stable.
pub type ParamMap = BTreeMap<String, (Vec<u32>, Vec<f64>)>;

/// Writes `params` as one tensor file per entry plus a `manifest.txt` of
/// `name rank dims...` lines. Files go through a temp name then rename.
pub fn save_checkpoint(dir: &Path, params: &ParamMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TcnnError::io(dir, e))?;
    let mut manifest = String::new();
    for (name, (dims, data)) in params {
        let fname = format!("{name}.tcnt");
        let tmp = dir.join(format!("{fname}.tmp"));
        write_tensor(&tmp, dims, data)?;
        fs::rename(&tmp, dir.join(&fname)).map_err(|e| TcnnError::io(dir.join(&fname), e))?;
        manifest.push_str(&format!(
            "{name} {} {}\n",
            dims.len(),
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    let mpath = dir.join("manifest.txt");
    let tmp = dir.join("manifest.txt.tmp");
    fs::write(&tmp, manifest).map_err(|e| TcnnError::io(&tmp, e))?;
    fs::rename(&tmp, &mpath).map_err(|e| TcnnError::io(&mpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamMap> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| TcnnError::io(&mpath, e))?;
    let mut params = ParamMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut toks = line.split_whitespace();
        let name = toks.next().ok_or_else(|| TcnnError::Parse {
            path: mpath.clone(),
            line: lineno + 1,
            msg: "empty manifest line".into(),
        })?;
        let (dims, data) = read_tensor(&dir.join(format!("{name}.tcnt")))?;
        params.insert(name.to_string(), (dims, data));
    }
    Ok(params)
}
