//! Synthetic video generator: textured rectangles with class-specific motion
//! patterns over noise backgrounds, with exact per-frame box annotations.
//!
//! Class identity is carried by motion alone (horizontal sweep, vertical
//! sweep, diagonal, oscillation); texture and colors are randomized per
//! video so recognition must use temporal structure. Untrimmed videos
//! contain an annotated action segment between background segments, and
//! negative segments may hold a distractor: a similar-looking rectangle on a
//! circular path that matches no class pattern, which is what hard-negative
//! mining is meant to reject.

use rand::Rng;

use crate::cube::FeatureCube;
use crate::error::{Result, TcnnError};
use crate::exec;
use crate::geom::Box2D;
use crate::rng::substream_indexed;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub clip_len: usize,
    pub frames_per_video: usize,
    pub num_videos: usize,
    /// Trimmed videos hold one action spanning every frame; untrimmed ones
    /// hold an action segment between background segments.
    pub untrimmed: bool,
    /// Amplitude of the uniform background noise around mid-gray.
    pub noise_level: f64,
    /// Probability that an untrimmed video's background segments contain a
    /// moving distractor.
    pub distractor_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 3,
            frame_height: 60,
            frame_width: 80,
            clip_len: 8,
            frames_per_video: 24,
            num_videos: 20,
            untrimmed: false,
            noise_level: 0.08,
            distractor_rate: 0.8,
            seed: 0,
        }
    }
}

/// Ground truth for one video: the action class and one optional box per
/// frame (None on background frames).
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub class_label: usize,
    pub frames: Vec<Option<Box2D>>,
}

impl VideoAnnotation {
    /// (frame index, box) pairs for annotated frames.
    pub fn tube(&self) -> Vec<(usize, Box2D)> {
        self.frames
            .iter()
            .enumerate()
            .filter_map(|(f, b)| b.map(|bb| (f, bb)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub id: String,
    /// 3 x T x H x W pixel volume in [0, 1].
    pub frames: FeatureCube,
    pub annotation: VideoAnnotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionPattern {
    HorizontalSweep,
    VerticalSweep,
    Diagonal,
    Oscillation,
}

pub const PATTERNS: [MotionPattern; 4] = [
    MotionPattern::HorizontalSweep,
    MotionPattern::VerticalSweep,
    MotionPattern::Diagonal,
    MotionPattern::Oscillation,
];

/// Motion pattern of action class `c` (classes are 1-based; 0 is background).
pub fn class_pattern(class: usize) -> MotionPattern {
    PATTERNS[(class - 1) % PATTERNS.len()]
}

struct Sprite {
    /// Integer top-left positions per frame; None = absent that frame.
    positions: Vec<Option<(i64, i64)>>,
    w: usize,
    h: usize,
    /// Per-channel checkerboard colors.
    colors: [[f64; 2]; 3],
    phase: usize,
}

fn checker_value(s: &Sprite, ch: usize, dx: usize, dy: usize) -> f64 {
    let cell = 4;
    let idx = ((dx / cell) + (dy / cell) + s.phase) % 2;
    s.colors[ch][idx]
}

fn render_sprite(frames: &mut FeatureCube, s: &Sprite) {
    let (_, t_n, h_n, w_n) = frames.dims();
    for t in 0..t_n {
        let Some((x0, y0)) = s.positions[t] else {
            continue;
        };
        for ch in 0..3 {
            for dy in 0..s.h {
                let y = y0 + dy as i64;
                if y < 0 || y >= h_n as i64 {
                    continue;
                }
                for dx in 0..s.w {
                    let x = x0 + dx as i64;
                    if x < 0 || x >= w_n as i64 {
                        continue;
                    }
                    *frames.at_mut(ch, t, y as usize, x as usize) =
                        checker_value(s, ch, dx, dy);
                }
            }
        }
    }
}

fn sprite_colors(rng: &mut impl Rng) -> [[f64; 2]; 3] {
    let mut colors = [[0.0; 2]; 3];
    for c in colors.iter_mut() {
        let lo = rng.random_range(0.0..0.25);
        let hi = rng.random_range(0.75..1.0);
        *c = if rng.random::<f64>() < 0.5 { [lo, hi] } else { [hi, lo] };
    }
    colors
}

/// Linear or oscillating trajectory that keeps the whole box inside the
/// frame over `active` frames.
fn action_positions(
    rng: &mut impl Rng,
    pattern: MotionPattern,
    total: usize,
    active: std::ops::Range<usize>,
    frame_hw: (usize, usize),
    box_hw: (usize, usize),
) -> Vec<Option<(i64, i64)>> {
    let (fh, fw) = (frame_hw.0 as f64, frame_hw.1 as f64);
    let (bh, bw) = (box_hw.0 as f64, box_hw.1 as f64);
    let n = active.len().max(1) as f64;
    let max_x = fw - bw - 2.0;
    let max_y = fh - bh - 2.0;
    let speed = rng.random_range(1.6..2.4);

    let (x_path, y_path): (Box<dyn Fn(f64) -> f64>, Box<dyn Fn(f64) -> f64>) = match pattern {
        MotionPattern::HorizontalSweep => {
            let span = (speed * (n - 1.0)).min(max_x - 1.0).max(0.0);
            let x0 = rng.random_range(1.0..(max_x - span).max(1.001));
            let y0 = rng.random_range(1.0..max_y.max(1.001));
            (Box::new(move |t| x0 + span * t / (n - 1.0).max(1.0)), Box::new(move |_| y0))
        }
        MotionPattern::VerticalSweep => {
            let span = (speed * (n - 1.0)).min(max_y - 1.0).max(0.0);
            let x0 = rng.random_range(1.0..max_x.max(1.001));
            let y0 = rng.random_range(1.0..(max_y - span).max(1.001));
            (Box::new(move |_| x0), Box::new(move |t| y0 + span * t / (n - 1.0).max(1.0)))
        }
        MotionPattern::Diagonal => {
            let span_x = (speed * (n - 1.0) * 0.8).min(max_x - 1.0).max(0.0);
            let span_y = (speed * (n - 1.0) * 0.8).min(max_y - 1.0).max(0.0);
            let x0 = rng.random_range(1.0..(max_x - span_x).max(1.001));
            let y0 = rng.random_range(1.0..(max_y - span_y).max(1.001));
            (
                Box::new(move |t| x0 + span_x * t / (n - 1.0).max(1.0)),
                Box::new(move |t| y0 + span_y * t / (n - 1.0).max(1.0)),
            )
        }
        MotionPattern::Oscillation => {
            let amp = rng.random_range(6.0..(max_x / 2.0 - 1.0).max(6.001));
            let cx = rng.random_range((amp + 1.0)..(max_x - amp).max(amp + 1.001));
            let y0 = rng.random_range(1.0..max_y.max(1.001));
            let period = rng.random_range(10.0..16.0);
            (
                Box::new(move |t| cx + amp * (std::f64::consts::TAU * t * (n - 1.0).max(1.0) / period / (n - 1.0).max(1.0)).sin()),
                Box::new(move |_| y0),
            )
        }
    };

    (0..total)
        .map(|t| {
            if active.contains(&t) {
                let tt = (t - active.start) as f64;
                let x = x_path(tt).round().clamp(0.0, max_x + 1.0);
                let y = y_path(tt).round().clamp(0.0, max_y + 1.0);
                Some((x as i64, y as i64))
            } else {
                None
            }
        })
        .collect()
}

/// Circular path for distractors; matches no class pattern.
fn distractor_positions(
    rng: &mut impl Rng,
    total: usize,
    active: impl Fn(usize) -> bool,
    frame_hw: (usize, usize),
    box_hw: (usize, usize),
) -> Vec<Option<(i64, i64)>> {
    let (fh, fw) = (frame_hw.0 as f64, frame_hw.1 as f64);
    let (bh, bw) = (box_hw.0 as f64, box_hw.1 as f64);
    let r = rng.random_range(5.0..10.0);
    let cx = rng.random_range((r + 1.0)..(fw - bw - r - 1.0).max(r + 1.001));
    let cy = rng.random_range((r + 1.0)..(fh - bh - r - 1.0).max(r + 1.001));
    let omega = rng.random_range(0.35..0.6);
    let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
    (0..total)
        .map(|t| {
            if active(t) {
                let th = theta0 + omega * t as f64;
                let x = (cx + r * th.cos()).round().clamp(0.0, fw - bw);
                let y = (cy + r * th.sin()).round().clamp(0.0, fh - bh);
                Some((x as i64, y as i64))
            } else {
                None
            }
        })
        .collect()
}

fn generate_one(spec: &SynthSpec, index: usize) -> SynthVideo {
    let mut rng = substream_indexed(spec.seed, "synth-video", index as u64);
    let t_n = spec.frames_per_video;
    let (h_n, w_n) = (spec.frame_height, spec.frame_width);
    let id = format!("v{index:04}");

    let mut frames = FeatureCube::zeros(3, t_n, h_n, w_n);
    for v in frames.data_mut().iter_mut() {
        *v = 0.5 + spec.noise_level * rng.random_range(-1.0..1.0);
    }

    let class = rng.random_range(1..=spec.num_classes);
    let bw = rng.random_range(14..=26.min(w_n / 2));
    let bh = rng.random_range(14..=26.min(h_n / 2));

    // action segment: whole video when trimmed; an inner window when untrimmed
    let active = if spec.untrimmed {
        let len = rng.random_range((t_n / 4).max(spec.clip_len)..=(t_n / 2).max(spec.clip_len + 1));
        let start = rng.random_range((t_n / 8)..=(t_n - len - t_n / 8).max(t_n / 8));
        start..(start + len)
    } else {
        0..t_n
    };

    let positions = action_positions(
        &mut rng,
        class_pattern(class),
        t_n,
        active.clone(),
        (h_n, w_n),
        (bh, bw),
    );
    let action = Sprite {
        positions: positions.clone(),
        w: bw,
        h: bh,
        colors: sprite_colors(&mut rng),
        phase: rng.random_range(0..2),
    };

    if spec.untrimmed && rng.random::<f64>() < spec.distractor_rate {
        let dw = rng.random_range(14..=26.min(w_n / 2));
        let dh = rng.random_range(14..=26.min(h_n / 2));
        let act = active.clone();
        let dpos = distractor_positions(
            &mut rng,
            t_n,
            |t| !act.contains(&t),
            (h_n, w_n),
            (dh, dw),
        );
        let distractor = Sprite {
            positions: dpos,
            w: dw,
            h: dh,
            colors: sprite_colors(&mut rng),
            phase: rng.random_range(0..2),
        };
        render_sprite(&mut frames, &distractor);
    }
    render_sprite(&mut frames, &action);

    let boxes: Vec<Option<Box2D>> = positions
        .iter()
        .map(|p| {
            p.map(|(x, y)| {
                Box2D::new(
                    x as f64,
                    y as f64,
                    x as f64 + bw as f64,
                    y as f64 + bh as f64,
                )
            })
        })
        .collect();

    SynthVideo {
        id: id.clone(),
        frames,
        annotation: VideoAnnotation {
            video_id: id,
            class_label: class,
            frames: boxes,
        },
    }
}

/// Generates the whole dataset, one RNG substream per video, deterministic
/// under the spec seed and independent of thread count.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    if spec.num_classes == 0 || spec.num_classes > PATTERNS.len() {
        return Err(TcnnError::InvalidArgument(format!(
            "num_classes must be 1..={}, got {}",
            PATTERNS.len(),
            spec.num_classes
        )));
    }
    if spec.frame_height < 32 || spec.frame_width < 32 {
        return Err(TcnnError::InvalidArgument(
            "frame size too small for the minimum box".into(),
        ));
    }
    if spec.frames_per_video == 0 {
        return Err(TcnnError::InvalidArgument("frames_per_video must be >= 1".into()));
    }
    let spec_ref = spec.clone();
    let work = spec.num_videos * spec.frames_per_video * spec.frame_height * spec.frame_width;
    Ok(exec::map_indexed(spec.num_videos, work, move |i| {
        generate_one(&spec_ref, i)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// Stride-1 overlapping clips (training).
    TrainOverlapping,
    /// Non-overlapping clips, the last zero-padded (testing).
    TestNonOverlapping,
}

/// An 8-frame clip cut from a video; `start_frame` maps clip frames back to
/// video frames, and `valid_frames` counts the unpadded ones.
#[derive(Debug, Clone)]
pub struct Clip {
    pub start_frame: usize,
    pub valid_frames: usize,
    pub frames: FeatureCube,
}

/// Cuts one clip of `clip_len` frames starting at `start`, zero-padding past
/// the end of the video.
pub fn cut_clip(video: &FeatureCube, start: usize, clip_len: usize) -> Clip {
    let (c, t_n, h_n, w_n) = video.dims();
    let valid = clip_len.min(t_n.saturating_sub(start));
    let mut frames = FeatureCube::zeros(c, clip_len, h_n, w_n);
    for ch in 0..c {
        for f in 0..valid {
            let src = video.frame(ch, start + f);
            let dst = frames.index(ch, f, 0, 0);
            frames.data_mut()[dst..dst + h_n * w_n].copy_from_slice(src);
        }
    }
    Clip {
        start_frame: start,
        valid_frames: valid,
        frames,
    }
}

/// Divides a video into fixed-length clips. Videos shorter than one clip
/// are zero-padded to a single clip in both modes.
pub fn clip_divide(video: &FeatureCube, clip_len: usize, mode: ClipMode) -> Result<Vec<Clip>> {
    let (_, t_n, _, _) = video.dims();
    if t_n == 0 {
        return Err(TcnnError::InvalidArgument("empty video".into()));
    }
    let cut = |start: usize| -> Clip { cut_clip(video, start, clip_len) };
    let mut clips = Vec::new();
    match mode {
        ClipMode::TrainOverlapping => {
            if t_n < clip_len {
                clips.push(cut(0));
            } else {
                for start in 0..=(t_n - clip_len) {
                    clips.push(cut(start));
                }
            }
        }
        ClipMode::TestNonOverlapping => {
            let n = t_n.div_ceil(clip_len);
            for i in 0..n {
                clips.push(cut(i * clip_len));
            }
        }
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            num_videos: 4,
            frames_per_video: 20,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = tiny_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.frames.data(), y.frames.data());
            assert_eq!(x.annotation, y.annotation);
        }
        let mut spec2 = tiny_spec();
        spec2.seed = 1;
        let c = generate(&spec2).unwrap();
        assert!(a[0].frames.data() != c[0].frames.data());
    }

    #[test]
    fn boxes_stay_inside_frame() {
        let mut spec = tiny_spec();
        spec.num_videos = 10;
        spec.untrimmed = true;
        spec.frames_per_video = 40;
        for v in generate(&spec).unwrap() {
            for b in v.annotation.frames.iter().flatten() {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
                assert!(b.x2 <= spec.frame_width as f64);
                assert!(b.y2 <= spec.frame_height as f64);
                assert!(b.area() > 0.0);
            }
        }
    }

    #[test]
    fn class_motion_matches_pattern() {
        let mut spec = tiny_spec();
        spec.num_videos = 30;
        spec.frames_per_video = 24;
        for v in generate(&spec).unwrap() {
            let centers: Vec<(f64, f64)> = v
                .annotation
                .frames
                .iter()
                .flatten()
                .map(|b| b.center())
                .collect();
            let dx: f64 = centers.last().unwrap().0 - centers[0].0;
            let dy: f64 = centers.last().unwrap().1 - centers[0].1;
            match class_pattern(v.annotation.class_label) {
                MotionPattern::HorizontalSweep => {
                    assert!(dx > 5.0, "horizontal sweep must move right, dx={dx}");
                    assert!(dy.abs() < 1.5);
                }
                MotionPattern::VerticalSweep => {
                    assert!(dy > 5.0, "vertical sweep must move down, dy={dy}");
                    assert!(dx.abs() < 1.5);
                }
                MotionPattern::Diagonal => {
                    assert!(dx > 3.0 && dy > 3.0, "diagonal moves both, {dx},{dy}");
                }
                MotionPattern::Oscillation => {
                    // net x displacement small relative to the amplitude
                    let max_x = centers.iter().map(|c| c.0).fold(f64::MIN, f64::max);
                    let min_x = centers.iter().map(|c| c.0).fold(f64::MAX, f64::min);
                    assert!(max_x - min_x > 5.0);
                    assert!(dy.abs() < 1.5);
                }
            }
        }
    }

    #[test]
    fn untrimmed_has_background_frames() {
        let mut spec = tiny_spec();
        spec.untrimmed = true;
        spec.frames_per_video = 32;
        spec.num_videos = 6;
        for v in generate(&spec).unwrap() {
            let annotated = v.annotation.frames.iter().filter(|b| b.is_some()).count();
            assert!(annotated >= spec.clip_len);
            assert!(annotated < spec.frames_per_video);
        }
    }

    #[test]
    fn train_clip_count_is_t_minus_seven() {
        let video = FeatureCube::zeros(3, 40, 16, 16);
        let clips = clip_divide(&video, 8, ClipMode::TrainOverlapping).unwrap();
        assert_eq!(clips.len(), 33);
        assert!(clips.iter().all(|c| c.valid_frames == 8));
    }

    #[test]
    fn forty_frame_video_gives_five_test_clips() {
        let video = FeatureCube::zeros(3, 40, 16, 16);
        let clips = clip_divide(&video, 8, ClipMode::TestNonOverlapping).unwrap();
        assert_eq!(clips.len(), 5);
        assert!(clips.iter().all(|c| c.valid_frames == 8));
    }

    #[test]
    fn ten_frame_video_pads_second_clip() {
        let mut video = FeatureCube::zeros(3, 10, 4, 4);
        for v in video.data_mut().iter_mut() {
            *v = 1.0;
        }
        let clips = clip_divide(&video, 8, ClipMode::TestNonOverlapping).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[1].valid_frames, 2);
        // 6 zero frames at the end
        for f in 2..8 {
            assert!(clips[1].frames.frame(0, f).iter().all(|&v| v == 0.0));
        }
        for f in 0..2 {
            assert!(clips[1].frames.frame(0, f).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn eight_frame_video_single_train_clip() {
        let video = FeatureCube::zeros(3, 8, 4, 4);
        let clips = clip_divide(&video, 8, ClipMode::TrainOverlapping).unwrap();
        assert_eq!(clips.len(), 1);
    }

    #[test]
    fn short_video_padded_in_both_modes() {
        let video = FeatureCube::zeros(3, 5, 4, 4);
        for mode in [ClipMode::TrainOverlapping, ClipMode::TestNonOverlapping] {
            let clips = clip_divide(&video, 8, mode).unwrap();
            assert_eq!(clips.len(), 1);
            assert_eq!(clips[0].valid_frames, 5);
        }
    }

    #[test]
    fn test_clips_reassemble_to_original() {
        let mut spec = tiny_spec();
        spec.frames_per_video = 19;
        let v = &generate(&spec).unwrap()[0];
        let clips = clip_divide(&v.frames, 8, ClipMode::TestNonOverlapping).unwrap();
        let mut rebuilt = FeatureCube::zeros(3, 19, spec.frame_height, spec.frame_width);
        for clip in &clips {
            for ch in 0..3 {
                for f in 0..clip.valid_frames {
                    let src = clip.frames.frame(ch, f);
                    let dst = rebuilt.index(ch, clip.start_frame + f, 0, 0);
                    rebuilt.data_mut()[dst..dst + src.len()].copy_from_slice(src);
                }
            }
        }
        assert_eq!(rebuilt.data(), v.frames.data());
    }
}
