//! Text file formats: annotations, detections, anchors, key=value pipeline
//! configuration and the loss/metric CSVs. All writers are deterministic
//! (fixed ordering and number formatting) and atomic (temp file + rename),
//! so write -> read -> write round-trips byte-identically.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::anchors::{AnchorBox, AnchorSet};
use crate::detection::Detection;
use crate::error::{Result, TcnnError};
use crate::eval::{MapResult, RocResult};
use crate::geom::Box2D;
use crate::net::{NetConfig, SkipSource};
use crate::synth::VideoAnnotation;
use crate::training::{LossRecord, TrainConfig};

pub fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, contents).map_err(|e| TcnnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TcnnError::io(path, e))?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> TcnnError {
    TcnnError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// annotations: "video_id frame_idx class_id x1 y1 x2 y2" | "video_id frame_idx -1"
// ---------------------------------------------------------------------------

pub fn write_annotations(path: &Path, annotations: &[VideoAnnotation]) -> Result<()> {
    let mut sorted: Vec<&VideoAnnotation> = annotations.iter().collect();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut out = String::new();
    for a in sorted {
        for (f, b) in a.frames.iter().enumerate() {
            match b {
                Some(b) => writeln!(
                    out,
                    "{} {} {} {:.2} {:.2} {:.2} {:.2}",
                    a.video_id, f, a.class_label, b.x1, b.y1, b.x2, b.y2
                )
                .unwrap(),
                None => writeln!(out, "{} {} -1", a.video_id, f).unwrap(),
            }
        }
    }
    atomic_write(path, &out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<VideoAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| TcnnError::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut frames: std::collections::BTreeMap<String, Vec<(usize, Option<Box2D>, usize)>> =
        Default::default();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 && toks.len() != 7 {
            return Err(parse_err(path, ln + 1, "expected 3 or 7 tokens"));
        }
        let video = toks[0].to_string();
        let frame: usize = toks[1]
            .parse()
            .map_err(|_| parse_err(path, ln + 1, "bad frame index"))?;
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| parse_err(path, ln + 1, format!("bad number '{s}'")))
        };
        let entry = if toks.len() == 3 {
            if toks[2] != "-1" {
                return Err(parse_err(path, ln + 1, "background line must end in -1"));
            }
            (frame, None, 0usize)
        } else {
            let class: usize = toks[2]
                .parse()
                .map_err(|_| parse_err(path, ln + 1, "bad class id"))?;
            let b = Box2D::new(num(toks[3])?, num(toks[4])?, num(toks[5])?, num(toks[6])?);
            if !b.is_valid() {
                return Err(parse_err(path, ln + 1, "invalid box"));
            }
            (frame, Some(b), class)
        };
        if !frames.contains_key(&video) {
            order.push(video.clone());
        }
        frames.entry(video).or_default().push(entry);
    }
    let mut out = Vec::new();
    for video in order {
        let mut rows = frames.remove(&video).unwrap();
        rows.sort_by_key(|r| r.0);
        for (i, r) in rows.iter().enumerate() {
            if r.0 != i {
                return Err(TcnnError::Format {
                    path: path.to_path_buf(),
                    msg: format!("video {video}: frame indices not contiguous at {}", r.0),
                });
            }
        }
        let class = rows
            .iter()
            .filter(|r| r.1.is_some())
            .map(|r| r.2)
            .max()
            .unwrap_or(0);
        out.push(VideoAnnotation {
            video_id: video,
            class_label: class,
            frames: rows.into_iter().map(|r| r.1).collect(),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// detections: header "video_id class_id confidence n_frames",
// then n_frames lines "frame_idx x1 y1 x2 y2"
// ---------------------------------------------------------------------------

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(b.confidence.partial_cmp(&a.confidence).unwrap())
            .then(a.class_id.cmp(&b.class_id))
    });
    let mut out = String::new();
    for d in sorted {
        writeln!(
            out,
            "{} {} {:.6} {}",
            d.video_id,
            d.class_id,
            d.confidence,
            d.frames.len()
        )
        .unwrap();
        for (f, b) in &d.frames {
            writeln!(out, "{} {:.3} {:.3} {:.3} {:.3}", f, b.x1, b.y1, b.x2, b.y2).unwrap();
        }
    }
    atomic_write(path, &out)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| TcnnError::io(path, e))?;
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((ln, line)) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(parse_err(path, ln + 1, "expected detection header"));
        }
        let video_id = toks[0].to_string();
        let class_id: usize = toks[1]
            .parse()
            .map_err(|_| parse_err(path, ln + 1, "bad class id"))?;
        let confidence: f64 = toks[2]
            .parse()
            .map_err(|_| parse_err(path, ln + 1, "bad confidence"))?;
        let n: usize = toks[3]
            .parse()
            .map_err(|_| parse_err(path, ln + 1, "bad frame count"))?;
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            let (fl, fline) = lines
                .next()
                .ok_or_else(|| parse_err(path, ln + 1, "truncated detection"))?;
            let ft: Vec<&str> = fline.split_whitespace().collect();
            if ft.len() != 5 {
                return Err(parse_err(path, fl + 1, "expected frame line"));
            }
            let frame: usize = ft[0]
                .parse()
                .map_err(|_| parse_err(path, fl + 1, "bad frame index"))?;
            let mut v = [0.0f64; 4];
            for (i, s) in ft[1..].iter().enumerate() {
                v[i] = s
                    .parse()
                    .map_err(|_| parse_err(path, fl + 1, format!("bad number '{s}'")))?;
            }
            frames.push((frame, Box2D::new(v[0], v[1], v[2], v[3])));
        }
        out.push(Detection {
            video_id,
            class_id,
            confidence,
            frames,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// anchors: k lines "width height", 6 decimal places
// ---------------------------------------------------------------------------

pub fn write_anchors(path: &Path, set: &AnchorSet) -> Result<()> {
    let mut out = String::new();
    for a in &set.anchors {
        writeln!(out, "{:.6} {:.6}", a.width, a.height).unwrap();
    }
    atomic_write(path, &out)
}

pub fn read_anchors(path: &Path) -> Result<AnchorSet> {
    let text = fs::read_to_string(path).map_err(|e| TcnnError::io(path, e))?;
    let mut anchors = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(path, ln + 1, "expected 'width height'"));
        }
        let w: f64 = toks[0]
            .parse()
            .map_err(|_| parse_err(path, ln + 1, "bad width"))?;
        let h: f64 = toks[1]
            .parse()
            .map_err(|_| parse_err(path, ln + 1, "bad height"))?;
        if w <= 0.0 || h <= 0.0 {
            return Err(parse_err(path, ln + 1, "anchor dims must be positive"));
        }
        anchors.push(AnchorBox {
            width: w,
            height: h,
        });
    }
    if anchors.is_empty() {
        return Err(TcnnError::Format {
            path: path.to_path_buf(),
            msg: "empty anchor file".into(),
        });
    }
    Ok(AnchorSet { anchors })
}

// ---------------------------------------------------------------------------
// pipeline configuration: plain key=value text
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// "desk" or "paper".
    pub scale: String,
    pub num_classes: usize,
    pub skip_source: SkipSource,
    pub actionness_threshold: f64,
    pub nms_threshold: f64,
    pub alphas: Vec<f64>,
    /// Linked sequences kept per video.
    pub top_k: usize,
    /// Tube proposals kept per clip before linking.
    pub proposals_per_clip: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub anchors_file: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scale: "desk".into(),
            num_classes: 3,
            skip_source: SkipSource::Conv2,
            actionness_threshold: 0.5,
            nms_threshold: 0.3,
            alphas: vec![0.2, 0.5],
            top_k: 40,
            proposals_per_clip: 40,
            seed: 0,
            train: TrainConfig::default(),
            data_dir: None,
            anchors_file: None,
            checkpoint_dir: None,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    /// Architecture for the configured scale preset.
    pub fn net_config(&self) -> Result<NetConfig> {
        let mut cfg = match self.scale.as_str() {
            "desk" => NetConfig::desk_60x80(self.num_classes),
            "paper" => NetConfig::paper_300x400(self.num_classes),
            other => {
                return Err(TcnnError::Config(format!(
                    "unknown scale preset '{other}' (use desk|paper)"
                )))
            }
        };
        cfg.skip_source = self.skip_source;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        writeln!(s, "scale={}", self.scale).unwrap();
        writeln!(s, "num_classes={}", self.num_classes).unwrap();
        writeln!(s, "skip_source={}", self.skip_source).unwrap();
        writeln!(s, "actionness_threshold={}", self.actionness_threshold).unwrap();
        writeln!(s, "nms_threshold={}", self.nms_threshold).unwrap();
        writeln!(
            s,
            "alphas={}",
            self.alphas
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(",")
        )
        .unwrap();
        writeln!(s, "top_k={}", self.top_k).unwrap();
        writeln!(s, "proposals_per_clip={}", self.proposals_per_clip).unwrap();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "lr_initial={}", t.lr_initial).unwrap();
        writeln!(s, "lr_after={}", t.lr_after).unwrap();
        writeln!(s, "lr_drop_batches={}", t.lr_drop_batches).unwrap();
        writeln!(s, "total_batches={}", t.total_batches).unwrap();
        writeln!(s, "recog_batches={}", t.recog_batches).unwrap();
        writeln!(s, "clips_per_batch={}", t.clips_per_batch).unwrap();
        writeln!(s, "momentum={}", t.momentum).unwrap();
        writeln!(s, "mining={}", t.mining).unwrap();
        writeln!(s, "hard_negative_pool={}", t.hard_negative_pool).unwrap();
        writeln!(s, "samples_per_clip={}", t.samples_per_clip).unwrap();
        for (key, v) in [
            ("data_dir", &self.data_dir),
            ("anchors_file", &self.anchors_file),
            ("checkpoint_dir", &self.checkpoint_dir),
            ("output_dir", &self.output_dir),
        ] {
            if let Some(p) = v {
                writeln!(s, "{key}={}", p.display()).unwrap();
            }
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_text())
    }

    pub fn read(path: &Path) -> Result<PipelineConfig> {
        let text = fs::read_to_string(path).map_err(|e| TcnnError::io(path, e))?;
        let mut cfg = PipelineConfig::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(path, ln + 1, "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| parse_err(path, ln + 1, format!("bad {what} '{value}'"));
            match key {
                "scale" => cfg.scale = value.to_string(),
                "num_classes" => cfg.num_classes = value.parse().map_err(|_| bad("count"))?,
                "skip_source" => cfg.skip_source = value.parse()?,
                "actionness_threshold" => {
                    cfg.actionness_threshold = value.parse().map_err(|_| bad("number"))?
                }
                "nms_threshold" => cfg.nms_threshold = value.parse().map_err(|_| bad("number"))?,
                "alphas" => {
                    cfg.alphas = value
                        .split(',')
                        .map(|a| a.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<f64>, _>>()
                        .map_err(|_| bad("alpha list"))?
                }
                "top_k" => cfg.top_k = value.parse().map_err(|_| bad("count"))?,
                "proposals_per_clip" => {
                    cfg.proposals_per_clip = value.parse().map_err(|_| bad("count"))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "lr_initial" => cfg.train.lr_initial = value.parse().map_err(|_| bad("number"))?,
                "lr_after" => cfg.train.lr_after = value.parse().map_err(|_| bad("number"))?,
                "lr_drop_batches" => {
                    cfg.train.lr_drop_batches = value.parse().map_err(|_| bad("count"))?
                }
                "total_batches" => {
                    cfg.train.total_batches = value.parse().map_err(|_| bad("count"))?
                }
                "recog_batches" => {
                    cfg.train.recog_batches = value.parse().map_err(|_| bad("count"))?
                }
                "clips_per_batch" => {
                    cfg.train.clips_per_batch = value.parse().map_err(|_| bad("count"))?
                }
                "momentum" => cfg.train.momentum = value.parse().map_err(|_| bad("number"))?,
                "mining" => cfg.train.mining = value.parse().map_err(|_| bad("bool"))?,
                "hard_negative_pool" => {
                    cfg.train.hard_negative_pool = value.parse().map_err(|_| bad("count"))?
                }
                "samples_per_clip" => {
                    cfg.train.samples_per_clip = value.parse().map_err(|_| bad("count"))?
                }
                "data_dir" => cfg.data_dir = Some(PathBuf::from(value)),
                "anchors_file" => cfg.anchors_file = Some(PathBuf::from(value)),
                "checkpoint_dir" => cfg.checkpoint_dir = Some(PathBuf::from(value)),
                "output_dir" => cfg.output_dir = Some(PathBuf::from(value)),
                other => return Err(parse_err(path, ln + 1, format!("unknown key '{other}'"))),
            }
        }
        if cfg.train.lr_after >= cfg.train.lr_initial {
            return Err(TcnnError::Config(
                "lr_after must be smaller than lr_initial".into(),
            ));
        }
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// CSV outputs
// ---------------------------------------------------------------------------

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = String::from("stage,batch,loss,lr\n");
    for r in records {
        writeln!(out, "{},{},{:.8},{}", r.stage.name(), r.batch, r.loss, r.lr).unwrap();
    }
    atomic_write(path, &out)
}

pub fn write_ap_csv(path: &Path, name: &str, result: &MapResult) -> Result<()> {
    let mut out = String::from("metric,class,ap,num_gt\n");
    for c in &result.per_class {
        writeln!(out, "{name},{},{:.9},{}", c.class_id, c.ap, c.num_gt).unwrap();
    }
    writeln!(out, "{name},mean,{:.9},", result.mean).unwrap();
    atomic_write(path, &out)
}

pub fn write_pr_csv(path: &Path, result: &MapResult) -> Result<()> {
    let mut out = String::from("class,threshold,precision,recall\n");
    for c in &result.per_class {
        for &(t, r, p) in &c.curve {
            writeln!(out, "{},{:.9},{:.9},{:.9}", c.class_id, t, p, r).unwrap();
        }
    }
    atomic_write(path, &out)
}

pub fn write_roc_csv(path: &Path, roc: &RocResult) -> Result<()> {
    let mut out = String::from("threshold,tpr,fpr\n");
    for &(t, fpr, tpr) in &roc.points {
        writeln!(out, "{:.9},{:.9},{:.9}", t, tpr, fpr).unwrap();
    }
    atomic_write(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    #[test]
    fn annotations_round_trip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_videos: 3,
            frames_per_video: 12,
            untrimmed: true,
            ..SynthSpec::default()
        };
        let videos = generate(&spec).unwrap();
        let annots: Vec<VideoAnnotation> =
            videos.iter().map(|v| v.annotation.clone()).collect();
        let p1 = dir.path().join("a.txt");
        write_annotations(&p1, &annots).unwrap();
        let back = read_annotations(&p1).unwrap();
        assert_eq!(back.len(), annots.len());
        let p2 = dir.path().join("b.txt");
        write_annotations(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn detections_round_trip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let dets = vec![
            Detection {
                video_id: "v0001".into(),
                class_id: 2,
                confidence: 0.75,
                frames: (0..8)
                    .map(|f| (f, Box2D::new(1.25, 2.5, 11.75, 12.0)))
                    .collect(),
            },
            Detection {
                video_id: "v0001".into(),
                class_id: 1,
                confidence: 0.9,
                frames: (8..16).map(|f| (f, Box2D::new(0.0, 0.0, 5.0, 5.0))).collect(),
            },
        ];
        let p1 = dir.path().join("d.txt");
        write_detections(&p1, &dets).unwrap();
        let back = read_detections(&p1).unwrap();
        assert_eq!(back.len(), 2);
        // sorted by (video, confidence desc)
        assert_eq!(back[0].confidence, 0.9);
        let p2 = dir.path().join("d2.txt");
        write_detections(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn anchors_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = AnchorSet {
            anchors: vec![
                AnchorBox {
                    width: 0.123456,
                    height: 0.2,
                },
                AnchorBox {
                    width: 0.5,
                    height: 0.75,
                },
            ],
        };
        let p1 = dir.path().join("anchors.txt");
        write_anchors(&p1, &set).unwrap();
        let text = fs::read_to_string(&p1).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("0.123456 0.200000"));
        let back = read_anchors(&p1).unwrap();
        let p2 = dir.path().join("anchors2.txt");
        write_anchors(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.num_classes = 4;
        cfg.alphas = vec![0.1, 0.25, 0.5];
        cfg.data_dir = Some(PathBuf::from("/tmp/data"));
        let p1 = dir.path().join("cfg.txt");
        cfg.write(&p1).unwrap();
        let back = PipelineConfig::read(&p1).unwrap();
        assert_eq!(back, cfg);
        let p2 = dir.path().join("cfg2.txt");
        back.write(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let badp = dir.path().join("bad.txt");
        fs::write(&badp, "lr_initial=0.0001\nlr_after=0.01\n").unwrap();
        assert!(PipelineConfig::read(&badp).is_err());
        fs::write(&badp, "nonsense_key=1\n").unwrap();
        assert!(PipelineConfig::read(&badp).is_err());
    }

    #[test]
    fn net_config_follows_scale_and_skip() {
        let mut cfg = PipelineConfig::default();
        cfg.scale = "paper".into();
        cfg.skip_source = SkipSource::Conv3;
        let net = cfg.net_config().unwrap();
        assert_eq!(net.frame_height, 300);
        assert_eq!(net.skip_source, SkipSource::Conv3);
        cfg.scale = "nope".into();
        assert!(cfg.net_config().is_err());
    }
}
