//! On-disk formats: MOT-style CSV tables with a frame-size header line,
//! the TOML run configuration, the dataset directory layout, and P5
//! grayscale images for similarity maps. Boxes are stored in pixel units
//! in files and normalized to the unit frame in memory; frames are
//! 1-based in files and 0-based in memory.

use crate::assoc::{MatchConfig, TrackRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::loss::LossWeights;
use crate::net::{FeatureGrid, Matrix, ModelConfig};
use crate::synth::SceneConfig;
use crate::train::{read_tensor_file, write_tensor_file, ClipFrame, NamedTensor, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_FRAME_SIZE: (u32, u32) = (1000, 1000);

/// One CSV row; id -1 marks a detection without identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    pub frame: usize,
    pub id: i64,
    pub bbox: BBox,
    pub score: f64,
}

pub fn tracks_to_rows(table: &[TrackRecord]) -> Vec<MotRow> {
    table
        .iter()
        .map(|r| MotRow {
            frame: r.frame,
            id: r.id as i64,
            bbox: r.bbox,
            score: r.score,
        })
        .collect()
}

pub fn rows_to_tracks(rows: &[MotRow]) -> Result<Vec<TrackRecord>> {
    rows.iter()
        .map(|r| {
            if r.id < 0 {
                return Err(Error::MalformedInput(format!(
                    "identity-free row (id {}) in a track table at frame {}",
                    r.id, r.frame
                )));
            }
            Ok(TrackRecord {
                frame: r.frame,
                id: r.id as u64,
                bbox: r.bbox,
                score: r.score,
            })
        })
        .collect()
}

pub fn detections_to_rows(dets: &[Detection]) -> Vec<MotRow> {
    dets.iter()
        .map(|d| MotRow {
            frame: d.frame_index,
            id: -1,
            bbox: d.bbox,
            score: d.score,
        })
        .collect()
}

pub fn rows_to_detections(rows: &[MotRow]) -> Vec<Detection> {
    rows.iter()
        .map(|r| Detection {
            bbox: r.bbox,
            score: r.score,
            frame_index: r.frame,
        })
        .collect()
}

/// Write a table as `frame,id,left,top,width,height,score,-1,-1,-1` rows in
/// pixel units at six decimals, preceded by the `# size W H` header.
pub fn write_mot(path: &Path, rows: &[MotRow], size: (u32, u32)) -> Result<()> {
    let (w, h) = (size.0 as f64, size.1 as f64);
    let mut out = String::new();
    out.push_str(&format!("# size {} {}\n", size.0, size.1));
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},-1,-1,-1\n",
            r.frame + 1,
            r.id,
            r.bbox.left() * w,
            r.bbox.top() * h,
            r.bbox.w * w,
            r.bbox.h * h,
            r.score
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {what}: {s:?}"),
    })
}

pub fn read_mot(path: &Path) -> Result<(Vec<MotRow>, (u32, u32))> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::MalformedInput(
        "empty file: expected a `# size W H` header".into(),
    ))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "#" || parts[1] != "size" {
        return Err(Error::MalformedInput(format!(
            "first line must be `# size W H`, got {header:?}"
        )));
    }
    let size: (u32, u32) = (
        parse_field(parts[2], 1, "frame width")?,
        parse_field(parts[3], 1, "frame height")?,
    );
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::MalformedInput("frame size must be positive".into()));
    }
    let (fw, fh) = (size.0 as f64, size.1 as f64);

    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 10 comma-separated fields, got {}", fields.len()),
            });
        }
        let frame: usize = parse_field(fields[0], line, "frame")?;
        if frame == 0 {
            return Err(Error::Parse {
                line,
                msg: "frame numbers are 1-based".into(),
            });
        }
        let id: i64 = parse_field(fields[1], line, "id")?;
        let left: f64 = parse_field(fields[2], line, "left")?;
        let top: f64 = parse_field(fields[3], line, "top")?;
        let w: f64 = parse_field(fields[4], line, "width")?;
        let h: f64 = parse_field(fields[5], line, "height")?;
        let score: f64 = parse_field(fields[6], line, "score")?;
        if ![left, top, w, h, score].iter().all(|v| v.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: "non-finite box or score".into(),
            });
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("box size {w}x{h} must be positive"),
            });
        }
        rows.push(MotRow {
            frame: frame - 1,
            id,
            bbox: BBox::new((left + w / 2.0) / fw, (top + h / 2.0) / fh, w / fw, h / fh),
            score,
        });
    }
    Ok((rows, size))
}

/// Everything one experiment needs, as a single TOML document. Flags on
/// the command line override fields parsed from here.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub loss: LossWeights,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: String,
    pub checkpoint: String,
    pub output: String,
    pub log: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoint: "model.ckpt".into(),
            output: "out".into(),
            log: "train_log.csv".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        self.matching.validate()?;
        self.loss.validate()?;
        if self.model.d_feat != self.scene.d_feat {
            return Err(Error::Config(format!(
                "model reads {} feature channels but the scene renders {}",
                self.model.d_feat, self.scene.d_feat
            )));
        }
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn dump_config(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("run config serializes")
}

/// Dataset manifest written next to the sequence directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sequences: usize,
    pub frame_size: [u32; 2],
    pub scene: SceneConfig,
}

fn seq_dir(root: &Path, i: usize) -> std::path::PathBuf {
    root.join(format!("seq_{i:03}"))
}

/// Write one sequence: gt.csv, det.csv, and grids.bin (per-frame tensors
/// named frame_NNNN plus a stride scalar).
pub fn save_sequence(dir: &Path, frames: &[ClipFrame], size: (u32, u32)) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut gt_rows = Vec::new();
    let mut det_rows = Vec::new();
    let mut tensors = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        for (bbox, id) in &f.gt {
            gt_rows.push(MotRow {
                frame: i,
                id: *id as i64,
                bbox: *bbox,
                score: 1.0,
            });
        }
        det_rows.extend(detections_to_rows(&f.detections));
        if i == 0 {
            tensors.push(NamedTensor::new("stride", vec![1], vec![f.grid.stride])?);
        }
        tensors.push(NamedTensor::new(
            format!("frame_{i:04}"),
            vec![f.grid.height, f.grid.width, f.grid.d_feat],
            f.grid.data().to_vec(),
        )?);
    }
    write_mot(&dir.join("gt.csv"), &gt_rows, size)?;
    write_mot(&dir.join("det.csv"), &det_rows, size)?;
    write_tensor_file(&dir.join("grids.bin"), &tensors)?;
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<Vec<ClipFrame>> {
    let (gt_rows, _) = read_mot(&dir.join("gt.csv"))?;
    let (det_rows, _) = read_mot(&dir.join("det.csv"))?;
    let tensors = read_tensor_file(&dir.join("grids.bin"))?;
    let stride = tensors
        .iter()
        .find(|t| t.name == "stride")
        .ok_or_else(|| Error::MalformedInput("grids.bin lacks the stride tensor".into()))?
        .data[0];
    let mut grids = Vec::new();
    for t in &tensors {
        if !t.name.starts_with("frame_") {
            continue;
        }
        if t.dims.len() != 3 {
            return Err(Error::Shape(format!(
                "grid tensor {} has rank {}, expected 3",
                t.name,
                t.dims.len()
            )));
        }
        grids.push(FeatureGrid::from_data(
            t.dims[0],
            t.dims[1],
            t.dims[2],
            stride,
            t.data.clone(),
        )?);
    }
    let n = grids.len();
    let mut frames: Vec<ClipFrame> = grids
        .into_iter()
        .map(|grid| ClipFrame {
            grid,
            detections: Vec::new(),
            gt: Vec::new(),
        })
        .collect();
    for r in &det_rows {
        if r.frame >= n {
            return Err(Error::MalformedInput(format!(
                "detection in frame {} but the sequence has {n} grids",
                r.frame
            )));
        }
        frames[r.frame].detections.push(Detection {
            bbox: r.bbox,
            score: r.score,
            frame_index: r.frame,
        });
    }
    for r in &gt_rows {
        if r.frame >= n {
            return Err(Error::MalformedInput(format!(
                "gt box in frame {} but the sequence has {n} grids",
                r.frame
            )));
        }
        if r.id < 0 {
            return Err(Error::MalformedInput("gt rows need identities".into()));
        }
        frames[r.frame].gt.push((r.bbox, r.id as u64));
    }
    Ok(frames)
}

pub fn save_dataset(
    root: &Path,
    scene: &SceneConfig,
    seqs: &[Vec<ClipFrame>],
    size: (u32, u32),
) -> Result<()> {
    fs::create_dir_all(root)?;
    let manifest = DatasetManifest {
        sequences: seqs.len(),
        frame_size: [size.0, size.1],
        scene: scene.clone(),
    };
    fs::write(
        root.join("dataset.toml"),
        toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    for (i, frames) in seqs.iter().enumerate() {
        save_sequence(&seq_dir(root, i), frames, size)?;
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Vec<ClipFrame>>)> {
    let manifest: DatasetManifest =
        toml::from_str(&fs::read_to_string(root.join("dataset.toml"))?)
            .map_err(|e| Error::Config(e.to_string()))?;
    let mut seqs = Vec::with_capacity(manifest.sequences);
    for i in 0..manifest.sequences {
        seqs.push(load_sequence(&seq_dir(root, i))?);
    }
    Ok((manifest, seqs))
}

/// Binary 8-bit PGM with min-max contrast stretch; a constant matrix
/// renders black.
pub fn write_pgm(path: &Path, m: &Matrix) -> Result<()> {
    let (lo, hi) = m
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(32 + m.rows() * m.cols());
    write!(out, "P5\n{} {}\n255\n", m.cols(), m.rows())?;
    for &v in m.data() {
        let level = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
        out.push(level);
    }
    fs::write(path, out)?;
    Ok(())
}
