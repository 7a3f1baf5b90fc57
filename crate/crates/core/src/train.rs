//! Clip-based training. A clip of n frames runs through the decoder on a
//! single tape: frame one seeds track queries, later frames match against
//! them with the same two-stage assignment used at inference, and matched
//! object queries replace track queries as live graph nodes, so gradients
//! flow across frames. Also: ground-truth assignment, the ambiguity
//! filter, AdamW, and bit-exact named-tensor checkpoints.

use crate::assoc::{two_stage_match, MatchConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};
use crate::loss::{g_contrastive, g_refine_losses, LossWeights, PosMask};
use crate::net::{
    g_decoder_forward, g_encode_queries, g_weight_attention, FeatureGrid, GBox, GMat, ModelConfig,
    SimDecoderModel,
};
use crate::tape::{Seg, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ClipFrame {
    pub grid: FeatureGrid,
    pub detections: Vec<Detection>,
    pub gt: Vec<(BBox, u64)>,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<ClipFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Frames per clip.
    pub n: usize,
    /// Inclusive bounds for the random gap between consecutive clip frames.
    pub interval_range: [usize; 2],
    /// Detections need IoU strictly above this to inherit a gt identity.
    pub assign_iou: f64,
    /// Assigned queries whose refined box drops below this IoU are dropped
    /// from every loss term (kept at equality).
    pub tau_iou: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    /// Clips drawn per sequence per epoch.
    pub clips_per_seq: usize,
    /// Replace the final parameters with their mean over every step of the
    /// last this-many epochs (Polyak tail averaging); 0 keeps the last
    /// iterate.
    pub avg_tail_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 5,
            interval_range: [0, 3],
            assign_iou: 0.5,
            tau_iou: 0.5,
            epochs: 5,
            lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 2,
            weight_decay: 1e-4,
            clips_per_seq: 1,
            avg_tail_epochs: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("clip length must be at least 2".into()));
        }
        if self.interval_range[0] > self.interval_range[1] {
            return Err(Error::Config("interval_range must be lo <= hi".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.assign_iou) || !unit(self.tau_iou) {
            return Err(Error::Config("iou thresholds must lie in [0,1]".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.lr_decay_every == 0 || self.clips_per_seq == 0 {
            return Err(Error::Config(
                "epochs, lr_decay_every, and clips_per_seq must be positive".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0,1]".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            weight_decay,
        }
    }

    pub fn update(&mut self, data: &mut [f64], grads: &[f64]) -> Result<()> {
        if data.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} values and {} gradients",
                self.m.len(),
                data.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..data.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            data[i] -= self.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * data[i]);
        }
        Ok(())
    }
}

/// Sample a clip: n frames whose inter-frame gaps are i.i.d. uniform over
/// the interval range (or all equal to `fixed_interval`). Gap draws that
/// overrun the sequence are retried; if none fit the clip falls back to
/// minimum gaps. A sequence that cannot hold even the minimum-gap clip is
/// reported as too short so the caller can skip it.
pub fn sample_clip(
    seq: &[ClipFrame],
    cfg: &TrainConfig,
    fixed_interval: Option<usize>,
    rng: &mut ChaCha12Rng,
) -> Result<Clip> {
    cfg.validate()?;
    let n = cfg.n;
    let (lo, hi) = match fixed_interval {
        Some(g) => (g, g),
        None => (cfg.interval_range[0], cfg.interval_range[1]),
    };
    let min_span = n + (n - 1) * lo;
    if seq.len() < min_span {
        return Err(Error::SequenceTooShort);
    }
    let mut gaps = vec![lo; n - 1];
    for _ in 0..100 {
        let cand: Vec<usize> = (0..n - 1).map(|_| rng.random_range(lo..=hi)).collect();
        let span = n + cand.iter().sum::<usize>();
        if span <= seq.len() {
            gaps = cand;
            break;
        }
    }
    let span = n + gaps.iter().sum::<usize>();
    let start = rng.random_range(0..=seq.len() - span);
    let mut frames = Vec::with_capacity(n);
    let mut idx = start;
    frames.push(seq[idx].clone());
    for &g in &gaps {
        idx += g + 1;
        frames.push(seq[idx].clone());
    }
    Ok(Clip { frames })
}

/// Greedy one-to-one assignment of detections to ground-truth identities
/// by descending IoU; pairs must exceed the threshold strictly. Unassigned
/// detections are false positives (None).
pub fn assign_gt(
    dets: &[Detection],
    gt: &[(BBox, u64)],
    iou_thr: f64,
) -> Result<Vec<Option<u64>>> {
    let mut cands = Vec::new();
    for (di, d) in dets.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let v = iou(&d.bbox, &g.0)?;
            if v > iou_thr {
                cands.push((v, di, gi));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; dets.len()];
    let mut gt_used = vec![false; gt.len()];
    for (_, di, gi) in cands {
        if out[di].is_none() && !gt_used[gi] {
            out[di] = Some(gt[gi].1);
            gt_used[gi] = true;
        }
    }
    Ok(out)
}

/// Keep flags per query: a gt-assigned query whose refined box fell below
/// `tau_iou` against its gt box is dropped; unassigned queries stay.
pub fn filter_ambiguous(
    assigned: &[Option<u64>],
    refined: &[BBox],
    gt: &[(BBox, u64)],
    tau_iou: f64,
) -> Result<Vec<bool>> {
    if assigned.len() != refined.len() {
        return Err(Error::Shape(format!(
            "{} assignments for {} refined boxes",
            assigned.len(),
            refined.len()
        )));
    }
    let by_id: HashMap<u64, &BBox> = gt.iter().map(|(b, id)| (*id, b)).collect();
    let mut keep = Vec::with_capacity(assigned.len());
    for (i, a) in assigned.iter().enumerate() {
        match a {
            None => keep.push(true),
            Some(id) => {
                let target = by_id.get(id).ok_or_else(|| {
                    Error::MalformedInput(format!("assigned identity {id} absent from gt"))
                })?;
                keep.push(iou(&refined[i], target)? >= tau_iou);
            }
        }
    }
    Ok(keep)
}

/// Loss terms of one step, already weighted by their lambdas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub spatial: f64,
    pub temporal: f64,
    pub crossclip: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

fn gmat_select(g: &GMat, rows: &[usize], cols: &[usize]) -> GMat {
    let mut vars = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &c in cols {
            vars.push(g.at(r, c));
        }
    }
    GMat::new(rows.len(), cols.len(), vars)
}

struct TrainTrack {
    query: Seg,
    gt_id: Option<u64>,
    misses: u32,
}

/// One optimization step over one clip: forward every frame, carry track
/// queries through the inference matching path, accumulate all loss terms
/// on one tape, backprop, and apply AdamW. Gradients are zeroed before
/// returning.
pub fn train_step(
    model: &mut SimDecoderModel,
    clip: &Clip,
    weights: &LossWeights,
    cfg: &TrainConfig,
    match_cfg: &MatchConfig,
    optim: &mut OptimState,
) -> Result<LossBreakdown> {
    weights.validate()?;
    cfg.validate()?;
    if clip.frames.len() < 2 {
        return Err(Error::Config("a clip needs at least 2 frames".into()));
    }
    let mut t = Tape::with_capacity(1 << 18);
    let bound = model.bind(&mut t);

    let mut tracks: Vec<TrainTrack> = Vec::new();
    let mut spatial_terms: Vec<Var> = Vec::new();
    let mut temporal_terms: Vec<Var> = Vec::new();
    let mut buffers: Vec<Vec<(Seg, u64)>> = vec![Vec::new(); model.cfg.layers];
    let mut refine_pairs: Vec<(GBox, BBox)> = Vec::new();

    for frame in &clip.frames {
        if frame.detections.is_empty() {
            for tr in tracks.iter_mut() {
                tr.misses += 1;
            }
            tracks.retain(|tr| tr.misses <= match_cfg.max_misses);
            continue;
        }
        let assigned = assign_gt(&frame.detections, &frame.gt, cfg.assign_iou)?;
        let obj_rows = g_encode_queries(&mut t, model, bound, &frame.detections)?;
        let boxes: Vec<BBox> = frame.detections.iter().map(|d| d.bbox).collect();
        let track_rows: Vec<Seg> = tracks.iter().map(|tr| tr.query).collect();
        let layers =
            g_decoder_forward(&mut t, model, bound, obj_rows, &boxes, &track_rows, &frame.grid)?;
        let last = layers.last().expect("decoder has at least one layer");

        let refined_final: Vec<BBox> = last.refined.iter().map(|g| g.values(&t)).collect();
        let keep = filter_ambiguous(&assigned, &refined_final, &frame.gt, cfg.tau_iou)?;
        let kept: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
        let kept_ids: Vec<Option<u64>> = kept.iter().map(|&i| assigned[i]).collect();
        let track_ids: Vec<Option<u64>> = tracks.iter().map(|tr| tr.gt_id).collect();
        let all_tracks: Vec<usize> = (0..tracks.len()).collect();
        let gt_by_id: HashMap<u64, BBox> = frame.gt.iter().map(|(b, id)| (*id, *b)).collect();

        for (l, layer) in layers.iter().enumerate() {
            if !kept.is_empty() {
                let s = gmat_select(&layer.spatial.s, &kept, &kept);
                let w = gmat_select(&layer.spatial.w, &kept, &kept);
                let mask = PosMask::spatial(&kept_ids);
                spatial_terms.push(g_contrastive(&mut t, &s, &w, &mask, weights.gamma)?);
            }
            if !kept.is_empty() && !tracks.is_empty() {
                let s = gmat_select(&layer.temporal.s, &kept, &all_tracks);
                let w = gmat_select(&layer.temporal.w, &kept, &all_tracks);
                let mask = PosMask::from_ids(&kept_ids, &track_ids);
                temporal_terms.push(g_contrastive(&mut t, &s, &w, &mask, weights.gamma)?);
            }
            for &i in &kept {
                if let Some(id) = assigned[i] {
                    buffers[l].push((layer.queries[i], id));
                    refine_pairs.push((layer.refined[i], gt_by_id[&id]));
                }
            }
        }

        // Track-query carry-over uses the same matching as inference, on
        // final-layer similarity values.
        let s_vals = last.temporal.s.values(&t);
        let det_scores: Vec<f64> = frame.detections.iter().map(|d| d.score).collect();
        let outcome = two_stage_match(&s_vals, &det_scores, match_cfg)?;
        let mut matched = vec![false; tracks.len()];
        for &(r, c) in &outcome.matches {
            tracks[c].query = last.queries[r];
            // The query is replaced by the matched object's content, so the
            // identity label follows the content to keep supervision
            // consistent with what the track now holds.
            if assigned[r].is_some() {
                tracks[c].gt_id = assigned[r];
            }
            tracks[c].misses = 0;
            matched[c] = true;
        }
        for (c, tr) in tracks.iter_mut().enumerate() {
            if !matched[c] {
                tr.misses += 1;
            }
        }
        for &r in &outcome.unmatched_dets {
            tracks.push(TrainTrack {
                query: last.queries[r],
                gt_id: assigned[r],
                misses: 0,
            });
        }
        tracks.retain(|tr| tr.misses <= match_cfg.max_misses);
    }

    // Clip-level similarity among every buffered gt-matched query, per layer
    // with that layer's attention weights.
    let mut crossclip_terms: Vec<Var> = Vec::new();
    for (l, buf) in buffers.iter().enumerate() {
        if buf.len() < 2 {
            continue;
        }
        let q: Vec<Seg> = buf.iter().map(|&(s, _)| s).collect();
        let ids: Vec<Option<u64>> = buf.iter().map(|&(_, id)| Some(id)).collect();
        let pair = g_weight_attention(&mut t, &model.params, bound, model.wa_handles(l), &q, &q);
        let mask = PosMask::from_ids(&ids, &ids);
        crossclip_terms.push(g_contrastive(&mut t, &pair.s, &pair.w, &mask, weights.gamma)?);
    }

    let (l1_var, giou_var) = {
        let boxes: Vec<GBox> = refine_pairs.iter().map(|p| p.0).collect();
        let targets: Vec<BBox> = refine_pairs.iter().map(|p| p.1).collect();
        g_refine_losses(&mut t, &boxes, &targets)?
    };

    fn sum_terms(t: &mut Tape, terms: &[Var]) -> Var {
        if terms.is_empty() {
            t.leaf(0.0)
        } else {
            t.sum_vars(terms)
        }
    }
    let sp = sum_terms(&mut t, &spatial_terms);
    let tp = sum_terms(&mut t, &temporal_terms);
    let cc = sum_terms(&mut t, &crossclip_terms);
    let sp_w = t.mul_c(sp, weights.spatial);
    let tp_w = t.mul_c(tp, weights.temporal);
    let cc_w = t.mul_c(cc, weights.crossclip);
    let l1_w = t.mul_c(l1_var, weights.l1);
    let giou_w = t.mul_c(giou_var, weights.giou);
    let mut total = t.add(sp_w, tp_w);
    total = t.add(total, cc_w);
    total = t.add(total, l1_w);
    total = t.add(total, giou_w);

    let breakdown = LossBreakdown {
        spatial: t.val(sp_w),
        temporal: t.val(tp_w),
        crossclip: t.val(cc_w),
        l1: t.val(l1_w),
        giou: t.val(giou_w),
        total: t.val(total),
    };
    if !breakdown.total.is_finite() {
        model.params.zero_grads();
        return Err(Error::AbortStep(format!(
            "non-finite loss: spatial={} temporal={} crossclip={} l1={} giou={}",
            breakdown.spatial, breakdown.temporal, breakdown.crossclip, breakdown.l1,
            breakdown.giou
        )));
    }

    let grads = t.backward(total);
    model.params.grads.copy_from_slice(grads.seg(bound));
    optim.update(&mut model.params.data, &model.params.grads)?;
    model.params.zero_grads();
    Ok(breakdown)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub epoch: usize,
    pub spatial: f64,
    pub temporal: f64,
    pub crossclip: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    pub lr: f64,
}

impl TrainLogRow {
    pub fn csv_header() -> &'static str {
        "step,epoch,spatial,temporal,crossclip,l1,giou,total,lr"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            self.step,
            self.epoch,
            self.spatial,
            self.temporal,
            self.crossclip,
            self.l1,
            self.giou,
            self.total,
            self.lr
        )
    }
}

/// Full training loop: per epoch, one or more clips from every sequence in
/// order; the learning rate decays on the configured epoch schedule.
/// Too-short sequences are skipped.
pub fn train_model(
    model: &mut SimDecoderModel,
    dataset: &[Vec<ClipFrame>],
    weights: &LossWeights,
    cfg: &TrainConfig,
    match_cfg: &MatchConfig,
) -> Result<(OptimState, Vec<TrainLogRow>)> {
    cfg.validate()?;
    let mut optim = OptimState::new(model.params.len(), cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let tail_start = cfg.epochs.saturating_sub(cfg.avg_tail_epochs);
    let mut tail_sum = vec![0.0; model.params.len()];
    let mut tail_n = 0u64;
    for epoch in 0..cfg.epochs {
        optim.lr = cfg.lr * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32);
        for seq in dataset {
            for _ in 0..cfg.clips_per_seq {
                let clip = match sample_clip(seq, cfg, None, &mut rng) {
                    Ok(c) => c,
                    Err(Error::SequenceTooShort) => continue,
                    Err(e) => return Err(e),
                };
                let b = train_step(model, &clip, weights, cfg, match_cfg, &mut optim)?;
                if epoch >= tail_start {
                    for (a, &p) in tail_sum.iter_mut().zip(&model.params.data) {
                        *a += p;
                    }
                    tail_n += 1;
                }
                log.push(TrainLogRow {
                    step: optim.step,
                    epoch,
                    spatial: b.spatial,
                    temporal: b.temporal,
                    crossclip: b.crossclip,
                    l1: b.l1,
                    giou: b.giou,
                    total: b.total,
                    lr: optim.lr,
                });
            }
        }
    }
    if tail_n > 0 {
        for (p, &a) in model.params.data.iter_mut().zip(&tail_sum) {
            *p = a / tail_n as f64;
        }
    }
    Ok((optim, log))
}

pub const TENSOR_MAGIC: [u8; 4] = *b"AEDC";
pub const TENSOR_VERSION: u32 = 1;

/// One named tensor in the binary container format shared by checkpoints
/// and exported feature grids.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            dims,
            data,
        })
    }
}

pub fn write_tensor_file(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_ctx(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_ctx(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_ctx(&mut r, &mut magic, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != TENSOR_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        if name_len > 1 << 16 {
            return Err(Error::MalformedInput(format!(
                "tensor {i} name length {name_len} is implausible"
            )));
        }
        let mut name_buf = vec![0u8; name_len];
        read_exact_ctx(&mut r, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::MalformedInput(format!("tensor {i} name is not UTF-8")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::MalformedInput(format!(
                "tensor {name} rank {rank} is implausible"
            )));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, "dims")? as usize);
        }
        let len: usize = dims.iter().product();
        if len > 1 << 28 {
            return Err(Error::MalformedInput(format!(
                "tensor {name} payload of {len} values is implausible"
            )));
        }
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            read_exact_ctx(&mut r, &mut b, "tensor payload")?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(NamedTensor { name, dims, data });
    }
    Ok(out)
}

/// Serialize the model (and optionally the optimizer) as named tensors.
/// The model config rides along as a small header tensor so load can
/// rebuild the architecture.
pub fn save_checkpoint(
    model: &SimDecoderModel,
    optim: Option<&OptimState>,
    path: &Path,
) -> Result<()> {
    let c = &model.cfg;
    let mut tensors = vec![NamedTensor::new(
        "config",
        vec![6],
        vec![
            c.d_feat as f64,
            c.d_model as f64,
            c.layers as f64,
            c.heads as f64,
            c.points as f64,
            c.ffn_hidden as f64,
        ],
    )?];
    for meta in model.params.metas() {
        let id = model.params.find(&meta.name).expect("meta lists its own name");
        tensors.push(NamedTensor::new(
            meta.name.clone(),
            meta.dims.clone(),
            model.params.tensor(id).to_vec(),
        )?);
    }
    if let Some(o) = &optim {
        tensors.push(NamedTensor::new("optim.m", vec![o.m.len()], o.m.clone())?);
        tensors.push(NamedTensor::new("optim.v", vec![o.v.len()], o.v.clone())?);
        tensors.push(NamedTensor::new(
            "optim.state",
            vec![3],
            vec![o.step as f64, o.lr, o.weight_decay],
        )?);
    }
    write_tensor_file(path, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<(SimDecoderModel, Option<OptimState>)> {
    let tensors = read_tensor_file(path)?;
    let by_name: HashMap<&str, &NamedTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let config = by_name
        .get("config")
        .ok_or_else(|| Error::MalformedInput("checkpoint lacks a config tensor".into()))?;
    if config.data.len() != 6 {
        return Err(Error::Shape(format!(
            "config tensor holds {} values, expected 6",
            config.data.len()
        )));
    }
    let cfg = ModelConfig {
        d_feat: config.data[0] as usize,
        d_model: config.data[1] as usize,
        layers: config.data[2] as usize,
        heads: config.data[3] as usize,
        points: config.data[4] as usize,
        ffn_hidden: config.data[5] as usize,
    };
    let mut model = SimDecoderModel::new(cfg, 0)?;
    for i in 0..model.params.metas().len() {
        let (name, dims) = {
            let meta = &model.params.metas()[i];
            (meta.name.clone(), meta.dims.clone())
        };
        let stored = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::MalformedInput(format!("checkpoint lacks tensor {name}")))?;
        if stored.dims != dims {
            return Err(Error::Shape(format!(
                "tensor {name} has dims {:?}, expected {:?}",
                stored.dims, dims
            )));
        }
        let id = model.params.find(&name).expect("meta lists its own name");
        model.params.tensor_mut(id).copy_from_slice(&stored.data);
    }
    let optim = match (by_name.get("optim.m"), by_name.get("optim.v"), by_name.get("optim.state"))
    {
        (Some(m), Some(v), Some(s)) => {
            if m.data.len() != model.params.len() || v.data.len() != model.params.len() {
                return Err(Error::Shape(format!(
                    "optimizer moments length {} vs {} parameters",
                    m.data.len(),
                    model.params.len()
                )));
            }
            if s.data.len() != 3 {
                return Err(Error::Shape("optim.state must hold 3 values".into()));
            }
            Some(OptimState {
                m: m.data.clone(),
                v: v.data.clone(),
                step: s.data[0] as u64,
                lr: s.data[1],
                weight_decay: s.data[2],
            })
        }
        _ => None,
    };
    Ok((model, optim))
}
