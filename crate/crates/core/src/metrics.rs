//! Identity-preservation scoring: per-frame CLEAR accounting (MOTA, FP,
//! FN, id switches) and trajectory-level IDF1, plus a similarity-structure
//! diagnostic over positive/negative pair means.

use crate::assoc::{hungarian, TrackRecord};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::loss::PosMask;
use crate::net::Matrix;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

/// Scores for one sequence or an aggregate over several.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqEval {
    pub idf1: f64,
    pub mota: f64,
    pub id_switches: u64,
    pub fp: u64,
    pub fn_: u64,
    pub gt_count: u64,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub idf1: f64,
    pub mota: f64,
    pub id_switches: u64,
    pub fp: u64,
    pub fn_: u64,
    pub gt_count: u64,
    pub per_sequence: Vec<SeqEval>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>7} {:>6} {:>6} {:>6} {:>8}",
            "IDF1", "MOTA", "IDSW", "FP", "FN", "GT"
        )?;
        write!(
            f,
            "{:>6.3} {:>7.3} {:>6} {:>6} {:>6} {:>8}",
            self.idf1, self.mota, self.id_switches, self.fp, self.fn_, self.gt_count
        )
    }
}

/// Table rows grouped per frame, with duplicate (frame, id) rows rejected.
fn by_frame(table: &[TrackRecord], what: &str) -> Result<BTreeMap<usize, Vec<TrackRecord>>> {
    let mut seen = HashSet::new();
    let mut frames: BTreeMap<usize, Vec<TrackRecord>> = BTreeMap::new();
    for r in table {
        if !seen.insert((r.frame, r.id)) {
            return Err(Error::MalformedInput(format!(
                "{what} table repeats id {} in frame {}",
                r.id, r.frame
            )));
        }
        frames.entry(r.frame).or_default().push(*r);
    }
    for rows in frames.values_mut() {
        rows.sort_by_key(|r| r.id);
    }
    Ok(frames)
}

struct Counts {
    fp: u64,
    fn_: u64,
    idsw: u64,
    gt_count: u64,
    pred_count: u64,
    idtp: u64,
}

/// Below-threshold pairs get a large negative score so the assignment
/// prefers any valid pairing over an invalid one; survivors below the
/// threshold are dropped afterwards.
fn frame_matching(
    gts: &[TrackRecord],
    preds: &[TrackRecord],
    iou_thr: f64,
) -> Result<Vec<(usize, usize)>> {
    if gts.is_empty() || preds.is_empty() {
        return Ok(vec![]);
    }
    let mut s = Matrix::zeros(gts.len(), preds.len());
    for (i, g) in gts.iter().enumerate() {
        for (j, p) in preds.iter().enumerate() {
            let v = iou(&g.bbox, &p.bbox)?;
            s.set(i, j, if v >= iou_thr { v } else { -1e6 });
        }
    }
    Ok(hungarian(&s, true)?
        .into_iter()
        .filter(|&(i, j)| s.get(i, j) >= 0.0)
        .collect())
}

fn clear_and_id_counts(
    pred: &[TrackRecord],
    gt: &[TrackRecord],
    iou_thr: f64,
) -> Result<Counts> {
    let gt_frames = by_frame(gt, "ground-truth")?;
    let pred_frames = by_frame(pred, "prediction")?;
    let mut frames: Vec<usize> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();

    let empty = Vec::new();
    let mut c = Counts {
        fp: 0,
        fn_: 0,
        idsw: 0,
        gt_count: gt.len() as u64,
        pred_count: pred.len() as u64,
        idtp: 0,
    };
    // Most recent prediction id matched to each ground-truth id, kept
    // across unmatched gaps as CLEAR prescribes.
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    // Per-trajectory-pair count of frames matched at the threshold.
    let mut overlap: BTreeMap<(u64, u64), u64> = BTreeMap::new();

    for f in frames {
        let gts = gt_frames.get(&f).unwrap_or(&empty);
        let preds = pred_frames.get(&f).unwrap_or(&empty);
        let pairs = frame_matching(gts, preds, iou_thr)?;
        for &(i, j) in &pairs {
            let (gid, pid) = (gts[i].id, preds[j].id);
            if let Some(&prev) = last_match.get(&gid) {
                if prev != pid {
                    c.idsw += 1;
                }
            }
            last_match.insert(gid, pid);
        }
        c.fn_ += (gts.len() - pairs.len()) as u64;
        c.fp += (preds.len() - pairs.len()) as u64;
        // Trajectory overlap for the ID measure counts every frame where
        // the pair meets the threshold, independent of CLEAR matching.
        for g in gts.iter() {
            for p in preds.iter() {
                if iou(&g.bbox, &p.bbox)? >= iou_thr {
                    *overlap.entry((g.id, p.id)).or_default() += 1;
                }
            }
        }
    }

    // Global one-to-one trajectory assignment maximizing total overlap.
    let gt_ids: Vec<u64> = {
        let mut v: Vec<u64> = gt.iter().map(|r| r.id).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let pred_ids: Vec<u64> = {
        let mut v: Vec<u64> = pred.iter().map(|r| r.id).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    if !gt_ids.is_empty() && !pred_ids.is_empty() {
        let mut s = Matrix::zeros(gt_ids.len(), pred_ids.len());
        for (i, &gid) in gt_ids.iter().enumerate() {
            for (j, &pid) in pred_ids.iter().enumerate() {
                s.set(i, j, *overlap.get(&(gid, pid)).unwrap_or(&0) as f64);
            }
        }
        for (i, j) in hungarian(&s, true)? {
            c.idtp += s.get(i, j) as u64;
        }
    }
    Ok(c)
}

fn seq_eval(c: &Counts) -> SeqEval {
    let idf1 = if c.gt_count + c.pred_count == 0 {
        1.0
    } else {
        2.0 * c.idtp as f64 / (c.gt_count + c.pred_count) as f64
    };
    let mota = 1.0 - (c.fp + c.fn_ + c.idsw) as f64 / c.gt_count.max(1) as f64;
    SeqEval {
        idf1,
        mota,
        id_switches: c.idsw,
        fp: c.fp,
        fn_: c.fn_,
        gt_count: c.gt_count,
        idtp: c.idtp,
        idfp: c.pred_count - c.idtp,
        idfn: c.gt_count - c.idtp,
    }
}

/// Score one predicted track table against ground truth.
pub fn evaluate(pred: &[TrackRecord], gt: &[TrackRecord], iou_thr: f64) -> Result<EvalReport> {
    evaluate_many(&[(pred, gt)], iou_thr)
}

/// Score several sequences and aggregate by summing event counts, then
/// recomputing the ratios from the totals.
pub fn evaluate_many(
    seqs: &[(&[TrackRecord], &[TrackRecord])],
    iou_thr: f64,
) -> Result<EvalReport> {
    let mut per_sequence = Vec::with_capacity(seqs.len());
    let mut total = Counts {
        fp: 0,
        fn_: 0,
        idsw: 0,
        gt_count: 0,
        pred_count: 0,
        idtp: 0,
    };
    for &(pred, gt) in seqs {
        let c = clear_and_id_counts(pred, gt, iou_thr)?;
        total.fp += c.fp;
        total.fn_ += c.fn_;
        total.idsw += c.idsw;
        total.gt_count += c.gt_count;
        total.pred_count += c.pred_count;
        total.idtp += c.idtp;
        per_sequence.push(seq_eval(&c));
    }
    let agg = seq_eval(&total);
    Ok(EvalReport {
        idf1: agg.idf1,
        mota: agg.mota,
        id_switches: agg.id_switches,
        fp: agg.fp,
        fn_: agg.fn_,
        gt_count: agg.gt_count,
        per_sequence,
    })
}

/// Mean similarity over positive pairs, over negative pairs, and their
/// difference. Needs both classes present.
pub fn similarity_margin(s: &Matrix, mask: &PosMask) -> Result<(f64, f64, f64)> {
    if s.rows() != mask.rows() || s.cols() != mask.cols() {
        return Err(Error::Shape(format!(
            "similarity {}x{} vs mask {}x{}",
            s.rows(),
            s.cols(),
            mask.rows(),
            mask.cols()
        )));
    }
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    let (mut pos_n, mut neg_n) = (0usize, 0usize);
    for r in 0..s.rows() {
        for c in 0..s.cols() {
            if mask.at(r, c) {
                pos_sum += s.get(r, c);
                pos_n += 1;
            } else {
                neg_sum += s.get(r, c);
                neg_n += 1;
            }
        }
    }
    if pos_n == 0 || neg_n == 0 {
        return Err(Error::UndefinedMargin);
    }
    let mean_pos = pos_sum / pos_n as f64;
    let mean_neg = neg_sum / neg_n as f64;
    Ok((mean_pos, mean_neg, mean_pos - mean_neg))
}

/// Clip-level similarity margin: run the tracker over consecutive
/// `clip_len`-frame windows, buffer every final-layer query whose detection
/// claims a GT box at `assign_iou`, score the all-pairs similarity of the
/// buffer at the final layer, and average [`similarity_margin`] over the
/// windows where both pair classes exist.
pub fn crossclip_margin(
    model: &crate::net::SimDecoderModel,
    frames: &[crate::train::ClipFrame],
    clip_len: usize,
    assign_iou: f64,
    mc: &crate::assoc::MatchConfig,
) -> Result<(f64, f64, f64)> {
    if clip_len < 2 {
        return Err(Error::Config("a clip needs at least 2 frames".into()));
    }
    let (mut p_sum, mut n_sum, mut m_sum) = (0.0, 0.0, 0.0);
    let mut windows = 0.0;
    for window in frames.chunks(clip_len) {
        let mut state = crate::assoc::TrackerState::new(mc.clone());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut ids: Vec<Option<u64>> = Vec::new();
        for f in window {
            let (_, out) =
                crate::assoc::tracker_step_full(&mut state, model, &f.detections, &f.grid)?;
            let Some(out) = out else { continue };
            let assigned = crate::train::assign_gt(&f.detections, &f.gt, assign_iou)?;
            let last = out.final_layer();
            for (r, id) in assigned.iter().enumerate() {
                if id.is_some() {
                    rows.push(last.queries.row(r).to_vec());
                    ids.push(*id);
                }
            }
        }
        if rows.len() < 2 {
            continue;
        }
        let q = Matrix::from_rows(&rows)?;
        let pair = model.weight_attention(model.cfg.layers - 1, &q, &q)?;
        let mask = PosMask::from_ids(&ids, &ids);
        match similarity_margin(&pair.s, &mask) {
            Ok((p, n, m)) => {
                p_sum += p;
                n_sum += n;
                m_sum += m;
                windows += 1.0;
            }
            Err(Error::UndefinedMargin) => continue,
            Err(e) => return Err(e),
        }
    }
    if windows == 0.0 {
        return Err(Error::UndefinedMargin);
    }
    Ok((p_sum / windows, n_sum / windows, m_sum / windows))
}
