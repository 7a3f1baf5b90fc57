//! Association losses: the pairwise embedding loss on weight responses, the
//! focal auxiliary loss on similarities, their per-frame and cross-clip
//! sums, box refinement losses, and the weighted total.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::net::{GBox, GMat, Matrix, SimPair};
use crate::tape::{Tape, Var};
use serde::{Deserialize, Serialize};

/// Log arguments are clamped here so exact 0 and 1 similarities, which the
/// clamp in the similarity head produces by construction, stay finite.
pub const LOG_CLAMP: f64 = 1e-12;

/// Positive-pair mask over a similarity/weight matrix: true where the row
/// query and column key carry the same ground-truth identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PosMask {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
}

impl PosMask {
    pub fn new(rows: usize, cols: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                mask.len()
            )));
        }
        Ok(Self { rows, cols, mask })
    }

    /// Cross mask between two identity lists; `None` (false positives)
    /// matches nothing and therefore acts purely as a negative.
    pub fn from_ids(row_ids: &[Option<u64>], col_ids: &[Option<u64>]) -> Self {
        let mut mask = Vec::with_capacity(row_ids.len() * col_ids.len());
        for r in row_ids {
            for c in col_ids {
                mask.push(matches!((r, c), (Some(a), Some(b)) if a == b));
            }
        }
        Self {
            rows: row_ids.len(),
            cols: col_ids.len(),
            mask,
        }
    }

    /// Self mask for within-frame pairs: the diagonal is always positive
    /// (every query pairs with itself), identities are unique in a frame so
    /// off-diagonal positives only appear for duplicate labels.
    pub fn spatial(ids: &[Option<u64>]) -> Self {
        let n = ids.len();
        let mut m = Self::from_ids(ids, ids);
        for i in 0..n {
            m.mask[i * n + i] = true;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.cols + c]
    }

    pub fn count_pos(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Loss term weights and the focal exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub spatial: f64,
    pub temporal: f64,
    pub crossclip: f64,
    pub l1: f64,
    pub giou: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spatial: 0.1,
            temporal: 2.0,
            crossclip: 1.0,
            l1: 0.5,
            giou: 0.3,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.spatial,
            self.temporal,
            self.crossclip,
            self.l1,
            self.giou,
            self.gamma,
        ];
        if all.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn check_mask(rows: usize, cols: usize, mask: &PosMask) -> Result<()> {
    if mask.rows() != rows || mask.cols() != cols {
        return Err(Error::Shape(format!(
            "mask {}x{} against matrix {rows}x{cols}",
            mask.rows(),
            mask.cols()
        )));
    }
    Ok(())
}

/// Stable log-sum-exp of a non-empty node set.
fn g_lse(t: &mut Tape, vars: &[Var]) -> Var {
    let m = t.max_vars(vars);
    let exps: Vec<Var> = vars
        .iter()
        .map(|&v| {
            let d = t.sub(v, m);
            t.exp(d)
        })
        .collect();
    let sum = t.sum_vars(&exps);
    let l = t.ln(sum);
    t.add(l, m)
}

/// Row-wise pairwise embedding loss on the weight-response matrix:
/// sum over rows of log(1 + sum over positive/negative pairs of
/// exp(w_neg - w_pos)). Factorizes into softplus(lse(neg) + lse(-pos)),
/// which is what gets recorded; rows missing either class contribute 0.
pub fn g_embed_loss(t: &mut Tape, w: &GMat, mask: &PosMask) -> Result<Var> {
    check_mask(w.rows, w.cols, mask)?;
    let mut rows = Vec::new();
    for r in 0..w.rows {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for c in 0..w.cols {
            if mask.at(r, c) {
                pos.push(w.at(r, c));
            } else {
                neg.push(w.at(r, c));
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let neg_pos: Vec<Var> = pos.iter().map(|&p| t.neg(p)).collect();
        let lse_n = g_lse(t, &neg);
        let lse_p = g_lse(t, &neg_pos);
        let z = t.add(lse_n, lse_p);
        rows.push(t.softplus(z));
    }
    Ok(t.sum_vars(&rows))
}

/// Focal auxiliary loss on the similarity matrix: positives are pushed to 1
/// and negatives to 0, each down-weighted by its focal factor.
pub fn g_focal_loss(t: &mut Tape, s: &GMat, mask: &PosMask, gamma: f64) -> Result<Var> {
    check_mask(s.rows, s.cols, mask)?;
    let mut terms = Vec::new();
    for r in 0..s.rows {
        for c in 0..s.cols {
            let sv = s.at(r, c);
            let term = if mask.at(r, c) {
                let ns = t.neg(sv);
                let om = t.add_c(ns, 1.0);
                let focus = t.pow_c(om, gamma);
                let cl = t.max_c(sv, LOG_CLAMP);
                let l = t.ln(cl);
                t.mul(focus, l)
            } else {
                let focus = t.pow_c(sv, gamma);
                let ns = t.neg(sv);
                let om = t.add_c(ns, 1.0);
                let cl = t.max_c(om, LOG_CLAMP);
                let l = t.ln(cl);
                t.mul(focus, l)
            };
            terms.push(term);
        }
    }
    let total = t.sum_vars(&terms);
    Ok(t.neg(total))
}

/// Embedding plus focal loss for one (S, W) pair.
pub fn g_contrastive(t: &mut Tape, s: &GMat, w: &GMat, mask: &PosMask, gamma: f64) -> Result<Var> {
    let e = g_embed_loss(t, w, mask)?;
    let f = g_focal_loss(t, s, mask, gamma)?;
    Ok(t.add(e, f))
}

/// GIoU of a tape-valued box against a constant target.
pub fn g_giou(t: &mut Tape, b: &GBox, target: &BBox) -> Var {
    let hw = t.mul_c(b.w, 0.5);
    let hh = t.mul_c(b.h, 0.5);
    let left = t.sub(b.cx, hw);
    let right = t.add(b.cx, hw);
    let top = t.sub(b.cy, hh);
    let bottom = t.add(b.cy, hh);

    let iw_min = t.min_c(right, target.right());
    let iw_max = t.max_c(left, target.left());
    let iw_raw = t.sub(iw_min, iw_max);
    let iw = t.relu(iw_raw);
    let ih_min = t.min_c(bottom, target.bottom());
    let ih_max = t.max_c(top, target.top());
    let ih_raw = t.sub(ih_min, ih_max);
    let ih = t.relu(ih_raw);
    let inter = t.mul(iw, ih);

    let area = t.mul(b.w, b.h);
    let both = t.add_c(area, target.area());
    let union = t.sub(both, inter);
    let iou = t.div(inter, union);

    let hull_r = t.max_c(right, target.right());
    let hull_l = t.min_c(left, target.left());
    let hull_w = t.sub(hull_r, hull_l);
    let hull_b = t.max_c(bottom, target.bottom());
    let hull_t = t.min_c(top, target.top());
    let hull_h = t.sub(hull_b, hull_t);
    let hull = t.mul(hull_w, hull_h);

    let excess = t.sub(hull, union);
    let frac = t.div(excess, hull);
    t.sub(iou, frac)
}

/// Mean L1 over the four coordinates and mean (1 - giou), each averaged
/// over the box list.
pub fn g_refine_losses(t: &mut Tape, refined: &[GBox], gt: &[BBox]) -> Result<(Var, Var)> {
    if refined.len() != gt.len() {
        return Err(Error::Shape(format!(
            "refine losses over {} boxes vs {} targets",
            refined.len(),
            gt.len()
        )));
    }
    if refined.is_empty() {
        let zero = t.leaf(0.0);
        return Ok((zero, zero));
    }
    let mut l1_terms = Vec::with_capacity(refined.len() * 4);
    let mut giou_terms = Vec::with_capacity(refined.len());
    for (b, g) in refined.iter().zip(gt) {
        for (var, target) in [(b.cx, g.cx), (b.cy, g.cy), (b.w, g.w), (b.h, g.h)] {
            let d = t.add_c(var, -target);
            l1_terms.push(t.abs(d));
        }
        let gv = g_giou(t, b, g);
        let ng = t.neg(gv);
        giou_terms.push(t.add_c(ng, 1.0));
    }
    let l1_sum = t.sum_vars(&l1_terms);
    let l1 = t.mul_c(l1_sum, 1.0 / (4.0 * refined.len() as f64));
    let g_sum = t.sum_vars(&giou_terms);
    let giou_loss = t.mul_c(g_sum, 1.0 / refined.len() as f64);
    Ok((l1, giou_loss))
}

fn gmat_leaves(t: &mut Tape, m: &Matrix) -> GMat {
    let seg = t.leaf_seg(m.data());
    GMat::new(m.rows(), m.cols(), seg.vars().collect())
}

/// Value-level embedding loss.
pub fn embed_loss(w: &Matrix, mask: &PosMask) -> Result<f64> {
    let mut t = Tape::new();
    let gm = gmat_leaves(&mut t, w);
    let v = g_embed_loss(&mut t, &gm, mask)?;
    Ok(t.val(v))
}

/// Value-level focal auxiliary loss.
pub fn focal_aux_loss(s: &Matrix, mask: &PosMask, gamma: f64) -> Result<f64> {
    let mut t = Tape::new();
    let gm = gmat_leaves(&mut t, s);
    let v = g_focal_loss(&mut t, &gm, mask, gamma)?;
    Ok(t.val(v))
}

/// Per-frame sum of embedding plus focal terms over within-frame pairs.
pub fn spatial_loss(frames: &[(&SimPair, &PosMask)], gamma: f64) -> Result<f64> {
    let mut total = 0.0;
    for (pair, mask) in frames {
        total += embed_loss(&pair.w, mask)? + focal_aux_loss(&pair.s, mask, gamma)?;
    }
    Ok(total)
}

/// Per-frame sum over detection-vs-track pairs; frames before any track
/// exists simply contribute empty matrices.
pub fn temporal_loss(frames: &[(&SimPair, &PosMask)], gamma: f64) -> Result<f64> {
    spatial_loss(frames, gamma)
}

/// Contrastive terms over the buffered clip queries' all-pairs attention.
pub fn crossclip_loss(pair: &SimPair, mask: &PosMask, gamma: f64) -> Result<f64> {
    Ok(embed_loss(&pair.w, mask)? + focal_aux_loss(&pair.s, mask, gamma)?)
}

/// Value-level refinement losses.
pub fn refine_losses(refined: &[BBox], gt: &[BBox]) -> Result<(f64, f64)> {
    let mut t = Tape::new();
    let gboxes: Vec<GBox> = refined
        .iter()
        .map(|b| {
            let seg = t.leaf_seg(&[b.cx, b.cy, b.w, b.h]);
            GBox {
                cx: seg.var(0),
                cy: seg.var(1),
                w: seg.var(2),
                h: seg.var(3),
            }
        })
        .collect();
    let (l1, giou_loss) = g_refine_losses(&mut t, &gboxes, gt)?;
    Ok((t.val(l1), t.val(giou_loss)))
}

/// Weighted total of the five components.
pub fn total_loss(
    spatial: f64,
    temporal: f64,
    crossclip: f64,
    l1: f64,
    giou_loss: f64,
    w: &LossWeights,
) -> Result<f64> {
    w.validate()?;
    Ok(w.spatial * spatial
        + w.temporal * temporal
        + w.crossclip * crossclip
        + w.l1 * l1
        + w.giou * giou_loss)
}
