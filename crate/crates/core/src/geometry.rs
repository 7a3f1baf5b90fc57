//! Boxes, overlap measures, and the positional encoding that turns
//! detections into query vectors.
//!
//! Boxes use a normalized center-size parametrization internally; pixel
//! left-top-width-height only appears at file boundaries (see [`crate::io`]).

use crate::error::{Error, Result};

/// Axis-aligned box, center-size, normalized to the frame extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn left(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn top(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn right(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn bottom(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn check(&self, other: &BBox) -> Result<()> {
        if self.w <= 0.0 || self.h <= 0.0 || other.w <= 0.0 || other.h <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "degenerate box: extents must be positive (got {}x{} and {}x{})",
                self.w, self.h, other.w, other.h
            )));
        }
        Ok(())
    }
}

/// One detector output box with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub frame_index: usize,
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check(b)?;
    let ix = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Generalized IoU: IoU minus the fraction of the convex hull not covered
/// by the union. Ranges over [-1, 1], equal to IoU when the hull equals
/// the union.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    let i = iou(a, b)?;
    let ix = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let hull_w = a.right().max(b.right()) - a.left().min(b.left());
    let hull_h = a.bottom().max(b.bottom()) - a.top().min(b.top());
    let hull = hull_w * hull_h;
    Ok(i - (hull - union) / hull)
}

/// Sine-cosine positional encoding temperature for normalized coordinates.
pub const ENCODE_TEMPERATURE: f64 = 20.0;

/// Encode the four box coordinates of a detection into a `d_model` vector.
///
/// Each coordinate gets `d_model / 4` channels laid out as alternating
/// (sin, cos) pairs with a geometric frequency schedule. The confidence
/// score is not part of this encoding; the net module adds a learned score
/// embedding on top.
pub fn encode_query(det: &Detection, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || d_model % 8 != 0 {
        return Err(Error::Config(format!(
            "d_model must be a positive multiple of 8, got {d_model}"
        )));
    }
    let per_coord = d_model / 4;
    let pairs = per_coord / 2;
    let mut out = Vec::with_capacity(d_model);
    for &x in &[det.bbox.cx, det.bbox.cy, det.bbox.w, det.bbox.h] {
        for i in 0..pairs {
            let divisor = ENCODE_TEMPERATURE.powf(2.0 * i as f64 / per_coord as f64);
            let angle = x / divisor;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h)
    }

    #[test]
    fn iou_identity() {
        let a = b(0.3, 0.4, 0.2, 0.1);
        assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint() {
        let a = b(0.1, 0.5, 0.1, 0.1);
        let c = b(0.9, 0.5, 0.1, 0.1);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn iou_corner_overlap() {
        // Two 10x10 boxes offset by 5 in both axes (pixel corners [0,10] and
        // [5,15], here normalized by a 20-unit frame): intersection 25,
        // union 175.
        let a = b(0.25, 0.25, 0.5, 0.5);
        let c = b(0.5, 0.5, 0.5, 0.5);
        assert!((iou(&a, &c).unwrap() - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn iou_degenerate_rejected() {
        let a = b(0.5, 0.5, 0.0, 0.1);
        let c = b(0.5, 0.5, 0.1, 0.1);
        assert!(matches!(iou(&a, &c), Err(Error::InvalidGeometry(_))));
        assert!(matches!(giou(&a, &c), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn giou_identity() {
        let a = b(0.3, 0.4, 0.2, 0.1);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn giou_corner_overlap() {
        // Same pair as iou_corner_overlap; hull is 15x15 = 225 pixel units,
        // so giou = 25/175 - 50/225.
        let a = b(0.25, 0.25, 0.5, 0.5);
        let c = b(0.5, 0.5, 0.5, 0.5);
        let expect = 25.0 / 175.0 - 50.0 / 225.0;
        assert!((giou(&a, &c).unwrap() - expect).abs() < 1e-12);
        assert!((expect - (-0.079365)).abs() < 1e-6);
    }

    #[test]
    fn giou_nested_equals_iou() {
        // Inner box with a quarter of the outer area; hull equals the outer
        // box, so no hull penalty applies.
        let inner = b(0.5, 0.5, 0.25, 0.25);
        let outer = b(0.5, 0.5, 0.5, 0.5);
        assert!((giou(&inner, &outer).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn encode_zero_box_alternates() {
        let det = Detection {
            bbox: b(0.0, 0.0, 0.0, 0.0),
            score: 1.0,
            frame_index: 0,
        };
        // w = h = 0 is fine for encoding (the box is never used geometrically
        // here); every channel pair must be (sin 0, cos 0) = (0, 1).
        let enc = encode_query(&det, 32).unwrap();
        for pair in enc.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn encode_deterministic() {
        let det = Detection {
            bbox: b(0.3, 0.7, 0.2, 0.1),
            score: 0.5,
            frame_index: 3,
        };
        let det2 = Detection {
            score: 0.9,
            frame_index: 8,
            ..det
        };
        assert_eq!(encode_query(&det, 64).unwrap(), encode_query(&det2, 64).unwrap());
    }

    #[test]
    fn encode_norm_is_sqrt_half_d() {
        let det = Detection {
            bbox: b(0.37, 0.81, 0.13, 0.29),
            score: 0.5,
            frame_index: 0,
        };
        for d_model in [32, 64, 256] {
            let enc = encode_query(&det, d_model).unwrap();
            let norm = enc.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - (d_model as f64 / 2.0).sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_rejects_bad_d_model() {
        let det = Detection {
            bbox: b(0.5, 0.5, 0.1, 0.1),
            score: 1.0,
            frame_index: 0,
        };
        assert!(matches!(encode_query(&det, 12), Err(Error::Config(_))));
        assert!(matches!(encode_query(&det, 0), Err(Error::Config(_))));
    }

    #[test]
    fn encode_injective_on_grid() {
        // Distinct boxes on a coarse grid must map to well-separated codes.
        let mut codes: Vec<Vec<f64>> = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let det = Detection {
                        bbox: b(i as f64 / 10.0, j as f64 / 10.0, 0.05 + k as f64 / 20.0, 0.1),
                        score: 1.0,
                        frame_index: 0,
                    };
                    codes.push(encode_query(&det, 32).unwrap());
                }
            }
        }
        for i in 0..codes.len() {
            for j in (i + 1)..codes.len() {
                let d2: f64 = codes[i]
                    .iter()
                    .zip(&codes[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2.sqrt() > 1e-6, "codes {i} and {j} collide");
            }
        }
    }
}
