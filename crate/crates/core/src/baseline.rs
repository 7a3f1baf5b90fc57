//! Overlap-greedy reference tracker. It matches detections to tracks by
//! descending box IoU against each track's last accepted box, with no
//! appearance model at all. Exists to quantify what the learned tracker
//! adds; deliberately kept out of `assoc`.

use crate::assoc::TrackRecord;
use crate::error::Result;
use crate::geometry::{iou, BBox, Detection};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Minimum overlap for a detection to continue a track.
    pub min_iou: f64,
    /// Retirement horizon, matching the learned tracker's default.
    pub max_misses: u32,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            min_iou: 0.1,
            max_misses: 30,
        }
    }
}

struct BaselineTrack {
    id: u64,
    last_box: BBox,
    misses: u32,
}

/// Track a sequence greedily by IoU: every frame, candidate pairs are taken
/// best-overlap-first (ties toward low detection then track index), each
/// detection and track used at most once. Unmatched detections always birth
/// tracks; a track is retired once its misses exceed the horizon.
pub fn track_sequence_iou(
    frames: &[Vec<Detection>],
    cfg: BaselineConfig,
) -> Result<Vec<TrackRecord>> {
    let mut tracks: Vec<BaselineTrack> = Vec::new();
    let mut next_id = 1u64;
    let mut table = Vec::new();
    for dets in frames {
        let mut det_used = vec![false; dets.len()];
        let mut trk_used = vec![false; tracks.len()];
        let mut cands = Vec::new();
        for (r, d) in dets.iter().enumerate() {
            for (c, t) in tracks.iter().enumerate() {
                let v = iou(&d.bbox, &t.last_box)?;
                if v >= cfg.min_iou {
                    cands.push((v, r, c));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, r, c) in cands {
            if det_used[r] || trk_used[c] {
                continue;
            }
            det_used[r] = true;
            trk_used[c] = true;
            let t = &mut tracks[c];
            t.last_box = dets[r].bbox;
            t.misses = 0;
            table.push(TrackRecord {
                frame: dets[r].frame_index,
                id: t.id,
                bbox: dets[r].bbox,
                score: dets[r].score,
            });
        }
        for (c, t) in tracks.iter_mut().enumerate() {
            if !trk_used[c] {
                t.misses += 1;
            }
        }
        for (r, d) in dets.iter().enumerate() {
            if !det_used[r] {
                tracks.push(BaselineTrack {
                    id: next_id,
                    last_box: d.bbox,
                    misses: 0,
                });
                table.push(TrackRecord {
                    frame: d.frame_index,
                    id: next_id,
                    bbox: d.bbox,
                    score: d.score,
                });
                next_id += 1;
            }
        }
        tracks.retain(|t| t.misses <= cfg.max_misses);
    }
    table.sort_by_key(|r| (r.frame, r.id));
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(cx: f64, cy: f64, frame: usize) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, 0.2, 0.2),
            score: 0.9,
            frame_index: frame,
        }
    }

    #[test]
    fn static_box_keeps_one_id() {
        let frames: Vec<Vec<Detection>> = (0..5).map(|f| vec![det(0.5, 0.5, f)]).collect();
        let table = track_sequence_iou(&frames, BaselineConfig::default()).unwrap();
        assert_eq!(table.len(), 5);
        assert!(table.iter().all(|r| r.id == 1));
    }

    #[test]
    fn jump_beyond_overlap_births_new_id() {
        let frames = vec![vec![det(0.2, 0.2, 0)], vec![det(0.8, 0.8, 1)]];
        let table = track_sequence_iou(&frames, BaselineConfig::default()).unwrap();
        assert_eq!(table[0].id, 1);
        assert_eq!(table[1].id, 2);
    }

    #[test]
    fn best_overlap_wins() {
        // Track 1 sits at 0.50, track 2 at 0.58; a detection at 0.56 must
        // continue track 2.
        let frames = vec![
            vec![det(0.50, 0.5, 0), det(0.58, 0.5, 0)],
            vec![det(0.56, 0.5, 1)],
        ];
        let table = track_sequence_iou(&frames, BaselineConfig::default()).unwrap();
        let last = table.iter().find(|r| r.frame == 1).unwrap();
        assert_eq!(last.id, 2);
    }

    #[test]
    fn retirement_then_fresh_id() {
        let cfg = BaselineConfig {
            max_misses: 0,
            ..Default::default()
        };
        let frames = vec![
            vec![det(0.5, 0.5, 0)],
            vec![],
            vec![det(0.5, 0.5, 2)],
        ];
        let table = track_sequence_iou(&frames, cfg).unwrap();
        assert_eq!(table[0].id, 1);
        assert_eq!(table[1].id, 2);
    }

    #[test]
    fn empty_sequence() {
        assert!(track_sequence_iou(&[], BaselineConfig::default())
            .unwrap()
            .is_empty());
    }
}
