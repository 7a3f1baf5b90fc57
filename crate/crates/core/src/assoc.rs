//! Assignment and the online tracker: Hungarian solving on the temporal
//! similarity matrix, two-stage matching by detection confidence, track
//! birth, query replacement, and retirement.
//!
//! Association here is appearance-only: this module never consults box
//! overlap or motion when matching (see `baseline` for the overlap-greedy
//! reference tracker).

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::net::{DecoderOut, FeatureGrid, Matrix, SimDecoderModel};
use serde::{Deserialize, Serialize};

/// Solve the assignment problem over a score matrix, returning min(M,N)
/// (row, col) pairs with maximal (or minimal) total. Scans run in ascending
/// index order, so ties resolve toward low row and column indices and the
/// result is deterministic.
pub fn hungarian(s: &Matrix, maximize: bool) -> Result<Vec<(usize, usize)>> {
    if s.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment score".into()));
    }
    let (m, n) = (s.rows(), s.cols());
    if m == 0 || n == 0 {
        return Ok(vec![]);
    }
    let transpose = m > n;
    let (rows, cols) = if transpose { (n, m) } else { (m, n) };
    let cost = |r: usize, c: usize| -> f64 {
        let v = if transpose { s.get(c, r) } else { s.get(r, c) };
        if maximize {
            -v
        } else {
            v
        }
    };

    // Potentials method over a (rows x cols) matrix with rows <= cols;
    // p[j] holds the 1-based row assigned to column j, column 0 is virtual.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(rows);
    for j in 1..=cols {
        if p[j] != 0 {
            let (r, c) = (p[j] - 1, j - 1);
            pairs.push(if transpose { (c, r) } else { (r, c) });
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Gates for two-stage matching and track lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Detector-confidence gate for first-stage rows.
    pub tau_high: f64,
    /// Minimum similarity for an assignment to stand.
    pub s_min: f64,
    /// A track is retired once its consecutive misses exceed this.
    pub max_misses: u32,
    /// Birth a track from every unmatched detection.
    pub init_all: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tau_high: 0.5,
            s_min: 0.3,
            max_misses: 30,
            init_all: true,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_high) || !(0.0..=1.0).contains(&self.s_min) {
            return Err(Error::Config(
                "tau_high and s_min must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Result of matching detections (rows) against tracks (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Two-stage association: high-confidence detections claim tracks first,
/// the rest compete for whatever remains; any pair below `s_min` similarity
/// is rejected after assignment. Output index sets are disjoint and cover
/// every row and column exactly once.
pub fn two_stage_match(
    s: &Matrix,
    det_scores: &[f64],
    cfg: &MatchConfig,
) -> Result<MatchOutcome> {
    cfg.validate()?;
    if s.rows() != det_scores.len() {
        return Err(Error::Shape(format!(
            "similarity has {} rows for {} detection scores",
            s.rows(),
            det_scores.len()
        )));
    }
    let (m, n) = (s.rows(), s.cols());
    let mut matches = Vec::new();
    let mut det_done = vec![false; m];
    let mut trk_done = vec![false; n];

    fn run_stage(
        s: &Matrix,
        s_min: f64,
        rows: &[usize],
        cols: &[usize],
        matches: &mut Vec<(usize, usize)>,
        det_done: &mut [bool],
        trk_done: &mut [bool],
    ) -> Result<()> {
        if rows.is_empty() || cols.is_empty() {
            return Ok(());
        }
        let mut sub = Matrix::zeros(rows.len(), cols.len());
        for (ri, &r) in rows.iter().enumerate() {
            for (ci, &c) in cols.iter().enumerate() {
                sub.set(ri, ci, s.get(r, c));
            }
        }
        for (ri, ci) in hungarian(&sub, true)? {
            let (r, c) = (rows[ri], cols[ci]);
            if s.get(r, c) >= s_min {
                matches.push((r, c));
                det_done[r] = true;
                trk_done[c] = true;
            }
        }
        Ok(())
    }

    let high: Vec<usize> = (0..m).filter(|&r| det_scores[r] >= cfg.tau_high).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    run_stage(s, cfg.s_min, &high, &all_cols, &mut matches, &mut det_done, &mut trk_done)?;
    let low: Vec<usize> = (0..m).filter(|&r| det_scores[r] < cfg.tau_high).collect();
    let free_cols: Vec<usize> = (0..n).filter(|&c| !trk_done[c]).collect();
    run_stage(s, cfg.s_min, &low, &free_cols, &mut matches, &mut det_done, &mut trk_done)?;

    matches.sort_unstable();
    Ok(MatchOutcome {
        matches,
        unmatched_dets: (0..m).filter(|&r| !det_done[r]).collect(),
        unmatched_tracks: (0..n).filter(|&c| !trk_done[c]).collect(),
    })
}

/// One live trajectory: its stored query, last accepted box, and lifecycle
/// counters.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub query: Vec<f64>,
    pub last_box: BBox,
    pub last_score: f64,
    pub age: u32,
    pub misses: u32,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub tracks: Vec<Track>,
    pub next_id: u64,
    pub cfg: MatchConfig,
}

impl TrackerState {
    pub fn new(cfg: MatchConfig) -> Self {
        Self {
            tracks: Vec::new(),
            next_id: 1,
            cfg,
        }
    }

    fn birth(&mut self, query: Vec<f64>, bbox: BBox, score: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.push(Track {
            id,
            query,
            last_box: bbox,
            last_score: score,
            age: 0,
            misses: 0,
        });
        id
    }

    fn track_matrix(&self, d_model: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = self.tracks.iter().map(|t| t.query.clone()).collect();
        if rows.is_empty() {
            Matrix::zeros(0, d_model)
        } else {
            Matrix::from_rows(&rows).expect("track queries share d_model")
        }
    }
}

/// One output row of a tracker run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Advance the tracker by one frame: decode object queries, match against
/// track queries on the final-layer temporal similarity, replace matched
/// track queries with their object queries, birth tracks from unmatched
/// detections, and retire stale tracks.
pub fn tracker_step(
    state: &mut TrackerState,
    model: &SimDecoderModel,
    dets: &[Detection],
    grid: &FeatureGrid,
) -> Result<Vec<TrackRecord>> {
    Ok(tracker_step_full(state, model, dets, grid)?.0)
}

/// [`tracker_step`] that also hands back the decoder output for similarity
/// inspection; `None` on an empty frame where the decoder never runs.
pub fn tracker_step_full(
    state: &mut TrackerState,
    model: &SimDecoderModel,
    dets: &[Detection],
    grid: &FeatureGrid,
) -> Result<(Vec<TrackRecord>, Option<DecoderOut>)> {
    let mut records = Vec::new();
    if dets.is_empty() {
        for t in &mut state.tracks {
            t.misses += 1;
            t.age += 1;
        }
        let max = state.cfg.max_misses;
        state.tracks.retain(|t| t.misses <= max);
        return Ok((records, None));
    }
    let frame = dets[0].frame_index;
    let tracks_m = state.track_matrix(model.cfg.d_model);
    let out = model.decoder_forward(dets, &tracks_m, grid)?;
    let last = out.final_layer();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let outcome = two_stage_match(&last.temporal.s, &scores, &state.cfg)?;

    let mut matched_track = vec![false; state.tracks.len()];
    for &(r, c) in &outcome.matches {
        let t = &mut state.tracks[c];
        t.query = last.queries.row(r).to_vec();
        t.last_box = dets[r].bbox;
        t.last_score = dets[r].score;
        t.misses = 0;
        t.age += 1;
        matched_track[c] = true;
        records.push(TrackRecord {
            frame,
            id: t.id,
            bbox: dets[r].bbox,
            score: dets[r].score,
        });
    }
    for (c, t) in state.tracks.iter_mut().enumerate() {
        if !matched_track[c] {
            t.misses += 1;
            t.age += 1;
        }
    }
    for &r in &outcome.unmatched_dets {
        // With init_all every untracked box starts a trajectory; otherwise
        // only confident ones do, which keeps false positives out of the
        // track set when the detector is noisy.
        if !state.cfg.init_all && dets[r].score < state.cfg.tau_high {
            continue;
        }
        let id = state.birth(last.queries.row(r).to_vec(), dets[r].bbox, dets[r].score);
        records.push(TrackRecord {
            frame,
            id,
            bbox: dets[r].bbox,
            score: dets[r].score,
        });
    }
    let max = state.cfg.max_misses;
    state.tracks.retain(|t| t.misses <= max);
    records.sort_by_key(|r| r.id);
    Ok((records, Some(out)))
}

/// Track a whole sequence; the output table is sorted by (frame, id).
pub fn track_sequence(
    model: &SimDecoderModel,
    frames: &[(Vec<Detection>, FeatureGrid)],
    cfg: MatchConfig,
) -> Result<Vec<TrackRecord>> {
    let mut state = TrackerState::new(cfg);
    let mut table = Vec::new();
    for (dets, grid) in frames {
        table.extend(tracker_step(&mut state, model, dets, grid)?);
    }
    table.sort_by_key(|r| (r.frame, r.id));
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    /// Exhaustive assignment oracle: tries every row-to-column injection,
    /// keeps the best total, breaking ties toward the lexicographically
    /// smallest pair list.
    fn brute_force(s: &Matrix, maximize: bool) -> Vec<(usize, usize)> {
        let (rows, cols) = (s.rows(), s.cols());
        let k = rows.min(cols);
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        let mut cols_perm: Vec<usize> = (0..cols).collect();
        permute(&mut cols_perm, 0, &mut |perm| {
            if rows <= cols {
                let pairs: Vec<(usize, usize)> = (0..k).map(|r| (r, perm[r])).collect();
                consider(s, maximize, pairs, &mut best);
            }
        });
        let mut rows_perm: Vec<usize> = (0..rows).collect();
        if rows > cols {
            permute(&mut rows_perm, 0, &mut |perm| {
                let mut pairs: Vec<(usize, usize)> = (0..k).map(|c| (perm[c], c)).collect();
                pairs.sort_unstable();
                consider(s, maximize, pairs, &mut best);
            });
        }
        best.unwrap().1
    }

    fn consider(
        s: &Matrix,
        maximize: bool,
        pairs: Vec<(usize, usize)>,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        let total: f64 = pairs.iter().map(|&(r, c)| s.get(r, c)).sum();
        let better = match best {
            None => true,
            Some((bt, bp)) => {
                if maximize {
                    total > *bt + 1e-15 || ((total - *bt).abs() <= 1e-15 && pairs < *bp)
                } else {
                    total < *bt - 1e-15 || ((total - *bt).abs() <= 1e-15 && pairs < *bp)
                }
            }
        };
        if better {
            *best = Some((total, pairs));
        }
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn hungarian_two_by_two() {
        let s = m(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert_eq!(hungarian(&s, true).unwrap(), vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian(&s, false).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn hungarian_dominant_diagonal() {
        let s = m(&[
            vec![0.95, 0.01, 0.02],
            vec![0.03, 0.9, 0.05],
            vec![0.02, 0.04, 0.85],
        ]);
        assert_eq!(hungarian(&s, true).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn hungarian_single_row_is_argmax() {
        let s = m(&[vec![0.1, 0.7, 0.3, 0.2]]);
        assert_eq!(hungarian(&s, true).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn hungarian_rectangular_both_ways() {
        let s = m(&[vec![5.0, 1.0, 1.0], vec![1.0, 6.0, 2.0]]);
        assert_eq!(hungarian(&s, true).unwrap(), vec![(0, 0), (1, 1)]);
        let tall = m(&[vec![5.0, 1.0], vec![1.0, 6.0], vec![4.0, 4.0]]);
        let pairs = hungarian(&tall, true).unwrap();
        assert_eq!(pairs, brute_force(&tall, true));
    }

    #[test]
    fn hungarian_ties_resolve_low_indices() {
        let s = Matrix::zeros(3, 3);
        assert_eq!(hungarian(&s, true).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        let s = Matrix::zeros(2, 4);
        assert_eq!(hungarian(&s, true).unwrap(), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_rejects_nonfinite() {
        let mut s = Matrix::zeros(1, 2);
        s.set(0, 0, 0.5);
        s.set(0, 1, f64::NAN);
        assert!(matches!(hungarian(&s, true), Err(Error::NonFinite(_))));
    }

    #[test]
    fn hungarian_matches_brute_force_small_random() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for trial in 0..60 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = Matrix::from_vec(rows, cols, data).unwrap();
            for &maximize in &[true, false] {
                let got = hungarian(&s, maximize).unwrap();
                let want = brute_force(&s, maximize);
                let got_total: f64 = got.iter().map(|&(r, c)| s.get(r, c)).sum();
                let want_total: f64 = want.iter().map(|&(r, c)| s.get(r, c)).sum();
                assert!(
                    (got_total - want_total).abs() < 1e-9,
                    "trial {trial}: total {got_total} vs {want_total}"
                );
                assert_eq!(got, want, "trial {trial} ({rows}x{cols}, max={maximize})");
            }
        }
    }

    #[test]
    fn two_stage_empty_inputs() {
        let cfg = MatchConfig::default();
        let out = two_stage_match(&Matrix::zeros(0, 0), &[], &cfg).unwrap();
        assert!(out.matches.is_empty());
        let out = two_stage_match(&Matrix::zeros(2, 0), &[0.9, 0.8], &cfg).unwrap();
        assert_eq!(out.unmatched_dets, vec![0, 1]);
        assert!(out.unmatched_tracks.is_empty());
    }

    #[test]
    fn two_stage_single_high_match() {
        let cfg = MatchConfig::default();
        let out = two_stage_match(&m(&[vec![0.9]]), &[0.8], &cfg).unwrap();
        assert_eq!(out.matches, vec![(0, 0)]);
        assert!(out.unmatched_dets.is_empty());
        assert!(out.unmatched_tracks.is_empty());
    }

    #[test]
    fn two_stage_high_priority_over_low() {
        // The high-confidence detection takes the only track even though
        // the low-confidence one has similar affinity.
        let cfg = MatchConfig::default();
        let s = m(&[vec![0.8], vec![0.7]]);
        let out = two_stage_match(&s, &[0.9, 0.2], &cfg).unwrap();
        assert_eq!(out.matches, vec![(0, 0)]);
        assert_eq!(out.unmatched_dets, vec![1]);
        // Reversed order: the low row comes first but still waits.
        let s = m(&[vec![0.7], vec![0.8]]);
        let out = two_stage_match(&s, &[0.2, 0.9], &cfg).unwrap();
        assert_eq!(out.matches, vec![(1, 0)]);
        assert_eq!(out.unmatched_dets, vec![0]);
    }

    #[test]
    fn two_stage_low_rows_use_leftover_tracks() {
        let cfg = MatchConfig::default();
        let s = m(&[vec![0.9, 0.1], vec![0.1, 0.8]]);
        let out = two_stage_match(&s, &[0.9, 0.3], &cfg).unwrap();
        assert_eq!(out.matches, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn two_stage_rejects_below_s_min() {
        let cfg = MatchConfig::default();
        let s = m(&[vec![0.2]]);
        let out = two_stage_match(&s, &[0.9], &cfg).unwrap();
        assert!(out.matches.is_empty());
        assert_eq!(out.unmatched_dets, vec![0]);
        assert_eq!(out.unmatched_tracks, vec![0]);
    }

    #[test]
    fn two_stage_partition_property() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let cfg = MatchConfig::default();
        for _ in 0..200 {
            let rows = rng.random_range(0..=6);
            let cols = rng.random_range(0..=6);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = Matrix::from_vec(rows, cols, data).unwrap();
            let scores: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..1.0)).collect();
            let out = two_stage_match(&s, &scores, &cfg).unwrap();
            let mut det_seen = vec![0u8; rows];
            let mut trk_seen = vec![0u8; cols];
            for &(r, c) in &out.matches {
                det_seen[r] += 1;
                trk_seen[c] += 1;
                assert!(s.get(r, c) >= cfg.s_min);
            }
            for &r in &out.unmatched_dets {
                det_seen[r] += 1;
            }
            for &c in &out.unmatched_tracks {
                trk_seen[c] += 1;
            }
            assert!(det_seen.iter().all(|&n| n == 1));
            assert!(trk_seen.iter().all(|&n| n == 1));
        }
    }

    fn demo_model() -> SimDecoderModel {
        SimDecoderModel::new(ModelConfig::default(), 7).unwrap()
    }

    fn demo_grid(d_feat: usize) -> FeatureGrid {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut grid = FeatureGrid::zeros(6, 6, d_feat, 1.0 / 6.0);
        for r in 0..6 {
            for c in 0..6 {
                for ch in 0..d_feat {
                    grid.cell_mut(r, c)[ch] = rng.random_range(-1.0..1.0);
                }
            }
        }
        grid
    }

    fn det(cx: f64, cy: f64, score: f64, frame: usize) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, 0.15, 0.2),
            score,
            frame_index: frame,
        }
    }

    #[test]
    fn tracker_first_frame_births_all() {
        let model = demo_model();
        let grid = demo_grid(model.cfg.d_feat);
        let mut state = TrackerState::new(MatchConfig::default());
        let dets = vec![det(0.2, 0.2, 0.9, 0), det(0.5, 0.5, 0.8, 0), det(0.8, 0.8, 0.7, 0)];
        let recs = tracker_step(&mut state, &model, &dets, &grid).unwrap();
        assert_eq!(recs.len(), 3);
        let ids: Vec<u64> = recs.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(state.tracks.len(), 3);
        assert_eq!(state.next_id, 4);
    }

    #[test]
    fn tracker_empty_frame_ages_tracks() {
        let model = demo_model();
        let grid = demo_grid(model.cfg.d_feat);
        let mut state = TrackerState::new(MatchConfig::default());
        tracker_step(&mut state, &model, &[det(0.3, 0.3, 0.9, 0)], &grid).unwrap();
        let recs = tracker_step(&mut state, &model, &[], &grid).unwrap();
        assert!(recs.is_empty());
        assert_eq!(state.tracks[0].misses, 1);
        assert_eq!(state.tracks[0].age, 1);
    }

    #[test]
    fn tracker_retires_after_max_misses() {
        let model = demo_model();
        let grid = demo_grid(model.cfg.d_feat);
        let cfg = MatchConfig {
            max_misses: 2,
            ..Default::default()
        };
        let mut state = TrackerState::new(cfg);
        tracker_step(&mut state, &model, &[det(0.3, 0.3, 0.9, 0)], &grid).unwrap();
        for _ in 0..2 {
            tracker_step(&mut state, &model, &[], &grid).unwrap();
        }
        assert_eq!(state.tracks.len(), 1);
        tracker_step(&mut state, &model, &[], &grid).unwrap();
        assert!(state.tracks.is_empty());
        // A later birth must not reuse the retired id.
        let recs = tracker_step(&mut state, &model, &[det(0.3, 0.3, 0.9, 4)], &grid).unwrap();
        assert_eq!(recs[0].id, 2);
    }

    #[test]
    fn tracker_every_detection_appears_once() {
        let model = demo_model();
        let grid = demo_grid(model.cfg.d_feat);
        let frames: Vec<(Vec<Detection>, FeatureGrid)> = (0..4)
            .map(|f| {
                let dets = vec![
                    det(0.2 + 0.05 * f as f64, 0.3, 0.9, f),
                    det(0.7 - 0.05 * f as f64, 0.6, 0.8, f),
                ];
                (dets, grid.clone())
            })
            .collect();
        let table = track_sequence(&model, &frames, MatchConfig::default()).unwrap();
        for f in 0..4 {
            assert_eq!(table.iter().filter(|r| r.frame == f).count(), 2);
        }
        let sorted = {
            let mut t = table.clone();
            t.sort_by_key(|r| (r.frame, r.id));
            t
        };
        assert_eq!(table, sorted);
        // Deterministic rerun.
        let again = track_sequence(&model, &frames, MatchConfig::default()).unwrap();
        assert_eq!(table, again);
    }
}
