//! Scratch calibration run: trains the toy model on synthetic sequences
//! and prints IDF1 against the overlap baseline at two decimation rates.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use simtrack_core::*;

fn make_set(scene: &SceneConfig, seeds: std::ops::Range<u64>) -> Vec<Vec<ClipFrame>> {
    seeds
        .map(|s| {
            let seq = generate_sequence(scene, s).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(s ^ 0x5eed);
            seq.frames
                .iter()
                .map(|f| ClipFrame {
                    grid: f.grid.clone(),
                    detections: simulate_detections(f, scene, &mut rng),
                    gt: f.objects.iter().map(|o| (o.bbox, o.id)).collect(),
                })
                .collect()
        })
        .collect()
}

fn gt_table(frames: &[ClipFrame]) -> Vec<TrackRecord> {
    let mut t = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        for (b, id) in &f.gt {
            t.push(TrackRecord {
                frame: i,
                id: *id,
                bbox: *b,
                score: 1.0,
            });
        }
    }
    t
}

fn model_idf1(model: &SimDecoderModel, set: &[Vec<ClipFrame>], mc: &MatchConfig) -> (f64, u64) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for frames in set {
        let seq: Vec<(Vec<Detection>, FeatureGrid)> = frames
            .iter()
            .map(|f| (f.detections.clone(), f.grid.clone()))
            .collect();
        preds.push(track_sequence(model, &seq, *mc).unwrap());
        gts.push(gt_table(frames));
    }
    let pairs: Vec<(&[TrackRecord], &[TrackRecord])> = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    let rep = evaluate_many(&pairs, 0.5).unwrap();
    (rep.idf1, rep.id_switches)
}

/// Appearance-only ceiling: classify each detection by the mean of grid cells
/// inside its box against the true identity vectors, with no temporal state.
/// Measures how much identity signal survives rendering, occlusion and jitter.
fn appearance_oracle_idf1(scene: &SceneConfig, seeds: std::ops::Range<u64>) -> f64 {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in seeds {
        let seq = generate_sequence(scene, s).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(s ^ 0x5eed);
        let mut table = Vec::new();
        let mut gt = Vec::new();
        let mut next_dup = 5_000_000u64;
        for (fi, f) in seq.frames.iter().enumerate() {
            for o in &f.objects {
                gt.push(TrackRecord {
                    frame: fi,
                    id: o.id,
                    bbox: o.bbox,
                    score: 1.0,
                });
            }
            let mut used = std::collections::HashSet::new();
            let dets = simulate_detections(f, scene, &mut rng);
            for d in &dets {
                let g = &f.grid;
                let stride = g.stride;
                let (mut acc, mut n) = (vec![0.0; g.d_feat], 0u32);
                for cy in 0..g.height {
                    for cx in 0..g.width {
                        let px = (cx as f64 + 0.5) * stride;
                        let py = (cy as f64 + 0.5) * stride;
                        if (px - d.bbox.cx).abs() <= d.bbox.w / 2.0
                            && (py - d.bbox.cy).abs() <= d.bbox.h / 2.0
                        {
                            for (a, v) in acc.iter_mut().zip(g.cell(cy, cx)) {
                                *a += v;
                            }
                            n += 1;
                        }
                    }
                }
                if n == 0 {
                    continue;
                }
                for a in &mut acc {
                    *a /= n as f64;
                }
                let id = seq
                    .appearance
                    .iter()
                    .enumerate()
                    .map(|(i, app)| {
                        let d2: f64 = app.iter().zip(&acc).map(|(x, y)| (x - y) * (x - y)).sum();
                        (d2, i as u64 + 1)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap()
                    .1;
                let id = if used.insert(id) {
                    id
                } else {
                    next_dup += 1;
                    next_dup
                };
                table.push(TrackRecord {
                    frame: fi,
                    id,
                    bbox: d.bbox,
                    score: d.score,
                });
            }
        }
        table.sort_by_key(|r| (r.frame, r.id));
        preds.push(table);
        gts.push(gt);
    }
    let pairs: Vec<(&[TrackRecord], &[TrackRecord])> = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    evaluate_many(&pairs, 0.5).unwrap().idf1
}

/// Upper bound: assign each detection its gt identity directly; false
/// positives get fresh ids (mirroring init_all births).
fn oracle_idf1(set: &[Vec<ClipFrame>]) -> f64 {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for frames in set {
        let mut table = Vec::new();
        let mut next_fp = 1_000_000u64;
        for (fi, f) in frames.iter().enumerate() {
            let ids = assign_gt(&f.detections, &f.gt, 0.5).unwrap();
            for (d, id) in f.detections.iter().zip(&ids) {
                let id = id.unwrap_or_else(|| {
                    next_fp += 1;
                    next_fp
                });
                table.push(TrackRecord {
                    frame: fi,
                    id,
                    bbox: d.bbox,
                    score: d.score,
                });
            }
        }
        table.sort_by_key(|r| (r.frame, r.id));
        preds.push(table);
        gts.push(gt_table(frames));
    }
    let pairs: Vec<(&[TrackRecord], &[TrackRecord])> = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    evaluate_many(&pairs, 0.5).unwrap().idf1
}

fn baseline_idf1(set: &[Vec<ClipFrame>]) -> f64 {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for frames in set {
        let dets: Vec<Vec<Detection>> = frames.iter().map(|f| f.detections.clone()).collect();
        preds.push(track_sequence_iou(&dets, BaselineConfig::default()).unwrap());
        gts.push(gt_table(frames));
    }
    let pairs: Vec<(&[TrackRecord], &[TrackRecord])> = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    evaluate_many(&pairs, 0.5).unwrap().idf1
}

/// Mean temporal margin over consecutive frame pairs: decode frame f with
/// no tracks, carry its gt-assigned queries as tracks into frame f+1, and
/// split that S by identity agreement.
fn temporal_margin(model: &SimDecoderModel, frames: &[ClipFrame]) -> (f64, f64, f64) {
    let (mut p_sum, mut n_sum, mut m_sum) = (0.0, 0.0, 0.0);
    let mut count = 0.0;
    for w in frames.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.detections.is_empty() || b.detections.is_empty() {
            continue;
        }
        let ids_a = assign_gt(&a.detections, &a.gt, 0.5).unwrap();
        let empty = Matrix::zeros(0, model.cfg.d_model);
        let out_a = model.decoder_forward(&a.detections, &empty, &a.grid).unwrap();
        let out_b = model
            .decoder_forward(&b.detections, &out_a.final_layer().queries, &b.grid)
            .unwrap();
        let ids_b = assign_gt(&b.detections, &b.gt, 0.5).unwrap();
        let mask = PosMask::from_ids(&ids_b, &ids_a);
        if let Ok((p, n, m)) = similarity_margin(&out_b.final_layer().temporal.s, &mask) {
            p_sum += p;
            n_sum += n;
            m_sum += m;
            count += 1.0;
        }
    }
    (p_sum / count, n_sum / count, m_sum / count)
}

/// Per-gt-trajectory split accounting: greedy IoU>=0.5 per-frame matching of
/// tracker records to gt, then per trajectory the share of frames spent on
/// its majority pred id, on minority ids (splits), and unmatched.
fn split_analysis(model: &SimDecoderModel, set: &[Vec<ClipFrame>], mc: &MatchConfig) {
    let (mut majority, mut minority, mut unmatched) = (0u64, 0u64, 0u64);
    let mut switch_events = 0u64;
    let mut frag: Vec<(usize, usize)> = Vec::new();
    for frames in set {
        let seq: Vec<(Vec<Detection>, FeatureGrid)> = frames
            .iter()
            .map(|f| (f.detections.clone(), f.grid.clone()))
            .collect();
        let recs = track_sequence(model, &seq, *mc).unwrap();
        // gt id -> per frame matched pred id (or none)
        let mut matched: std::collections::HashMap<u64, Vec<Option<u64>>> = Default::default();
        for (fi, f) in frames.iter().enumerate() {
            let rows: Vec<&TrackRecord> = recs.iter().filter(|r| r.frame == fi).collect();
            let mut cands: Vec<(f64, usize, u64)> = Vec::new();
            for (gi, (gb, gid)) in f.gt.iter().enumerate() {
                for r in &rows {
                    let v = iou(gb, &r.bbox).unwrap_or(0.0);
                    if v >= 0.5 {
                        cands.push((v, gi, r.id));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut gt_done = vec![false; f.gt.len()];
            let mut pred_done: std::collections::HashSet<u64> = Default::default();
            let mut frame_match: std::collections::HashMap<u64, u64> = Default::default();
            for (_, gi, pid) in cands {
                if gt_done[gi] || pred_done.contains(&pid) {
                    continue;
                }
                gt_done[gi] = true;
                pred_done.insert(pid);
                frame_match.insert(f.gt[gi].1, pid);
            }
            for (_, gid) in &f.gt {
                matched
                    .entry(*gid)
                    .or_default()
                    .push(frame_match.get(gid).copied());
            }
        }
        for (_, seq_ids) in matched {
            let mut counts: std::collections::HashMap<u64, u64> = Default::default();
            let mut last: Option<u64> = None;
            for m in &seq_ids {
                match m {
                    Some(pid) => {
                        *counts.entry(*pid).or_default() += 1;
                        if let Some(l) = last {
                            if l != *pid {
                                switch_events += 1;
                            }
                        }
                        last = Some(*pid);
                    }
                    None => unmatched += 1,
                }
            }
            let total: u64 = counts.values().sum();
            let majo = counts.values().copied().max().unwrap_or(0);
            majority += majo;
            minority += total - majo;
            if counts.len() > 1 {
                frag.push((counts.len(), (total - majo) as usize));
            }
        }
    }
    frag.sort_by(|a, b| b.1.cmp(&a.1));
    println!(
        "splits: majority {majority} minority {minority} unmatched {unmatched} | id-change events {switch_events} | fragmented trajs {} worst {:?}",
        frag.len(),
        &frag[..frag.len().min(8)]
    );
}

/// Run the real tracker over one sequence while shadowing each track with the
/// gt identity of its source detection; report per-frame S margins and the
/// fraction of matches that pair a detection with a track of the same gt id.
/// Assumes no retirement (short sequences, large max_misses).
fn tracker_diag(model: &SimDecoderModel, frames: &[ClipFrame], mc: &MatchConfig) {
    let mut state = TrackerState::new(*mc);
    let mut track_gt: Vec<Option<u64>> = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        if f.detections.is_empty() {
            continue;
        }
        let ids_det = assign_gt(&f.detections, &f.gt, 0.5).unwrap();
        let rows: Vec<Vec<f64>> = state.tracks.iter().map(|t| t.query.clone()).collect();
        let tracks_m = if rows.is_empty() {
            Matrix::zeros(0, model.cfg.d_model)
        } else {
            Matrix::from_rows(&rows).unwrap()
        };
        let out = model.decoder_forward(&f.detections, &tracks_m, &f.grid).unwrap();
        let s = &out.final_layer().temporal.s;
        let mask = PosMask::from_ids(&ids_det, &track_gt);
        let scores: Vec<f64> = f.detections.iter().map(|d| d.score).collect();
        let outcome = two_stage_match(s, &scores, mc).unwrap();
        let (mut good, mut bad) = (0usize, 0usize);
        for &(r, c) in &outcome.matches {
            match (ids_det[r], track_gt[c]) {
                (Some(a), Some(b)) if a == b => good += 1,
                _ => bad += 1,
            }
        }
        let stats = similarity_margin(s, &mask)
            .map(|(p, n, g)| format!("pos {p:.3} neg {n:.3} gap {g:.3}"))
            .unwrap_or_else(|_| "margin n/a".into());
        println!(
            "  f{fi:02}: dets {} tracks {} matched {} (good {good} bad {bad}) births {} | {stats}",
            f.detections.len(),
            state.tracks.len(),
            outcome.matches.len(),
            outcome.unmatched_dets.len(),
        );
        if fi < 6 {
            for &(r, c) in &outcome.matches {
                let best = (0..s.cols()).max_by(|&a, &b| s.get(r, a).total_cmp(&s.get(r, b)));
                let (bc, bv, bl) = best
                    .map(|j| (j as i64, s.get(r, j), track_gt.get(j).copied().flatten()))
                    .unwrap_or((-1, f64::NAN, None));
                println!(
                    "      det r{r} gt {:?} -> track c{c} label {:?} s {:.3} | row argmax c{bc} label {bl:?} s {bv:.3}",
                    ids_det[r],
                    track_gt[c],
                    s.get(r, c)
                );
            }
        }
        // Post-step track order is pre-step order plus births appended; update
        // the shadow list the same way before mutating the state.
        for &(r, c) in &outcome.matches {
            track_gt[c] = ids_det[r];
        }
        for &r in &outcome.unmatched_dets {
            if mc.init_all || f.detections[r].score >= mc.tau_high {
                track_gt.push(ids_det[r]);
            }
        }
        tracker_step(&mut state, model, &f.detections, &f.grid).unwrap();
        assert_eq!(state.tracks.len(), track_gt.len(), "retirement not handled");
    }
}

/// Aggregate per-match classification over a whole eval set. `vis` carries per
/// sequence, per frame, per object (id, visibility), rebuilt from the same
/// seeds that produced the set.
fn assoc_stats(
    model: &SimDecoderModel,
    set: &[Vec<ClipFrame>],
    vis: &[Vec<Vec<(u64, f64)>>],
    mc: &MatchConfig,
) {
    let (mut good, mut wrong_real, mut to_junk, mut fp_real, mut fp_junk) = (0u64, 0, 0, 0, 0);
    let (mut unm_real, mut unm_fp) = (0u64, 0u64);
    let (mut nearest_own, mut nearest_foreign) = (0u64, 0u64);
    let mut wrong_vis = Vec::new();
    for (si, frames) in set.iter().enumerate() {
        let mut state = TrackerState::new(*mc);
        let mut track_gt: Vec<Option<u64>> = Vec::new();
        for (fi, f) in frames.iter().enumerate() {
            if f.detections.is_empty() {
                continue;
            }
            let ids_det = assign_gt(&f.detections, &f.gt, 0.5).unwrap();
            // Best-overlap identity with no threshold, to tell boxes that
            // narrowly failed the assignment gate from true false positives.
            let nearest: Vec<Option<u64>> = f
                .detections
                .iter()
                .map(|d| {
                    f.gt
                        .iter()
                        .map(|(b, id)| (iou(&d.bbox, b).unwrap_or(0.0), *id))
                        .max_by(|a, b| a.0.total_cmp(&b.0))
                        .filter(|(v, _)| *v > 0.1)
                        .map(|(_, id)| id)
                })
                .collect();
            let frame_vis = &vis[si][fi];
            let vis_of = |id: u64| -> f64 {
                frame_vis
                    .iter()
                    .find(|(g, _)| *g == id)
                    .map(|(_, v)| *v)
                    .unwrap_or(1.0)
            };
            let rows: Vec<Vec<f64>> = state.tracks.iter().map(|t| t.query.clone()).collect();
            let tracks_m = if rows.is_empty() {
                Matrix::zeros(0, model.cfg.d_model)
            } else {
                Matrix::from_rows(&rows).unwrap()
            };
            let out = model.decoder_forward(&f.detections, &tracks_m, &f.grid).unwrap();
            let s = &out.final_layer().temporal.s;
            let scores: Vec<f64> = f.detections.iter().map(|d| d.score).collect();
            let outcome = two_stage_match(s, &scores, mc).unwrap();
            for &(r, c) in &outcome.matches {
                match (ids_det[r], track_gt[c]) {
                    (Some(a), Some(b)) if a == b => good += 1,
                    (Some(a), Some(_)) => {
                        wrong_real += 1;
                        wrong_vis.push(vis_of(a));
                    }
                    (Some(_), None) => to_junk += 1,
                    (None, Some(b)) => {
                        fp_real += 1;
                        if nearest[r] == Some(b) {
                            nearest_own += 1;
                        } else {
                            nearest_foreign += 1;
                        }
                    }
                    (None, None) => fp_junk += 1,
                }
            }
            for &r in &outcome.unmatched_dets {
                if ids_det[r].is_some() {
                    unm_real += 1;
                } else {
                    unm_fp += 1;
                }
            }
            for &(r, c) in &outcome.matches {
                track_gt[c] = ids_det[r];
            }
            for &r in &outcome.unmatched_dets {
                if mc.init_all || f.detections[r].score >= mc.tau_high {
                    track_gt.push(ids_det[r]);
                }
            }
            tracker_step(&mut state, model, &f.detections, &f.grid).unwrap();
            assert_eq!(state.tracks.len(), track_gt.len(), "shadow desync");
        }
    }
    let mean_vis = if wrong_vis.is_empty() {
        f64::NAN
    } else {
        wrong_vis.iter().sum::<f64>() / wrong_vis.len() as f64
    };
    let low_vis = wrong_vis.iter().filter(|v| **v < 0.7).count();
    println!(
        "assoc stats: good {good} wrong-real {wrong_real} (mean vis {mean_vis:.2}, {low_vis} at vis<0.7) to-junk {to_junk} fp->real {fp_real} (own-box {nearest_own}, foreign {nearest_foreign}) fp->junk {fp_junk} | unmatched real {unm_real} fp {unm_fp}"
    );
}

/// Train a fresh model on a scene variant and report the numbers that matter.
fn run_variant(name: &str, scene3: &SceneConfig, lr: f64, epochs: usize, clips: usize, n_train: u64) {
    run_variant_m(name, scene3, &ModelConfig::default(), lr, epochs, clips, n_train)
}

fn run_variant_m(
    name: &str,
    scene3: &SceneConfig,
    model_cfg: &ModelConfig,
    lr: f64,
    epochs: usize,
    clips: usize,
    n_train: u64,
) {
    let scene6 = SceneConfig {
        fps_decimation: 6,
        ..scene3.clone()
    };
    let train_set = make_set(scene3, 0..n_train);
    let eval3 = make_set(scene3, 1000..1010);
    let eval6 = make_set(&scene6, 2000..2010);
    let mut model = SimDecoderModel::new(model_cfg.clone(), 7).unwrap();
    let mc = MatchConfig::default();
    let mc_hi = MatchConfig {
        init_all: false,
        tau_high: 0.55,
        max_misses: 3,
        ..mc
    };
    let tc = TrainConfig {
        lr,
        epochs,
        clips_per_seq: clips,
        lr_decay: 0.5,
        lr_decay_every: 2,
        seed: 5,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let (_, log) = train_model(&mut model, &train_set, &LossWeights::default(), &tc, &mc).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let (i3, s3) = model_idf1(&model, &eval3, &mc_hi);
    let (i3a, s3a) = model_idf1(&model, &eval3, &mc);
    let (i6, _) = model_idf1(&model, &eval6, &mc_hi);
    let b6 = baseline_idf1(&eval6);
    println!(
        "{name}: oracle {:.3} | trained k3 {i3:.3} idsw {s3} (init_all {i3a:.3}/{s3a}) | k6 {i6:.3} base6 {b6:.3} | loss {:.0}->{:.0} {dt:.0}s",
        oracle_idf1(&eval3),
        log.first().unwrap().total,
        log.last().unwrap().total,
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);
    let clips: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let n_train: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);
    if args.get(5).map(|s| s == "sweep").unwrap_or(false) {
        let base = SceneConfig {
            fps_decimation: 3,
            ..Default::default()
        };
        run_variant("O default            ", &base, lr, epochs, clips, n_train);
        let s = SceneConfig {
            sigma_feat: 0.02,
            ..base.clone()
        };
        run_variant("S o + sfeat.02       ", &s, lr, epochs, clips, n_train);
        let t = SceneConfig {
            grid_size: 40,
            ..base.clone()
        };
        run_variant("T o + grid40         ", &t, lr, epochs, clips, n_train);
        let u = SceneConfig {
            delta_app: 2.4,
            ..base.clone()
        };
        run_variant("U o + dapp2.4        ", &u, lr, epochs, clips, n_train);
        run_variant("V o + clips20        ", &base, lr, epochs, 20, n_train);
        run_variant("W o + lr2e-3         ", &base, 2e-3, epochs, clips, n_train);
        run_variant("X o + lr5e-3         ", &base, 5e-3, epochs, clips, n_train);
        let p6 = ModelConfig {
            points: 6,
            ..Default::default()
        };
        run_variant_m("Y o + points6        ", &base, &p6, lr, epochs, clips, n_train);
        let b1 = SceneConfig {
            box_size: [0.14, 0.24],
            ..base.clone()
        };
        run_variant("B1 o + box.14-.24    ", &b1, lr, epochs, clips, n_train);
        let b2 = SceneConfig {
            box_size: [0.18, 0.30],
            ..base.clone()
        };
        run_variant("B2 o + box.18-.30    ", &b2, lr, epochs, clips, n_train);
        let s2 = SceneConfig {
            sigma_feat: 0.025,
            ..base.clone()
        };
        run_variant("S2 o + sfeat.025     ", &s2, lr, epochs, clips, n_train);
        let u2 = SceneConfig {
            delta_app: 2.2,
            ..base.clone()
        };
        run_variant("U2 o + dapp2.2       ", &u2, lr, epochs, clips, n_train);
        let v6 = SceneConfig {
            speed: 0.006,
            ..base.clone()
        };
        run_variant("V6 o + speed.006     ", &v6, lr, epochs, clips, n_train);
        let v7 = SceneConfig {
            speed: 0.007,
            ..base.clone()
        };
        run_variant("V7 o + speed.007     ", &v7, lr, epochs, clips, n_train);
        let oc = SceneConfig {
            occlusion: false,
            ..base.clone()
        };
        run_variant("OC o + no-occl       ", &oc, lr, epochs, clips, n_train);
        let ffn = ModelConfig {
            ffn_hidden: 128,
            ..Default::default()
        };
        run_variant_m("F o + ffn128         ", &base, &ffn, lr, epochs, clips, n_train);
        return;
    }
    let decay: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let decay_every: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(2);
    if args.get(5).map(|s| s == "seeds").unwrap_or(false) {
        let scene3 = SceneConfig {
            fps_decimation: 3,
            ..Default::default()
        };
        let train_set = make_set(&scene3, 0..n_train);
        let val = make_set(&scene3, 3000..3010);
        let eval3 = make_set(&scene3, 1000..1010);
        let mc = MatchConfig {
            init_all: false,
            tau_high: 0.55,
            max_misses: 3,
            ..Default::default()
        };
        for (init_seed, train_seed) in
            [(7u64, 5u64), (7, 6), (7, 7), (8, 5), (9, 5), (10, 6), (11, 7), (12, 8)]
        {
            let mut model = SimDecoderModel::new(ModelConfig::default(), init_seed).unwrap();
            let tc = TrainConfig {
                lr,
                epochs,
                clips_per_seq: clips,
                lr_decay: decay,
                lr_decay_every: decay_every,
                seed: train_seed,
                ..Default::default()
            };
            let train_mc = if args.get(8).map(|s| s == "evalmc").unwrap_or(false) {
                mc.clone()
            } else {
                MatchConfig::default()
            };
            let t0 = std::time::Instant::now();
            train_model(&mut model, &train_set, &LossWeights::default(), &tc, &train_mc).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            let (iv, sv) = model_idf1(&model, &val, &mc);
            let (ie, se) = model_idf1(&model, &eval3, &mc);
            println!(
                "init {init_seed} train {train_seed}: val IDF1 {iv:.3} idsw {sv} | eval IDF1 {ie:.3} idsw {se} | {dt:.0}s"
            );
        }
        return;
    }

    let scene3 = SceneConfig {
        fps_decimation: 3,
        ..Default::default()
    };
    let scene6 = SceneConfig {
        fps_decimation: 6,
        ..Default::default()
    };
    let train_set = make_set(&scene3, 0..n_train);
    let eval3 = make_set(&scene3, 1000..1010);
    let eval6 = make_set(&scene6, 2000..2010);

    println!(
        "baseline IDF1: k=3 {:.3}  k=6 {:.3} | oracle IDF1: k=3 {:.3}  k=6 {:.3} | appearance oracle k=3 {:.3}",
        baseline_idf1(&eval3),
        baseline_idf1(&eval6),
        oracle_idf1(&eval3),
        oracle_idf1(&eval6),
        appearance_oracle_idf1(&scene3, 1000..1010),
    );

    let mut model = SimDecoderModel::new(ModelConfig::default(), 7).unwrap();
    let mc = MatchConfig::default();
    let (idf1, sw) = model_idf1(&model, &eval3, &mc);
    let (p, n, m) = temporal_margin(&model, &eval3[0]);
    println!("untrained: k=3 IDF1 {idf1:.3} idsw {sw} | margin pos {p:.3} neg {n:.3} gap {m:.3}");

    let tc = TrainConfig {
        lr,
        epochs,
        clips_per_seq: clips,
        lr_decay: 0.5,
        lr_decay_every: 2,
        seed: 5,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let (_, log) = train_model(
        &mut model,
        &train_set,
        &LossWeights::default(),
        &tc,
        &mc,
    )
    .unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let first = log.first().unwrap().total;
    let last = log.last().unwrap().total;
    println!(
        "trained {} steps in {:.1}s (lr {lr}): loss {first:.3} -> {last:.3}",
        log.len(),
        dt
    );
    let r = log.last().unwrap();
    println!(
        "final terms: spatial {:.2} temporal {:.2} crossclip {:.2} l1 {:.3} giou {:.3}",
        r.spatial, r.temporal, r.crossclip, r.l1, r.giou
    );
    let (i3, s3) = model_idf1(&model, &eval3, &mc);
    let (i6, s6) = model_idf1(&model, &eval6, &mc);
    let (p, n, m) = temporal_margin(&model, &eval3[0]);
    println!("trained: k=3 IDF1 {i3:.3} idsw {s3} | k=6 IDF1 {i6:.3} idsw {s6} | margin pos {p:.3} neg {n:.3} gap {m:.3}");
    for mm in [1u32, 2, 3, 5, 10] {
        let mc2 = MatchConfig {
            max_misses: mm,
            ..mc
        };
        let (i, s) = model_idf1(&model, &eval3, &mc2);
        println!("  max_misses {mm}: k=3 IDF1 {i:.3} idsw {s}");
    }
    for smin in [0.4f64, 0.5, 0.6] {
        let mc2 = MatchConfig { s_min: smin, ..mc };
        let (i, s) = model_idf1(&model, &eval3, &mc2);
        println!("  s_min {smin}: k=3 IDF1 {i:.3} idsw {s}");
    }
    let mc_hi = MatchConfig {
        init_all: false,
        ..mc
    };
    let (i, s) = model_idf1(&model, &eval3, &mc_hi);
    let (i6b, s6b) = model_idf1(&model, &eval6, &mc_hi);
    println!("  init_all=false: k=3 IDF1 {i:.3} idsw {s} | k=6 IDF1 {i6b:.3} idsw {s6b}");
    for tau in [0.5f64, 0.52, 0.55, 0.58, 0.6] {
        for mm in [2u32, 3, 4, 5] {
            let mc2 = MatchConfig {
                init_all: false,
                tau_high: tau,
                max_misses: mm,
                ..mc
            };
            let (i, s) = model_idf1(&model, &eval3, &mc2);
            println!("  init_all=false tau {tau} mm {mm}: k=3 IDF1 {i:.3} idsw {s}");
        }
    }
    for smin in [0.2f64, 0.25, 0.35] {
        let mc2 = MatchConfig {
            init_all: false,
            tau_high: 0.55,
            max_misses: 3,
            s_min: smin,
            ..mc
        };
        let (i, s) = model_idf1(&model, &eval3, &mc2);
        println!("  init_all=false tau 0.55 mm 3 s_min {smin}: k=3 IDF1 {i:.3} idsw {s}");
    }
    let vis3: Vec<Vec<Vec<(u64, f64)>>> = (1000..1010u64)
        .map(|s| {
            let seq = generate_sequence(&scene3, s).unwrap();
            seq.frames
                .iter()
                .map(|f| f.objects.iter().map(|o| (o.id, o.visibility)).collect())
                .collect()
        })
        .collect();
    print!("init_all=true  | ");
    assoc_stats(&model, &eval3, &vis3, &mc);
    print!("init_all=false | ");
    assoc_stats(&model, &eval3, &vis3, &mc_hi);
    split_analysis(&model, &eval3, &mc_hi);
    println!("tracker diagnostics on eval3[0]:");
    tracker_diag(&model, &eval3[0], &mc_hi);
}
