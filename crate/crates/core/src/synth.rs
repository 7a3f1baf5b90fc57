//! Synthetic supervision source: identity-bearing objects moving over a
//! unit frame, rendered into feature grids, plus a detection corrupter.
//! Identity signal is planted directly in the grid (each object owns a
//! fixed appearance vector), so association failures downstream are
//! attributable to the model rather than to missing signal.

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::net::FeatureGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    /// Fixed velocity; the box clips at the frame border.
    ConstantVelocity,
    /// Per-frame Gaussian steps scaled by `speed`.
    RandomWalk,
    /// Fixed speed with reflection at the frame border.
    Bounce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub d_feat: usize,
    /// Output frames after decimation; the world is simulated at
    /// `frame_count * fps_decimation` steps and every k-th step is kept.
    pub frame_count: usize,
    /// Cells per grid side; stride is 1/grid_size of the unit frame.
    pub grid_size: usize,
    pub motion: MotionModel,
    /// Per simulated-frame displacement scale in frame units.
    pub speed: f64,
    /// Minimum pairwise L2 distance between identity vectors.
    pub delta_app: f64,
    /// When false every object reports full visibility regardless of
    /// overlap; rendering still resolves overlaps by depth.
    pub occlusion: bool,
    pub fps_decimation: usize,
    /// Std-dev of per-cell feature noise.
    pub sigma_feat: f64,
    /// Per-box false-negative probability.
    pub p_fn: f64,
    /// False-positive rate; the per-frame count is Poisson(p_fp * num_objects).
    pub p_fp: f64,
    /// Std-dev of jitter applied to all four box coordinates.
    pub sigma_box: f64,
    /// Scores are visibility * (1 - u) with u ~ U(0, score_noise).
    pub score_noise: f64,
    /// Box width/height sampled uniformly from this range per object.
    pub box_size: [f64; 2],
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 8,
            d_feat: 8,
            frame_count: 40,
            grid_size: 32,
            motion: MotionModel::Bounce,
            speed: 0.008,
            delta_app: 2.0,
            occlusion: true,
            fps_decimation: 1,
            sigma_feat: 0.03,
            p_fn: 0.05,
            p_fp: 0.05,
            sigma_box: 0.02,
            score_noise: 0.3,
            box_size: [0.16, 0.28],
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !prob(self.p_fn) || !prob(self.p_fp) {
            return Err(Error::Config("p_fn and p_fp must lie in [0,1]".into()));
        }
        if !(self.delta_app > 0.0) {
            return Err(Error::Config("delta_app must be positive".into()));
        }
        if self.fps_decimation < 1 {
            return Err(Error::Config("fps_decimation must be at least 1".into()));
        }
        if self.d_feat == 0 || self.frame_count == 0 || self.grid_size < 2 {
            return Err(Error::Config(
                "d_feat, frame_count, and grid_size must be positive".into(),
            ));
        }
        if !(self.speed >= 0.0 && self.sigma_feat >= 0.0 && self.sigma_box >= 0.0) {
            return Err(Error::Config("scales must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.score_noise) {
            return Err(Error::Config("score_noise must lie in [0,1)".into()));
        }
        let [lo, hi] = self.box_size;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config("box_size range must satisfy 0 < lo <= hi < 1".into()));
        }
        Ok(())
    }
}

/// One ground-truth object in one frame. Depth equals object index: object
/// 0 renders front-most and occludes higher indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtObject {
    pub id: u64,
    pub bbox: BBox,
    pub visibility: f64,
}

#[derive(Debug, Clone)]
pub struct GtFrame {
    pub frame_index: usize,
    pub objects: Vec<GtObject>,
    pub grid: FeatureGrid,
}

#[derive(Debug, Clone)]
pub struct GtSequence {
    pub frames: Vec<GtFrame>,
    /// Identity vectors, indexed by object id - 1.
    pub appearance: Vec<Vec<f64>>,
}

struct ObjectState {
    w: f64,
    h: f64,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

/// Fraction of `target` not covered by any box in `front`, estimated on a
/// 20x20 sample lattice inside the target.
fn visible_fraction(target: &BBox, front: &[BBox]) -> f64 {
    if front.is_empty() {
        return 1.0;
    }
    const K: usize = 20;
    let mut open = 0usize;
    for i in 0..K {
        for j in 0..K {
            let x = target.left() + (j as f64 + 0.5) / K as f64 * target.w;
            let y = target.top() + (i as f64 + 0.5) / K as f64 * target.h;
            let covered = front
                .iter()
                .any(|b| x >= b.left() && x <= b.right() && y >= b.top() && y <= b.bottom());
            if !covered {
                open += 1;
            }
        }
    }
    open as f64 / (K * K) as f64
}

/// Sample identity vectors with all pairwise distances at least
/// `delta_app`; components are U(-1, 1).
fn sample_appearance(cfg: &SceneConfig, rng: &mut ChaCha12Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_objects);
    let mut draws = 0usize;
    while out.len() < cfg.num_objects {
        if draws >= 10_000 {
            return Err(Error::Config(format!(
                "could not place {} identity vectors at separation {} in {} draws",
                cfg.num_objects, cfg.delta_app, draws
            )));
        }
        draws += 1;
        let cand: Vec<f64> = (0..cfg.d_feat).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ok = out.iter().all(|v| {
            let d2: f64 = v.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= cfg.delta_app
        });
        if ok {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Render one frame's objects into a feature grid: a cell whose center
/// falls inside a box receives the front-most such object's identity
/// vector; every cell then gets N(0, sigma_feat) noise per channel.
pub fn render_grid(
    objects: &[GtObject],
    appearance: &[Vec<f64>],
    cfg: &SceneConfig,
    rng: &mut ChaCha12Rng,
) -> FeatureGrid {
    let n = cfg.grid_size;
    let stride = 1.0 / n as f64;
    let mut grid = FeatureGrid::zeros(n, n, cfg.d_feat, stride);
    for r in 0..n {
        for c in 0..n {
            let x = (c as f64 + 0.5) * stride;
            let y = (r as f64 + 0.5) * stride;
            let owner = objects.iter().find(|o| {
                let b = &o.bbox;
                x >= b.left() && x <= b.right() && y >= b.top() && y <= b.bottom()
            });
            let cell = grid.cell_mut(r, c);
            if let Some(o) = owner {
                cell.copy_from_slice(&appearance[(o.id - 1) as usize]);
            }
            for ch in 0..cfg.d_feat {
                let noise: f64 = rng.sample(StandardNormal);
                cell[ch] += cfg.sigma_feat * noise;
            }
        }
    }
    grid
}

/// Simulate the scene and keep every k-th frame, re-indexed consecutively.
/// Placement uses RNG stream 0, motion stream 1, and rendering stream 2 of
/// the seed, so kept-frame geometry is independent of the decimation factor.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<GtSequence> {
    cfg.validate()?;
    let mut rng_place = ChaCha12Rng::seed_from_u64(seed);
    rng_place.set_stream(0);
    let mut rng_motion = ChaCha12Rng::seed_from_u64(seed);
    rng_motion.set_stream(1);
    let mut rng_render = ChaCha12Rng::seed_from_u64(seed);
    rng_render.set_stream(2);

    let appearance = sample_appearance(cfg, &mut rng_place)?;
    // Spread initial centers apart (best effort within a bounded number of
    // draws) so objects are born clearly separated; crossings then develop
    // from motion rather than from the initial layout.
    let min_sep = cfg.box_size[1];
    let mut objs: Vec<ObjectState> = Vec::with_capacity(cfg.num_objects);
    for _ in 0..cfg.num_objects {
        let w = rng_place.random_range(cfg.box_size[0]..=cfg.box_size[1]);
        let h = rng_place.random_range(cfg.box_size[0]..=cfg.box_size[1]);
        let mut best: Option<(f64, f64, f64)> = None;
        for _ in 0..100 {
            let cx = rng_place.random_range(w / 2.0..1.0 - w / 2.0);
            let cy = rng_place.random_range(h / 2.0..1.0 - h / 2.0);
            let near = objs
                .iter()
                .map(|o: &ObjectState| (o.cx - cx).hypot(o.cy - cy))
                .fold(f64::INFINITY, f64::min);
            if best.map(|(b, _, _)| near > b).unwrap_or(true) {
                best = Some((near, cx, cy));
            }
            if near >= min_sep {
                break;
            }
        }
        let (_, cx, cy) = best.expect("at least one placement draw");
        let dir = rng_place.random_range(0.0..std::f64::consts::TAU);
        objs.push(ObjectState {
            w,
            h,
            cx,
            cy,
            vx: cfg.speed * dir.cos(),
            vy: cfg.speed * dir.sin(),
        });
    }

    let mut frames = Vec::with_capacity(cfg.frame_count);
    let total_steps = cfg.frame_count * cfg.fps_decimation;
    for step in 0..total_steps {
        if step > 0 {
            for o in objs.iter_mut() {
                match cfg.motion {
                    MotionModel::ConstantVelocity => {
                        o.cx = (o.cx + o.vx).clamp(o.w / 2.0, 1.0 - o.w / 2.0);
                        o.cy = (o.cy + o.vy).clamp(o.h / 2.0, 1.0 - o.h / 2.0);
                    }
                    MotionModel::RandomWalk => {
                        let nx: f64 = rng_motion.sample(StandardNormal);
                        let ny: f64 = rng_motion.sample(StandardNormal);
                        o.cx = (o.cx + cfg.speed * nx).clamp(o.w / 2.0, 1.0 - o.w / 2.0);
                        o.cy = (o.cy + cfg.speed * ny).clamp(o.h / 2.0, 1.0 - o.h / 2.0);
                    }
                    MotionModel::Bounce => {
                        o.cx += o.vx;
                        o.cy += o.vy;
                        let (lo, hi) = (o.w / 2.0, 1.0 - o.w / 2.0);
                        if o.cx < lo {
                            o.cx = 2.0 * lo - o.cx;
                            o.vx = -o.vx;
                        } else if o.cx > hi {
                            o.cx = 2.0 * hi - o.cx;
                            o.vx = -o.vx;
                        }
                        let (lo, hi) = (o.h / 2.0, 1.0 - o.h / 2.0);
                        if o.cy < lo {
                            o.cy = 2.0 * lo - o.cy;
                            o.vy = -o.vy;
                        } else if o.cy > hi {
                            o.cy = 2.0 * hi - o.cy;
                            o.vy = -o.vy;
                        }
                    }
                }
            }
        }
        if step % cfg.fps_decimation != 0 {
            continue;
        }
        let boxes: Vec<BBox> = objs.iter().map(|o| BBox::new(o.cx, o.cy, o.w, o.h)).collect();
        let objects: Vec<GtObject> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| GtObject {
                id: (i + 1) as u64,
                bbox: *b,
                visibility: if cfg.occlusion {
                    visible_fraction(b, &boxes[..i])
                } else {
                    1.0
                },
            })
            .collect();
        let grid = render_grid(&objects, &appearance, cfg, &mut rng_render);
        frames.push(GtFrame {
            frame_index: step / cfg.fps_decimation,
            objects,
            grid,
        });
    }
    Ok(GtSequence { frames, appearance })
}

/// Corrupt one frame's ground truth into a detection list: visible boxes
/// dropped with probability p_fn, survivors jittered on all four
/// coordinates, plus Poisson false positives with low scores.
pub fn simulate_detections(
    frame: &GtFrame,
    cfg: &SceneConfig,
    rng: &mut ChaCha12Rng,
) -> Vec<Detection> {
    let mut dets = Vec::new();
    for o in &frame.objects {
        if o.visibility <= 0.0 {
            continue;
        }
        if rng.random::<f64>() < cfg.p_fn {
            continue;
        }
        let mut jitter = |v: f64| -> f64 {
            let n: f64 = rng.sample(StandardNormal);
            v + cfg.sigma_box * n
        };
        let bbox = BBox::new(
            jitter(o.bbox.cx),
            jitter(o.bbox.cy),
            jitter(o.bbox.w).max(0.01),
            jitter(o.bbox.h).max(0.01),
        );
        let u = rng.random_range(0.0..cfg.score_noise.max(f64::MIN_POSITIVE));
        dets.push(Detection {
            bbox,
            score: o.visibility * (1.0 - u),
            frame_index: frame.frame_index,
        });
    }
    let lambda = cfg.p_fp * frame.objects.len() as f64;
    let n_fp = if lambda > 0.0 {
        let p: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
        p as usize
    } else {
        0
    };
    for _ in 0..n_fp {
        let w = rng.random_range(cfg.box_size[0]..=cfg.box_size[1]);
        let h = rng.random_range(cfg.box_size[0]..=cfg.box_size[1]);
        let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
        dets.push(Detection {
            bbox: BBox::new(cx, cy, w, h),
            score: rng.random_range(0.05..0.3),
            frame_index: frame.frame_index,
        });
    }
    dets
}

/// One scene draw in training/eval form: rendered grid, corrupted
/// detections, and GT boxes per frame. Detection noise is seeded from the
/// scene seed so the whole frame list is reproducible from (cfg, seed).
pub fn sequence_frames(cfg: &SceneConfig, seed: u64) -> Result<Vec<crate::train::ClipFrame>> {
    let seq = generate_sequence(cfg, seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
    Ok(seq
        .frames
        .iter()
        .map(|f| crate::train::ClipFrame {
            grid: f.grid.clone(),
            detections: simulate_detections(f, cfg, &mut rng),
            gt: f.objects.iter().map(|o| (o.bbox, o.id)).collect(),
        })
        .collect())
}

/// A batch of [`sequence_frames`] draws over consecutive seeds.
pub fn make_dataset(
    cfg: &SceneConfig,
    seeds: std::ops::Range<u64>,
) -> Result<Vec<Vec<crate::train::ClipFrame>>> {
    seeds.map(|s| sequence_frames(cfg, s)).collect()
}
