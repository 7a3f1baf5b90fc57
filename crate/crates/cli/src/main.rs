//! Command-line driver: dataset synthesis, training, tracking, scoring,
//! similarity-matrix inspection, and the loss-ablation grid. One TOML file
//! carries the whole run configuration; `--set key=value` flags override
//! individual fields and always win. Every subcommand is deterministic
//! given its seeds.
//!
//! Exit codes: 0 success, 1 usage, 2 bad configuration, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use simtrack_core::{
    assign_gt, crossclip_margin, dump_config, evaluate_many, load_checkpoint, load_config,
    load_dataset, make_dataset, read_mot, rows_to_tracks, save_checkpoint, save_dataset,
    track_sequence, tracker_step_full, tracks_to_rows, write_mot, write_pgm, ClipFrame,
    Detection, Error as CoreError, FeatureGrid, LossWeights, Matrix, RunConfig, SimDecoderModel,
    TrackRecord, TrackerState, TrainLogRow, DEFAULT_FRAME_SIZE,
};

#[derive(Parser)]
#[command(
    name = "simtrack",
    version,
    about = "Appearance-only multi-object tracking: synthesize, train, track, score"
)]
struct Cli {
    /// TOML run configuration; omitted fields keep built-in defaults.
    #[arg(long, global = true, env = "SIMTRACK_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. --set train.lr=3e-3 (repeatable).
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset: per sequence gt.csv, det.csv, grids.bin.
    Gen {
        /// Output directory [default: paths.dataset]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of sequences.
        #[arg(long, default_value_t = 10)]
        seqs: u64,
        /// Base seed; sequence i draws from seed+i [default: scene.seed]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model on a dataset; write a checkpoint and a loss-curve CSV.
    Train {
        /// Dataset directory [default: paths.dataset]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint output path [default: paths.checkpoint]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Loss log CSV path [default: paths.log]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides train.seed; also seeds parameter init.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the tracker over a dataset; write one MOT file per sequence.
    Track {
        /// Dataset directory [default: paths.dataset]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint to load [default: paths.checkpoint]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for seq_NNN.txt files [default: paths.output]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score tracker output against dataset ground truth.
    Eval {
        /// Dataset directory holding the ground truth [default: paths.dataset]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory of seq_NNN.txt prediction files [default: paths.output]
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Overlap needed for a prediction to claim a GT box.
        #[arg(long, default_value_t = 0.5)]
        iou_thr: f64,
    },
    /// Dump similarity matrices for one clip as CSV plus PGM maps.
    Inspect {
        /// Dataset directory [default: paths.dataset]
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint to load [default: paths.checkpoint]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence index within the dataset.
        #[arg(long, default_value_t = 0)]
        seq: usize,
        /// First frame of the clip.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Clip length [default: train.n]
        #[arg(long)]
        len: Option<usize>,
        /// Output directory [default: paths.output]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every loss combination and tabulate held-out IDF1 and margins.
    Ablate {
        /// Training sequences drawn from scene.seed upward.
        #[arg(long, default_value_t = 20)]
        train_seqs: u64,
        /// Held-out sequences drawn from scene.seed+1000 upward.
        #[arg(long, default_value_t = 5)]
        eval_seqs: u64,
        /// Overrides scene.seed as the base for both splits.
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Failures ranked by exit code; usage errors come from argument handling,
/// config errors from resolving the run configuration, runtime errors from
/// everything after.
enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CResult<T> = Result<T, Failure>;

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let shown = e.print().is_ok();
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return if shown { 0 } else { 3 };
            }
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("simtrack: {}", f.message());
            f.code()
        }
    }
}

fn dispatch(cli: Cli) -> CResult<()> {
    let cfg = resolve_config(cli.config.as_deref(), &cli.set)?;
    if cli.dump_defaults {
        print!("{}", dump_config(&cfg));
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        return Err(Failure::Usage(
            "a subcommand is required; see --help".into(),
        ));
    };
    match cmd {
        Cmd::Gen { out, seqs, seed } => cmd_gen(&cfg, out, seqs, seed),
        Cmd::Train {
            dataset,
            checkpoint,
            log,
            seed,
        } => cmd_train(&cfg, dataset, checkpoint, log, seed),
        Cmd::Track {
            dataset,
            checkpoint,
            out,
        } => cmd_track(&cfg, dataset, checkpoint, out),
        Cmd::Eval {
            dataset,
            pred,
            iou_thr,
        } => cmd_eval(&cfg, dataset, pred, iou_thr),
        Cmd::Inspect {
            dataset,
            checkpoint,
            seq,
            start,
            len,
            out,
        } => cmd_inspect(&cfg, dataset, checkpoint, seq, start, len, out),
        Cmd::Ablate {
            train_seqs,
            eval_seqs,
            seed,
        } => cmd_ablate(&cfg, train_seqs, eval_seqs, seed),
    }
}

/// Load the config file (or defaults), apply `--set` overrides through the
/// TOML document so unknown keys and type errors surface, and validate.
fn resolve_config(path: Option<&Path>, sets: &[String]) -> CResult<RunConfig> {
    let base = match path {
        Some(p) => load_config(p).map_err(|e| {
            Failure::Config(format!("cannot load {}: {e}", p.display()))
        })?,
        None => RunConfig::default(),
    };
    let cfg = if sets.is_empty() {
        base
    } else {
        let mut doc = toml::Table::try_from(&base)
            .map_err(|e| Failure::Config(e.to_string()))?;
        for spec in sets {
            apply_set(&mut doc, spec)?;
        }
        doc.try_into::<RunConfig>()
            .map_err(|e| Failure::Config(e.to_string()))?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Set one dotted key in the document. The value is parsed as a TOML
/// literal; anything that does not parse becomes a string.
fn apply_set(doc: &mut toml::Table, spec: &str) -> CResult<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        Failure::Usage(format!("--set expects key=value, got '{spec}'"))
    })?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::Usage(format!("empty path segment in '{key}'")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table holds v"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Failure::Config(format!("'{p}' in '{key}' is not a table"))
            })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, out: Option<PathBuf>, seqs: u64, seed: Option<u64>) -> CResult<()> {
    let mut scene = cfg.scene.clone();
    scene.seed = seed.unwrap_or(scene.seed);
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
    let set = make_dataset(&scene, scene.seed..scene.seed + seqs)?;
    save_dataset(&out, &scene, &set, DEFAULT_FRAME_SIZE)?;
    println!("wrote {seqs} sequences to {}", out.display());
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    log: Option<PathBuf>,
    seed: Option<u64>,
) -> CResult<()> {
    let dataset = dataset.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
    let ckpt = checkpoint.unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint));
    let log_path = log.unwrap_or_else(|| PathBuf::from(&cfg.paths.log));
    let (manifest, seqs) = load_dataset(&dataset)?;
    if manifest.scene.d_feat != cfg.model.d_feat {
        return Err(Failure::Config(format!(
            "dataset grids carry {} feature channels but the model expects {}",
            manifest.scene.d_feat, cfg.model.d_feat
        )));
    }
    let mut tc = cfg.train.clone();
    tc.seed = seed.unwrap_or(tc.seed);
    let mut model = SimDecoderModel::new(cfg.model.clone(), tc.seed)?;
    let t0 = Instant::now();
    let (optim, rows) =
        simtrack_core::train_model(&mut model, &seqs, &cfg.loss, &tc, &cfg.matching)?;
    let secs = t0.elapsed().as_secs_f64();
    save_checkpoint(&model, Some(&optim), &ckpt)?;
    write_train_log(&log_path, &rows).map_err(|e| Failure::Runtime(e.to_string()))?;
    let final_loss = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps in {secs:.1}s; final loss {final_loss:.3}; checkpoint {}",
        rows.len(),
        ckpt.display()
    );
    Ok(())
}

fn write_train_log(path: &Path, rows: &[TrainLogRow]) -> std::io::Result<()> {
    let mut s = String::from("step,epoch,spatial,temporal,crossclip,l1,giou,total,lr\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e}\n",
            r.step, r.epoch, r.spatial, r.temporal, r.crossclip, r.l1, r.giou, r.total, r.lr
        ));
    }
    fs::write(path, s)
}

fn seq_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("seq_{i:03}.txt"))
}

fn cmd_track(
    cfg: &RunConfig,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> CResult<()> {
    let dataset = dataset.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
    let ckpt = checkpoint.unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint));
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.output));
    let (manifest, seqs) = load_dataset(&dataset)?;
    let (model, _) = load_checkpoint(&ckpt)?;
    fs::create_dir_all(&out).map_err(CoreError::from)?;
    let size = (manifest.frame_size[0], manifest.frame_size[1]);
    for (i, frames) in seqs.iter().enumerate() {
        let stream: Vec<(Vec<Detection>, FeatureGrid)> = frames
            .iter()
            .map(|f| (f.detections.clone(), f.grid.clone()))
            .collect();
        let records = track_sequence(&model, &stream, cfg.matching.clone())?;
        write_mot(&seq_file(&out, i), &tracks_to_rows(&records), size)?;
    }
    println!("tracked {} sequences into {}", seqs.len(), out.display());
    Ok(())
}

/// Ground truth of one loaded sequence as tracker-output records.
fn gt_records(frames: &[ClipFrame]) -> Vec<TrackRecord> {
    let mut out = Vec::new();
    for (fi, f) in frames.iter().enumerate() {
        for &(bbox, id) in &f.gt {
            out.push(TrackRecord {
                frame: fi,
                id,
                bbox,
                score: 1.0,
            });
        }
    }
    out
}

fn cmd_eval(
    cfg: &RunConfig,
    dataset: Option<PathBuf>,
    pred: Option<PathBuf>,
    iou_thr: f64,
) -> CResult<()> {
    let dataset = dataset.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
    let pred = pred.unwrap_or_else(|| PathBuf::from(&cfg.paths.output));
    let (_, seqs) = load_dataset(&dataset)?;
    let mut gt_tables = Vec::with_capacity(seqs.len());
    let mut pred_tables = Vec::with_capacity(seqs.len());
    for (i, frames) in seqs.iter().enumerate() {
        gt_tables.push(gt_records(frames));
        let (rows, _) = read_mot(&seq_file(&pred, i))?;
        pred_tables.push(rows_to_tracks(&rows)?);
    }
    let pairs: Vec<(&[TrackRecord], &[TrackRecord])> = pred_tables
        .iter()
        .zip(&gt_tables)
        .map(|(p, g)| (p.as_slice(), g.as_slice()))
        .collect();
    let report = evaluate_many(&pairs, iou_thr)?;
    println!("{report}");
    println!("idf1 {:.6}", report.idf1);
    println!("mota {:.6}", report.mota);
    println!("id_switches {}", report.id_switches);
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &Matrix) -> CResult<()> {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Failure::Runtime(e.to_string()))
}

fn dump_pair(dir: &Path, stem: &str, m: &Matrix) -> CResult<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(());
    }
    write_matrix_csv(&dir.join(format!("{stem}.csv")), m)?;
    write_pgm(&dir.join(format!("{stem}.pgm")), m)?;
    Ok(())
}

fn cmd_inspect(
    cfg: &RunConfig,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    seq: usize,
    start: usize,
    len: Option<usize>,
    out: Option<PathBuf>,
) -> CResult<()> {
    let dataset = dataset.unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
    let ckpt = checkpoint.unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint));
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.output));
    let len = len.unwrap_or(cfg.train.n);
    let (_, seqs) = load_dataset(&dataset)?;
    let frames = seqs.get(seq).ok_or_else(|| {
        Failure::Usage(format!("dataset holds {} sequences, asked for {seq}", seqs.len()))
    })?;
    if start + len > frames.len() {
        return Err(Failure::Usage(format!(
            "clip [{start}, {}) exceeds the {}-frame sequence",
            start + len,
            frames.len()
        )));
    }
    let (model, _) = load_checkpoint(&ckpt)?;
    fs::create_dir_all(&out).map_err(CoreError::from)?;
    let mut state = TrackerState::new(cfg.matching.clone());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ids: Vec<Option<u64>> = Vec::new();
    for (k, f) in frames[start..start + len].iter().enumerate() {
        let (_, dec) = tracker_step_full(&mut state, &model, &f.detections, &f.grid)?;
        let Some(dec) = dec else { continue };
        let last = dec.final_layer();
        dump_pair(&out, &format!("s_spatial_f{k:02}"), &last.spatial.s)?;
        dump_pair(&out, &format!("s_temporal_f{k:02}"), &last.temporal.s)?;
        let assigned = assign_gt(&f.detections, &f.gt, cfg.train.assign_iou)?;
        for (r, id) in assigned.iter().enumerate() {
            rows.push(last.queries.row(r).to_vec());
            ids.push(*id);
        }
    }
    if rows.len() >= 2 {
        // Group same-identity queries so the map shows the block structure;
        // unassigned queries go last.
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| (ids[i].is_none(), ids[i].unwrap_or(0), i));
        let sorted: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let q = Matrix::from_rows(&sorted)?;
        let pair = model.weight_attention(model.cfg.layers - 1, &q, &q)?;
        dump_pair(&out, "s_crossclip", &pair.s)?;
    }
    println!(
        "inspected seq {seq} frames [{start}, {}); wrote similarity maps to {}",
        start + len,
        out.display()
    );
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    train_seqs: u64,
    eval_seqs: u64,
    seed: Option<u64>,
) -> CResult<()> {
    let base = seed.unwrap_or(cfg.scene.seed);
    let train_set = make_dataset(&cfg.scene, base..base + train_seqs)?;
    let eval_set = make_dataset(&cfg.scene, base + 1000..base + 1000 + eval_seqs)?;
    let combos: [(&str, [bool; 3]); 7] = [
        ("spatial", [true, false, false]),
        ("temporal", [false, true, false]),
        ("crossclip", [false, false, true]),
        ("spatial+temporal", [true, true, false]),
        ("spatial+crossclip", [true, false, true]),
        ("temporal+crossclip", [false, true, true]),
        ("full", [true, true, true]),
    ];
    println!(
        "{:<20} {:>8} {:>6} {:>8} {:>10}",
        "losses", "idf1", "idsw", "margin", "final_loss"
    );
    for (name, on) in combos {
        let weights = LossWeights {
            spatial: if on[0] { cfg.loss.spatial } else { 0.0 },
            temporal: if on[1] { cfg.loss.temporal } else { 0.0 },
            crossclip: if on[2] { cfg.loss.crossclip } else { 0.0 },
            ..cfg.loss.clone()
        };
        let mut model = SimDecoderModel::new(cfg.model.clone(), cfg.train.seed)?;
        let (_, rows) =
            simtrack_core::train_model(&mut model, &train_set, &weights, &cfg.train, &cfg.matching)?;
        let mut pred_tables = Vec::new();
        let mut gt_tables = Vec::new();
        for frames in &eval_set {
            let stream: Vec<(Vec<Detection>, FeatureGrid)> = frames
                .iter()
                .map(|f| (f.detections.clone(), f.grid.clone()))
                .collect();
            pred_tables.push(track_sequence(&model, &stream, cfg.matching.clone())?);
            gt_tables.push(gt_records(frames));
        }
        let pairs: Vec<(&[TrackRecord], &[TrackRecord])> = pred_tables
            .iter()
            .zip(&gt_tables)
            .map(|(p, g)| (p.as_slice(), g.as_slice()))
            .collect();
        let report = evaluate_many(&pairs, 0.5)?;
        let margin = eval_set
            .iter()
            .filter_map(|frames| {
                crossclip_margin(&model, frames, cfg.train.n, cfg.train.assign_iou, &cfg.matching)
                    .ok()
                    .map(|(_, _, m)| m)
            })
            .collect::<Vec<f64>>();
        let margin = if margin.is_empty() {
            f64::NAN
        } else {
            margin.iter().sum::<f64>() / margin.len() as f64
        };
        let final_loss = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
        println!(
            "{name:<20} {:>8.3} {:>6} {margin:>8.3} {final_loss:>10.3}",
            report.idf1, report.id_switches
        );
    }
    Ok(())
}
