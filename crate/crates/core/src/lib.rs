//! Appearance-only multi-object tracking on dense feature grids.
//!
//! The crate trains a small decoder that turns per-detection queries into
//! appearance embeddings, scores pairwise similarity between detections and
//! live tracks, and associates them with a two-stage assignment. Everything
//! runs in f64 on a scalar autodiff tape; no external tensor library.

pub mod assoc;
pub mod baseline;
pub mod error;
pub mod geometry;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod tape;
pub mod train;

pub use assoc::{
    hungarian, track_sequence, tracker_step, tracker_step_full, two_stage_match, MatchConfig,
    MatchOutcome, Track, TrackRecord, TrackerState,
};
pub use baseline::{track_sequence_iou, BaselineConfig};
pub use error::{Error, Result};
pub use geometry::{encode_query, giou, iou, BBox, Detection};
pub use io::{
    detections_to_rows, dump_config, load_config, load_dataset, load_sequence, parse_config,
    read_mot, rows_to_detections, rows_to_tracks, save_dataset, save_sequence, tracks_to_rows,
    write_mot, write_pgm, DatasetManifest, MotRow, Paths, RunConfig, DEFAULT_FRAME_SIZE,
};
pub use loss::{LossWeights, PosMask};
pub use metrics::{
    crossclip_margin, evaluate, evaluate_many, similarity_margin, EvalReport, SeqEval,
};
pub use net::{
    apply_refine, linear_forward, DecoderOut, FeatureGrid, Matrix, ModelConfig, ParamStore,
    QuerySet, SimDecoderModel, SimPair,
};
pub use synth::{
    generate_sequence, make_dataset, render_grid, sequence_frames, simulate_detections, GtFrame,
    GtObject, GtSequence, MotionModel, SceneConfig,
};
pub use tape::{grad_check, Grads, Seg, Tape, Var};
pub use train::{
    assign_gt, filter_ambiguous, load_checkpoint, read_tensor_file, sample_clip, save_checkpoint,
    train_model, train_step, write_tensor_file, Clip, ClipFrame, LossBreakdown, NamedTensor,
    OptimState, TrainConfig, TrainLogRow,
};
