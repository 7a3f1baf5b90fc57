//! The decoder network: query encoding with a learned score embedding,
//! in-box feature-sampling attention, feed-forward blocks, the multi-head
//! weight attention producing similarity/weight matrices, and the auxiliary
//! box refinement head.
//!
//! Forward passes are recorded on a [`Tape`] so training gets exact
//! reverse-mode gradients; the value-level methods on [`SimDecoderModel`]
//! run the same graph code and extract plain matrices.

use crate::error::{Error, Result};
use crate::geometry::{encode_query, BBox, Detection};
use crate::tape::{Seg, Tape, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Dense row-major matrix of f64 values.
///
/// Zero rows or columns are allowed; they appear naturally as the empty
/// temporal similarity on the first frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-frame feature map: `d_feat` channels on a `height x width` cell grid.
/// `stride` is the frame-unit extent of one cell; cell (r, c) is centered at
/// ((c + 0.5) * stride, (r + 0.5) * stride).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub d_feat: usize,
    pub stride: f64,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, d_feat: usize, stride: f64) -> Self {
        Self {
            height,
            width,
            d_feat,
            stride,
            data: vec![0.0; height * width * d_feat],
        }
    }

    pub fn from_data(
        height: usize,
        width: usize,
        d_feat: usize,
        stride: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != height * width * d_feat {
            return Err(Error::Shape(format!(
                "grid {height}x{width}x{d_feat} needs {} values, got {}",
                height * width * d_feat,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            d_feat,
            stride,
            data,
        })
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let base = (r * self.width + c) * self.d_feat;
        &self.data[base..base + self.d_feat]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let base = (r * self.width + c) * self.d_feat;
        &mut self.data[base..base + self.d_feat]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-frame bundle of queries with their source boxes and bookkeeping.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub queries: Matrix,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    /// Ground-truth identity per query; `None` marks a false positive.
    pub gt_ids: Vec<Option<u64>>,
    pub track_ids: Vec<Option<u64>>,
}

impl QuerySet {
    pub fn new(
        queries: Matrix,
        boxes: Vec<BBox>,
        scores: Vec<f64>,
        gt_ids: Vec<Option<u64>>,
        track_ids: Vec<Option<u64>>,
    ) -> Result<Self> {
        let m = queries.rows();
        if boxes.len() != m || scores.len() != m || gt_ids.len() != m || track_ids.len() != m {
            return Err(Error::Shape("query set fields must share length".into()));
        }
        Ok(Self {
            queries,
            boxes,
            scores,
            gt_ids,
            track_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Paired similarity matrix S (entries in [0,1]) and unbounded weight
/// response matrix W; rows index queries, columns index keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPair {
    pub s: Matrix,
    pub w: Matrix,
}

impl SimPair {
    pub fn new(s: Matrix, w: Matrix) -> Self {
        assert_eq!(s.rows(), w.rows());
        assert_eq!(s.cols(), w.cols());
        assert!(
            s.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            "similarity out of [0,1]"
        );
        Self { s, w }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
pub struct TensorMeta {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All model parameters in one flat array, with named tensor views.
/// `grads` mirrors `data` and holds the last backward pass's gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    metas: Vec<TensorMeta>,
    pub data: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamStore {
    fn register(&mut self, name: &str, dims: &[usize], mut fill: impl FnMut() -> f64) -> TensorId {
        let len: usize = dims.iter().product();
        let offset = self.data.len();
        for _ in 0..len {
            self.data.push(fill());
        }
        self.grads.resize(self.data.len(), 0.0);
        self.metas.push(TensorMeta {
            name: name.to_string(),
            dims: dims.to_vec(),
            offset,
            len,
        });
        TensorId(self.metas.len() - 1)
    }

    pub fn metas(&self) -> &[TensorMeta] {
        &self.metas
    }

    pub fn meta(&self, id: TensorId) -> &TensorMeta {
        &self.metas[id.0]
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        let m = &self.metas[id.0];
        &self.data[m.offset..m.offset + m.len]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut [f64] {
        let m = &self.metas[id.0];
        &mut self.data[m.offset..m.offset + m.len]
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.metas.iter().position(|m| m.name == name).map(TensorId)
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn seg(&self, bound: Seg, id: TensorId) -> Seg {
        let m = &self.metas[id.0];
        debug_assert!(m.offset + m.len <= bound.len());
        Seg {
            start: bound.start + m.offset as u32,
            len: m.len as u32,
        }
    }

    fn var(&self, bound: Seg, id: TensorId, idx: usize) -> Var {
        let m = &self.metas[id.0];
        debug_assert!(idx < m.len);
        Var(bound.start + (m.offset + idx) as u32)
    }
}

/// Linear layer handle: weight `[d_out, d_in]` plus bias `[d_out]`.
#[derive(Debug, Clone, Copy)]
pub struct LinHandle {
    w: TensorId,
    b: TensorId,
    d_in: usize,
    d_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormHandle {
    gamma: TensorId,
    beta: TensorId,
    dim: usize,
}

#[derive(Debug, Clone)]
struct LayerHandles {
    samp_offset: LinHandle,
    samp_pweight: LinHandle,
    samp_value: LinHandle,
    ffn_norm: NormHandle,
    ffn_lin1: LinHandle,
    ffn_lin2: LinHandle,
    /// One projection per head, shared by the query and key side and by the
    /// spatial, temporal, and cross-clip uses of this layer.
    wa: Vec<LinHandle>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 8,
            d_model: 32,
            layers: 2,
            heads: 2,
            points: 4,
            ffn_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 8 != 0 {
            return Err(Error::Config(format!(
                "d_model must be a positive multiple of 8, got {}",
                self.d_model
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads must divide d_model, got {} / {}",
                self.heads, self.d_model
            )));
        }
        if self.d_feat == 0 || self.layers == 0 || self.points == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// The decoder model: per-layer sampling attention and FFN parameters,
/// per-layer weight-attention projections (shared across their three uses),
/// a score embedding folded into the initial queries, and one refinement
/// head evaluated after every layer.
#[derive(Debug, Clone)]
pub struct SimDecoderModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    score_embed: LinHandle,
    layers: Vec<LayerHandles>,
    refine_l1: LinHandle,
    refine_l2: LinHandle,
    refine_out: LinHandle,
}

fn uniform_fan_in(rng: &mut ChaCha12Rng, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let k = 1.0 / (fan_in as f64).sqrt();
    move || rng.random_range(-k..k)
}

impl SimDecoderModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let d = cfg.d_model;
        let (h, pts, d_feat, hidden) = (cfg.heads, cfg.points, cfg.d_feat, cfg.ffn_hidden);

        fn lin(
            p: &mut ParamStore,
            rng: &mut ChaCha12Rng,
            name: &str,
            d_out: usize,
            d_in: usize,
        ) -> LinHandle {
            let w = p.register(&format!("{name}.w"), &[d_out, d_in], uniform_fan_in(rng, d_in));
            let b = p.register(&format!("{name}.b"), &[d_out], uniform_fan_in(rng, d_in));
            LinHandle { w, b, d_in, d_out }
        }
        fn zero_lin(p: &mut ParamStore, name: &str, d_out: usize, d_in: usize) -> LinHandle {
            let w = p.register(&format!("{name}.w"), &[d_out, d_in], || 0.0);
            let b = p.register(&format!("{name}.b"), &[d_out], || 0.0);
            LinHandle { w, b, d_in, d_out }
        }

        let score_embed = lin(&mut p, &mut rng, "score_embed", d, 1);

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            // Offsets start at zero weights with biases preset on a ring so the
            // initial samples spread over the box interior.
            let samp_offset = {
                let w = p.register(&format!("layer{l}.samp.offset.w"), &[h * pts * 2, d], || 0.0);
                let b = p.register(&format!("layer{l}.samp.offset.b"), &[h * pts * 2], || 0.0);
                let handle = LinHandle {
                    w,
                    b,
                    d_in: d,
                    d_out: h * pts * 2,
                };
                let bias = p.tensor_mut(b);
                for i in 0..h {
                    for pt in 0..pts {
                        let theta = 2.0 * PI * (pt as f64 + i as f64 / h as f64) / pts as f64;
                        bias[(i * pts + pt) * 2] = 0.25 * theta.cos();
                        bias[(i * pts + pt) * 2 + 1] = 0.25 * theta.sin();
                    }
                }
                handle
            };
            // Zero point-weight map: softmax starts uniform.
            let samp_pweight = zero_lin(&mut p, &format!("layer{l}.samp.pweight"), h * pts, d);
            let samp_value = lin(&mut p, &mut rng, &format!("layer{l}.samp.value"), d, h * d_feat);
            let ffn_norm = {
                let gamma = p.register(&format!("layer{l}.ffn.norm.gamma"), &[d], || 1.0);
                let beta = p.register(&format!("layer{l}.ffn.norm.beta"), &[d], || 0.0);
                NormHandle {
                    gamma,
                    beta,
                    dim: d,
                }
            };
            let ffn_lin1 = lin(&mut p, &mut rng, &format!("layer{l}.ffn.lin1"), hidden, d);
            let ffn_lin2 = lin(&mut p, &mut rng, &format!("layer{l}.ffn.lin2"), d, hidden);
            let wa = (0..h)
                .map(|i| lin(&mut p, &mut rng, &format!("layer{l}.wa{i}"), cfg.head_dim(), d))
                .collect();
            layers.push(LayerHandles {
                samp_offset,
                samp_pweight,
                samp_value,
                ffn_norm,
                ffn_lin1,
                ffn_lin2,
                wa,
            });
        }

        let refine_l1 = lin(&mut p, &mut rng, "refine.l1", d, d);
        let refine_l2 = lin(&mut p, &mut rng, "refine.l2", d, d);
        // Zero-initialized output: refinement starts as the identity map.
        let refine_out = zero_lin(&mut p, "refine.out", 4, d);

        Ok(Self {
            cfg,
            params: p,
            score_embed,
            layers,
            refine_l1,
            refine_l2,
            refine_out,
        })
    }

    /// Push all parameters onto a tape as leaves; graph functions address
    /// individual tensors through the returned segment.
    pub fn bind(&self, tape: &mut Tape) -> Seg {
        tape.leaf_seg(&self.params.data)
    }

    pub fn wa_handles(&self, layer: usize) -> &[LinHandle] {
        &self.layers[layer].wa
    }
}

/// Matrix of tape nodes, row-major; entries need not be contiguous.
#[derive(Debug, Clone)]
pub struct GMat {
    pub rows: usize,
    pub cols: usize,
    vars: Vec<Var>,
}

impl GMat {
    pub fn new(rows: usize, cols: usize, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), rows * cols);
        Self { rows, cols, vars }
    }

    pub fn at(&self, r: usize, c: usize) -> Var {
        self.vars[r * self.cols + c]
    }

    pub fn values(&self, tape: &Tape) -> Matrix {
        let data = self.vars.iter().map(|&v| tape.val(v)).collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GSimPair {
    pub s: GMat,
    pub w: GMat,
}

/// Box whose coordinates are tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct GBox {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

impl GBox {
    pub fn values(&self, tape: &Tape) -> BBox {
        BBox::new(
            tape.val(self.cx),
            tape.val(self.cy),
            tape.val(self.w),
            tape.val(self.h),
        )
    }
}

/// One decoder layer's recorded outputs.
#[derive(Debug, Clone)]
pub struct GLayerOut {
    pub queries: Vec<Seg>,
    pub temporal: GSimPair,
    pub spatial: GSimPair,
    pub refined: Vec<GBox>,
}

/// y = W x + b for one query row; output is contiguous.
pub fn g_linear(t: &mut Tape, p: &ParamStore, bound: Seg, lin: &LinHandle, x: Seg) -> Seg {
    assert_eq!(x.len(), lin.d_in);
    let wseg = p.seg(bound, lin.w);
    let start = t.len() as u32;
    for o in 0..lin.d_out {
        let wrow = Seg {
            start: wseg.start + (o * lin.d_in) as u32,
            len: lin.d_in as u32,
        };
        let b = p.var(bound, lin.b, o);
        t.dot_add(wrow, x, b);
    }
    Seg {
        start,
        len: lin.d_out as u32,
    }
}

const NORM_EPS: f64 = 1e-5;
const ROWNORM_EPS: f64 = 1e-12;

fn g_layernorm(t: &mut Tape, p: &ParamStore, bound: Seg, norm: &NormHandle, x: Seg) -> Seg {
    let n = norm.dim;
    assert_eq!(x.len(), n);
    let sum = t.sum_range(x);
    let mean = t.mul_c(sum, 1.0 / n as f64);
    let dstart = t.len() as u32;
    for i in 0..n {
        let xi = x.var(i);
        t.sub(xi, mean);
    }
    let dseg = Seg {
        start: dstart,
        len: n as u32,
    };
    let ss = t.dot(dseg, dseg);
    let var = t.mul_c(ss, 1.0 / n as f64);
    let var_eps = t.add_c(var, NORM_EPS);
    let std = t.sqrt(var_eps);
    let qstart = t.len() as u32;
    for i in 0..n {
        let di = dseg.var(i);
        t.div(di, std);
    }
    let qseg = Seg {
        start: qstart,
        len: n as u32,
    };
    let ostart = t.len() as u32;
    for i in 0..n {
        let g = p.var(bound, norm.gamma, i);
        let b = p.var(bound, norm.beta, i);
        let qi = qseg.var(i);
        t.mul_add(g, qi, b);
    }
    Seg {
        start: ostart,
        len: n as u32,
    }
}

/// L2 row normalization, `x / sqrt(max(|x|^2, eps))`. A zero row maps to a
/// zero row; any other row maps to an exactly unit-cosine self-similarity.
pub fn g_rownorm(t: &mut Tape, x: Seg) -> Seg {
    let ss = t.dot(x, x);
    let guarded = t.max_c(ss, ROWNORM_EPS);
    let norm = t.sqrt(guarded);
    let start = t.len() as u32;
    for i in 0..x.len() {
        let xi = x.var(i);
        t.div(xi, norm);
    }
    Seg {
        start,
        len: x.len as u32,
    }
}

/// Multi-head weight attention over query rows and key rows.
///
/// Per head i with shared projection lin_i applied to both sides:
/// S_i = rownorm(lin_i(Q)) rownorm(lin_i(K))^T and W_i = lin_i(Q) lin_i(K)^T.
/// S is the head mean clamped into [0,1]; W is the plain head mean.
pub fn g_weight_attention(
    t: &mut Tape,
    p: &ParamStore,
    bound: Seg,
    wa: &[LinHandle],
    q: &[Seg],
    k: &[Seg],
) -> GSimPair {
    let (m, n) = (q.len(), k.len());
    let heads = wa.len();
    if m == 0 || n == 0 {
        return GSimPair {
            s: GMat::new(m, n, vec![]),
            w: GMat::new(m, n, vec![]),
        };
    }
    let mut s_heads: Vec<Vec<Var>> = Vec::with_capacity(heads);
    let mut w_heads: Vec<Vec<Var>> = Vec::with_capacity(heads);
    for lin in wa {
        let pq: Vec<Seg> = q.iter().map(|&row| g_linear(t, p, bound, lin, row)).collect();
        let pk: Vec<Seg> = k.iter().map(|&row| g_linear(t, p, bound, lin, row)).collect();
        let nq: Vec<Seg> = pq.iter().map(|&row| g_rownorm(t, row)).collect();
        let nk: Vec<Seg> = pk.iter().map(|&row| g_rownorm(t, row)).collect();
        let mut sh = Vec::with_capacity(m * n);
        let mut wh = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                sh.push(t.dot(nq[r], nk[c]));
            }
        }
        for r in 0..m {
            for c in 0..n {
                wh.push(t.dot(pq[r], pk[c]));
            }
        }
        s_heads.push(sh);
        w_heads.push(wh);
    }
    let inv_h = 1.0 / heads as f64;
    let mut s_vars = Vec::with_capacity(m * n);
    let mut w_vars = Vec::with_capacity(m * n);
    for e in 0..m * n {
        let mut acc = s_heads[0][e];
        for sh in &s_heads[1..] {
            acc = t.add(acc, sh[e]);
        }
        let mean = t.mul_c(acc, inv_h);
        let low = t.max_c(mean, 0.0);
        // The cosine mean is analytically <= 1; the upper clamp only absorbs
        // last-bit rounding so the [0,1] invariant holds exactly.
        s_vars.push(t.min_c(low, 1.0));
    }
    for e in 0..m * n {
        let mut acc = w_heads[0][e];
        for wh in &w_heads[1..] {
            acc = t.add(acc, wh[e]);
        }
        w_vars.push(t.mul_c(acc, inv_h));
    }
    GSimPair {
        s: GMat::new(m, n, s_vars),
        w: GMat::new(m, n, w_vars),
    }
}

/// Bilinear interpolation of the grid at a tape-valued frame position.
/// Positions are clamped to the cell-center hull, so boxes outside the grid
/// sample the border.
pub fn g_bilinear(t: &mut Tape, grid: &FeatureGrid, x: Var, y: Var) -> Vec<Var> {
    let u_raw = t.mul_c(x, 1.0 / grid.stride);
    let u_off = t.add_c(u_raw, -0.5);
    let u_lo = t.max_c(u_off, 0.0);
    let u = t.min_c(u_lo, (grid.width - 1) as f64);
    let v_raw = t.mul_c(y, 1.0 / grid.stride);
    let v_off = t.add_c(v_raw, -0.5);
    let v_lo = t.max_c(v_off, 0.0);
    let v = t.min_c(v_lo, (grid.height - 1) as f64);

    let c0 = (t.val(u).floor() as usize).min(grid.width.saturating_sub(2));
    let r0 = (t.val(v).floor() as usize).min(grid.height.saturating_sub(2));
    let c1 = (c0 + 1).min(grid.width - 1);
    let r1 = (r0 + 1).min(grid.height - 1);

    let fx = t.add_c(u, -(c0 as f64));
    let fy = t.add_c(v, -(r0 as f64));
    let nfx = t.neg(fx);
    let omx = t.add_c(nfx, 1.0);
    let nfy = t.neg(fy);
    let omy = t.add_c(nfy, 1.0);
    let w00 = t.mul(omx, omy);
    let w10 = t.mul(fx, omy);
    let w01 = t.mul(omx, fy);
    let w11 = t.mul(fx, fy);

    let mut out = Vec::with_capacity(grid.d_feat);
    for ch in 0..grid.d_feat {
        let a = t.mul_c(w00, grid.cell(r0, c0)[ch]);
        let b = t.mul_c(w10, grid.cell(r0, c1)[ch]);
        let ab = t.add(a, b);
        let c = t.mul_c(w01, grid.cell(r1, c0)[ch]);
        let d = t.mul_c(w11, grid.cell(r1, c1)[ch]);
        let cd = t.add(c, d);
        out.push(t.add(ab, cd));
    }
    out
}

fn g_softmax(t: &mut Tape, logits: &[Var]) -> Vec<Var> {
    let mx = t.max_vars(logits);
    let exps: Vec<Var> = logits
        .iter()
        .map(|&l| {
            let d = t.sub(l, mx);
            t.exp(d)
        })
        .collect();
    let sum = t.sum_vars(&exps);
    exps.iter().map(|&e| t.div(e, sum)).collect()
}

/// In-box sampling attention for one layer: per head, P learned offsets in
/// box-size units from the box center, bilinear samples combined under a
/// softmax of learned point weights, projected to d_model and added to the
/// query residually.
fn g_sample_attend(
    t: &mut Tape,
    p: &ParamStore,
    bound: Seg,
    layer: &LayerHandles,
    cfg: &ModelConfig,
    rows: &[Seg],
    boxes: &[BBox],
    grid: &FeatureGrid,
) -> Vec<Seg> {
    let (h, pts) = (cfg.heads, cfg.points);
    let mut out = Vec::with_capacity(rows.len());
    for (r, &x) in rows.iter().enumerate() {
        let bb = &boxes[r];
        let off = g_linear(t, p, bound, &layer.samp_offset, x);
        let pw = g_linear(t, p, bound, &layer.samp_pweight, x);
        let mut agg: Vec<Var> = Vec::with_capacity(h * cfg.d_feat);
        for i in 0..h {
            let logits: Vec<Var> = (0..pts).map(|pt| pw.var(i * pts + pt)).collect();
            let weights = g_softmax(t, &logits);
            let mut samples: Vec<Vec<Var>> = Vec::with_capacity(pts);
            for pt in 0..pts {
                let dx = off.var((i * pts + pt) * 2);
                let dy = off.var((i * pts + pt) * 2 + 1);
                let sx = t.mul_c(dx, bb.w);
                let px = t.add_c(sx, bb.cx);
                let sy = t.mul_c(dy, bb.h);
                let py = t.add_c(sy, bb.cy);
                samples.push(g_bilinear(t, grid, px, py));
            }
            for ch in 0..cfg.d_feat {
                let mut acc = t.mul(weights[0], samples[0][ch]);
                for pt in 1..pts {
                    acc = t.mul_add(weights[pt], samples[pt][ch], acc);
                }
                agg.push(acc);
            }
        }
        let cat = t.pack(&agg);
        let proj = g_linear(t, p, bound, &layer.samp_value, cat);
        let start = t.len() as u32;
        for i in 0..x.len() {
            let xi = x.var(i);
            let pi = proj.var(i);
            t.add(xi, pi);
        }
        out.push(Seg {
            start,
            len: x.len,
        });
    }
    out
}

/// Pre-norm FFN with residual: y = x + Lin2(relu(Lin1(LayerNorm(x)))).
fn g_ffn(t: &mut Tape, p: &ParamStore, bound: Seg, layer: &LayerHandles, x: Seg) -> Seg {
    let normed = g_layernorm(t, p, bound, &layer.ffn_norm, x);
    let h1 = g_linear(t, p, bound, &layer.ffn_lin1, normed);
    let rstart = t.len() as u32;
    for i in 0..h1.len() {
        let v = h1.var(i);
        t.relu(v);
    }
    let rseg = Seg {
        start: rstart,
        len: h1.len,
    };
    let h2 = g_linear(t, p, bound, &layer.ffn_lin2, rseg);
    let start = t.len() as u32;
    for i in 0..x.len() {
        let xi = x.var(i);
        let hi = h2.var(i);
        t.add(xi, hi);
    }
    Seg {
        start,
        len: x.len,
    }
}

/// Refinement deltas (dcx, dcy, dlog w, dlog h) for one query row.
fn g_refine_deltas(t: &mut Tape, p: &ParamStore, bound: Seg, model: &SimDecoderModel, x: Seg) -> Seg {
    let h1 = g_linear(t, p, bound, &model.refine_l1, x);
    let r1start = t.len() as u32;
    for i in 0..h1.len() {
        let v = h1.var(i);
        t.relu(v);
    }
    let r1 = Seg {
        start: r1start,
        len: h1.len,
    };
    let h2 = g_linear(t, p, bound, &model.refine_l2, r1);
    let r2start = t.len() as u32;
    for i in 0..h2.len() {
        let v = h2.var(i);
        t.relu(v);
    }
    let r2 = Seg {
        start: r2start,
        len: h2.len,
    };
    g_linear(t, p, bound, &model.refine_out, r2)
}

/// Apply deltas to a box: center moves in box-size units, sizes scale in
/// log space so they stay positive.
pub fn g_apply_refine(t: &mut Tape, deltas: Seg, b: &BBox) -> GBox {
    let dcx = deltas.var(0);
    let dcy = deltas.var(1);
    let dlw = deltas.var(2);
    let dlh = deltas.var(3);
    let mx = t.mul_c(dcx, b.w);
    let cx = t.add_c(mx, b.cx);
    let my = t.mul_c(dcy, b.h);
    let cy = t.add_c(my, b.cy);
    let ew = t.exp(dlw);
    let w = t.mul_c(ew, b.w);
    let eh = t.exp(dlh);
    let h = t.mul_c(eh, b.h);
    GBox { cx, cy, w, h }
}

/// Initial object queries: sine-cosine box encoding plus the learned score
/// embedding. Output rows are contiguous.
pub fn g_encode_queries(
    t: &mut Tape,
    model: &SimDecoderModel,
    bound: Seg,
    dets: &[Detection],
) -> Result<Vec<Seg>> {
    let d = model.cfg.d_model;
    let p = &model.params;
    let mut rows = Vec::with_capacity(dets.len());
    for det in dets {
        let enc = encode_query(det, d)?;
        let eseg = t.leaf_seg(&enc);
        let mut scaled = Vec::with_capacity(d);
        for i in 0..d {
            let wv = p.var(bound, model.score_embed.w, i);
            scaled.push(t.mul_c(wv, det.score));
        }
        let mut biased = Vec::with_capacity(d);
        for (i, &sv) in scaled.iter().enumerate() {
            let bv = p.var(bound, model.score_embed.b, i);
            biased.push(t.add(sv, bv));
        }
        let start = t.len() as u32;
        for (i, &bv) in biased.iter().enumerate() {
            let ev = eseg.var(i);
            t.add(bv, ev);
        }
        rows.push(Seg {
            start,
            len: d as u32,
        });
    }
    Ok(rows)
}

/// Full decoder pass. `track_rows` are the stored track queries; they pass
/// through unchanged and act only as keys for the temporal pair. Refined
/// boxes are auxiliary training targets and never feed back into sampling.
pub fn g_decoder_forward(
    t: &mut Tape,
    model: &SimDecoderModel,
    bound: Seg,
    object_rows: Vec<Seg>,
    object_boxes: &[BBox],
    track_rows: &[Seg],
    grid: &FeatureGrid,
) -> Result<Vec<GLayerOut>> {
    if grid.d_feat != model.cfg.d_feat {
        return Err(Error::Shape(format!(
            "grid has {} channels, model expects {}",
            grid.d_feat, model.cfg.d_feat
        )));
    }
    if object_rows.len() != object_boxes.len() {
        return Err(Error::Shape("one box per object query required".into()));
    }
    let d = model.cfg.d_model as u32;
    for row in object_rows.iter().chain(track_rows) {
        if row.len != d {
            return Err(Error::Shape(format!(
                "query row has {} dims, model expects {d}",
                row.len
            )));
        }
    }
    let p = &model.params;
    let mut cur = object_rows;
    let mut out = Vec::with_capacity(model.cfg.layers);
    for layer in &model.layers {
        cur = g_sample_attend(t, p, bound, layer, &model.cfg, &cur, object_boxes, grid);
        cur = cur
            .iter()
            .map(|&row| g_ffn(t, p, bound, layer, row))
            .collect();
        let refined = cur
            .iter()
            .zip(object_boxes)
            .map(|(&row, bb)| {
                let deltas = g_refine_deltas(t, p, bound, model, row);
                g_apply_refine(t, deltas, bb)
            })
            .collect();
        let temporal = g_weight_attention(t, p, bound, &layer.wa, &cur, track_rows);
        let spatial = g_weight_attention(t, p, bound, &layer.wa, &cur, &cur);
        out.push(GLayerOut {
            queries: cur.clone(),
            temporal,
            spatial,
            refined,
        });
    }
    Ok(out)
}

/// Value-level decoder output for one layer.
#[derive(Debug, Clone)]
pub struct DecoderLayerOut {
    pub queries: Matrix,
    pub temporal: SimPair,
    pub spatial: SimPair,
    pub refined: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct DecoderOut {
    pub layers: Vec<DecoderLayerOut>,
}

impl DecoderOut {
    pub fn final_layer(&self) -> &DecoderLayerOut {
        self.layers.last().expect("decoder has at least one layer")
    }
}

fn rows_to_matrix(t: &Tape, rows: &[Seg], cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &row in rows {
        data.extend_from_slice(t.seg_vals(row));
    }
    Matrix {
        rows: rows.len(),
        cols,
        data,
    }
}

pub fn extract_layer(t: &Tape, layer: &GLayerOut, d_model: usize) -> DecoderLayerOut {
    DecoderLayerOut {
        queries: rows_to_matrix(t, &layer.queries, d_model),
        temporal: SimPair::new(layer.temporal.s.values(t), layer.temporal.w.values(t)),
        spatial: SimPair::new(layer.spatial.s.values(t), layer.spatial.w.values(t)),
        refined: layer.refined.iter().map(|gb| gb.values(t)).collect(),
    }
}

impl SimDecoderModel {
    /// Initial object queries as a plain matrix.
    pub fn encode_object_queries(&self, dets: &[Detection]) -> Result<Matrix> {
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let rows = g_encode_queries(&mut t, self, bound, dets)?;
        Ok(rows_to_matrix(&t, &rows, self.cfg.d_model))
    }

    /// Run the full decoder and extract every layer's values.
    pub fn decoder_forward(
        &self,
        dets: &[Detection],
        tracks: &Matrix,
        grid: &FeatureGrid,
    ) -> Result<DecoderOut> {
        if tracks.rows() > 0 && tracks.cols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "track queries have {} dims, model expects {}",
                tracks.cols(),
                self.cfg.d_model
            )));
        }
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let obj = g_encode_queries(&mut t, self, bound, dets)?;
        let track_rows: Vec<Seg> = (0..tracks.rows())
            .map(|r| t.leaf_seg(tracks.row(r)))
            .collect();
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let layers = g_decoder_forward(&mut t, self, bound, obj, &boxes, &track_rows, grid)?;
        Ok(DecoderOut {
            layers: layers
                .iter()
                .map(|l| extract_layer(&t, l, self.cfg.d_model))
                .collect(),
        })
    }

    /// Weight attention between two plain matrices through one layer's
    /// shared projections.
    pub fn weight_attention(&self, layer: usize, q: &Matrix, k: &Matrix) -> Result<SimPair> {
        if (q.rows() > 0 && q.cols() != self.cfg.d_model)
            || (k.rows() > 0 && k.cols() != self.cfg.d_model)
        {
            return Err(Error::Shape("weight attention input width".into()));
        }
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let q_rows: Vec<Seg> = (0..q.rows()).map(|r| t.leaf_seg(q.row(r))).collect();
        let k_rows: Vec<Seg> = (0..k.rows()).map(|r| t.leaf_seg(k.row(r))).collect();
        let pair = g_weight_attention(&mut t, &self.params, bound, &self.layers[layer].wa, &q_rows, &k_rows);
        Ok(SimPair::new(pair.s.values(&t), pair.w.values(&t)))
    }

    pub fn ffn_forward(&self, layer: usize, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.cfg.d_model {
            return Err(Error::Shape("ffn input width".into()));
        }
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let rows: Vec<Seg> = (0..x.rows())
            .map(|r| {
                let seg = t.leaf_seg(x.row(r));
                g_ffn(&mut t, &self.params, bound, &self.layers[layer], seg)
            })
            .collect();
        Ok(rows_to_matrix(&t, &rows, self.cfg.d_model))
    }

    pub fn sample_attend(
        &self,
        layer: usize,
        queries: &QuerySet,
        grid: &FeatureGrid,
    ) -> Result<Matrix> {
        if queries.queries.cols() != self.cfg.d_model {
            return Err(Error::Shape("sample_attend input width".into()));
        }
        if grid.d_feat != self.cfg.d_feat {
            return Err(Error::Shape("grid channel count".into()));
        }
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let rows: Vec<Seg> = (0..queries.queries.rows())
            .map(|r| t.leaf_seg(queries.queries.row(r)))
            .collect();
        let out = g_sample_attend(
            &mut t,
            &self.params,
            bound,
            &self.layers[layer],
            &self.cfg,
            &rows,
            &queries.boxes,
            grid,
        );
        Ok(rows_to_matrix(&t, &out, self.cfg.d_model))
    }

    /// Refinement deltas per query row.
    pub fn refine_deltas(&self, x: &Matrix) -> Result<Vec<[f64; 4]>> {
        if x.cols() != self.cfg.d_model {
            return Err(Error::Shape("refine input width".into()));
        }
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let seg = t.leaf_seg(x.row(r));
            let d = g_refine_deltas(&mut t, &self.params, bound, self, seg);
            let v = t.seg_vals(d);
            out.push([v[0], v[1], v[2], v[3]]);
        }
        Ok(out)
    }
}

/// Apply refinement deltas to a box at the value level.
pub fn apply_refine(b: &BBox, d: &[f64; 4]) -> BBox {
    BBox::new(
        b.cx + d[0] * b.w,
        b.cy + d[1] * b.h,
        b.w * d[2].exp(),
        b.h * d[3].exp(),
    )
}

/// Plain y = x W^T + b with bias broadcast per row.
pub fn linear_forward(weight: &Matrix, bias: &[f64], x: &Matrix) -> Result<Matrix> {
    if x.cols() != weight.cols() || bias.len() != weight.rows() {
        return Err(Error::Shape(format!(
            "linear: x is {}x{}, weight {}x{}, bias {}",
            x.rows(),
            x.cols(),
            weight.rows(),
            weight.cols(),
            bias.len()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), weight.rows());
    for r in 0..x.rows() {
        for o in 0..weight.rows() {
            let mut acc = bias[o];
            for i in 0..x.cols() {
                acc += x.get(r, i) * weight.get(o, i);
            }
            out.set(r, o, acc);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    fn det(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, w, h),
            score,
            frame_index: 0,
        }
    }

    fn toy_model() -> SimDecoderModel {
        SimDecoderModel::new(ModelConfig::default(), 42).unwrap()
    }

    #[test]
    fn linear_forward_hand_case() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let y = linear_forward(&w, &[0.0, 1.0], &x).unwrap();
        assert_eq!(y.row(0), &[1.0, 4.0]);
    }

    #[test]
    fn linear_forward_identity_and_bias() {
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -2.0], vec![3.0, 0.25]]).unwrap();
        let y = linear_forward(&eye, &[0.0, 0.0], &x).unwrap();
        assert_eq!(y, x);
        let zero = Matrix::zeros(2, 2);
        let y = linear_forward(&zero, &[7.0, -3.0], &x).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), &[7.0, -3.0]);
        }
    }

    #[test]
    fn g_linear_matches_host() {
        let model = toy_model();
        let lin = model.layers[0].ffn_lin1;
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut t = Tape::new();
        let bound = model.bind(&mut t);
        let xseg = t.leaf_seg(&x);
        let out = g_linear(&mut t, &model.params, bound, &lin, xseg);
        let wm = &model.params;
        let weight = Matrix::from_vec(64, 32, wm.tensor(lin.w).to_vec()).unwrap();
        let xm = Matrix::from_vec(1, 32, x).unwrap();
        let host = linear_forward(&weight, wm.tensor(lin.b), &xm).unwrap();
        for (a, b) in t.seg_vals(out).iter().zip(host.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Put hand-picked weight-attention projections into a model so head
    /// cosines for the pair (e1, e2) come out to chosen values.
    fn rig_wa(model: &mut SimDecoderModel, images: &[(Vec<f64>, Vec<f64>)]) {
        let handles: Vec<LinHandle> = model.layers[0].wa.clone();
        for (i, lin) in handles.iter().enumerate() {
            let d_in = lin.d_in;
            let (u, v) = &images[i];
            {
                let w = model.params.tensor_mut(lin.w);
                w.fill(0.0);
                for r in 0..u.len() {
                    w[r * d_in] = u[r];
                    w[r * d_in + 1] = v[r];
                }
            }
            model.params.tensor_mut(lin.b).fill(0.0);
        }
    }

    fn e_row(d: usize, i: usize) -> Vec<f64> {
        let mut r = vec![0.0; d];
        r[i] = 1.0;
        r
    }

    #[test]
    fn weight_attention_clamp_hand_case() {
        // Head cosines 0.5 and -0.9 for the (q, k) pair; mean -0.2 clamps
        // to S = 0 while W keeps the raw mean.
        let mut model = toy_model();
        let s3 = 3.0f64.sqrt() / 2.0;
        let r19 = 0.19f64.sqrt();
        rig_wa(
            &mut model,
            &[
                (vec![1.0, 0.0], vec![0.5, s3]),
                (vec![1.0, 0.0], vec![-0.9, r19]),
            ],
        );
        let q = Matrix::from_rows(&[e_row(32, 0)]).unwrap();
        let k = Matrix::from_rows(&[e_row(32, 1)]).unwrap();
        let pair = model.weight_attention(0, &q, &k).unwrap();
        assert_eq!(pair.s.get(0, 0), 0.0);
        assert!((pair.w.get(0, 0) - (0.5 - 0.9) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn weight_attention_orthogonal_rows() {
        let mut model = toy_model();
        rig_wa(
            &mut model,
            &[
                (vec![1.0, 0.0], vec![0.0, 1.0]),
                (vec![0.0, 2.0], vec![3.0, 0.0]),
            ],
        );
        let q = Matrix::from_rows(&[e_row(32, 0)]).unwrap();
        let k = Matrix::from_rows(&[e_row(32, 1)]).unwrap();
        let pair = model.weight_attention(0, &q, &k).unwrap();
        assert_eq!(pair.s.get(0, 0), 0.0);
        assert_eq!(pair.w.get(0, 0), 0.0);
    }

    #[test]
    fn weight_attention_self_diagonal_is_one() {
        let model = toy_model();
        let mut rows = Vec::new();
        for r in 0..4 {
            rows.push((0..32).map(|i| ((r * 32 + i) as f64 * 0.31).cos()).collect());
        }
        let q = Matrix::from_rows(&rows).unwrap();
        let pair = model.weight_attention(1, &q, &q).unwrap();
        for i in 0..4 {
            assert!((pair.s.get(i, i) - 1.0).abs() < 1e-9, "diag {}", pair.s.get(i, i));
        }
    }

    #[test]
    fn weight_attention_empty_sides() {
        let model = toy_model();
        let q = Matrix::from_rows(&[e_row(32, 0)]).unwrap();
        let empty = Matrix::zeros(0, 0);
        let pair = model.weight_attention(0, &q, &empty).unwrap();
        assert_eq!(pair.s.rows(), 1);
        assert_eq!(pair.s.cols(), 0);
        let pair = model.weight_attention(0, &empty, &q).unwrap();
        assert_eq!(pair.s.rows(), 0);
    }

    #[test]
    fn shared_roles_are_bit_identical() {
        // Spatial, temporal, and cross-clip all call the same projections;
        // identical inputs must give identical bits.
        let model = toy_model();
        let q = Matrix::from_rows(&[
            (0..32).map(|i| (i as f64 * 0.11).sin()).collect(),
            (0..32).map(|i| (i as f64 * 0.23).cos()).collect(),
        ])
        .unwrap();
        let a = model.weight_attention(0, &q, &q).unwrap();
        let b = model.weight_attention(0, &q, &q).unwrap();
        assert_eq!(a.s, b.s);
        assert_eq!(a.w, b.w);
    }

    #[test]
    fn ffn_residual_passthrough_with_zero_inner() {
        let mut model = toy_model();
        let lin2 = model.layers[0].ffn_lin2;
        model.params.tensor_mut(lin2.w).fill(0.0);
        model.params.tensor_mut(lin2.b).fill(0.0);
        let x = Matrix::from_rows(&[(0..32).map(|i| i as f64 * 0.1 - 1.0).collect()]).unwrap();
        let y = model.ffn_forward(0, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ffn_hand_case_two_dims() {
        // Standalone 2-wide FFN built directly from a raw store:
        // x = (1, -1), identity inner maps, so y = x + relu(layernorm(x)).
        let mut p = ParamStore::default();
        let gamma = p.register("n.g", &[2], || 1.0);
        let beta = p.register("n.b", &[2], || 0.0);
        let norm = NormHandle {
            gamma,
            beta,
            dim: 2,
        };
        let mut eye = vec![1.0, 0.0, 0.0, 1.0].into_iter();
        let w1 = p.register("l1.w", &[2, 2], || eye.next().unwrap());
        let b1 = p.register("l1.b", &[2], || 0.0);
        let lin1 = LinHandle {
            w: w1,
            b: b1,
            d_in: 2,
            d_out: 2,
        };
        let mut eye2 = vec![1.0, 0.0, 0.0, 1.0].into_iter();
        let w2 = p.register("l2.w", &[2, 2], || eye2.next().unwrap());
        let b2 = p.register("l2.b", &[2], || 0.0);
        let lin2 = LinHandle {
            w: w2,
            b: b2,
            d_in: 2,
            d_out: 2,
        };
        let layer = LayerHandles {
            samp_offset: lin1,
            samp_pweight: lin1,
            samp_value: lin1,
            ffn_norm: norm,
            ffn_lin1: lin1,
            ffn_lin2: lin2,
            wa: vec![],
        };
        let mut t = Tape::new();
        let bound = t.leaf_seg(&p.data);
        let x = t.leaf_seg(&[1.0, -1.0]);
        let y = g_ffn(&mut t, &p, bound, &layer, x);
        let s = 1.0 / (1.0f64 + NORM_EPS).sqrt();
        let got = t.seg_vals(y);
        assert!((got[0] - (1.0 + s)).abs() < 1e-12);
        assert!((got[1] - -1.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_midpoint_and_lattice() {
        let mut grid = FeatureGrid::zeros(2, 2, 2, 0.5);
        grid.cell_mut(0, 0).copy_from_slice(&[1.0, 10.0]);
        grid.cell_mut(0, 1).copy_from_slice(&[3.0, 20.0]);
        grid.cell_mut(1, 0).copy_from_slice(&[5.0, 30.0]);
        grid.cell_mut(1, 1).copy_from_slice(&[7.0, 40.0]);
        let mut t = Tape::new();
        // Midpoint of cells (0,0) and (0,1): centers x=0.25 and x=0.75.
        let x = t.leaf(0.5);
        let y = t.leaf(0.25);
        let v = g_bilinear(&mut t, &grid, x, y);
        assert!((t.val(v[0]) - 2.0).abs() < 1e-12);
        assert!((t.val(v[1]) - 15.0).abs() < 1e-12);
        // Exactly on the (1,1) cell center.
        let x = t.leaf(0.75);
        let y = t.leaf(0.75);
        let v = g_bilinear(&mut t, &grid, x, y);
        assert!((t.val(v[0]) - 7.0).abs() < 1e-12);
        // Far outside: clamps to the nearest corner cell.
        let x = t.leaf(9.0);
        let y = t.leaf(-3.0);
        let v = g_bilinear(&mut t, &grid, x, y);
        assert!((t.val(v[0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sample_attend_constant_grid() {
        let model = toy_model();
        let cfg = &model.cfg;
        let mut grid = FeatureGrid::zeros(4, 4, cfg.d_feat, 0.25);
        let v: Vec<f64> = (0..cfg.d_feat).map(|i| i as f64 * 0.5 - 1.0).collect();
        for r in 0..4 {
            for c in 0..4 {
                grid.cell_mut(r, c).copy_from_slice(&v);
            }
        }
        let dets = [det(0.4, 0.6, 0.3, 0.2, 0.9), det(0.7, 0.2, 0.1, 0.4, 0.5)];
        let queries = model.encode_object_queries(&dets).unwrap();
        let qs = QuerySet::new(
            queries.clone(),
            dets.iter().map(|d| d.bbox).collect(),
            dets.iter().map(|d| d.score).collect(),
            vec![None; 2],
            vec![None; 2],
        )
        .unwrap();
        let out = model.sample_attend(0, &qs, &grid).unwrap();
        // Constant grid: every sample is v, so the update is proj(concat of
        // v per head) regardless of offsets and point weights.
        let lin = model.layers[0].samp_value;
        let weight = Matrix::from_vec(cfg.d_model, cfg.heads * cfg.d_feat, model.params.tensor(lin.w).to_vec()).unwrap();
        let vcat: Vec<f64> = (0..cfg.heads).flat_map(|_| v.clone()).collect();
        let xm = Matrix::from_vec(1, vcat.len(), vcat).unwrap();
        let proj = linear_forward(&weight, model.params.tensor(lin.b), &xm).unwrap();
        for r in 0..2 {
            for c in 0..cfg.d_model {
                let want = queries.get(r, c) + proj.get(0, c);
                assert!((out.get(r, c) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sample_attend_zero_offset_on_cell_center() {
        let cfg = ModelConfig {
            d_feat: 2,
            d_model: 8,
            layers: 1,
            heads: 1,
            points: 1,
            ffn_hidden: 8,
        };
        let mut model = SimDecoderModel::new(cfg, 3).unwrap();
        let off = model.layers[0].samp_offset;
        model.params.tensor_mut(off.w).fill(0.0);
        model.params.tensor_mut(off.b).fill(0.0);
        let mut grid = FeatureGrid::zeros(4, 4, 2, 0.25);
        for r in 0..4 {
            for c in 0..4 {
                let val = [r as f64 * 10.0 + c as f64, 1.0];
                grid.cell_mut(r, c).copy_from_slice(&val);
            }
        }
        // Box centered on cell (1, 1): center (0.375, 0.375).
        let d0 = det(0.375, 0.375, 0.2, 0.2, 1.0);
        let queries = model.encode_object_queries(&[d0]).unwrap();
        let qs = QuerySet::new(
            queries.clone(),
            vec![d0.bbox],
            vec![1.0],
            vec![None],
            vec![None],
        )
        .unwrap();
        let out = model.sample_attend(0, &qs, &grid).unwrap();
        let lin = model.layers[0].samp_value;
        let weight = Matrix::from_vec(8, 2, model.params.tensor(lin.w).to_vec()).unwrap();
        let xm = Matrix::from_vec(1, 2, vec![11.0, 1.0]).unwrap();
        let proj = linear_forward(&weight, model.params.tensor(lin.b), &xm).unwrap();
        for c in 0..8 {
            let want = queries.get(0, c) + proj.get(0, c);
            assert!((out.get(0, c) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn refine_starts_as_identity_and_scales_in_log_space() {
        let model = toy_model();
        let x = Matrix::from_rows(&[(0..32).map(|i| (i as f64).sin()).collect()]).unwrap();
        let deltas = model.refine_deltas(&x).unwrap();
        assert_eq!(deltas[0], [0.0; 4]);
        let b = BBox::new(0.5, 0.5, 0.2, 0.1);
        let refined = apply_refine(&b, &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(refined, b);
        let doubled = apply_refine(&b, &[0.0, 0.0, 2.0f64.ln(), 0.0]);
        assert!((doubled.w - 0.4).abs() < 1e-12);
        assert!((doubled.h - 0.1).abs() < 1e-12);
        // Sizes stay positive for any finite delta.
        let shrunk = apply_refine(&b, &[0.5, -0.5, -30.0, 12.0]);
        assert!(shrunk.w > 0.0 && shrunk.h > 0.0);
    }

    fn demo_grid(cfg: &ModelConfig, seed: u64) -> FeatureGrid {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut grid = FeatureGrid::zeros(6, 6, cfg.d_feat, 1.0 / 6.0);
        for r in 0..6 {
            for c in 0..6 {
                for ch in 0..cfg.d_feat {
                    grid.cell_mut(r, c)[ch] = rng.random_range(-1.0..1.0);
                }
            }
        }
        grid
    }

    #[test]
    fn decoder_forward_shapes_and_first_frame() {
        let model = toy_model();
        let grid = demo_grid(&model.cfg, 5);
        let dets = [
            det(0.3, 0.3, 0.2, 0.2, 0.9),
            det(0.6, 0.6, 0.15, 0.25, 0.8),
            det(0.8, 0.2, 0.1, 0.1, 0.4),
        ];
        let out = model
            .decoder_forward(&dets, &Matrix::zeros(0, 0), &grid)
            .unwrap();
        assert_eq!(out.layers.len(), 2);
        for layer in &out.layers {
            assert_eq!(layer.queries.rows(), 3);
            assert_eq!(layer.temporal.s.cols(), 0);
            assert_eq!(layer.spatial.s.rows(), 3);
            assert_eq!(layer.spatial.s.cols(), 3);
            assert_eq!(layer.refined.len(), 3);
            for i in 0..3 {
                assert!((layer.spatial.s.get(i, i) - 1.0).abs() < 1e-9);
            }
        }
        // Zero-init refinement head leaves boxes untouched.
        for (rb, d) in out.final_layer().refined.iter().zip(&dets) {
            assert_eq!(*rb, d.bbox);
        }
    }

    #[test]
    fn decoder_forward_permutation_equivariance() {
        let model = toy_model();
        let grid = demo_grid(&model.cfg, 11);
        let dets = [
            det(0.3, 0.3, 0.2, 0.2, 0.9),
            det(0.6, 0.6, 0.15, 0.25, 0.8),
            det(0.8, 0.2, 0.1, 0.1, 0.4),
        ];
        let tracks = Matrix::from_rows(&[
            (0..32).map(|i| (i as f64 * 0.05).sin()).collect(),
            (0..32).map(|i| (i as f64 * 0.07).cos()).collect(),
        ])
        .unwrap();
        let fwd = model.decoder_forward(&dets, &tracks, &grid).unwrap();
        let perm = [2usize, 0, 1];
        let permuted: Vec<Detection> = perm.iter().map(|&i| dets[i]).collect();
        let back = model.decoder_forward(&permuted, &tracks, &grid).unwrap();
        for (a, b) in fwd.layers.iter().zip(&back.layers) {
            for (new_r, &old_r) in perm.iter().enumerate() {
                assert_eq!(a.queries.row(old_r), b.queries.row(new_r));
                for c in 0..2 {
                    assert_eq!(a.temporal.s.get(old_r, c), b.temporal.s.get(new_r, c));
                }
                for (new_c, &old_c) in perm.iter().enumerate() {
                    assert_eq!(a.spatial.s.get(old_r, old_c), b.spatial.s.get(new_r, new_c));
                }
            }
        }
    }

    #[test]
    fn decoder_rejects_track_width_mismatch() {
        let model = toy_model();
        let grid = demo_grid(&model.cfg, 1);
        let dets = [det(0.5, 0.5, 0.2, 0.2, 0.9)];
        let tracks = Matrix::zeros(2, 16);
        assert!(matches!(
            model.decoder_forward(&dets, &tracks, &grid),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn score_embedding_enters_queries() {
        let model = toy_model();
        let a = det(0.4, 0.4, 0.2, 0.2, 0.0);
        let b = det(0.4, 0.4, 0.2, 0.2, 1.0);
        let qa = model.encode_object_queries(&[a]).unwrap();
        let qb = model.encode_object_queries(&[b]).unwrap();
        let ws = model.params.tensor(model.score_embed.w);
        for c in 0..32 {
            let diff = qb.get(0, c) - qa.get(0, c);
            assert!((diff - ws[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        // Gradient of a scalar readout of the full decoder with respect to
        // every model parameter.
        let model = toy_model();
        let grid = demo_grid(&model.cfg, 23);
        let dets = [det(0.35, 0.45, 0.25, 0.2, 0.9), det(0.65, 0.55, 0.2, 0.3, 0.7)];
        let tracks: Vec<Vec<f64>> = vec![
            (0..32).map(|i| (i as f64 * 0.13).sin() * 0.5).collect(),
            (0..32).map(|i| (i as f64 * 0.29).cos() * 0.5).collect(),
        ];
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let theta = model.params.data.clone();
        let err = grad_check(&theta, 1e-5, 250, 9, |t, seg| {
            // The graph reads parameter values from the bound leaves, so the
            // perturbed theta flows in through `seg` directly.
            let track_rows: Vec<Seg> = tracks.iter().map(|r| t.leaf_seg(r)).collect();
            let obj = g_encode_queries(t, &model, seg, &dets).unwrap();
            let layers = g_decoder_forward(t, &model, seg, obj, &boxes, &track_rows, &grid).unwrap();
            let mut parts = Vec::new();
            for l in &layers {
                for r in 0..l.temporal.w.rows {
                    for c in 0..l.temporal.w.cols {
                        parts.push(l.temporal.w.at(r, c));
                        parts.push(l.temporal.s.at(r, c));
                    }
                }
                for r in 0..l.spatial.w.rows {
                    for c in 0..l.spatial.w.cols {
                        parts.push(l.spatial.w.at(r, c));
                    }
                }
                for q in &l.queries {
                    parts.push(t.sum_range(*q));
                }
                for gb in &l.refined {
                    parts.push(gb.cx);
                    parts.push(gb.w);
                }
            }
            let total = t.sum_vars(&parts);
            // Squash so second derivatives are non-trivial.
            let sq = t.mul(total, total);
            t.mul_c(sq, 0.01)
        })
        .unwrap();
        assert!(err < 1e-4, "decoder grad rel err {err}");
    }

    #[test]
    fn model_config_validation() {
        let bad = ModelConfig {
            d_model: 30,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            heads: 3,
            d_model: 32,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn param_store_roundtrip_names() {
        let model = toy_model();
        let id = model.params.find("layer0.wa0.w").unwrap();
        let meta = model.params.meta(id);
        assert_eq!(meta.dims, vec![16, 32]);
        assert!(model.params.find("nonexistent").is_none());
    }
}
