//! Driver behavior model: interaction graphs over backbone features, an
//! LSTM encoder over the fused Ego features, and a decoder with a future gate
//! and accumulator producing the next-frame Go/Stop distribution.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use riskid_autodiff::{BoundParams, ParamSet, SparseRows, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::features::{self, compact, downsample_mask, roi_samples, FrameContent, GridSpec};
use crate::graphs::{self, gate_mask, GraphMode, GraphNode, NodeAnchor};
use crate::scene::{mask_generate, BinaryMask, Clip, Intention, Point3, StuffCategory, ThingCategory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature width D.
    pub dim: usize,
    /// Recurrent hidden width H.
    pub hidden: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Ego-Thing distance threshold (m).
    pub mu_thing: f64,
    /// Ego-Stuff distance threshold (m).
    pub mu_stuff: f64,
    pub thing_layers: usize,
    pub stuff_layers: usize,
    pub decoder_len: usize,
    /// Adds per-step decoder response losses during stage 2.
    pub aux_step_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 64,
            grid_rows: 28,
            grid_cols: 28,
            mu_thing: 3.0,
            mu_stuff: 0.6,
            thing_layers: 2,
            stuff_layers: 1,
            decoder_len: 3,
            aux_step_loss: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hidden == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::invalid("model config", "widths and grid must be positive"));
        }
        if self.decoder_len == 0 || self.thing_layers == 0 || self.stuff_layers == 0 {
            return Err(Error::invalid("model config", "layer counts and decoder length must be at least 1"));
        }
        if !(self.mu_thing >= 0.0 && self.mu_stuff >= 0.0) {
            return Err(Error::invalid("model config", "distance thresholds must be nonnegative"));
        }
        Ok(())
    }

    pub fn grid(&self, clip: &Clip) -> Result<GridSpec> {
        GridSpec::new(self.grid_rows, self.grid_cols, clip.width, clip.height)
    }
}

pub mod names {
    pub const ET: &str = "ego_thing";
    pub const ES: &str = "ego_stuff";
    pub const ENCODER: &str = "encoder";
    pub const DECODER: &str = "trn.decoder";
    pub const ACCUMULATOR: &str = "trn.accumulator";
    pub const INIT: &str = "trn.init";
    pub const STEP_HEAD: &str = "trn.step_head";
    pub const RESPONSE: &str = "response";
    pub const INTENTION: &str = "intention";

    pub fn p(prefix: &str, name: &str) -> String {
        format!("{prefix}.{name}")
    }

    pub fn layer(prefix: &str, l: usize, name: &str) -> String {
        format!("{prefix}.layer{l}.{name}")
    }
}

/// True for parameters trained in stage 1 (intention path only).
pub fn is_intention_param(name: &str) -> bool {
    name.starts_with("backbone.intention_") || name.starts_with("intention.")
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("param shape")
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

fn lstm_params(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, input: usize, h: usize) {
    params.insert(names::p(prefix, "w_x"), glorot(rng, input, 4 * h));
    params.insert(names::p(prefix, "w_h"), glorot(rng, h, 4 * h));
    let mut bias = vec![0.0; 4 * h];
    // Forget gate starts open.
    bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
    params.insert(names::p(prefix, "bias"), Tensor::new(vec![1, 4 * h], bias).expect("bias"));
}

fn graph_params(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize, layers: usize) {
    params.insert(names::p(prefix, "w"), glorot(rng, d, d));
    params.insert(names::p(prefix, "w_prime"), glorot(rng, d, d));
    for l in 0..layers {
        params.insert(names::layer(prefix, l, "weight"), glorot(rng, d, d));
        params.insert(names::layer(prefix, l, "ln_gain"), Tensor::filled(&[1, d], 1.0));
        params.insert(names::layer(prefix, l, "ln_bias"), Tensor::zeros(&[1, d]));
    }
}

/// Fresh parameters for `config`, drawn from `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = (config.dim, config.hidden);
    let mut params = ParamSet::new();
    features::init_backbone(&mut params, config.grid_rows * config.grid_cols, d, &mut rng);
    graph_params(&mut params, &mut rng, names::ET, d, config.thing_layers);
    graph_params(&mut params, &mut rng, names::ES, d, config.stuff_layers);
    lstm_params(&mut params, &mut rng, names::ENCODER, d, h);
    lstm_params(&mut params, &mut rng, names::DECODER, h, h);
    lstm_params(&mut params, &mut rng, names::ACCUMULATOR, 2 * h, h);
    params.insert(names::p(names::INIT, "weight"), glorot(&mut rng, d, h));
    params.insert(names::p(names::INIT, "bias"), Tensor::zeros(&[1, h]));
    params.insert(names::p(names::STEP_HEAD, "weight"), glorot(&mut rng, h, 2));
    params.insert(names::p(names::STEP_HEAD, "bias"), Tensor::zeros(&[1, 2]));
    params.insert(names::p(names::RESPONSE, "weight"), glorot(&mut rng, h, 2));
    params.insert(names::p(names::RESPONSE, "bias"), Tensor::zeros(&[1, 2]));
    params.insert(names::p(names::INTENTION, "weight"), glorot(&mut rng, d, Intention::COUNT));
    params.insert(names::p(names::INTENTION, "bias"), Tensor::zeros(&[1, Intention::COUNT]));
    Ok(params)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RISKIDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model configuration plus every named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Magic, version, config JSON, then tensors sorted by name with
    /// little-endian dims and f64 values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
        config.validate()?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndims = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Removal of one tracklet: per-frame masks zero over its boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub removed: Option<u32>,
    pub masks: Vec<BinaryMask>,
}

impl Intervention {
    pub fn remove(clip: &Clip, id: u32) -> Result<Self> {
        let tr = clip.tracklet(id)?;
        let masks = (0..clip.frames)
            .map(|t| match tr.box_at(t) {
                Some(b) => mask_generate(clip.width, clip.height, b),
                None => BinaryMask::ones(clip.width, clip.height),
            })
            .collect();
        Ok(Self { removed: Some(id), masks })
    }

    /// All-ones masks and no removal.
    pub fn none(clip: &Clip) -> Self {
        Self { removed: None, masks: vec![BinaryMask::ones(clip.width, clip.height); clip.frames] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThingNode {
    pub frame: usize,
    pub id: u32,
    pub category: ThingCategory,
    pub anchor: Point3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StuffNode {
    pub frame: usize,
    pub category: StuffCategory,
    pub anchor: Vec<Point3>,
}

/// Everything the forward pass needs from a clip, with the gates resolved.
///
/// Ego-Thing rows: the Ego of every frame (row t), then Thing nodes frame by
/// frame. Ego-Stuff rows: the Ego of every frame, then Stuff nodes. Both
/// graphs are block diagonal over frames.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub frames: usize,
    pub ego_anchors: Vec<Point3>,
    pub things: Vec<ThingNode>,
    /// Four bilinear samples per Ego-Thing row over the interaction table.
    pub roi_rows: Arc<SparseRows>,
    pub thing_mask: Vec<bool>,
    pub stuff: Vec<StuffNode>,
    /// One MaskAlign row per Stuff node.
    pub stuff_rows: Arc<SparseRows>,
    pub stuff_mask: Vec<bool>,
    pub intention_row: Arc<SparseRows>,
}

impl Prepared {
    pub fn thing_rows(&self) -> usize {
        self.frames + self.things.len()
    }

    /// Ego-Thing row indices of frame `t`: Thing rows, then the Ego row.
    pub fn frame_thing_rows(&self, t: usize) -> Vec<usize> {
        let mut rows: Vec<usize> =
            self.things.iter().enumerate().filter(|(_, n)| n.frame == t).map(|(i, _)| self.frames + i).collect();
        rows.push(t);
        rows
    }
}

fn block_mask(frames: &[usize], local: &dyn Fn(usize, usize) -> bool) -> Vec<bool> {
    let n = frames.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = frames[i] == frames[j] && local(i, j);
        }
    }
    mask
}

/// Resolves nodes, sparse feature rows and gates of `clip` under an optional
/// intervention.
pub fn prepare(clip: &Clip, intervention: Option<&Intervention>, config: &ModelConfig) -> Result<Prepared> {
    clip.validate()?;
    let grid = config.grid(clip)?;
    let removed = intervention.and_then(|i| i.removed);
    if let Some(id) = removed {
        clip.tracklet(id)?;
    }
    let content = features::clip_content(clip, intervention.map(|i| i.masks.as_slice()), grid)?;
    let frames = clip.frames;

    let ego_box = crate::scene::BoundingBox::frame(clip.width, clip.height);
    let ego_anchors: Vec<Point3> = (0..frames).map(|t| clip.ego_anchor(t)).collect::<Result<_>>()?;
    let mut things = Vec::new();
    let mut boxes = Vec::new();
    for t in 0..frames {
        for tr in clip.frame_things(t, removed) {
            let b = *tr.box_at(t).expect("frame_things returns present boxes");
            if b.is_degenerate() {
                continue;
            }
            things.push(ThingNode { frame: t, id: tr.id, category: tr.category, anchor: clip.box_anchor(t, &b)? });
            boxes.push(b);
        }
    }
    let mut roi_rows: SparseRows = Vec::with_capacity(4 * (frames + things.len()));
    let mut push_roi = |fc: &FrameContent, b: &crate::scene::BoundingBox| -> Result<()> {
        for sample in roi_samples(b, &grid)? {
            let mut row = Vec::new();
            for (cell, w) in sample {
                fc.interaction_entries(cell, &mut row, w);
            }
            compact(&mut row);
            roi_rows.push(row);
        }
        Ok(())
    };
    for fc in &content {
        push_roi(fc, &ego_box)?;
    }
    for (n, b) in things.iter().zip(&boxes) {
        push_roi(&content[n.frame], b)?;
    }

    let node_frames: Vec<usize> = (0..frames).chain(things.iter().map(|n| n.frame)).collect();
    let thing_anchor = |i: usize| if i < frames { ego_anchors[i] } else { things[i - frames].anchor };
    let thing_mask = block_mask(&node_frames, &|i, j| {
        i == j || graphs::spatial_gate(&thing_anchor(i), &thing_anchor(j), config.mu_thing)
    });

    let mut stuff = Vec::new();
    let mut stuff_rows: SparseRows = Vec::new();
    for t in 0..frames {
        for region in &clip.stuff {
            let cells = downsample_mask(&region.masks[t], grid.cols, grid.rows)?;
            let total = cells.count_ones();
            if total == 0 {
                continue;
            }
            let mut row = Vec::new();
            let mut anchor = Vec::with_capacity(total);
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    if cells.get(c, r) {
                        content[t].interaction_entries(r * grid.cols + c, &mut row, 1.0 / total as f64);
                        let (u, v) = grid.cell_center(r, c);
                        anchor.push(clip.unproject_at(t, u, v)?);
                    }
                }
            }
            compact(&mut row);
            stuff_rows.push(row);
            stuff.push(StuffNode { frame: t, category: region.category, anchor });
        }
    }
    let stuff_frames: Vec<usize> = (0..frames).chain(stuff.iter().map(|n| n.frame)).collect();
    let stuff_mask = block_mask(&stuff_frames, &|i, j| {
        if i == j {
            return true;
        }
        if i >= frames && j >= frames {
            return false;
        }
        let (e, s) = if i < frames { (i, j) } else { (j, i) };
        if s < frames {
            return false;
        }
        let region = NodeAnchor::Region(stuff[s - frames].anchor.clone());
        graphs::anchor_distance(&NodeAnchor::Point(ego_anchors[e]), &region) <= config.mu_stuff
    });

    Ok(Prepared {
        frames,
        ego_anchors,
        things,
        roi_rows: Arc::new(roi_rows),
        thing_mask,
        stuff,
        stuff_rows: Arc::new(stuff_rows),
        stuff_mask,
        intention_row: Arc::new(vec![features::intention_row(&content)?]),
    })
}

/// Graph nodes of frame `t` in export order (Things, then Ego).
pub fn frame_graph_nodes(prep: &Prepared, t: usize) -> Vec<GraphNode> {
    prep.frame_thing_rows(t)
        .into_iter()
        .map(|r| {
            if r < prep.frames {
                GraphNode { anchor: NodeAnchor::Point(prep.ego_anchors[r]), ego: true }
            } else {
                GraphNode { anchor: NodeAnchor::Point(prep.things[r - prep.frames].anchor), ego: false }
            }
        })
        .collect()
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// 1 x 2 (Go, Stop); absent for the intention-only pass.
    pub response: Option<Var>,
    /// 1 x 12.
    pub intention: Var,
    /// 1 x 2 per decoder step.
    pub steps: Vec<Var>,
    /// Ego-Thing affinity over all rows.
    pub thing_affinity: Option<Var>,
}

/// One LSTM cell step from gate pre-activations `z` (gate order i, f, g, o).
pub fn lstm_step(tape: &Tape, z: Var, c_prev: Option<Var>, h: usize) -> Result<(Var, Var)> {
    let i = tape.sigmoid(tape.slice_cols(z, 0, h)?);
    let g = tape.tanh(tape.slice_cols(z, 2 * h, h)?);
    let o = tape.sigmoid(tape.slice_cols(z, 3 * h, h)?);
    let mut c = tape.mul(i, g)?;
    if let Some(cp) = c_prev {
        let f = tape.sigmoid(tape.slice_cols(z, h, h)?);
        c = tape.add(c, tape.mul(f, cp)?)?;
    }
    let hidden = tape.mul(o, tape.tanh(c))?;
    Ok((hidden, c))
}

fn linear(tape: &Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    Ok(tape.add_row(tape.matmul(x, weight)?, bias)?)
}

/// Runs an LSTM from a zero state over the rows of `x`; returns every
/// hidden state and the final cell state.
pub fn encode_interactions(tape: &Tape, p: &BoundParams, x: Var, h: usize) -> Result<(Vec<Var>, Var)> {
    let rows = tape.shape(x)[0];
    if rows == 0 {
        return Err(Error::EmptyInput("encoder"));
    }
    let xw = linear(tape, x, p.var(&names::p(names::ENCODER, "w_x"))?, p.var(&names::p(names::ENCODER, "bias"))?)?;
    let w_h = p.var(&names::p(names::ENCODER, "w_h"))?;
    let mut states = Vec::with_capacity(rows);
    let mut c: Option<Var> = None;
    for t in 0..rows {
        let mut z = tape.row(xw, t)?;
        if let Some(prev) = states.last() {
            z = tape.add(z, tape.matmul(*prev, w_h)?)?;
        }
        let (hn, cn) = lstm_step(tape, z, c, h)?;
        states.push(hn);
        c = Some(cn);
    }
    Ok((states, c.expect("at least one step")))
}

/// Decoder seeded by the intention representation, future gate, accumulator
/// and response head. Returns (response probs, per-step probs).
pub fn trn_decode(
    tape: &Tape,
    p: &BoundParams,
    enc_h: Var,
    enc_c: Var,
    intention_repr: Var,
    config: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let h = config.hidden;
    let v = |prefix: &str, n: &str| p.var(&names::p(prefix, n));
    let mut hd = tape.tanh(linear(tape, intention_repr, v(names::INIT, "weight")?, v(names::INIT, "bias")?)?);
    let mut cd: Option<Var> = None;
    let dec_in = linear(tape, enc_h, v(names::DECODER, "w_x")?, v(names::DECODER, "bias")?)?;
    let w_h = v(names::DECODER, "w_h")?;
    let mut hs = Vec::with_capacity(config.decoder_len);
    let mut steps = Vec::with_capacity(config.decoder_len);
    for _ in 0..config.decoder_len {
        let z = tape.add(dec_in, tape.matmul(hd, w_h)?)?;
        // First step starts from a zero cell state.
        let (hn, cn) = lstm_step(tape, z, cd, h)?;
        hd = hn;
        cd = Some(cn);
        hs.push(hn);
        let logits = linear(tape, hn, v(names::STEP_HEAD, "weight")?, v(names::STEP_HEAD, "bias")?)?;
        steps.push(tape.softmax(logits));
    }
    let future = tape.add_n(&hs)?;
    let acc_in = tape.concat_cols(&[enc_h, future])?;
    let z = tape.add(
        linear(tape, acc_in, v(names::ACCUMULATOR, "w_x")?, v(names::ACCUMULATOR, "bias")?)?,
        tape.matmul(enc_h, v(names::ACCUMULATOR, "w_h")?)?,
    )?;
    let (ha, _) = lstm_step(tape, z, Some(enc_c), h)?;
    let logits = linear(tape, ha, v(names::RESPONSE, "weight")?, v(names::RESPONSE, "bias")?)?;
    Ok((tape.softmax(logits), steps))
}

pub fn intention_head(tape: &Tape, p: &BoundParams, repr: Var) -> Result<Var> {
    let logits = linear(
        tape,
        repr,
        p.var(&names::p(names::INTENTION, "weight"))?,
        p.var(&names::p(names::INTENTION, "bias"))?,
    )?;
    Ok(tape.softmax(logits))
}

fn table_var(tape: &Tape, p: &BoundParams, intention: bool) -> Result<Var> {
    let n = if intention {
        [features::INTENTION_CLASS, features::INTENTION_POSITION, features::INTENTION_STATE]
    } else {
        [features::BACKBONE_CLASS, features::BACKBONE_POSITION, features::BACKBONE_STATE]
    };
    Ok(tape.concat_rows(&[p.var(n[0])?, p.var(n[1])?, p.var(n[2])?])?)
}

fn graph_stack(tape: &Tape, p: &BoundParams, prefix: &str, x0: Var, mask: &[bool], layers: usize) -> Result<(Var, Var)> {
    let g = graphs::affinity(tape, x0, p.var(&names::p(prefix, "w"))?, p.var(&names::p(prefix, "w_prime"))?, mask)?;
    let mut x = x0;
    for l in 0..layers {
        x = graphs::gcn_layer(
            tape,
            g,
            x,
            p.var(&names::layer(prefix, l, "weight"))?,
            p.var(&names::layer(prefix, l, "ln_gain"))?,
            p.var(&names::layer(prefix, l, "ln_bias"))?,
        )?;
    }
    Ok((g, x))
}

/// Full forward pass; with `intention_only` the graphs and response path are
/// skipped.
pub fn forward(
    tape: &Tape,
    p: &BoundParams,
    prep: &Prepared,
    config: &ModelConfig,
    intention_only: bool,
) -> Result<ForwardVars> {
    let repr = tape.sparse_combine(table_var(tape, p, true)?, Arc::clone(&prep.intention_row))?;
    let intention = intention_head(tape, p, repr)?;
    if intention_only {
        return Ok(ForwardVars { response: None, intention, steps: Vec::new(), thing_affinity: None });
    }
    let t = prep.frames;
    let table = table_var(tape, p, false)?;
    let samples = tape.sparse_combine(table, Arc::clone(&prep.roi_rows))?;
    let x_thing = tape.max_row_groups(samples, 4)?;
    let ego = tape.slice_rows(x_thing, 0, t)?;
    let (g_thing, out_thing) = graph_stack(tape, p, names::ET, x_thing, &prep.thing_mask, config.thing_layers)?;
    let x_stuff = if prep.stuff.is_empty() {
        ego
    } else {
        let s = tape.sparse_combine(table, Arc::clone(&prep.stuff_rows))?;
        tape.concat_rows(&[ego, s])?
    };
    let (_, out_stuff) = graph_stack(tape, p, names::ES, x_stuff, &prep.stuff_mask, config.stuff_layers)?;
    let fused = tape.add(tape.slice_rows(out_thing, 0, t)?, tape.slice_rows(out_stuff, 0, t)?)?;
    let (states, c) = encode_interactions(tape, p, fused, config.hidden)?;
    let (response, steps) = trn_decode(tape, p, *states.last().expect("frames > 0"), c, repr, config)?;
    Ok(ForwardVars { response: Some(response), intention, steps, thing_affinity: Some(g_thing) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseDist {
    pub p_go: f64,
    pub p_stop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionDist {
    pub probs: Vec<f64>,
}

impl IntentionDist {
    pub fn argmax(&self) -> Intention {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        Intention::ALL[best]
    }
}

/// Model output for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub response: ResponseDist,
    pub intention: IntentionDist,
    /// Ego-Thing weight from the Ego to each Thing in the last frame where
    /// the Thing is a node, by id.
    pub ego_attention: Vec<(u32, f64)>,
}

/// Forward pass without gradients.
pub fn predict_prepared(ckpt: &Checkpoint, prep: &Prepared) -> Result<Prediction> {
    let tape = Tape::new();
    let bound = ckpt.params.bind(&tape, |_| false);
    let out = forward(&tape, &bound, prep, &ckpt.config, false)?;
    let r = tape.value(out.response.expect("full pass"));
    let response = ResponseDist { p_go: r.data()[0], p_stop: r.data()[1] };
    let intention = IntentionDist { probs: tape.value(out.intention).data().to_vec() };
    let g = tape.value(out.thing_affinity.expect("full pass"));
    // Latest frame wins; nodes are ordered by frame.
    let mut latest = std::collections::BTreeMap::new();
    for (i, n) in prep.things.iter().enumerate() {
        latest.insert(n.id, g.get(n.frame, prep.frames + i));
    }
    let ego_attention = latest.into_iter().collect();
    Ok(Prediction { response, intention, ego_attention })
}

/// Prediction for the frame after the clip, optionally with one tracklet
/// removed.
pub fn predict(ckpt: &Checkpoint, clip: &Clip, intervention: Option<&Intervention>) -> Result<Prediction> {
    predict_prepared(ckpt, &prepare(clip, intervention, &ckpt.config)?)
}

/// Node and edge data of the Ego-Thing graph at frame `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub frame: usize,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<graphs::Edge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    /// Tracklet id, or "ego".
    pub id: String,
    pub category: String,
    pub anchor: Point3,
}

pub fn export_graph(ckpt: &Checkpoint, clip: &Clip, t: usize, threshold: f64) -> Result<GraphExport> {
    if t >= clip.frames {
        return Err(Error::invalid("frame", format!("{t} outside clip of {} frames", clip.frames)));
    }
    let prep = prepare(clip, None, &ckpt.config)?;
    let tape = Tape::new();
    let bound = ckpt.params.bind(&tape, |_| false);
    let out = forward(&tape, &bound, &prep, &ckpt.config, false)?;
    let g = tape.value(out.thing_affinity.expect("full pass"));
    let rows = prep.frame_thing_rows(t);
    let n = rows.len();
    let mut local = Tensor::zeros(&[n, n]);
    for (a, &ra) in rows.iter().enumerate() {
        for (b, &rb) in rows.iter().enumerate() {
            local.data_mut()[a * n + b] = g.get(ra, rb);
        }
    }
    let nodes = rows
        .iter()
        .map(|&r| {
            if r < prep.frames {
                ExportNode { id: "ego".into(), category: "ego".into(), anchor: prep.ego_anchors[r] }
            } else {
                let node = &prep.things[r - prep.frames];
                ExportNode {
                    id: node.id.to_string(),
                    category: node.category.name().into(),
                    anchor: node.anchor,
                }
            }
        })
        .collect();
    Ok(GraphExport { frame: t, nodes, edges: graphs::export_edges(&local, threshold)? })
}

/// Checks that `mode` gates are consistent with a recomputation from the
/// nodes of each frame (used by tests and diagnostics).
pub fn frame_thing_gate(prep: &Prepared, t: usize, mu: f64) -> Result<Vec<bool>> {
    gate_mask(&frame_graph_nodes(prep, t), GraphMode::EgoThing, mu)
}
