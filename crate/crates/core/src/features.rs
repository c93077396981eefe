//! Toy backbone standing in for a pretrained video network.
//!
//! Each pixel of a frame carries a content class (a Thing category, a Stuff
//! category, or background). A grid cell's feature is the sum of learnable
//! class embeddings weighted by the fraction of the cell's pixels showing that
//! class, plus a learnable positional code weighted by the foreground fraction,
//! plus a state embedding weighted by the light state. Masked pixels and
//! background contribute nothing, so a fully masked cell has a zero feature.
//!
//! Two taps share this layout with separate tables: the interaction tap sees
//! all content, the intention tap sees Stuff content only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use riskid_autodiff::{ParamSet, Tensor};

use crate::error::{Error, Result};
use crate::scene::{BinaryMask, BoundingBox, Clip, Content, StuffCategory, ThingCategory};

pub const BACKBONE_CLASS: &str = "backbone.class";
pub const BACKBONE_POSITION: &str = "backbone.position";
pub const BACKBONE_STATE: &str = "backbone.state";
pub const INTENTION_CLASS: &str = "backbone.intention_class";
pub const INTENTION_POSITION: &str = "backbone.intention_position";
pub const INTENTION_STATE: &str = "backbone.intention_state";

const NO_CLASS: u8 = u8::MAX;
const FIRST_STUFF_CLASS: usize = ThingCategory::ALL.len();

/// Grid of feature cells laid over a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub frame_width: usize,
    pub frame_height: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, frame_width: usize, frame_height: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > frame_height || cols > frame_width {
            return Err(Error::invalid(
                "grid",
                format!("{rows}x{cols} cells over a {frame_width}x{frame_height} frame"),
            ));
        }
        Ok(Self { rows, cols, frame_width, frame_height })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_width(&self) -> f64 {
        self.frame_width as f64 / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.frame_height as f64 / self.rows as f64
    }

    /// Pixel rows and columns covered by cell `(r, c)`.
    pub fn block(&self, r: usize, c: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (
            block_range(r, self.rows, self.frame_height),
            block_range(c, self.cols, self.frame_width),
        )
    }

    /// Center of cell `(r, c)` in pixel coordinates.
    pub fn cell_center(&self, r: usize, c: usize) -> (f64, f64) {
        ((c as f64 + 0.5) * self.cell_width(), (r as f64 + 0.5) * self.cell_height())
    }
}

fn block_range(i: usize, n: usize, len: usize) -> std::ops::Range<usize> {
    i * len / n..(i + 1) * len / n
}

/// Row layout of a backbone table: classes, then one positional row per cell,
/// then the state row.
#[derive(Clone, Copy, Debug)]
pub struct TableLayout {
    pub cells: usize,
}

impl TableLayout {
    pub fn rows(&self) -> usize {
        Content::CLASSES + self.cells + 1
    }

    pub fn class_row(&self, class: usize) -> usize {
        class
    }

    pub fn position_row(&self, cell: usize) -> usize {
        Content::CLASSES + cell
    }

    pub fn state_row(&self) -> usize {
        Content::CLASSES + self.cells
    }
}

/// Per-frame T x rows x cols x D feature array.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub frames: usize,
    pub grid: GridSpec,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    /// Features of frame `t`, cell-major.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.grid.cells() * self.dim;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn cell(&self, t: usize, r: usize, c: usize) -> &[f64] {
        let i = r * self.grid.cols + c;
        &self.frame(t)[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn init_backbone(params: &mut ParamSet, cells: usize, dim: usize, rng: &mut impl Rng) {
    let mut table = |rows: usize, scale: f64| {
        let data = (0..rows * dim).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::new(vec![rows, dim], data).expect("table shape")
    };
    params.insert(BACKBONE_CLASS, table(Content::CLASSES, 1.0));
    params.insert(BACKBONE_POSITION, table(cells, 0.5));
    params.insert(BACKBONE_STATE, table(1, 1.0));
    params.insert(INTENTION_CLASS, table(Content::CLASSES, 1.0));
    params.insert(INTENTION_POSITION, table(cells, 0.5));
    params.insert(INTENTION_STATE, table(1, 1.0));
}

/// Per-pixel content of one frame: class index (or none) and light state.
#[derive(Clone, Debug)]
pub struct PixelLabels {
    pub width: usize,
    pub height: usize,
    class: Vec<u8>,
    state: Vec<f64>,
}

impl PixelLabels {
    pub fn content(&self, x: usize, y: usize) -> Content {
        let c = self.class[y * self.width + x];
        if c == NO_CLASS {
            Content::Background
        } else if (c as usize) < FIRST_STUFF_CLASS {
            Content::Thing(ThingCategory::ALL[c as usize])
        } else {
            Content::Stuff(StuffCategory::ALL[c as usize - FIRST_STUFF_CLASS])
        }
    }
}

/// Paints Stuff regions, then the frame's Thing boxes from far to near.
pub fn render_labels(clip: &Clip, t: usize) -> PixelLabels {
    let (w, h) = (clip.width, clip.height);
    let mut class = vec![NO_CLASS; w * h];
    let mut state = vec![0.0; w * h];
    for s in &clip.stuff {
        let idx = Content::Stuff(s.category).class_index().expect("stuff class") as u8;
        let st = s.state[t];
        s.masks[t].for_each_segment(|y, xs| {
            for x in xs {
                class[y * w + x] = idx;
                state[y * w + x] = st;
            }
        });
    }
    let mut things: Vec<(f64, u32, ThingCategory, BoundingBox)> = clip
        .frame_things(t, None)
        .into_iter()
        .filter_map(|tr| {
            let b = *tr.box_at(t)?;
            let (u, v) = b.center();
            let px = (u.floor().max(0.0) as usize).min(w - 1);
            let py = (v.floor().max(0.0) as usize).min(h - 1);
            Some((clip.depth[t].depth_at(px, py), tr.id, tr.category, b))
        })
        .collect();
    things.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    for (_, _, cat, b) in things {
        let idx = cat.index() as u8;
        let cols = b.pixel_cols(w);
        for y in b.pixel_rows(h) {
            for x in cols.clone() {
                class[y * w + x] = idx;
                state[y * w + x] = 0.0;
            }
        }
    }
    PixelLabels { width: w, height: h, class, state }
}

/// Visible content of one grid cell.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellContent {
    /// (class index, fraction of the cell's pixels).
    pub classes: Vec<(usize, f64)>,
    /// Fraction of non-background pixels.
    pub foreground: f64,
    /// Fraction of Stuff pixels.
    pub stuff: f64,
    /// Sum over pixels of light state, divided by the cell's pixel count.
    pub state: f64,
}

/// Cell contents of one frame after applying an optional intervention mask.
#[derive(Clone, Debug)]
pub struct FrameContent {
    pub grid: GridSpec,
    pub cells: Vec<CellContent>,
}

impl FrameContent {
    pub fn new(labels: &PixelLabels, mask: Option<&BinaryMask>, grid: GridSpec) -> Result<Self> {
        if (labels.width, labels.height) != (grid.frame_width, grid.frame_height) {
            return Err(Error::Dims {
                op: "frame content",
                expected: format!("{:?}", (grid.frame_width, grid.frame_height)),
                got: format!("{:?}", (labels.width, labels.height)),
            });
        }
        let keep = match mask {
            Some(m) => {
                if m.dims() != (labels.width, labels.height) {
                    return Err(Error::Dims {
                        op: "intervention mask",
                        expected: format!("{:?}", (labels.width, labels.height)),
                        got: format!("{:?}", m.dims()),
                    });
                }
                Some(m.to_dense())
            }
            None => None,
        };
        let w = labels.width;
        let mut cells = Vec::with_capacity(grid.cells());
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let (ys, xs) = grid.block(r, c);
                let area = (ys.len() * xs.len()) as f64;
                let mut counts = [0u32; Content::CLASSES];
                let mut state = 0.0;
                for y in ys {
                    for x in xs.clone() {
                        let i = y * w + x;
                        if keep.as_ref().is_some_and(|k| !k[i]) {
                            continue;
                        }
                        let cl = labels.class[i];
                        if cl != NO_CLASS {
                            counts[cl as usize] += 1;
                            state += labels.state[i];
                        }
                    }
                }
                let classes: Vec<(usize, f64)> = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| **n > 0)
                    .map(|(k, n)| (k, *n as f64 / area))
                    .collect();
                let foreground = classes.iter().map(|(_, f)| f).sum();
                let stuff = classes.iter().filter(|(k, _)| *k >= FIRST_STUFF_CLASS).map(|(_, f)| f).sum();
                cells.push(CellContent { classes, foreground, stuff, state: state / area });
            }
        }
        Ok(Self { grid, cells })
    }

    /// Sparse combination of interaction-table rows giving the cell feature.
    pub fn interaction_entries(&self, cell: usize, out: &mut Vec<(usize, f64)>, weight: f64) {
        let layout = TableLayout { cells: self.grid.cells() };
        let cc = &self.cells[cell];
        for &(k, f) in &cc.classes {
            out.push((layout.class_row(k), weight * f));
        }
        if cc.foreground > 0.0 {
            out.push((layout.position_row(cell), weight * cc.foreground));
        }
        if cc.state != 0.0 {
            out.push((layout.state_row(), weight * cc.state));
        }
    }

    /// Same for the intention table, restricted to Stuff content.
    pub fn intention_entries(&self, cell: usize, out: &mut Vec<(usize, f64)>, weight: f64) {
        let layout = TableLayout { cells: self.grid.cells() };
        let cc = &self.cells[cell];
        for &(k, f) in cc.classes.iter().filter(|(k, _)| *k >= FIRST_STUFF_CLASS) {
            out.push((layout.class_row(k), weight * f));
        }
        if cc.stuff > 0.0 {
            out.push((layout.position_row(cell), weight * cc.stuff));
        }
        if cc.state != 0.0 {
            out.push((layout.state_row(), weight * cc.state));
        }
    }
}

/// Merges duplicate table rows in a sparse entry list (sorted by row).
pub fn compact(entries: &mut Vec<(usize, f64)>) {
    entries.sort_by_key(|e| e.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
    for &(k, w) in entries.iter() {
        match out.last_mut() {
            Some(last) if last.0 == k => last.1 += w,
            _ => out.push((k, w)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    *entries = out;
}

fn check_masks(clip: &Clip, masks: Option<&[BinaryMask]>) -> Result<()> {
    if let Some(ms) = masks {
        if ms.len() != clip.frames {
            return Err(Error::Dims { op: "backbone masks", expected: clip.frames.to_string(), got: ms.len().to_string() });
        }
        for m in ms {
            if m.dims() != (clip.width, clip.height) {
                return Err(Error::Dims {
                    op: "backbone masks",
                    expected: format!("{:?}", (clip.width, clip.height)),
                    got: format!("{:?}", m.dims()),
                });
            }
        }
    }
    Ok(())
}

/// Cell contents of every frame under optional per-frame masks.
pub fn clip_content(clip: &Clip, masks: Option<&[BinaryMask]>, grid: GridSpec) -> Result<Vec<FrameContent>> {
    check_masks(clip, masks)?;
    (0..clip.frames)
        .map(|t| FrameContent::new(&render_labels(clip, t), masks.map(|m| &m[t]), grid))
        .collect()
}

/// Sparse row averaging the intention-tap features of every cell and frame.
pub fn intention_row(content: &[FrameContent]) -> Result<Vec<(usize, f64)>> {
    let first = content.first().ok_or(Error::EmptyInput("intention representation"))?;
    let n = (content.len() * first.grid.cells()) as f64;
    let mut row = Vec::new();
    for fc in content {
        for cell in 0..fc.grid.cells() {
            fc.intention_entries(cell, &mut row, 1.0 / n);
        }
    }
    compact(&mut row);
    Ok(row)
}

/// Backbone table assembled from its named parts.
pub fn table(params: &ParamSet, intention: bool) -> Result<Tensor> {
    let names = if intention {
        [INTENTION_CLASS, INTENTION_POSITION, INTENTION_STATE]
    } else {
        [BACKBONE_CLASS, BACKBONE_POSITION, BACKBONE_STATE]
    };
    let parts: Vec<&Tensor> = names
        .iter()
        .map(|n| params.get(n).map_err(Error::from))
        .collect::<Result<_>>()?;
    let dim = parts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != dim {
            return Err(Error::Checkpoint("backbone tables disagree on feature width".into()));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(vec![rows, dim], data)?)
}

fn apply(table: &Tensor, entries: &[(usize, f64)], out: &mut [f64]) -> Result<()> {
    for &(k, w) in entries {
        if k >= table.rows() {
            return Err(Error::Checkpoint(format!("backbone table has {} rows, row {k} requested", table.rows())));
        }
        for (o, v) in out.iter_mut().zip(table.row_slice(k)) {
            *o += w * v;
        }
    }
    Ok(())
}

/// Interaction feature grid and intention representation of a clip under
/// optional per-frame masks (1 keeps a pixel, 0 removes it).
pub fn backbone_forward(
    params: &ParamSet,
    clip: &Clip,
    masks: Option<&[BinaryMask]>,
    grid: GridSpec,
) -> Result<(FeatureGrid, Vec<f64>)> {
    let content = clip_content(clip, masks, grid)?;
    let inter = table(params, false)?;
    let intent = table(params, true)?;
    let expected = TableLayout { cells: grid.cells() }.rows();
    if inter.rows() != expected || intent.rows() != expected {
        return Err(Error::Checkpoint(format!("backbone tables need {expected} rows for this grid")));
    }
    let dim = inter.cols();
    let mut data = vec![0.0; clip.frames * grid.cells() * dim];
    let mut entries = Vec::new();
    for (t, fc) in content.iter().enumerate() {
        for cell in 0..grid.cells() {
            entries.clear();
            fc.interaction_entries(cell, &mut entries, 1.0);
            let off = (t * grid.cells() + cell) * dim;
            apply(&inter, &entries, &mut data[off..off + dim])?;
        }
    }
    let mut repr = vec![0.0; intent.cols()];
    apply(&intent, &intention_row(&content)?, &mut repr)?;
    Ok((FeatureGrid { frames: clip.frames, grid, dim, data }, repr))
}

/// Bilinear sample points of a 2x2 lattice over `b`, each as (cell, weight)
/// pairs. Neighbor cells are clamped to the cells the box touches.
pub fn roi_samples(b: &BoundingBox, grid: &GridSpec) -> Result<[Vec<(usize, f64)>; 4]> {
    if b.is_degenerate() {
        return Err(Error::invalid("roi box", format!("degenerate box {b:?}")));
    }
    if !b.within(grid.frame_width, grid.frame_height) {
        return Err(Error::invalid("roi box", format!("{b:?} outside frame")));
    }
    let axis = |lo: f64, hi: f64, size: f64, n: usize| -> [[(usize, f64); 2]; 2] {
        let first = ((lo / size).floor() as usize).min(n - 1);
        let last = (((hi / size).ceil() as usize).max(1) - 1).clamp(first, n - 1);
        let mut out = [[(0, 0.0); 2]; 2];
        for (i, o) in out.iter_mut().enumerate() {
            let p = lo + (i as f64 + 0.5) * (hi - lo) / 2.0;
            let g = p / size - 0.5;
            let i0 = g.floor();
            let a = g - i0;
            let clamp = |v: f64| (v.max(first as f64) as usize).min(last);
            *o = [(clamp(i0), 1.0 - a), (clamp(i0 + 1.0), a)];
        }
        out
    };
    let xs = axis(b.x1, b.x2, grid.cell_width(), grid.cols);
    let ys = axis(b.y1, b.y2, grid.cell_height(), grid.rows);
    let mut out: [Vec<(usize, f64)>; 4] = Default::default();
    for (iy, y) in ys.iter().enumerate() {
        for (ix, x) in xs.iter().enumerate() {
            let s = &mut out[iy * 2 + ix];
            for &(r, wy) in y {
                for &(c, wx) in x {
                    if wy * wx > 0.0 {
                        s.push((r * grid.cols + c, wy * wx));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// RoI feature of a box: bilinear 2x2 samples then coordinate-wise max.
pub fn roi_feature(frame: &[f64], grid: &GridSpec, dim: usize, b: &BoundingBox) -> Result<Vec<f64>> {
    check_frame(frame, grid, dim)?;
    let samples = roi_samples(b, grid)?;
    let mut out = vec![f64::NEG_INFINITY; dim];
    for s in &samples {
        let mut v = vec![0.0; dim];
        for &(cell, w) in s {
            for (o, x) in v.iter_mut().zip(&frame[cell * dim..(cell + 1) * dim]) {
                *o += w * x;
            }
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

fn check_frame(frame: &[f64], grid: &GridSpec, dim: usize) -> Result<()> {
    if frame.len() != grid.cells() * dim {
        return Err(Error::Dims {
            op: "feature grid",
            expected: (grid.cells() * dim).to_string(),
            got: frame.len().to_string(),
        });
    }
    Ok(())
}

/// Mask-weighted mean of cell features over a downsampled mask.
pub fn mask_align(frame: &[f64], grid: &GridSpec, dim: usize, mask: &BinaryMask) -> Result<Vec<f64>> {
    check_frame(frame, grid, dim)?;
    if mask.dims() != (grid.cols, grid.rows) {
        return Err(Error::Dims {
            op: "mask_align",
            expected: format!("{:?}", (grid.cols, grid.rows)),
            got: format!("{:?}", mask.dims()),
        });
    }
    let total = mask.count_ones();
    if total == 0 {
        return Err(Error::EmptyRegion);
    }
    let mut out = vec![0.0; dim];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            if mask.get(c, r) {
                let cell = r * grid.cols + c;
                for (o, x) in out.iter_mut().zip(&frame[cell * dim..(cell + 1) * dim]) {
                    *o += x;
                }
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= total as f64);
    Ok(out)
}

/// Block max-pooling of a mask to `cols x rows`: a cell is set iff any
/// pixel of its block is set.
pub fn downsample_mask(mask: &BinaryMask, cols: usize, rows: usize) -> Result<BinaryMask> {
    let (w, h) = mask.dims();
    if cols == 0 || rows == 0 || cols > w || rows > h {
        return Err(Error::invalid("downsample target", format!("{cols}x{rows} from {w}x{h}")));
    }
    let block_of = |n: usize, len: usize| -> Vec<usize> {
        let mut idx = vec![0; len];
        for i in 0..n {
            block_range(i, n, len).for_each(|p| idx[p] = i);
        }
        idx
    };
    let (row_of, col_of) = (block_of(rows, h), block_of(cols, w));
    let mut dense = vec![false; cols * rows];
    mask.for_each_segment(|y, xs| {
        for x in xs {
            dense[row_of[y] * cols + col_of[x]] = true;
        }
    });
    Ok(BinaryMask::from_dense(cols, rows, &dense))
}
