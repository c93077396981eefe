use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates; covers `[x1, x2) x [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x1 <= x2 && y1 <= y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("bounding box", format!("{b:?}")));
        }
        Ok(b)
    }

    pub fn frame(width: usize, height: usize) -> Self {
        Self { x1: 0.0, y1: 0.0, x2: width as f64, y2: height as f64 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f64 && self.y2 <= height as f64
    }

    /// Pixel columns touched by the box, clamped to `[0, width)`.
    pub fn pixel_cols(&self, width: usize) -> Range<usize> {
        pixel_span(self.x1, self.x2, width)
    }

    pub fn pixel_rows(&self, height: usize) -> Range<usize> {
        pixel_span(self.y1, self.y2, height)
    }
}

fn pixel_span(lo: f64, hi: f64, limit: usize) -> Range<usize> {
    if hi <= lo {
        return 0..0;
    }
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil().max(0.0) as usize).min(limit);
    a.min(b)..b
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Binary grid stored as sorted runs of ones in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    runs: Vec<(u32, u32)>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, runs: Vec::new() }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        let n = width * height;
        let runs = if n == 0 { Vec::new() } else { vec![(0, n as u32)] };
        Self { width, height, runs }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut dense = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                dense.push(f(x, y));
            }
        }
        Self::from_dense(width, height, &dense)
    }

    pub fn from_dense(width: usize, height: usize, values: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut start: Option<usize> = None;
        for (i, v) in values.iter().enumerate() {
            match (v, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s as u32, (i - s) as u32));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s as u32, (values.len() - s) as u32));
        }
        Self { width, height, runs }
    }

    /// Rectangle of ones over the pixels covered by `b`.
    pub fn from_box(width: usize, height: usize, b: &BoundingBox) -> Self {
        if b.is_degenerate() {
            return Self::zeros(width, height);
        }
        let (cols, rows) = (b.pixel_cols(width), b.pixel_rows(height));
        Self::from_fn(width, height, |x, y| cols.contains(&x) && rows.contains(&y))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn runs(&self) -> &[(u32, u32)] {
        &self.runs
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = (y * self.width + x) as u32;
        let pos = self.runs.partition_point(|(s, _)| *s <= i);
        pos > 0 && {
            let (s, l) = self.runs[pos - 1];
            i < s + l
        }
    }

    pub fn count_ones(&self) -> usize {
        self.runs.iter().map(|(_, l)| *l as usize).sum()
    }

    pub fn is_all_ones(&self) -> bool {
        self.count_ones() == self.width * self.height
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let mut out = vec![false; self.width * self.height];
        for &(s, l) in &self.runs {
            out[s as usize..(s + l) as usize].iter_mut().for_each(|v| *v = true);
        }
        out
    }

    /// Calls `f(y, x_range)` for every horizontal segment of ones.
    pub fn for_each_segment(&self, mut f: impl FnMut(usize, Range<usize>)) {
        let w = self.width;
        if w == 0 {
            return;
        }
        for &(s, l) in &self.runs {
            let (mut i, end) = (s as usize, (s + l) as usize);
            while i < end {
                let y = i / w;
                let row_end = ((y + 1) * w).min(end);
                f(y, i - y * w..row_end - y * w);
                i = row_end;
            }
        }
    }

    /// Clears the pixels covered by `b`.
    pub fn clear_box(&mut self, b: &BoundingBox) {
        if b.is_degenerate() {
            return;
        }
        let (cols, rows) = (b.pixel_cols(self.width), b.pixel_rows(self.height));
        if cols.is_empty() || rows.is_empty() {
            return;
        }
        let mut dense = self.to_dense();
        for y in rows {
            for x in cols.clone() {
                dense[y * self.width + x] = false;
            }
        }
        *self = Self::from_dense(self.width, self.height, &dense);
    }

    /// Element-wise AND.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dims() != other.dims() {
            return Err(Error::Dims {
                op: "mask and",
                expected: format!("{:?}", self.dims()),
                got: format!("{:?}", other.dims()),
            });
        }
        let (a, b) = (self.to_dense(), other.to_dense());
        let v: Vec<bool> = a.iter().zip(&b).map(|(x, y)| *x && *y).collect();
        Ok(Self::from_dense(self.width, self.height, &v))
    }

    /// Element-wise OR; `other` is read over this mask's extent.
    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        self.combine(other, |a, b| a || b)
    }

    /// Ones of `self` that are zero in `other`.
    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        self.combine(other, |a, b| a && !b)
    }

    fn combine(&self, other: &BinaryMask, op: impl Fn(bool, bool) -> bool) -> BinaryMask {
        let mut v = self.to_dense();
        let (ow, oh) = other.dims();
        for (i, px) in v.iter_mut().enumerate() {
            let (x, y) = (i % self.width, i / self.width);
            *px = op(*px, x < ow && y < oh && other.get(x, y));
        }
        Self::from_dense(self.width, self.height, &v)
    }

    /// Checks run ordering and bounds (used after deserializing).
    pub fn validate(&self) -> Result<()> {
        let n = (self.width * self.height) as u64;
        let mut prev_end = 0u64;
        for (i, &(s, l)) in self.runs.iter().enumerate() {
            let (s, l) = (s as u64, l as u64);
            if l == 0 || (i > 0 && s <= prev_end) || s + l > n {
                return Err(Error::invalid("binary mask", format!("bad run {i}: ({s}, {l})")));
            }
            prev_end = s + l;
        }
        Ok(())
    }
}

/// Intervention mask: zeros over the pixels of `b`, ones elsewhere.
pub fn mask_generate(width: usize, height: usize, b: &BoundingBox) -> BinaryMask {
    let mut m = BinaryMask::ones(width, height);
    m.clear_box(b);
    m
}
