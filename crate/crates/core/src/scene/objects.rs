use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::geometry::{unproject, CameraIntrinsics, Point3};
use super::labels::LabelLayers;
use super::mask::{BinaryMask, BoundingBox};
use crate::error::{Error, Result};

/// Traffic participants that can be influenced by others.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThingCategory {
    Car,
    Person,
    Bicycle,
    Motorcycle,
    Bus,
    Train,
    Truck,
}

impl ThingCategory {
    pub const ALL: [ThingCategory; 7] = [
        Self::Car,
        Self::Person,
        Self::Bicycle,
        Self::Motorcycle,
        Self::Bus,
        Self::Train,
        Self::Truck,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Person => "person",
            Self::Bicycle => "bicycle",
            Self::Motorcycle => "motorcycle",
            Self::Bus => "bus",
            Self::Train => "train",
            Self::Truck => "truck",
        }
    }

    /// Physical (width, height) in meters used by the simulator.
    pub fn size(self) -> (f64, f64) {
        match self {
            Self::Car => (1.8, 1.5),
            Self::Person => (0.6, 1.7),
            Self::Bicycle => (0.6, 1.6),
            Self::Motorcycle => (0.8, 1.5),
            Self::Bus => (2.5, 3.0),
            Self::Train => (3.0, 3.5),
            Self::Truck => (2.4, 2.8),
        }
    }

    pub fn is_vehicle_or_pedestrian(self) -> bool {
        !matches!(self, Self::Train)
    }
}

/// Scene elements that are not influenced by others.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StuffCategory {
    Crosswalk,
    LaneMarkings,
    LaneSeparator,
    Road,
    ServiceLane,
    TrafficIsland,
    TrafficLight,
    TrafficSign,
}

impl StuffCategory {
    pub const ALL: [StuffCategory; 8] = [
        Self::Crosswalk,
        Self::LaneMarkings,
        Self::LaneSeparator,
        Self::Road,
        Self::ServiceLane,
        Self::TrafficIsland,
        Self::TrafficLight,
        Self::TrafficSign,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Pixel content class shared by the renderer and the feature provider.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Content {
    Background,
    Thing(ThingCategory),
    Stuff(StuffCategory),
}

impl Content {
    /// Number of non-background content classes.
    pub const CLASSES: usize = 15;

    /// Dense index over non-background classes (things first).
    pub fn class_index(self) -> Option<usize> {
        match self {
            Content::Background => None,
            Content::Thing(t) => Some(t.index()),
            Content::Stuff(s) => Some(ThingCategory::ALL.len() + s.index()),
        }
    }
}

/// One object identity tracked over the clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: u32,
    pub category: ThingCategory,
    /// One entry per frame; `None` where the object was not detected.
    pub boxes: Vec<Option<BoundingBox>>,
}

impl Tracklet {
    pub fn box_at(&self, t: usize) -> Option<&BoundingBox> {
        self.boxes.get(t).and_then(Option::as_ref)
    }

    pub fn last_box(&self) -> Option<&BoundingBox> {
        self.boxes.last().and_then(Option::as_ref)
    }

    /// Latest frame with a box, and that box.
    pub fn last_seen(&self) -> Option<(usize, &BoundingBox)> {
        self.boxes.iter().enumerate().rev().find_map(|(t, b)| b.as_ref().map(|b| (t, b)))
    }
}

/// Segmented stuff region with an optional scalar state per frame
/// (traffic light color: +1 red, -1 green, 0 otherwise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StuffRegion {
    pub category: StuffCategory,
    pub masks: Vec<BinaryMask>,
    pub state: Vec<f64>,
}

/// Ground plane below a level camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub camera_height: f64,
    pub fy: f64,
    pub cy: f64,
}

/// Rectangle of constant depth drawn over the ground.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthLayer {
    pub region: BoundingBox,
    pub depth: f64,
}

/// Per-pixel depth of one frame: nearest covering layer, else the ground
/// plane below the horizon, else `far`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub far: f64,
    pub ground: Option<GroundPlane>,
    pub layers: Vec<DepthLayer>,
}

impl DepthMap {
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        let layer = self
            .layers
            .iter()
            .filter(|l| {
                !l.region.is_degenerate()
                    && l.region.pixel_cols(usize::MAX).contains(&x)
                    && l.region.pixel_rows(usize::MAX).contains(&y)
            })
            .map(|l| l.depth)
            .fold(f64::INFINITY, f64::min);
        if layer.is_finite() {
            return layer;
        }
        match self.ground {
            Some(g) if (y as f64) > g.cy => (g.fy * g.camera_height / (y as f64 - g.cy)).min(self.far),
            _ => self.far,
        }
    }
}

/// A T-frame driving clip with perception outputs and annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub depth: Vec<DepthMap>,
    pub tracklets: Vec<Tracklet>,
    pub stuff: Vec<StuffRegion>,
    pub labels: LabelLayers,
}

/// Upper bound on Thing nodes kept per frame.
pub const MAX_THINGS_PER_FRAME: usize = 20;

impl Clip {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let t = self.frames;
        if t == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("clip", "empty clip"));
        }
        if self.depth.len() != t || self.labels.goal.len() != t || self.labels.stimulus.len() != t {
            return Err(Error::invalid("clip", "per-frame layers do not cover every frame"));
        }
        let mut ids = BTreeSet::new();
        for tr in &self.tracklets {
            if !ids.insert(tr.id) {
                return Err(Error::invalid("clip", format!("duplicate tracklet id {}", tr.id)));
            }
            if tr.boxes.len() != t {
                return Err(Error::invalid("tracklet", format!("{} has {} frames", tr.id, tr.boxes.len())));
            }
            if tr.boxes.iter().all(Option::is_none) {
                return Err(Error::invalid("tracklet", format!("{} has no boxes", tr.id)));
            }
            for b in tr.boxes.iter().flatten() {
                if !(b.x1 <= b.x2 && b.y1 <= b.y2) || !b.within(self.width, self.height) {
                    return Err(Error::invalid("tracklet", format!("{} has box {b:?} outside frame", tr.id)));
                }
            }
        }
        for s in &self.stuff {
            if s.masks.len() != t || s.state.len() != t {
                return Err(Error::invalid("stuff region", format!("{:?} does not cover every frame", s.category)));
            }
            for m in &s.masks {
                m.validate()?;
                if m.dims() != (self.width, self.height) {
                    return Err(Error::Dims {
                        op: "stuff mask",
                        expected: format!("{:?}", (self.width, self.height)),
                        got: format!("{:?}", m.dims()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn tracklet(&self, id: u32) -> Result<&Tracklet> {
        self.tracklets.iter().find(|t| t.id == id).ok_or(Error::UnknownTracklet(id))
    }

    /// Middle-bottom pixel of the frame.
    pub fn ego_pixel(&self) -> (usize, usize) {
        (self.width / 2, self.height - 1)
    }

    pub fn ego_anchor(&self, t: usize) -> Result<Point3> {
        let (u, v) = self.ego_pixel();
        unproject(u as f64, v as f64, self.depth[t].depth_at(u, v), &self.intrinsics)
    }

    /// 3D point under a pixel coordinate, reading depth from the covering pixel.
    pub fn unproject_at(&self, t: usize, u: f64, v: f64) -> Result<Point3> {
        let px = (u.floor().max(0.0) as usize).min(self.width - 1);
        let py = (v.floor().max(0.0) as usize).min(self.height - 1);
        unproject(u, v, self.depth[t].depth_at(px, py), &self.intrinsics)
    }

    /// Anchor of a Thing object: its box center lifted to 3D.
    pub fn box_anchor(&self, t: usize, b: &BoundingBox) -> Result<Point3> {
        let (u, v) = b.center();
        self.unproject_at(t, u, v)
    }

    /// Tracklets forming Thing nodes at frame `t`: the `MAX_THINGS_PER_FRAME`
    /// largest detections, ordered by id. `removed` is left out.
    pub fn frame_things(&self, t: usize, removed: Option<u32>) -> Vec<&Tracklet> {
        let mut present: Vec<&Tracklet> = self
            .tracklets
            .iter()
            .filter(|tr| Some(tr.id) != removed && tr.box_at(t).is_some())
            .collect();
        present.sort_by(|a, b| {
            let (aa, ba) = (a.box_at(t).map_or(0.0, BoundingBox::area), b.box_at(t).map_or(0.0, BoundingBox::area));
            ba.total_cmp(&aa).then(a.id.cmp(&b.id))
        });
        present.truncate(MAX_THINGS_PER_FRAME);
        present.sort_by_key(|tr| tr.id);
        present
    }
}
