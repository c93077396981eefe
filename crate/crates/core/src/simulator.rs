//! Deterministic synthetic driving scenarios with known causes.
//!
//! The world is expressed in the ego camera frame (x right, y down, z
//! forward, meters) with a level camera above a flat ground plane. Objects
//! move with constant relative velocity. The driver stops iff some object is
//! inside, or will enter within the horizon, the corridor the ego is about
//! to drive through, or a red light is showing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{
    distance, BinaryMask, BoundingBox, CameraIntrinsics, Clip, DepthLayer, DepthMap, GroundPlane, Intention, LabelLayers,
    Point3, Response, Stimulus, StuffCategory, StuffRegion, ThingCategory, Tracklet,
};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

const FAR_DEPTH: f64 = 100.0;
const ROAD_HALF_WIDTH: f64 = 1.75;
const MAX_GROUND_RENDER: f64 = 40.0;
/// Minimum 3D gap between the isolated distractor and anything else (m).
const ISOLATION_DISTANCE: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_height: f64,
    /// Seconds between frames.
    pub dt: f64,
    /// Most Thing objects placed in one scenario.
    pub max_objects: usize,
    /// Most Thing nodes kept per frame by the perception stage.
    pub k_max: usize,
    pub go_weight: f64,
    pub stop_weight: f64,
    pub intention_weights: [f64; Intention::COUNT],
    pub corridor_half_width: f64,
    pub corridor_near: f64,
    pub corridor_far: f64,
    pub horizon_frames: usize,
    /// Fraction of Stop scenarios that are red-light congestion.
    pub confound_prob: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            width: 112,
            height: 112,
            focal: 56.0,
            camera_height: 1.5,
            dt: 0.1,
            max_objects: 6,
            k_max: 20,
            go_weight: 4.0,
            stop_weight: 1.0,
            // BG IP LT RT LLC RLC LLB RLB CP RP MG UT
            intention_weights: [0.28, 0.14, 0.12, 0.12, 0.05, 0.05, 0.04, 0.04, 0.05, 0.03, 0.04, 0.04],
            corridor_half_width: 0.9,
            corridor_near: 1.5,
            corridor_far: 4.0,
            horizon_frames: 10,
            confound_prob: 0.1,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid("sim config", m.to_string()));
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return bad("frames and dimensions must be positive");
        }
        if !(self.go_weight > 0.0 && self.stop_weight > 0.0) {
            return bad("Go and Stop weights must be positive");
        }
        if self.k_max == 0 || self.k_max > crate::scene::MAX_THINGS_PER_FRAME {
            return bad("k_max must be in 1..=20");
        }
        if self.intention_weights.iter().any(|w| *w < 0.0) || self.intention_weights.iter().sum::<f64>() <= 0.0 {
            return bad("intention weights must be nonnegative with a positive sum");
        }
        if !(self.focal > 0.0 && self.camera_height > 0.0 && self.dt > 0.0) {
            return bad("focal length, camera height and dt must be positive");
        }
        if !(0.0..=1.0).contains(&self.confound_prob) {
            return bad("confound probability must be in [0, 1]");
        }
        if self.corridor_far <= self.corridor_near || self.corridor_half_width <= 0.0 {
            return bad("corridor must have positive extent");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }

    pub fn rule(&self) -> CorridorRule {
        CorridorRule {
            half_width: self.corridor_half_width,
            near: self.corridor_near,
            far: self.corridor_far,
            horizon_frames: self.horizon_frames,
            dt: self.dt,
        }
    }
}

/// Parameters of the Stop rule, stored with each scenario so the oracle can
/// be re-evaluated from the scenario alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorRule {
    pub half_width: f64,
    pub near: f64,
    pub far: f64,
    pub horizon_frames: usize,
    pub dt: f64,
}

/// Lateral bend of the ego path for each maneuver (meters per meter ahead).
pub fn path_slope(intention: Intention) -> f64 {
    match intention {
        Intention::LT => -0.6,
        Intention::UT => -0.9,
        Intention::RT => 0.6,
        Intention::LLC | Intention::LLB => -0.35,
        Intention::RLC | Intention::RLB => 0.35,
        _ => 0.0,
    }
}

impl CorridorRule {
    pub fn center(&self, intention: Intention, z: f64) -> f64 {
        path_slope(intention) * (z - self.near).max(0.0)
    }

    /// Whether an object footprint of width `w` centered at `(x, z)` overlaps
    /// the corridor.
    pub fn contains(&self, intention: Intention, x: f64, z: f64, w: f64) -> bool {
        (self.near..=self.far).contains(&z) && (x - self.center(intention, z)).abs() <= self.half_width + w / 2.0
    }
}

/// Kinematic state in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    /// Center of the object.
    pub position: Point3,
    pub velocity: Point3,
    pub category: ThingCategory,
}

/// Latent trajectory of one object, one state per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTrack {
    pub id: u32,
    pub states: Vec<AgentState>,
}

impl LatentTrack {
    /// Position `k` frames after the last frame (constant velocity).
    pub fn extrapolate(&self, k: usize, dt: f64) -> Point3 {
        let s = self.states.last().expect("non-empty track");
        let tau = k as f64 * dt;
        Point3::new(s.position.x + s.velocity.x * tau, s.position.y, s.position.z + s.velocity.z * tau)
    }

    pub fn category(&self) -> ThingCategory {
        self.states[0].category
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Go,
    CrossingPedestrian,
    CrossingVehicle,
    ParkedVehicle,
    Congestion,
    RedLightCongestion,
}

impl ScenarioKind {
    pub const REACTIVE: [ScenarioKind; 4] = [
        Self::CrossingPedestrian,
        Self::CrossingVehicle,
        Self::ParkedVehicle,
        Self::Congestion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Go => "go",
            Self::CrossingPedestrian => "crossing_pedestrian",
            Self::CrossingVehicle => "crossing_vehicle",
            Self::ParkedVehicle => "parked_vehicle",
            Self::Congestion => "congestion",
            Self::RedLightCongestion => "red_light_congestion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub response: Response,
    pub intention: Intention,
    /// Nearest object inside the corridor; set whenever the response is Stop
    /// because of a Thing object.
    pub cause: Option<u32>,
    /// Red light showing: the response stays Stop whatever object is removed.
    pub confound: bool,
    pub kind: ScenarioKind,
    /// Far object whose cells share nothing with any other node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isolated: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub seed: u64,
    pub clip: Clip,
    pub truth: ScenarioTruth,
    pub rule: CorridorRule,
    pub latent: Vec<LatentTrack>,
}

/// Which population a scenario is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioMode {
    /// Go/Stop mixture at the configured ratio, confounds included.
    Mixed,
    /// Stop with a Thing cause and no red light.
    ReactiveStop,
    /// Like `Mixed` without red lights, plus one distant object near the
    /// horizon that shares no neighborhood with anything else.
    IsolatedDistractor,
}

/// Evaluates the Stop rule over `tracks`; returns the response and the
/// nearest corridor object.
pub fn evaluate_rule(
    rule: &CorridorRule,
    intention: Intention,
    red_light: bool,
    tracks: &[&LatentTrack],
) -> (Response, Option<u32>) {
    let mut cause: Option<(f64, u32)> = None;
    for tr in tracks {
        let (w, _) = tr.category().size();
        let enters = (0..=rule.horizon_frames).any(|k| {
            let p = tr.extrapolate(k, rule.dt);
            rule.contains(intention, p.x, p.z, w)
        });
        if enters {
            let last = tr.states.last().expect("non-empty").position;
            let d = (last.x * last.x + last.z * last.z).sqrt();
            let better = match cause {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && tr.id < bid),
            };
            if better {
                cause = Some((d, tr.id));
            }
        }
    }
    let response = if cause.is_some() || red_light { Response::Stop } else { Response::Go };
    (response, cause.map(|(_, id)| id))
}

/// Oracle response with one object deleted from the latent scene.
pub fn counterfactual_response(scenario: &Scenario, removed: u32) -> Result<Response> {
    if !scenario.latent.iter().any(|t| t.id == removed) {
        return Err(Error::UnknownTracklet(removed));
    }
    let rest: Vec<&LatentTrack> = scenario.latent.iter().filter(|t| t.id != removed).collect();
    Ok(evaluate_rule(&scenario.rule, scenario.truth.intention, scenario.truth.confound, &rest).0)
}

pub fn generate_scenario(seed: u64, config: &SimConfig) -> Result<Scenario> {
    generate_scenario_with(seed, config, ScenarioMode::Mixed)
}

pub fn generate_scenario_with(seed: u64, config: &SimConfig, mode: ScenarioMode) -> Result<Scenario> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Builder::new(config, &mut rng).build(seed, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Scenario>,
    pub test1: Vec<Scenario>,
    pub test2: Vec<Scenario>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test1: usize,
    pub test2: usize,
}

const SPLIT_STRIDE: u64 = 1 << 32;

/// Train and test1 are Go/Stop mixtures; test2 holds reactive Stop scenarios
/// whose single cause flips the response when removed. Splits draw seeds from
/// disjoint ranges offset from `config.seed`.
pub fn generate_dataset(config: &SimConfig, counts: SplitCounts) -> Result<Dataset> {
    config.validate()?;
    if counts.train == 0 || counts.test1 == 0 || counts.test2 == 0 {
        return Err(Error::invalid("split counts", "every split needs at least one scenario"));
    }
    let base = config.seed.wrapping_mul(SPLIT_STRIDE * 4);
    let mixed = |offset: u64, n: usize| -> Result<Vec<Scenario>> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| generate_scenario(base.wrapping_add(offset).wrapping_add(i), config))
            .collect()
    };
    let train = mixed(0, counts.train)?;
    let test1 = mixed(SPLIT_STRIDE, counts.test1)?;

    let mut test2 = Vec::with_capacity(counts.test2);
    let mut next = 0u64;
    while test2.len() < counts.test2 {
        let batch = (counts.test2 - test2.len()).max(16) as u64 * 2;
        let found: Vec<Option<Scenario>> = (next..next + batch)
            .into_par_iter()
            .map(|i| {
                let s = generate_scenario_with(
                    base.wrapping_add(2 * SPLIT_STRIDE).wrapping_add(i),
                    config,
                    ScenarioMode::ReactiveStop,
                )?;
                Ok(is_single_cause(&s)?.then_some(s))
            })
            .collect::<Result<_>>()?;
        test2.extend(found.into_iter().flatten().take(counts.test2 - test2.len()));
        next += batch;
    }
    Ok(Dataset { train, test1, test2 })
}

/// Stop with no confound where removing the cause yields Go and removing any
/// other object keeps Stop.
pub fn is_single_cause(s: &Scenario) -> Result<bool> {
    let Some(cause) = s.truth.cause else { return Ok(false) };
    if s.truth.response != Response::Stop || s.truth.confound {
        return Ok(false);
    }
    if s.clip.tracklet(cause)?.last_box().is_none() {
        return Ok(false);
    }
    for tr in &s.latent {
        let r = counterfactual_response(s, tr.id)?;
        let expected = if tr.id == cause { Response::Go } else { Response::Stop };
        if r != expected {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Ground-plane object before ids are assigned.
#[derive(Clone, Copy, Debug)]
struct Placement {
    category: ThingCategory,
    /// (x, z) at the last frame.
    last: (f64, f64),
    velocity: (f64, f64),
}

struct Builder<'a> {
    cfg: &'a SimConfig,
    rule: CorridorRule,
    k: CameraIntrinsics,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a SimConfig, rng: &'a mut ChaCha8Rng) -> Self {
        Self { cfg, rule: cfg.rule(), k: cfg.intrinsics(), rng }
    }

    fn sample_intention(&mut self) -> Intention {
        let total: f64 = self.cfg.intention_weights.iter().sum();
        let mut r = self.rng.gen_range(0.0..total);
        for (i, w) in self.cfg.intention_weights.iter().enumerate() {
            if r < *w {
                return Intention::ALL[i];
            }
            r -= w;
        }
        Intention::BG
    }

    fn track(&self, p: &Placement, id: u32) -> LatentTrack {
        let (_, h) = p.category.size();
        let y = self.cfg.camera_height - h / 2.0;
        let t_last = (self.cfg.frames - 1) as f64;
        let states = (0..self.cfg.frames)
            .map(|t| {
                let back = (t_last - t as f64) * self.cfg.dt;
                AgentState {
                    position: Point3::new(p.last.0 - p.velocity.0 * back, y, p.last.1 - p.velocity.1 * back),
                    velocity: Point3::new(p.velocity.0, 0.0, p.velocity.1),
                    category: p.category,
                }
            })
            .collect();
        LatentTrack { id, states }
    }

    /// Image box of an object at a latent state, if fully inside the frame.
    fn project_box(&self, s: &AgentState) -> Option<BoundingBox> {
        let (w, h) = s.category.size();
        let z = s.position.z;
        if z < 0.5 {
            return None;
        }
        let f = self.k.fx;
        let ground = self.cfg.camera_height;
        let b = BoundingBox {
            x1: self.k.cx + f * (s.position.x - w / 2.0) / z,
            x2: self.k.cx + f * (s.position.x + w / 2.0) / z,
            y1: self.k.cy + f * (ground - h) / z,
            y2: self.k.cy + f * ground / z,
        };
        b.within(self.cfg.width, self.cfg.height).then_some(b)
    }

    fn visible_frames(&self, tr: &LatentTrack) -> usize {
        tr.states.iter().filter(|s| self.project_box(s).is_some()).count()
    }

    fn enters(&self, intention: Intention, p: &Placement) -> bool {
        let tr = self.track(p, 0);
        evaluate_rule(&self.rule, intention, false, &[&tr]).1.is_some()
    }

    fn separated(&self, p: &Placement, others: &[Placement]) -> bool {
        others.iter().all(|o| {
            let a = self.track(p, 0);
            let b = self.track(o, 0);
            a.states.iter().zip(&b.states).all(|(sa, sb)| {
                let dx = sa.position.x - sb.position.x;
                let dz = sa.position.z - sb.position.z;
                (dx * dx + dz * dz).sqrt() >= 0.9
            })
        })
    }

    /// Far from every other placement and, on every frame, its cell-padded
    /// box touches no other box.
    fn isolated_from(&self, p: &Placement, others: &[Placement]) -> bool {
        let a = self.track(p, 0);
        others.iter().all(|o| {
            let b = self.track(o, 0);
            a.states.iter().zip(&b.states).all(|(sa, sb)| {
                if distance(sa.position, sb.position) < ISOLATION_DISTANCE {
                    return false;
                }
                match (self.project_box(sa), self.project_box(sb)) {
                    (Some(ba), Some(bb)) => {
                        let pad = cell_aligned(&ba, self.cfg.width, self.cfg.height);
                        pad.x2.min(bb.x2) <= pad.x1.max(bb.x1) || pad.y2.min(bb.y2) <= pad.y1.max(bb.y1)
                    }
                    _ => true,
                }
            })
        })
    }

    fn side(&mut self) -> f64 {
        if self.rng.gen_bool(0.5) {
            1.0
        } else {
            -1.0
        }
    }

    fn cause_placement(&mut self, kind: ScenarioKind, intention: Intention) -> Placement {
        let hw = self.rule.half_width;
        match kind {
            ScenarioKind::CrossingPedestrian => {
                let category = if self.rng.gen_bool(0.75) { ThingCategory::Person } else { ThingCategory::Bicycle };
                let z = self.rng.gen_range(2.0..3.8);
                let s = self.side();
                let speed = self.rng.gen_range(0.8..1.8);
                let d = self.rng.gen_range(-0.8..0.6);
                let x = self.rule.center(intention, z) + s * (hw + category.size().0 / 2.0 + d);
                Placement { category, last: (x, z), velocity: (-s * speed, self.rng.gen_range(-0.2..0.2)) }
            }
            ScenarioKind::CrossingVehicle => {
                let category = if self.rng.gen_bool(0.7) { ThingCategory::Car } else { ThingCategory::Motorcycle };
                let z = self.rng.gen_range(2.5..4.0);
                let s = self.side();
                let speed = self.rng.gen_range(1.5..3.5);
                let d = self.rng.gen_range(-1.0..1.2);
                let x = self.rule.center(intention, z) + s * (hw + category.size().0 / 2.0 + d);
                Placement { category, last: (x, z), velocity: (-s * speed, 0.0) }
            }
            ScenarioKind::ParkedVehicle => {
                let category = if self.rng.gen_bool(0.7) { ThingCategory::Car } else { ThingCategory::Truck };
                let z = self.rng.gen_range(2.2..3.8);
                let s = self.side();
                let overlap = self.rng.gen_range(0.2..0.8);
                let x = self.rule.center(intention, z) + s * (hw + category.size().0 / 2.0 - overlap);
                Placement { category, last: (x, z), velocity: (0.0, -self.rng.gen_range(1.0..2.5)) }
            }
            ScenarioKind::Congestion | ScenarioKind::RedLightCongestion | ScenarioKind::Go => {
                let category = *[ThingCategory::Car, ThingCategory::Car, ThingCategory::Bus, ThingCategory::Truck]
                    .choose(self.rng)
                    .expect("non-empty");
                let z = self.rng.gen_range(2.0..3.8);
                let x = self.rule.center(intention, z) + self.rng.gen_range(-0.3..0.3);
                Placement { category, last: (x, z), velocity: (0.0, self.rng.gen_range(-0.6..0.2)) }
            }
        }
    }

    fn distractor_placement(&mut self, intention: Intention) -> Placement {
        let hw = self.rule.half_width;
        let kind = self.rng.gen_range(0..6);
        let s = self.side();
        match kind {
            0 => {
                let z = self.rng.gen_range(2.5..9.0);
                let x = self.rule.center(intention, z) + s * self.rng.gen_range(2.3..4.5);
                let vz = self.rng.gen_range(-1.2..1.2);
                Placement { category: ThingCategory::Person, last: (x, z), velocity: (self.rng.gen_range(-0.2..0.2), vz) }
            }
            1 => {
                let z = self.rng.gen_range(3.0..10.0);
                let x = self.rule.center(intention, z) + s * self.rng.gen_range(2.6..4.0);
                Placement { category: ThingCategory::Car, last: (x, z), velocity: (0.0, -self.rng.gen_range(1.0..2.5)) }
            }
            2 => {
                let category = *[ThingCategory::Car, ThingCategory::Truck, ThingCategory::Bus]
                    .choose(self.rng)
                    .expect("non-empty");
                let z = self.rng.gen_range(7.0..14.0);
                let x = self.rule.center(intention, z) + self.rng.gen_range(-1.0..1.0);
                Placement { category, last: (x, z), velocity: (0.0, self.rng.gen_range(0.0..1.5)) }
            }
            3 => {
                let z = self.rng.gen_range(4.0..12.0);
                let x = -self.rng.gen_range(2.8..3.8);
                Placement { category: ThingCategory::Car, last: (x, z), velocity: (0.0, -self.rng.gen_range(0.5..2.5)) }
            }
            4 => {
                let category = if self.rng.gen_bool(0.5) { ThingCategory::Bicycle } else { ThingCategory::Motorcycle };
                let z = self.rng.gen_range(3.0..8.0);
                let x = self.rule.center(intention, z) + s * self.rng.gen_range(2.2..3.2);
                Placement { category, last: (x, z), velocity: (0.0, self.rng.gen_range(0.5..2.0)) }
            }
            _ => {
                // Close to the ego but beside the corridor, walking away from it.
                let z = self.rng.gen_range(1.8..3.5);
                let w = ThingCategory::Person.size().0;
                let x = self.rule.center(intention, z) + s * (hw + w / 2.0 + self.rng.gen_range(0.5..1.5));
                Placement {
                    category: ThingCategory::Person,
                    last: (x, z),
                    velocity: (s * self.rng.gen_range(0.0..1.0), self.rng.gen_range(-0.3..0.3)),
                }
            }
        }
    }

    /// A far object near the horizon, off to one side.
    fn isolated_placement(&mut self) -> Placement {
        let category = *[ThingCategory::Person, ThingCategory::Car, ThingCategory::Bicycle]
            .choose(self.rng)
            .expect("non-empty");
        let z = self.rng.gen_range(18.0..30.0);
        let s = self.side();
        let x = s * z * self.rng.gen_range(0.55..0.85);
        Placement { category, last: (x, z), velocity: (0.0, self.rng.gen_range(-0.5..0.5)) }
    }

    fn build(mut self, seed: u64, mode: ScenarioMode) -> Result<Scenario> {
        let cfg = self.cfg;
        let intention = self.sample_intention();
        let stop_p = cfg.stop_weight / (cfg.go_weight + cfg.stop_weight);
        let kind = match mode {
            ScenarioMode::ReactiveStop => *ScenarioKind::REACTIVE.choose(self.rng).expect("non-empty"),
            ScenarioMode::Mixed | ScenarioMode::IsolatedDistractor => {
                if self.rng.gen_bool(stop_p) {
                    if mode == ScenarioMode::Mixed && self.rng.gen_bool(cfg.confound_prob) {
                        ScenarioKind::RedLightCongestion
                    } else {
                        *ScenarioKind::REACTIVE.choose(self.rng).expect("non-empty")
                    }
                } else {
                    ScenarioKind::Go
                }
            }
        };
        let red_light = kind == ScenarioKind::RedLightCongestion;

        let mut placements: Vec<Placement> = Vec::new();
        if kind != ScenarioKind::Go {
            for attempt in 0.. {
                let p = self.cause_placement(kind, intention);
                let tr = self.track(&p, 0);
                let visible_last = self.project_box(tr.states.last().expect("frames > 0")).is_some();
                if (self.enters(intention, &p) && visible_last) || attempt > 200 {
                    placements.push(p);
                    break;
                }
            }
        }
        let extra_max = cfg.max_objects.saturating_sub(placements.len());
        let extra_min = usize::from(kind == ScenarioKind::Go).min(extra_max);
        let extras = self.rng.gen_range(extra_min..=extra_max);
        for _ in 0..extras {
            for _ in 0..30 {
                let p = self.distractor_placement(intention);
                let tr = self.track(&p, 0);
                if !self.enters(intention, &p) && self.visible_frames(&tr) > 0 && self.separated(&p, &placements) {
                    placements.push(p);
                    break;
                }
            }
        }
        let isolated_index = if mode == ScenarioMode::IsolatedDistractor {
            let mut chosen = None;
            for _ in 0..200 {
                let p = self.isolated_placement();
                let tr = self.track(&p, 0);
                if self.visible_frames(&tr) == cfg.frames && self.isolated_from(&p, &placements) {
                    chosen = Some(p);
                    break;
                }
            }
            chosen.map(|p| {
                placements.push(p);
                placements.len() - 1
            })
        } else {
            None
        };

        // Random ids so that id order carries no information about the cause.
        let mut ids: Vec<u32> = (1..=placements.len() as u32).collect();
        ids.shuffle(self.rng);
        let mut tracks: Vec<LatentTrack> = placements.iter().zip(&ids).map(|(p, id)| self.track(p, *id)).collect();

        // Detected boxes: fully visible and not occluded at the box center.
        let frames = cfg.frames;
        let mut boxes: Vec<Vec<Option<BoundingBox>>> = vec![vec![None; frames]; tracks.len()];
        for t in 0..frames {
            let mut order: Vec<usize> = (0..tracks.len()).collect();
            order.sort_by(|a, b| tracks[*a].states[t].position.z.total_cmp(&tracks[*b].states[t].position.z));
            let mut drawn: Vec<BoundingBox> = Vec::new();
            for i in order {
                let Some(b) = self.project_box(&tracks[i].states[t]) else { continue };
                let (uc, vc) = b.center();
                let (px, py) = (uc.floor() as usize, vc.floor() as usize);
                let hidden = drawn.iter().any(|d| d.pixel_cols(cfg.width).contains(&px) && d.pixel_rows(cfg.height).contains(&py));
                if !hidden {
                    boxes[i][t] = Some(b);
                }
                drawn.push(b);
            }
        }
        let keep: Vec<bool> = boxes.iter().map(|bs| bs.iter().any(Option::is_some)).collect();
        let mut kept_tracks = Vec::new();
        let mut tracklets = Vec::new();
        let mut isolated_id = None;
        for (i, tr) in tracks.drain(..).enumerate() {
            if !keep[i] {
                continue;
            }
            if Some(i) == isolated_index {
                isolated_id = Some(tr.id);
            }
            tracklets.push(Tracklet { id: tr.id, category: tr.category(), boxes: boxes[i].clone() });
            kept_tracks.push(tr);
        }
        tracklets.sort_by_key(|t| t.id);
        kept_tracks.sort_by_key(|t| t.id);

        let refs: Vec<&LatentTrack> = kept_tracks.iter().collect();
        let (response, cause) = evaluate_rule(&self.rule, intention, red_light, &refs);
        let truth_kind = match (response, kind) {
            (Response::Go, _) => ScenarioKind::Go,
            (Response::Stop, ScenarioKind::Go) => ScenarioKind::Congestion,
            (Response::Stop, k) => k,
        };

        let has_light = red_light
            || (matches!(intention, Intention::IP | Intention::LT | Intention::RT | Intention::UT) && self.rng.gen_bool(0.6));
        let stuff = self.render_stuff(intention, has_light, red_light, &tracklets, isolated_id);
        let depth = (0..frames)
            .map(|t| {
                let mut layers: Vec<DepthLayer> = stuff_depth_layers(cfg, &stuff, t);
                for (tr, lt) in tracklets.iter().zip(&kept_tracks) {
                    if let Some(b) = tr.box_at(t) {
                        layers.push(DepthLayer { region: *b, depth: lt.states[t].position.z });
                    }
                }
                DepthMap {
                    far: FAR_DEPTH,
                    ground: Some(GroundPlane { camera_height: cfg.camera_height, fy: self.k.fy, cy: self.k.cy }),
                    layers,
                }
            })
            .collect();

        let stimulus_label = match truth_kind {
            ScenarioKind::Go => None,
            ScenarioKind::ParkedVehicle => Some(Stimulus::Deviate),
            _ => Some(Stimulus::Stop),
        };
        let labels = LabelLayers {
            goal: (0..frames)
                .map(|t| if t < frames / 2 { Intention::BG } else { intention })
                .collect(),
            stimulus: (0..frames)
                .map(|t| if t + 3 >= frames { stimulus_label } else { None })
                .collect(),
        };

        let clip = Clip {
            frames,
            width: cfg.width,
            height: cfg.height,
            intrinsics: self.k,
            depth,
            tracklets,
            stuff,
            labels,
        };
        clip.validate()?;
        Ok(Scenario {
            schema_version: SCENARIO_SCHEMA_VERSION,
            seed,
            clip,
            truth: ScenarioTruth { response, intention, cause, confound: red_light, kind: truth_kind, isolated: isolated_id },
            rule: self.rule,
            latent: kept_tracks,
        })
    }

    /// Marks ground pixels whose lateral extent satisfies `band(z)`.
    fn ground_band(&self, dense: &mut [bool], band: &dyn Fn(f64) -> Option<(f64, f64)>) {
        let (w, h) = (self.cfg.width, self.cfg.height);
        for v in 0..h {
            let dv = v as f64 - self.k.cy;
            if dv <= 0.0 {
                continue;
            }
            let z = self.k.fy * self.cfg.camera_height / dv;
            if z > MAX_GROUND_RENDER {
                continue;
            }
            let Some((lo, hi)) = band(z) else { continue };
            let b = BoundingBox { x1: self.k.cx + self.k.fx * lo / z, x2: self.k.cx + self.k.fx * hi / z, y1: 0.0, y2: 1.0 };
            dense[v * w..(v + 1) * w][b.pixel_cols(w)].iter_mut().for_each(|p| *p = true);
        }
    }

    fn fill_box(&self, dense: &mut [bool], b: &BoundingBox, value: bool) {
        let w = self.cfg.width;
        let cols = b.pixel_cols(w);
        for y in b.pixel_rows(self.cfg.height) {
            dense[y * w..(y + 1) * w][cols.clone()].iter_mut().for_each(|p| *p = value);
        }
    }

    fn pixel_rect(&self, x1: f64, y1: f64, x2: f64, y2: f64) -> Vec<bool> {
        let sx = self.cfg.width as f64 / 112.0;
        let sy = self.cfg.height as f64 / 112.0;
        let mut dense = vec![false; self.cfg.width * self.cfg.height];
        self.fill_box(&mut dense, &BoundingBox { x1: x1 * sx, y1: y1 * sy, x2: x2 * sx, y2: y2 * sy }, true);
        dense
    }

    fn render_stuff(
        &mut self,
        intention: Intention,
        has_light: bool,
        red_light: bool,
        tracklets: &[Tracklet],
        isolated: Option<u32>,
    ) -> Vec<StuffRegion> {
        let cfg = self.cfg;
        let frames = cfg.frames;
        let (w, h) = (cfg.width, cfg.height);
        let slope = path_slope(intention);
        let near = self.rule.near;
        let drift = match intention {
            Intention::LLC => 1.5,
            Intention::RLC => -1.5,
            _ => 0.0,
        };
        let denom = (frames.max(2) - 1) as f64;
        let center = move |z: f64, t: usize| slope * (z - near).max(0.0) + drift * t as f64 / denom;
        let crosswalk_z = match intention {
            Intention::IP | Intention::LT | Intention::RT | Intention::UT => Some(self.rng.gen_range(4.5..6.0)),
            Intention::CP => Some(self.rng.gen_range(3.2..4.2)),
            _ => None,
        };
        let with_sign = matches!(intention, Intention::MG | Intention::RP) || self.rng.gen_bool(0.1);
        let band = |f: &dyn Fn(f64) -> Option<(f64, f64)>| {
            let mut d = vec![false; w * h];
            self.ground_band(&mut d, f);
            d
        };

        // Highest priority first; each region excludes pixels already taken.
        // A single entry stands for a mask that is the same in every frame.
        let mut specs: Vec<(StuffCategory, Vec<Vec<bool>>, f64)> = Vec::new();
        if has_light {
            specs.push((StuffCategory::TrafficLight, vec![self.pixel_rect(84.0, 16.0, 90.0, 30.0)], if red_light { 1.0 } else { -1.0 }));
        }
        if with_sign {
            specs.push((StuffCategory::TrafficSign, vec![self.pixel_rect(16.0, 24.0, 22.0, 32.0)], 0.0));
        }
        if let Some(zc) = crosswalk_z {
            specs.push((StuffCategory::Crosswalk, vec![band(&|z| (zc..=zc + 1.2).contains(&z).then_some((-8.0, 8.0)))], 0.0));
        }
        let per_frame = |f: &dyn Fn(usize) -> Vec<bool>| if drift == 0.0 { vec![f(0)] } else { (0..frames).map(f).collect() };
        specs.push((
            StuffCategory::LaneMarkings,
            per_frame(&|t| {
                let mut d = band(&|z| Some((center(z, t) - ROAD_HALF_WIDTH - 0.08, center(z, t) - ROAD_HALF_WIDTH + 0.08)));
                self.ground_band(&mut d, &|z| Some((center(z, t) + ROAD_HALF_WIDTH - 0.08, center(z, t) + ROAD_HALF_WIDTH + 0.08)));
                d
            }),
            0.0,
        ));
        match intention {
            Intention::RP => {
                specs.push((StuffCategory::LaneSeparator, vec![band(&|z| (6.0..=6.6).contains(&z).then_some((-8.0, 8.0)))], 0.0));
            }
            Intention::LLB | Intention::RLB => {
                let s = if intention == Intention::LLB { 1.0 } else { -1.0 };
                specs.push((
                    StuffCategory::TrafficIsland,
                    per_frame(&|t| {
                        band(&|z| {
                            let c = center(z, t);
                            (z > 3.0).then(|| {
                                let (a, b) = (c + s * 2.0, c + s * 2.8);
                                (a.min(b), a.max(b))
                            })
                        })
                    }),
                    0.0,
                ));
            }
            Intention::MG => {
                specs.push((
                    StuffCategory::ServiceLane,
                    per_frame(&|t| band(&|z| Some((center(z, t) + 1.9, center(z, t) + 4.0)))),
                    0.0,
                ));
            }
            _ => {}
        }
        specs.push((
            StuffCategory::Road,
            per_frame(&|t| band(&|z| Some((center(z, t) - ROAD_HALF_WIDTH, center(z, t) + ROAD_HALF_WIDTH)))),
            0.0,
        ));

        // Pixels hidden behind detected objects, per frame.
        let occluded: Vec<Vec<bool>> = (0..frames)
            .map(|t| {
                let mut d = vec![false; w * h];
                for tr in tracklets {
                    if let Some(b) = tr.box_at(t) {
                        let b = if Some(tr.id) == isolated { cell_aligned(b, w, h) } else { *b };
                        self.fill_box(&mut d, &b, true);
                    }
                }
                d
            })
            .collect();
        let mut taken = occluded;
        let mut regions = Vec::new();
        for (category, masks, state) in specs {
            let masks: Vec<BinaryMask> = (0..frames)
                .map(|t| {
                    let src = &masks[t.min(masks.len() - 1)];
                    let own: Vec<bool> = src.iter().zip(&taken[t]).map(|(s, k)| *s && !*k).collect();
                    taken[t].iter_mut().zip(&own).for_each(|(k, o)| *k |= *o);
                    BinaryMask::from_dense(w, h, &own)
                })
                .collect();
            if masks.iter().all(|m| m.count_ones() == 0) {
                continue;
            }
            regions.push(StuffRegion { category, masks, state: vec![state; frames] });
        }
        regions
    }
}

/// Box grown to the 4-pixel cell lattice of the default feature grid,
/// padded by one cell.
fn cell_aligned(b: &BoundingBox, width: usize, height: usize) -> BoundingBox {
    let cw = width as f64 / 28.0;
    let ch = height as f64 / 28.0;
    BoundingBox {
        x1: ((b.x1 / cw).floor() - 1.0).max(0.0) * cw,
        y1: ((b.y1 / ch).floor() - 1.0).max(0.0) * ch,
        x2: (((b.x2 / cw).ceil() + 1.0) * cw).min(width as f64),
        y2: (((b.y2 / ch).ceil() + 1.0) * ch).min(height as f64),
    }
}

fn stuff_depth_layers(cfg: &SimConfig, stuff: &[StuffRegion], t: usize) -> Vec<DepthLayer> {
    let mut layers = Vec::new();
    for s in stuff {
        let depth = match s.category {
            StuffCategory::TrafficLight => 15.0,
            StuffCategory::TrafficSign => 12.0,
            _ => continue,
        };
        let m = &s.masks[t];
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        m.for_each_segment(|y, r| {
            x1 = x1.min(r.start);
            x2 = x2.max(r.end);
            y1 = y1.min(y);
            y2 = y2.max(y + 1);
        });
        if x1 < x2 && y1 < y2 && x2 <= cfg.width && y2 <= cfg.height {
            layers.push(DepthLayer {
                region: BoundingBox { x1: x1 as f64, y1: y1 as f64, x2: x2 as f64, y2: y2 as f64 },
                depth,
            });
        }
    }
    layers
}
