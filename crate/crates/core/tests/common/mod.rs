#![allow(dead_code)]

use riskid_autodiff::Tensor;
use riskid_core::model::{Checkpoint, ModelConfig};
use riskid_core::scene::ThingCategory;
use riskid_core::simulator::Scenario;

fn set(ck: &mut Checkpoint, name: &str, index: usize, value: f64) {
    ck.params.get_mut(name).unwrap().data_mut()[index] = value;
}

/// Hand-set weights: Stop when any frame shows a train, Go otherwise.
///
/// The Ego-Thing graph connects every node, so the Ego row picks up the
/// train's class feature; the encoder integrates it, and the accumulator
/// turns it into a Stop logit. Everything else is zero.
pub fn stub_checkpoint() -> Checkpoint {
    let config = ModelConfig { mu_thing: 1e9, ..ModelConfig::default() };
    let (d, h) = (config.dim, config.hidden);
    let mut ck = Checkpoint::init(config, 0).unwrap();
    let names: Vec<String> = ck.params.names().map(String::from).collect();
    for n in &names {
        let t = ck.params.get_mut(n).unwrap();
        let zero = if n.ends_with("ln_gain") && n.starts_with("ego_thing") { 1.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|v| *v = zero);
    }
    set(&mut ck, "backbone.class", ThingCategory::Train.index() * d, 100.0);
    *ck.params.get_mut("ego_thing.layer0.weight").unwrap() = Tensor::identity(d);

    // Encoder: input, forget and output gates open; cell input = x[0].
    for gate in [0, 1, 3] {
        for j in 0..h {
            set(&mut ck, "encoder.bias", gate * h + j, 20.0);
        }
    }
    set(&mut ck, "encoder.w_x", 2 * h, 1.0);

    // Accumulator: drop the encoder cell, write tanh(5 h_enc[0]).
    for j in 0..h {
        set(&mut ck, "trn.accumulator.bias", j, 20.0);
        set(&mut ck, "trn.accumulator.bias", h + j, -20.0);
        set(&mut ck, "trn.accumulator.bias", 3 * h + j, 20.0);
    }
    set(&mut ck, "trn.accumulator.w_x", 2 * h, 5.0);

    set(&mut ck, "response.weight", 1, 20.0);
    set(&mut ck, "response.bias", 0, 1.0);
    ck
}

/// Relabels tracklet `id` as a train so the stub keys on it.
pub fn mark_as_train(s: &Scenario, id: u32) -> Scenario {
    let mut s = s.clone();
    for t in &mut s.clip.tracklets {
        if t.id == id {
            t.category = ThingCategory::Train;
        }
    }
    s
}

use riskid_autodiff::{finite_diff_check_coords, BoundParams, GradCheckReport, Tape, Var};
use riskid_core::model::{forward, prepare};
use riskid_core::simulator::{generate_scenario, SimConfig};
use riskid_core::training::{sample_loss, Sample, Stage};

/// First seeded scenario with exactly three tracklets and some stuff.
pub fn toy_scenario() -> Scenario {
    (0..)
        .map(|seed| generate_scenario(seed, &SimConfig::default()).unwrap())
        .find(|s| s.clip.tracklets.len() == 3 && !s.clip.stuff.is_empty())
        .unwrap()
}

/// Narrow model used where every parameter coordinate gets probed.
pub fn small_config() -> ModelConfig {
    ModelConfig { dim: 4, hidden: 3, aux_step_loss: true, ..ModelConfig::default() }
}

/// Central differences on every parameter of the stage-2 loss.
pub fn full_model_gradcheck(s: &Scenario, config: &ModelConfig, seed: u64, h: f64) -> GradCheckReport {
    let ck = Checkpoint::init(config.clone(), seed).unwrap();
    let prep = prepare(&s.clip, None, config).unwrap();
    let sample = Sample::new(s).unwrap();
    let names: Vec<String> = ck.params.names().map(String::from).collect();
    let point: Vec<Tensor> = names.iter().map(|n| ck.params.get(n).unwrap().clone()).collect();
    let f = |tape: &Tape, vars: &[Var]| {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let out = forward(tape, &bound, &prep, config, false).unwrap();
        Ok(sample_loss(tape, &out, sample.intention, sample.response, Stage::Two, config.aux_step_loss).unwrap())
    };
    let coords: Vec<(usize, usize)> =
        point.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    finite_diff_check_coords(f, &point, h, &coords).unwrap()
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskid_core::graphs::{appearance_relation, GraphMode, GraphNode, NodeAnchor};
use riskid_core::scene::Point3;

pub struct RandomGraph {
    pub nodes: Vec<GraphNode>,
    pub features: Tensor,
    pub w: Tensor,
    pub w_prime: Tensor,
    pub mode: GraphMode,
    pub mu: f64,
}

fn point(rng: &mut ChaCha8Rng) -> Point3 {
    Point3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..10.0))
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Seeded graph: a few nodes, one of them the Ego, random anchors and
/// features.
pub fn random_graph(seed: u64) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..9);
    let d = rng.gen_range(1..7);
    let mode = if rng.gen_bool(0.5) { GraphMode::EgoThing } else { GraphMode::EgoStuff };
    let ego = rng.gen_range(0..n);
    let nodes = (0..n)
        .map(|i| {
            let anchor = if i != ego && mode == GraphMode::EgoStuff {
                NodeAnchor::Region((0..rng.gen_range(1..5)).map(|_| point(&mut rng)).collect())
            } else {
                NodeAnchor::Point(point(&mut rng))
            };
            GraphNode { anchor, ego: i == ego }
        })
        .collect();
    RandomGraph {
        nodes,
        features: matrix(&mut rng, n, d),
        w: matrix(&mut rng, d, d),
        w_prime: matrix(&mut rng, d, d),
        mode,
        mu: rng.gen_range(0.5..6.0),
    }
}

fn min_distance(a: &NodeAnchor, b: &NodeAnchor) -> f64 {
    let pts = |x: &NodeAnchor| match x {
        NodeAnchor::Point(p) => vec![*p],
        NodeAnchor::Region(ps) => ps.clone(),
    };
    let mut best = f64::INFINITY;
    for p in pts(a) {
        for q in pts(b) {
            let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Gate written out pair by pair.
pub fn brute_gate(g: &RandomGraph, i: usize, j: usize) -> bool {
    if i == j {
        return true;
    }
    if g.mode == GraphMode::EgoStuff && !g.nodes[i].ego && !g.nodes[j].ego {
        return false;
    }
    min_distance(&g.nodes[i].anchor, &g.nodes[j].anchor) <= g.mu
}

/// G_ij = f_s exp(f_a) / sum_j f_s exp(f_a), one entry at a time.
pub fn brute_affinity(g: &RandomGraph) -> Vec<Vec<f64>> {
    let n = g.nodes.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if brute_gate(g, i, j) {
                let fa = appearance_relation(g.features.row_slice(i), g.features.row_slice(j), &g.w, &g.w_prime).unwrap();
                out[i][j] = fa.exp();
                denom += out[i][j];
            }
        }
        for v in &mut out[i] {
            *v /= denom;
        }
    }
    out
}

use riskid_core::model::Prepared;
use riskid_core::simulator::{generate_scenario_with, ScenarioMode};

/// Isolated-distractor scenarios whose distractor is gated off from every
/// node in every frame, with the distractor id.
pub fn isolated_cases(count: usize, config: &ModelConfig) -> Vec<(Scenario, u32)> {
    let mut out = Vec::new();
    for seed in 0.. {
        if out.len() == count {
            break;
        }
        let s = generate_scenario_with(seed, &SimConfig::default(), ScenarioMode::IsolatedDistractor).unwrap();
        let Some(id) = s.truth.isolated else { continue };
        let prep = prepare(&s.clip, None, config).unwrap();
        if gated_off(&prep, id) {
            out.push((s, id));
        }
    }
    out
}

pub fn gated_off(prep: &Prepared, id: u32) -> bool {
    let n = prep.thing_rows();
    prep.things
        .iter()
        .enumerate()
        .filter(|(_, t)| t.id == id)
        .all(|(i, _)| {
            let r = prep.frames + i;
            (0..n).all(|j| j == r || (!prep.thing_mask[r * n + j] && !prep.thing_mask[j * n + r]))
        })
}
