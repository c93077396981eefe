//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so the report is printed as it goes.

mod common;

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskid_autodiff::{finite_diff_check, Result as AdResult, Tape, Tensor, Var, LAYER_NORM_EPS};
use riskid_core::causal::{assess_risk, CausalConfig, EvalOrder};
use riskid_core::eval::{
    average_precision, benchmark, droid_accuracy, macro_micro_accuracy, perplexity, response_metrics,
    BenchmarkMode, MetricsReport,
};
use riskid_core::graphs::build_affinity;
use riskid_core::model::{predict, Checkpoint, Intervention, ModelConfig};
use riskid_core::scene::{BoundingBox, Response};
use riskid_core::simulator::{counterfactual_response, generate_dataset, generate_scenario, SimConfig, SplitCounts};
use riskid_core::training::{augment_sample, train, Sample, Stage, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---- 1: gradients ----

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Rows offset from each other so per-column maxima stay put under the probe.
fn separated_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let base = random(rng, 1, cols);
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|i| base.data().iter().map(|b| b + i as f64 * 0.5 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
        .collect();
    Tensor::from_rows(&data).unwrap()
}

type OpFn = fn(&Tape, &[Var]) -> AdResult<Var>;
type GenFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn op_cases() -> Vec<(&'static str, GenFn, OpFn)> {
    vec![
        ("matmul", |r| vec![random(r, 3, 4), random(r, 4, 2)], |t, v| t.matmul(v[0], v[1])),
        ("transpose", |r| vec![random(r, 3, 2)], |t, v| t.transpose(v[0])),
        ("add", |r| vec![random(r, 2, 3), random(r, 2, 3)], |t, v| t.add(v[0], v[1])),
        ("sub", |r| vec![random(r, 2, 3), random(r, 2, 3)], |t, v| t.sub(v[0], v[1])),
        ("mul", |r| vec![random(r, 2, 3), random(r, 2, 3)], |t, v| t.mul(v[0], v[1])),
        ("add_row", |r| vec![random(r, 3, 4), random(r, 1, 4)], |t, v| t.add_row(v[0], v[1])),
        ("add_n", |r| vec![random(r, 2, 2), random(r, 2, 2), random(r, 2, 2)], |t, v| t.add_n(v)),
        ("scale", |r| vec![random(r, 2, 2)], |t, v| Ok(t.scale(v[0], -2.5))),
        ("exp", |r| vec![random(r, 2, 3)], |t, v| Ok(t.exp(v[0]))),
        ("relu", |r| vec![away_from_zero(r, 2, 3)], |t, v| Ok(t.relu(v[0]))),
        ("sigmoid", |r| vec![random(r, 2, 3)], |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", |r| vec![random(r, 2, 3)], |t, v| Ok(t.tanh(v[0]))),
        ("softmax", |r| vec![random(r, 3, 4)], |t, v| Ok(t.softmax(v[0]))),
        ("masked_softmax", |r| vec![random(r, 2, 3)], |t, v| {
            t.masked_softmax(v[0], &[true, false, true, true, true, false])
        }),
        ("layer_norm", |r| vec![random(r, 3, 5), random(r, 1, 5), random(r, 1, 5)], |t, v| {
            t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)
        }),
        ("concat_cols", |r| vec![random(r, 2, 2), random(r, 2, 3)], |t, v| t.concat_cols(v)),
        ("concat_rows", |r| vec![random(r, 1, 3), random(r, 2, 3)], |t, v| t.concat_rows(v)),
        ("slice_rows", |r| vec![random(r, 4, 3)], |t, v| t.slice_rows(v[0], 1, 2)),
        ("slice_cols", |r| vec![random(r, 3, 5)], |t, v| t.slice_cols(v[0], 1, 3)),
        ("select_rows", |r| vec![random(r, 4, 2)], |t, v| t.select_rows(v[0], &[3, 0, 3])),
        ("row", |r| vec![random(r, 3, 4)], |t, v| t.row(v[0], 2)),
        ("sum", |r| vec![random(r, 3, 2)], |t, v| Ok(t.sum(v[0]))),
        ("mean", |r| vec![random(r, 3, 3)], |t, v| Ok(t.mean(v[0]))),
        ("mean_rows", |r| vec![random(r, 3, 2)], |t, v| Ok(t.mean_rows(v[0]))),
        ("max_rows", |r| vec![separated_rows(r, 3, 3)], |t, v| Ok(t.max_rows(v[0]))),
        ("max_row_groups", |r| vec![separated_rows(r, 4, 3)], |t, v| t.max_row_groups(v[0], 2)),
        ("sparse_combine", |r| vec![random(r, 5, 3)], |t, v| {
            let rows = vec![vec![(0, 0.5), (3, 1.5)], vec![(4, -1.0)], vec![(1, 0.25), (1, 0.25), (2, 2.0)]];
            t.sparse_combine(v[0], Arc::new(rows))
        }),
        ("cross_entropy", |r| vec![random(r, 3, 4)], |t, v| {
            let p = t.softmax(v[0]);
            t.cross_entropy(p, &[0, 3, 1])
        }),
    ]
}

/// Fixed random weights turn any output into a scalar.
fn weighted_sum(tape: &Tape, v: Var, seed: u64) -> AdResult<Var> {
    let shape = tape.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce);
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst_op = ("", 0.0f64);
    let cases = op_cases();
    for (name, gen, f) in &cases {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = gen(&mut rng);
            let err = finite_diff_check(
                |tape: &Tape, vars: &[Var]| {
                    let out = f(tape, vars)?;
                    weighted_sum(tape, out, seed)
                },
                &point,
                H,
            )
            .unwrap();
            if err > worst_op.1 {
                worst_op = (name, err);
            }
        }
    }
    let toy = common::toy_scenario();
    let full = common::full_model_gradcheck(&toy, &common::small_config(), 11, H);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op.1 < TOL && full.max_rel_error < TOL && full.checked > 0 && secs < 120.0,
        format!(
            "{} ops, worst {} {:.2e}; full model on {} tracklets {:.2e} over {} coords ({} kinks skipped); {:.1} s",
            cases.len(),
            worst_op.0,
            worst_op.1,
            toy.clip.tracklets.len(),
            full.max_rel_error,
            full.checked,
            full.skipped_kinks,
            secs
        ),
    )
}

// ---- 2: affinity ----

fn criterion_2() -> Outcome {
    let (mut row_err, mut gated_nonzero, mut brute_err) = (0.0f64, 0usize, 0.0f64);
    for seed in 0..500 {
        let g = common::random_graph(seed);
        let n = g.nodes.len();
        let a = build_affinity(&g.features, &g.nodes, g.mode, g.mu, &g.w, &g.w_prime).unwrap();
        let brute = common::brute_affinity(&g);
        for i in 0..n {
            let row: f64 = (0..n).map(|j| a.get(i, j)).sum();
            row_err = row_err.max((row - 1.0).abs());
            for j in 0..n {
                if !common::brute_gate(&g, i, j) && a.get(i, j) != 0.0 {
                    gated_nonzero += 1;
                }
                brute_err = brute_err.max((a.get(i, j) - brute[i][j]).abs());
            }
        }
    }
    outcome(
        row_err <= 1e-6 && gated_nonzero == 0 && brute_err <= 1e-9,
        format!("500 graphs: row sum err {row_err:.1e}, gated nonzero {gated_nonzero}, brute-force err {brute_err:.1e}"),
    )
}

// ---- 3: intervention locality ----

fn criterion_3() -> Outcome {
    let config = ModelConfig::default();
    let ck = Checkpoint::init(config.clone(), 3).unwrap();
    let cases = common::isolated_cases(100, &config);
    let mut worst = 0.0f64;
    let mut ok = 0;
    for (s, id) in &cases {
        let a = predict(&ck, &s.clip, None).unwrap();
        let b = predict(&ck, &s.clip, Some(&Intervention::remove(&s.clip, *id).unwrap())).unwrap();
        let mut d = (a.response.p_go - b.response.p_go).abs().max((a.response.p_stop - b.response.p_stop).abs());
        for (x, y) in a.intention.probs.iter().zip(&b.intention.probs) {
            d = d.max((x - y).abs());
        }
        worst = worst.max(d);
        if d < 1e-9 {
            ok += 1;
        }
    }
    outcome(ok == 100 && cases.len() == 100, format!("{ok}/{} isolated removals unchanged, max diff {worst:.1e}", cases.len()))
}

// ---- 4: counterfactual identification with a stub ----

/// Returns (hits, total, serialized reports).
fn stub_identification() -> (usize, usize, Vec<u8>) {
    let stub = common::stub_checkpoint();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut hits, mut total) = (0, 0);
    let mut reports = Vec::new();
    for seed in 0.. {
        if total == 200 {
            break;
        }
        let s = generate_scenario(seed, &SimConfig::default()).unwrap();
        if s.clip.tracklets.is_empty() {
            continue;
        }
        let c = s.clip.tracklets[rng.gen_range(0..s.clip.tracklets.len())].id;
        let marked = common::mark_as_train(&s, c);
        let mut all = true;
        for order in [EvalOrder::Forward, EvalOrder::Reverse, EvalOrder::Parallel] {
            let report = assess_risk(&marked.clip, &stub, &CausalConfig { order, ..CausalConfig::default() }).unwrap();
            all &= report.risk_object_id == c;
            serde_json::to_writer(&mut reports, &report).unwrap();
            reports.push(b'\n');
        }
        total += 1;
        hits += all as usize;
    }
    (hits, total, reports)
}

fn criterion_4(run: &(usize, usize, Vec<u8>)) -> Outcome {
    let (hits, total, _) = run;
    outcome(hits == total && *total == 200, format!("{hits}/{total} scenarios name c under forward, reverse and parallel order"))
}

// ---- 5: metric oracles ----

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

fn criterion_5() -> Outcome {
    let ppl = perplexity(&[[0.5, 0.5]; 7], &[Response::Go, Response::Stop, Response::Go, Response::Go, Response::Stop, Response::Go, Response::Go]).unwrap();
    let mut labels = vec![0; 100];
    labels.extend([1; 10]);
    let mut preds = vec![0; 90];
    preds.extend([1; 10]);
    preds.extend([0; 10]);
    let (ma, mi) = macro_micro_accuracy(&preds, &labels).unwrap();
    let truth = bx(0.0, 0.0, 10.0, 10.0);
    let d = droid_accuracy(&[bx(0.0, 0.0, 8.0, 10.0), bx(2.0, 0.0, 10.0, 10.0)], &[truth, truth]).unwrap();
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap();
    let pass = ppl == std::f64::consts::LN_2
        && ma == 0.45
        && mi == 90.0 / 110.0
        && d.acc_50 == 1.0
        && d.acc_75 == 1.0
        && d.macc == 0.7
        && ap == 0.25;
    outcome(pass, format!("ppl {ppl}, macro {ma}, micro {mi:.4}, mAcc {} at IoU 0.8, AP {ap}", d.macc))
}

// ---- 6: augmentation soundness ----

fn criterion_6() -> Outcome {
    let cfg = SimConfig { confound_prob: 0.0, ..SimConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut augmented, mut sound) = (0, 0);
    for seed in 0..1000 {
        let s = generate_scenario(seed, &cfg).unwrap();
        let a = augment_sample(Sample::new(&s).unwrap(), &mut rng).unwrap();
        let Some(iv) = &a.intervention else { continue };
        augmented += 1;
        let removed = iv.removed.expect("augmentation removes a tracklet");
        if a.response == Response::Go && counterfactual_response(&s, removed).unwrap() == Response::Go {
            sound += 1;
        }
    }
    outcome(augmented > 0 && sound == augmented, format!("{sound}/{augmented} augmented Go samples stay Go under the oracle"))
}

// ---- 7: end to end ----

struct EndToEnd {
    train_secs: f64,
    checkpoint: Vec<u8>,
    causation: MetricsReport,
    correlation: MetricsReport,
}

fn dataset_config() -> (SimConfig, SplitCounts) {
    (SimConfig { seed: 1, ..SimConfig::default() }, SplitCounts { train: 2000, test1: 500, test2: 200 })
}

fn end_to_end(no_aug: bool) -> (EndToEnd, Option<f64>) {
    let (sim, counts) = dataset_config();
    let data = generate_dataset(&sim, counts).unwrap();
    let cfg = TrainConfig::default();
    let model = ModelConfig::default();
    let start = Instant::now();
    let one = train(&data.train, &cfg, Stage::One, &model, None).unwrap();
    let two = train(&data.train, &cfg, Stage::Two, &model, Some(one.checkpoint.clone())).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let ck = two.checkpoint;
    let causation = benchmark(&ck, &data.test1, &data.test2, BenchmarkMode::Causation).unwrap();
    let correlation = benchmark(&ck, &data.test1, &data.test2, BenchmarkMode::Correlation).unwrap();
    let no_aug_ppl = no_aug.then(|| {
        let plain = TrainConfig { augment: false, ..cfg.clone() };
        let ck = train(&data.train, &plain, Stage::Two, &model, Some(one.checkpoint)).unwrap().checkpoint;
        response_metrics(&ck, &data.test1).unwrap().perplexity
    });
    let run = EndToEnd { train_secs, checkpoint: ck.to_bytes().unwrap(), causation, correlation };
    (run, no_aug_ppl)
}

fn criterion_7(run: &EndToEnd, no_aug_ppl: f64) -> Outcome {
    let r = &run.causation.response;
    let cause = run.causation.droid_overall().accuracy.macc;
    let corr = run.correlation.droid_overall().accuracy.macc;
    let checks = [
        run.train_secs < 30.0 * 60.0,
        r.micro_accuracy >= 0.85,
        r.perplexity <= 0.45,
        cause >= 0.70,
        cause > corr,
        r.perplexity < no_aug_ppl,
    ];
    outcome(
        checks.iter().all(|c| *c),
        format!(
            "train {:.0} s; test1 micro {:.3}, ppl {:.4}; test2 mAcc causation {:.3} vs correlation {:.3}; ppl with aug {:.4} vs without {:.4}",
            run.train_secs, r.micro_accuracy, r.perplexity, cause, corr, r.perplexity, no_aug_ppl
        ),
    )
}

// ---- 8: determinism ----

fn criterion_8(first4: &[u8], first7: &EndToEnd) -> Outcome {
    let again4 = stub_identification().2;
    let (again7, _) = end_to_end(false);
    let json = |m: &MetricsReport| serde_json::to_vec(m).unwrap();
    let same4 = again4 == first4;
    let same_ckpt = again7.checkpoint == first7.checkpoint;
    let same_reports = json(&again7.causation) == json(&first7.causation) && json(&again7.correlation) == json(&first7.correlation);
    outcome(
        same4 && same_ckpt && same_reports,
        format!(
            "criterion 4 reports identical: {same4}; checkpoint ({} bytes) identical: {same_ckpt}; metrics reports identical: {same_reports}",
            first7.checkpoint.len()
        ),
    )
}

fn report(n: usize, what: &str, o: &Outcome) {
    println!("criterion {n} [{}] {what}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut record = |n: usize, what: &str, o: Outcome| {
        report(n, what, &o);
        results.push(o.pass);
    };
    record(1, "gradient correctness", criterion_1());
    record(2, "affinity algebra", criterion_2());
    record(3, "intervention locality", criterion_3());
    let stub_run = stub_identification();
    record(4, "risk object oracle", criterion_4(&stub_run));
    record(5, "metric oracles", criterion_5());
    record(6, "augmentation soundness", criterion_6());
    let (e2e, no_aug) = end_to_end(true);
    record(7, "end-to-end benchmark", criterion_7(&e2e, no_aug.expect("no-aug run requested")));
    record(8, "determinism", criterion_8(&stub_run.2, &e2e));
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0} s", results.len(), start.elapsed().as_secs_f64());
    if passed != results.len() {
        std::process::exit(1);
    }
}
