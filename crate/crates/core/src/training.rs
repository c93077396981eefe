//! Two-stage training with tracklet-removal augmentation on Go samples.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use riskid_autodiff::{Adam, GradSet, Tape, Var};

use crate::error::{Error, Result};
use crate::model::{self, forward, is_intention_param, prepare, Checkpoint, Intervention, ModelConfig, Prepared};
use crate::scene::{derive_clip_labels, Intention, Response};
use crate::simulator::Scenario;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Intention head and its backbone tap only.
    One,
    /// Everything, with response and intention losses.
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Chance that an eligible Go sample gets one tracklet removed.
    pub aug_prob: f64,
    pub augment: bool,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Writes `stage{s}_step{n}.bin` into `checkpoint_dir` every this many
    /// steps; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            stage1_steps: 2000,
            stage2_steps: 1000,
            stage1_lr: 1e-3,
            stage2_lr: 2e-4,
            aug_prob: 0.5,
            augment: true,
            clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch size must be positive"));
        }
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return Err(Error::invalid("train config", "learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(Error::invalid("train config", "augmentation probability must be in [0, 1]"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::invalid("train config", "clip norm must be nonnegative"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::invalid("train config", "periodic checkpoints need a directory"));
        }
        Ok(())
    }

    fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::One => self.stage1_steps,
            Stage::Two => self.stage2_steps,
        }
    }

    fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::One => self.stage1_lr,
            Stage::Two => self.stage2_lr,
        }
    }
}

/// Clip labels plus the optional removal applied for this pass.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub scenario: &'a Scenario,
    pub intention: Intention,
    pub response: Response,
    pub intervention: Option<Intervention>,
}

impl<'a> Sample<'a> {
    pub fn new(scenario: &'a Scenario) -> Result<Self> {
        let clip = &scenario.clip;
        let (intention, response) = derive_clip_labels(&clip.labels, clip.frames)?;
        Ok(Self { scenario, intention, response, intervention: None })
    }
}

/// Removes one tracklet chosen uniformly at random from a Go sample with more
/// than one tracklet. Labels are left as they are.
pub fn augment_sample<'a>(mut sample: Sample<'a>, rng: &mut impl Rng) -> Result<Sample<'a>> {
    let tracklets = &sample.scenario.clip.tracklets;
    if sample.response != Response::Go || tracklets.len() <= 1 {
        return Ok(sample);
    }
    let k = tracklets[rng.gen_range(0..tracklets.len())].id;
    sample.intervention = Some(Intervention::remove(&sample.scenario.clip, k)?);
    Ok(sample)
}

/// Per-sample loss on the tape: intention cross-entropy, plus response
/// cross-entropy in stage 2 (and per-step decoder terms when enabled).
pub fn sample_loss(
    tape: &Tape,
    out: &model::ForwardVars,
    intention: Intention,
    response: Response,
    stage: Stage,
    aux_steps: bool,
) -> Result<Var> {
    let mut loss = tape.cross_entropy(out.intention, &[intention.index()])?;
    if stage == Stage::Two {
        let r = out.response.ok_or_else(|| Error::invalid("loss", "stage 2 needs the response head"))?;
        loss = tape.add(loss, tape.cross_entropy(r, &[response.index()])?)?;
        if aux_steps {
            for s in &out.steps {
                loss = tape.add(loss, tape.cross_entropy(*s, &[response.index()])?)?;
            }
        }
    }
    Ok(loss)
}

/// Batch loss from already computed distributions: mean over samples of
/// the per-sample loss. `response_probs` is ignored in stage 1.
pub fn compute_loss(
    intention_probs: &[Vec<f64>],
    response_probs: &[[f64; 2]],
    labels: &[(Intention, Response)],
    stage: Stage,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("loss batch"));
    }
    if intention_probs.len() != labels.len() || (stage == Stage::Two && response_probs.len() != labels.len()) {
        return Err(Error::invalid("loss", "prediction and label counts differ"));
    }
    let nll = |p: f64| -p.max(riskid_autodiff::PROB_FLOOR).ln();
    let mut total = 0.0;
    for (i, (int, resp)) in labels.iter().enumerate() {
        total += nll(intention_probs[i][int.index()]);
        if stage == Stage::Two {
            total += nll(response_probs[i][resp.index()]);
        }
    }
    Ok(total / labels.len() as f64)
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    /// Batch response accuracy; absent in stage 1.
    pub response_accuracy: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,stage,loss,response_accuracy\n");
    for r in rows {
        let acc = r.response_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.step, r.stage, r.loss, acc);
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: GradSet,
}

fn run_sample(ckpt: &Checkpoint, sample: &Sample, cached: &Prepared, stage: Stage) -> Result<SampleResult> {
    let fresh;
    let prep = match &sample.intervention {
        Some(iv) => {
            fresh = prepare(&sample.scenario.clip, Some(iv), &ckpt.config)?;
            &fresh
        }
        None => cached,
    };
    let tape = Tape::new();
    let bound = match stage {
        Stage::One => ckpt.params.bind(&tape, is_intention_param),
        Stage::Two => ckpt.params.bind(&tape, |_| true),
    };
    let out = forward(&tape, &bound, &prep, &ckpt.config, stage == Stage::One)?;
    let loss = sample_loss(&tape, &out, sample.intention, sample.response, stage, ckpt.config.aux_step_loss)?;
    let correct = match out.response {
        Some(r) => {
            let p = tape.value(r);
            let predicted = if p.data()[1] > p.data()[0] { Response::Stop } else { Response::Go };
            predicted == sample.response
        }
        None => false,
    };
    let grads = bound.gradients(&tape.backward(loss)?);
    Ok(SampleResult { loss: tape.value(loss).item(), correct, grads })
}

fn stream_seed(seed: u64, stage: Stage, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((stage.number() as u64) << 32) ^ stream
}

/// Runs one training stage. Stage 1 starts from `init` or fresh weights;
/// stage 2 requires the stage-1 checkpoint.
pub fn train(
    data: &[Scenario],
    config: &TrainConfig,
    stage: Stage,
    model_config: &ModelConfig,
    init: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let mut ckpt = match (stage, init) {
        (_, Some(c)) => c,
        (Stage::One, None) => Checkpoint::init(model_config.clone(), config.seed)?,
        (Stage::Two, None) => return Err(Error::MissingStageOneCheckpoint),
    };
    let base: Vec<Sample> = data.iter().map(Sample::new).collect::<Result<_>>()?;
    let prepared: Vec<Prepared> =
        data.par_iter().map(|s| prepare(&s.clip, None, &ckpt.config)).collect::<Result<_>>()?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, stage, 1));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, stage, 2));
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut cursor = order.len();
    let mut opt = Adam::new(config.lr(stage));
    let mut log = Vec::with_capacity(config.steps(stage));

    for step in 1..=config.steps(stage) {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let i = order[cursor];
            let mut s = base[i].clone();
            cursor += 1;
            if stage == Stage::Two && config.augment && s.response == Response::Go && aug_rng.gen_bool(config.aug_prob) {
                s = augment_sample(s, &mut aug_rng)?;
            }
            batch.push((i, s));
        }
        let results: Vec<SampleResult> =
            batch.par_iter().map(|(i, s)| run_sample(&ckpt, s, &prepared[*i], stage)).collect::<Result<_>>()?;
        let mut grads = GradSet::default();
        let (mut loss, mut correct) = (0.0, 0usize);
        for r in &results {
            grads.accumulate(&r.grads)?;
            loss += r.loss;
            correct += r.correct as usize;
        }
        let n = results.len() as f64;
        grads.scale(1.0 / n);
        if config.clip_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > config.clip_norm {
                grads.scale(config.clip_norm / norm);
            }
        }
        opt.step(&mut ckpt.params, &grads)?;
        log.push(LogRow {
            step,
            stage: stage.number(),
            loss: loss / n,
            response_accuracy: (stage == Stage::Two).then(|| correct as f64 / n),
        });
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            let dir = config.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir)?;
            ckpt.save(&dir.join(format!("stage{}_step{step}.bin", stage.number())))?;
        }
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

/// Stage 1 then stage 2 from fresh weights; logs are concatenated.
pub fn train_two_stage(data: &[Scenario], config: &TrainConfig, model_config: &ModelConfig) -> Result<TrainOutcome> {
    let one = train(data, config, Stage::One, model_config, None)?;
    let mut two = train(data, config, Stage::Two, model_config, Some(one.checkpoint))?;
    let mut log = one.log;
    log.append(&mut two.log);
    two.log = log;
    Ok(two)
}
