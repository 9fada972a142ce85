//! Supervised training on teacher-forced trajectories, and evaluation.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_tensor, build_anchor_sequence, Modality};
use crate::backbone::{ModelState, Session};
use crate::error::{Error, Result};
use crate::interleave::{decode, DecodeOptions, HybridElement, LatentBudget, Runner};
use crate::losses::{
    latent_loss_var, sync_loss_var, tau_from_log, text_loss_var, text_targets, total_loss, total_loss_var,
    LossBreakdown, LossWeights,
};
use crate::ospe::Region;
use crate::synthworld::{audio_only_oracle, blind_floor, splitmix64, EncoderBank, Episode, TrajectoryStep};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// How latent positions are timed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentTiming {
    /// Midpoint of the cited segment of the latent's modality.
    Segment,
    /// Continue the text clock, as for any generated position.
    Sequential,
}

/// Which vectors the sync loss contrasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncSource {
    /// Projected prompt features, before attention.
    Projected,
    /// Last-layer hidden states at the prompt positions.
    Hidden,
}

impl LatentTiming {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentTiming::Segment => "segment",
            LatentTiming::Sequential => "sequential",
        }
    }
}

impl FromStr for LatentTiming {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "segment" => Ok(LatentTiming::Segment),
            "sequential" => Ok(LatentTiming::Sequential),
            _ => Err(format!("unknown latent timing `{s}` (segment|sequential)")),
        }
    }
}

impl fmt::Display for LatentTiming {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl SyncSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncSource::Projected => "projected",
            SyncSource::Hidden => "hidden",
        }
    }
}

impl FromStr for SyncSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "projected" => Ok(SyncSource::Projected),
            "hidden" => Ok(SyncSource::Hidden),
            _ => Err(format!("unknown sync source `{s}` (projected|hidden)")),
        }
    }
}

impl fmt::Display for SyncSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub grad_accumulation: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub clip_norm: f64,
    pub budget: LatentBudget,
    pub latent_timing: LatentTiming,
    pub sync_source: SyncSource,
    /// Feed anchors instead of the model's own latent states.
    pub anchor_forcing: bool,
    pub eval_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_fraction: 0.05,
            total_steps: 750,
            grad_accumulation: 12,
            batch_size: 1,
            weights: LossWeights::default(),
            clip_norm: 1.0,
            budget: LatentBudget::default(),
            latent_timing: LatentTiming::Sequential,
            sync_source: SyncSource::Projected,
            anchor_forcing: false,
            eval_every: 0,
            checkpoint: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning hyperparameters of the original recipe.
    pub fn paper_hparams(mut self) -> Self {
        self.base_lr = 1e-5;
        self.warmup_fraction = 0.05;
        self.weights = LossWeights::default();
        self.grad_accumulation = 12;
        self.batch_size = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Contract(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if self.grad_accumulation == 0 || self.total_steps == 0 {
            return Err(Error::Contract("steps and accumulation must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Contract("only batch size 1 is supported".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Contract("learning rate must be >= 0 and clip norm > 0".into()));
        }
        self.weights.validate()?;
        LatentBudget::new(self.budget.total, self.budget.visual, self.budget.audio)?;
        Ok(())
    }
}

/// Linear warmup to `base_lr`, constant afterwards.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let warmup = (config.warmup_fraction * config.total_steps as f64).ceil();
    if warmup <= 0.0 {
        return config.base_lr;
    }
    config.base_lr * ((step + 1) as f64 / warmup).min(1.0)
}

/// Adam moments, shaped like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Optimizer updates applied so far; also the next training step.
    pub step: u64,
}

impl OptimState {
    pub fn new(model: &ModelState) -> Self {
        let zeros: Vec<Tensor> = model.parameters().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update.
    pub fn apply(&mut self, model: &mut ModelState, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract("gradient count differs from parameter count".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (((p, g), m), v) in model
            .parameters_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Loss graph of one teacher-forced episode.
pub struct Objective<'m> {
    pub runner: Runner<'m>,
    pub total: Var,
    pub text: Var,
    pub latent: Option<Var>,
    pub sync: Var,
    pub n_text: usize,
    pub latents: Vec<Var>,
}

impl Objective<'_> {
    pub fn breakdown(&self, weights: LossWeights) -> Result<LossBreakdown> {
        let tape = self.runner.session.tape();
        let latent = self.latent.map_or(0.0, |v| tape.value(v).item());
        let mut b = total_loss(tape.value(self.text).item(), latent, tape.value(self.sync).item(), weights)?;
        b.n_text = self.n_text;
        Ok(b)
    }
}

/// Builds the full objective of `episode` on `session`.
///
/// Text tokens come from the trajectory; the trigger block is followed by
/// `K` self-fed latent states (or anchors, with `anchor_forcing`) and the
/// inserted stop marker.
pub fn build_objective<'m>(
    session: Session<'m>,
    episode: &Episode,
    bank: &EncoderBank,
    config: &TrainConfig,
) -> Result<Objective<'m>> {
    let model = session.model();
    let budget = config.budget;
    let refs = match config.latent_timing {
        LatentTiming::Segment => episode.segments.as_slice(),
        LatentTiming::Sequential => &[],
    };
    let frames = episode.config.timesteps;
    let mut runner = Runner::from_session(session, frames, episode.config.frame_rate, refs, budget)?;
    let seq = episode.sequence(bank, budget, model.config().dim)?;
    let targets = text_targets(&seq);

    let mut blocks: Vec<(usize, usize, Var)> = Vec::new();
    let fed = runner.feed_prompt(&seq.prompt)?;
    let p = seq.prompt.len();
    blocks.push((0, p, fed.chunk.logits));

    let anchors = if budget.total > 0 && episode.trajectory.contains(&TrajectoryStep::LatentPhase) {
        Some(build_anchor_sequence(&episode.segments, episode, bank, model, budget)?)
    } else {
        None
    };
    let anchor_var = match &anchors {
        Some(a) => Some(runner.session.tape_mut().constant(anchor_tensor(a)?)),
        None => None,
    };
    let forced: Option<Vec<Var>> = match (config.anchor_forcing, anchor_var) {
        (true, Some(a)) => Some(
            (0..budget.total)
                .map(|k| runner.session.tape_mut().slice_rows(a, k, k + 1))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };

    let mut pending: Vec<u32> = Vec::new();
    let mut latents = Vec::new();
    let mut pos = p;
    for el in &seq.generated {
        match el {
            HybridElement::Text(t) => pending.push(*t),
            HybridElement::Trigger => {
                pending.push(crate::vocab::TRIGGER);
                let m = pending.len();
                let chunk = runner.feed_tokens(&pending)?;
                blocks.push((pos, m, chunk.logits));
                pos += m;
                pending.clear();
                let (zs, stop) = runner.latent_phase(&chunk, budget.total, forced.as_deref())?;
                pos += budget.total;
                // stop chunk holds [z_K, STOP]; its last row predicts the next token
                let rows = if budget.total > 0 { 2 } else { 1 };
                blocks.push((pos + 1 - rows, rows, stop.logits));
                pos += 1;
                latents.extend(zs);
            }
            HybridElement::Latent(_) | HybridElement::Stop => {}
            HybridElement::Visual(_) | HybridElement::Audio(_) => {
                return Err(Error::Contract("modality features in a trajectory".into()))
            }
        }
    }
    if !pending.is_empty() {
        let m = pending.len();
        let chunk = runner.feed_tokens(&pending)?;
        blocks.push((pos, m, chunk.logits));
        pos += m;
    }
    if pos != seq.len() {
        return Err(Error::Contract(format!("fed {pos} positions for a sequence of {}", seq.len())));
    }

    let tape = runner.session.tape_mut();
    let mut rows = Vec::new();
    let mut row_targets = Vec::new();
    for (start, m, logits) in blocks {
        let t = &targets[start..start + m];
        if t.iter().all(Option::is_none) {
            continue;
        }
        let first = t.iter().position(Option::is_some).unwrap_or(0);
        let last = m - t.iter().rev().position(Option::is_some).unwrap_or(0);
        rows.push(if first == 0 && last == m { logits } else { tape.slice_rows(logits, first, last)? });
        row_targets.extend_from_slice(&t[first..last]);
    }
    let n_text = row_targets.iter().flatten().count();
    let logits = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    let text = text_loss_var(tape, logits, &row_targets)?;

    let latent = match anchor_var {
        Some(a) if !latents.is_empty() => {
            let z = if latents.len() == 1 { latents[0] } else { tape.concat_rows(&latents)? };
            Some(latent_loss_var(tape, z, a)?)
        }
        _ => None,
    };

    let (v, a) = match config.sync_source {
        SyncSource::Projected => (fed.visual, fed.audio),
        SyncSource::Hidden => {
            let v = tape.gather_rows(fed.chunk.hidden, &seq.prompt.positions(Modality::Visual))?;
            let a = tape.gather_rows(fed.chunk.hidden, &seq.prompt.positions(Modality::Audio))?;
            (Some(v), Some(a))
        }
    };
    let (Some(v), Some(a)) = (v, a) else {
        return Err(Error::Data(format!("episode {} lacks a modality stream", episode.index)));
    };
    let log_tau = runner.session.log_tau();
    let tape = runner.session.tape_mut();
    let sync = sync_loss_var(tape, v, a, log_tau)?;
    let zero = tape.constant(Tensor::scalar(0.0));
    let total = total_loss_var(tape, text, latent.unwrap_or(zero), sync, config.weights)?;
    Ok(Objective {
        runner,
        total,
        text,
        latent,
        sync,
        n_text,
        latents,
    })
}

/// Loss breakdown and parameter gradients of one episode.
pub fn episode_gradients(
    model: &ModelState,
    episode: &Episode,
    bank: &EncoderBank,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tag = |e: Error| match e {
        Error::Numeric(m) => Error::Numeric(format!("episode {}: {m}", episode.index)),
        other => other,
    };
    let obj = build_objective(Session::new(model, true).map_err(tag)?, episode, bank, config).map_err(tag)?;
    let breakdown = obj.breakdown(config.weights).map_err(tag)?;
    let session = &obj.runner.session;
    let grads = session.tape().backward(obj.total).map_err(tag)?;
    let tensors = session.parameter_vars().iter().map(|&v| grads.tensor(v)).collect();
    Ok((breakdown, tensors))
}

/// Summed gradients and mean loss breakdown over a window of episodes.
pub fn window_gradients(
    model: &ModelState,
    episodes: &[&Episode],
    bank: &EncoderBank,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if episodes.is_empty() {
        return Err(Error::Contract("empty accumulation window".into()));
    }
    let parts: Vec<(LossBreakdown, Vec<Tensor>)> = episodes
        .par_iter()
        .map(|ep| episode_gradients(model, ep, bank, config))
        .collect::<Result<_>>()?;
    let mut grads: Vec<Tensor> = model.parameters().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let (mut text, mut latent, mut sync, mut n_text) = (0.0, 0.0, 0.0, 0);
    for (b, g) in &parts {
        text += b.text;
        latent += b.latent;
        sync += b.sync;
        n_text += b.n_text;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.add_assign(gi)?;
        }
    }
    let n = parts.len() as f64;
    let mut mean = total_loss(text / n, latent / n, sync / n, config.weights)?;
    mean.n_text = n_text;
    Ok((mean, grads))
}

/// Scales `grads` in place to global norm at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// One optimizer step over `episodes`.
pub fn train_step(
    model: &mut ModelState,
    optim: &mut OptimState,
    episodes: &[&Episode],
    bank: &EncoderBank,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let step = optim.step as usize;
    let (breakdown, mut grads) = window_gradients(model, episodes, bank, config)?;
    clip_global_norm(&mut grads, config.clip_norm);
    optim.apply(model, &grads, lr_at(step, config))?;
    if !model.is_finite() {
        return Err(Error::Numeric(format!("non-finite parameters after step {step}")));
    }
    Ok(breakdown)
}

/// Training-set indices used at `step`: consecutive windows over a fresh
/// seeded permutation per epoch.
pub fn window_indices(step: usize, dataset: usize, config: &TrainConfig) -> Vec<usize> {
    let a = config.grad_accumulation;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (step * a..(step + 1) * a)
        .map(|g| {
            let epoch = g / dataset;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..dataset).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ splitmix64(epoch as u64))));
                cached = Some((epoch, perm));
            }
            cached.as_ref().map(|c| c.1[g % dataset]).unwrap_or(0)
        })
        .collect()
}

pub const METRICS_HEADER: &str = "step,text,latent,sync,total,lr,tau";

pub fn metrics_row(step: usize, b: &LossBreakdown, lr: f64, tau: f64) -> String {
    format!("{step},{},{},{},{},{lr},{tau}", b.text, b.latent, b.sync, b.total)
}

/// Runs steps `optim.step..until`, writing one metrics row per step.
/// `on_step` sees every finished step and may stop the run by returning an
/// error.
pub fn train(
    model: &mut ModelState,
    optim: &mut OptimState,
    dataset: &[Episode],
    bank: &EncoderBank,
    config: &TrainConfig,
    until: usize,
    metrics: &mut dyn Write,
    on_step: &mut dyn FnMut(usize, &LossBreakdown, &ModelState, &OptimState) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut trace = Vec::new();
    while (optim.step as usize) < until.min(config.total_steps) {
        let step = optim.step as usize;
        let idx = window_indices(step, dataset.len(), config);
        let window: Vec<&Episode> = idx.iter().map(|&i| &dataset[i]).collect();
        let lr = lr_at(step, config);
        let b = train_step(model, optim, &window, bank, config)?;
        writeln!(metrics, "{}", metrics_row(step, &b, lr, tau_from_log(model.log_tau())))
            .map_err(|e| Error::io("metrics", e))?;
        on_step(step, &b, model, optim)?;
        trace.push(b);
    }
    Ok(trace)
}

/// Held-out evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub accuracy: f64,
    pub av_ratio_latent: Option<f64>,
    pub av_ratio_text: Option<f64>,
    /// Decodes that opened at least one latent phase.
    pub phase_rate: f64,
    pub blind_floor: f64,
    pub audio_only_oracle: f64,
}

/// Decode options used for evaluating one episode.
pub fn eval_options(episode: &Episode, budget: LatentBudget, timing: LatentTiming) -> DecodeOptions {
    let mut opts = DecodeOptions::greedy(budget, 8);
    opts.frame_rate = episode.config.frame_rate;
    opts.answer_tokens = episode.config.vocab().answer_tokens();
    if timing == LatentTiming::Segment {
        opts.segments = episode.segments.clone();
    }
    opts
}

struct EpisodeEval {
    correct: bool,
    phased: bool,
    latent: (f64, usize),
    text: (f64, usize),
}

pub fn evaluate(
    model: &ModelState,
    dataset: &[Episode],
    bank: &EncoderBank,
    budget: LatentBudget,
    timing: LatentTiming,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let per: Vec<EpisodeEval> = dataset
        .par_iter()
        .map(|ep| {
            let out = decode(model, &ep.prompt(bank)?, &eval_options(ep, budget, timing))?;
            let mut e = EpisodeEval {
                correct: out.sequence.answer_token() == Some(ep.answer_token()),
                phased: out.sequence.phases() > 0,
                latent: (0.0, 0),
                text: (0.0, 0),
            };
            for (region, r) in out.generated_ratios() {
                let slot = match region {
                    Region::LatentVisual | Region::LatentAudio => &mut e.latent,
                    Region::Text => &mut e.text,
                    _ => continue,
                };
                slot.0 += r;
                slot.1 += 1;
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: fn(&EpisodeEval) -> (f64, usize)| {
        let (s, c) = per.iter().map(f).fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        (c > 0).then(|| s / c as f64)
    };
    Ok(EvalReport {
        episodes: per.len(),
        accuracy: per.iter().filter(|e| e.correct).count() as f64 / n,
        av_ratio_latent: mean(|e| e.latent),
        av_ratio_text: mean(|e| e.text),
        phase_rate: per.iter().filter(|e| e.phased).count() as f64 / n,
        blind_floor: blind_floor(&dataset[0].config),
        audio_only_oracle: audio_only_oracle(dataset)?,
    })
}

/// Loss terms of one episode built on a caller-owned tape.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub text: Var,
    pub latent: Option<Var>,
    pub sync: Var,
}

/// Builds the objective of `episode` on `tape`, whose leaves `params` stand
/// for the model's parameters in manifest order. Used for finite-difference
/// checks of the whole training graph.
pub fn objective_on_tape(
    model: &ModelState,
    tape: &mut Tape,
    params: &[Var],
    episode: &Episode,
    bank: &EncoderBank,
    config: &TrainConfig,
) -> Result<ObjectiveVars> {
    let session = Session::with_tape(model, std::mem::take(tape), params.to_vec())?;
    let obj = build_objective(session, episode, bank, config)?;
    let vars = ObjectiveVars {
        total: obj.total,
        text: obj.text,
        latent: obj.latent,
        sync: obj.sync,
    };
    *tape = obj.runner.session.into_tape();
    Ok(vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::synthworld::{generate_episode, WorldConfig};

    fn small_model() -> ModelState {
        ModelState::init(
            ModelConfig {
                layers: 1,
                heads: 2,
                dim: 8,
                ff_dim: 16,
                vocab_size: 24,
                feature_dim_visual: 16,
                feature_dim_audio: 16,
                max_sequence: 128,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            budget: LatentBudget::new(4, 3, 1).unwrap(),
            grad_accumulation: 2,
            total_steps: 20,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig {
            base_lr: 1e-5,
            ..TrainConfig::default()
        };
        assert!((lr_at(37, &c) - 1e-5).abs() < 1e-20);
        assert!((lr_at(0, &c) - 1e-5 / 38.0).abs() < 1e-20);
        assert!((lr_at(0, &c) - 2.632e-7).abs() < 1e-10);
        assert_eq!(lr_at(500, &c), 1e-5);
        let flat = TrainConfig {
            warmup_fraction: 0.0,
            ..c
        };
        assert_eq!(lr_at(0, &flat), 1e-5);
    }

    #[test]
    fn paper_hparams_switch() {
        let c = TrainConfig::default().paper_hparams();
        assert_eq!(c.base_lr, 1e-5);
        assert_eq!(c.warmup_fraction, 0.05);
        assert_eq!(c.grad_accumulation, 12);
        assert_eq!(c.weights, LossWeights { lambda1: 0.005, lambda2: 1.0 });
    }

    #[test]
    fn objective_counts_text_targets() {
        let model = small_model();
        let world = WorldConfig::default();
        let bank = EncoderBank::new(&world);
        let ep = generate_episode(&world, 0);
        let obj = build_objective(Session::new(&model, true).unwrap(), &ep, &bank, &small_config()).unwrap();
        // FIND, X, TRIGGER, ANSWER_MARK, answer, END_OF_ANSWER
        assert_eq!(obj.n_text, 6);
        assert_eq!(obj.latents.len(), 4);
        let b = obj.breakdown(LossWeights::default()).unwrap();
        assert!(b.text > 0.0 && b.latent > 0.0 && b.sync > 0.0);
        assert!((b.total - (b.text + 0.005 * b.latent + b.sync)).abs() < 1e-12);
        assert_eq!(obj.runner.plan.len(), 24 * 2 + 2 + 6 + 4 + 1);
    }

    #[test]
    fn identical_episodes_double_the_gradient() {
        let model = small_model();
        let world = WorldConfig::default();
        let bank = EncoderBank::new(&world);
        let ep = generate_episode(&world, 3);
        let cfg = small_config();
        let (_, one) = window_gradients(&model, &[&ep], &bank, &cfg).unwrap();
        let (_, two) = window_gradients(&model, &[&ep, &ep], &bank, &cfg).unwrap();
        for (a, b) in one.iter().zip(&two) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = small_model();
        let before = model.clone();
        let world = WorldConfig::default();
        let bank = EncoderBank::new(&world);
        let ep = generate_episode(&world, 4);
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..small_config()
        };
        let mut optim = OptimState::new(&model);
        train_step(&mut model, &mut optim, &[&ep], &bank, &cfg).unwrap();
        assert_eq!(model, before);
        assert_eq!(optim.step, 1);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::row(vec![3.0, 4.0]), Tensor::row(vec![0.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::row(vec![0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3]);
    }

    #[test]
    fn windows_cover_each_epoch_once() {
        let cfg = TrainConfig {
            grad_accumulation: 5,
            ..TrainConfig::default()
        };
        let mut seen: Vec<usize> = (0..4).flat_map(|s| window_indices(s, 20, &cfg)).collect();
        seen.sort();
        assert_eq!(seen, (0..20).collect::<Vec<_>>());
        assert_eq!(window_indices(7, 20, &cfg), window_indices(7, 20, &cfg));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut model = small_model();
        let mut optim = OptimState::new(&model);
        let grads: Vec<Tensor> = model
            .parameters()
            .iter()
            .map(|p| Tensor::filled(p.value.shape(), 0.5))
            .collect();
        let before = model.parameters()[0].value.data()[0];
        optim.apply(&mut model, &grads, 0.01).unwrap();
        let after = model.parameters()[0].value.data()[0];
        // bias-corrected m/sqrt(v) is exactly sign(g) on the first step
        assert!((before - after - 0.01).abs() < 1e-9);
    }

    #[test]
    fn av_ratio_with_only_av_prompt() {
        let model = small_model();
        let world = WorldConfig::default();
        let bank = EncoderBank::new(&world);
        let ep = generate_episode(&world, 0);
        let mut prompt = ep.prompt(&bank).unwrap();
        prompt.audio.clear();
        prompt.question.clear();
        prompt.visual.truncate(1);
        let out = decode(&model, &prompt, &DecodeOptions::greedy(LatentBudget::new(2, 1, 1).unwrap(), 4)).unwrap();
        assert_eq!(out.av_ratio[0], 1.0);
        assert!(out.av_ratio.iter().all(|r| (0.0..=1.0 + 1e-12).contains(r)));
    }

    #[test]
    fn evaluation_reports_valid_ratios() {
        let model = small_model();
        let world = WorldConfig::default();
        let bank = EncoderBank::new(&world);
        let eps: Vec<Episode> = (0..6).map(|i| generate_episode(&world, i)).collect();
        let r = evaluate(&model, &eps, &bank, LatentBudget::new(3, 2, 1).unwrap(), LatentTiming::Sequential).unwrap();
        assert_eq!(r.episodes, 6);
        assert!((0.0..=1.0).contains(&r.accuracy));
        for v in [r.av_ratio_latent, r.av_ratio_text].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(r.blind_floor, 0.125);
    }
}
