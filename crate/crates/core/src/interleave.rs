//! Hybrid text/latent sequences: the grammar, and the decoding state machine
//! that switches between discrete tokens and continuous latent states.
//!
//! The generated region of a sequence follows
//!
//! ```text
//! (Text* (Trigger Latent{K} Stop)?)* Text+
//! ```
//!
//! A trigger is predicted like any other token. Once it is emitted the model
//! produces `K` latent states, each being the final hidden state at the
//! current position fed back as the next input, and then a stop marker is
//! inserted without being predicted.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{Modality, SegmentRef};
use crate::backbone::{Chunk, ModelState, Session};
use crate::error::{Error, Result};
use crate::ospe::{PositionPlan, Region, TimestampClock};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::vocab;

#[derive(Clone, Debug, PartialEq)]
pub enum HybridElement {
    Text(u32),
    Trigger,
    Latent(Vec<f64>),
    Stop,
    Visual(Vec<f64>),
    Audio(Vec<f64>),
}

/// Latent states per phase, split into visual-anchored then audio-anchored
/// positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBudget {
    pub total: usize,
    pub visual: usize,
    pub audio: usize,
}

impl LatentBudget {
    pub fn new(total: usize, visual: usize, audio: usize) -> Result<Self> {
        if visual + audio != total {
            return Err(Error::Contract(format!(
                "latent budget {visual} + {audio} != {total}"
            )));
        }
        Ok(Self {
            total,
            visual,
            audio,
        })
    }
}

impl Default for LatentBudget {
    fn default() -> Self {
        Self {
            total: 40,
            visual: 32,
            audio: 8,
        }
    }
}

/// Visual features, then audio features, then question tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prompt {
    pub visual: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub question: Vec<u32>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.visual.len() + self.audio.len() + self.question.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prompt positions that hold audio or visual features.
    pub fn av_len(&self) -> usize {
        self.visual.len() + self.audio.len()
    }

    /// Stream and frame index of each feature position, in feed order.
    pub fn layout(&self) -> Vec<(Modality, usize)> {
        let visual = (0..self.visual.len()).map(|i| (Modality::Visual, i));
        visual.chain((0..self.audio.len()).map(|i| (Modality::Audio, i))).collect()
    }

    /// Positions of one stream's frames within the prompt.
    pub fn positions(&self, modality: Modality) -> Vec<usize> {
        self.layout()
            .iter()
            .enumerate()
            .filter(|(_, (m, _))| *m == modality)
            .map(|(p, _)| p)
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HybridSequence {
    pub prompt: Prompt,
    pub generated: Vec<HybridElement>,
    /// Index into `generated` of the answer token, when one is marked.
    pub answer: Option<usize>,
}

impl HybridSequence {
    pub fn new(prompt: Prompt, generated: Vec<HybridElement>) -> Self {
        Self {
            prompt,
            generated,
            answer: None,
        }
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every element, prompt first.
    pub fn elements(&self) -> Vec<HybridElement> {
        let p = &self.prompt;
        p.visual
            .iter()
            .cloned()
            .map(HybridElement::Visual)
            .chain(p.audio.iter().cloned().map(HybridElement::Audio))
            .chain(p.question.iter().map(|&t| HybridElement::Text(t)))
            .chain(self.generated.iter().cloned())
            .collect()
    }

    pub fn answer_token(&self) -> Option<u32> {
        match self.generated.get(self.answer?) {
            Some(HybridElement::Text(t)) => Some(*t),
            _ => None,
        }
    }

    /// Number of latent phases in the generated region.
    pub fn phases(&self) -> usize {
        self.generated
            .iter()
            .filter(|e| matches!(e, HybridElement::Trigger))
            .count()
    }

    /// Line-per-element dump of the generated region.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut k = 0;
        for (i, el) in self.generated.iter().enumerate() {
            let _ = match el {
                HybridElement::Text(t) if Some(i) == self.answer => writeln!(out, "ANSWER {t}"),
                HybridElement::Text(t) => writeln!(out, "TEXT {t}"),
                HybridElement::Trigger => {
                    k = 0;
                    writeln!(out, "TRIGGER")
                }
                HybridElement::Latent(_) => {
                    k += 1;
                    writeln!(out, "LATENT {k}")
                }
                HybridElement::Stop => writeln!(out, "STOP"),
                HybridElement::Visual(_) => writeln!(out, "VISUAL"),
                HybridElement::Audio(_) => writeln!(out, "AUDIO"),
            };
        }
        out
    }
}

/// First grammar violation found, indexed into the generated region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrammarViolation {
    pub position: usize,
    pub message: String,
}

impl fmt::Display for GrammarViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "grammar violation at {}: {}", self.position, self.message)
    }
}

pub fn validate_grammar(seq: &HybridSequence, budget: LatentBudget) -> std::result::Result<(), GrammarViolation> {
    let fail = |position, message: &str| {
        Err(GrammarViolation {
            position,
            message: message.to_string(),
        })
    };
    let mut in_phase: Option<usize> = None;
    for (i, el) in seq.generated.iter().enumerate() {
        match (el, in_phase) {
            (HybridElement::Visual(_) | HybridElement::Audio(_), _) => {
                return fail(i, "modality feature in the generated region")
            }
            (HybridElement::Text(t), None) => {
                if *t == vocab::TRIGGER || *t == vocab::STOP {
                    return fail(i, "reserved marker id used as a text token");
                }
            }
            (HybridElement::Trigger, None) => in_phase = Some(0),
            (HybridElement::Latent(_), None) => return fail(i, "latent state outside a latent phase"),
            (HybridElement::Stop, None) => return fail(i, "stop without an open latent phase"),
            (HybridElement::Latent(z), Some(n)) => {
                if n == budget.total {
                    return fail(i, "more latent states than the budget");
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return fail(i, "non-finite latent state");
                }
                in_phase = Some(n + 1);
            }
            (HybridElement::Stop, Some(n)) => {
                if n != budget.total {
                    return fail(i, &format!("phase closed after {n} of {} latent states", budget.total));
                }
                in_phase = None;
            }
            (HybridElement::Text(_) | HybridElement::Trigger, Some(_)) => {
                return fail(i, "discrete token inside a latent phase")
            }
        }
    }
    if in_phase.is_some() {
        return fail(seq.generated.len(), "unterminated latent phase");
    }
    match seq.generated.last() {
        Some(HybridElement::Text(_)) => Ok(()),
        _ => fail(seq.generated.len(), "sequence must end with a text token"),
    }
}

/// Drives a [`Session`] position by position while keeping the timestamp
/// plan and the per-position audio-visual attention mass.
pub struct Runner<'m> {
    pub session: Session<'m>,
    pub clock: TimestampClock,
    pub plan: PositionPlan,
    /// Mean attention mass on audio-visual prompt positions, averaged over
    /// layers and heads, one entry per fed position.
    pub av_ratio: Vec<f64>,
    frame_rate: f64,
    av_positions: usize,
    track_attention: bool,
}

/// Result of feeding the prompt.
pub struct PromptFeed {
    pub chunk: Chunk,
    /// Projected visual and audio feature rows, when present.
    pub visual: Option<Var>,
    pub audio: Option<Var>,
}

impl<'m> Runner<'m> {
    pub fn new(
        model: &'m ModelState,
        trainable: bool,
        prompt_frames: usize,
        frame_rate: f64,
        refs: &[SegmentRef],
        budget: LatentBudget,
    ) -> Result<Self> {
        let runner = Self::from_session(Session::new(model, trainable)?, prompt_frames, frame_rate, refs, budget)?;
        Ok(runner.track_attention(!trainable))
    }

    pub fn from_session(
        session: Session<'m>,
        prompt_frames: usize,
        frame_rate: f64,
        refs: &[SegmentRef],
        budget: LatentBudget,
    ) -> Result<Self> {
        Ok(Self {
            session,
            clock: TimestampClock::new(prompt_frames, frame_rate, refs, budget)?,
            plan: PositionPlan::default(),
            av_ratio: Vec::new(),
            frame_rate,
            av_positions: 0,
            track_attention: false,
        })
    }

    pub fn track_attention(mut self, on: bool) -> Self {
        self.track_attention = on;
        self
    }

    pub fn feed(&mut self, x: Var, slots: &[(f64, Region)]) -> Result<Chunk> {
        let ts: Vec<f64> = slots.iter().map(|s| s.0).collect();
        let chunk = self.session.feed(x, &ts)?;
        for &(t, r) in slots {
            self.plan.timestamps.push(t);
            self.plan.regions.push(r);
        }
        if self.track_attention {
            let tape = self.session.tape();
            let layers = chunk.attention.len();
            let heads = chunk.attention[0].len();
            let rows = slots.len();
            let mut mass = vec![0.0; rows];
            for layer in &chunk.attention {
                for &h in layer {
                    let p = tape.value(h);
                    for (r, m) in mass.iter_mut().enumerate() {
                        *m += p.row_slice(r)[..self.av_positions].iter().sum::<f64>();
                    }
                }
            }
            let denom = (layers * heads) as f64;
            self.av_ratio.extend(mass.into_iter().map(|m| m / denom));
        }
        Ok(chunk)
    }

    pub fn feed_prompt(&mut self, prompt: &Prompt) -> Result<PromptFeed> {
        if prompt.is_empty() {
            return Err(Error::Contract("empty prompt".into()));
        }
        let mut parts = Vec::new();
        let mut slots = Vec::with_capacity(prompt.len());
        let project = |runner: &mut Self, rows: &[Vec<f64>], m: Modality| -> Result<Option<Var>> {
            if rows.is_empty() {
                return Ok(None);
            }
            let v = runner.session.embed_features(m, &Tensor::from_rows(rows)?)?;
            Ok(Some(v))
        };
        let visual = project(self, &prompt.visual, Modality::Visual)?;
        let audio = project(self, &prompt.audio, Modality::Audio)?;
        for (m, i) in prompt.layout() {
            let region = match m {
                Modality::Visual => Region::VisualPrompt,
                Modality::Audio => Region::AudioPrompt,
            };
            slots.push((i as f64 / self.frame_rate, region));
        }
        parts.extend(visual);
        parts.extend(audio);
        if !prompt.question.is_empty() {
            parts.push(self.session.embed_tokens(&prompt.question)?);
            for _ in &prompt.question {
                slots.push((self.clock.text(), Region::Text));
            }
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            self.session.tape_mut().concat_rows(&parts)?
        };
        self.av_positions = prompt.av_len();
        let chunk = self.feed(x, &slots)?;
        Ok(PromptFeed {
            chunk,
            visual,
            audio,
        })
    }

    /// Feeds discrete tokens (text or trigger) as one block.
    pub fn feed_tokens(&mut self, tokens: &[u32]) -> Result<Chunk> {
        let x = self.session.embed_tokens(tokens)?;
        let slots: Vec<(f64, Region)> = tokens
            .iter()
            .map(|&t| {
                let region = if t == vocab::TRIGGER { Region::Trigger } else { Region::Text };
                (self.clock.text(), region)
            })
            .collect();
        self.feed(x, &slots)
    }

    /// Last row of a block's hidden states.
    pub fn last_hidden(&mut self, chunk: &Chunk) -> Result<Var> {
        let (rows, _) = self.session.tape().shape(chunk.hidden);
        if rows == 1 {
            Ok(chunk.hidden)
        } else {
            self.session.tape_mut().slice_rows(chunk.hidden, rows - 1, rows)
        }
    }

    /// Runs one latent phase after the trigger block `trigger`.
    ///
    /// Returns the `K` generated states and the block holding the inserted
    /// stop marker (its last row predicts the token after the phase). With
    /// `forced_inputs`, position `k` is fed `forced_inputs[k]` instead of the
    /// model's own state (anchor teacher forcing); the returned states are
    /// always the model's own.
    pub fn latent_phase(
        &mut self,
        trigger: &Chunk,
        k: usize,
        forced_inputs: Option<&[Var]>,
    ) -> Result<(Vec<Var>, Chunk)> {
        if let Some(f) = forced_inputs {
            if f.len() != k {
                return Err(Error::Contract(format!("{} forced inputs for {k} latents", f.len())));
            }
        }
        let mut latents = Vec::with_capacity(k);
        if k > 0 {
            latents.push(self.last_hidden(trigger)?);
        }
        for step in 1..k {
            let input = forced_inputs.map_or(latents[step - 1], |f| f[step - 1]);
            let slot = self.clock.latent(step - 1);
            let chunk = self.feed(input, &[slot])?;
            latents.push(chunk.hidden);
        }
        let stop = self.session.embed_tokens(&[vocab::STOP])?;
        let (x, slots) = if k > 0 {
            let last = forced_inputs.map_or(latents[k - 1], |f| f[k - 1]);
            let slot = self.clock.latent(k - 1);
            let x = self.session.tape_mut().concat_rows(&[last, stop])?;
            (x, vec![slot, (self.clock.text(), Region::Stop)])
        } else {
            (stop, vec![(self.clock.text(), Region::Stop)])
        };
        let chunk = self.feed(x, &slots)?;
        for &z in &latents {
            if !self.session.tape().value(z).is_finite() {
                return Err(Error::Numeric("non-finite latent state".into()));
            }
        }
        Ok((latents, chunk))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sampled { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub budget: LatentBudget,
    /// Maximum discrete tokens emitted (trigger included).
    pub max_text: usize,
    pub mode: DecodeMode,
    pub frame_rate: f64,
    /// Segment citations used to time latent positions; empty means latent
    /// positions follow the ordinary text clock.
    pub segments: Vec<SegmentRef>,
    /// Added to the logits before choosing; `-inf` removes a token.
    pub logit_bias: Vec<(u32, f64)>,
    /// When non-empty, the token after the answer marker is restricted to
    /// this set, and the marker is forced if the text budget runs out first.
    pub answer_tokens: Vec<u32>,
}

impl DecodeOptions {
    pub fn greedy(budget: LatentBudget, max_text: usize) -> Self {
        Self {
            budget,
            max_text,
            mode: DecodeMode::Greedy,
            frame_rate: 1.0,
            segments: Vec::new(),
            logit_bias: Vec::new(),
            answer_tokens: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub sequence: HybridSequence,
    pub plan: PositionPlan,
    /// Audio-visual attention ratio of every position, prompt included.
    pub av_ratio: Vec<f64>,
}

impl Decoded {
    /// `(region, av_ratio)` of every generated position.
    pub fn generated_ratios(&self) -> impl Iterator<Item = (Region, f64)> + '_ {
        let start = self.sequence.prompt.len();
        self.plan.regions[start..]
            .iter()
            .copied()
            .zip(self.av_ratio[start..].iter().copied())
    }
}

struct Chooser {
    rng: Option<ChaCha8Rng>,
    bias: Vec<f64>,
}

impl Chooser {
    fn pick(&mut self, logits: &[f64], allowed: impl Fn(u32) -> bool) -> u32 {
        let scores: Vec<(u32, f64)> = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i as u32))
            .map(|(i, &l)| (i as u32, l + self.bias[i]))
            .collect();
        let best = scores
            .iter()
            .copied()
            .fold(None::<(u32, f64)>, |acc, (i, s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((i, s)),
            })
            .expect("at least one allowed token");
        let Some(rng) = self.rng.as_mut() else {
            return best.0;
        };
        if best.1 == f64::NEG_INFINITY {
            return best.0;
        }
        let weights: Vec<f64> = scores.iter().map(|(_, s)| (s - best.1).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for ((tok, _), w) in scores.iter().zip(&weights) {
            if u < *w {
                return *tok;
            }
            u -= w;
        }
        best.0
    }
}

/// Interleaved decoding from a prompt.
pub fn decode(model: &ModelState, prompt: &Prompt, opts: &DecodeOptions) -> Result<Decoded> {
    let cfg = model.config();
    let k = opts.budget.total;
    let needed = prompt.len() + k + 3;
    if needed > cfg.max_sequence {
        return Err(Error::Capacity {
            needed,
            limit: cfg.max_sequence,
        });
    }
    let frames = prompt.visual.len().max(prompt.audio.len());
    let mut runner = Runner::new(model, false, frames, opts.frame_rate, &opts.segments, opts.budget)?;
    let mut bias = vec![0.0; cfg.vocab_size];
    for &(t, b) in &opts.logit_bias {
        if let Some(slot) = bias.get_mut(t as usize) {
            *slot += b;
        }
    }
    let mut chooser = Chooser {
        rng: match opts.mode {
            DecodeMode::Greedy => None,
            DecodeMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        },
        bias,
    };
    let constrained = !opts.answer_tokens.is_empty();

    let fed = runner.feed_prompt(prompt)?;
    let mut last = last_logits(&runner, &fed.chunk);
    let mut generated = Vec::new();
    let mut answer = None;
    let mut emitted = 0usize;
    let mut prev = None::<u32>;

    while emitted < opts.max_text {
        let remaining = opts.max_text - emitted;
        let tok = if constrained && prev == Some(vocab::ANSWER_MARK) {
            let t = chooser.pick(&last, |t| opts.answer_tokens.contains(&t));
            answer = Some(generated.len());
            t
        } else if constrained && answer.is_none() && remaining <= 2 {
            vocab::ANSWER_MARK
        } else {
            // A phase needs at least one text token after it.
            chooser.pick(&last, |t| t != vocab::STOP && (t != vocab::TRIGGER || remaining >= 3))
        };
        emitted += 1;
        prev = Some(tok);
        if tok == vocab::TRIGGER {
            let needed = runner.session.positions() + k + 3;
            if needed > cfg.max_sequence {
                return Err(Error::Capacity {
                    needed,
                    limit: cfg.max_sequence,
                });
            }
            generated.push(HybridElement::Trigger);
            let trig = runner.feed_tokens(&[vocab::TRIGGER])?;
            let (latents, stop) = runner.latent_phase(&trig, k, None)?;
            for z in latents {
                generated.push(HybridElement::Latent(runner.session.tape().value(z).data().to_vec()));
            }
            generated.push(HybridElement::Stop);
            last = last_logits(&runner, &stop);
            continue;
        }
        generated.push(HybridElement::Text(tok));
        if runner.session.positions() + 1 > cfg.max_sequence {
            break;
        }
        let chunk = runner.feed_tokens(&[tok])?;
        last = last_logits(&runner, &chunk);
        if tok == vocab::END_OF_ANSWER {
            break;
        }
    }
    let mut sequence = HybridSequence::new(prompt.clone(), generated);
    sequence.answer = answer;
    Ok(Decoded {
        sequence,
        plan: runner.plan,
        av_ratio: runner.av_ratio,
    })
}

fn last_logits(runner: &Runner<'_>, chunk: &Chunk) -> Vec<f64> {
    let v = runner.session.tape().value(chunk.logits);
    let (rows, _) = v.dims2();
    v.row_slice(rows - 1).to_vec()
}

/// Generates the `K` latent states that follow `context`, whose generated
/// region must end with a trigger.
pub fn latent_phase(
    model: &ModelState,
    context: &HybridSequence,
    budget: LatentBudget,
    frame_rate: f64,
    segments: &[SegmentRef],
) -> Result<Vec<Vec<f64>>> {
    if !matches!(context.generated.last(), Some(HybridElement::Trigger)) {
        return Err(Error::Contract("latent phase context must end with a trigger".into()));
    }
    let mut probe = context.clone();
    probe.generated.pop();
    probe.generated.push(HybridElement::Text(vocab::PAD));
    if let Err(v) = validate_grammar(&probe, budget) {
        return Err(Error::Contract(format!("context is not a valid prefix: {v}")));
    }
    let frames = context.prompt.visual.len().max(context.prompt.audio.len());
    let mut runner = Runner::new(model, false, frames, frame_rate, segments, budget)?.track_attention(false);
    runner.feed_prompt(&context.prompt)?;
    let mut phase = 0usize;
    let n = context.generated.len();
    for el in &context.generated[..n - 1] {
        let x = match el {
            HybridElement::Text(t) => {
                runner.feed_tokens(&[*t])?;
                continue;
            }
            HybridElement::Trigger => {
                phase = 0;
                runner.feed_tokens(&[vocab::TRIGGER])?;
                continue;
            }
            HybridElement::Latent(z) => {
                let slot = runner.clock.latent(phase);
                phase += 1;
                (runner.session.tape_mut().constant(Tensor::row(z.clone())), slot)
            }
            HybridElement::Stop => {
                let x = runner.session.embed_tokens(&[vocab::STOP])?;
                (x, (runner.clock.text(), Region::Stop))
            }
            HybridElement::Visual(_) | HybridElement::Audio(_) => unreachable!("rejected by grammar"),
        };
        runner.feed(x.0, &[x.1])?;
    }
    let trig = runner.feed_tokens(&[vocab::TRIGGER])?;
    let (latents, _) = runner.latent_phase(&trig, budget.total, None)?;
    Ok(latents
        .into_iter()
        .map(|z| runner.session.tape().value(z).data().to_vec())
        .collect())
}
