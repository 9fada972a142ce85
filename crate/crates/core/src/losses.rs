//! Training objective: next-token text loss, latent/anchor alignment,
//! symmetric temporal InfoNCE, and their weighted sum.
//!
//! Each loss has a plain-value form used for reporting and closed-form
//! checks, and a tape form used for training.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSequence;
use crate::error::{Error, Result};
use crate::interleave::{HybridElement, HybridSequence};
use crate::tape::{softmax, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab;

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.005,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Contract(format!(
                "loss weights must be >= 0, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub text: f64,
    pub latent: f64,
    pub sync: f64,
    pub total: f64,
    pub n_text: usize,
}

/// Temperature actually used for a stored log-temperature.
pub fn tau_from_log(log_tau: f64) -> f64 {
    log_tau.exp().clamp(TAU_MIN, TAU_MAX)
}

/// Prediction target of every position of `seq`, prompt included.
///
/// A position is supervised when the element after it is a generated text
/// token or a trigger. Stop markers and latent states are never targets.
pub fn text_targets(seq: &HybridSequence) -> Vec<Option<usize>> {
    let p = seq.prompt.len();
    let mut targets = vec![None; seq.len()];
    for (j, el) in seq.generated.iter().enumerate() {
        let pos = p + j;
        if pos == 0 {
            continue;
        }
        targets[pos - 1] = match el {
            HybridElement::Text(t) => Some(*t as usize),
            HybridElement::Trigger => Some(vocab::TRIGGER as usize),
            _ => None,
        };
    }
    targets
}

/// Mean negative log-likelihood over supervised positions, and their count.
pub fn text_loss(logits: &Tensor, targets: &[Option<usize>]) -> Result<(f64, usize)> {
    let (n, v) = logits.dims2();
    if targets.len() != n {
        return Err(Error::shape("text_loss", &[n, v], &[targets.len()]));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if t >= v {
            return Err(Error::Data(format!("target {t} outside vocabulary of {v}")));
        }
        let row = logits.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("text loss needs at least one supervised position".into()));
    }
    Ok((total / count as f64, count))
}

pub fn text_loss_var(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// `(1/K) Σ ‖z_k − a_k‖²`, index aligned.
pub fn latent_loss(states: &[Vec<f64>], anchors: &AnchorSequence) -> Result<f64> {
    if states.len() != anchors.len() {
        return Err(Error::Contract(format!(
            "{} latent states for {} anchors",
            states.len(),
            anchors.len()
        )));
    }
    if states.is_empty() {
        return Err(Error::Contract("latent loss over an empty phase".into()));
    }
    let mut total = 0.0;
    for (z, a) in states.iter().zip(&anchors.anchors) {
        if z.len() != a.len() {
            return Err(Error::shape("latent_loss", &[z.len()], &[a.len()]));
        }
        total += z.iter().zip(a).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / states.len() as f64)
}

/// Tape form over stacked `[K×d]` states and anchors.
pub fn latent_loss_var(tape: &mut Tape, states: Var, anchors: Var) -> Result<Var> {
    let (k, _) = tape.shape(states);
    if k == 0 {
        return Err(Error::Contract("latent loss over an empty phase".into()));
    }
    let diff = tape.sub(states, anchors)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / k as f64)
}

/// Visual/audio vectors at matched timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncPairSet {
    pub visual: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub timestamps: Vec<f64>,
}

impl SyncPairSet {
    pub fn new(visual: Vec<Vec<f64>>, audio: Vec<Vec<f64>>, timestamps: Vec<f64>) -> Result<Self> {
        if visual.len() != audio.len() || visual.len() != timestamps.len() {
            return Err(Error::Contract(format!(
                "{} visual, {} audio and {} timestamps do not pair up",
                visual.len(),
                audio.len(),
                timestamps.len()
            )));
        }
        if visual.len() < 2 {
            return Err(Error::Contract("sync loss needs at least two matched timestamps".into()));
        }
        let mut sorted = timestamps.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("matched timestamps must be unique".into()));
        }
        Ok(Self {
            visual,
            audio,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// The swapped pairing, audio playing the visual role.
    pub fn swapped(&self) -> Self {
        Self {
            visual: self.audio.clone(),
            audio: self.visual.clone(),
            timestamps: self.timestamps.clone(),
        }
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Data("zero-norm vector has no cosine similarity".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Symmetric InfoNCE over cosine similarities divided by `tau`.
pub fn sync_loss(pairs: &SyncPairSet, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("temperature must be > 0, got {tau}")));
    }
    let v: Vec<Vec<f64>> = pairs.visual.iter().map(|x| unit(x)).collect::<Result<_>>()?;
    let a: Vec<Vec<f64>> = pairs.audio.iter().map(|x| unit(x)).collect::<Result<_>>()?;
    let n = pairs.len();
    let sim: Vec<Vec<f64>> = v
        .iter()
        .map(|vi| a.iter().map(|aj| vi.iter().zip(aj).map(|(x, y)| x * y).sum::<f64>() / tau).collect())
        .collect();
    let mut total = 0.0;
    for t in 0..n {
        let row = softmax(&sim[t]);
        let col: Vec<f64> = (0..n).map(|i| sim[i][t]).collect();
        total -= row[t].ln() + softmax(&col)[t].ln();
    }
    Ok(total / (2 * n) as f64)
}

/// Tape form over projected `[T×d]` visual and audio rows (row `t` of each
/// shares a timestamp) and the `[1×1]` log-temperature leaf.
pub fn sync_loss_var(tape: &mut Tape, visual: Var, audio: Var, log_tau: Var) -> Result<Var> {
    let (n, _) = tape.shape(visual);
    if n < 2 {
        return Err(Error::Contract("sync loss needs at least two matched timestamps".into()));
    }
    let neg = tape.scale(log_tau, -1.0)?;
    let inv = tape.exp(neg)?;
    let inv_tau = tape.clamp(inv, 1.0 / TAU_MAX, 1.0 / TAU_MIN)?;
    let sim = tape.cosine_similarity(visual, audio)?;
    let logits = tape.mul_scalar(sim, inv_tau)?;
    let diag: Vec<Option<usize>> = (0..n).map(Some).collect();
    let v2a = tape.cross_entropy(logits, &diag)?;
    let lt = tape.transpose(logits)?;
    let a2v = tape.cross_entropy(lt, &diag)?;
    let both = tape.add(v2a, a2v)?;
    tape.scale(both, 0.5)
}

/// `text + λ₁·latent + λ₂·sync`.
pub fn total_loss(text: f64, latent: f64, sync: f64, weights: LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("text", text), ("latent", latent), ("sync", sync)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown {
        text,
        latent,
        sync,
        total: text + weights.lambda1 * latent + weights.lambda2 * sync,
        n_text: 0,
    })
}

pub fn total_loss_var(tape: &mut Tape, text: Var, latent: Var, sync: Var, weights: LossWeights) -> Result<Var> {
    let l = tape.scale(latent, weights.lambda1)?;
    let s = tape.scale(sync, weights.lambda2)?;
    let ts = tape.add(text, l)?;
    tape.add(ts, s)
}
