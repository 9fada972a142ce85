//! Anchor sequences: pooled, projected sensory vectors that supervise the
//! latent states of a reasoning phase.

use serde::{Deserialize, Serialize};

use crate::backbone::ModelState;
use crate::error::{Error, Result};
use crate::interleave::LatentBudget;
use crate::synthworld::{EncoderBank, Episode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
}

/// A cited time window of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRef {
    pub modality: Modality,
    pub t_start: f64,
    pub t_end: f64,
    pub id: u32,
}

impl SegmentRef {
    pub fn new(modality: Modality, t_start: f64, t_end: f64, id: u32) -> Self {
        Self {
            modality,
            t_start,
            t_end,
            id,
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    /// Frame indices inside the closed window, for a stream of `frames`
    /// frames sampled at `frame_rate`.
    pub fn frame_indices(&self, frames: usize, frame_rate: f64) -> Vec<usize> {
        (0..frames)
            .filter(|&i| {
                let t = i as f64 / frame_rate;
                t >= self.t_start && t <= self.t_end
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSequence {
    /// `K_v` visual anchors followed by `K_a` audio anchors.
    pub anchors: Vec<Vec<f64>>,
    pub visual: usize,
    pub audio: usize,
    pub source: Vec<SegmentRef>,
}

impl AnchorSequence {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sizes of `bins` contiguous bins covering `n` items, larger bins first.
pub fn bin_sizes(n: usize, bins: usize) -> Vec<usize> {
    let (q, r) = (n / bins, n % bins);
    (0..bins).map(|b| q + usize::from(b < r)).collect()
}

/// Norm-proportional weights of one bin; `None` for an all-zero bin.
pub fn pool_weights(bin: &[Vec<f64>]) -> Option<Vec<f64>> {
    let norms: Vec<f64> = bin.iter().map(|f| norm(f)).collect();
    let total: f64 = norms.iter().sum();
    (total > 0.0).then(|| norms.iter().map(|n| n / total).collect())
}

/// Parameter-free L2-norm-weighted pooling of `frames` into `target`
/// contiguous bins.
pub fn l2_pool(frames: &[Vec<f64>], target: usize) -> Result<Vec<Vec<f64>>> {
    if frames.is_empty() {
        return Err(Error::Contract("l2_pool needs at least one frame".into()));
    }
    if target == 0 || target > frames.len() {
        return Err(Error::Contract(format!(
            "l2_pool target {target} must lie in 1..={}",
            frames.len()
        )));
    }
    let width = frames[0].len();
    if frames.iter().any(|f| f.len() != width) {
        return Err(Error::Contract("l2_pool frames differ in length".into()));
    }
    let mut out = Vec::with_capacity(target);
    let mut start = 0;
    for size in bin_sizes(frames.len(), target) {
        let bin = &frames[start..start + size];
        start += size;
        let mut pooled = vec![0.0; width];
        match pool_weights(bin) {
            Some(w) => {
                for (f, wi) in bin.iter().zip(w) {
                    pooled.iter_mut().zip(f).for_each(|(p, x)| *p += wi * x);
                }
            }
            // all-zero bin: the unweighted mean is the zero vector
            None => {}
        }
        out.push(pooled);
    }
    Ok(out)
}

/// Pools `frames` to exactly `target` vectors. When there are fewer frames
/// than targets each frame is repeated (counts differ by at most one,
/// earlier frames first) so every anchor is a single projected frame.
pub fn pool_to(frames: &[Vec<f64>], target: usize) -> Result<Vec<Vec<f64>>> {
    if frames.len() >= target {
        return l2_pool(frames, target);
    }
    let expanded: Vec<Vec<f64>> = frames
        .iter()
        .zip(bin_sizes(target, frames.len()))
        .flat_map(|(f, count)| std::iter::repeat_n(f.clone(), count))
        .collect();
    l2_pool(&expanded, target)
}

/// Projected frames of every cited segment of `modality`, concatenated in
/// citation order.
fn cited_frames(
    refs: &[SegmentRef],
    modality: Modality,
    episode: &Episode,
    bank: &EncoderBank,
    model: &ModelState,
) -> Result<Vec<Vec<f64>>> {
    let features = bank.features(episode, modality)?;
    let projected = model.project(modality, &features)?;
    let frames = episode.visual.len();
    let mut out = Vec::new();
    for r in refs.iter().filter(|r| r.modality == modality) {
        let idx = r.frame_indices(frames, episode.config.frame_rate);
        if idx.is_empty() {
            return Err(Error::Data(format!("segment {} covers no frames", r.id)));
        }
        out.extend(idx.into_iter().map(|i| projected.row_slice(i).to_vec()));
    }
    Ok(out)
}

/// Anchor targets for one latent phase, in the model's input space.
///
/// The anchors are plain values: they are recomputed from the current
/// projection whenever this is called but carry no gradient.
pub fn build_anchor_sequence(
    refs: &[SegmentRef],
    episode: &Episode,
    bank: &EncoderBank,
    model: &ModelState,
    budget: LatentBudget,
) -> Result<AnchorSequence> {
    let mut anchors = Vec::with_capacity(budget.total);
    for (modality, count) in [(Modality::Visual, budget.visual), (Modality::Audio, budget.audio)] {
        if count == 0 {
            continue;
        }
        let frames = cited_frames(refs, modality, episode, bank, model)?;
        if frames.is_empty() {
            return Err(Error::Data(format!(
                "{count} {modality:?} anchors requested but no {modality:?} segment cited"
            )));
        }
        anchors.extend(pool_to(&frames, count)?);
    }
    Ok(AnchorSequence {
        anchors,
        visual: budget.visual,
        audio: budget.audio,
        source: refs.to_vec(),
    })
}

/// Stacks anchors into a `[K×d]` tensor.
pub fn anchor_tensor(seq: &AnchorSequence) -> Result<Tensor> {
    Tensor::from_rows(&seq.anchors)
}
