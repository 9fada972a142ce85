//! Omni-sync position embedding: a rotary transform keyed to physical
//! timestamps, so that a visual frame and the audio bin recorded in the same
//! window are rotated identically.
//!
//! For a feature `h` at time `t` the transform is
//! `h ⊙ cos(tΘ) + R(h) ⊙ sin(tΘ)`, where `R` maps each adjacent pair
//! `(h₁, h₂)` to `(−h₂, h₁)`.

use serde::{Deserialize, Serialize};

use crate::anchors::{Modality, SegmentRef};
use crate::error::{Error, Result};
use crate::interleave::{HybridElement, HybridSequence, LatentBudget};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Per-pair rotation frequencies `θ_i = base^(−2(i−1)/dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyBasis {
    dim: usize,
    base: f64,
    thetas: Vec<f64>,
}

impl FrequencyBasis {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Contract(format!("rotary dim must be even and positive, got {dim}")));
        }
        if !(base > 1.0) {
            return Err(Error::Contract(format!("rotary base must exceed 1, got {base}")));
        }
        let thetas = (0..dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / dim as f64))
            .collect();
        Ok(Self { dim, base, thetas })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }
}

/// Rotates `h` to timestamp `t`.
pub fn apply(h: &[f64], t: f64, basis: &FrequencyBasis) -> Result<Vec<f64>> {
    if h.len() != basis.dim {
        return Err(Error::shape("ospe::apply", &[h.len()], &[basis.dim]));
    }
    if !t.is_finite() {
        return Err(Error::Contract(format!("timestamp must be finite, got {t}")));
    }
    let mut out = vec![0.0; h.len()];
    for (i, &theta) in basis.thetas.iter().enumerate() {
        let (s, c) = (t * theta).sin_cos();
        let (a, b) = (h[2 * i], h[2 * i + 1]);
        out[2 * i] = a * c + (-b) * s;
        out[2 * i + 1] = b * c + a * s;
    }
    Ok(out)
}

/// Tape version of [`apply`] for a block of rows, one timestamp per row.
///
/// The row width may be any multiple of the basis dimension; the same
/// rotation is applied to every block (one block per attention head).
pub fn rotate_rows(tape: &mut Tape, x: Var, timestamps: &[f64], basis: &FrequencyBasis) -> Result<Var> {
    let (rows, width) = tape.shape(x);
    if rows != timestamps.len() || width % basis.dim != 0 {
        return Err(Error::shape("ospe::rotate_rows", &[rows, width], &[timestamps.len(), basis.dim]));
    }
    let mut cos = Vec::with_capacity(rows * width);
    let mut sin = Vec::with_capacity(rows * width);
    for &t in timestamps {
        for j in 0..width {
            let theta = basis.thetas[(j % basis.dim) / 2];
            let (s, c) = (t * theta).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    let mut pair_swap = Tensor::zeros(&[width, width]);
    {
        let d = pair_swap.data_mut();
        for i in 0..width / 2 {
            // (xR)[2i] = -x[2i+1], (xR)[2i+1] = x[2i]
            d[(2 * i + 1) * width + 2 * i] = -1.0;
            d[(2 * i) * width + 2 * i + 1] = 1.0;
        }
    }
    let cos = tape.constant(Tensor::new(vec![rows, width], cos)?);
    let sin = tape.constant(Tensor::new(vec![rows, width], sin)?);
    let r = tape.constant(pair_swap);
    let direct = tape.mul(x, cos)?;
    let swapped = tape.matmul(x, r)?;
    let turned = tape.mul(swapped, sin)?;
    tape.add(direct, turned)
}

/// What occupies a sequence position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    VisualPrompt,
    AudioPrompt,
    Text,
    Trigger,
    LatentVisual,
    LatentAudio,
    Stop,
}

impl Region {
    pub fn is_latent(self) -> bool {
        matches!(self, Region::LatentVisual | Region::LatentAudio)
    }

    pub fn is_av_prompt(self) -> bool {
        matches!(self, Region::VisualPrompt | Region::AudioPrompt)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Region::VisualPrompt => "visual-prompt",
            Region::AudioPrompt => "audio-prompt",
            Region::Text => "text",
            Region::Trigger => "trigger",
            Region::LatentVisual => "latent-visual",
            Region::LatentAudio => "latent-audio",
            Region::Stop => "stop",
        }
    }
}

/// Timestamp and region of every position of a hybrid sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositionPlan {
    pub timestamps: Vec<f64>,
    pub regions: Vec<Region>,
}

impl PositionPlan {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    fn push(&mut self, t: f64, region: Region) {
        self.timestamps.push(t);
        self.regions.push(region);
    }
}

/// Incremental timestamp assignment, shared by whole-sequence planning and
/// step-by-step decoding.
///
/// Text-like positions draw from a clock that starts one tick after the last
/// prompt timestamp. Latent positions take the midpoint of a cited segment
/// when segment references are available; without references they draw from
/// the text clock like any other generated position.
#[derive(Clone, Debug)]
pub struct TimestampClock {
    next_text: f64,
    visual_mids: Vec<f64>,
    audio_mids: Vec<f64>,
    budget: LatentBudget,
}

impl TimestampClock {
    /// `prompt_frames` is the number of visual frames (and matching audio
    /// bins) in the prompt.
    pub fn new(
        prompt_frames: usize,
        frame_rate: f64,
        refs: &[SegmentRef],
        budget: LatentBudget,
    ) -> Result<Self> {
        if !(frame_rate > 0.0) {
            return Err(Error::Contract(format!("frame rate must be positive, got {frame_rate}")));
        }
        let duration = prompt_frames as f64 / frame_rate;
        for r in refs {
            let valid = r.t_start.is_finite()
                && r.t_end.is_finite()
                && r.t_start >= 0.0
                && r.t_start < r.t_end
                && (prompt_frames == 0 || r.t_end <= duration);
            if !valid {
                return Err(Error::Data(format!(
                    "segment {} [{}, {}] does not resolve inside [0, {duration}]",
                    r.id, r.t_start, r.t_end
                )));
            }
        }
        let mids = |m: Modality| -> Vec<f64> {
            refs.iter().filter(|r| r.modality == m).map(SegmentRef::midpoint).collect()
        };
        let (visual_mids, audio_mids) = (mids(Modality::Visual), mids(Modality::Audio));
        if !refs.is_empty() {
            if budget.visual > 0 && visual_mids.is_empty() {
                return Err(Error::Data("visual latents allocated but no visual segment cited".into()));
            }
            if budget.audio > 0 && audio_mids.is_empty() {
                return Err(Error::Data("audio latents allocated but no audio segment cited".into()));
            }
        }
        let next_text = if prompt_frames == 0 {
            0.0
        } else {
            (prompt_frames - 1) as f64 / frame_rate + 1.0
        };
        Ok(Self {
            next_text,
            visual_mids,
            audio_mids,
            budget,
        })
    }

    pub fn text(&mut self) -> f64 {
        let t = self.next_text;
        self.next_text += 1.0;
        t
    }

    /// Timestamp and region of latent `k` (0-based) inside a phase.
    pub fn latent(&mut self, k: usize) -> (f64, Region) {
        let (region, mids, slot, span) = if k < self.budget.visual {
            (Region::LatentVisual, &self.visual_mids, k, self.budget.visual)
        } else {
            (Region::LatentAudio, &self.audio_mids, k - self.budget.visual, self.budget.audio)
        };
        if mids.is_empty() {
            return (self.text(), region);
        }
        let idx = slot * mids.len() / span.max(1);
        (mids[idx.min(mids.len() - 1)], region)
    }
}

/// Timestamp plan for a whole hybrid sequence.
pub fn assign_timestamps(
    seq: &HybridSequence,
    budget: LatentBudget,
    frame_rate: f64,
    refs: &[SegmentRef],
) -> Result<PositionPlan> {
    let frames = seq.prompt.visual.len().max(seq.prompt.audio.len());
    let mut clock = TimestampClock::new(frames, frame_rate, refs, budget)?;
    let mut plan = PositionPlan::default();
    for (m, i) in seq.prompt.layout() {
        let region = match m {
            Modality::Visual => Region::VisualPrompt,
            Modality::Audio => Region::AudioPrompt,
        };
        plan.push(i as f64 / frame_rate, region);
    }
    for _ in &seq.prompt.question {
        let t = clock.text();
        plan.push(t, Region::Text);
    }
    let mut in_phase = 0usize;
    for el in &seq.generated {
        match el {
            HybridElement::Text(_) => plan.push(clock.text(), Region::Text),
            HybridElement::Trigger => {
                in_phase = 0;
                plan.push(clock.text(), Region::Trigger);
            }
            HybridElement::Latent(_) => {
                let (t, region) = clock.latent(in_phase);
                in_phase += 1;
                plan.push(t, region);
            }
            HybridElement::Stop => plan.push(clock.text(), Region::Stop),
            HybridElement::Visual(_) | HybridElement::Audio(_) => {
                return Err(Error::Contract("modality features outside the prompt".into()))
            }
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::Prompt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn basis_closed_forms() {
        let b = FrequencyBasis::new(4, 10_000.0).unwrap();
        assert_eq!(b.thetas()[0], 1.0);
        assert!((b.thetas()[1] - 0.01).abs() < 1e-15);

        assert_eq!(FrequencyBasis::new(2, 3.0).unwrap().thetas(), &[1.0]);

        // exponents -2(i-1)/d: steps of 10^-1 at base 1e4, 10^-1/2 at base 100
        let b8 = FrequencyBasis::new(8, 10_000.0).unwrap();
        for (g, w) in b8.thetas().iter().zip([1.0, 0.1, 0.01, 0.001]) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
        let b8 = FrequencyBasis::new(8, 100.0).unwrap();
        let want = [1.0, 10f64.powf(-0.5), 0.1, 10f64.powf(-1.5)];
        for (g, w) in b8.thetas().iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{g} vs {w}");
        }
        assert!(b8.thetas().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn basis_rejects_odd_dim() {
        assert!(matches!(FrequencyBasis::new(5, 10_000.0), Err(Error::Contract(_))));
        assert!(FrequencyBasis::new(4, 1.0).is_err());
    }

    #[test]
    fn apply_examples() {
        let b = FrequencyBasis::new(2, 10_000.0).unwrap();
        let h = [0.3, -1.7];
        assert_eq!(apply(&h, 0.0, &b).unwrap(), h.to_vec());
        let q = apply(&[1.0, 0.0], FRAC_PI_2, &b).unwrap();
        assert!(q[0].abs() < 1e-16 && (q[1] - 1.0).abs() < 1e-16);
        assert!(matches!(apply(&[1.0, 2.0, 3.0, 4.0], 1.0, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn tape_rotation_matches_direct() {
        let basis = FrequencyBasis::new(4, 100.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ts = [0.0, 1.5, 7.25];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = rotate_rows(&mut tape, x, &ts, &basis).unwrap();
        let out = tape.value(y);
        for (i, row) in rows.iter().enumerate() {
            for head in 0..2 {
                let want = apply(&row[head * 4..head * 4 + 4], ts[i], &basis).unwrap();
                assert_eq!(&out.row_slice(i)[head * 4..head * 4 + 4], want.as_slice());
            }
        }
    }

    fn prompt(frames: usize, question: usize) -> Prompt {
        Prompt {
            visual: vec![vec![0.0; 2]; frames],
            audio: vec![vec![0.0; 2]; frames],
            question: vec![4; question],
        }
    }

    #[test]
    fn shared_prompt_timestamps() {
        let seq = HybridSequence::new(prompt(4, 0), vec![HybridElement::Text(9)]);
        let plan = assign_timestamps(&seq, LatentBudget::new(2, 1, 1).unwrap(), 1.0, &[]).unwrap();
        assert_eq!(&plan.timestamps[0..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&plan.timestamps[4..8], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(plan.timestamps[8], 4.0);
    }

    #[test]
    fn latent_midpoint_rule() {
        let budget = LatentBudget::new(4, 2, 2).unwrap();
        let mut gen = vec![HybridElement::Text(9), HybridElement::Trigger];
        gen.extend((0..4).map(|_| HybridElement::Latent(vec![0.0; 2])));
        gen.extend([HybridElement::Stop, HybridElement::Text(9)]);
        let seq = HybridSequence::new(prompt(6, 1), gen);
        let refs = [
            SegmentRef::new(Modality::Visual, 2.0, 4.0, 0),
            SegmentRef::new(Modality::Audio, 2.0, 4.0, 1),
        ];
        let plan = assign_timestamps(&seq, budget, 1.0, &refs).unwrap();
        let latents: Vec<f64> = plan
            .regions
            .iter()
            .zip(&plan.timestamps)
            .filter(|(r, _)| r.is_latent())
            .map(|(_, &t)| t)
            .collect();
        assert_eq!(latents, vec![3.0; 4]);
        // text clock: question at 6, then 7 (text), 8 (trigger), 9 (stop), 10
        let text: Vec<f64> = plan
            .regions
            .iter()
            .zip(&plan.timestamps)
            .filter(|(r, _)| !r.is_latent() && !r.is_av_prompt())
            .map(|(_, &t)| t)
            .collect();
        assert_eq!(text, vec![6.0, 7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn multiple_segments_spread_across_latents() {
        let budget = LatentBudget::new(6, 4, 2).unwrap();
        let refs = [
            SegmentRef::new(Modality::Visual, 0.0, 2.0, 0),
            SegmentRef::new(Modality::Visual, 4.0, 6.0, 1),
            SegmentRef::new(Modality::Audio, 2.0, 3.0, 2),
        ];
        let mut clock = TimestampClock::new(8, 1.0, &refs, budget).unwrap();
        let ts: Vec<f64> = (0..6).map(|k| clock.latent(k).0).collect();
        assert_eq!(ts, vec![1.0, 1.0, 5.0, 5.0, 2.5, 2.5]);
    }

    #[test]
    fn pure_text_gets_integer_clock() {
        let seq = HybridSequence::new(
            Prompt::default(),
            vec![HybridElement::Text(5), HybridElement::Text(6), HybridElement::Text(7)],
        );
        let plan = assign_timestamps(&seq, LatentBudget::default(), 1.0, &[]).unwrap();
        assert_eq!(plan.timestamps, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn unresolvable_segment_is_data_error() {
        let refs = [SegmentRef::new(Modality::Visual, 3.0, 9.0, 0)];
        assert!(matches!(
            TimestampClock::new(4, 1.0, &refs, LatentBudget::new(1, 1, 0).unwrap()),
            Err(Error::Data(_))
        ));
    }
}
