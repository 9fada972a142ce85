//! Synthetic audio-visual event world.
//!
//! Each episode pairs a visual symbol stream with an independent audio
//! symbol stream. The question names a visual symbol `X` that occurs exactly
//! once, at `t*`; the answer is the audio symbol at `t*`. Neither stream
//! alone determines the answer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{Modality, SegmentRef};
use crate::error::{Error, Result};
use crate::interleave::{HybridElement, HybridSequence, LatentBudget, Prompt};
use crate::tensor::Tensor;
use crate::vocab::{self, Vocab};

/// Prompt frame cap per episode.
pub const MAX_FRAMES: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub timesteps: usize,
    pub visual_alphabet: u32,
    pub audio_alphabet: u32,
    pub noise_sigma: f64,
    pub frame_rate: f64,
    pub feature_dim_visual: usize,
    pub feature_dim_audio: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            timesteps: 24,
            visual_alphabet: 8,
            audio_alphabet: 8,
            noise_sigma: 0.05,
            frame_rate: 1.0,
            feature_dim_visual: 16,
            feature_dim_audio: 16,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.timesteps > MAX_FRAMES {
            return Err(Error::Contract(format!(
                "timesteps must lie in 1..={MAX_FRAMES}, got {}",
                self.timesteps
            )));
        }
        if self.visual_alphabet < 2 || self.audio_alphabet < 2 {
            return Err(Error::Contract("alphabets need at least two symbols".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.frame_rate > 0.0) {
            return Err(Error::Contract("noise sigma must be >= 0 and frame rate > 0".into()));
        }
        if self.feature_dim_visual == 0 || self.feature_dim_audio == 0 {
            return Err(Error::Contract("feature dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.visual_alphabet, self.audio_alphabet)
    }

    pub fn duration(&self) -> f64 {
        self.timesteps as f64 / self.frame_rate
    }
}

/// One step of an episode's reasoning trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStep {
    Text(u32),
    /// Trigger, one budget of latent states, stop.
    LatentPhase,
    Answer(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub config: WorldConfig,
    pub index: u64,
    pub seed: u64,
    pub visual: Vec<u32>,
    pub audio: Vec<u32>,
    pub query: u32,
    pub t_star: usize,
    pub answer: u32,
    pub question: Vec<u32>,
    pub trajectory: Vec<TrajectoryStep>,
    pub segments: Vec<SegmentRef>,
}

impl Episode {
    /// Answer as a vocabulary token.
    pub fn answer_token(&self) -> u32 {
        self.config.vocab().audio_symbol(self.answer)
    }

    pub fn check(&self) -> Result<()> {
        let t = self.config.timesteps;
        let bad = |m: &str| Err(Error::Data(format!("episode {}: {m}", self.index)));
        if self.visual.len() != t || self.audio.len() != t {
            return bad("stream length differs from the configured timesteps");
        }
        if self.visual.iter().any(|&s| s >= self.config.visual_alphabet)
            || self.audio.iter().any(|&s| s >= self.config.audio_alphabet)
        {
            return bad("symbol outside its alphabet");
        }
        if self.visual.iter().filter(|&&s| s == self.query).count() != 1 {
            return bad("query symbol must occur exactly once");
        }
        if self.visual.get(self.t_star) != Some(&self.query) || self.audio[self.t_star] != self.answer {
            return bad("query position or answer disagrees with the streams");
        }
        Ok(())
    }

    /// Frame features of both streams.
    pub fn prompt(&self, bank: &EncoderBank) -> Result<Prompt> {
        let rows = |m| -> Result<Vec<Vec<f64>>> {
            Ok(bank.features(self, m)?.rows().map(<[f64]>::to_vec).collect())
        };
        Ok(Prompt {
            visual: rows(Modality::Visual)?,
            audio: rows(Modality::Audio)?,
            question: self.question.clone(),
        })
    }

    /// Generated region of the trajectory, with zero vectors of width `dim`
    /// standing in for latent states.
    pub fn generated(&self, budget: LatentBudget, dim: usize) -> (Vec<HybridElement>, Option<usize>) {
        let mut out = Vec::new();
        let mut answer = None;
        for step in &self.trajectory {
            match *step {
                TrajectoryStep::Text(t) => out.push(HybridElement::Text(t)),
                TrajectoryStep::Answer(t) => {
                    answer = Some(out.len());
                    out.push(HybridElement::Text(t));
                }
                TrajectoryStep::LatentPhase => {
                    out.push(HybridElement::Trigger);
                    out.extend((0..budget.total).map(|_| HybridElement::Latent(vec![0.0; dim])));
                    out.push(HybridElement::Stop);
                }
            }
        }
        (out, answer)
    }

    /// Whole trajectory as a hybrid sequence.
    pub fn sequence(&self, bank: &EncoderBank, budget: LatentBudget, dim: usize) -> Result<HybridSequence> {
        let (generated, answer) = self.generated(budget, dim);
        let mut seq = HybridSequence::new(self.prompt(bank)?, generated);
        seq.answer = answer;
        Ok(seq)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn episode_seed(world_seed: u64, index: u64) -> u64 {
    splitmix64(world_seed ^ splitmix64(index))
}

pub fn generate_episode(config: &WorldConfig, index: u64) -> Episode {
    let seed = episode_seed(config.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = config.timesteps;
    let query = rng.random_range(0..config.visual_alphabet);
    let t_star = rng.random_range(0..t);
    let visual: Vec<u32> = (0..t)
        .map(|i| {
            if i == t_star {
                query
            } else {
                // uniform over the alphabet without the query
                let s = rng.random_range(0..config.visual_alphabet - 1);
                s + u32::from(s >= query)
            }
        })
        .collect();
    let audio: Vec<u32> = (0..t).map(|_| rng.random_range(0..config.audio_alphabet)).collect();
    let answer = audio[t_star];
    let vocab = config.vocab();
    let x = vocab.visual_symbol(query);
    let trajectory = vec![
        TrajectoryStep::Text(vocab::FIND),
        TrajectoryStep::Text(x),
        TrajectoryStep::LatentPhase,
        TrajectoryStep::Text(vocab::ANSWER_MARK),
        TrajectoryStep::Answer(vocab.audio_symbol(answer)),
        TrajectoryStep::Text(vocab::END_OF_ANSWER),
    ];
    let centre = t_star as f64 / config.frame_rate;
    let (lo, hi) = ((centre - 1.0).max(0.0), (centre + 1.0).min(config.duration()));
    Episode {
        config: config.clone(),
        index,
        seed,
        visual,
        audio,
        query,
        t_star,
        answer,
        question: vec![vocab::WHICH_SOUND, x],
        trajectory,
        segments: vec![
            SegmentRef::new(Modality::Visual, lo, hi, 0),
            SegmentRef::new(Modality::Audio, lo, hi, 1),
        ],
    }
}

/// Episodes `start..start+count`, generated in parallel and returned in
/// index order.
pub fn generate_range(config: &WorldConfig, start: u64, count: usize) -> Result<Vec<Episode>> {
    config.validate()?;
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| generate_episode(config, start + i))
        .collect())
}

/// Frozen stand-in encoders: one random unit vector per symbol and
/// modality, plus per-frame Gaussian noise.
#[derive(Clone, Debug)]
pub struct EncoderBank {
    visual: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    sigma: f64,
}

fn unit_vectors(rng: &mut ChaCha8Rng, count: u32, dim: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

impl EncoderBank {
    pub fn new(config: &WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0xe4c0_de5b_a4c0_0001));
        Self {
            visual: unit_vectors(&mut rng, config.visual_alphabet, config.feature_dim_visual),
            audio: unit_vectors(&mut rng, config.audio_alphabet, config.feature_dim_audio),
            sigma: config.noise_sigma,
        }
    }

    pub fn base(&self, modality: Modality, symbol: u32) -> &[f64] {
        match modality {
            Modality::Visual => &self.visual[symbol as usize],
            Modality::Audio => &self.audio[symbol as usize],
        }
    }

    /// `[T×feature_dim]` frame features of one stream of `episode`.
    pub fn features(&self, episode: &Episode, modality: Modality) -> Result<Tensor> {
        let (stream, table, tag) = match modality {
            Modality::Visual => (&episode.visual, &self.visual, 1u64),
            Modality::Audio => (&episode.audio, &self.audio, 2u64),
        };
        let normal = Normal::new(0.0, self.sigma.max(0.0)).map_err(|e| Error::Contract(e.to_string()))?;
        let mut rows = Vec::with_capacity(stream.len());
        for (t, &s) in stream.iter().enumerate() {
            let base = table
                .get(s as usize)
                .ok_or_else(|| Error::Data(format!("symbol {s} has no encoder vector")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(episode.seed ^ splitmix64((t as u64) << 2 | tag)));
            rows.push(base.iter().map(|b| b + normal.sample(&mut rng)).collect());
        }
        Tensor::from_rows(&rows)
    }
}

/// Accuracy of guessing from the answer marginal alone.
pub fn blind_floor(config: &WorldConfig) -> f64 {
    1.0 / config.audio_alphabet as f64
}

/// Most frequent symbol of a stream, ties to the lowest id.
pub fn modal_symbol(stream: &[u32]) -> Option<u32> {
    let max = *stream.iter().max()?;
    let mut counts = vec![0usize; max as usize + 1];
    for &s in stream {
        counts[s as usize] += 1;
    }
    let best = counts.iter().copied().max()?;
    counts.iter().position(|&c| c == best).map(|i| i as u32)
}

/// Accuracy of answering with the modal audio symbol, the best strategy
/// that ignores the visual stream.
pub fn audio_only_oracle(episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Contract("audio-only oracle needs at least one episode".into()));
    }
    let hits = episodes
        .iter()
        .filter(|e| modal_symbol(&e.audio) == Some(e.answer))
        .count();
    Ok(hits as f64 / episodes.len() as f64)
}

pub fn write_dataset(episodes: &[Episode], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        let line = serde_json::to_string(ep).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset; every record must share the first record's config.
pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Episode> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let ep: Episode = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}: line {n}: {e}", path.display())))?;
        if let Some(first) = out.first() {
            if first.config != ep.config {
                return Err(Error::Data(format!(
                    "{}: line {n}: world config differs from line 1",
                    path.display()
                )));
            }
        }
        ep.config
            .validate()
            .and_then(|_| ep.check())
            .map_err(|e| Error::Data(format!("{}: line {n}: {e}", path.display())))?;
        out.push(ep);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no episodes", path.display())));
    }
    Ok(out)
}

/// [`read_dataset`] plus a check against an expected world config.
pub fn read_dataset_expecting(path: &Path, expected: &WorldConfig) -> Result<Vec<Episode>> {
    let eps = read_dataset(path)?;
    if &eps[0].config != expected {
        return Err(Error::Data(format!(
            "{}: world config does not match the expected one",
            path.display()
        )));
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::validate_grammar;

    #[test]
    fn deterministic_episodes() {
        let c = WorldConfig::default();
        assert_eq!(generate_episode(&c, 17), generate_episode(&c, 17));
        assert_ne!(generate_episode(&c, 17), generate_episode(&c, 18));
        let bank = EncoderBank::new(&c);
        let e = generate_episode(&c, 3);
        let a = bank.features(&e, Modality::Audio).unwrap();
        assert_eq!(a, EncoderBank::new(&c).features(&e, Modality::Audio).unwrap());
    }

    #[test]
    fn query_occurs_once_in_ten_thousand() {
        let c = WorldConfig::default();
        for ep in generate_range(&c, 0, 10_000).unwrap() {
            assert_eq!(ep.visual.iter().filter(|&&s| s == ep.query).count(), 1);
            ep.check().unwrap();
        }
    }

    #[test]
    fn trajectory_is_grammatical() {
        let c = WorldConfig::default();
        let bank = EncoderBank::new(&c);
        let budget = LatentBudget::default();
        let ep = generate_episode(&c, 5);
        let seq = ep.sequence(&bank, budget, 64).unwrap();
        validate_grammar(&seq, budget).unwrap();
        assert_eq!(seq.answer_token(), Some(ep.answer_token()));
        assert_eq!(seq.prompt.visual.len(), 24);
    }

    #[test]
    fn segments_are_clipped() {
        let c = WorldConfig::default();
        let eps = generate_range(&c, 0, 300).unwrap();
        let first = eps.iter().find(|e| e.t_star == 0).unwrap();
        assert_eq!((first.segments[0].t_start, first.segments[0].t_end), (0.0, 1.0));
        let mid = eps.iter().find(|e| e.t_star == 10).unwrap();
        assert_eq!((mid.segments[1].t_start, mid.segments[1].t_end), (9.0, 11.0));
    }

    #[test]
    fn blind_floor_values() {
        let mut c = WorldConfig::default();
        assert_eq!(blind_floor(&c), 0.125);
        c.audio_alphabet = 2;
        assert_eq!(blind_floor(&c), 0.5);
    }

    #[test]
    fn oracle_edge_cases() {
        let c = WorldConfig {
            timesteps: 1,
            ..WorldConfig::default()
        };
        let eps = generate_range(&c, 0, 50).unwrap();
        assert_eq!(audio_only_oracle(&eps).unwrap(), 1.0);

        let mut ep = generate_episode(&WorldConfig::default(), 0);
        ep.audio = vec![ep.answer; ep.audio.len()];
        assert_eq!(audio_only_oracle(&[ep]).unwrap(), 1.0);
        assert_eq!(modal_symbol(&[3, 1, 1, 3]), Some(1));
        assert!(audio_only_oracle(&[]).is_err());
    }

    #[test]
    fn oracle_below_one_on_default_world() {
        let eps = generate_range(&WorldConfig::default(), 0, 10_000).unwrap();
        let acc = audio_only_oracle(&eps).unwrap();
        assert!(acc > 0.125 && acc < 1.0, "{acc}");
    }

    #[test]
    fn cross_modal_necessity() {
        let c = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eps = generate_range(&c, 0, 10_000).unwrap();
        let changed = eps
            .iter()
            .filter(|e| {
                let fresh: Vec<u32> = (0..c.timesteps).map(|_| rng.random_range(0..c.audio_alphabet)).collect();
                fresh[e.t_star] != e.answer
            })
            .count();
        let rate = changed as f64 / eps.len() as f64;
        assert!((rate - 7.0 / 8.0).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn answers_are_uniform() {
        let c = WorldConfig::default();
        let eps = generate_range(&c, 0, 10_000).unwrap();
        let mut counts = [0f64; 8];
        for e in &eps {
            counts[e.answer as usize] += 1.0;
        }
        let (n, p): (f64, f64) = (10_000.0, 1.0 / 8.0);
        let sd = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c - n * p).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let c = WorldConfig::default();
        let eps = generate_range(&c, 0, 20).unwrap();
        write_dataset(&eps, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), eps);
        assert!(read_dataset_expecting(&path, &WorldConfig { seed: 1, ..c.clone() }).is_err());

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 20]).unwrap();
        match read_dataset(&path) {
            Err(Error::Data(m)) => assert!(m.contains("line 20"), "{m}"),
            other => panic!("{other:?}"),
        }

        let other = generate_range(&WorldConfig { seed: 9, ..c }, 0, 1).unwrap();
        let mut mixed = eps[..2].to_vec();
        mixed.extend(other);
        write_dataset(&mixed, &path).unwrap();
        match read_dataset(&path) {
            Err(Error::Data(m)) => assert!(m.contains("line 3"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
