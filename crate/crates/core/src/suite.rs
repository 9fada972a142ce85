//! Gradient and invariant checks behind the `gradcheck` command.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ModelConfig, ModelState, Session};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, DEFAULT_STEP};
use crate::interleave::LatentBudget;
use crate::ospe::{apply, rotate_rows, FrequencyBasis};
use crate::synthworld::{generate_episode, EncoderBank, Episode, WorldConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{objective_on_tape, LatentTiming, ObjectiveVars, TrainConfig};

/// Tolerance for gradients through composite model graphs.
pub const MODEL_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Losses,
    Backbone,
    Ospe,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(Suite::All),
            "losses" => Some(Suite::Losses),
            "backbone" => Some(Suite::Backbone),
            "ospe" => Some(Suite::Ospe),
            _ => None,
        }
    }
}

/// One checked property: the worst observed error against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} worst={:.3e} tol={:.0e} cases={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.cases
        )
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rotary invariants over `cases` random draws.
pub fn ospe_checks(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = FrequencyBasis::new(16, 10_000.0)?;
    let (mut ident, mut iso, mut shift, mut sync) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let h = rand_vec(&mut rng, 16, 2.0);
        let out = apply(&h, 0.0, &basis)?;
        ident = ident.max(out.iter().zip(&h).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let t = rng.random_range(-50.0..50.0);
        iso = iso.max((norm(&apply(&h, t, &basis)?) - norm(&h)).abs());

        let q = rand_vec(&mut rng, 16, 1.0);
        let (t1, t2, d) = (
            rng.random_range(0.0..30.0),
            rng.random_range(0.0..30.0),
            rng.random_range(-30.0..30.0),
        );
        let a = dot(&apply(&q, t1, &basis)?, &apply(&h, t2, &basis)?);
        let b = dot(&apply(&q, t1 + d, &basis)?, &apply(&h, t2 + d, &basis)?);
        shift = shift.max((a - b).abs());

        // a visual and an audio vector at the same timestamp both get the
        // block rotation built from t and the frequencies alone
        for v in [&q, &h] {
            let got = apply(v, t1, &basis)?;
            for (i, &theta) in basis.thetas().iter().enumerate() {
                let (c, s) = ((t1 * theta).cos(), (t1 * theta).sin());
                let (x, y) = (v[2 * i], v[2 * i + 1]);
                sync = sync.max((got[2 * i] - (c * x - s * y)).abs());
                sync = sync.max((got[2 * i + 1] - (s * x + c * y)).abs());
            }
        }
    }
    let mut checks = vec![
        Check {
            name: "ospe.identity_at_zero".into(),
            worst: ident,
            tolerance: 0.0,
            cases,
        },
        Check {
            name: "ospe.isometry".into(),
            worst: iso,
            tolerance: 1e-12,
            cases,
        },
        Check {
            name: "ospe.relative_shift".into(),
            worst: shift,
            tolerance: 1e-9,
            cases,
        },
        Check {
            name: "ospe.synchrony".into(),
            worst: sync,
            tolerance: 1e-12,
            cases,
        },
    ];
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = Tensor::new(vec![3, 16], rand_vec(&mut rng, 48, 1.0))?;
        let w = Tensor::new(vec![3, 16], rand_vec(&mut rng, 48, 1.0))?;
        let ts = rand_vec(&mut rng, 3, 20.0);
        let r = grad_check(
            |tape, v| {
                let y = rotate_rows(tape, v[0], &ts, &basis)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(y, wv)?;
                tape.sum(p)
            },
            &[x],
            DEFAULT_STEP,
        )?;
        worst = worst.max(r.max_rel_err);
    }
    checks.push(Check {
        name: "ospe.gradient".into(),
        worst,
        tolerance: 1e-6,
        cases: 5,
    });
    Ok(checks)
}

/// The 2-layer, dim-16 model and small world used by the model-level checks.
pub fn check_setup() -> Result<(ModelState, WorldConfig, TrainConfig)> {
    let world = WorldConfig {
        timesteps: 6,
        visual_alphabet: 4,
        audio_alphabet: 4,
        feature_dim_visual: 4,
        feature_dim_audio: 4,
        noise_sigma: 0.3,
        seed: 5,
        ..WorldConfig::default()
    };
    let model = ModelState::init(
        ModelConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            ff_dim: 32,
            vocab_size: world.vocab().min_size(),
            feature_dim_visual: 4,
            feature_dim_audio: 4,
            max_sequence: 64,
            init_std: 0.3,
            ..ModelConfig::default()
        },
        11,
    )?;
    let train = TrainConfig {
        budget: LatentBudget::new(4, 3, 1)?,
        latent_timing: LatentTiming::Segment,
        ..TrainConfig::default()
    };
    Ok((model, world, train))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Text,
    Latent,
    Sync,
    Total,
}

/// Finite-difference check of one loss term through the whole model, with
/// the parameters whose names start with one of `prefixes` perturbed (all
/// when empty).
pub fn model_term_check(
    model: &ModelState,
    episode: &Episode,
    bank: &EncoderBank,
    config: &TrainConfig,
    term: Term,
    prefixes: &[&str],
) -> Result<f64> {
    let params = model.parameters();
    let selected: Vec<usize> = (0..params.len())
        .filter(|&i| prefixes.is_empty() || prefixes.iter().any(|p| params[i].name.starts_with(p)))
        .collect();
    let inputs: Vec<Tensor> = selected.iter().map(|&i| params[i].value.clone()).collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut all = Vec::with_capacity(params.len());
        let mut next = 0;
        for (i, p) in params.iter().enumerate() {
            if selected.get(next) == Some(&i) {
                all.push(vars[next]);
                next += 1;
            } else {
                all.push(tape.constant(p.value.clone()));
            }
        }
        let o: ObjectiveVars = objective_on_tape(model, tape, &all, episode, bank, config)?;
        match term {
            Term::Text => Ok(o.text),
            Term::Latent => o.latent.ok_or_else(|| Error::Contract("episode has no latent phase".into())),
            Term::Sync => Ok(o.sync),
            Term::Total => Ok(o.total),
        }
    };
    Ok(grad_check(f, &inputs, DEFAULT_STEP)?.max_rel_err)
}

pub fn loss_checks() -> Result<Vec<Check>> {
    let (model, world, train) = check_setup()?;
    let bank = EncoderBank::new(&world);
    let ep = generate_episode(&world, 0);
    let terms = [
        ("losses.text_through_model", Term::Text, &[][..]),
        ("losses.latent_through_model", Term::Latent, &[][..]),
        ("losses.sync_through_model", Term::Sync, &["proj.", "sync."][..]),
        ("losses.total_through_model", Term::Total, &[][..]),
    ];
    terms
        .into_iter()
        .map(|(name, term, prefixes)| {
            Ok(Check {
                name: name.into(),
                worst: model_term_check(&model, &ep, &bank, &train, term, prefixes)?,
                tolerance: MODEL_TOL,
                cases: 1,
            })
        })
        .collect()
}

/// Gradient of a weighted reduction of hidden states and logits through the
/// OSPE-equipped model, plus causality and attention normalisation.
pub fn backbone_checks(seed: u64) -> Result<Vec<Check>> {
    let (model, _, _) = check_setup()?;
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 7;
    let ts: Vec<f64> = (0..n).map(|i| if i < 3 { i as f64 } else { (i - 3) as f64 * 0.5 + 2.0 }).collect();
    let x = Tensor::new(vec![n, cfg.dim], rand_vec(&mut rng, n * cfg.dim, 1.0))?;
    let wh = Tensor::new(vec![n, cfg.dim], rand_vec(&mut rng, n * cfg.dim, 1.0))?;
    let wl = Tensor::new(vec![n, cfg.vocab_size], rand_vec(&mut rng, n * cfg.vocab_size, 1.0))?;

    let mut inputs = vec![x.clone()];
    inputs.extend(model.parameters().iter().map(|p| p.value.clone()));
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut s = Session::with_tape(&model, std::mem::take(tape), vars[1..].to_vec())?;
        let out = s.feed(vars[0], &ts);
        let r = out.and_then(|c| {
            let t = s.tape_mut();
            let a = t.constant(wh.clone());
            let b = t.constant(wl.clone());
            let ph = t.mul(c.hidden, a)?;
            let pl = t.mul(c.logits, b)?;
            let sh = t.sum(ph)?;
            let sl = t.sum(pl)?;
            t.add(sh, sl)
        });
        *tape = s.into_tape();
        r
    };
    let grad = grad_check(f, &inputs, DEFAULT_STEP)?.max_rel_err;

    // causality and normalisation on a direct forward
    let run = |x: &Tensor| -> Result<(Tensor, Vec<Tensor>)> {
        let mut s = Session::new(&model, false)?;
        let xv = s.tape_mut().constant(x.clone());
        let c = s.feed(xv, &ts)?;
        let att = c.attention.iter().flatten().map(|&a| s.tape().value(a).clone()).collect();
        Ok((s.tape().value(c.hidden).clone(), att))
    };
    let (h0, att) = run(&x)?;
    let mut row_err = 0.0f64;
    let mut future = 0.0f64;
    for a in &att {
        for (r, row) in a.rows().enumerate() {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
            future = future.max(row[r + 1..].iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    let mut prefix = 0.0f64;
    for j in 0..n {
        let mut x2 = x.clone();
        x2.data_mut()[j * cfg.dim..(j + 1) * cfg.dim].iter_mut().for_each(|v| *v += 1.0);
        let (h1, _) = run(&x2)?;
        for r in 0..j {
            let d = h0.row_slice(r).iter().zip(h1.row_slice(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prefix = prefix.max(d);
        }
    }
    Ok(vec![
        Check {
            name: "backbone.gradient".into(),
            worst: grad,
            tolerance: MODEL_TOL,
            cases: 1,
        },
        Check {
            name: "backbone.attention_rows_sum_to_one".into(),
            worst: row_err,
            tolerance: 1e-12,
            cases: att.len() * n,
        },
        Check {
            name: "backbone.no_future_mass".into(),
            worst: future,
            tolerance: 0.0,
            cases: att.len() * n,
        },
        Check {
            name: "backbone.prefix_unchanged".into(),
            worst: prefix,
            tolerance: 0.0,
            cases: n,
        },
    ])
}

pub fn run_suite(suite: Suite) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Ospe) {
        out.extend(ospe_checks(1000, 1)?);
    }
    if matches!(suite, Suite::All | Suite::Backbone) {
        out.extend(backbone_checks(2)?);
    }
    if matches!(suite, Suite::All | Suite::Losses) {
        out.extend(loss_checks()?);
    }
    Ok(out)
}
