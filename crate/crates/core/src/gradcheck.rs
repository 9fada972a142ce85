//! Central finite-difference verification of tape gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input index and flat element index where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub elements: usize,
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        let (r, c) = tape.shape(out);
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got [{r}x{c}]"
        )));
    }
    Ok(tape.value(out).item())
}

/// Compares tape gradients of the scalar function `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h` at every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        let (r, c) = tape.shape(out);
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got [{r}x{c}]"
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(v)).collect();
    drop(tape);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();

    let numeric: Vec<f64> = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut shifted = inputs.to_vec();
            let x = inputs[i].data()[j];
            shifted[i].data_mut()[j] = x + step;
            let plus = evaluate(&f, &shifted)?;
            shifted[i].data_mut()[j] = x - step;
            let minus = evaluate(&f, &shifted)?;
            Ok((plus - minus) / (2.0 * step))
        })
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        elements: coords.len(),
    };
    for (&(i, j), &n) in coords.iter().zip(&numeric) {
        let a = analytic[i].data()[j];
        if a.is_nan() || n.is_nan() {
            return Err(Error::Numeric(format!(
                "NaN gradient at input {i} element {j} (analytic {a}, numeric {n})"
            )));
        }
        let e = relative_error(a, n);
        if e > report.max_rel_err {
            report = GradCheckReport {
                max_rel_err: e,
                worst: (i, j),
                analytic: a,
                numeric: n,
                ..report
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::row(vec![1.0, 2.0, 3.0]);
        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        };
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = f(&mut tape, &[xv]).unwrap();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[2.0, 4.0, 6.0]);
        let r = grad_check(f, &[x], DEFAULT_STEP).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::row(vec![0.5, -1.25, 8.0, 3.0]);
        let r = grad_check(|t, v| t.sum(v[0]), &[x], DEFAULT_STEP).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_step() {
        let x = Tensor::row(vec![1.0, 2.0]);
        assert!(matches!(
            grad_check(|_, v| Ok(v[0]), std::slice::from_ref(&x), DEFAULT_STEP),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            grad_check(|t, v| t.sum(v[0]), &[x], 0.0),
            Err(Error::Contract(_))
        ));
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

    /// Every differentiable primitive, reduced to a scalar through a fixed
    /// random weighting so that each output element gets a distinct cotangent.
    #[test]
    fn every_primitive_at_five_random_points() {
        let cases: Vec<(&str, Vec<(usize, usize)>, OpFn)> = vec![
            ("matmul", vec![(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1])),
            ("add", vec![(3, 4), (3, 4)], |t, v| t.add(v[0], v[1])),
            ("sub", vec![(3, 4), (3, 4)], |t, v| t.sub(v[0], v[1])),
            ("mul", vec![(3, 4), (3, 4)], |t, v| t.mul(v[0], v[1])),
            ("add_row", vec![(3, 4), (1, 4)], |t, v| t.add_row(v[0], v[1])),
            ("scale", vec![(3, 4)], |t, v| t.scale(v[0], -1.7)),
            ("mul_scalar", vec![(3, 4), (1, 1)], |t, v| t.mul_scalar(v[0], v[1])),
            ("exp", vec![(3, 4)], |t, v| t.exp(v[0])),
            ("clamp", vec![(3, 4)], |t, v| t.clamp(v[0], -5.0, 5.0)),
            ("concat_rows", vec![(2, 4), (3, 4)], |t, v| t.concat_rows(&[v[0], v[1]])),
            ("concat_cols", vec![(3, 2), (3, 3)], |t, v| t.concat_cols(&[v[0], v[1]])),
            ("slice_rows", vec![(5, 3)], |t, v| t.slice_rows(v[0], 1, 4)),
            ("slice_cols", vec![(3, 5)], |t, v| t.slice_cols(v[0], 2, 5)),
            ("transpose", vec![(3, 4)], |t, v| t.transpose(v[0])),
            ("softmax_rows", vec![(3, 4)], |t, v| t.softmax_rows(v[0])),
            ("causal_softmax", vec![(3, 5)], |t, v| {
                let m = t.causal_mask(v[0], 2)?;
                t.softmax_rows(m)
            }),
            ("layer_norm", vec![(3, 4), (1, 4), (1, 4)], |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
            ("gelu", vec![(3, 4)], |t, v| t.gelu(v[0])),
            ("gather_rows", vec![(4, 3)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
            ("cross_entropy", vec![(4, 5)], |t, v| {
                t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
            }),
            ("row_norms", vec![(3, 4)], |t, v| t.row_norms(v[0])),
            ("normalize_rows", vec![(3, 4)], |t, v| t.normalize_rows(v[0])),
            ("cosine_similarity", vec![(3, 4), (2, 4)], |t, v| {
                t.cosine_similarity(v[0], v[1])
            }),
            ("mean", vec![(3, 4)], |t, v| t.mean(v[0])),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, shapes, op) in cases {
            for trial in 0..5 {
                let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
                // Probe output shape once to build the weighting.
                let mut probe = Tape::new();
                let pv: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
                let o = op(&mut probe, &pv).unwrap();
                let (r, c) = probe.shape(o);
                let w = random(&mut rng, r, c);
                let f = |t: &mut Tape, v: &[Var]| {
                    let y = op(t, v)?;
                    let wv = t.constant(w.clone());
                    let p = t.mul(y, wv)?;
                    t.sum(p)
                };
                let rep = grad_check(f, &inputs, DEFAULT_STEP).unwrap();
                assert!(
                    rep.max_rel_err <= 1e-6,
                    "{name} trial {trial}: {rep:?}"
                );
            }
        }
    }
}
