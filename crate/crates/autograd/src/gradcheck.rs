//! Central-difference gradient audits, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Tape, Var};

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
/// Share of coordinates that must agree within [`REL_TOL`].
pub const PASS_FRACTION: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Input {
    /// Uniform entries in `[-1, 1)`.
    pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Input {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Audit {
    pub coordinates: usize,
    /// Fraction of coordinates within tolerance.
    pub fraction: f64,
    pub worst: f64,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.fraction >= PASS_FRACTION
    }
}

/// `|a − n| / max(|a|, |n|)`, zero when both are below 1e-8.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let m = analytic.abs().max(numeric.abs());
    if m < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / m
    }
}

/// Builds `sum(f(inputs) * w)` with fixed random weights so every output
/// coordinate matters.
fn weighted_loss<F>(tape: &mut Tape<f64>, vars: &[Var], f: &F) -> Var
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let out = f(tape, vars);
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shape = tape.shape(out).to_vec();
    let wv = tape.constant(shape, w).expect("weights match output shape");
    let prod = tape.mul(out, wv).expect("weights match output shape");
    tape.sum(prod)
}

fn bind_inputs(tape: &mut Tape<f64>, inputs: &[Input]) -> Vec<Var> {
    inputs
        .iter()
        .map(|i| tape.variable(i.shape.clone(), i.data.clone()).expect("input shape matches data"))
        .collect()
}

/// Compares reverse-mode gradients of a weighted sum of `f`'s output with
/// central differences of step [`STEP`].
pub fn gradcheck<F>(inputs: Vec<Input>, f: F) -> Audit
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let vars = bind_inputs(&mut tape, &inputs);
    let loss = weighted_loss(&mut tape, &vars, &f);
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, i)| tape.grad(v).map_or(vec![0.0; i.data.len()], |g| g.to_vec()))
        .collect();
    let eval = |inputs: &[Input]| {
        let mut tape = Tape::<f64>::new();
        let vars = bind_inputs(&mut tape, inputs);
        let loss = weighted_loss(&mut tape, &vars, &f);
        tape.scalar(loss)
    };

    let mut inputs = inputs;
    let (mut total, mut ok, mut worst) = (0usize, 0usize, 0f64);
    for k in 0..inputs.len() {
        for c in 0..inputs[k].data.len() {
            let orig = inputs[k].data[c];
            inputs[k].data[c] = orig + STEP;
            let up = eval(&inputs);
            inputs[k].data[c] = orig - STEP;
            let down = eval(&inputs);
            inputs[k].data[c] = orig;
            let err = rel_error(analytic[k][c], (up - down) / (2.0 * STEP));
            worst = worst.max(err);
            total += 1;
            if err < REL_TOL {
                ok += 1;
            }
        }
    }
    Audit {
        coordinates: total,
        fraction: ok as f64 / total.max(1) as f64,
        worst,
    }
}

/// Audits every differentiable primitive on random tensors of at most 4×4.
/// `relu` and `log` are sampled away from their kink and pole.
pub fn primitive_audit() -> Vec<(&'static str, Audit)> {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut g = |shapes: &[&[usize]]| -> Vec<Input> { shapes.iter().map(|s| Input::random(&mut r, s)).collect() };
    let mut out = Vec::new();
    let mut push = |name, a| out.push((name, a));

    push("matmul", gradcheck(g(&[&[3, 4], &[4, 2]]), |t, v| t.matmul(v[0], v[1]).unwrap()));
    push("matmul_nt", gradcheck(g(&[&[3, 4], &[2, 4]]), |t, v| t.matmul_nt(v[0], v[1]).unwrap()));
    push("transpose", gradcheck(g(&[&[3, 4]]), |t, v| t.transpose(v[0]).unwrap()));
    push("add", gradcheck(g(&[&[3, 3], &[3, 3]]), |t, v| t.add(v[0], v[1]).unwrap()));
    push("sub", gradcheck(g(&[&[3, 3], &[3, 3]]), |t, v| t.sub(v[0], v[1]).unwrap()));
    push("mul", gradcheck(g(&[&[3, 3], &[3, 3]]), |t, v| t.mul(v[0], v[1]).unwrap()));
    push("mul_self", gradcheck(g(&[&[3, 3]]), |t, v| t.mul(v[0], v[0]).unwrap()));
    push("add_row", gradcheck(g(&[&[2, 4], &[4]]), |t, v| t.add_row(v[0], v[1]).unwrap()));
    push("add_col", gradcheck(g(&[&[2, 4], &[2]]), |t, v| t.add_col(v[0], v[1]).unwrap()));
    push("mul_scalar", gradcheck(g(&[&[2, 3], &[1]]), |t, v| t.mul_scalar(v[0], v[1]).unwrap()));
    push("scale", gradcheck(g(&[&[4, 4]]), |t, v| t.scale(v[0], 1.7)));
    push("add_scalar", gradcheck(g(&[&[4, 4]]), |t, v| t.add_scalar(v[0], 0.3)));
    push("exp", gradcheck(g(&[&[4, 4]]), |t, v| t.exp(v[0])));
    push("sigmoid", gradcheck(g(&[&[4, 4]]), |t, v| t.sigmoid(v[0])));
    push("gelu", gradcheck(g(&[&[4, 4]]), |t, v| t.gelu(v[0])));
    let mut pos = g(&[&[3, 3]]);
    pos[0].data.iter_mut().for_each(|x| *x = x.abs() + 0.5);
    push("log", gradcheck(pos, |t, v| t.log(v[0])));
    let mut away = g(&[&[4, 4]]);
    away[0].data.iter_mut().for_each(|x| *x += x.signum() * 0.05);
    push("relu", gradcheck(away, |t, v| t.relu(v[0])));
    push("gather_rows", gradcheck(g(&[&[4, 3]]), |t, v| t.gather_rows(v[0], &[3, 0, 3, 2]).unwrap()));
    push(
        "concat_cols",
        gradcheck(g(&[&[2, 3], &[2, 2]]), |t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap()),
    );
    push(
        "concat_rows",
        gradcheck(g(&[&[2, 3], &[1, 3]]), |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
    );
    push("slice_cols", gradcheck(g(&[&[3, 4]]), |t, v| t.slice_cols(v[0], 1, 2).unwrap()));
    push("slice_rows", gradcheck(g(&[&[4, 3]]), |t, v| t.slice_rows(v[0], 1, 2).unwrap()));
    push(
        "pick",
        gradcheck(g(&[&[3, 4]]), |t, v| t.pick(v[0], &[(0, 1), (2, 3), (0, 1)]).unwrap()),
    );
    push("band_gather", gradcheck(g(&[&[4, 3]]), |t, v| t.band_gather(v[0], 2).unwrap()));
    push("softmax_rows", gradcheck(g(&[&[3, 4]]), |t, v| t.softmax_rows(v[0])));
    let mask = vec![true, false, true, true, false, false, false, false, true, true, false, true];
    push(
        "masked_softmax_rows",
        gradcheck(g(&[&[3, 4]]), move |t, v| t.masked_softmax_rows(v[0], &mask).unwrap()),
    );
    push("log_softmax_rows", gradcheck(g(&[&[3, 4]]), |t, v| t.log_softmax_rows(v[0])));
    push(
        "layer_norm",
        gradcheck(g(&[&[3, 4], &[4], &[4]]), |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
    );
    push("sum", gradcheck(g(&[&[3, 4]]), |t, v| t.sum(v[0])));
    push("mean", gradcheck(g(&[&[3, 4]]), |t, v| t.mean(v[0])));
    push(
        "cross_entropy_from_logprobs",
        gradcheck(g(&[&[3, 4]]), |t, v| {
            let lp = t.log_softmax_rows(v[0]);
            t.cross_entropy_from_logprobs(lp, &[3, 0, 2]).unwrap()
        }),
    );
    out
}
