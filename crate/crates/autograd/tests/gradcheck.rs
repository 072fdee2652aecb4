//! Central-difference audit of every differentiable primitive, run in f64.

use microlm_autograd::gradcheck::{gradcheck, primitive_audit, Input};
use microlm_autograd::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_passes() {
    let results = primitive_audit();
    assert!(results.len() >= 30);
    for (name, a) in results {
        assert!(a.passed(), "{name}: only {:.3} of {} coordinates pass (worst {:e})", a.fraction, a.coordinates, a.worst);
    }
}

#[test]
fn audit_two_layer_mlp() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let ins = vec![
        Input::random(&mut r, &[4, 3]),
        Input::random(&mut r, &[3, 5]),
        Input::random(&mut r, &[5]),
        Input::random(&mut r, &[5, 2]),
    ];
    let a = gradcheck(ins, |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_row(h, v[2]).unwrap();
        let h = t.gelu(h);
        let o = t.matmul(h, v[3]).unwrap();
        let lp = t.log_softmax_rows(o);
        t.cross_entropy_from_logprobs(lp, &[0, 1, 1, 0]).unwrap()
    });
    assert!(a.passed(), "{a:?}");
}

#[test]
fn audit_detects_a_wrong_gradient() {
    // relu straddling its kink at a finite step disagrees on some coordinates
    let ins = vec![Input { shape: vec![3], data: vec![0.0005, -0.0002, 0.5] }];
    let a = gradcheck(ins, |t, v| t.relu(v[0]));
    assert!(!a.passed());
}

#[test]
fn fake_quantize_is_straight_through_inside_range() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(vec![4], vec![0.3, -0.2, 5.0, -5.0]).unwrap();
    // step 0.1, clamp at 7 steps = 0.7
    let q = tape.fake_quantize(x, 10.0, 4).unwrap();
    let s = tape.sum(q);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    let v = tape.value(q);
    assert!((v[0] - 0.3).abs() < 1e-12 && (v[2] - 0.7).abs() < 1e-12 && (v[3] + 0.7).abs() < 1e-12);
}

#[test]
fn dropout_gradient_follows_mask() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let d = tape.dropout(x, &[true, false, true, false], 0.5).unwrap();
    assert_eq!(tape.value(d), &[2.0, 0.0, 6.0, 0.0]);
    let s = tape.sum(d);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 0.0, 2.0, 0.0]);
}
