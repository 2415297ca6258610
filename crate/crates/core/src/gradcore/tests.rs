use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::{check_flat, check_store};
use super::*;
use crate::error::{Error, Result};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn relu_sigmoid_softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

    let z = tape.constant(t(&[1], &[0.0])).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);

    let u = tape.constant(t(&[3], &[1.0, 1.0, 1.0])).unwrap();
    let sm = tape.softmax(u).unwrap();
    for &v in tape.value(sm).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
    let l = tape.sum(x, None).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[1.0; 6]);
}

#[test]
fn chain_rule_at_sigmoid_symmetry_point() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(t(&[1], &[0.0])).unwrap();
    let w = tape.param(t(&[1], &[1.0])).unwrap();
    let s = tape.sigmoid(z).unwrap();
    let y = tape.mul(s, w).unwrap();
    let l = tape.sum(y, None).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(&tape, w).data(), &[0.5]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
    let b = tape.param(t(&[2], &[3.0, 4.0])).unwrap();
    let l = tape.sum(a, None).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(b).is_none());
    assert_eq!(g.wrt(&tape, b).data(), &[0.0, 0.0]);
}

#[test]
fn stop_gradient_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[3.0, 4.0])).unwrap();
    let y = tape.param(t(&[2], &[5.0, -1.0])).unwrap();
    let sx = tape.stop_gradient(x).unwrap();
    assert_eq!(tape.value(sx).data(), &[3.0, 4.0]);
    let p = tape.mul(sx, y).unwrap();
    let l = tape.sum(p, None).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[0.0, 0.0]);
    assert_eq!(g.wrt(&tape, y).data(), &[3.0, 4.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = tape.constant(Tensor::zeros(vec![3, 2])).unwrap();
    assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
}

#[test]
fn non_finite_values_are_surfaced() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1], &[0.0])).unwrap();
    let err = tape.log(x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "log" }));
    let big = tape.constant(t(&[1], &[1000.0])).unwrap();
    assert!(tape.exp(big).is_err());
}

/// Builds one primitive application over the given leaves and reduces it to a
/// scalar with a fixed random projection so every output coordinate matters.
type Builder = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn reduce_with_weights(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = uniform::<f64>(&shape, 1.0, &mut rng);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p, None)
}

fn check_primitive(name: &str, shapes: &[&[usize]], positive: bool, build: Builder) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ name.len() as u64);
    for trial in 0..20 {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| {
                let mut x = uniform::<f64>(s, 1.0, &mut rng);
                if positive {
                    x = x.map(|v| v.abs() + 0.1);
                }
                x
            })
            .collect();
        let sizes: Vec<usize> = inputs.iter().map(|x| x.len()).collect();
        let flat: Vec<f64> = inputs.iter().flat_map(|x| x.data().to_vec()).collect();

        let eval = |x: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let mut leaves = Vec::new();
            let mut off = 0;
            for (s, n) in shapes.iter().zip(&sizes) {
                leaves.push(tape.param(Tensor::new(s.to_vec(), x[off..off + n].to_vec())?)?);
                off += n;
            }
            let y = build(&mut tape, &leaves)?;
            let l = reduce_with_weights(&mut tape, y, 7)?;
            let value = tape.value(l).item().unwrap();
            if !want_grad {
                return Ok((value, Vec::new()));
            }
            let g = tape.backward(l)?;
            let grad = leaves
                .iter()
                .flat_map(|&v| g.wrt(&tape, v).into_data())
                .collect();
            Ok((value, grad))
        };

        let (_, analytic) = eval(&flat, true).unwrap();
        let report = check_flat(name, &flat, &analytic, |x| Ok(eval(x, false)?.0)).unwrap();
        assert!(
            report.passed(),
            "{name} trial {trial}: {:?}",
            report.mismatches
        );
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    check_primitive("matmul", &[&[3, 4], &[4, 2]], false, |t, v| t.matmul(v[0], v[1]));
    check_primitive("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], false, |t, v| {
        t.matmul(v[0], v[1])
    });
    check_primitive("matmul_shared", &[&[2, 3, 4], &[4, 5]], false, |t, v| t.matmul(v[0], v[1]));
    check_primitive("add", &[&[3, 2], &[3, 2]], false, |t, v| t.add(v[0], v[1]));
    check_primitive("add_bias", &[&[3, 2], &[2]], false, |t, v| t.add(v[0], v[1]));
    check_primitive("sub", &[&[4], &[4]], false, |t, v| t.sub(v[0], v[1]));
    check_primitive("mul", &[&[2, 3], &[2, 3]], false, |t, v| t.mul(v[0], v[1]));
    check_primitive("scale", &[&[5]], false, |t, v| t.scale(v[0], -2.5));
    check_primitive("add_scalar", &[&[5]], false, |t, v| t.add_scalar(v[0], 0.3));
    check_primitive("relu", &[&[6]], false, |t, v| t.relu(v[0]));
    check_primitive("sigmoid", &[&[6]], false, |t, v| t.sigmoid(v[0]));
    check_primitive("exp", &[&[6]], false, |t, v| t.exp(v[0]));
    check_primitive("log", &[&[6]], true, |t, v| t.log(v[0]));
    check_primitive("sin", &[&[6]], false, |t, v| t.sin(v[0]));
    check_primitive("cos", &[&[6]], false, |t, v| t.cos(v[0]));
    check_primitive("sum_all", &[&[2, 3]], false, |t, v| t.sum(v[0], None));
    check_primitive("sum_axis", &[&[2, 3, 2]], false, |t, v| t.sum(v[0], Some(1)));
    check_primitive("mean_all", &[&[2, 3]], false, |t, v| t.mean(v[0], None));
    check_primitive("mean_axis", &[&[2, 3, 2]], false, |t, v| t.mean(v[0], Some(2)));
    check_primitive("softmax", &[&[3, 4]], false, |t, v| t.softmax(v[0]));
    check_primitive("concat", &[&[2, 3], &[2, 1]], false, |t, v| t.concat(&[v[0], v[1]], 1));
    check_primitive("slice", &[&[3, 4]], false, |t, v| t.slice(v[0], 1, 1, 3));
    check_primitive("reshape", &[&[2, 3]], false, |t, v| t.reshape(v[0], &[3, 2]));
    check_primitive("transpose", &[&[2, 3, 4]], false, |t, v| t.transpose(v[0]));
    check_primitive("gather", &[&[5]], false, |t, v| t.gather(v[0], vec![4, 0, 0, 2], &[2, 2]));
    check_primitive("softplus", &[&[6]], false, |t, v| t.softplus(v[0]));
    check_primitive("layer_norm", &[&[3, 4], &[4], &[4]], false, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn composite_matches_product_of_jacobians_2x2() {
    // y = relu(W x) with W = [[1, 2], [3, -4]], x = [1, 1]:
    // Wx = [3, -1] so relu passes the first row only; d(sum y)/dx = W[0,:] = [1, 2].
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, -4.0])).unwrap();
    let x = tape.param(t(&[2, 1], &[1.0, 1.0])).unwrap();
    let h = tape.matmul(w, x).unwrap();
    let y = tape.relu(h).unwrap();
    let l = tape.sum(y, None).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[1.0, 2.0]);
    // dL/dW = mask ⊗ x^T = [[1, 1], [0, 0]]
    assert_eq!(g.wrt(&tape, w).data(), &[1.0, 1.0, 0.0, 0.0]);

    // z = sigmoid(a * b), a = 2, b = 0: dz/da = sigmoid'(0) * b = 0, dz/db = 0.25 * 2 = 0.5
    let mut tape = Tape::<f64>::new();
    let a = tape.param(t(&[1], &[2.0])).unwrap();
    let b = tape.param(t(&[1], &[0.0])).unwrap();
    let p = tape.mul(a, b).unwrap();
    let z = tape.sigmoid(p).unwrap();
    let l = tape.sum(z, None).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(&tape, a).data(), &[0.0]);
    assert_eq!(g.wrt(&tape, b).data(), &[0.5]);
}

fn mlp_store(rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let dims = [4, 8, 8, 2];
    for (i, w) in dims.windows(2).enumerate() {
        store.add(format!("l{i}.w"), uniform(&[w[0], w[1]], 0.8, rng));
        store.add(format!("l{i}.b"), uniform(&[w[1]], 0.2, rng));
    }
    store
}

fn mlp_loss(store: &ParamStore<f64>, x: &Tensor<f64>, backward: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::new(store);
    let mut h = g.constant(x.clone())?;
    let layers = store.len() / 2;
    for i in 0..layers {
        let w = g.param(ParamId(2 * i))?;
        let b = g.param(ParamId(2 * i + 1))?;
        h = g.linear(h, w, b)?;
        h = if i + 1 < layers { g.relu(h)? } else { g.sigmoid(h)? };
    }
    let sq = g.square(h)?;
    let l = g.mean(sq, None)?;
    let value = g.value(l).item().unwrap();
    if !backward {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(l)?;
    Ok((value, g.param_grads(&grads)))
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let store = mlp_store(&mut rng);
        let x = uniform::<f64>(&[5, 4], 1.0, &mut rng);
        let (_, analytic) = mlp_loss(&store, &x, true).unwrap();
        let report = check_store(&store, &analytic, 1, |s| Ok(mlp_loss(s, &x, false)?.0)).unwrap();
        assert!(report.passed(), "{:?}", report.mismatches);
        assert_eq!(report.checked, 4 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2);
    }
}

#[test]
fn forward_and_backward_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = mlp_store(&mut rng);
        let x = uniform::<f64>(&[7, 4], 1.0, &mut rng);
        mlp_loss(&store, &x, true).unwrap()
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        let a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn f32_tape_runs_the_same_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = mlp_store(&mut rng).cast::<f32>();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_f64(vec![1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
    let w = g.param(ParamId(0)).unwrap();
    let b = g.param(ParamId(1)).unwrap();
    let y = g.linear(x, w, b).unwrap();
    let l = g.sum(y, None).unwrap();
    let grads = g.backward(l).unwrap();
    let gw = &g.param_grads(&grads)[0];
    assert_eq!(gw.shape(), &[4, 8]);
    assert!((gw.data()[0] - 0.1).abs() < 1e-7);
}

#[test]
fn softplus_and_bce_are_smooth_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t(&[2], &[0.0, 0.0])).unwrap();
    let sp = tape.softplus(x).unwrap();
    assert!((tape.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    let bce = tape.bce_with_logits(x, &t(&[2], &[1.0, 0.0])).unwrap();
    let loss = tape.sum(bce, None).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[-0.5, 0.5]);
}
