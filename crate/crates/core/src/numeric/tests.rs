use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    t(shape, &(0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f32>>())
}

/// Weighted sum of every output so the checked objective touches all of it.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(&random(&shape, seed ^ 0x5eed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn relu_forward() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&t(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[0.0, 2.0]);
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f32>::new();
    let i = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let y = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(y), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn mean_forward() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&t(&[4], &[1.0, 2.0, 3.0, 6.0]));
    let y = tape.mean(x);
    assert_eq!(tape.scalar(y), 3.0);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[4, 5]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    let c = tape.constant(&Tensor::zeros(&[3, 2]));
    let msg = tape.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn backward_square() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
    let y = tape.square(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
    assert!(tape.is_empty());
}

#[test]
fn backward_sum_relu() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&t(&[2], &[-1.0, 2.0]).with_grad());
    let r = tape.relu(x);
    let y = tape.sum(r);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn backward_softmax_cross_entropy() {
    // d/dz of −log softmax(z)_0 at z = 0 is softmax − onehot = [−0.5, 0.5].
    let mut tape = Tape::<f32>::new();
    let z = tape.leaf(&t(&[1, 2], &[0.0, 0.0]).with_grad());
    let lp = tape.log_softmax(z).unwrap();
    let picked = tape.select_cols(lp, &[0]).unwrap();
    let s = tape.sum(picked);
    let loss = tape.neg(s);
    let g = tape.backward(loss).unwrap();
    let g = g.get(z).unwrap();
    assert!((g[0] + 0.5).abs() < 1e-7 && (g[1] - 0.5).abs() < 1e-7);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
    let y = tape.square(x);
    assert!(matches!(tape.backward(y), Err(Error::Invalid(_))));
}

#[test]
fn backward_rejects_empty_tape() {
    let mut tape = Tape::<f32>::new();
    assert!(tape.backward(Var(0)).is_err());
}

#[cfg(debug_assertions)]
#[test]
fn non_finite_outputs_are_reported() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&t(&[1], &[0.0]).with_grad());
    let y = tape.log(x);
    let s = tape.sum(y);
    assert!(matches!(tape.check_finite(), Err(Error::NonFinite { op: "log" })));
    assert!(tape.backward(s).is_err());
}

#[test]
fn grad_check_polynomial() {
    let x = t(&[2], &[1.0, 2.0]);
    let err = grad_check(
        |tape, x| {
            let y = tape.mul(x, x)?;
            Ok(tape.sum(y))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_rejects_bad_eps_and_non_finite() {
    let x = t(&[1], &[1.0]);
    assert!(grad_check(|tape, x| Ok(tape.sum(x)), &x, 0.5).is_err());
    assert!(grad_check(|tape, x| Ok(tape.sum(x)), &x, 0.0).is_err());
    let neg = t(&[1], &[-1.0]);
    let res = grad_check(
        |tape, x| {
            let l = tape.log(x);
            Ok(tape.sum(l))
        },
        &neg,
        1e-4,
    );
    assert!(res.is_err());
}

fn check_unary(seed: u64, op: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    let x = random(&[3, 4], seed);
    let err = grad_check(
        |tape, x| {
            let y = op(tape, x)?;
            probe(tape, y, seed)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn grad_check_elementwise_family() {
    check_unary(1, |tape, x| Ok(tape.relu(x)));
    check_unary(2, |tape, x| Ok(tape.exp(x)));
    check_unary(3, |tape, x| {
        let s = tape.square(x);
        let s = tape.add_scalar(s, 0.5);
        Ok(tape.log(s))
    });
    check_unary(4, |tape, x| Ok(tape.square(x)));
    check_unary(5, |tape, x| {
        let s = tape.square(x);
        let s = tape.add_scalar(s, 0.1);
        Ok(tape.sqrt(s))
    });
    check_unary(6, |tape, x| Ok(tape.softplus(x)));
    check_unary(7, |tape, x| Ok(tape.neg(x)));
    check_unary(8, |tape, x| Ok(tape.scale(x, -2.5)));
}

#[test]
fn grad_check_binary_broadcast() {
    let other_shapes: [&[usize]; 4] = [&[3, 4], &[4], &[3, 1], &[1]];
    for (k, shape) in other_shapes.iter().enumerate() {
        let c = random(shape, 40 + k as u64);
        let c_pos: Vec<f32> = c.data().iter().map(|v| v.abs() + 0.5).collect();
        let c_pos = t(shape, &c_pos);
        check_unary(10 + k as u64, |tape, x| {
            let c = tape.constant(&c);
            tape.add(x, c)
        });
        check_unary(20 + k as u64, |tape, x| {
            let c = tape.constant(&c);
            tape.sub(c, x)
        });
        check_unary(30 + k as u64, |tape, x| {
            let c = tape.constant(&c);
            tape.mul(x, c)
        });
        check_unary(40 + k as u64, |tape, x| {
            let c = tape.constant(&c_pos);
            tape.div(x, c)
        });
    }
    // Gradient flowing into the broadcast operand.
    let x = random(&[4], 77);
    let big = random(&[3, 4], 78);
    let err = grad_check(
        |tape, x| {
            let b = tape.constant(&big);
            let q = tape.add_scalar(x, 3.0);
            let y = tape.div(b, q)?;
            probe(tape, y, 79)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_matmul_variants() {
    let other = random(&[4, 5], 90);
    let other_t = random(&[5, 4], 91);
    let left = random(&[2, 3], 92);
    check_unary(93, |tape, x| {
        let b = tape.constant(&other);
        tape.matmul(x, b)
    });
    check_unary(94, |tape, x| {
        let b = tape.constant(&other_t);
        tape.matmul_nt(x, b)
    });
    check_unary(95, |tape, x| {
        let a = tape.constant(&left);
        tape.matmul(a, x)
    });
    check_unary(96, |tape, x| {
        let a = tape.constant(&random(&[3, 2], 97));
        tape.matmul_tn(x, a)
    });
    check_unary(98, |tape, x| {
        let a = tape.constant(&random(&[3, 2], 99));
        tape.matmul_tn(a, x)
    });
    check_unary(100, |tape, x| {
        let a = tape.constant(&random(&[2, 4], 101));
        tape.matmul_nt(a, x)
    });
}

#[test]
fn grad_check_reductions_and_layout() {
    check_unary(110, |tape, x| Ok(tape.mean(x)));
    check_unary(111, |tape, x| tape.sum_axis(x, 0));
    check_unary(112, |tape, x| tape.sum_axis(x, 1));
    check_unary(113, |tape, x| tape.mean_axis(x, 1));
    check_unary(114, |tape, x| tape.reshape(x, &[2, 6]));
    check_unary(115, |tape, x| tape.slice_rows(x, 1, 2));
    check_unary(116, |tape, x| {
        let c = tape.constant(&random(&[2, 4], 117));
        tape.concat(&[c, x, x], 0)
    });
    check_unary(118, |tape, x| {
        let c = tape.constant(&random(&[3, 2], 119));
        tape.concat(&[x, c], 1)
    });
}

#[test]
fn grad_check_softmax_family() {
    check_unary(120, |tape, x| tape.softmax(x));
    check_unary(121, |tape, x| tape.log_softmax(x));
    check_unary(122, |tape, x| tape.select_cols(x, &[3, 0, 2]));
    check_unary(123, |tape, x| tape.l2_normalize_rows(x, 1e-8));
    check_unary(124, |tape, x| {
        let b = tape.constant(&random(&[5, 4], 125));
        tape.sq_dist(x, b)
    });
    check_unary(126, |tape, x| {
        let a = tape.constant(&random(&[2, 4], 127));
        tape.sq_dist(a, x)
    });
    check_unary(128, |tape, x| tape.sq_dist(x, x));
}

#[test]
fn grad_check_conv_pool_norm() {
    let w = random(&[3, 3, 2, 3], 130);
    let x = random(&[2, 5, 4, 2], 131);
    // Input gradient.
    let err = grad_check(
        |tape, x| {
            let w = tape.constant(&w);
            let y = tape.conv2d(x, w, 1)?;
            probe(tape, y, 132)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "conv input {err}");
    // Weight gradient, unpadded and 1×1.
    for (k, pad) in [(3usize, 0usize), (1, 0), (3, 1)] {
        let w = random(&[k, k, 2, 3], 133 + k as u64);
        let err = grad_check(
            |tape, w| {
                let xv = tape.constant(&x);
                let y = tape.conv2d(xv, w, pad)?;
                probe(tape, y, 134)
            },
            &w,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "conv weight k={k} {err}");
    }
    let err = grad_check(
        |tape, x| {
            let y = tape.maxpool2d(x)?;
            probe(tape, y, 135)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "maxpool {err}");
    let err = grad_check(
        |tape, x| {
            let (y, _, _) = tape.batch_norm(x, 1e-5)?;
            probe(tape, y, 136)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "batch_norm {err}");
}

#[test]
fn conv_shapes_and_values() {
    // 1×1 conv with identity weights copies channels.
    let mut tape = Tape::<f32>::new();
    let x = random(&[1, 3, 3, 2], 140);
    let xv = tape.constant(&x);
    let w = tape.constant(&t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.conv2d(xv, w, 0).unwrap();
    assert_eq!(tape.value(y), x.data());
    // 3×3 box filter over a constant image, no padding.
    let ones = tape.constant(&Tensor::full(&[1, 4, 4, 1], 1.0));
    let box3 = tape.constant(&Tensor::full(&[3, 3, 1, 1], 1.0));
    let y = tape.conv2d(ones, box3, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 2, 1]);
    assert!(tape.value(y).iter().all(|&v| v == 9.0));
    let y = tape.conv2d(ones, box3, 1).unwrap();
    assert_eq!(tape.value(y)[0], 4.0);
    let p = tape.maxpool2d(y).unwrap();
    assert_eq!(tape.shape(p), &[1, 2, 2, 1]);
}

#[test]
fn maxpool_floors_odd_sides() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&random(&[2, 21, 21, 3], 150));
    let y = tape.maxpool2d(x).unwrap();
    assert_eq!(tape.shape(y), &[2, 10, 10, 3]);
}

#[test]
fn batch_norm_statistics() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&t(&[4, 1], &[1.0, 2.0, 3.0, 6.0]));
    let (y, mean, var) = tape.batch_norm(x, 0.0).unwrap();
    assert_eq!(mean, vec![3.0]);
    assert_eq!(var, vec![3.5]);
    let m: f32 = tape.value(y).iter().sum::<f32>() / 4.0;
    assert!(m.abs() < 1e-6);
}

#[test]
fn l2_normalize_zero_row_is_finite() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&Tensor::zeros(&[1, 3]).with_grad());
    let y = tape.l2_normalize_rows(x, 1e-8).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(&Tensor::scalar(2.0).with_grad());
    let b = tape.leaf(&Tensor::scalar(5.0).with_grad());
    let y = tape.square(a);
    let g = tape.backward(y).unwrap();
    assert!(g.get(b).is_none());
    let mut target = Tensor::scalar(5.0);
    g.write_into(b, &mut target).unwrap();
    assert_eq!(target.grad().unwrap(), &[0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_op_passes_grad_check(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..5) {
        let x = random(&[rows, cols], seed);
        let err = grad_check(
            |tape, x| {
                let s = tape.softmax(x)?;
                let n = tape.l2_normalize_rows(x, 1e-8)?;
                let d = tape.sq_dist(n, x)?;
                let e = tape.exp(x);
                let m = tape.matmul_nt(e, s)?;
                let a = tape.add(m, d)?;
                let r = tape.relu(x);
                let lp = tape.log_softmax(a)?;
                let both = tape.concat(&[lp, r], 1)?;
                probe(tape, both, seed)
            },
            &x,
            1e-4,
        )
        .unwrap();
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), scale in 0.1f32..50.0) {
        let x = random(&[4, 6], seed);
        let x = t(&[4, 6], &x.data().iter().map(|v| v * scale).collect::<Vec<_>>());
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(&x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).chunks(6) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
