//! Finite-difference verification of every differentiable tensor operation.
//!
//! Each op is composed with a fixed random readout into a scalar, then the
//! reverse-mode gradient is compared against central differences with
//! eps = 1e-5 at several random points. The bar is a relative error of 1e-4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfda_core::numkit::{batchnorm_eval, batchnorm_train, check_gradients, Tensor};
use sfda_core::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 5;

fn rng_for(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15 ^ tag)
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random values in [-2, 2] nudged away from zero so relu kinks are never
/// sampled within the FD step.
fn random_off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() < 1e-3 {
                v += if v >= 0.0 { 1e-3 } else { -1e-3 };
            }
            v
        })
        .collect()
}

/// Fixed random projection turning `out` into a scalar with informative
/// upstream gradients.
fn readout(out: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let w = Tensor::new(out.shape(), weights.to_vec())?;
    out.mul(&w)?.sum()
}

fn assert_grads<F>(tag: u64, inputs: &[(Vec<usize>, Vec<f64>)], f: F)
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let check = check_gradients(&f, inputs, EPS).expect("gradient check must evaluate");
    assert!(
        check.rel_err <= TOL,
        "op tag {tag}: rel err {} exceeds {TOL}",
        check.rel_err
    );
}

#[test]
fn add_same_shape() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x10 + i as u64);
        let a = random_values(&mut rng, 6, -2.0, 2.0);
        let b = random_values(&mut rng, 6, -2.0, 2.0);
        let w = random_values(&mut rng, 6, -2.0, 2.0);
        assert_grads(1, &[(vec![2, 3], a), (vec![2, 3], b)], |t| {
            readout(&t[0].add(&t[1])?, &w)
        });
    }
}

#[test]
fn add_row_broadcast() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x20 + i as u64);
        let a = random_values(&mut rng, 12, -2.0, 2.0);
        let b = random_values(&mut rng, 4, -2.0, 2.0);
        let w = random_values(&mut rng, 12, -2.0, 2.0);
        assert_grads(2, &[(vec![3, 4], a), (vec![4], b)], |t| {
            readout(&t[0].add(&t[1])?, &w)
        });
    }
}

#[test]
fn sub_and_mul() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x30 + i as u64);
        let a = random_values(&mut rng, 8, -2.0, 2.0);
        let b = random_values(&mut rng, 8, -2.0, 2.0);
        let w = random_values(&mut rng, 8, -2.0, 2.0);
        assert_grads(3, &[(vec![2, 4], a.clone()), (vec![2, 4], b.clone())], |t| {
            readout(&t[0].sub(&t[1])?, &w)
        });
        assert_grads(4, &[(vec![2, 4], a), (vec![2, 4], b)], |t| {
            readout(&t[0].mul(&t[1])?, &w)
        });
    }
}

#[test]
fn scale_by_constant() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x40 + i as u64);
        let a = random_values(&mut rng, 5, -2.0, 2.0);
        let w = random_values(&mut rng, 5, -2.0, 2.0);
        let c: f64 = rng.gen_range(-3.0..3.0);
        assert_grads(5, &[(vec![5], a)], |t| readout(&t[0].scale(c)?, &w));
    }
}

#[test]
fn matmul_both_sides() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x50 + i as u64);
        let a = random_values(&mut rng, 6, -2.0, 2.0);
        let b = random_values(&mut rng, 12, -2.0, 2.0);
        let w = random_values(&mut rng, 8, -2.0, 2.0);
        assert_grads(6, &[(vec![2, 3], a), (vec![3, 4], b)], |t| {
            readout(&t[0].matmul(&t[1])?, &w)
        });
    }
}

#[test]
fn transpose_passthrough() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x60 + i as u64);
        let a = random_values(&mut rng, 6, -2.0, 2.0);
        let w = random_values(&mut rng, 6, -2.0, 2.0);
        assert_grads(7, &[(vec![2, 3], a)], |t| readout(&t[0].transpose()?, &w));
    }
}

#[test]
fn relu_away_from_kink() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x70 + i as u64);
        let a = random_off_kink(&mut rng, 9);
        let w = random_values(&mut rng, 9, -2.0, 2.0);
        assert_grads(8, &[(vec![3, 3], a)], |t| readout(&t[0].relu()?, &w));
    }
}

#[test]
fn exp_log_square() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x80 + i as u64);
        let a = random_values(&mut rng, 6, -2.0, 2.0);
        let pos = random_values(&mut rng, 6, 0.05, 2.0);
        let w = random_values(&mut rng, 6, -2.0, 2.0);
        assert_grads(9, &[(vec![6], a.clone())], |t| readout(&t[0].exp()?, &w));
        assert_grads(10, &[(vec![6], pos)], |t| readout(&t[0].log()?, &w));
        assert_grads(11, &[(vec![6], a)], |t| readout(&t[0].square()?, &w));
    }
}

#[test]
fn softmax_rows() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0x90 + i as u64);
        let a = random_values(&mut rng, 12, -2.0, 2.0);
        let w = random_values(&mut rng, 12, -2.0, 2.0);
        assert_grads(12, &[(vec![3, 4], a)], |t| readout(&t[0].softmax()?, &w));
    }
}

#[test]
fn reductions() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0xa0 + i as u64);
        let a = random_values(&mut rng, 12, -2.0, 2.0);
        let c: f64 = rng.gen_range(0.5..2.0);
        assert_grads(13, &[(vec![3, 4], a.clone())], |t| t[0].sum()?.scale(c));
        assert_grads(14, &[(vec![3, 4], a.clone())], |t| t[0].mean()?.scale(c));
        let w0 = random_values(&mut rng, 4, -2.0, 2.0);
        let w1 = random_values(&mut rng, 3, -2.0, 2.0);
        assert_grads(15, &[(vec![3, 4], a.clone())], |t| {
            readout(&t[0].sum_axis(0)?, &w0)
        });
        assert_grads(16, &[(vec![3, 4], a)], |t| readout(&t[0].sum_axis(1)?, &w1));
    }
}

#[test]
fn l2_normalize_rows() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0xb0 + i as u64);
        // keep rows comfortably away from the zero-norm floor
        let a: Vec<f64> = (0..8)
            .map(|_| {
                let v: f64 = rng.gen_range(-2.0..2.0);
                if v.abs() < 0.2 {
                    v + 0.3
                } else {
                    v
                }
            })
            .collect();
        let w = random_values(&mut rng, 8, -2.0, 2.0);
        assert_grads(17, &[(vec![2, 4], a)], |t| {
            readout(&t[0].l2_normalize_rows()?, &w)
        });
    }
}

#[test]
fn concat_interleave_gather() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0xc0 + i as u64);
        let a = random_values(&mut rng, 6, -2.0, 2.0);
        let b = random_values(&mut rng, 4, -2.0, 2.0);
        let w = random_values(&mut rng, 10, -2.0, 2.0);
        assert_grads(18, &[(vec![3, 2], a.clone()), (vec![2, 2], b.clone())], |t| {
            readout(&Tensor::concat(&[t[0].clone(), t[1].clone()])?, &w)
        });

        let c = random_values(&mut rng, 6, -2.0, 2.0);
        let d = random_values(&mut rng, 6, -2.0, 2.0);
        let w2 = random_values(&mut rng, 12, -2.0, 2.0);
        assert_grads(19, &[(vec![3, 2], c.clone()), (vec![3, 2], d)], |t| {
            readout(&Tensor::interleave_rows(&t[0], &t[1])?, &w2)
        });

        let w3 = random_values(&mut rng, 8, -2.0, 2.0);
        assert_grads(20, &[(vec![3, 2], c)], |t| {
            readout(&t[0].gather_rows(&[2, 0, 2, 1])?, &w3)
        });
    }
}

#[test]
fn batchnorm_train_full_jacobian() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0xd0 + i as u64);
        let x = random_values(&mut rng, 15, -2.0, 2.0);
        let scale = random_values(&mut rng, 3, 0.5, 1.5);
        let shift = random_values(&mut rng, 3, -0.5, 0.5);
        let w = random_values(&mut rng, 15, -2.0, 2.0);
        assert_grads(
            21,
            &[(vec![5, 3], x), (vec![3], scale), (vec![3], shift)],
            |t| {
                let (y, _, _) = batchnorm_train(&t[0], &t[1], &t[2], 1e-5)?;
                readout(&y, &w)
            },
        );
    }
}

#[test]
fn batchnorm_eval_affine() {
    for i in 0..INSTANCES {
        let mut rng = rng_for(0xe0 + i as u64);
        let x = random_values(&mut rng, 8, -2.0, 2.0);
        let scale = random_values(&mut rng, 2, 0.5, 1.5);
        let shift = random_values(&mut rng, 2, -0.5, 0.5);
        let rm = random_values(&mut rng, 2, -0.5, 0.5);
        let rv = random_values(&mut rng, 2, 0.5, 1.5);
        let w = random_values(&mut rng, 8, -2.0, 2.0);
        assert_grads(22, &[(vec![4, 2], x), (vec![2], scale), (vec![2], shift)], |t| {
            readout(&batchnorm_eval(&t[0], &t[1], &t[2], &rm, &rv, 1e-5)?, &w)
        });
    }
}

#[test]
fn deep_composition_through_many_ops() {
    // a miniature network: matmul -> add bias -> relu -> matmul -> softmax,
    // exercising chained VJPs the way real training does
    for i in 0..INSTANCES {
        let mut rng = rng_for(0xf0 + i as u64);
        let x = random_off_kink(&mut rng, 8);
        let w1 = random_values(&mut rng, 12, -1.0, 1.0);
        let b1 = random_values(&mut rng, 3, -0.5, 0.5);
        let w2 = random_values(&mut rng, 6, -1.0, 1.0);
        let proj = random_values(&mut rng, 4, -2.0, 2.0);
        assert_grads(
            23,
            &[
                (vec![2, 4], x),
                (vec![4, 3], w1),
                (vec![3], b1),
                (vec![3, 2], w2),
            ],
            |t| {
                let h = t[0].matmul(&t[1])?.add(&t[2])?.relu()?;
                let out = h.matmul(&t[3])?.softmax()?;
                readout(&out, &proj)
            },
        );
    }
}
