use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// width `2 * step` and returns the largest [`relative_error`] over all
/// coordinates. `f` receives a fresh tape and `x` recorded as a parameter
/// and must return a scalar node.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(point)?;
        let root = f(&mut tape, v)?;
        Ok(tape.value(root).data()[0])
    };
    let mut tape = Tape::new();
    let v = tape.param(x.clone())?;
    let root = f(&mut tape, v)?;
    let analytic = tape.backward(root)?.wrt(v);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{glorot_uniform, RowPick};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        glorot_uniform(shape.to_vec(), 1, 1, &mut rng).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let w = random(&[5], 1);
        let err = finite_difference_check(
            |t, x| {
                let c = t.constant(w.clone())?;
                let p = t.mul(x, c)?;
                t.sum(p)
            },
            &random(&[5], 2),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn matmul_gradients() {
        let b = random(&[4, 2], 3);
        let err = finite_difference_check(
            |t, a| {
                let b = t.constant(b.clone())?;
                let c = t.matmul(a, b)?;
                t.sum(c)
            },
            &random(&[3, 4], 4),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let a = random(&[3, 3], 5);
        let err = finite_difference_check(
            |t, b| {
                let a = t.constant(a.clone())?;
                let c = t.matmul(a, b)?;
                let w = t.constant(random(&[3, 3], 6))?;
                let c = t.mul(c, w)?;
                t.sum(c)
            },
            &random(&[3, 3], 7),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_gradients() {
        let x0 = random(&[2, 3, 4], 30);
        let w0 = random(&[4, 5], 31);
        let b0 = random(&[5], 32);
        let weights = random(&[2, 3, 5], 33);
        let loss = |t: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
            let y = t.linear(x, w, b)?;
            let c = t.constant(weights.clone())?;
            let p = t.mul(y, c)?;
            t.sum(p)
        };
        for which in 0..3 {
            let err = finite_difference_check(
                |t, v| {
                    let mut inputs = [x0.clone(), w0.clone(), b0.clone()].map(Some);
                    inputs[which] = None;
                    let mut vars = Vec::new();
                    for input in inputs {
                        vars.push(match input {
                            Some(value) => t.constant(value)?,
                            None => v,
                        });
                    }
                    loss(t, vars[0], vars[1], vars[2])
                },
                [&x0, &w0, &b0][which],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-8, "input {which}: {err}");
        }
    }

    #[test]
    fn feed_forward_matches_unfused_composition() {
        let x0 = random(&[5, 3], 40);
        let w1 = random(&[3, 11], 41);
        let b1 = random(&[11], 42);
        let w2 = random(&[11, 3], 43);
        let b2 = random(&[3], 44);
        let weights = random(&[5, 3], 45);
        let mut fused = Tape::new();
        let mut plain = Tape::new();
        let mut roots = Vec::new();
        let mut leaves = Vec::new();
        for (tape, fuse) in [(&mut fused, true), (&mut plain, false)] {
            let vs: Vec<Var> = [&x0, &w1, &b1, &w2, &b2].iter().map(|t| tape.param((*t).clone()).unwrap()).collect();
            let y = if fuse {
                tape.feed_forward(vs[0], vs[1], vs[2], vs[3], vs[4]).unwrap()
            } else {
                let h = tape.linear(vs[0], vs[1], vs[2]).unwrap();
                let h = tape.relu(h).unwrap();
                tape.linear(h, vs[3], vs[4]).unwrap()
            };
            let c = tape.constant(weights.clone()).unwrap();
            let p = tape.mul(y, c).unwrap();
            roots.push(tape.sum(p).unwrap());
            leaves.push(vs);
        }
        let (a, b) = (fused.value(roots[0]).data()[0], plain.value(roots[1]).data()[0]);
        assert!(relative_error(a, b) < 1e-13);
        let ga = fused.backward(roots[0]).unwrap();
        let gb = plain.backward(roots[1]).unwrap();
        for (va, vb) in leaves[0].iter().zip(&leaves[1]) {
            for (x, y) in ga.wrt(*va).data().iter().zip(gb.wrt(*vb).data()) {
                assert!(relative_error(*x, *y) < 1e-12);
            }
        }
        let err = finite_difference_check(
            |t, x| {
                let ps: Vec<Var> = [&w1, &b1, &w2, &b2].iter().map(|v| t.param((*v).clone()).unwrap()).collect();
                let y = t.feed_forward(x, ps[0], ps[1], ps[2], ps[3])?;
                let c = t.constant(weights.clone())?;
                let p = t.mul(y, c)?;
                t.sum(p)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn masked_attention_matches_unfused_composition() {
        let q0 = random(&[3, 4, 2], 50);
        let k0 = random(&[3, 4, 2], 51);
        let v0 = random(&[3, 4, 3], 52);
        let weights = random(&[3, 4, 3], 53);
        let blocked = [false, true, false, false, false, false, false, false, true, true, true, true];
        let scale = 0.7;
        for zero in [true, false] {
            let mut fused = Tape::new();
            let mut plain = Tape::new();
            let mut roots = Vec::new();
            let mut leaves = Vec::new();
            let mut outputs = Vec::new();
            for (tape, fuse) in [(&mut fused, true), (&mut plain, false)] {
                let vs: Vec<Var> = [&q0, &k0, &v0].iter().map(|t| tape.param((*t).clone()).unwrap()).collect();
                let y = if fuse {
                    tape.masked_attention(vs[0], vs[1], vs[2], &blocked, scale, zero).unwrap()
                } else {
                    let s = tape.batch_matmul(vs[0], vs[1], true).unwrap();
                    let s = tape.scale(s, scale).unwrap();
                    let mut a = tape.softmax_rows(s, &blocked).unwrap();
                    if zero {
                        a = tape.zero_rows(a, &blocked).unwrap();
                    }
                    tape.batch_matmul(a, vs[2], false).unwrap()
                };
                outputs.push(y);
                let c = tape.constant(weights.clone()).unwrap();
                let p = tape.mul(y, c).unwrap();
                roots.push(tape.sum(p).unwrap());
                leaves.push(vs);
            }
            let (a, b) = (fused.value(roots[0]).data()[0], plain.value(roots[1]).data()[0]);
            assert!(relative_error(a, b) < 1e-13);
            let ga = fused.backward(roots[0]).unwrap();
            let gb = plain.backward(roots[1]).unwrap();
            for (va, vb) in leaves[0].iter().zip(&leaves[1]) {
                for (x, y) in ga.wrt(*va).data().iter().zip(gb.wrt(*vb).data()) {
                    assert!(relative_error(*x, *y) < 1e-12);
                }
            }
            let w = fused.attention_weights(outputs[0]).unwrap();
            assert_eq!(w.shape(), &[3, 4, 4]);
            assert!(w.data()[32..].iter().all(|v| *v == 0.0));
            assert_eq!(w.data()[4..8].iter().all(|v| *v == 0.0), zero);
            assert_eq!(w.data()[1], 0.0);
            for x in [&q0, &k0, &v0] {
                let which = [&q0, &k0, &v0].iter().position(|t| std::ptr::eq(*t, x)).unwrap();
                let err = finite_difference_check(
                    |t, x| {
                        let mut vs: Vec<Var> = [&q0, &k0, &v0].iter().map(|v| t.param((*v).clone()).unwrap()).collect();
                        vs[which] = x;
                        let y = t.masked_attention(vs[0], vs[1], vs[2], &blocked, scale, zero)?;
                        let c = t.constant(weights.clone())?;
                        let p = t.mul(y, c)?;
                        t.sum(p)
                    },
                    x,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "{err}");
            }
        }
    }

    #[test]
    fn softmax_gradient() {
        let w = random(&[2, 2, 3], 8);
        let blocked = [false, false, true, true, false, false];
        let err = finite_difference_check(
            |t, x| {
                let s = t.softmax_rows(x, &blocked)?;
                let w = t.constant(w.clone())?;
                let p = t.mul(s, w)?;
                t.sum(p)
            },
            &random(&[2, 2, 3], 9),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let plain = finite_difference_check(
            |t, x| {
                let s = t.softmax_rows(x, &[false; 3])?;
                t.sum(s)
            },
            &random(&[2, 3], 10),
            1e-5,
        )
        .unwrap();
        assert!(plain < 1e-6, "{plain}");
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::vector(vec![-0.7, 0.3, 1.2, -0.1, 0.05]);
        let w = random(&[5], 11);
        let err = finite_difference_check(
            |t, x| {
                let r = t.relu(x)?;
                let w = t.constant(w.clone())?;
                let p = t.mul(r, w)?;
                t.sum(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn layer_norm_gradients() {
        let w = random(&[2, 6], 12);
        let g0 = random(&[6], 13);
        let b0 = random(&[6], 14);
        let err = finite_difference_check(
            |t, x| {
                let g = t.param(g0.clone())?;
                let b = t.param(b0.clone())?;
                let y = t.layer_norm(x, g, b, 1e-5)?;
                let w = t.constant(w.clone())?;
                let p = t.mul(y, w)?;
                t.sum(p)
            },
            &random(&[2, 6], 15),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
        let x0 = random(&[2, 6], 16);
        let err = finite_difference_check(
            |t, g| {
                let x = t.constant(x0.clone())?;
                let b = t.constant(b0.clone())?;
                let y = t.layer_norm(x, g, b, 1e-5)?;
                let w = t.constant(w.clone())?;
                let p = t.mul(y, w)?;
                t.sum(p)
            },
            &g0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn cross_entropy_gradient() {
        let err = finite_difference_check(
            |t, l| t.cross_entropy(l, &[0, 1, 1, 0]),
            &random(&[4, 2], 17),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn structural_ops_gradients() {
        let w = random(&[2, 3, 2], 18);
        let err = finite_difference_check(
            |t, x| {
                let s = t.split_heads(x, 3, 2)?;
                let k = t.scale(s, 0.7)?;
                let a = t.batch_matmul(s, k, true)?;
                let b = t.batch_matmul(a, s, false)?;
                let m = t.merge_heads(b, 2)?;
                let r = t.reshape(m, [2, 3, 2])?;
                let w = t.constant(w.clone())?;
                let p = t.mul(r, w)?;
                t.sum(p)
            },
            &random(&[3, 4], 19),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_concat_broadcast_gradients() {
        let w = random(&[3, 5], 20);
        let err = finite_difference_check(
            |t, table| {
                let other = t.param(random(&[2, 3], 21))?;
                let picks = [
                    RowPick { table: 0, row: 1, scale: 0.4 },
                    RowPick { table: 1, row: 0, scale: 1.0 },
                    RowPick { table: 0, row: 1, scale: -2.0 },
                ];
                let g = t.gather_rows(&[table, other], &picks)?;
                let bias = t.constant(random(&[3, 3], 22))?;
                let g = t.add_broadcast(g, bias)?;
                let z = t.zero_rows(g, &[false, true, false])?;
                let extra = t.param(random(&[3, 2], 23))?;
                let c = t.concat_cols(&[z, extra])?;
                let w = t.constant(w.clone())?;
                let p = t.mul(c, w)?;
                t.sum(p)
            },
            &random(&[2, 3], 24),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
