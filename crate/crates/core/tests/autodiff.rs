use bvap::autodiff::gradcheck::grad_check;
use bvap::gaussian::gaussian_kernel2d;
use bvap::{ConvSpec, Graph, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(dims: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn t2(rows: &[&[f64]]) -> Tensor {
    let h = rows.len();
    let w = rows[0].len();
    Tensor::new([1, 1, h, w], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
}

#[test]
fn pointwise_identity_conv_is_identity() {
    let g = Graph::new();
    let x = g.constant(random([2, 3, 4, 5], 1));
    let k = g.constant(Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| f64::from(u8::from(o == i))));
    let b = g.constant(Tensor::zeros([1, 3, 1, 1]));
    let y = g.conv2d(x, k, Some(b), ConvSpec::SAME).unwrap();
    assert_eq!(*g.value(y), *g.value(x));
}

#[test]
fn ones_kernel_on_constant_field_gives_nine_v_inside() {
    let v = 0.7;
    let g = Graph::new();
    let x = g.constant(Tensor::full([1, 1, 6, 6], v));
    let k = g.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, None, ConvSpec::SAME).unwrap();
    let out = g.value(y);
    for r in 1..5 {
        for c in 1..5 {
            assert!((out.at(0, 0, r, c) - 9.0 * v).abs() < 1e-12);
        }
    }
    assert!((out.at(0, 0, 0, 0) - 4.0 * v).abs() < 1e-12);
}

#[test]
fn conv_matches_quadruple_loop() {
    let x = random([1, 2, 5, 5], 2);
    let k = random([3, 2, 3, 3], 3);
    let g = Graph::new();
    let y = g.conv2d(g.constant(x.clone()), g.constant(k.clone()), None, ConvSpec::SAME).unwrap();
    let y = g.value(y);
    for o in 0..3 {
        for r in 0..5 {
            for c in 0..5 {
                let mut acc = 0.0;
                for i in 0..2 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (yy, xx) = (r as isize + dy as isize - 1, c as isize + dx as isize - 1);
                            if (0..5).contains(&yy) && (0..5).contains(&xx) {
                                acc += x.at(0, i, yy as usize, xx as usize) * k.at(o, i, dy, dx);
                            }
                        }
                    }
                }
                assert!((y.at(0, o, r, c) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn relu_and_sigmoid_values() {
    let g = Graph::new();
    let x = g.constant(Tensor::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(g.value(g.relu(x)).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    assert_eq!(g.value(g.sigmoid(z)).data(), &[0.5]);
}

#[test]
fn sigmoid_gradient_matches_differences() {
    let x = random([1, 2, 3, 3], 4).data().iter().map(|v| v * 4.0).collect();
    let x = Tensor::new([1, 2, 3, 3], x).unwrap();
    let r = grad_check(|g, v| Ok(g.sum(g.sigmoid(v))), &x, 1e-3).unwrap();
    assert!(r.max_rel_err <= 1e-6, "{}", r.max_rel_err);
}

#[test]
fn max_pool_examples() {
    let g = Graph::new();
    let x = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = g.max_pool2d(x, 2, 2, Padding::Valid).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let x = g.constant(random([1, 2, 7, 7], 5));
    let y = g.max_pool2d(x, 2, 1, Padding::Same).unwrap();
    assert_eq!(g.dims(y), [1, 2, 7, 7]);
}

#[test]
fn max_pool_matches_sliding_window() {
    let x = random([1, 1, 8, 8], 6);
    let g = Graph::new();
    let y = g.max_pool2d(g.constant(x.clone()), 2, 2, Padding::Valid).unwrap();
    let y = g.value(y).clone();
    for r in 0..4 {
        for c in 0..4 {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(x.at(0, 0, 2 * r + dy, 2 * c + dx));
                }
            }
            assert_eq!(y.at(0, 0, r, c), m);
        }
    }
    let y = g.max_pool2d(g.constant(x.clone()), 2, 1, Padding::Same).unwrap();
    let y = g.value(y).clone();
    for r in 0..8 {
        for c in 0..8 {
            let mut m = f64::NEG_INFINITY;
            for yy in r..(r + 2).min(8) {
                for xx in c..(c + 2).min(8) {
                    m = m.max(x.at(0, 0, yy, xx));
                }
            }
            assert_eq!(y.at(0, 0, r, c), m);
        }
    }
}

#[test]
fn global_avg_pool_examples() {
    let g = Graph::new();
    let x = g.constant(t2(&[&[0.0, 2.0], &[4.0, 6.0]]));
    assert_eq!(g.value(g.global_avg_pool(x)).data(), &[3.0]);
    let c = g.constant(Tensor::full([2, 3, 4, 5], 1.25));
    assert!(g.value(g.global_avg_pool(c)).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));

    let x = random([1, 1, 3, 4], 7);
    let gg = Graph::new();
    let v = gg.param(x.clone());
    gg.backward(gg.sum(gg.global_avg_pool(v))).unwrap();
    assert!(gg.grad(v).unwrap().iter().all(|&d| (d - 1.0 / 12.0).abs() < 1e-15));
    let r = grad_check(|g, v| Ok(g.sum(g.global_avg_pool(v))), &x, 1e-3).unwrap();
    assert!(r.max_rel_err < 1e-10);
}

#[test]
fn nearest_resize_examples() {
    let g = Graph::new();
    let x = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    assert_eq!(*g.value(g.nearest_resize(x, 1).unwrap()), *g.value(x));
    let y = g.nearest_resize(x, 2).unwrap();
    let want = t2(&[&[1.0, 1.0, 2.0, 2.0], &[1.0, 1.0, 2.0, 2.0], &[3.0, 3.0, 4.0, 4.0], &[3.0, 3.0, 4.0, 4.0]]);
    assert_eq!(*g.value(y), want);

    let r = random([2, 3, 5, 4], 8);
    let x = g.constant(r.clone());
    for f in 1..4 {
        let s = g.value(g.nearest_resize(x, f).unwrap()).sum();
        assert!((s - (f * f) as f64 * r.sum()).abs() < 1e-10);
    }
}

#[test]
fn concat_round_trip() {
    let a = random([2, 2, 3, 3], 9);
    let b = random([2, 3, 3, 3], 10);
    let g = Graph::new();
    let single = g.concat_channels(&[g.constant(a.clone())]).unwrap();
    assert_eq!(*g.value(single), a);
    let cat = g.concat_channels(&[g.constant(a.clone()), g.constant(b.clone())]).unwrap();
    let cat = g.value(cat);
    assert_eq!(cat.dims(), [2, 5, 3, 3]);
    let back_a = Tensor::from_fn(a.dims(), |n, c, y, x| cat.at(n, c, y, x));
    let back_b = Tensor::from_fn(b.dims(), |n, c, y, x| cat.at(n, c + 2, y, x));
    assert_eq!(back_a, a);
    assert_eq!(back_b, b);
}

#[test]
fn gaussian_kernel_properties() {
    for sigma in [0.5, 1.5, 2.3, 5.0, 11.7] {
        let k = gaussian_kernel2d(sigma).unwrap();
        let n = k.width();
        assert_eq!(n, 2 * (3.0 * sigma).round() as usize + 1);
        assert!((k.sum() - 1.0).abs() < 1e-12);
        for y in 0..n {
            for x in 0..n {
                let v = k.at(0, 0, y, x);
                assert_eq!(v, k.at(0, 0, y, n - 1 - x));
                assert_eq!(v, k.at(0, 0, n - 1 - y, x));
                assert_eq!(v, k.at(0, 0, x, y));
            }
        }
    }
    assert_eq!(gaussian_kernel2d(5.0).unwrap().width(), 31);
}

#[test]
fn backward_sum_and_sum_of_squares() {
    let x = random([1, 2, 3, 3], 11);
    let g = Graph::new();
    let v = g.param(x.clone());
    g.backward(g.sum(v)).unwrap();
    assert!(g.grad(v).unwrap().iter().all(|&d| d == 1.0));

    let g = Graph::new();
    let v = g.param(x.clone());
    g.backward(g.sum_squares(v)).unwrap();
    for (d, x) in g.grad(v).unwrap().iter().zip(x.data()) {
        assert_eq!(*d, 2.0 * x);
    }
}

#[test]
fn shared_input_accumulates_branch_gradients() {
    let x = random([1, 1, 4, 4], 12);
    let branch_a = |g: &Graph, v| g.sum(g.sigmoid(v));
    let branch_b = |g: &Graph, v| g.sum_squares(v);

    let g = Graph::new();
    let v = g.param(x.clone());
    let loss = g.add(branch_a(&g, v), branch_b(&g, v)).unwrap();
    g.backward(loss).unwrap();
    let both = g.grad(v).unwrap();

    let single = |f: &dyn Fn(&Graph, bvap::Var) -> bvap::Var| {
        let g = Graph::new();
        let v = g.param(x.clone());
        g.backward(f(&g, v)).unwrap();
        g.grad(v).unwrap()
    };
    let ga = single(&branch_a);
    let gb = single(&branch_b);
    for i in 0..both.len() {
        assert!((both[i] - ga[i] - gb[i]).abs() < 1e-15);
    }
}

#[test]
fn composite_conv_relu_pool_gradient() {
    let k = random([2, 1, 3, 3], 13);
    let mut best = None;
    for seed in 0..16 {
        let x = random([1, 1, 6, 6], 100 + seed);
        let k = k.clone();
        let r = grad_check(
            move |g, v| {
                let y = g.conv2d(v, g.constant(k.clone()), None, ConvSpec::SAME)?;
                let y = g.max_pool2d(g.relu(y), 2, 2, Padding::Valid)?;
                Ok(g.sum(y))
            },
            &x,
            1e-3,
        )
        .unwrap();
        if r.kink_margin >= 2e-3 {
            best = Some(r);
            break;
        }
    }
    let r = best.expect("a kink-free sample");
    assert!(r.max_rel_err <= 1e-4, "{}", r.max_rel_err);
}

#[test]
fn grad_check_linear_is_exact() {
    let w = random([1, 3, 4, 4], 14);
    let x = random([1, 3, 4, 4], 15);
    let r = grad_check(
        move |g, v| {
            let s = g.scale_const(v, 3.0);
            Ok(g.sum(g.channel_scale(s, g.constant(Tensor::new([1, 3, 1, 1], vec![1.0, -2.0, 0.5])?))?))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-10);
    let r = grad_check(move |g, v| Ok(g.sum(g.add(v, g.constant(w.clone()))?)), &x, 1e-3).unwrap();
    assert!(r.max_rel_err <= 1e-10);
}

#[test]
fn forward_is_repeatable() {
    let x = random([1, 2, 8, 8], 16);
    let k = random([3, 2, 3, 3], 17);
    let run = || {
        let g = Graph::new();
        let y = g.conv2d(g.constant(x.clone()), g.constant(k.clone()), None, ConvSpec::dilated(2)).unwrap();
        let y = g.max_pool2d(g.relu(y), 2, 2, Padding::Valid).unwrap();
        let out = g.value(y).clone();
        out
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::new();
    let v = g.param(Tensor::zeros([1, 1, 2, 2]));
    assert!(matches!(g.backward(v), Err(bvap::Error::NonScalarLoss(_))));
}
