use pgssl::tensor::Tape;
use pgssl::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
struct Case {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Case {
    fn out(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    /// Input coordinate read by output `o` through tap `t`, if inside.
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && i < extent as isize).then_some(i as usize)
    }
}

struct Reference {
    y: Vec<f64>,
    gx: Vec<f64>,
    gk: Vec<f64>,
    gb: Vec<f64>,
}

fn reference(c: &Case, x: &[f64], k: &[f64], b: &[f64], gy: &[f64]) -> Reference {
    let (oh, ow) = c.out();
    let xi = |n: usize, ci: usize, r: usize, col: usize| ((n * c.cin + ci) * c.h + r) * c.w + col;
    let ki = |co: usize, ci: usize, ky: usize, kx: usize| ((co * c.cin + ci) * c.k + ky) * c.k + kx;
    let yi = |n: usize, co: usize, r: usize, col: usize| ((n * c.cout + co) * oh + r) * ow + col;
    let mut y = vec![0.0; c.n * c.cout * oh * ow];
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; c.cout];
    for n in 0..c.n {
        for co in 0..c.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c.cin {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                if let (Some(r), Some(col)) = (c.src(oy, ky, c.h), c.src(ox, kx, c.w)) {
                                    acc += k[ki(co, ci, ky, kx)] * x[xi(n, ci, r, col)];
                                }
                            }
                        }
                    }
                    y[yi(n, co, oy, ox)] = acc + b[co];
                }
            }
        }
    }
    for n in 0..c.n {
        for ci in 0..c.cin {
            for co in 0..c.cout {
                for ky in 0..c.k {
                    for kx in 0..c.k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                if let (Some(r), Some(col)) = (c.src(oy, ky, c.h), c.src(ox, kx, c.w)) {
                                    gx[xi(n, ci, r, col)] += k[ki(co, ci, ky, kx)] * gy[yi(n, co, oy, ox)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for n in 0..c.n {
        for co in 0..c.cout {
            for ci in 0..c.cin {
                for ky in 0..c.k {
                    for kx in 0..c.k {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                if let (Some(r), Some(col)) = (c.src(oy, ky, c.h), c.src(ox, kx, c.w)) {
                                    gk[ki(co, ci, ky, kx)] += gy[yi(n, co, oy, ox)] * x[xi(n, ci, r, col)];
                                }
                            }
                        }
                    }
                }
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    gb[co] += gy[yi(n, co, oy, ox)];
                }
            }
        }
    }
    Reference { y, gx, gk, gb }
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random::<f64>() * 2.0 - 1.0).with_requires_grad(true)
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn check(c: Case, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (oh, ow) = c.out();
    let x = random(&mut r, &[c.n, c.cin, c.h, c.w]);
    let k = random(&mut r, &[c.cout, c.cin, c.k, c.k]);
    let b = random(&mut r, &[c.cout]);
    let gy = random(&mut r, &[c.n, c.cout, oh, ow]);

    let mut tape = Tape::<f64>::new();
    let (xv, kv, bv) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(b.clone()));
    let y = tape.conv2d(xv, kv, Some(bv), c.stride, c.pad).unwrap();
    let loss = tape.dot_const(y, &gy).unwrap();
    let grads = tape.backward(loss).unwrap();

    let want = reference(&c, x.data(), k.data(), b.data(), gy.data());
    assert_eq!(tape.shape(y), &[c.n, c.cout, oh, ow], "{c:?}");
    assert_eq!(bits(tape.value(y).data()), bits(&want.y), "forward {c:?}");
    assert_eq!(bits(grads.get(xv).unwrap()), bits(&want.gx), "input gradient {c:?}");
    assert_eq!(bits(grads.get(kv).unwrap()), bits(&want.gk), "kernel gradient {c:?}");
    assert_eq!(bits(grads.get(bv).unwrap()), bits(&want.gb), "bias gradient {c:?}");
}

#[test]
fn small_padded_conv_matches_reference() {
    check(Case { n: 1, cin: 2, cout: 4, h: 8, w: 8, k: 3, stride: 1, pad: 1 }, 0);
}

#[test]
fn assorted_geometries_match_reference_bit_for_bit() {
    let cases = [
        Case { n: 2, cin: 3, cout: 5, h: 16, w: 16, k: 3, stride: 1, pad: 1 },
        Case { n: 2, cin: 3, cout: 4, h: 16, w: 16, k: 3, stride: 2, pad: 1 },
        Case { n: 3, cin: 4, cout: 2, h: 9, w: 7, k: 3, stride: 2, pad: 1 },
        Case { n: 1, cin: 5, cout: 3, h: 6, w: 11, k: 1, stride: 1, pad: 0 },
        Case { n: 2, cin: 2, cout: 2, h: 10, w: 10, k: 2, stride: 2, pad: 0 },
        Case { n: 1, cin: 2, cout: 3, h: 12, w: 9, k: 5, stride: 1, pad: 2 },
        Case { n: 2, cin: 1, cout: 2, h: 11, w: 13, k: 4, stride: 3, pad: 2 },
        Case { n: 1, cin: 3, cout: 3, h: 5, w: 5, k: 3, stride: 1, pad: 0 },
    ];
    for (i, c) in cases.into_iter().enumerate() {
        check(c, 100 + i as u64);
    }
}

#[test]
fn random_geometries_match_reference_bit_for_bit() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..40 {
        let k = r.random_range(1..=4);
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..k);
        let h = r.random_range(k.max(3)..=12);
        let w = r.random_range(k.max(3)..=12);
        let c = Case { n: r.random_range(1..=2), cin: r.random_range(1..=3), cout: r.random_range(1..=3), h, w, k, stride, pad };
        check(c, 1000 + seed);
    }
}

#[test]
fn single_precision_stays_close_to_reference() {
    let c = Case { n: 2, cin: 4, cout: 6, h: 16, w: 16, k: 3, stride: 2, pad: 1 };
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let (oh, ow) = c.out();
    let x = random(&mut r, &[c.n, c.cin, c.h, c.w]);
    let k = random(&mut r, &[c.cout, c.cin, c.k, c.k]);
    let b = random(&mut r, &[c.cout]);
    let gy = random(&mut r, &[c.n, c.cout, oh, ow]);
    let want = reference(&c, x.data(), k.data(), b.data(), gy.data());

    let f = |t: &Tensor<f64>| Tensor::<f32>::from_fn(t.shape(), |i| t.data()[i] as f32).with_requires_grad(true);
    let mut tape = Tape::<f32>::new();
    let (xv, kv, bv) = (tape.leaf(f(&x)), tape.leaf(f(&k)), tape.leaf(f(&b)));
    let y = tape.conv2d(xv, kv, Some(bv), c.stride, c.pad).unwrap();
    let loss = tape.dot_const(y, &f(&gy)).unwrap();
    let grads = tape.backward(loss).unwrap();
    let close = |got: &[f32], want: &[f64], what: &str| {
        for (a, b) in got.iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-4 * (1.0 + b.abs()), "{what}: {a} vs {b}");
        }
    };
    close(tape.value(y).data(), &want.y, "forward");
    close(grads.get(xv).unwrap(), &want.gx, "input gradient");
    close(grads.get(kv).unwrap(), &want.gk, "kernel gradient");
}
