//! Central finite-difference verification for every kernel gradient.
//!
//! The sweep runs each op forward in double precision against a weighted-sum
//! loss, compares every analytic gradient entry with central differences,
//! and reports the worst relative error per case. Inputs for kinked ops
//! (relu family, max pooling) are conditioned away from the kink by a margin
//! wider than the probe step, where the true derivative is well defined.

use ndarray::{Array1, Array4, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::*;

/// Default probe step for central differences.
pub const FD_STEP: f64 = 1e-3;
/// Default relative-error tolerance.
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor so near-zero gradients compare absolutely.
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Central difference of a scalar function at `x`, one entry at a time.
pub fn central_diff<Fx: FnMut(&[f64]) -> f64>(mut f: Fx, x: &[f64], step: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + step;
            let fp = f(&xs);
            xs[i] = orig - step;
            let fm = f(&xs);
            xs[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Worst relative error between analytic and numeric gradients, with an
/// absolute floor on the denominator.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(abs_floor))
        .fold(0.0, f64::max)
}

/// One verified gradient case.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub op: String,
    pub case: String,
    pub max_err: f64,
}

struct Harness {
    rng: ChaCha8Rng,
    results: Vec<CheckResult>,
}

impl Harness {
    fn rand4(&mut self, dims: (usize, usize, usize, usize), lo: f64, hi: f64) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| self.rng.random_range(lo..hi))
    }

    /// Random values with |v| in [margin, 1]: clear of the relu kink by more
    /// than the probe step.
    fn rand4_margin(&mut self, dims: (usize, usize, usize, usize), margin: f64) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| {
            let mag = self.rng.random_range(margin..1.0);
            if self.rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
    }

    fn rand1(&mut self, n: usize, lo: f64, hi: f64) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| self.rng.random_range(lo..hi))
    }

    fn record(
        &mut self,
        op: &str,
        case: String,
        analytic: &[Vec<f64>],
        numeric: &[Vec<f64>],
    ) {
        let max_err = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| max_rel_error(a, n, FD_ABS_FLOOR))
            .fold(0.0, f64::max);
        self.results.push(CheckResult { op: op.to_string(), case, max_err });
    }
}

fn flat<D: Dimension>(a: &ndarray::Array<f64, D>) -> Vec<f64> {
    a.iter().cloned().collect()
}

fn wsum(y: &Array4<f64>, w: &Array4<f64>) -> f64 {
    y.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
}

fn rebuild4(dims: (usize, usize, usize, usize), v: &[f64]) -> Array4<f64> {
    Array4::from_shape_vec(dims, v.to_vec()).unwrap()
}

/// Runs the finite-difference sweep over every op, `shapes_per_op` random
/// shapes each, and returns the worst error per (op, case, argument set).
pub fn op_gradient_sweep(shapes_per_op: usize, seed: u64) -> Vec<CheckResult> {
    let mut h = Harness { rng: ChaCha8Rng::seed_from_u64(seed), results: Vec::new() };

    let conv_shapes = [
        (1, 1, 1, 5, 3, 1, 0),
        (2, 3, 2, 6, 3, 1, 1),
        (1, 2, 4, 8, 4, 2, 1),
        (2, 1, 3, 7, 3, 2, 1),
        (1, 4, 2, 5, 1, 1, 0),
        (1, 2, 2, 6, 4, 2, 1),
    ];
    for &(bsz, cin, cout, hw, k, s, p) in conv_shapes.iter().take(shapes_per_op) {
        let case = format!("b{bsz} {cin}->{cout} {hw}x{hw} k{k} s{s} p{p}");
        let x = h.rand4((bsz, cin, hw, hw), -1.0, 1.0);
        let w = h.rand4((cout, cin, k, k), -1.0, 1.0);
        let b = h.rand1(cout, -0.5, 0.5);
        let od = conv_out_dim(hw, k, s, p).unwrap();
        let up = h.rand4((bsz, cout, od, od), -1.0, 1.0);
        let (dx, dw, db) = conv2d_backward(x.view(), w.view(), s, p, up.view()).unwrap();
        let fx = |v: &[f64]| {
            let xr = rebuild4(x.dim(), v);
            wsum(&conv2d(xr.view(), w.view(), Some(b.view()), s, p).unwrap(), &up)
        };
        let fw = |v: &[f64]| {
            let wr = rebuild4(w.dim(), v);
            wsum(&conv2d(x.view(), wr.view(), Some(b.view()), s, p).unwrap(), &up)
        };
        let fb = |v: &[f64]| {
            let br = Array1::from_vec(v.to_vec());
            wsum(&conv2d(x.view(), w.view(), Some(br.view()), s, p).unwrap(), &up)
        };
        let num = [
            central_diff(fx, &flat(&x), FD_STEP),
            central_diff(fw, &flat(&w), FD_STEP),
            central_diff(fb, &flat(&b), FD_STEP),
        ];
        h.record("conv2d", case, &[flat(&dx), flat(&dw), flat(&db)], &num);
    }

    let convt_shapes = [
        (1, 2, 1, 4, 4, 2, 1),
        (2, 1, 2, 3, 3, 1, 0),
        (1, 3, 2, 4, 4, 2, 1),
        (2, 2, 1, 5, 3, 2, 1),
        (1, 1, 1, 3, 1, 1, 0),
        (1, 2, 3, 3, 4, 2, 1),
    ];
    for &(bsz, cin, cout, hw, k, s, p) in convt_shapes.iter().take(shapes_per_op) {
        let case = format!("b{bsz} {cin}->{cout} {hw}x{hw} k{k} s{s} p{p}");
        let x = h.rand4((bsz, cin, hw, hw), -1.0, 1.0);
        let w = h.rand4((cin, cout, k, k), -1.0, 1.0);
        let b = h.rand1(cout, -0.5, 0.5);
        let od = conv_transpose_out_dim(hw, k, s, p).unwrap();
        let up = h.rand4((bsz, cout, od, od), -1.0, 1.0);
        let (dx, dw, db) =
            conv_transpose2d_backward(x.view(), w.view(), s, p, up.view()).unwrap();
        let fx = |v: &[f64]| {
            let xr = rebuild4(x.dim(), v);
            wsum(&conv_transpose2d(xr.view(), w.view(), Some(b.view()), s, p).unwrap(), &up)
        };
        let fw = |v: &[f64]| {
            let wr = rebuild4(w.dim(), v);
            wsum(&conv_transpose2d(x.view(), wr.view(), Some(b.view()), s, p).unwrap(), &up)
        };
        let fb = |v: &[f64]| {
            let br = Array1::from_vec(v.to_vec());
            wsum(&conv_transpose2d(x.view(), w.view(), Some(br.view()), s, p).unwrap(), &up)
        };
        let num = [
            central_diff(fx, &flat(&x), FD_STEP),
            central_diff(fw, &flat(&w), FD_STEP),
            central_diff(fb, &flat(&b), FD_STEP),
        ];
        h.record("conv_transpose2d", case, &[flat(&dx), flat(&dw), flat(&db)], &num);
    }

    let norm_shapes = [(2, 3, 4, 4), (1, 2, 5, 3), (3, 1, 4, 2), (2, 2, 3, 3), (1, 4, 2, 6), (2, 3, 2, 2)];
    for training in [true, false] {
        for &dims in norm_shapes.iter().take(shapes_per_op) {
            let case = format!("{:?} {}", dims, if training { "train" } else { "eval" });
            let c = dims.1;
            let x = h.rand4(dims, -1.0, 1.0);
            let gamma = h.rand1(c, 0.5, 1.5);
            let beta = h.rand1(c, -0.5, 0.5);
            let rm0 = h.rand1(c, -0.3, 0.3);
            let rv0 = h.rand1(c, 0.5, 1.5);
            let up = h.rand4(dims, -1.0, 1.0);
            let run = |xr: &Array4<f64>, g: &Array1<f64>, be: &Array1<f64>| {
                let (mut rm, mut rv) = (rm0.clone(), rv0.clone());
                let (y, _) =
                    batch_norm(xr.view(), g.view(), be.view(), &mut rm, &mut rv, training)
                        .unwrap();
                wsum(&y, &up)
            };
            let (mut rm, mut rv) = (rm0.clone(), rv0.clone());
            let (_, cache) =
                batch_norm(x.view(), gamma.view(), beta.view(), &mut rm, &mut rv, training)
                    .unwrap();
            let (dx, dg, db) = batch_norm_backward(&cache, gamma.view(), up.view());
            let num = [
                central_diff(|v| run(&rebuild4(dims, v), &gamma, &beta), &flat(&x), FD_STEP),
                central_diff(
                    |v| run(&x, &Array1::from_vec(v.to_vec()), &beta),
                    &flat(&gamma),
                    FD_STEP,
                ),
                central_diff(
                    |v| run(&x, &gamma, &Array1::from_vec(v.to_vec())),
                    &flat(&beta),
                    FD_STEP,
                ),
            ];
            h.record("batch_norm", case, &[flat(&dx), flat(&dg), flat(&db)], &num);
        }
    }

    for &dims in norm_shapes.iter().take(shapes_per_op) {
        let case = format!("{dims:?}");
        let c = dims.1;
        let x = h.rand4(dims, -1.0, 1.0);
        let gamma = h.rand1(c, 0.5, 1.5);
        let beta = h.rand1(c, -0.5, 0.5);
        let up = h.rand4(dims, -1.0, 1.0);
        let run = |xr: &Array4<f64>, g: &Array1<f64>, be: &Array1<f64>| {
            let (y, _) = instance_norm(xr.view(), g.view(), be.view()).unwrap();
            wsum(&y, &up)
        };
        let (_, cache) = instance_norm(x.view(), gamma.view(), beta.view()).unwrap();
        let (dx, dg, db) = instance_norm_backward(&cache, gamma.view(), up.view());
        let num = [
            central_diff(|v| run(&rebuild4(dims, v), &gamma, &beta), &flat(&x), FD_STEP),
            central_diff(|v| run(&x, &Array1::from_vec(v.to_vec()), &beta), &flat(&gamma), FD_STEP),
            central_diff(|v| run(&x, &gamma, &Array1::from_vec(v.to_vec())), &flat(&beta), FD_STEP),
        ];
        h.record("instance_norm", case, &[flat(&dx), flat(&dg), flat(&db)], &num);
    }

    let act_shapes = [(2, 3, 4, 4), (1, 1, 5, 5), (3, 2, 2, 3), (1, 4, 3, 3), (2, 2, 6, 2), (1, 3, 4, 2)];
    for &dims in act_shapes.iter().take(shapes_per_op) {
        let up = h.rand4(dims, -1.0, 1.0);
        // relu family: keep inputs off the kink.
        let xm = h.rand4_margin(dims, 0.05);
        let y = relu(&xm);
        let dx = relu_backward(&y, &up);
        let num = central_diff(|v| wsum(&relu(&rebuild4(dims, v)), &up), &flat(&xm), FD_STEP);
        h.record("relu", format!("{dims:?}"), &[flat(&dx)], &[num]);

        let y = leaky_relu(&xm, 0.2);
        let dx = leaky_relu_backward(&y, &up, 0.2);
        let num =
            central_diff(|v| wsum(&leaky_relu(&rebuild4(dims, v), 0.2), &up), &flat(&xm), FD_STEP);
        h.record("leaky_relu", format!("{dims:?}"), &[flat(&dx)], &[num]);

        let x = h.rand4(dims, -2.0, 2.0);
        let y = tanh_act(&x);
        let dx = tanh_backward(&y, &up);
        let num = central_diff(|v| wsum(&tanh_act(&rebuild4(dims, v)), &up), &flat(&x), FD_STEP);
        h.record("tanh", format!("{dims:?}"), &[flat(&dx)], &[num]);

        let y = sigmoid(&x);
        let dx = sigmoid_backward(&y, &up);
        let num = central_diff(|v| wsum(&sigmoid(&rebuild4(dims, v)), &up), &flat(&x), FD_STEP);
        h.record("sigmoid", format!("{dims:?}"), &[flat(&dx)], &[num]);
    }

    let pool_shapes = [(1, 2, 4, 4), (2, 1, 6, 6), (1, 3, 8, 4), (2, 2, 4, 6), (1, 1, 2, 2), (3, 2, 4, 4)];
    for &dims in pool_shapes.iter().take(shapes_per_op) {
        // Separate the top two values in every 2x2 window so the argmax is
        // stable under the probe step.
        let x = loop {
            let cand = h.rand4(dims, -1.0, 1.0);
            if pool_windows_separated(&cand, 10.0 * FD_STEP) {
                break cand;
            }
        };
        let (_, arg) = max_pool2d(x.view()).unwrap();
        let up = h.rand4((dims.0, dims.1, dims.2 / 2, dims.3 / 2), -1.0, 1.0);
        let dx = max_pool2d_backward(&arg, up.view());
        let num = central_diff(
            |v| wsum(&max_pool2d(rebuild4(dims, v).view()).unwrap().0, &up),
            &flat(&x),
            FD_STEP,
        );
        h.record("max_pool2d", format!("{dims:?}"), &[flat(&dx)], &[num]);

        let xu = h.rand4(dims, -1.0, 1.0);
        let upu = h.rand4((dims.0, dims.1, dims.2 * 2, dims.3 * 2), -1.0, 1.0);
        let dxu = upsample_nearest2_backward(upu.view());
        let num = central_diff(
            |v| wsum(&upsample_nearest2(rebuild4(dims, v).view()), &upu),
            &flat(&xu),
            FD_STEP,
        );
        h.record("upsample_nearest2", format!("{dims:?}"), &[flat(&dxu)], &[num]);
    }

    let pad_shapes = [(1, 2, 4, 4, 1), (2, 1, 3, 5, 1), (1, 1, 5, 5, 2), (1, 3, 4, 3, 1), (2, 2, 3, 3, 2), (1, 2, 6, 4, 1)];
    for &(bsz, c, hh, ww, pad) in pad_shapes.iter().take(shapes_per_op) {
        let dims = (bsz, c, hh, ww);
        let x = h.rand4(dims, -1.0, 1.0);
        let up = h.rand4((bsz, c, hh + 2 * pad, ww + 2 * pad), -1.0, 1.0);
        let dx = reflect_pad2d_backward(up.view(), pad, (hh, ww));
        let num = central_diff(
            |v| wsum(&reflect_pad2d(rebuild4(dims, v).view(), pad).unwrap(), &up),
            &flat(&x),
            FD_STEP,
        );
        h.record("reflect_pad2d", format!("{dims:?} pad{pad}"), &[flat(&dx)], &[num]);
    }

    let res_shapes = [(1, 2, 6, 6), (1, 3, 5, 5), (2, 1, 4, 4), (1, 1, 6, 4), (2, 2, 4, 4), (1, 2, 5, 4)];
    for &dims in res_shapes.iter().take(shapes_per_op) {
        let c = dims.1;
        let p = ResBlock {
            w1: h.rand4((c, c, 3, 3), -0.5, 0.5),
            b1: h.rand1(c, -0.2, 0.2),
            g1: h.rand1(c, 0.5, 1.5),
            e1: h.rand1(c, -0.2, 0.2),
            w2: h.rand4((c, c, 3, 3), -0.5, 0.5),
            b2: h.rand1(c, -0.2, 0.2),
            g2: h.rand1(c, 0.5, 1.5),
            e2: h.rand1(c, -0.2, 0.2),
        };
        // The relu inside the block must also sit off its kink for the FD
        // probe: resample x until every pre-relu value clears the margin.
        let x = loop {
            let cand = h.rand4(dims, -1.0, 1.0);
            let pad1 = reflect_pad2d(cand.view(), 1).unwrap();
            let c1 = conv2d(pad1.view(), p.w1.view(), Some(p.b1.view()), 1, 0).unwrap();
            let (n1, _) = instance_norm(c1.view(), p.g1.view(), p.e1.view()).unwrap();
            if n1.iter().all(|v| v.abs() > 10.0 * FD_STEP) {
                break cand;
            }
        };
        let up = h.rand4(dims, -1.0, 1.0);
        let (_, cache) = residual_block(x.view(), &p).unwrap();
        let (dx, dp) = residual_block_backward(&cache, &p, up.view()).unwrap();
        let run = |pp: &ResBlock<f64>, xr: &Array4<f64>| {
            wsum(&residual_block(xr.view(), pp).unwrap().0, &up)
        };
        let analytic = [
            flat(&dx),
            flat(&dp.w1),
            flat(&dp.b1),
            flat(&dp.g1),
            flat(&dp.e1),
            flat(&dp.w2),
            flat(&dp.b2),
            flat(&dp.g2),
            flat(&dp.e2),
        ];
        let numeric = [
            central_diff(|v| run(&p, &rebuild4(dims, v)), &flat(&x), FD_STEP),
            central_diff(
                |v| run(&ResBlock { w1: rebuild4(p.w1.dim(), v), ..p.clone() }, &x),
                &flat(&p.w1),
                FD_STEP,
            ),
            central_diff(
                |v| run(&ResBlock { b1: Array1::from_vec(v.to_vec()), ..p.clone() }, &x),
                &flat(&p.b1),
                FD_STEP,
            ),
            central_diff(
                |v| run(&ResBlock { g1: Array1::from_vec(v.to_vec()), ..p.clone() }, &x),
                &flat(&p.g1),
                FD_STEP,
            ),
            central_diff(
                |v| run(&ResBlock { e1: Array1::from_vec(v.to_vec()), ..p.clone() }, &x),
                &flat(&p.e1),
                FD_STEP,
            ),
            central_diff(
                |v| run(&ResBlock { w2: rebuild4(p.w2.dim(), v), ..p.clone() }, &x),
                &flat(&p.w2),
                FD_STEP,
            ),
            central_diff(
                |v| run(&ResBlock { b2: Array1::from_vec(v.to_vec()), ..p.clone() }, &x),
                &flat(&p.b2),
                FD_STEP,
            ),
            central_diff(
                |v| run(&ResBlock { g2: Array1::from_vec(v.to_vec()), ..p.clone() }, &x),
                &flat(&p.g2),
                FD_STEP,
            ),
            central_diff(
                |v| run(&ResBlock { e2: Array1::from_vec(v.to_vec()), ..p.clone() }, &x),
                &flat(&p.e2),
                FD_STEP,
            ),
        ];
        h.record("residual_block", format!("{dims:?}"), &analytic, &numeric);
    }

    h.results
}

/// True when the top two values of every 2x2 pool window differ by at least
/// `min_gap`, so FD probes cannot flip an argmax.
fn pool_windows_separated(x: &Array4<f64>, min_gap: f64) -> bool {
    let (bsz, c, hh, ww) = x.dim();
    for b in 0..bsz {
        for ci in 0..c {
            for i in 0..hh / 2 {
                for j in 0..ww / 2 {
                    let mut vals = [
                        x[[b, ci, 2 * i, 2 * j]],
                        x[[b, ci, 2 * i, 2 * j + 1]],
                        x[[b, ci, 2 * i + 1, 2 * j]],
                        x[[b, ci, 2 * i + 1, 2 * j + 1]],
                    ];
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals[0] - vals[1] < min_gap {
                        return false;
                    }
                }
            }
        }
    }
    true
}
