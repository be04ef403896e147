//! Central finite-difference checks of every analytic gradient.

use gpdmm_core::dynamics::{dynamics_gradients, transitions};
use gpdmm_core::emission::{emission_gradients, emission_log_likelihood, EmissionModel};
use gpdmm_core::kernel::{kernel_grad, KernelSpec, KernelTerm};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;

fn rand_mat(rng: &mut ChaCha8Rng, n: usize, q: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, q, |_, _| rng.random_range(-scale..scale))
}

/// Relative error with an absolute floor for near-zero gradients.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn random_kernel(rng: &mut ChaCha8Rng) -> KernelSpec {
    KernelSpec::rbf(rng.random_range(0.5..2.0), rng.random_range(0.5..1.5))
        .plus(KernelTerm::Linear { variance: rng.random_range(0.1..1.0) })
        .plus(KernelTerm::Bias { variance: rng.random_range(0.05..0.5) })
        .plus(KernelTerm::White { variance: rng.random_range(0.05..0.3) })
}

fn perturbed_kernel(k: &KernelSpec, p: usize, h: f64) -> KernelSpec {
    let mut params = k.params();
    params[p] += h;
    let mut out = k.clone();
    out.set_params(&params);
    out
}

#[test]
fn kernel_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_mat(&mut rng, 3, 2, 1.0);
        let b = rand_mat(&mut rng, 4, 2, 1.0);
        let spec = random_kernel(&mut rng);
        let g = kernel_grad(&spec, &a, &b).unwrap();
        for p in 0..spec.n_params() {
            let kp = perturbed_kernel(&spec, p, STEP).cross(&a, &b);
            let km = perturbed_kernel(&spec, p, -STEP).cross(&a, &b);
            let fd = (kp - km) / (2.0 * STEP);
            for (x, y) in g.params[p].iter().zip(fd.iter()) {
                worst = worst.max(rel_err(*x, *y));
            }
        }
        for c in 0..2 {
            for i in 0..3 {
                let mut ap = a.clone();
                ap[(i, c)] += STEP;
                let mut am = a.clone();
                am[(i, c)] -= STEP;
                let fd = (spec.cross(&ap, &b) - spec.cross(&am, &b)) / (2.0 * STEP);
                for j in 0..4 {
                    worst = worst.max(rel_err(g.wrt_a[c][(i, j)], fd[(i, j)]));
                }
            }
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn emission_gradients_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_mat(&mut rng, 6, 3, 1.0);
        let y = rand_mat(&mut rng, 6, 4, 2.0);
        let spec = random_kernel(&mut rng);
        let g = emission_gradients(&x, &y, &spec).unwrap();
        for i in 0..6 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[(i, c)] += STEP;
                let mut xm = x.clone();
                xm[(i, c)] -= STEP;
                let fd = (emission_log_likelihood(&xp, &y, &spec).unwrap() - emission_log_likelihood(&xm, &y, &spec).unwrap()) / (2.0 * STEP);
                worst = worst.max(rel_err(g.d_x[(i, c)], fd));
            }
        }
        for p in 0..spec.n_params() {
            let fd = (emission_log_likelihood(&x, &y, &perturbed_kernel(&spec, p, STEP)).unwrap()
                - emission_log_likelihood(&x, &y, &perturbed_kernel(&spec, p, -STEP)).unwrap())
                / (2.0 * STEP);
            worst = worst.max(rel_err(g.d_params[p], fd));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn projection_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_mat(&mut rng, 7, 2, 1.0);
        let y = rand_mat(&mut rng, 7, 3, 1.0);
        let model = EmissionModel::new(x, &y, random_kernel(&mut rng)).unwrap();
        let xs = rand_mat(&mut rng, 3, 2, 1.0);
        let ys = rand_mat(&mut rng, 3, 3, 1.0);
        let (_, g) = model.projection_objective(&xs, &ys).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mut xp = xs.clone();
                xp[(i, c)] += STEP;
                let mut xm = xs.clone();
                xm[(i, c)] -= STEP;
                let fd = (model.projection_objective(&xp, &ys).unwrap().0 - model.projection_objective(&xm, &ys).unwrap().0) / (2.0 * STEP);
                worst = worst.max(rel_err(g[(i, c)], fd));
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

fn check_dynamics(sparse: bool) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed + 50 * sparse as u64);
        let seg = rand_mat(&mut rng, 9, 2, 1.0);
        let t = transitions(&[seg], 1).unwrap();
        let spec = KernelSpec::rbf_plus_linear(rng.random_range(0.5..2.0), rng.random_range(0.5..1.5), rng.random_range(0.1..1.0))
            .plus(KernelTerm::White { variance: rng.random_range(0.05..0.3) });
        let z = if sparse { Some(rand_mat(&mut rng, 4, 2, 1.0)) } else { None };
        let value = |x_in: &DMatrix<f64>, x_out: &DMatrix<f64>, k: &KernelSpec, z: Option<&DMatrix<f64>>| {
            dynamics_gradients(x_in, x_out, k, z).unwrap().value
        };
        let g = dynamics_gradients(&t.x_in, &t.x_out, &spec, z.as_ref()).unwrap();
        for i in 0..t.x_in.nrows() {
            for c in 0..2 {
                let mut p = t.x_in.clone();
                p[(i, c)] += STEP;
                let mut m = t.x_in.clone();
                m[(i, c)] -= STEP;
                let fd = (value(&p, &t.x_out, &spec, z.as_ref()) - value(&m, &t.x_out, &spec, z.as_ref())) / (2.0 * STEP);
                worst = worst.max(rel_err(g.d_in[(i, c)], fd));
                let mut p = t.x_out.clone();
                p[(i, c)] += STEP;
                let mut m = t.x_out.clone();
                m[(i, c)] -= STEP;
                let fd = (value(&t.x_in, &p, &spec, z.as_ref()) - value(&t.x_in, &m, &spec, z.as_ref())) / (2.0 * STEP);
                worst = worst.max(rel_err(g.d_out[(i, c)], fd));
            }
        }
        for p in 0..spec.n_params() {
            let fd = (value(&t.x_in, &t.x_out, &perturbed_kernel(&spec, p, STEP), z.as_ref())
                - value(&t.x_in, &t.x_out, &perturbed_kernel(&spec, p, -STEP), z.as_ref()))
                / (2.0 * STEP);
            worst = worst.max(rel_err(g.d_params[p], fd));
        }
        if let Some(z) = &z {
            let dz = g.d_inducing.as_ref().unwrap();
            for i in 0..z.nrows() {
                for c in 0..2 {
                    let mut p = z.clone();
                    p[(i, c)] += STEP;
                    let mut m = z.clone();
                    m[(i, c)] -= STEP;
                    let fd = (value(&t.x_in, &t.x_out, &spec, Some(&p)) - value(&t.x_in, &t.x_out, &spec, Some(&m))) / (2.0 * STEP);
                    worst = worst.max(rel_err(dz[(i, c)], fd));
                }
            }
        }
    }
    worst
}

#[test]
fn dynamics_gradients_match_finite_differences() {
    let worst = check_dynamics(false);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn fitc_gradients_match_finite_differences() {
    let worst = check_dynamics(true);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
