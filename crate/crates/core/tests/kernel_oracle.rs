use gpcorr::kernel::{kernel_eval, kernel_grad_second_arg, kernel_hess, HessianKind, Hyperparams};
use gpcorr::oracle::compare;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central difference of `f` along coordinate `d` of `x`, step
/// `1e-5 * max(1, |x|)`.
fn central<T>(x: &[f64], d: usize, f: impl Fn(&[f64]) -> T, sub: impl Fn(T, T, f64) -> Vec<f64>) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-5 * norm.max(1.0);
    let (mut up, mut down) = (x.to_vec(), x.to_vec());
    up[d] += h;
    down[d] -= h;
    sub(f(&up), f(&down), 2.0 * h)
}

#[test]
fn kernel_derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for pair in 0..120 {
        let n = 1 + pair % 3;
        let hp = Hyperparams::new(rng.gen_range(0.5..2.0), rng.gen_range(0.2..2.0), 0.0).unwrap();
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v + rng.gen_range(-1.5..1.5) * hp.beta).collect();
        let check = |what: &str, got: &[f64], want: &[f64]| {
            let cmp = compare(got, want, 1e-6, 1e-10);
            assert!(cmp.passed, "pair {pair} {what}: worst ratio {:.3}", cmp.worst_ratio);
        };

        let grad = kernel_grad_second_arg(&a, &b, &hp).unwrap();
        let fd: Vec<f64> = (0..n)
            .flat_map(|d| central(&b, d, |z| kernel_eval(&a, z, &hp).unwrap(), |u, l, w| vec![(u - l) / w]))
            .collect();
        check("gradient", grad.as_slice(), &fd);

        let diff = |u: nalgebra::DVector<f64>, l: nalgebra::DVector<f64>, w: f64| ((u - l) / w).as_slice().to_vec();
        // column d of each Hessian is the derivative of the gradient along coordinate d
        let ss = kernel_hess(&a, &b, &hp, HessianKind::SecondSecond).unwrap();
        let fd: Vec<f64> = (0..n)
            .flat_map(|d| central(&b, d, |z| kernel_grad_second_arg(&a, z, &hp).unwrap(), diff))
            .collect();
        check("second-second Hessian", ss.as_slice(), &fd);

        let fs = kernel_hess(&a, &b, &hp, HessianKind::FirstSecond).unwrap();
        let fd: Vec<f64> = (0..n)
            .flat_map(|d| central(&a, d, |z| kernel_grad_second_arg(z, &b, &hp).unwrap(), diff))
            .collect();
        check("first-second Hessian", fs.as_slice(), &fd);
    }
}
