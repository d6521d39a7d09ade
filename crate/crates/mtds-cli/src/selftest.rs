//! A fast self-contained sanity battery: one line per check, nonzero exit
//! when anything fails. Runs in a couple of seconds.

use mtds::dho;
use mtds::infer::{ess, weighted_em, weighted_moments, EmInit};
use mtds::learn::{construct_weights, inv_std_normal_cdf, sobol_uniform};
use mtds::model::{loss_backward, BaseModel, HyperNetParams, LatentCode, ModelDims};
use mtds::paramspace::{cayley, skew_symmetric, stable_transition, SkewCoeffs, StableTransitionRaw};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

type Check = (&'static str, fn() -> Result<(), String>);

pub fn run() -> Result<(), usize> {
    let checks: &[Check] = &[
        ("cayley orthogonality (n = 8)", check_cayley),
        ("stable transition spectral bound", check_stable),
        ("lds gradient vs central differences", check_grad_lds),
        ("rnn gradient vs central differences", check_grad_rnn),
        ("sobol first points", check_sobol),
        ("inverse normal cdf", check_inv_cdf),
        ("importance weight normalization", check_weights),
        ("effective sample size", check_ess),
        ("weighted em single component", check_em),
        ("dataset reproducibility", check_dataset),
    ];
    let mut failures = 0;
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                failures += 1;
            }
        }
    }
    if failures == 0 {
        println!("selftest: all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(failures)
    }
}

fn check_cayley() -> Result<(), String> {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let n = 8;
    let gamma = Array1::from_shape_fn(SkewCoeffs::coeff_count(n), |_| rng.random_range(-1.5..1.5));
    let q = cayley(skew_symmetric(&SkewCoeffs::new(n, gamma).map_err(|e| e.to_string())?).view())
        .map_err(|e| e.to_string())?
        .q;
    let mut gram = q.t().dot(&q);
    for i in 0..n {
        gram[[i, i]] -= 1.0;
    }
    let residual = gram.iter().map(|v| v * v).sum::<f64>().sqrt();
    if residual < 1e-10 {
        Ok(())
    } else {
        Err(format!("residual {residual:e}"))
    }
}

fn check_stable() -> Result<(), String> {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let n = 5;
    let upsilon = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    let gamma = Array1::from_shape_fn(SkewCoeffs::coeff_count(n), |_| rng.random_range(-1.0..1.0));
    let st = stable_transition(
        &StableTransitionRaw::new(upsilon.clone(), SkewCoeffs::new(n, gamma).unwrap()).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    // power iteration on A^T A as an in-process spectral oracle
    let ata = st.a.t().dot(&st.a);
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    for _ in 0..500 {
        v = ata.dot(&v);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v /= norm;
    }
    let sigma_max = ata.dot(&v).dot(&v).sqrt();
    let want = upsilon.iter().map(|u| u.tanh().abs()).fold(0.0, f64::max);
    if (sigma_max - want).abs() < 1e-9 && sigma_max < 1.0 {
        Ok(())
    } else {
        Err(format!("sigma_max {sigma_max} vs tanh bound {want}"))
    }
}

fn gradient_check(base: BaseModel) -> Result<(), String> {
    let dims = ModelDims {
        n: 3,
        m: 1,
        p: 1,
        k: 2,
        h: 5,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut phi = HyperNetParams::init(dims, base, &mut rng);
    phi.log_s = -0.8;
    let z = LatentCode(Array1::from(vec![0.4, -0.6]));
    let mut u = Array2::zeros((8, 1));
    u[[0, 0]] = 1.0;
    let y = Array2::from_shape_fn((8, 1), |_| rng.random_range(-0.5..0.5));
    let grad = loss_backward(&phi, dims, base, &z, u.view(), y.view())
        .map_err(|e| e.to_string())?;
    let flat = phi.to_flat();
    let analytic = grad.phi.to_flat();
    let h = 1e-5;
    // spot-check a spread of coordinates
    for idx in (0..flat.len()).step_by(flat.len() / 17 + 1) {
        let mut plus = flat.clone();
        plus[idx] += h;
        let mut minus = flat.clone();
        minus[idx] -= h;
        let f = |x: &[f64]| {
            let p = phi.from_flat(x).unwrap();
            loss_backward(&p, dims, base, &z, u.view(), y.view())
                .unwrap()
                .loglik
        };
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let err = (analytic[idx] - fd).abs() / f64::max(1.0, fd.abs());
        if err > 1e-5 {
            return Err(format!("coord {idx}: analytic {} fd {fd}", analytic[idx]));
        }
    }
    Ok(())
}

fn check_grad_lds() -> Result<(), String> {
    gradient_check(BaseModel::Lds)
}

fn check_grad_rnn() -> Result<(), String> {
    gradient_check(BaseModel::Rnn)
}

fn check_sobol() -> Result<(), String> {
    let pts = sobol_uniform(3, 1, 1).map_err(|e| e.to_string())?;
    if pts[[0, 0]] == 0.5 && pts[[1, 0]] == 0.75 && pts[[2, 0]] == 0.25 {
        Ok(())
    } else {
        Err(format!("first points {:?}", pts.column(0).to_vec()))
    }
}

fn check_inv_cdf() -> Result<(), String> {
    let zero = inv_std_normal_cdf(0.5);
    let upper = inv_std_normal_cdf(0.975);
    if zero.abs() < 1e-15 && (upper - 1.959963984540054).abs() < 1e-9 {
        Ok(())
    } else {
        Err(format!("phi^-1(0.5) = {zero}, phi^-1(0.975) = {upper}"))
    }
}

fn check_weights() -> Result<(), String> {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let ll = Array2::from_shape_fn((20, 3), |_| rng.random_range(-50.0..10.0));
    let w = construct_weights(ll.view()).map_err(|e| e.to_string())?;
    for c in 0..3 {
        let sum: f64 = w.column(c).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(format!("column {c} sums to {sum}"));
        }
    }
    Ok(())
}

fn check_ess() -> Result<(), String> {
    let uniform = vec![1.0 / 250.0; 250];
    let e = ess(&uniform).map_err(|e| e.to_string())?;
    if (e - 250.0).abs() < 1e-9 {
        Ok(())
    } else {
        Err(format!("uniform ess {e}"))
    }
}

fn check_em() -> Result<(), String> {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let samples = Array2::from_shape_fn((30, 2), |_| rng.random_range(-2.0..2.0));
    let mut w: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= total;
    }
    let fit = weighted_em(
        samples.view(),
        &w,
        1,
        EmInit::KmeansPlusPlus { iters: 5 },
        3,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let (mean, _) = weighted_moments(samples.view(), &w);
    let got = &fit.mixture.components()[0].mean;
    if got.iter().zip(mean.iter()).all(|(a, b)| (a - b).abs() < 1e-12) {
        Ok(())
    } else {
        Err("weighted mean mismatch".into())
    }
}

fn check_dataset() -> Result<(), String> {
    let (a, _) = dho::make_dataset(3, 0, 42);
    let (b, _) = dho::make_dataset(3, 0, 42);
    if a == b {
        Ok(())
    } else {
        Err("same seed produced different datasets".into())
    }
}
