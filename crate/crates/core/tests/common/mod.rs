//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsrm::nn::{ParamId, ParamStore, Session};
use tsrm::tensor::{Scalar, Tape, Tensor, Var};

pub const FD_STEP: Scalar = 1e-5;
pub const GRAD_REL_TOL: Scalar = 1e-4;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`; 0 when both vanish.
pub fn rel_err(auto: &[Scalar], numeric: &[Scalar]) -> Scalar {
    let diff: Scalar = auto.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<Scalar>().sqrt();
    let na: Scalar = auto.iter().map(|a| a * a).sum::<Scalar>().sqrt();
    let nn: Scalar = numeric.iter().map(|a| a * a).sum::<Scalar>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference check of a scalar function of tensor inputs.
/// Returns one relative error per input.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> Vec<Scalar> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| -> Scalar {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).item()
    };

    inputs
        .iter()
        .enumerate()
        .map(|(i, input)| {
            let auto = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            let mut numeric = vec![0.0; input.numel()];
            let mut xs = inputs.to_vec();
            for (j, slot) in numeric.iter_mut().enumerate() {
                let orig = input.data()[j];
                xs[i].data_mut()[j] = orig + FD_STEP;
                let up = eval(&xs);
                xs[i].data_mut()[j] = orig - FD_STEP;
                let down = eval(&xs);
                xs[i].data_mut()[j] = orig;
                *slot = (up - down) / (2.0 * FD_STEP);
            }
            rel_err(auto.data(), &numeric)
        })
        .collect()
}

/// Central-difference check of a scalar function of the parameters in
/// `store`. At most `per_tensor` random coordinates of each parameter are
/// probed. Returns `(name, rel_err)` per parameter that requires grad.
pub fn check_params(
    store: &ParamStore,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Session) -> Var,
) -> Vec<(String, Scalar)> {
    let session_rng = || ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut s = Session::new(store, true, true, session_rng());
    let loss = f(&mut s);
    let grads = s.backward(loss).unwrap();

    let eval = |st: &ParamStore| -> Scalar {
        let mut s = Session::new(st, true, false, session_rng());
        let l = f(&mut s);
        s.tape.value(l).item()
    };

    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let ids: Vec<(ParamId, String, bool, usize)> = store
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.trainable, p.value.numel()))
        .collect();
    let mut out = Vec::new();
    for (id, name, trainable, numel) in ids {
        if !trainable {
            continue;
        }
        let coords: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            (0..per_tensor).map(|_| pick.random_range(0..numel)).collect()
        };
        let auto_full = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()));
        let mut auto = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let orig = work.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(id).value.data_mut()[j] = orig;
            auto.push(auto_full.data()[j]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        out.push((name, rel_err(&auto, &numeric)));
    }
    out
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Brute-force count of window start positions `i*stride` whose dilated
/// taps all fall inside `[0, len)`.
pub fn enumerate_windows(len: usize, kernel: usize, dilation: usize, stride: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    loop {
        let last_tap = start + dilation * (kernel - 1);
        if last_tap >= len {
            return count;
        }
        count += 1;
        start += stride;
    }
}

/// Equation-by-equation scalar loop for the forecasting objective.
pub fn forecast_loss_oracle(yhat: &[Scalar], y: &[Scalar], horizon: usize, features: usize) -> Scalar {
    let mut total = 0.0;
    for i in 0..horizon {
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for f in 0..features {
            let e = yhat[i * features + f] - y[i * features + f];
            l1 += e.abs();
            l2 += e * e;
        }
        total += l1 + l2;
    }
    total / (features * horizon) as Scalar
}

/// Scalar loop for the masked/unmasked imputation objective.
pub fn imputation_loss_oracle(yhat: &[Scalar], y: &[Scalar], mask: &[Scalar], ratio: Scalar, len: usize, features: usize) -> Scalar {
    let mut masked = 0.0;
    let mut unmasked = 0.0;
    for i in 0..len {
        let (mut m1, mut m2, mut u1, mut u2) = (0.0, 0.0, 0.0, 0.0);
        for f in 0..features {
            let k = i * features + f;
            let e = yhat[k] - y[k];
            let me = mask[k] * e;
            let ue = (1.0 - mask[k]) * e;
            m1 += me.abs();
            m2 += me * me;
            u1 += ue.abs();
            u2 += ue * ue;
        }
        masked += m1 + m2;
        unmasked += u1 + u2;
    }
    let ft = (features * len) as Scalar;
    let lm = masked / (ratio * ft);
    let lu = unmasked / ((1.0 - ratio) * ft);
    lm / ratio + lu
}

/// Bisection for the 1.5-entmax threshold: finds `tau` with
/// `sum_i max(z_i/2 - tau, 0)^2 = 1`.
pub fn entmax15_bisect(z: &[Scalar]) -> Vec<Scalar> {
    let half: Vec<Scalar> = z.iter().map(|v| v / 2.0).collect();
    let max = half.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let mass = |tau: Scalar| -> Scalar { half.iter().map(|&v| (v - tau).max(0.0).powi(2)).sum() };
    // mass(max - 1) >= 1 and mass(max) = 0 bracket the root.
    let (mut lo, mut hi) = (max - 1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    half.iter().map(|&v| (v - tau).max(0.0).powi(2)).collect()
}

/// Noisy two-channel sine data `[len, 2]` for the end-to-end checks.
pub fn noisy_sines(len: usize, seed: u64) -> Vec<Scalar> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len * 2);
    for t in 0..len {
        let tf = t as Scalar;
        let a = (2.0 * std::f64::consts::PI as Scalar * tf / 24.0).sin();
        let b = 0.8 * (2.0 * std::f64::consts::PI as Scalar * tf / 60.0 + 1.0).sin()
            + 0.3 * (2.0 * std::f64::consts::PI as Scalar * tf / 13.0).cos();
        out.push(a + 0.1 * rng.random_range(-1.0..1.0));
        out.push(b + 0.1 * rng.random_range(-1.0..1.0));
    }
    out
}
