//! Voxel-wise nonlinear least-squares fitting of the mono-exponential model
//! with a precomputed dephasing factor.
//!
//! Both fitters use Levenberg-Marquardt with an analytic Jacobian, Marquardt
//! diagonal scaling and a ×10 / ÷10 damping schedule. A trial step is only
//! accepted when it does not increase the sum of squared residuals. A few
//! undamped Gauss-Newton steps then settle the stationary point to rounding
//! precision, so that rescaled inputs give identical rates.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::FFunctionTable;
use crate::tensor::{BinaryMask, MultiEchoVolume, RealMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    pub lambda0: f64,
    pub tol_step: f64,
    pub r2star_bounds: (f64, f64),
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { max_iters: 400, lambda0: 1e-3, tol_step: 1e-10, r2star_bounds: (0.0, 300.0) }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        let (lo, hi) = self.r2star_bounds;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("r2star bounds ({lo}, {hi}) are not ordered")));
        }
        if !(self.lambda0 > 0.0 && self.tol_step > 0.0) {
            return Err(Error::InvalidArgument("lambda0 and tol_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Magnitude,
    Complex,
}

/// Result of a magnitude fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudeFit {
    pub s0: f64,
    pub r2star: f64,
    pub residual: f64,
    pub iterations: usize,
    pub rejected: usize,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComplexFit {
    pub s0: f64,
    pub r2star: f64,
    pub omega: f64,
    pub phi0: f64,
    pub residual: f64,
    pub iterations: usize,
    pub rejected: usize,
    pub degenerate: bool,
}

/// Counters aggregated over a volume fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub voxels: usize,
    pub iterations: usize,
    pub rejected_steps: usize,
    pub degenerate: usize,
}

/// Parameter maps produced by [`fit_volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct QuantMaps {
    pub s0_map: RealMap,
    pub r2star_map: RealMap,
    pub omega_map: Option<RealMap>,
    pub residual_map: RealMap,
    pub mask: BinaryMask,
}

struct LmOutcome<const P: usize> {
    params: [f64; P],
    sse: f64,
    iterations: usize,
    rejected: usize,
}

/// Solves the `P × P` system `a · x = b` by Gaussian elimination with
/// partial pivoting. Returns `None` for a singular matrix.
fn solve<const P: usize>(mut a: [[f64; P]; P], mut b: [f64; P]) -> Option<[f64; P]> {
    for col in 0..P {
        let pivot = (col..P).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..P {
            let factor = a[row][col] / a[col][col];
            for k in col..P {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0; P];
    for row in (0..P).rev() {
        let tail: f64 = (row + 1..P).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Generic bounded Levenberg-Marquardt loop.
///
/// `eval` fills residuals and, when asked, the Jacobian rows; `project`
/// clamps a trial point onto the feasible set.
fn levenberg_marquardt<const P: usize>(
    init: [f64; P],
    m: usize,
    cfg: &FitConfig,
    eval: impl Fn(&[f64; P], &mut [f64], Option<&mut [[f64; P]]>),
    project: impl Fn(&mut [f64; P]),
) -> LmOutcome<P> {
    let mut p = init;
    project(&mut p);
    let mut r = vec![0.0; m];
    let mut jac = vec![[0.0; P]; m];
    eval(&p, &mut r, Some(&mut jac));
    let mut sse: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = cfg.lambda0;
    let mut iterations = 0;
    let mut rejected = 0;
    let mut trial_r = vec![0.0; m];

    while iterations < cfg.max_iters && sse > 0.0 {
        iterations += 1;
        let (jtj, jtr) = normal_equations(&jac, &r);
        let mut damped = jtj;
        for i in 0..P {
            damped[i][i] += lambda * jtj[i][i].max(1e-300);
        }
        let neg: [f64; P] = jtr.map(|v| -v);
        let Some(step) = solve(damped, neg) else {
            lambda *= 10.0;
            rejected += 1;
            if lambda > 1e20 {
                break;
            }
            continue;
        };
        let mut trial: [f64; P] = std::array::from_fn(|i| p[i] + step[i]);
        project(&mut trial);
        let taken: [f64; P] = std::array::from_fn(|i| trial[i] - p[i]);
        let small = taken.iter().zip(&p).all(|(d, v)| d.abs() <= cfg.tol_step * (v.abs() + cfg.tol_step));
        eval(&trial, &mut trial_r, None);
        let trial_sse: f64 = trial_r.iter().map(|v| v * v).sum();
        if trial_sse.is_finite() && trial_sse <= sse {
            p = trial;
            std::mem::swap(&mut r, &mut trial_r);
            sse = trial_sse;
            lambda = (lambda / 10.0).max(1e-15);
            if small {
                break;
            }
            eval(&p, &mut r, Some(&mut jac));
        } else {
            rejected += 1;
            lambda *= 10.0;
            if small || lambda > 1e20 {
                break;
            }
        }
    }
    if sse > 0.0 {
        polish(&mut p, &mut sse, m, &eval, &project);
    }
    LmOutcome { params: p, sse, iterations, rejected }
}

fn normal_equations<const P: usize>(jac: &[[f64; P]], r: &[f64]) -> ([[f64; P]; P], [f64; P]) {
    let mut jtj = [[0.0; P]; P];
    let mut jtr = [0.0; P];
    for (row, &res) in jac.iter().zip(r) {
        for i in 0..P {
            jtr[i] += row[i] * res;
            for k in 0..P {
                jtj[i][k] += row[i] * row[k];
            }
        }
    }
    (jtj, jtr)
}

/// Undamped Gauss-Newton steps judged by the gradient norm rather than the
/// SSE. Near the minimum SSE differences drown in rounding once steps fall
/// below ~√ε, which would otherwise leave the result resting on whichever
/// point the acceptance test happened to stop at.
fn polish<const P: usize>(
    p: &mut [f64; P],
    sse: &mut f64,
    m: usize,
    eval: &impl Fn(&[f64; P], &mut [f64], Option<&mut [[f64; P]]>),
    project: &impl Fn(&mut [f64; P]),
) {
    let mut r = vec![0.0; m];
    let mut jac = vec![[0.0; P]; m];
    eval(p, &mut r, Some(&mut jac));
    let (mut jtj, mut jtr) = normal_equations(&jac, &r);
    let norm = |g: &[f64; P]| g.iter().map(|v| v * v).sum::<f64>();
    for _ in 0..4 {
        let Some(step) = solve(jtj, jtr.map(|v| -v)) else { return };
        if step.iter().zip(p.iter()).any(|(d, v)| d.abs() > 1e-6 * (v.abs() + 1e-6)) {
            return;
        }
        let mut trial: [f64; P] = std::array::from_fn(|i| p[i] + step[i]);
        project(&mut trial);
        if trial == *p {
            return;
        }
        eval(&trial, &mut r, None);
        let trial_sse: f64 = r.iter().map(|v| v * v).sum();
        if trial_sse.is_nan() || trial_sse > *sse * (1.0 + 1e-12) {
            return;
        }
        eval(&trial, &mut r, Some(&mut jac));
        let (tj, tr) = normal_equations(&jac, &r);
        // a projected step can stall at the bound with a nonzero gradient
        if norm(&tr).partial_cmp(&norm(&jtr)) != Some(std::cmp::Ordering::Less) {
            return;
        }
        *p = trial;
        *sse = trial_sse;
        (jtj, jtr) = (tj, tr);
    }
}

/// Indices of `times` in increasing time order.
fn time_order(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    order
}

/// Log-linear regression of `ln(|s|/|f|)` over the earliest `min(N, 5)`
/// echoes with usable magnitude. Returns `(s0, r2star)`.
fn log_linear_init(mag: &[f64], fmag: &[f64], times: &[f64], cfg: &FitConfig) -> (f64, f64) {
    let order = time_order(times);
    let pts: Vec<(f64, f64)> = order
        .iter()
        .take(mag.len().min(5))
        .filter(|&&i| mag[i] > 1e-12 && fmag[i] > 0.0)
        .map(|&i| (times[i], (mag[i] / fmag[i]).ln()))
        .collect();
    let (lo, hi) = cfg.r2star_bounds;
    let fallback_s0 = order
        .iter()
        .map(|&i| if fmag[i] > 0.0 { mag[i] / fmag[i] } else { 0.0 })
        .fold(0.0, f64::max);
    if pts.len() < 2 {
        return (fallback_s0, lo.max(0.0).min(hi));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = (-slope).clamp(lo, hi);
    let s0 = (my + r2 * mt).exp();
    (s0, r2)
}

/// Fits `|s_n| ≈ s0 · exp(−r2·t_n) · |f_n|` at arbitrary echo times.
pub fn fit_magnitude_at(signal: &[Complex64], f: &[Complex64], times: &[f64], cfg: &FitConfig) -> MagnitudeFit {
    let mag: Vec<f64> = signal.iter().map(|c| c.norm()).collect();
    fit_magnitude_values(&mag, f, times, cfg)
}

/// As [`fit_magnitude_at`] for precomputed magnitudes.
pub fn fit_magnitude_values(mag: &[f64], f: &[Complex64], times: &[f64], cfg: &FitConfig) -> MagnitudeFit {
    assert_eq!(mag.len(), f.len());
    assert_eq!(mag.len(), times.len());
    if mag.iter().all(|&m| m == 0.0) {
        return MagnitudeFit { s0: 0.0, r2star: 0.0, residual: 0.0, iterations: 0, rejected: 0, degenerate: true };
    }
    let fmag: Vec<f64> = f.iter().map(|c| c.norm()).collect();
    let (s0, r2) = log_linear_init(mag, &fmag, times, cfg);
    let (lo, hi) = cfg.r2star_bounds;
    let out = levenberg_marquardt(
        [s0, r2],
        mag.len(),
        cfg,
        |p, res, jac| {
            let [s0, r2] = *p;
            let mut jac = jac;
            for n in 0..times.len() {
                let e = (-r2 * times[n]).exp() * fmag[n];
                res[n] = mag[n] - s0 * e;
                if let Some(j) = jac.as_deref_mut() {
                    j[n] = [-e, s0 * times[n] * e];
                }
            }
        },
        |p| {
            p[0] = p[0].max(0.0);
            p[1] = p[1].clamp(lo, hi);
        },
    );
    MagnitudeFit {
        s0: out.params[0],
        r2star: out.params[1],
        residual: out.sse,
        iterations: out.iterations,
        rejected: out.rejected,
        degenerate: false,
    }
}

/// Joint complex fit of `s0 · e^{iφ0} · exp(−r2·t − iωt) · f` at arbitrary
/// echo times.
pub fn fit_complex_at(signal: &[Complex64], f: &[Complex64], times: &[f64], cfg: &FitConfig) -> ComplexFit {
    assert_eq!(signal.len(), f.len());
    assert_eq!(signal.len(), times.len());
    if signal.iter().all(|c| c.norm() == 0.0) {
        return ComplexFit {
            s0: 0.0,
            r2star: 0.0,
            omega: 0.0,
            phi0: 0.0,
            residual: 0.0,
            iterations: 0,
            rejected: 0,
            degenerate: true,
        };
    }
    let mag: Vec<f64> = signal.iter().map(|c| c.norm()).collect();
    let fmag: Vec<f64> = f.iter().map(|c| c.norm()).collect();
    let (s0, r2) = log_linear_init(&mag, &fmag, times, cfg);
    let order = time_order(times);
    let (a, b) = (order[0], order[1]);
    let ratio = |i: usize| if f[i].norm() > 0.0 { signal[i] / f[i] } else { signal[i] };
    let cross = ratio(b) * ratio(a).conj();
    let omega = if cross.norm() > 0.0 { -cross.arg() / (times[b] - times[a]) } else { 0.0 };
    let phi0 = ratio(a).arg() + omega * times[a];
    let (lo, hi) = cfg.r2star_bounds;
    let m = signal.len();
    let out = levenberg_marquardt(
        [s0, r2, omega, phi0],
        2 * m,
        cfg,
        |p, res, jac| {
            let [s0, r2, w, phi] = *p;
            let mut jac = jac;
            for n in 0..m {
                let t = times[n];
                let unit = Complex64::from_polar((-r2 * t).exp(), phi - w * t) * f[n];
                let model = unit * s0;
                let d = signal[n] - model;
                res[2 * n] = d.re;
                res[2 * n + 1] = d.im;
                if let Some(j) = jac.as_deref_mut() {
                    // derivatives of the residual (= −derivatives of the model)
                    let ds0 = -unit;
                    let dr2 = model * t;
                    let dw = model * Complex64::new(0.0, t);
                    let dphi = -(model * Complex64::new(0.0, 1.0));
                    j[2 * n] = [ds0.re, dr2.re, dw.re, dphi.re];
                    j[2 * n + 1] = [ds0.im, dr2.im, dw.im, dphi.im];
                }
            }
        },
        |p| {
            p[0] = p[0].max(0.0);
            p[1] = p[1].clamp(lo, hi);
        },
    );
    let [s0, r2star, omega, phi0] = out.params;
    let phi0 = (phi0 + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    ComplexFit {
        s0,
        r2star,
        omega,
        phi0,
        residual: out.sse,
        iterations: out.iterations,
        rejected: out.rejected,
        degenerate: false,
    }
}

/// Magnitude fit at the times of an echo schedule.
pub fn fit_voxel_magnitude(
    signal: &[Complex64],
    f: &[Complex64],
    es: &crate::signal::EchoSchedule,
    cfg: &FitConfig,
) -> Result<MagnitudeFit> {
    check_voxel_inputs(signal, f, es.n_echoes)?;
    Ok(fit_magnitude_at(signal, f, &es.times(), cfg))
}

pub fn fit_voxel_complex(
    signal: &[Complex64],
    f: &[Complex64],
    es: &crate::signal::EchoSchedule,
    cfg: &FitConfig,
) -> Result<ComplexFit> {
    check_voxel_inputs(signal, f, es.n_echoes)?;
    Ok(fit_complex_at(signal, f, &es.times(), cfg))
}

fn check_voxel_inputs(signal: &[Complex64], f: &[Complex64], n: usize) -> Result<()> {
    if signal.len() != n || f.len() != n {
        return Err(Error::InvalidShape(format!(
            "expected {n} echoes, got signal {} and F {}",
            signal.len(),
            f.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument("fitting needs at least 3 echoes".into()));
    }
    if f.iter().any(|c| c.norm() == 0.0) {
        return Err(Error::InvalidArgument("F must be nonzero at every echo".into()));
    }
    Ok(())
}

/// Fits every masked voxel of `v`; unmasked voxels stay zero.
pub fn fit_volume(
    v: &MultiEchoVolume,
    f: &FFunctionTable,
    mask: &BinaryMask,
    cfg: &FitConfig,
    mode: FitMode,
) -> Result<(QuantMaps, FitStats)> {
    cfg.validate()?;
    let shape = v.shape();
    if f.shape() != shape {
        return Err(Error::InvalidShape(format!("F table {:?} vs volume {:?}", f.shape(), shape)));
    }
    if mask.shape() != shape.map_dims() {
        return Err(Error::InvalidShape(format!("mask {:?} vs volume {:?}", mask.shape(), shape)));
    }
    if mask.count() == 0 {
        return Err(Error::DegenerateInput("fit mask is empty".into()));
    }
    if shape.echoes < 3 {
        return Err(Error::InvalidArgument("fitting needs at least 3 echoes".into()));
    }
    let times = v.echo_times();
    let ne = shape.echoes;
    let m = mask.values();

    // (s0, r2, omega, residual, iterations, rejected, degenerate)
    let per_voxel: Vec<(f64, f64, f64, f64, usize, usize, bool)> = (0..shape.voxels())
        .into_par_iter()
        .map(|i| {
            if !m[i] {
                return (0.0, 0.0, 0.0, 0.0, 0, 0, false);
            }
            let s = &v.data()[i * ne..(i + 1) * ne];
            let fv = &f.values()[i * ne..(i + 1) * ne];
            match mode {
                FitMode::Magnitude => {
                    let r = fit_magnitude_at(s, fv, times, cfg);
                    (r.s0, r.r2star, 0.0, r.residual, r.iterations, r.rejected, r.degenerate)
                }
                FitMode::Complex => {
                    let r = fit_complex_at(s, fv, times, cfg);
                    (r.s0, r.r2star, r.omega, r.residual, r.iterations, r.rejected, r.degenerate)
                }
            }
        })
        .collect();

    let dims = shape.map_dims();
    let mut stats = FitStats::default();
    let (mut s0, mut r2, mut omega, mut res) = (
        Vec::with_capacity(per_voxel.len()),
        Vec::with_capacity(per_voxel.len()),
        Vec::with_capacity(per_voxel.len()),
        Vec::with_capacity(per_voxel.len()),
    );
    for (i, p) in per_voxel.into_iter().enumerate() {
        s0.push(p.0);
        r2.push(p.1);
        omega.push(p.2);
        res.push(p.3);
        if m[i] {
            stats.voxels += 1;
            stats.iterations += p.4;
            stats.rejected_steps += p.5;
            stats.degenerate += p.6 as usize;
        }
    }
    let maps = QuantMaps {
        s0_map: RealMap::new(dims, s0)?,
        r2star_map: RealMap::new(dims, r2)?,
        omega_map: match mode {
            FitMode::Magnitude => None,
            FitMode::Complex => Some(RealMap::new(dims, omega)?),
        },
        residual_map: RealMap::new(dims, res)?,
        mask: mask.clone(),
    };
    Ok((maps, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{mono_exp, EchoSchedule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn voxel(s0: f64, r2: f64, omega: f64, f: &[Complex64]) -> Vec<Complex64> {
        EchoSchedule::default().times().iter().zip(f).map(|(&t, fv)| mono_exp(s0, r2, omega, t) * fv).collect()
    }

    fn ones(n: usize) -> Vec<Complex64> {
        vec![Complex64::new(1.0, 0.0); n]
    }

    #[test]
    fn noiseless_magnitude_recovery() {
        let es = EchoSchedule::default();
        let cfg = FitConfig::default();
        let s = voxel(50.0, 20.0, 0.0, &ones(10));
        let r = fit_voxel_magnitude(&s, &ones(10), &es, &cfg).unwrap();
        assert!((r.s0 - 50.0).abs() < 1e-6 && (r.r2star - 20.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn accepted_steps_never_increase_sse() {
        let times = EchoSchedule::default().times();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = FitConfig::default();
        for _ in 0..200 {
            let (s0, r2) = (rng.random_range(1.0..100.0), rng.random_range(1.0..200.0));
            let y: Vec<f64> =
                times.iter().map(|t| s0 * (-r2 * t).exp() * (1.0 + 0.05 * rng.random_range(-1.0..1.0))).collect();
            // the Jacobian is only evaluated at the start and at accepted points
            let accepted = std::cell::RefCell::new(Vec::new());
            let eval = |p: &[f64; 2], r: &mut [f64], jac: Option<&mut [[f64; 2]]>| {
                for (i, &t) in times.iter().enumerate() {
                    r[i] = y[i] - p[0] * (-p[1] * t).exp();
                }
                if let Some(jac) = jac {
                    for (i, &t) in times.iter().enumerate() {
                        let e = (-p[1] * t).exp();
                        jac[i] = [-e, p[0] * t * e];
                    }
                    accepted.borrow_mut().push(r.iter().map(|v| v * v).sum::<f64>());
                }
            };
            let start = [rng.random_range(1.0..100.0), rng.random_range(0.0..300.0)];
            let out = levenberg_marquardt(start, times.len(), &cfg, eval, |p| p[1] = p[1].clamp(0.0, 300.0));
            let seq = accepted.into_inner();
            assert!(seq.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{seq:?}");
            assert!(out.sse <= seq[0]);
        }
    }

    #[test]
    fn constant_signal_has_zero_rate() {
        let es = EchoSchedule::default();
        let s = vec![Complex64::new(3.0, 4.0); 10];
        let r = fit_voxel_magnitude(&s, &ones(10), &es, &FitConfig::default()).unwrap();
        assert!(r.r2star <= 1e-8);
        assert!((r.s0 - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_signal_is_degenerate() {
        let es = EchoSchedule::default();
        let z = vec![Complex64::new(0.0, 0.0); 10];
        let r = fit_voxel_magnitude(&z, &ones(10), &es, &FitConfig::default()).unwrap();
        assert!(r.degenerate && r.s0 == 0.0 && r.r2star == 0.0 && r.residual == 0.0);
        let c = fit_voxel_complex(&z, &ones(10), &es, &FitConfig::default()).unwrap();
        assert!(c.degenerate);
    }

    #[test]
    fn voxel_input_validation() {
        let es = EchoSchedule::default();
        let s = voxel(1.0, 10.0, 0.0, &ones(10));
        let mut f = ones(10);
        f[3] = Complex64::new(0.0, 0.0);
        assert!(fit_voxel_magnitude(&s, &f, &es, &FitConfig::default()).is_err());
        assert!(fit_voxel_magnitude(&s[..9], &ones(9), &es, &FitConfig::default()).is_err());
        let short = EchoSchedule { n_echoes: 2, ..es };
        assert!(fit_voxel_magnitude(&s[..2], &ones(2), &short, &FitConfig::default()).is_err());
    }

    #[test]
    fn grid_search_never_beats_lm() {
        let es = EchoSchedule::default();
        let times = es.times();
        let cfg = FitConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for k in 0..100 {
            let s0 = rng.random_range(5.0..100.0);
            let r2 = rng.random_range(5.0..80.0);
            // every tenth voxel carries noise so the optimum has a nonzero SSE
            let mag: Vec<f64> = times
                .iter()
                .map(|&t| s0 * (-r2 * t).exp() + if k % 10 == 0 { rng.random_range(-0.5..0.5) } else { 0.0 })
                .collect();
            let fit = fit_magnitude_values(&mag, &ones(10), &times, &cfg);
            let sse = |a: f64, b: f64| -> f64 {
                mag.iter().zip(&times).map(|(m, &t)| (m - a * (-b * t).exp()).powi(2)).sum()
            };
            let mut best = f64::INFINITY;
            for i in -50..=50 {
                for j in -50..=50 {
                    let a = (fit.s0 * 100.0).round() / 100.0 + 0.01 * i as f64;
                    let b = (fit.r2star * 100.0).round() / 100.0 + 0.01 * j as f64;
                    best = best.min(sse(a, b));
                }
            }
            assert!(fit.residual <= best * (1.0 + 1e-9) + 1e-18, "voxel {k}: LM {} grid {best}", fit.residual);
        }
    }

    #[test]
    fn complex_fit_recovers_frequency() {
        let es = EchoSchedule::default();
        let cfg = FitConfig::default();
        let w = 2.0 * std::f64::consts::PI * 15.0;
        let s: Vec<Complex64> = voxel(40.0, 22.0, w, &ones(10)).iter().map(|c| c * Complex64::from_polar(1.0, 0.7)).collect();
        let r = fit_voxel_complex(&s, &ones(10), &es, &cfg).unwrap();
        assert!((r.omega - w).abs() < 1e-4, "{r:?}");
        assert!((r.phi0 - 0.7).abs() < 1e-8);
        let m = fit_voxel_magnitude(&s, &ones(10), &es, &cfg).unwrap();
        assert!((m.r2star - r.r2star).abs() < 1e-5);

        let still = voxel(40.0, 22.0, 0.0, &ones(10));
        let r0 = fit_voxel_complex(&still, &ones(10), &es, &cfg).unwrap();
        assert!(r0.omega.abs() < 1e-6);
    }

    #[test]
    fn dephasing_factor_is_divided_out() {
        let es = EchoSchedule::default();
        let f: Vec<Complex64> = crate::signal::dephasing_factor([30.0, 10.0, 5.0], &es.times(), 5);
        let s = voxel(80.0, 30.0, 3.0, &f);
        let r = fit_voxel_magnitude(&s, &f, &es, &FitConfig::default()).unwrap();
        assert!((r.r2star - 30.0).abs() < 1e-6);
        let c = fit_voxel_complex(&s, &f, &es, &FitConfig::default()).unwrap();
        assert!((c.r2star - 30.0).abs() < 1e-6 && (c.omega - 3.0).abs() < 1e-4);
    }

    #[test]
    fn scale_equivariance_and_permutation_invariance() {
        let es = EchoSchedule::default();
        let cfg = FitConfig::default();
        let times = es.times();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mag: Vec<f64> = times.iter().map(|&t| 60.0 * (-25.0 * t).exp() + rng.random_range(-1.0..1.0)).collect();
        let base = fit_magnitude_values(&mag, &ones(10), &times, &cfg);
        let scaled: Vec<f64> = mag.iter().map(|m| m * 13.0).collect();
        let r = fit_magnitude_values(&scaled, &ones(10), &times, &cfg);
        assert!((r.r2star - base.r2star).abs() < 1e-9);
        assert!((r.s0 / base.s0 - 13.0).abs() < 1e-9);

        let perm = [3usize, 9, 0, 5, 1, 8, 2, 7, 4, 6];
        let pm: Vec<f64> = perm.iter().map(|&i| mag[i]).collect();
        let pt: Vec<f64> = perm.iter().map(|&i| times[i]).collect();
        let p = fit_magnitude_values(&pm, &ones(10), &pt, &cfg);
        assert!((p.r2star - base.r2star).abs() < 1e-9);
        assert!((p.s0 - base.s0).abs() < 1e-9);
    }

    #[test]
    fn bounds_are_respected() {
        let es = EchoSchedule::default();
        let cfg = FitConfig { r2star_bounds: (0.0, 40.0), ..Default::default() };
        let s = voxel(10.0, 90.0, 0.0, &ones(10));
        let r = fit_voxel_magnitude(&s, &ones(10), &es, &cfg).unwrap();
        assert!(r.r2star <= 40.0);
        // growing signal would want a negative rate
        let grow: Vec<Complex64> = es.times().iter().map(|&t| Complex64::new((10.0 * t).exp(), 0.0)).collect();
        let g = fit_voxel_magnitude(&grow, &ones(10), &es, &FitConfig::default()).unwrap();
        assert_eq!(g.r2star, 0.0);
        assert!(FitConfig { r2star_bounds: (5.0, 1.0), ..Default::default() }.validate().is_err());
        assert!(FitConfig { max_iters: 0, ..Default::default() }.validate().is_err());
    }
}
