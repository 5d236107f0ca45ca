//! Relative error, masked SSIM, difference maps and Table-style aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::CorruptionLevel;

/// `100 · ‖ref − est‖₂ / ‖ref‖₂` over masked entries.
pub fn relative_error(est: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    if est.len() != reference.len() || mask.len() != reference.len() {
        return Err(Error::InvalidShape(format!(
            "RE inputs differ in length: {} / {} / {}",
            est.len(),
            reference.len(),
            mask.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((&e, &r), &m) in est.iter().zip(reference).zip(mask) {
        if m {
            num += (r - e) * (r - e);
            den += r * r;
        }
    }
    if den == 0.0 {
        return Err(Error::DegenerateInput("reference has zero norm over the mask".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynamicRange {
    /// `max − min` of the reference inside the mask.
    #[default]
    Reference,
    /// `max − min` over both images inside the mask; makes SSIM symmetric.
    Union,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: DynamicRange,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: DynamicRange::Reference }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Mean local SSIM over windows centred on masked pixels of an `ny × nz`
/// image; window samples outside the image are reflected.
pub fn ssim(est: &[f64], reference: &[f64], ny: usize, nz: usize, mask: &[bool], cfg: &SsimConfig) -> Result<f64> {
    let local = ssim_map(est, reference, ny, nz, mask, cfg)?;
    let (sum, count) = local.iter().flatten().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    Ok(sum / count as f64)
}

/// Local SSIM at every masked pixel (`None` elsewhere).
pub fn ssim_map(
    est: &[f64],
    reference: &[f64],
    ny: usize,
    nz: usize,
    mask: &[bool],
    cfg: &SsimConfig,
) -> Result<Vec<Option<f64>>> {
    let n = ny * nz;
    if est.len() != n || reference.len() != n || mask.len() != n {
        return Err(Error::InvalidShape(format!("SSIM inputs must all be {ny}x{nz}")));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateInput("SSIM reference is identically zero".into()));
    }
    if mask.iter().all(|m| !m) {
        return Err(Error::DegenerateInput("SSIM mask is empty".into()));
    }
    let range = |img: &[f64]| {
        img.iter().zip(mask).filter(|(_, &m)| m).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| {
            (lo.min(v), hi.max(v))
        })
    };
    let (mut lo, mut hi) = range(reference);
    if cfg.dynamic_range == DynamicRange::Union {
        let (a, b) = range(est);
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let dr = hi - lo;
    if dr <= 0.0 {
        return Err(Error::DegenerateInput("SSIM reference is constant inside the mask".into()));
    }
    let c1 = (cfg.k1 * dr).powi(2);
    let c2 = (cfg.k2 * dr).powi(2);
    let w = gaussian_window(cfg.window, cfg.sigma);
    let half = (cfg.window / 2) as isize;

    let mut out = vec![None; n];
    for y in 0..ny {
        for z in 0..nz {
            if !mask[y * nz + z] {
                continue;
            }
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..cfg.window {
                let yy = reflect(y as isize + a as isize - half, ny);
                for b in 0..cfg.window {
                    let zz = reflect(z as isize + b as isize - half, nz);
                    let wt = w[a * cfg.window + b];
                    let (x, r) = (est[yy * nz + zz], reference[yy * nz + zz]);
                    mx += wt * x;
                    my += wt * r;
                    mxx += wt * x * x;
                    myy += wt * r * r;
                    mxy += wt * x * r;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            out[y * nz + z] =
                Some(((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    }
    Ok(out)
}

/// `|est − ref|` inside the mask, zero outside.
pub fn difference_map(est: &[f64], reference: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if est.len() != reference.len() || mask.len() != reference.len() {
        return Err(Error::InvalidShape("difference map inputs differ in length".into()));
    }
    Ok(est
        .iter()
        .zip(reference)
        .zip(mask)
        .map(|((e, r), &m)| if m { (e - r).abs() } else { 0.0 })
        .collect())
}

/// Estimator whose output is being scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "Input")]
    Input,
    #[serde(rename = "NLLS")]
    Nlls,
    #[serde(rename = "LEARN-IMG")]
    LearnImg,
    #[serde(rename = "LEARN-BIO")]
    LearnBio,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Input => "Input",
            Method::Nlls => "NLLS",
            Method::LearnImg => "LEARN-IMG",
            Method::LearnBio => "LEARN-BIO",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Mgre,
    R2star,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Mgre => "mgre",
            Target::R2star => "r2star",
        }
    }
}

/// One scored slice (or an aggregate of `n_slices` slices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub level: CorruptionLevel,
    pub target: Target,
    pub re_percent: f64,
    pub ssim: f64,
    pub n_slices: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Per-slice rows the aggregate was computed from.
    pub per_slice: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "method,level,target,re_percent,ssim,n_slices";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                r.method.as_str(),
                r.level.as_str(),
                r.target.as_str(),
                r.re_percent,
                r.ssim,
                r.n_slices
            );
        }
        out
    }

    pub fn find(&self, method: Method, level: CorruptionLevel, target: Target) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method && r.level == level && r.target == target)
    }
}

/// Weighted mean per `(method, level, target)`, each input row weighted by
/// its slice count. Output order: level (light, moderate, heavy, random),
/// then target (mgre before r2star), then method.
pub fn aggregate_table(rows: &[MetricRow]) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::DegenerateInput("no metric rows to aggregate".into()));
    }
    let mut groups: BTreeMap<(CorruptionLevel, Target, Method), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let w = r.n_slices.max(1);
        let e = groups.entry((r.level, r.target, r.method)).or_insert((0.0, 0.0, 0));
        e.0 += r.re_percent * w as f64;
        e.1 += r.ssim * w as f64;
        e.2 += w;
    }
    let aggregated = groups
        .into_iter()
        .map(|((level, target, method), (re, s, n))| MetricRow {
            method,
            level,
            target,
            re_percent: re / n as f64,
            ssim: s / n as f64,
            n_slices: n,
        })
        .collect();
    Ok(MetricReport { rows: aggregated, per_slice: rows.to_vec() })
}
