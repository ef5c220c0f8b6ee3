//! Post-hoc analyses: unit classification, time-cell fits, psychometric
//! curves, learning-curve aggregation and activity dumps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, TaskSpec, TrialOutcome, RIGHT};
use crate::error::{Error, Result};
use crate::nets::Agent;
use crate::trainer::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Silent when the peak magnitude is below this fraction of the largest unit's.
    #[serde(default = "d_silent")]
    pub silent: f64,
    /// Persistent when the coefficient of variation of the normalized trace is below this.
    #[serde(default = "d_persistent")]
    pub persistent_cv: f64,
    #[serde(default = "d_monotonic")]
    pub monotonic_rho: f64,
    #[serde(default = "d_fit_r2")]
    pub fit_r2: f64,
    #[serde(default = "d_min_trials")]
    pub min_trials: usize,
}

fn d_silent() -> f64 {
    1e-6
}
fn d_persistent() -> f64 {
    0.05
}
fn d_monotonic() -> f64 {
    0.95
}
fn d_fit_r2() -> f64 {
    0.8
}
fn d_min_trials() -> usize {
    50
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            silent: d_silent(),
            persistent_cv: d_persistent(),
            monotonic_rho: d_monotonic(),
            fit_r2: d_fit_r2(),
            min_trials: d_min_trials(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Silent,
    Persistent,
    Monotonic,
    Transient,
}

impl CellClass {
    pub fn name(self) -> &'static str {
        match self {
            CellClass::Silent => "silent",
            CellClass::Persistent => "persistent",
            CellClass::Monotonic => "monotonic",
            CellClass::Transient => "transient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussFit {
    pub amplitude: f64,
    pub peak: f64,
    pub std: f64,
    pub offset: f64,
    pub r2: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub unit: usize,
    pub class: CellClass,
    /// Present for transient units whose Gaussian fit was accepted.
    pub fit: Option<GaussFit>,
}

impl CellStats {
    pub fn is_time_cell(&self) -> bool {
        self.class == CellClass::Transient && self.fit.is_some()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn gauss_eval(p: &[f64; 4], t: f64) -> f64 {
    let z = (t - p[1]) / p[2];
    p[0] * (-0.5 * z * z).exp() + p[3]
}

fn sse(p: &[f64; 4], y: &[f64]) -> f64 {
    y.iter()
        .enumerate()
        .map(|(t, v)| {
            let e = v - gauss_eval(p, t as f64);
            e * e
        })
        .sum()
}

/// Solve a small dense system by Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for c in 0..4 {
        let piv = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..4 {
            let f = a[r][c] / a[c][c];
            for k in c..4 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Least-squares fit of `a exp(-(t-mu)^2 / 2 s^2) + b` over `t = 0..len`
/// by Levenberg-Marquardt, started at the empirical argmax and second moment.
pub fn fit_gaussian(y: &[f64]) -> Result<GaussFit> {
    if y.len() < 5 {
        return Err(Error::Analysis(format!("gaussian fit needs at least 5 points, got {}", y.len())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let my = mean(y);
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if hi - lo <= 0.0 || sst == 0.0 {
        return Ok(GaussFit {
            amplitude: 0.0,
            peak: 0.0,
            std: 0.0,
            offset: lo,
            r2: 0.0,
            converged: false,
        });
    }
    let argmax = y.iter().enumerate().fold(0, |b, (i, &v)| if v > y[b] { i } else { b });
    let w: Vec<f64> = y.iter().map(|v| v - lo).collect();
    let wsum: f64 = w.iter().sum();
    let var = w
        .iter()
        .enumerate()
        .map(|(t, v)| v * (t as f64 - argmax as f64).powi(2))
        .sum::<f64>()
        / wsum;
    let mut p = [hi - lo, argmax as f64, var.sqrt().max(0.5), lo];
    let mut cost = sse(&p, y);
    let mut mu = 1e-3;
    let mut converged = false;
    for _ in 0..500 {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (t, &v) in y.iter().enumerate() {
            let t = t as f64;
            let z = (t - p[1]) / p[2];
            let e = (-0.5 * z * z).exp();
            let j = [e, p[0] * e * z / p[2], p[0] * e * z * z / p[2], 1.0];
            let r = v - gauss_eval(&p, t);
            for a in 0..4 {
                jtr[a] += j[a] * r;
                for b in 0..4 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut m = jtj;
            for (d, row) in m.iter_mut().enumerate() {
                row[d] += mu * jtj[d][d].max(1e-12);
            }
            let Some(dp) = solve4(m, jtr) else {
                mu *= 10.0;
                continue;
            };
            let mut q = p;
            for k in 0..4 {
                q[k] += dp[k];
            }
            q[2] = q[2].abs().max(1e-9);
            let c = sse(&q, y);
            if c.is_finite() && c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                let step: f64 = dp.iter().zip(&p).map(|(d, v)| (d / v.abs().max(1e-9)).abs()).fold(0.0, f64::max);
                p = q;
                cost = c;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-15 || step < 1e-12 {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            // no downhill step left: at a minimum to numerical precision
            converged = true;
        }
        if converged {
            break;
        }
    }
    Ok(GaussFit {
        amplitude: p[0],
        peak: p[1],
        std: p[2],
        offset: p[3],
        r2: 1.0 - cost / sst,
        converged,
    })
}

/// True when the maximum sits on the first or last sample: a ramp rather
/// than a peak followed by a long decay.
fn peak_at_edge(y: &[f64]) -> bool {
    let i = y.iter().enumerate().fold(0, |b, (i, &v)| if v > y[b] { i } else { b });
    i == 0 || i == y.len() - 1
}

/// Classify units from trial-averaged traces (`traces[unit][t]`), requiring
/// `n_trials` contributing trials.
pub fn classify_units(traces: &[Vec<f64>], n_trials: usize, th: &Thresholds) -> Result<Vec<CellStats>> {
    if n_trials < th.min_trials {
        return Err(Error::Analysis(format!(
            "classification needs at least {} trials, got {n_trials}",
            th.min_trials
        )));
    }
    let global = traces
        .iter()
        .flat_map(|u| u.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    traces
        .iter()
        .enumerate()
        .map(|(unit, y)| {
            if y.len() < 5 {
                return Err(Error::Analysis("traces need at least 5 time points".into()));
            }
            let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            let peak_abs = lo.abs().max(hi.abs());
            let flat = hi - lo <= 1e-12 * peak_abs.max(f64::MIN_POSITIVE);
            let class = if peak_abs <= th.silent * global || global == 0.0 {
                CellClass::Silent
            } else if flat {
                CellClass::Persistent
            } else {
                let norm: Vec<f64> = y.iter().map(|v| (v - lo) / (hi - lo)).collect();
                let m = mean(&norm);
                let sd = (norm.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / norm.len() as f64).sqrt();
                let t: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
                if sd / m < th.persistent_cv {
                    CellClass::Persistent
                } else if peak_at_edge(&norm) && spearman(&norm, &t).abs() >= th.monotonic_rho {
                    CellClass::Monotonic
                } else {
                    CellClass::Transient
                }
            };
            let fit = if class == CellClass::Transient {
                let f = fit_gaussian(y)?;
                let ok = f.converged
                    && f.r2 >= th.fit_r2
                    && f.std > 0.0
                    && f.amplitude > 0.0
                    && f.peak >= 0.0
                    && f.peak <= (y.len() - 1) as f64;
                ok.then_some(f)
            } else {
                None
            };
            Ok(CellStats { unit, class, fit })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

/// Ordinary least squares of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<Regression> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Analysis("regression needs two equal-length samples of size >= 2".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx <= 1e-12 * (mx * mx).max(1.0) * x.len() as f64 {
        return Err(Error::Analysis("degenerate regression: all x values equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sst: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let ssr: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let e = b - (intercept + slope * a);
            e * e
        })
        .sum();
    let r2 = if sst == 0.0 { 1.0 } else { 1.0 - ssr / sst };
    Ok(Regression {
        slope,
        intercept,
        r2,
        n: x.len(),
    })
}

/// Regress fitted std on fitted peak over accepted time cells.
pub fn peak_width_regression(cells: &[CellStats]) -> Result<Regression> {
    let fits: Vec<&GaussFit> = cells.iter().filter(|c| c.is_time_cell()).filter_map(|c| c.fit.as_ref()).collect();
    if fits.len() < 5 {
        return Err(Error::Analysis(format!("peak-width regression needs 5 time cells, got {}", fits.len())));
    }
    let x: Vec<f64> = fits.iter().map(|f| f.peak).collect();
    let y: Vec<f64> = fits.iter().map(|f| f.std).collect();
    ols(&x, &y)
}

pub const CELLSTATS_HEADER: &str = "unit,class,peak,std,r2,config_hash";

pub fn write_cellstats<W: Write>(mut out: W, cells: &[CellStats], config_hash: &str) -> Result<()> {
    writeln!(out, "{CELLSTATS_HEADER}")?;
    for c in cells {
        match &c.fit {
            Some(f) => writeln!(out, "{},{},{},{},{},{config_hash}", c.unit, c.class.name(), f.peak, f.std, f.r2)?,
            None => writeln!(out, "{},{},,,,{config_hash}", c.unit, c.class.name())?,
        }
    }
    Ok(())
}

/// Time cells ordered by fitted peak.
pub fn sort_by_peak(cells: &[CellStats]) -> Vec<&CellStats> {
    let mut v: Vec<&CellStats> = cells.iter().filter(|c| c.is_time_cell()).collect();
    v.sort_by(|a, b| a.fit.unwrap().peak.total_cmp(&b.fit.unwrap().peak).then(a.unit.cmp(&b.unit)));
    v
}

/// Rows of the normalized heatmap for the sorted time cells, plus how
/// diagonal it is: Spearman correlation between row order and row argmax.
pub fn heatmap_rows(traces: &[Vec<f64>], cells: &[CellStats]) -> (Vec<Vec<f64>>, f64) {
    let rows: Vec<Vec<f64>> = sort_by_peak(cells)
        .iter()
        .map(|c| {
            let y = &traces[c.unit];
            let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            y.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
        })
        .collect();
    let order: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
    let argmax: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().enumerate().fold(0, |b, (i, &v)| if v > r[b] { i } else { b }) as f64)
        .collect();
    let diag = if rows.len() >= 2 { spearman(&order, &argmax) } else { 0.0 };
    (rows, diag)
}

/// Render normalized rows as a grayscale PNG, `cell` pixels per row and
/// at most `max_width` pixels wide.
pub fn write_heatmap_png(path: &Path, rows: &[Vec<f64>], row_px: u32) -> Result<()> {
    let h_units = rows.len() as u32;
    let t_len = rows.first().map(|r| r.len()).unwrap_or(0) as u32;
    if h_units == 0 || t_len == 0 {
        return Err(Error::Analysis("heatmap needs at least one row".into()));
    }
    let xs = (600 / t_len).max(1);
    let img = image::GrayImage::from_fn(t_len * xs, h_units * row_px, |x, y| {
        let v = rows[(y / row_px) as usize][(x / xs) as usize];
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Analysis(format!("writing {}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychPoint {
    pub interval: usize,
    pub n: usize,
    pub n_long: usize,
    pub p_long: f64,
    pub lo: f64,
    pub hi: f64,
    /// Trials without a registered choice.
    pub n_timeout: usize,
}

/// Wilson score interval at 95%.
pub fn wilson(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let nf = n as f64;
    let p = k as f64 / nf;
    let d = 1.0 + z * z / nf;
    let c = (p + z * z / (2.0 * nf)) / d;
    let h = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / d;
    ((c - h).max(0.0), (c + h).min(1.0))
}

/// P(long) per interval from interval-timing trials. `intervals` lists the
/// intervals that must be covered by at least `min_per_interval` choices.
pub fn psychometric_curve(outcomes: &[TrialOutcome], intervals: &[usize], min_per_interval: usize) -> Result<Vec<PsychPoint>> {
    intervals
        .iter()
        .map(|&iv| {
            let of: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.durations.first() == Some(&iv)).collect();
            let chosen: Vec<&&TrialOutcome> = of.iter().filter(|o| o.action.is_some()).collect();
            let n = chosen.len();
            if n < min_per_interval {
                return Err(Error::Analysis(format!(
                    "interval {iv} has {n} choice trials, need {min_per_interval}"
                )));
            }
            let n_long = chosen.iter().filter(|o| o.action == Some(RIGHT)).count();
            let (lo, hi) = wilson(n_long, n);
            Ok(PsychPoint {
                interval: iv,
                n,
                n_long,
                p_long: n_long as f64 / n as f64,
                lo,
                hi,
                n_timeout: of.len() - n,
            })
        })
        .collect()
}

pub const PSYCH_HEADER: &str = "scale,interval,n,n_long,p_long,ci_low,ci_high,n_timeout,config_hash";

pub fn write_psychometric<W: Write>(out: &mut W, scale: f64, pts: &[PsychPoint], config_hash: &str) -> Result<()> {
    for p in pts {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{config_hash}",
            scale, p.interval, p.n, p.n_long, p.p_long, p.lo, p.hi, p.n_timeout
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAccuracy {
    pub scale: f64,
    pub n: usize,
    pub accuracy: f64,
    /// Durations at this scale exceed the memory's tau* range.
    pub out_of_range: bool,
}

/// Greedy accuracy of a fixed agent at one scale, with the trial outcomes.
pub fn scale_eval(agent: &Agent, base: &EnvSpec, scale: f64, n_trials: usize) -> Result<(ScaleAccuracy, Vec<TrialOutcome>)> {
    let spec = EnvSpec { scale, ..base.clone() };
    spec.validate()?;
    let out_of_range = agent
        .engine()
        .map(|e| spec.max_memory_span() as f64 > e.config().taustar_max)
        .unwrap_or(false);
    if out_of_range {
        log::warn!("scale {scale}: task durations exceed tau*max, invariance not expected");
    }
    let r = evaluate(agent, &spec, n_trials, false)?;
    let acc = ScaleAccuracy {
        scale,
        n: n_trials,
        accuracy: r.accuracy(),
        out_of_range,
    };
    Ok((acc, r.outcomes))
}

/// Greedy accuracy of a fixed agent across environment scales.
pub fn cross_scale_eval(agent: &Agent, base: &EnvSpec, scales: &[f64], n_trials: usize) -> Result<Vec<ScaleAccuracy>> {
    scales.iter().map(|&s| Ok(scale_eval(agent, base, s, n_trials)?.0)).collect()
}

/// Trailing moving average (shorter at the start).
pub fn smooth(x: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i];
        if i >= w {
            acc -= x[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub trial: usize,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Mean and standard error across runs of smoothed per-trial rewards.
/// Runs may have different lengths; each point uses the runs that reach it.
pub fn aggregate_curves(runs: &[Vec<f64>], window: usize) -> Vec<CurvePoint> {
    let sm: Vec<Vec<f64>> = runs.iter().map(|r| smooth(r, window)).collect();
    let len = sm.iter().map(|r| r.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let v: Vec<f64> = sm.iter().filter_map(|r| r.get(i).copied()).collect();
            let n = v.len();
            let m = mean(&v);
            let se = if n > 1 {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            CurvePoint {
                trial: i + 1,
                mean: m,
                stderr: se,
                n,
            }
        })
        .collect()
}

/// Distinct values of the `config_hash` column of a CSV file, in order of appearance.
pub fn read_config_hashes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let Some(col) = header.split(',').position(|h| h == "config_hash") else {
        return Ok(Vec::new());
    };
    let mut out: Vec<String> = Vec::new();
    for l in lines.filter(|l| !l.is_empty()) {
        if let Some(h) = l.split(',').nth(col) {
            if !out.iter().any(|o| o == h) {
                out.push(h.to_string());
            }
        }
    }
    Ok(out)
}

/// Read the reward column of a learning-curve CSV.
pub fn read_curve_rewards(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Analysis(format!("{}: empty curve file", path.display())))?;
    let col = header
        .split(',')
        .position(|h| h == "reward")
        .ok_or_else(|| Error::Analysis(format!("{}: no reward column", path.display())))?;
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Analysis(format!("{}: bad row {l:?}", path.display())))
        })
        .collect()
}

/// Per-trial metadata stored next to an activity matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub interval: Option<usize>,
    pub durations: Vec<usize>,
    pub action: Option<usize>,
    pub correct: bool,
    /// Step index of the interval onset; the time axis is taken relative to it.
    pub onset: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivitySidecar {
    pub format_version: u32,
    pub layer: String,
    pub core: String,
    pub units: Vec<usize>,
    pub config_hash: String,
    pub scale: f64,
    pub trials: Vec<TrialMeta>,
}

/// Recorded layer activity, `trials[i][t][unit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityRecord {
    pub sidecar: ActivitySidecar,
    pub trials: Vec<Vec<Vec<f64>>>,
}

const DUMP_MAGIC: &[u8; 8] = b"CGRNACT1";

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

impl ActivityRecord {
    /// Write `<path>` (binary) and `<path>.json` (sidecar).
    /// Binary layout: magic, u64 n_trials, u64 n_units, then per trial
    /// u64 n_steps followed by n_steps * n_units little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n_units = self.sidecar.units.len();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.trials.len() as u64).to_le_bytes())?;
        w.write_all(&(n_units as u64).to_le_bytes())?;
        for tr in &self.trials {
            w.write_all(&(tr.len() as u64).to_le_bytes())?;
            for row in tr {
                if row.len() != n_units {
                    return Err(Error::Shape {
                        what: "activity row",
                        expected: n_units,
                        got: row.len(),
                    });
                }
                for v in row {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: ActivitySidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Analysis(format!("{}: not an activity dump", path.display())));
        }
        let mut u = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let n_trials = read_u64(&mut r)? as usize;
        let n_units = read_u64(&mut r)? as usize;
        if n_units != sidecar.units.len() || n_trials != sidecar.trials.len() {
            return Err(Error::Analysis("activity dump and sidecar disagree".into()));
        }
        let mut trials = Vec::with_capacity(n_trials);
        let mut buf = [0u8; 8];
        for _ in 0..n_trials {
            let steps = read_u64(&mut r)? as usize;
            let mut tr = Vec::with_capacity(steps);
            for _ in 0..steps {
                let mut row = Vec::with_capacity(n_units);
                for _ in 0..n_units {
                    r.read_exact(&mut buf)?;
                    row.push(f64::from_le_bytes(buf));
                }
                tr.push(row);
            }
            trials.push(tr);
        }
        Ok(Self { sidecar, trials })
    }

    /// Average over trials with the given interval of the activity in
    /// `[onset, onset + len)`. Returns `(traces[unit][t], n_trials)`.
    pub fn interval_average(&self, interval: usize, len: usize) -> Result<(Vec<Vec<f64>>, usize)> {
        let n_units = self.sidecar.units.len();
        let mut acc = vec![vec![0.0; len]; n_units];
        let mut n = 0;
        for (meta, tr) in self.sidecar.trials.iter().zip(&self.trials) {
            if meta.interval != Some(interval) {
                continue;
            }
            let Some(on) = meta.onset else { continue };
            if on + len > tr.len() {
                continue;
            }
            for t in 0..len {
                for (u, v) in tr[on + t].iter().enumerate() {
                    acc[u][t] += v;
                }
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Analysis(format!("no recorded trials with interval {interval}")));
        }
        for row in acc.iter_mut() {
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok((acc, n))
    }
}

/// Greedy rollouts recording the core layer.
pub fn record_activity(agent: &Agent, spec: &EnvSpec, n_trials: usize, config_hash: &str) -> Result<ActivityRecord> {
    let res = evaluate(agent, spec, n_trials, true)?;
    let n_units = res.activity.first().and_then(|t| t.first()).map(|r| r.len()).unwrap_or(0);
    let onset = match spec.task {
        TaskSpec::IntervalTiming { fixation, .. }
        | TaskSpec::IntervalDiscrimination { fixation, .. }
        | TaskSpec::IntervalReproduction { fixation, .. } => Some(spec.scaled(fixation)),
        TaskSpec::DelayedMatchToSample { .. } => Some(0),
    };
    let trials = res
        .outcomes
        .iter()
        .zip(&res.activity)
        .map(|(o, a)| TrialMeta {
            interval: o.durations.first().copied(),
            durations: o.durations.clone(),
            action: o.action,
            correct: o.correct(),
            onset,
            steps: a.len(),
        })
        .collect();
    Ok(ActivityRecord {
        sidecar: ActivitySidecar {
            format_version: 1,
            layer: "core".into(),
            core: agent.kind().name().into(),
            units: (0..n_units).collect(),
            config_hash: config_hash.into(),
            scale: spec.scale,
            trials,
        },
        trials: res.activity,
    })
}

/// Time-cell summary for one activity record.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCellReport {
    pub cells: Vec<CellStats>,
    pub traces: Vec<Vec<f64>>,
    pub regression: Option<Regression>,
    pub diagonality: f64,
    pub n_trials: usize,
}

/// Classify and fit units over the longest recorded interval, aligned to onset.
pub fn time_cell_analysis(rec: &ActivityRecord, th: &Thresholds) -> Result<TimeCellReport> {
    let interval = rec
        .sidecar
        .trials
        .iter()
        .filter_map(|t| t.interval)
        .max()
        .ok_or_else(|| Error::Analysis("activity has no interval metadata".into()))?;
    let (traces, n) = rec.interval_average(interval, interval)?;
    let cells = classify_units(&traces, n, th)?;
    let regression = peak_width_regression(&cells).ok();
    let (_, diagonality) = heatmap_rows(&traces, &cells);
    Ok(TimeCellReport {
        cells,
        traces,
        regression,
        diagonality,
        n_trials: n,
    })
}
