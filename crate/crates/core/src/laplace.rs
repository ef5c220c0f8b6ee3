//! Real-domain Laplace memory and its Post-inversion readout.
//!
//! The memory keeps, for every input dimension, a bank of leaky integrators
//! `F_j(t) = e^{-s_j dt} F_j(t-1) + f(t)`. The approximate inverse
//! `f~(tau*) = (-1)^k / k! * s^{k+1} * d^k F / ds^k` is a fixed banded linear
//! map on top of `F`, producing units that fire sequentially after an input
//! pulse and peak at their preferred delay `tau* = k / s`.
//!
//! The internal s grid is a geometric progression that oversamples the
//! output tau* grid by an integer factor and extends `k` nodes beyond each
//! end of it, so that the `k` repeated centered differences used for the
//! derivative leave exactly one output per tau* node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finest internal log-spacing of the s grid used when `oversample` is not set.
pub const DEFAULT_MAX_LOG_SPACING: f64 = 0.015;

fn default_dt() -> f64 {
    1.0
}

fn default_input_dim() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub taustar_min: f64,
    pub taustar_max: f64,
    pub n_taus: usize,
    pub k: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Internal s nodes per output tau* interval. `None` picks the smallest
    /// factor whose log-spacing is at most [`DEFAULT_MAX_LOG_SPACING`].
    #[serde(default)]
    pub oversample: Option<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            taustar_min: 1.0,
            taustar_max: 1000.0,
            n_taus: 8,
            k: 8,
            dt: 1.0,
            input_dim: 1,
            oversample: None,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::MemoryConfig(m.to_string()));
        if !(self.taustar_min > 0.0) || !self.taustar_min.is_finite() {
            return bad("taustar_min must be positive");
        }
        if !(self.taustar_max > self.taustar_min) || !self.taustar_max.is_finite() {
            return bad("taustar_max must exceed taustar_min");
        }
        if self.n_taus < 2 {
            return bad("n_taus must be at least 2");
        }
        if self.k < 2 || self.k % 2 != 0 {
            return bad("k must be a positive even integer");
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad("dt must be positive");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.oversample == Some(0) {
            return bad("oversample must be at least 1");
        }
        Ok(())
    }

    /// Ratio between consecutive output tau* values.
    pub fn ratio(&self) -> f64 {
        (self.taustar_max / self.taustar_min).powf(1.0 / (self.n_taus - 1) as f64)
    }

    pub fn taustars(&self) -> Vec<f64> {
        let r = self.ratio();
        (0..self.n_taus)
            .map(|i| self.taustar_min * r.powi(i as i32))
            .collect()
    }

    pub fn resolved_oversample(&self) -> usize {
        self.oversample.unwrap_or_else(|| {
            let lr = self.ratio().ln();
            ((lr / DEFAULT_MAX_LOG_SPACING).ceil() as usize).max(1)
        })
    }

    /// Number of internal s nodes.
    pub fn n_s(&self) -> usize {
        (self.n_taus - 1) * self.resolved_oversample() + 1 + 2 * self.k
    }
}

/// One row of the inverse operator: `coeffs` apply to `F[start..start + coeffs.len()]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseRow {
    pub start: usize,
    pub coeffs: Vec<f64>,
}

impl InverseRow {
    #[inline]
    pub fn apply(&self, f: &[f64]) -> f64 {
        self.coeffs
            .iter()
            .zip(&f[self.start..self.start + self.coeffs.len()])
            .map(|(c, x)| c * x)
            .sum()
    }
}

/// Immutable memory operators built from a [`MemoryConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEngine {
    config: MemoryConfig,
    taustars: Vec<f64>,
    s: Vec<f64>,
    decay: Vec<f64>,
    inverse: Vec<InverseRow>,
    /// Index into `s` of the node belonging to each output tau*.
    output_nodes: Vec<usize>,
}

fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// Banded rows of the Post inverse `((-1)^k/k!) s^{k+1} d^k/ds^k` on the
/// given grid, one per interior node `k..n-k`.
fn inverse_rows(s_grid: &[f64], k: usize) -> Result<Vec<InverseRow>> {
    let n = s_grid.len();
    if n < 2 * k + 1 {
        return Err(Error::Shape {
            what: "s grid length (needs 2k+1 nodes)",
            expected: 2 * k + 1,
            got: n,
        });
    }
    let increasing = s_grid[1] > s_grid[0];
    for j in 1..n {
        let ok = if increasing {
            s_grid[j] > s_grid[j - 1]
        } else {
            s_grid[j] < s_grid[j - 1]
        };
        if !ok || !s_grid[j].is_finite() {
            return Err(Error::NonMonotoneGrid(j));
        }
    }
    if s_grid.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::MemoryConfig("s values must be positive".into()));
    }

    // level[j] is the stencil of the a-th derivative at node j, covering
    // nodes j-a..=j+a.
    let mut level: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0]).collect();
    for a in 0..k {
        let mut next = vec![Vec::new(); n];
        for j in (a + 1)..(n - a - 1) {
            let h = s_grid[j + 1] - s_grid[j - 1];
            let plus = &level[j + 1];
            let minus = &level[j - 1];
            let w = 2 * (a + 1) + 1;
            let mut st = vec![0.0; w];
            // plus covers j+1-a..=j+1+a, offset 2 inside the new window
            for (i, c) in plus.iter().enumerate() {
                st[i + 2] += c / h;
            }
            for (i, c) in minus.iter().enumerate() {
                st[i] -= c / h;
            }
            next[j] = st;
        }
        level = next;
    }

    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let lnkf = ln_factorial(k);
    Ok((k..n - k)
        .map(|j| {
            let pref = sign * ((k as f64 + 1.0) * s_grid[j].ln() - lnkf).exp();
            InverseRow {
                start: j - k,
                coeffs: level[j].iter().map(|c| c * pref).collect(),
            }
        })
        .collect())
}

/// Dense Post-inversion matrix on `s_grid` (rows = interior nodes `k..n-k`).
pub fn build_inverse_operator(s_grid: &[f64], k: usize) -> Result<Vec<Vec<f64>>> {
    let n = s_grid.len();
    Ok(inverse_rows(s_grid, k)?
        .into_iter()
        .map(|row| {
            let mut dense = vec![0.0; n];
            dense[row.start..row.start + row.coeffs.len()].copy_from_slice(&row.coeffs);
            dense
        })
        .collect())
}

impl MemoryEngine {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        let k = config.k;
        let over = config.resolved_oversample();
        let fine_ratio = config.ratio().powf(1.0 / over as f64);
        let n_s = config.n_s();
        let internal_taus: Vec<f64> = (0..n_s)
            .map(|j| config.taustar_min * fine_ratio.powi(j as i32 - k as i32))
            .collect();
        let s: Vec<f64> = internal_taus.iter().map(|t| k as f64 / t).collect();
        let decay = s.iter().map(|s| (-s * config.dt).exp()).collect();
        let all_rows = inverse_rows(&s, k)?;
        let output_nodes: Vec<usize> = (0..config.n_taus).map(|i| k + i * over).collect();
        let inverse = output_nodes
            .iter()
            .map(|&node| all_rows[node - k].clone())
            .collect();
        let taustars = config.taustars();
        Ok(Self {
            config,
            taustars,
            s,
            decay,
            inverse,
            output_nodes,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn taustars(&self) -> &[f64] {
        &self.taustars
    }

    pub fn s_grid(&self) -> &[f64] {
        &self.s
    }

    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    pub fn inverse_rows(&self) -> &[InverseRow] {
        &self.inverse
    }

    pub fn output_nodes(&self) -> &[usize] {
        &self.output_nodes
    }

    pub fn n_taus(&self) -> usize {
        self.taustars.len()
    }

    pub fn n_s(&self) -> usize {
        self.s.len()
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    /// Dense `n_taus x n_s` inverse operator.
    pub fn inverse_matrix(&self) -> Vec<Vec<f64>> {
        self.inverse
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; self.n_s()];
                dense[row.start..row.start + row.coeffs.len()].copy_from_slice(&row.coeffs);
                dense
            })
            .collect()
    }

    pub fn zero_state(&self) -> LaplaceState {
        LaplaceState {
            input_dim: self.input_dim(),
            n_s: self.n_s(),
            values: vec![0.0; self.input_dim() * self.n_s()],
        }
    }

    /// Apply the inverse to one row of `F`.
    pub fn invert(&self, f_row: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.inverse) {
            *o = row.apply(f_row);
        }
    }
}

pub fn build_memory(config: MemoryConfig) -> Result<MemoryEngine> {
    MemoryEngine::new(config)
}

/// Laplace-domain activations `F`, laid out `input_dim x n_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceState {
    input_dim: usize,
    n_s: usize,
    values: Vec<f64>,
}

impl LaplaceState {
    pub fn row(&self, d: usize) -> &[f64] {
        &self.values[d * self.n_s..(d + 1) * self.n_s]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn reset(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    fn check(&self, engine: &MemoryEngine) -> Result<()> {
        if self.n_s != engine.n_s() {
            return Err(Error::Shape {
                what: "state s nodes",
                expected: engine.n_s(),
                got: self.n_s,
            });
        }
        if self.input_dim != engine.input_dim() {
            return Err(Error::Shape {
                what: "state input dim",
                expected: engine.input_dim(),
                got: self.input_dim,
            });
        }
        Ok(())
    }

    /// In-place version of [`step`].
    pub fn advance(&mut self, engine: &MemoryEngine, input: &[f64]) -> Result<()> {
        self.check(engine)?;
        if input.len() != self.input_dim {
            return Err(Error::Shape {
                what: "memory input",
                expected: self.input_dim,
                got: input.len(),
            });
        }
        if let Some(i) = input.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        for (d, &x) in input.iter().enumerate() {
            let row = &mut self.values[d * self.n_s..(d + 1) * self.n_s];
            for (f, &l) in row.iter_mut().zip(&engine.decay) {
                *f = l * *f + x;
            }
        }
        Ok(())
    }
}

/// `F'[d, j] = e^{-s_j dt} F[d, j] + input[d]`.
pub fn step(state: &LaplaceState, engine: &MemoryEngine, input: &[f64]) -> Result<LaplaceState> {
    let mut next = state.clone();
    next.advance(engine, input)?;
    Ok(next)
}

/// `f~ = F * inverse^T`, one row of `n_taus` values per input dimension.
pub fn read_tilde(state: &LaplaceState, engine: &MemoryEngine) -> Result<Vec<Vec<f64>>> {
    state.check(engine)?;
    Ok((0..state.input_dim)
        .map(|d| {
            let mut out = vec![0.0; engine.n_taus()];
            engine.invert(state.row(d), &mut out);
            out
        })
        .collect())
}

/// Closed-form response of a unit with preferred delay `taustar` to a unit
/// impulse `t` time units ago.
pub fn impulse_response_analytic(taustar: f64, k: usize, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveTime(t));
    }
    if !(taustar > 0.0) {
        return Err(Error::NonPositiveTime(taustar));
    }
    let kf = k as f64;
    let x = t / taustar;
    let ln = -t.ln() + (kf + 1.0) * kf.ln() - ln_factorial(k) + (kf + 1.0) * x.ln() - kf * x;
    Ok(ln.exp())
}

/// Coefficient of variation of the impulse response, `1/sqrt(k+1)`.
pub fn coefficient_of_variation(k: usize) -> f64 {
    1.0 / ((k + 1) as f64).sqrt()
}

/// Valid 1D convolution of every row of `f_tilde` with `kernel`, followed
/// by a global max over positions. Returns one value per row.
pub fn conv_pool_readout(f_tilde: &[Vec<f64>], kernel: &[f64]) -> Result<Vec<f64>> {
    f_tilde
        .iter()
        .map(|row| {
            if kernel.is_empty() || kernel.len() >= row.len() {
                return Err(Error::KernelTooLong {
                    kernel: kernel.len(),
                    taus: row.len(),
                });
            }
            Ok(row
                .windows(kernel.len())
                .map(|w| w.iter().zip(kernel).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn paper_cfg() -> MemoryConfig {
        MemoryConfig::default()
    }

    #[test]
    fn paper_grid_ratio() {
        let cfg = paper_cfg();
        assert_relative_eq!(cfg.ratio(), 1000f64.powf(1.0 / 7.0), epsilon = 1e-12);
        assert!((cfg.ratio() - 2.683).abs() < 1e-3);
        let eng = build_memory(cfg).unwrap();
        assert_eq!(eng.n_taus(), 8);
        assert!(eng.taustars().windows(2).all(|w| w[1] > w[0]));
        assert!(eng.s_grid().windows(2).all(|w| w[1] < w[0]));
        assert!(eng.decay().iter().all(|&d| d > 0.0 && d < 1.0));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = paper_cfg();
        c.taustar_max = 1.0;
        c.n_taus = 2;
        assert!(build_memory(c).is_err());
        let mut c = paper_cfg();
        c.k = 7;
        assert!(build_memory(c).is_err());
        let mut c = paper_cfg();
        c.k = 0;
        assert!(build_memory(c).is_err());
        let mut c = paper_cfg();
        c.taustar_min = 0.0;
        assert!(build_memory(c).is_err());
        let mut c = paper_cfg();
        c.n_taus = 1;
        assert!(build_memory(c).is_err());
    }

    #[test]
    fn s_is_k_over_taustar() {
        let cfg = MemoryConfig {
            taustar_min: 10.0,
            taustar_max: 100.0,
            n_taus: 5,
            ..paper_cfg()
        };
        let eng = build_memory(cfg).unwrap();
        assert_relative_eq!(eng.s_grid()[eng.output_nodes()[0]], 0.8, epsilon = 1e-12);
        for (t, &node) in eng.taustars().iter().zip(eng.output_nodes()) {
            assert_relative_eq!(eng.s_grid()[node] * t, 8.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_memory(paper_cfg()).unwrap();
        let b = build_memory(paper_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inverse_annihilates_constants_and_linear() {
        let s: Vec<f64> = (0..30).map(|j| 2.0 * 0.9f64.powi(j)).collect();
        for k in [2, 4, 8] {
            let m = build_inverse_operator(&s, k).unwrap();
            assert_eq!(m.len(), 30 - 2 * k);
            for row in &m {
                let scale: f64 = row.iter().map(|c| c.abs()).sum();
                let c: f64 = row.iter().map(|c| 3.5 * c).sum();
                assert!(c.abs() <= 1e-9 * scale, "constant -> {c}");
                let lin: f64 = row.iter().zip(&s).map(|(c, s)| c * s).sum();
                assert!(lin.abs() <= 1e-9 * scale, "linear -> {lin}");
            }
        }
    }

    #[test]
    fn inverse_rejects_non_monotone() {
        let s = vec![1.0, 0.9, 0.95, 0.8, 0.7, 0.6, 0.5];
        assert!(matches!(
            build_inverse_operator(&s, 2),
            Err(Error::NonMonotoneGrid(2))
        ));
    }

    #[test]
    fn inverse_of_delta_image_matches_closed_form() {
        let eng = build_memory(MemoryConfig {
            taustar_min: 5.0,
            taustar_max: 100.0,
            n_taus: 10,
            ..paper_cfg()
        })
        .unwrap();
        for t0 in [10.0, 30.0, 60.0] {
            let image: Vec<f64> = eng.s_grid().iter().map(|s| (-s * t0).exp()).collect();
            let mut out = vec![0.0; eng.n_taus()];
            eng.invert(&image, &mut out);
            for (i, &tau) in eng.taustars().iter().enumerate() {
                let want = impulse_response_analytic(tau, 8, t0).unwrap();
                // only where the unit carries appreciable signal
                if want > 0.05 * impulse_response_analytic(tau, 8, tau).unwrap() {
                    let rel = (out[i] - want).abs() / want;
                    assert!(rel <= 0.05, "tau {tau} t0 {t0}: {} vs {want}", out[i]);
                }
            }
        }
    }

    #[test]
    fn step_decay_closed_form() {
        // node s = 0.1 exists when taustar = 80 with k = 8
        let eng = build_memory(MemoryConfig {
            taustar_min: 80.0,
            taustar_max: 160.0,
            n_taus: 2,
            ..paper_cfg()
        })
        .unwrap();
        let node = eng.output_nodes()[0];
        assert_relative_eq!(eng.s_grid()[node], 0.1, epsilon = 1e-12);
        let mut st = eng.zero_state();
        st = step(&st, &eng, &[1.0]).unwrap();
        for _ in 0..10 {
            st = step(&st, &eng, &[0.0]).unwrap();
        }
        assert_relative_eq!(st.row(0)[node], (-1.0f64).exp(), epsilon = 1e-12);
        assert!((st.row(0)[node] - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn zero_input_keeps_zero_state() {
        let eng = build_memory(paper_cfg()).unwrap();
        let mut st = eng.zero_state();
        for _ in 0..50 {
            st = step(&st, &eng, &[0.0]).unwrap();
        }
        assert!(st.values().iter().all(|&v| v == 0.0));
        let ft = read_tilde(&st, &eng).unwrap();
        assert!(ft[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_rejects_non_finite() {
        let eng = build_memory(paper_cfg()).unwrap();
        let st = eng.zero_state();
        assert!(matches!(step(&st, &eng, &[f64::NAN]), Err(Error::NonFinite(0))));
        assert!(step(&st, &eng, &[f64::INFINITY]).is_err());
        assert!(step(&st, &eng, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn read_tilde_dimension_mismatch() {
        let a = build_memory(paper_cfg()).unwrap();
        let b = build_memory(MemoryConfig {
            input_dim: 2,
            ..paper_cfg()
        })
        .unwrap();
        assert!(read_tilde(&a.zero_state(), &b).is_err());
    }

    #[test]
    fn tau_ten_unit_peaks_at_ten() {
        let eng = build_memory(MemoryConfig {
            taustar_min: 10.0,
            taustar_max: 40.0,
            n_taus: 3,
            ..paper_cfg()
        })
        .unwrap();
        let mut st = eng.zero_state();
        st.advance(&eng, &[1.0]).unwrap();
        let mut best = (0usize, f64::MIN);
        for t in 1..60 {
            st.advance(&eng, &[0.0]).unwrap();
            let v = read_tilde(&st, &eng).unwrap()[0][0];
            if v > best.1 {
                best = (t, v);
            }
        }
        assert!((best.0 as i64 - 10).abs() <= 1, "peak at {}", best.0);
        let want = 1.1169 / 10.0;
        assert!((best.1 - want).abs() / want < 0.1);
    }

    #[test]
    fn analytic_values() {
        let v = impulse_response_analytic(10.0, 8, 10.0).unwrap();
        assert!((v - 0.11167).abs() < 1e-5, "{v}");
        let direct = (1.0 / 10.0) * 8f64.powi(9) / 40320.0 * (-8.0f64).exp();
        assert_relative_eq!(v, direct, max_relative = 1e-12);
        assert!(impulse_response_analytic(10.0, 8, 1e-6).unwrap() < 1e-30);
        assert!(impulse_response_analytic(10.0, 8, 1e4).unwrap() < 1e-30);
        assert!(impulse_response_analytic(10.0, 8, 0.0).is_err());
        assert!(impulse_response_analytic(10.0, 8, -1.0).is_err());
        assert_relative_eq!(coefficient_of_variation(8), 1.0 / 3.0);
    }

    #[test]
    fn analytic_large_k_is_finite() {
        let v = impulse_response_analytic(50.0, 200, 50.0).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn conv_pool_shift_and_zero() {
        let base = vec![0.0, 0.0, 0.1, 0.7, 0.3, 0.0, 0.0, 0.0, 0.0];
        let shifted = vec![0.0, 0.0, 0.0, 0.0, 0.1, 0.7, 0.3, 0.0, 0.0];
        let k = [0.5, -0.2, 1.0];
        let a = conv_pool_readout(&[base], &k).unwrap();
        let b = conv_pool_readout(&[shifted], &k).unwrap();
        assert_eq!(a, b);
        let z = conv_pool_readout(&[vec![0.0; 9]], &k).unwrap();
        assert_eq!(z, vec![0.0]);
        assert!(matches!(
            conv_pool_readout(&[vec![0.0; 3]], &k),
            Err(Error::KernelTooLong { .. })
        ));
    }
}
