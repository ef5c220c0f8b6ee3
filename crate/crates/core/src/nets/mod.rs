//! Recurrent cores and actor-critic heads with hand-written reverse mode.
//!
//! Layout of an agent: `obs -> core -> [conv+maxpool] -> dense(relu) -> {policy, value}`.
//! CogRNN cores are the fixed Laplace memory; their features depend on the
//! observation history only. RNN and LSTM cores are trained by full
//! backpropagation through time unless frozen.

mod params;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::laplace::{LaplaceState, MemoryConfig, MemoryEngine};
use crate::rng;

pub use params::{Gradients, Param, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreKind {
    /// Inverse-Laplace units `f~`.
    CogrnnTilde,
    /// Laplace layer `F` without the inverse.
    #[serde(rename = "cogrnn_F", alias = "cogrnn_f")]
    CogrnnF,
    Rnn,
    Lstm,
}

impl CoreKind {
    pub fn is_memory(self) -> bool {
        matches!(self, CoreKind::CogrnnTilde | CoreKind::CogrnnF)
    }

    pub fn name(self) -> &'static str {
        match self {
            CoreKind::CogrnnTilde => "cogrnn_tilde",
            CoreKind::CogrnnF => "cogrnn_F",
            CoreKind::Rnn => "rnn",
            CoreKind::Lstm => "lstm",
        }
    }
}

fn d_core_hidden() -> usize {
    128
}
fn d_dense() -> usize {
    64
}
fn d_channels() -> usize {
    8
}
fn d_kernel() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_kernel")]
    pub len: usize,
    /// Zeros added at both ends of the tau* axis before convolving.
    #[serde(default)]
    pub pad: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            channels: d_channels(),
            len: d_kernel(),
            pad: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSpec {
    pub kind: CoreKind,
    /// RNN/LSTM only: keep the random recurrent weights fixed.
    #[serde(default)]
    pub frozen: bool,
    /// Hidden size of RNN/LSTM cores.
    #[serde(default = "d_core_hidden")]
    pub hidden: usize,
    /// Convolution + global max-pool over the tau* axis (cogrnn_tilde only).
    #[serde(default)]
    pub conv: Option<ConvSpec>,
    /// Multiply each memory unit by its tau*, giving every unit the same
    /// impulse-response peak height.
    #[serde(default)]
    pub taustar_weighting: bool,
}

impl CoreSpec {
    pub fn new(kind: CoreKind) -> Self {
        Self {
            kind,
            frozen: false,
            hidden: d_core_hidden(),
            conv: None,
            taustar_weighting: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub core: CoreSpec,
    #[serde(default)]
    pub memory: MemoryConfig,
    /// Width of the dense relu layer between core and heads.
    #[serde(default = "d_dense")]
    pub dense: usize,
}

impl AgentSpec {
    pub fn new(core: CoreSpec, memory: MemoryConfig) -> Self {
        Self {
            core,
            memory,
            dense: d_dense(),
        }
    }
}

/// Recurrent state carried between steps of one trial.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreState {
    Memory(LaplaceState),
    Rnn { h: Vec<f64> },
    Lstm { h: Vec<f64>, c: Vec<f64> },
}

/// Activations of the core needed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreCache {
    Memory {
        /// Raw memory readout (f~ or F), `input_dim x n_taus` flattened.
        units: Vec<f64>,
        /// Zero-padded conv input and winning position per channel, when conv is on.
        conv_in: Option<Vec<f64>>,
        argmax: Vec<usize>,
    },
    Rnn {
        h_prev: Vec<f64>,
        h: Vec<f64>,
    },
    Lstm {
        h_prev: Vec<f64>,
        c_prev: Vec<f64>,
        /// Activated gates `[i, f, g, o]`.
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
        h: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub obs: Vec<f64>,
    pub core: CoreCache,
    /// Input to the dense layer.
    pub feature: Vec<f64>,
    /// Dense layer output after relu.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub value: f64,
}

impl StepCache {
    /// Activity of the core layer (memory units or recurrent hidden state).
    pub fn core_activity(&self) -> &[f64] {
        match &self.core {
            CoreCache::Memory { units, .. } => units,
            CoreCache::Rnn { h, .. } | CoreCache::Lstm { h, .. } => h,
        }
    }
}

/// Upstream gradient of the loss at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrad {
    pub dlogits: Vec<f64>,
    pub dvalue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    core: [usize; 3],
    n_core: usize,
    conv_w: Option<usize>,
    conv_b: Option<usize>,
    hid_w: usize,
    hid_b: usize,
    pol_w: usize,
    pol_b: usize,
    val_w: usize,
    val_b: usize,
}

#[derive(Debug, Clone)]
pub struct Agent {
    spec: AgentSpec,
    obs_dim: usize,
    n_actions: usize,
    feature_dim: usize,
    engine: Option<Arc<MemoryEngine>>,
    weights: Vec<f64>,
    pub params: ParamSet,
    layout: Layout,
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o += dot(row, x);
    }
}

/// `dx += W^T dy`
fn matvec_t_add(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = dx.len();
    for (d, row) in dy.iter().zip(w.chunks_exact(n)) {
        if *d != 0.0 {
            for (x, a) in dx.iter_mut().zip(row) {
                *x += d * a;
            }
        }
    }
}

/// `dW += dy x^T`
fn outer_add(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let n = x.len();
    for (d, row) in dy.iter().zip(dw.chunks_exact_mut(n)) {
        if *d != 0.0 {
            for (w, a) in row.iter_mut().zip(x) {
                *w += d * a;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn entropy(logits: &[f64]) -> f64 {
    let lp = log_softmax(logits);
    -lp.iter().map(|l| l.exp() * l).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    pub action: usize,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Draw from the categorical distribution given by `softmax(logits)`.
pub fn sample_action<R: Rng>(logits: &[f64], rng: &mut R) -> ActionSample {
    let lp = log_softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut action = lp.len() - 1;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            action = i;
            break;
        }
    }
    ActionSample {
        action,
        log_prob: lp[action],
        entropy: -lp.iter().map(|l| l.exp() * l).sum::<f64>(),
    }
}

pub fn greedy_action(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

impl Agent {
    /// Build an agent with freshly initialized parameters.
    pub fn new(spec: AgentSpec, obs_dim: usize, n_actions: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::derived(seed, 1);
        let mut memory = spec.memory.clone();
        memory.input_dim = obs_dim;
        let core = &spec.core;
        if core.hidden == 0 || spec.dense == 0 {
            return Err(Error::Config {
                field: "agent".into(),
                msg: "layer sizes must be positive".into(),
            });
        }
        if core.conv.is_some() && core.kind != CoreKind::CogrnnTilde {
            return Err(Error::Config {
                field: "agent.core.conv".into(),
                msg: "convolution readout requires the cogrnn_tilde core".into(),
            });
        }
        let engine = if core.kind.is_memory() {
            Some(Arc::new(MemoryEngine::new(memory.clone())?))
        } else {
            None
        };
        let mut params = Vec::new();
        let mut core_idx = [0usize; 3];
        let mut n_core = 0;
        let h = core.hidden;
        match core.kind {
            CoreKind::Rnn => {
                params.push(Param::uniform("core.w_in", &[h, obs_dim], 1.0 / (obs_dim as f64).sqrt(), &mut rng));
                params.push(Param::uniform("core.w_rec", &[h, h], 1.0 / (h as f64).sqrt(), &mut rng));
                params.push(Param::zeros("core.b", &[h]));
                core_idx = [0, 1, 2];
                n_core = 3;
            }
            CoreKind::Lstm => {
                let fan = obs_dim + h;
                params.push(Param::uniform("core.w", &[4 * h, fan], 1.0 / (fan as f64).sqrt(), &mut rng));
                let mut b = Param::zeros("core.b", &[4 * h]);
                b.data[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                params.push(b);
                core_idx = [0, 1, 0];
                n_core = 2;
            }
            _ => {}
        }
        if core.frozen {
            params.iter_mut().for_each(|p| p.trainable = false);
        }
        let mut feature_dim = match core.kind {
            CoreKind::CogrnnTilde | CoreKind::CogrnnF => memory.n_taus * obs_dim,
            CoreKind::Rnn | CoreKind::Lstm => h,
        };
        let (mut conv_w, mut conv_b) = (None, None);
        if let Some(cv) = core.conv {
            if cv.len == 0 || cv.len >= memory.n_taus + 2 * cv.pad || cv.channels == 0 || cv.pad >= cv.len {
                return Err(Error::KernelTooLong {
                    kernel: cv.len,
                    taus: memory.n_taus,
                });
            }
            let fan = (obs_dim * cv.len) as f64;
            conv_w = Some(params.len());
            params.push(Param::uniform("conv.w", &[cv.channels, obs_dim, cv.len], 1.0 / fan.sqrt(), &mut rng));
            conv_b = Some(params.len());
            params.push(Param::zeros("conv.b", &[cv.channels]));
            feature_dim = cv.channels;
        }
        let d = spec.dense;
        let hid_w = params.len();
        params.push(Param::uniform("hidden.w", &[d, feature_dim], 1.0 / (feature_dim as f64).sqrt(), &mut rng));
        let hid_b = params.len();
        params.push(Param::zeros("hidden.b", &[d]));
        let pol_w = params.len();
        params.push(Param::uniform("policy.w", &[n_actions, d], 1.0 / (d as f64).sqrt(), &mut rng));
        let pol_b = params.len();
        params.push(Param::zeros("policy.b", &[n_actions]));
        let val_w = params.len();
        params.push(Param::uniform("value.w", &[1, d], 1.0 / (d as f64).sqrt(), &mut rng));
        let val_b = params.len();
        params.push(Param::zeros("value.b", &[1]));

        let weights = match (&engine, core.taustar_weighting) {
            (Some(e), true) => (0..obs_dim).flat_map(|_| e.taustars().to_vec()).collect(),
            _ => Vec::new(),
        };
        let mut spec = spec;
        spec.memory = memory;
        Ok(Self {
            spec,
            obs_dim,
            n_actions,
            feature_dim,
            engine,
            weights,
            params: ParamSet { params },
            layout: Layout {
                core: core_idx,
                n_core,
                conv_w,
                conv_b,
                hid_w,
                hid_b,
                pol_w,
                pol_b,
                val_w,
                val_b,
            },
        })
    }

    /// Replace parameters, checking names and shapes.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    pub fn kind(&self) -> CoreKind {
        self.spec.core.kind
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn engine(&self) -> Option<&MemoryEngine> {
        self.engine.as_deref()
    }

    /// Number of parameters updated by training.
    pub fn n_trainable(&self) -> usize {
        self.params.n_trainable()
    }

    pub fn core_trainable(&self) -> bool {
        self.layout.n_core > 0 && !self.spec.core.frozen
    }

    pub fn initial_state(&self) -> CoreState {
        let h = self.spec.core.hidden;
        match self.kind() {
            CoreKind::CogrnnTilde | CoreKind::CogrnnF => {
                CoreState::Memory(self.engine.as_ref().expect("memory core").zero_state())
            }
            CoreKind::Rnn => CoreState::Rnn { h: vec![0.0; h] },
            CoreKind::Lstm => CoreState::Lstm {
                h: vec![0.0; h],
                c: vec![0.0; h],
            },
        }
    }

    fn p(&self, i: usize) -> &[f64] {
        &self.params.params[i].data
    }

    /// Advance the core by one observation; returns core cache and feature.
    pub fn core_step(&self, state: &mut CoreState, obs: &[f64]) -> Result<(CoreCache, Vec<f64>)> {
        if obs.len() != self.obs_dim {
            return Err(Error::Shape {
                what: "observation",
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        if let Some(i) = obs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let h = self.spec.core.hidden;
        match (self.kind(), state) {
            (CoreKind::CogrnnTilde | CoreKind::CogrnnF, CoreState::Memory(st)) => {
                let eng = self.engine.as_ref().expect("memory core");
                st.advance(eng, obs)?;
                let n = eng.n_taus();
                let mut units = vec![0.0; n * self.obs_dim];
                for d in 0..self.obs_dim {
                    let out = &mut units[d * n..(d + 1) * n];
                    if self.kind() == CoreKind::CogrnnTilde {
                        eng.invert(st.row(d), out);
                    } else {
                        for (o, &node) in out.iter_mut().zip(eng.output_nodes()) {
                            *o = st.row(d)[node];
                        }
                    }
                }
                let weighted: Vec<f64> = if self.weights.is_empty() {
                    units.clone()
                } else {
                    units.iter().zip(&self.weights).map(|(u, w)| u * w).collect()
                };
                match (self.layout.conv_w, self.spec.core.conv) {
                    (Some(wi), Some(cv)) => {
                        let n = eng.n_taus();
                        let np = n + 2 * cv.pad;
                        let mut padded = vec![0.0; np * self.obs_dim];
                        for d in 0..self.obs_dim {
                            padded[d * np + cv.pad..d * np + cv.pad + n].copy_from_slice(&weighted[d * n..(d + 1) * n]);
                        }
                        let (feat, argmax) = self.conv_forward(&padded, wi, cv);
                        Ok((
                            CoreCache::Memory {
                                units,
                                conv_in: Some(padded),
                                argmax,
                            },
                            feat,
                        ))
                    }
                    _ => Ok((
                        CoreCache::Memory {
                            units,
                            conv_in: None,
                            argmax: Vec::new(),
                        },
                        weighted,
                    )),
                }
            }
            (CoreKind::Rnn, CoreState::Rnn { h: hs }) => {
                let [wi, wr, b] = self.layout.core;
                let mut a = self.p(b).to_vec();
                matvec_add(self.p(wi), obs, &mut a);
                matvec_add(self.p(wr), hs, &mut a);
                let hn: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
                let h_prev = std::mem::replace(hs, hn.clone());
                Ok((CoreCache::Rnn { h_prev, h: hn.clone() }, hn))
            }
            (CoreKind::Lstm, CoreState::Lstm { h: hs, c: cs }) => {
                let [w, b, _] = self.layout.core;
                let mut xh = Vec::with_capacity(self.obs_dim + h);
                xh.extend_from_slice(obs);
                xh.extend_from_slice(hs);
                let mut z = self.p(b).to_vec();
                matvec_add(self.p(w), &xh, &mut z);
                let mut gates = z;
                for (j, g) in gates.iter_mut().enumerate() {
                    *g = if (2 * h..3 * h).contains(&j) { g.tanh() } else { sigmoid(*g) };
                }
                let mut c = vec![0.0; h];
                let mut tanh_c = vec![0.0; h];
                let mut hn = vec![0.0; h];
                for j in 0..h {
                    let (i_, f_, g_, o_) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    c[j] = f_ * cs[j] + i_ * g_;
                    tanh_c[j] = c[j].tanh();
                    hn[j] = o_ * tanh_c[j];
                }
                let h_prev = std::mem::replace(hs, hn.clone());
                let c_prev = std::mem::replace(cs, c);
                Ok((
                    CoreCache::Lstm {
                        h_prev,
                        c_prev,
                        gates,
                        tanh_c,
                        h: hn.clone(),
                    },
                    hn,
                ))
            }
            _ => Err(Error::Shape {
                what: "core state kind",
                expected: 0,
                got: 1,
            }),
        }
    }

    fn conv_forward(&self, x: &[f64], wi: usize, cv: ConvSpec) -> (Vec<f64>, Vec<usize>) {
        let n = self.spec.memory.n_taus + 2 * cv.pad;
        let w = self.p(wi);
        let b = self.p(wi + 1);
        let positions = n - cv.len + 1;
        let mut feat = vec![0.0; cv.channels];
        let mut argmax = vec![0; cv.channels];
        for c in 0..cv.channels {
            let mut best = f64::NEG_INFINITY;
            for p in 0..positions {
                let mut acc = b[c];
                for d in 0..self.obs_dim {
                    let wk = &w[(c * self.obs_dim + d) * cv.len..(c * self.obs_dim + d + 1) * cv.len];
                    let xs = &x[d * n + p..d * n + p + cv.len];
                    acc += wk.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                }
                if acc > best {
                    best = acc;
                    argmax[c] = p;
                }
            }
            feat[c] = best;
        }
        (feat, argmax)
    }

    /// Dense relu layer and both heads.
    pub fn heads_forward(&self, feature: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        if feature.len() != self.feature_dim {
            return Err(Error::Shape {
                what: "feature",
                expected: self.feature_dim,
                got: feature.len(),
            });
        }
        let l = &self.layout;
        let mut hidden = self.p(l.hid_b).to_vec();
        matvec_add(self.p(l.hid_w), feature, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut logits = self.p(l.pol_b).to_vec();
        matvec_add(self.p(l.pol_w), &hidden, &mut logits);
        let mut value = [self.p(l.val_b)[0]];
        matvec_add(self.p(l.val_w), &hidden, &mut value);
        Ok((hidden, logits, value[0]))
    }

    /// One full agent step.
    pub fn step(&self, state: &mut CoreState, obs: &[f64]) -> Result<StepCache> {
        let (core, feature) = self.core_step(state, obs)?;
        let (hidden, logits, value) = self.heads_forward(&feature)?;
        Ok(StepCache {
            obs: obs.to_vec(),
            core,
            feature,
            hidden,
            logits,
            value,
        })
    }

    /// Run the core over a whole sequence from the initial state.
    pub fn core_forward(&self, observations: &[Vec<f64>]) -> Result<Vec<StepCache>> {
        let mut st = self.initial_state();
        observations.iter().map(|o| self.step(&mut st, o)).collect()
    }

    /// Reverse-mode gradients of a per-step loss whose derivatives w.r.t.
    /// logits and value are `loss_grads`. `caches` must be a contiguous
    /// sequence from one state (BPTT runs over all of it).
    pub fn backward(&self, caches: &[StepCache], loss_grads: &[StepGrad]) -> Result<Gradients> {
        if loss_grads.len() > caches.len() {
            return Err(Error::MissingCache(caches.len()));
        }
        if loss_grads.len() < caches.len() {
            return Err(Error::Length(format!(
                "{} caches but {} loss gradients",
                caches.len(),
                loss_grads.len()
            )));
        }
        let l = self.layout;
        let mut g = self.params.zeros_like();
        let mut dfeats: Vec<Vec<f64>> = Vec::with_capacity(caches.len());
        let want_dfeat = self.core_trainable() || l.conv_w.is_some();
        let d = self.spec.dense;
        for (c, lg) in caches.iter().zip(loss_grads) {
            if lg.dlogits.len() != self.n_actions {
                return Err(Error::Shape {
                    what: "dlogits",
                    expected: self.n_actions,
                    got: lg.dlogits.len(),
                });
            }
            if c.hidden.len() != d || c.logits.len() != self.n_actions {
                return Err(Error::MissingCache(dfeats.len()));
            }
            let mut dh = vec![0.0; d];
            // value head
            g.grads[l.val_b][0] += lg.dvalue;
            for (gw, hv) in g.grads[l.val_w].iter_mut().zip(&c.hidden) {
                *gw += lg.dvalue * hv;
            }
            for (x, w) in dh.iter_mut().zip(self.p(l.val_w)) {
                *x += lg.dvalue * w;
            }
            // policy head
            for (gb, dz) in g.grads[l.pol_b].iter_mut().zip(&lg.dlogits) {
                *gb += dz;
            }
            outer_add(&mut g.grads[l.pol_w], &lg.dlogits, &c.hidden);
            matvec_t_add(self.p(l.pol_w), &lg.dlogits, &mut dh);
            // relu
            for (x, hv) in dh.iter_mut().zip(&c.hidden) {
                if *hv <= 0.0 {
                    *x = 0.0;
                }
            }
            for (gb, x) in g.grads[l.hid_b].iter_mut().zip(&dh) {
                *gb += x;
            }
            outer_add(&mut g.grads[l.hid_w], &dh, &c.feature);
            if want_dfeat {
                let mut df = vec![0.0; self.feature_dim];
                matvec_t_add(self.p(l.hid_w), &dh, &mut df);
                dfeats.push(df);
            }
        }
        if let (Some(wi), Some(bi), Some(cv)) = (l.conv_w, l.conv_b, self.spec.core.conv) {
            let n = self.spec.memory.n_taus + 2 * cv.pad;
            for (c, df) in caches.iter().zip(&dfeats) {
                let CoreCache::Memory {
                    conv_in: Some(x),
                    argmax,
                    ..
                } = &c.core
                else {
                    return Err(Error::MissingCache(0));
                };
                for ch in 0..cv.channels {
                    let p = argmax[ch];
                    g.grads[bi][ch] += df[ch];
                    for dd in 0..self.obs_dim {
                        let base = (ch * self.obs_dim + dd) * cv.len;
                        for j in 0..cv.len {
                            g.grads[wi][base + j] += df[ch] * x[dd * n + p + j];
                        }
                    }
                }
            }
        }
        if self.core_trainable() {
            self.bptt(caches, &dfeats, &mut g)?;
        }
        Ok(g)
    }

    fn bptt(&self, caches: &[StepCache], dfeats: &[Vec<f64>], g: &mut Gradients) -> Result<()> {
        let h = self.spec.core.hidden;
        match self.kind() {
            CoreKind::Rnn => {
                let [wi, wr, b] = self.layout.core;
                let mut dh_next = vec![0.0; h];
                for (t, c) in caches.iter().enumerate().rev() {
                    let CoreCache::Rnn { h_prev, h: hv } = &c.core else {
                        return Err(Error::MissingCache(t));
                    };
                    let da: Vec<f64> = (0..h)
                        .map(|j| (dfeats[t][j] + dh_next[j]) * (1.0 - hv[j] * hv[j]))
                        .collect();
                    outer_add(&mut g.grads[wi], &da, &c.obs);
                    outer_add(&mut g.grads[wr], &da, h_prev);
                    for (gb, x) in g.grads[b].iter_mut().zip(&da) {
                        *gb += x;
                    }
                    dh_next.iter_mut().for_each(|v| *v = 0.0);
                    matvec_t_add(self.p(wr), &da, &mut dh_next);
                }
            }
            CoreKind::Lstm => {
                let [w, b, _] = self.layout.core;
                let nin = self.obs_dim + h;
                let mut dh_next = vec![0.0; h];
                let mut dc_next = vec![0.0; h];
                let mut dz = vec![0.0; 4 * h];
                let mut dxh = vec![0.0; nin];
                let mut xh = vec![0.0; nin];
                for (t, c) in caches.iter().enumerate().rev() {
                    let CoreCache::Lstm {
                        h_prev,
                        c_prev,
                        gates,
                        tanh_c,
                        ..
                    } = &c.core
                    else {
                        return Err(Error::MissingCache(t));
                    };
                    for j in 0..h {
                        let (i_, f_, g_, o_) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                        let dh = dfeats[t][j] + dh_next[j];
                        let d_o = dh * tanh_c[j];
                        let dc = dc_next[j] + dh * o_ * (1.0 - tanh_c[j] * tanh_c[j]);
                        dz[j] = dc * g_ * i_ * (1.0 - i_);
                        dz[h + j] = dc * c_prev[j] * f_ * (1.0 - f_);
                        dz[2 * h + j] = dc * i_ * (1.0 - g_ * g_);
                        dz[3 * h + j] = d_o * o_ * (1.0 - o_);
                        dc_next[j] = dc * f_;
                    }
                    xh[..self.obs_dim].copy_from_slice(&c.obs);
                    xh[self.obs_dim..].copy_from_slice(h_prev);
                    outer_add(&mut g.grads[w], &dz, &xh);
                    for (gb, x) in g.grads[b].iter_mut().zip(&dz) {
                        *gb += x;
                    }
                    dxh.iter_mut().for_each(|v| *v = 0.0);
                    matvec_t_add(self.p(w), &dz, &mut dxh);
                    dh_next.copy_from_slice(&dxh[self.obs_dim..]);
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::read_tilde;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_mem() -> MemoryConfig {
        MemoryConfig {
            taustar_min: 1.0,
            taustar_max: 50.0,
            n_taus: 6,
            k: 4,
            ..MemoryConfig::default()
        }
    }

    fn agent(kind: CoreKind) -> Agent {
        let mut core = CoreSpec::new(kind);
        core.hidden = 5;
        let mut spec = AgentSpec::new(core, small_mem());
        spec.dense = 7;
        Agent::new(spec, 1, 3, 11).unwrap()
    }

    #[test]
    fn cogrnn_features_delegate_to_memory() {
        let a = agent(CoreKind::CogrnnTilde);
        let eng = a.engine().unwrap().clone();
        let obs: Vec<Vec<f64>> = (0..30).map(|t| vec![if t == 3 || t == 12 { 1.0 } else { 0.0 }]).collect();
        let caches = a.core_forward(&obs).unwrap();
        let mut st = eng.zero_state();
        for (o, c) in obs.iter().zip(&caches) {
            st.advance(&eng, o).unwrap();
            let want = read_tilde(&st, &eng).unwrap();
            assert_eq!(c.feature, want[0]);
        }
    }

    #[test]
    fn cogrnn_features_ignore_params() {
        let a = agent(CoreKind::CogrnnTilde);
        let mut b = agent(CoreKind::CogrnnTilde);
        b.params.params.iter_mut().for_each(|p| p.data.iter_mut().for_each(|v| *v += 0.3));
        let obs: Vec<Vec<f64>> = (0..20).map(|t| vec![(t % 5 == 0) as u8 as f64]).collect();
        let fa: Vec<_> = a.core_forward(&obs).unwrap().into_iter().map(|c| c.feature).collect();
        let fb: Vec<_> = b.core_forward(&obs).unwrap().into_iter().map(|c| c.feature).collect();
        assert_eq!(fa, fb);
    }

    #[test]
    fn zero_weight_rnn_gives_zero_features() {
        let mut a = agent(CoreKind::Rnn);
        for i in 0..3 {
            a.params.params[i].data.iter_mut().for_each(|v| *v = 0.0);
        }
        let obs: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64]).collect();
        for c in a.core_forward(&obs).unwrap() {
            assert!(c.feature.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lstm_matches_scalar_unroll() {
        let mut core = CoreSpec::new(CoreKind::Lstm);
        core.hidden = 1;
        let a = Agent::new(AgentSpec::new(core, small_mem()), 1, 3, 5).unwrap();
        // w is 4x2 over [x, h], gates i, f, g, o
        let w = a.params.params[0].data.clone();
        let b = a.params.params[1].data.clone();
        assert_eq!(b, vec![0.0, 1.0, 0.0, 0.0]);
        let xs = [1.0, 0.0, -0.5];
        let (mut h, mut c) = (0.0f64, 0.0f64);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let caches = a.core_forward(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap();
        for (x, cache) in xs.iter().zip(&caches) {
            let i = sig(w[0] * x + w[1] * h + b[0]);
            let f = sig(w[2] * x + w[3] * h + b[1]);
            let g = (w[4] * x + w[5] * h + b[2]).tanh();
            let o = sig(w[6] * x + w[7] * h + b[3]);
            c = f * c + i * g;
            h = o * c.tanh();
            assert_relative_eq!(cache.feature[0], h, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_feature_uniform_policy() {
        let a = agent(CoreKind::Rnn);
        // zero biases at init; zero feature -> zero hidden -> zero logits
        let (_, logits, v) = a.heads_forward(&vec![0.0; a.feature_dim()]).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        assert_eq!(v, 0.0);
        let p = softmax(&logits);
        for x in p {
            assert_relative_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert!(a.heads_forward(&[0.0]).is_err());
    }

    #[test]
    fn sampling_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut zeros = 0;
        for _ in 0..10000 {
            if sample_action(&[10.0, -10.0], &mut rng).action == 0 {
                zeros += 1;
            }
        }
        assert!(zeros >= 9999);
        let s = sample_action(&[0.0, 0.0, 0.0], &mut rng);
        assert_relative_eq!(s.entropy, 3f64.ln(), epsilon = 1e-12);
        assert!((s.entropy - 1.0986).abs() < 1e-4);
        let seq = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_action(&[0.1, 0.5, -0.2], &mut r).action).collect::<Vec<_>>()
        };
        assert_eq!(seq(4), seq(4));
    }

    #[test]
    fn logit_shift_invariance() {
        let z = [0.3, -1.2, 2.0];
        let zs: Vec<f64> = z.iter().map(|v| v + 17.5).collect();
        let (p, q) = (softmax(&z), softmax(&zs));
        for (a, b) in p.iter().zip(&q) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        assert_relative_eq!(entropy(&z), entropy(&zs), epsilon = 1e-12);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            assert_eq!(sample_action(&z, &mut r1).action, sample_action(&zs, &mut r2).action);
        }
    }

    #[test]
    fn frozen_core_has_no_core_gradient() {
        let mut core = CoreSpec::new(CoreKind::Lstm);
        core.hidden = 4;
        core.frozen = true;
        let a = Agent::new(AgentSpec::new(core, small_mem()), 1, 3, 2).unwrap();
        let obs: Vec<Vec<f64>> = (0..6).map(|t| vec![(t == 1) as u8 as f64]).collect();
        let caches = a.core_forward(&obs).unwrap();
        let lg: Vec<StepGrad> = caches
            .iter()
            .map(|_| StepGrad {
                dlogits: vec![0.3, -0.1, -0.2],
                dvalue: 0.5,
            })
            .collect();
        let g = a.backward(&caches, &lg).unwrap();
        assert!(g.grads[0].iter().all(|&v| v == 0.0));
        assert!(g.grads[1].iter().all(|&v| v == 0.0));
        assert!(g.grads.last().unwrap()[0] != 0.0);
        assert!(!a.core_trainable());
    }

    #[test]
    fn backward_rejects_missing_cache() {
        let a = agent(CoreKind::Rnn);
        let caches = a.core_forward(&[vec![1.0], vec![0.0]]).unwrap();
        let lg = vec![
            StepGrad {
                dlogits: vec![0.0; 3],
                dvalue: 0.0
            };
            3
        ];
        assert!(matches!(a.backward(&caches, &lg), Err(Error::MissingCache(_))));
    }

    #[test]
    fn conv_requires_tilde_core() {
        let mut core = CoreSpec::new(CoreKind::Rnn);
        core.conv = Some(ConvSpec::default());
        assert!(Agent::new(AgentSpec::new(core, small_mem()), 1, 3, 0).is_err());
        let mut core = CoreSpec::new(CoreKind::CogrnnTilde);
        core.conv = Some(ConvSpec {
            channels: 2,
            len: 6,
            pad: 0,
        });
        assert!(Agent::new(AgentSpec::new(core, small_mem()), 1, 3, 0).is_err());
    }

    fn linear_loss(a: &Agent, obs: &[Vec<f64>], coef: &[StepGrad]) -> f64 {
        a.core_forward(obs)
            .unwrap()
            .iter()
            .zip(coef)
            .map(|(c, g)| c.logits.iter().zip(&g.dlogits).map(|(z, w)| z * w).sum::<f64>() + c.value * g.dvalue)
            .sum()
    }

    fn check_gradients(mut a: Agent) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // push hidden/biases away from relu kinks
        for p in a.params.params.iter_mut() {
            if p.name.ends_with(".b") || p.name == "hidden.b" {
                p.data.iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.3));
            }
        }
        let obs: Vec<Vec<f64>> = (0..12)
            .map(|t| (0..a.obs_dim()).map(|d| if (t + d) % 4 == 1 { 1.0 } else { 0.1 * d as f64 }).collect())
            .collect();
        let coef: Vec<StepGrad> = obs
            .iter()
            .map(|_| StepGrad {
                dlogits: (0..a.n_actions()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                dvalue: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let caches = a.core_forward(&obs).unwrap();
        let g = a.backward(&caches, &coef).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for pi in 0..a.params.params.len() {
            if !a.params.params[pi].trainable {
                continue;
            }
            for j in 0..a.params.params[pi].len() {
                let orig = a.params.params[pi].data[j];
                a.params.params[pi].data[j] = orig + eps;
                let up = linear_loss(&a, &obs, &coef);
                a.params.params[pi].data[j] = orig - eps;
                let dn = linear_loss(&a, &obs, &coef);
                a.params.params[pi].data[j] = orig;
                let fd = (up - dn) / (2.0 * eps);
                let an = g.grads[pi][j];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "{}[{j}]: fd {fd} analytic {an}",
                    a.params.params[pi].name
                );
                checked += 1;
            }
        }
        assert_eq!(checked, a.n_trainable());
    }

    #[test]
    fn gradients_rnn() {
        check_gradients(agent(CoreKind::Rnn));
    }

    #[test]
    fn gradients_lstm() {
        check_gradients(agent(CoreKind::Lstm));
        let mut core = CoreSpec::new(CoreKind::Lstm);
        core.hidden = 3;
        check_gradients(Agent::new(AgentSpec::new(core, small_mem()), 2, 2, 4).unwrap());
    }

    #[test]
    fn gradients_memory_heads() {
        check_gradients(agent(CoreKind::CogrnnTilde));
        check_gradients(agent(CoreKind::CogrnnF));
    }

    #[test]
    fn gradients_conv_readout() {
        let mut core = CoreSpec::new(CoreKind::CogrnnTilde);
        core.conv = Some(ConvSpec {
            channels: 3,
            len: 3,
            pad: 2,
        });
        core.taustar_weighting = true;
        let mut spec = AgentSpec::new(core, small_mem());
        spec.dense = 6;
        check_gradients(Agent::new(spec, 2, 3, 8).unwrap());
    }
}
