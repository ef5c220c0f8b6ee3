//! One-dimensional timing tasks.
//!
//! Every trial is a fixed schedule of phases sampled at reset. All base
//! durations are multiplied by the temporal scale and rounded half-up, so a
//! trial at scale `a` is the scale-1 trial with every phase stretched by `a`.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const HOLD: usize = 0;
pub const LEFT: usize = 1;
pub const RIGHT: usize = 2;
pub const RESPOND: usize = 1;

fn d_fixation() -> u32 {
    5
}
fn d_window() -> u32 {
    10
}
fn d_timing_short() -> Vec<u32> {
    vec![30, 33, 36]
}
fn d_timing_long() -> Vec<u32> {
    vec![40, 44, 48]
}
fn d_timing_delay() -> u32 {
    5
}
fn d_disc_durations() -> Vec<u32> {
    vec![10, 15, 22, 33]
}
fn d_long_delay() -> u32 {
    20
}
fn d_dms_stim() -> u32 {
    10
}
fn d_match_prob() -> f64 {
    0.5
}
fn d_angles() -> Vec<f64> {
    vec![0.0, 180.0]
}
fn d_repro_train() -> Vec<u32> {
    (1..=10).map(|i| i * 10).collect()
}
fn d_tolerance() -> f64 {
    0.2
}
fn d_repro_window_factor() -> f64 {
    2.0
}

/// Task identity plus its base (scale 1) parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSpec {
    IntervalTiming {
        #[serde(default = "d_fixation")]
        fixation: u32,
        #[serde(default = "d_timing_short")]
        short: Vec<u32>,
        #[serde(default = "d_timing_long")]
        long: Vec<u32>,
        #[serde(default = "d_timing_delay")]
        delay: u32,
        #[serde(default = "d_window")]
        response_window: u32,
    },
    IntervalDiscrimination {
        #[serde(default = "d_fixation")]
        fixation: u32,
        #[serde(default = "d_disc_durations")]
        durations: Vec<u32>,
        #[serde(default = "d_long_delay")]
        delay: u32,
        #[serde(default = "d_window")]
        response_window: u32,
    },
    DelayedMatchToSample {
        #[serde(default = "d_dms_stim")]
        sample: u32,
        #[serde(default = "d_long_delay")]
        delay: u32,
        #[serde(default = "d_dms_stim")]
        test: u32,
        #[serde(default = "d_window")]
        response_window: u32,
        #[serde(default = "d_match_prob")]
        match_prob: f64,
        /// Sample identities as angles in degrees.
        #[serde(default = "d_angles")]
        angles: Vec<f64>,
    },
    IntervalReproduction {
        #[serde(default = "d_fixation")]
        fixation: u32,
        #[serde(default = "d_repro_train")]
        intervals: Vec<u32>,
        #[serde(default = "d_tolerance")]
        tolerance: f64,
        /// Reproduction phase lasts this many intervals before timing out.
        #[serde(default = "d_repro_window_factor")]
        window_factor: f64,
    },
}

impl TaskSpec {
    pub fn interval_timing() -> Self {
        TaskSpec::IntervalTiming {
            fixation: d_fixation(),
            short: d_timing_short(),
            long: d_timing_long(),
            delay: d_timing_delay(),
            response_window: d_window(),
        }
    }

    pub fn interval_discrimination() -> Self {
        TaskSpec::IntervalDiscrimination {
            fixation: d_fixation(),
            durations: d_disc_durations(),
            delay: d_long_delay(),
            response_window: d_window(),
        }
    }

    pub fn delayed_match_to_sample() -> Self {
        TaskSpec::DelayedMatchToSample {
            sample: d_dms_stim(),
            delay: d_long_delay(),
            test: d_dms_stim(),
            response_window: d_window(),
            match_prob: d_match_prob(),
            angles: d_angles(),
        }
    }

    pub fn interval_reproduction() -> Self {
        TaskSpec::IntervalReproduction {
            fixation: d_fixation(),
            intervals: d_repro_train(),
            tolerance: d_tolerance(),
            window_factor: d_repro_window_factor(),
        }
    }

    /// Held-out reproduction intervals 15, 25, ..., 95.
    pub fn interval_reproduction_validation() -> Self {
        TaskSpec::IntervalReproduction {
            fixation: d_fixation(),
            intervals: (1..=9).map(|i| i * 10 + 5).collect(),
            tolerance: d_tolerance(),
            window_factor: d_repro_window_factor(),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "interval_timing" => Ok(Self::interval_timing()),
            "interval_discrimination" => Ok(Self::interval_discrimination()),
            "delayed_match_to_sample" => Ok(Self::delayed_match_to_sample()),
            "interval_reproduction" => Ok(Self::interval_reproduction()),
            other => Err(Error::EnvSpec(format!("unknown task `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::IntervalTiming { .. } => "interval_timing",
            TaskSpec::IntervalDiscrimination { .. } => "interval_discrimination",
            TaskSpec::DelayedMatchToSample { .. } => "delayed_match_to_sample",
            TaskSpec::IntervalReproduction { .. } => "interval_reproduction",
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            TaskSpec::DelayedMatchToSample { .. } => 3,
            _ => 1,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            TaskSpec::IntervalReproduction { .. } => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    #[serde(flatten)]
    pub task: TaskSpec,
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl EnvSpec {
    pub fn new(task: TaskSpec, scale: f64, seed: u64) -> Self {
        Self { task, scale, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::EnvSpec(format!("scale must be positive, got {}", self.scale)));
        }
        let nonempty = |v: &[u32], what: &str| {
            if v.is_empty() {
                Err(Error::EnvSpec(format!("{what} must not be empty")))
            } else {
                Ok(())
            }
        };
        match &self.task {
            TaskSpec::IntervalTiming { short, long, .. } => {
                nonempty(short, "short")?;
                nonempty(long, "long")?;
                if short.iter().max() >= long.iter().min() {
                    return Err(Error::EnvSpec("short durations must all be below long ones".into()));
                }
            }
            TaskSpec::IntervalDiscrimination { durations, .. } => {
                let mut d = durations.clone();
                d.sort_unstable();
                d.dedup();
                if d.len() < 2 {
                    return Err(Error::EnvSpec("need at least two distinct durations".into()));
                }
            }
            TaskSpec::DelayedMatchToSample {
                match_prob, angles, ..
            } => {
                if !(0.0..=1.0).contains(match_prob) {
                    return Err(Error::EnvSpec("match_prob must lie in [0, 1]".into()));
                }
                if angles.len() < 2 {
                    return Err(Error::EnvSpec("need at least two sample angles".into()));
                }
            }
            TaskSpec::IntervalReproduction {
                intervals,
                tolerance,
                window_factor,
                ..
            } => {
                nonempty(intervals, "intervals")?;
                if !(*tolerance >= 0.0) || !(*window_factor > 1.0 + tolerance) {
                    return Err(Error::EnvSpec(
                        "window_factor must exceed 1 + tolerance".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Base duration scaled and rounded half-up, never below one step.
    pub fn scaled(&self, base: u32) -> usize {
        scale_duration(base, self.scale)
    }

    /// All durations the task can sample, after scaling.
    pub fn duration_set(&self) -> Vec<usize> {
        match &self.task {
            TaskSpec::IntervalTiming { short, long, .. } => {
                short.iter().chain(long).map(|&d| self.scaled(d)).collect()
            }
            TaskSpec::IntervalDiscrimination { durations, .. } => {
                durations.iter().map(|&d| self.scaled(d)).collect()
            }
            TaskSpec::IntervalReproduction { intervals, .. } => {
                intervals.iter().map(|&d| self.scaled(d)).collect()
            }
            TaskSpec::DelayedMatchToSample { sample, test, .. } => {
                vec![self.scaled(*sample), self.scaled(*test)]
            }
        }
    }

    /// Longest time between a pulse and the last step of a trial; the memory
    /// needs to span this.
    pub fn max_memory_span(&self) -> usize {
        let s = |d: u32| self.scaled(d);
        match &self.task {
            TaskSpec::IntervalTiming {
                fixation: _,
                short,
                long,
                delay,
                response_window,
            } => {
                let imax = short.iter().chain(long).max().copied().unwrap_or(0);
                s(imax) + s(*delay) + s(*response_window)
            }
            TaskSpec::IntervalDiscrimination {
                durations,
                delay,
                response_window,
                ..
            } => {
                let mut d = durations.clone();
                d.sort_unstable();
                let n = d.len();
                s(d[n - 1]) + s(d[n - 2]) + s(*delay) + s(*response_window)
            }
            TaskSpec::DelayedMatchToSample {
                sample,
                delay,
                test,
                response_window,
                ..
            } => s(*sample) + s(*delay) + s(*test) + s(*response_window),
            TaskSpec::IntervalReproduction {
                intervals,
                window_factor,
                ..
            } => {
                let imax = intervals.iter().max().copied().unwrap_or(0);
                s(imax) + scale_duration_f(imax as f64 * window_factor, self.scale)
            }
        }
    }
}

pub fn scale_duration(base: u32, scale: f64) -> usize {
    scale_duration_f(base as f64, scale)
}

fn scale_duration_f(base: f64, scale: f64) -> usize {
    ((base * scale + 0.5).floor() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fixation,
    Pulse,
    Interval,
    Delay,
    Sample,
    Test,
    Response,
    Reproduction,
    Finished,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    phase: Phase,
    len: usize,
    obs: Vec<f64>,
}

/// Latent quantities of the current trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub trial_id: u64,
    pub phase: Phase,
    /// Sampled (scaled) durations: one for timing/reproduction, two for
    /// discrimination, the sample/test lengths for DMS.
    pub durations: Vec<usize>,
    /// Action that earns the reward (choice tasks).
    pub correct_action: Option<usize>,
    /// Interval timing: whether the interval belongs to the long group.
    pub is_long: Option<bool>,
    /// DMS: sample and test angles.
    pub stimuli: Option<(f64, f64)>,
    /// Observation index of the first interval pulse.
    pub onset: Option<usize>,
    /// Steps taken in this trial so far.
    pub elapsed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: TrialInfo,
}

/// Summary of a finished trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial_id: u64,
    pub durations: Vec<usize>,
    pub is_long: Option<bool>,
    /// Registered choice or response action, if any.
    pub action: Option<usize>,
    /// Reproduction: elapsed steps since the offset pulse at the response.
    pub response_time: Option<usize>,
    pub reward: f64,
    pub length: usize,
}

impl TrialOutcome {
    pub fn correct(&self) -> bool {
        self.reward > 0.0
    }
}

enum Judge {
    Choice { correct: usize },
    Reproduce { interval: usize, tolerance: f64 },
}

#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    trial_id: u64,
    segments: Vec<Segment>,
    /// Start index of each segment.
    starts: Vec<usize>,
    total_len: usize,
    t: usize,
    done: bool,
    info: TrialInfo,
    judge_choice: Option<usize>,
    judge_interval: Option<usize>,
    last_outcome: Option<TrialOutcome>,
    obs_dim: usize,
}

pub fn make_env(spec: EnvSpec) -> Result<Env> {
    Env::new(spec)
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let obs_dim = spec.task.obs_dim();
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self {
            spec,
            rng,
            trial_id: 0,
            segments: Vec::new(),
            starts: Vec::new(),
            total_len: 0,
            t: 0,
            done: true,
            info: TrialInfo {
                trial_id: 0,
                phase: Phase::Finished,
                durations: Vec::new(),
                correct_action: None,
                is_long: None,
                stimuli: None,
                onset: None,
                elapsed: 0,
            },
            judge_choice: None,
            judge_interval: None,
            last_outcome: None,
            obs_dim,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.spec.task.n_actions()
    }

    pub fn trial_id(&self) -> u64 {
        self.trial_id
    }

    /// Restore the trial counter when resuming from a checkpoint.
    pub fn set_trial_id(&mut self, id: u64) {
        self.trial_id = id;
    }

    pub fn last_outcome(&self) -> Option<&TrialOutcome> {
        self.last_outcome.as_ref()
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn set_rng_state(&mut self, st: &RngState) -> Result<()> {
        self.rng = st.restore()?;
        Ok(())
    }

    /// Total number of observations in the current trial.
    pub fn trial_len(&self) -> usize {
        self.total_len
    }

    fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.obs_dim]
    }

    fn pulse(&self) -> Vec<f64> {
        vec![1.0; self.obs_dim]
    }

    fn push(&mut self, phase: Phase, len: usize, obs: Vec<f64>) {
        if len > 0 {
            self.segments.push(Segment { phase, len, obs });
        }
    }

    /// `pulse, len-1 zeros, pulse`: two pulses `len` steps apart.
    fn push_interval(&mut self, len: usize) {
        let (p, z) = (self.pulse(), self.zeros());
        self.push(Phase::Pulse, 1, p.clone());
        self.push(Phase::Interval, len - 1, z);
        self.push(Phase::Pulse, 1, p);
    }

    fn build_trial(&mut self) {
        self.segments.clear();
        let spec = self.spec.clone();
        let sc = |d: u32| spec.scaled(d);
        let mut info = TrialInfo {
            trial_id: self.trial_id,
            phase: Phase::Fixation,
            durations: Vec::new(),
            correct_action: None,
            is_long: None,
            stimuli: None,
            onset: None,
            elapsed: 0,
        };
        self.judge_choice = None;
        self.judge_interval = None;
        match &spec.task {
            TaskSpec::IntervalTiming {
                fixation,
                short,
                long,
                delay,
                response_window,
            } => {
                let n = short.len() + long.len();
                let pick = self.rng.gen_range(0..n);
                let (base, is_long) = if pick < short.len() {
                    (short[pick], false)
                } else {
                    (long[pick - short.len()], true)
                };
                let interval = sc(base);
                self.push(Phase::Fixation, sc(*fixation), self.zeros());
                info.onset = Some(sc(*fixation));
                self.push_interval(interval);
                // window opens `delay` steps after the offset pulse
                self.push(Phase::Delay, sc(*delay) - 1, self.zeros());
                self.push(Phase::Response, sc(*response_window), self.zeros());
                info.durations = vec![interval];
                info.is_long = Some(is_long);
                let correct = if is_long { RIGHT } else { LEFT };
                info.correct_action = Some(correct);
                self.judge_choice = Some(correct);
            }
            TaskSpec::IntervalDiscrimination {
                fixation,
                durations,
                delay,
                response_window,
            } => {
                let mut pool = durations.clone();
                pool.sort_unstable();
                pool.dedup();
                let picked: Vec<u32> = pool.choose_multiple(&mut self.rng, 2).copied().collect();
                let (d1, d2) = (sc(picked[0]), sc(picked[1]));
                self.push(Phase::Fixation, sc(*fixation), self.zeros());
                info.onset = Some(sc(*fixation));
                self.push_interval(d1);
                self.push(Phase::Delay, sc(*delay) - 1, self.zeros());
                self.push_interval(d2);
                self.push(Phase::Response, sc(*response_window), self.zeros());
                info.durations = vec![d1, d2];
                // left: the first stimulus was longer
                let correct = if d1 > d2 { LEFT } else { RIGHT };
                info.correct_action = Some(correct);
                self.judge_choice = Some(correct);
            }
            TaskSpec::DelayedMatchToSample {
                sample,
                delay,
                test,
                response_window,
                match_prob,
                angles,
            } => {
                let si = self.rng.gen_range(0..angles.len());
                let is_match = self.rng.gen_bool(*match_prob);
                let ti = if is_match {
                    si
                } else {
                    let mut j = self.rng.gen_range(0..angles.len() - 1);
                    if j >= si {
                        j += 1;
                    }
                    j
                };
                let enc = |deg: f64| {
                    let th = deg.to_radians();
                    vec![1.0, (1.0 + th.cos()) / 2.0, (1.0 + th.sin()) / 2.0]
                };
                info.onset = Some(0);
                self.push(Phase::Sample, sc(*sample), enc(angles[si]));
                self.push(Phase::Delay, sc(*delay), vec![1.0, 0.0, 0.0]);
                self.push(Phase::Test, sc(*test), enc(angles[ti]));
                self.push(Phase::Response, sc(*response_window), vec![0.0; 3]);
                info.durations = vec![sc(*sample), sc(*test)];
                info.stimuli = Some((angles[si], angles[ti]));
                // left: match
                let correct = if is_match { LEFT } else { RIGHT };
                info.correct_action = Some(correct);
                self.judge_choice = Some(correct);
            }
            TaskSpec::IntervalReproduction {
                fixation,
                intervals,
                window_factor,
                ..
            } => {
                let base = intervals[self.rng.gen_range(0..intervals.len())];
                let interval = sc(base);
                self.push(Phase::Fixation, sc(*fixation), self.zeros());
                info.onset = Some(sc(*fixation));
                self.push_interval(interval);
                let window = scale_duration_f(base as f64 * window_factor, spec.scale);
                self.push(Phase::Reproduction, window, self.zeros());
                info.durations = vec![interval];
                self.judge_interval = Some(interval);
            }
        }
        self.starts.clear();
        let mut acc = 0;
        for seg in &self.segments {
            self.starts.push(acc);
            acc += seg.len;
        }
        self.total_len = acc;
        self.info = info;
    }

    fn segment_at(&self, t: usize) -> Option<usize> {
        if t >= self.total_len {
            return None;
        }
        Some(self.starts.partition_point(|&s| s <= t) - 1)
    }

    /// Index of the observation at which the response/reproduction phase
    /// begins.
    pub fn response_start(&self) -> Option<usize> {
        self.segments
            .iter()
            .zip(&self.starts)
            .find(|(s, _)| matches!(s.phase, Phase::Response | Phase::Reproduction))
            .map(|(_, &st)| st)
    }

    fn judge(&self) -> Judge {
        match (self.judge_choice, self.judge_interval) {
            (Some(c), _) => Judge::Choice { correct: c },
            (None, Some(i)) => Judge::Reproduce {
                interval: i,
                tolerance: match &self.spec.task {
                    TaskSpec::IntervalReproduction { tolerance, .. } => *tolerance,
                    _ => 0.2,
                },
            },
            _ => unreachable!("trial built without a judge"),
        }
    }

    fn observe(&self) -> Vec<f64> {
        match self.segment_at(self.t) {
            Some(i) => self.segments[i].obs.clone(),
            None => self.zeros(),
        }
    }

    pub fn reset(&mut self) -> StepResult {
        self.trial_id += 1;
        self.build_trial();
        self.t = 0;
        self.done = false;
        self.info.phase = self.segments[0].phase;
        StepResult {
            observation: self.observe(),
            reward: 0.0,
            done: false,
            info: self.info.clone(),
        }
    }

    fn finish(&mut self, reward: f64, action: Option<usize>, response_time: Option<usize>) -> StepResult {
        self.done = true;
        self.info.phase = Phase::Finished;
        self.info.elapsed = self.t + 1;
        self.last_outcome = Some(TrialOutcome {
            trial_id: self.trial_id,
            durations: self.info.durations.clone(),
            is_long: self.info.is_long,
            action,
            response_time,
            reward,
            length: self.t + 1,
        });
        StepResult {
            observation: self.zeros(),
            reward,
            done: true,
            info: self.info.clone(),
        }
    }

    /// Register `action` at the current observation and advance one step.
    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action >= self.n_actions() {
            return Err(Error::InvalidAction {
                task: self.spec.task.name(),
                action,
            });
        }
        let seg = self.segment_at(self.t).expect("in-progress trial has a segment");
        let phase = self.segments[seg].phase;
        match (phase, self.judge()) {
            (Phase::Response, Judge::Choice { correct }) if action != HOLD => {
                let r = if action == correct { 1.0 } else { -1.0 };
                return Ok(self.finish(r, Some(action), None));
            }
            (Phase::Reproduction, Judge::Reproduce { interval, tolerance }) if action == RESPOND => {
                let elapsed = self.t - self.starts[seg] + 1;
                let err = (elapsed as f64 - interval as f64).abs();
                let r = if err <= tolerance * interval as f64 { 1.0 } else { -1.0 };
                return Ok(self.finish(r, Some(action), Some(elapsed)));
            }
            _ => {}
        }
        if self.t + 1 >= self.total_len {
            return Ok(self.finish(0.0, None, None));
        }
        self.t += 1;
        let seg = self.segment_at(self.t).expect("checked bound");
        self.info.phase = self.segments[seg].phase;
        self.info.elapsed = self.t;
        Ok(StepResult {
            observation: self.observe(),
            reward: 0.0,
            done: false,
            info: self.info.clone(),
        })
    }

    /// Observation sequence of the whole current trial under an all-hold policy.
    pub fn schedule_observations(&self) -> Vec<Vec<f64>> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat(s.obs.clone()).take(s.len))
            .collect()
    }

    /// `(phase, length)` pairs of the current trial.
    pub fn schedule(&self) -> Vec<(Phase, usize)> {
        self.segments.iter().map(|s| (s.phase, s.len)).collect()
    }
}

/// CSV trial log: `trial_id,task,scale,sampled_durations,action,reward,trial_length`,
/// optionally followed by a `config_hash` column.
pub struct TrialLog<W: Write> {
    out: W,
    hash: Option<String>,
}

impl<W: Write> TrialLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "trial_id,task,scale,sampled_durations,action,reward,trial_length")?;
        Ok(Self { out, hash: None })
    }

    /// Log whose rows carry the config hash of the run that produced them.
    pub fn with_config_hash(mut out: W, hash: &str) -> Result<Self> {
        writeln!(out, "trial_id,task,scale,sampled_durations,action,reward,trial_length,config_hash")?;
        Ok(Self {
            out,
            hash: Some(hash.to_string()),
        })
    }

    pub fn append(&mut self, spec: &EnvSpec, o: &TrialOutcome) -> Result<()> {
        let durs: Vec<String> = o.durations.iter().map(|d| d.to_string()).collect();
        let action = o.action.map(|a| a.to_string()).unwrap_or_default();
        write!(
            self.out,
            "{},{},{},{},{},{},{}",
            o.trial_id,
            spec.task.name(),
            spec.scale,
            durs.join(";"),
            action,
            o.reward,
            o.length
        )?;
        match &self.hash {
            Some(h) => writeln!(self.out, ",{h}")?,
            None => writeln!(self.out)?,
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
