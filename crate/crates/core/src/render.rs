//! 1 kHz force rendering: spring, friction, AR vibration and tap impulses.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ArGrid, TapBank, TAP_LEN};
use crate::synth::{self, Interpolator, SynthError, Synthesizer};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("zero-norm latent ({0})")]
    ZeroVector(&'static str),
    #[error("friction anchor set is empty")]
    NoAnchors,
    #[error("latent dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Device and loop constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct RenderConfig<T> {
    /// N/m
    pub k_n: T,
    pub g_vib: T,
    /// N
    pub f_max: T,
    /// kg
    pub m_eff: T,
    pub servo_rate: u32,
    pub signal_rate: u32,
    pub friction_k: usize,
    pub friction_tau: T,
}

impl<T: Scalar> Default for RenderConfig<T> {
    fn default() -> Self {
        Self {
            k_n: T::lit(500.0),
            g_vib: T::lit(0.5),
            f_max: T::lit(3.3),
            m_eff: T::lit(0.05),
            servo_rate: 1000,
            signal_rate: 10_000,
            friction_k: 5,
            friction_tau: T::lit(0.1),
        }
    }
}

impl<T: Scalar> RenderConfig<T> {
    pub fn validate(&self) -> Result<(), RenderError> {
        let pos = [("k_n", self.k_n), ("g_vib", self.g_vib), ("f_max", self.f_max), ("m_eff", self.m_eff), ("friction_tau", self.friction_tau)];
        for (name, v) in pos {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(RenderError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.servo_rate == 0 || self.signal_rate == 0 || self.friction_k == 0 {
            return Err(RenderError::InvalidConfig("rates and friction_k must be positive".into()));
        }
        if self.signal_rate % self.servo_rate != 0 {
            return Err(RenderError::InvalidConfig("signal_rate must be a multiple of servo_rate".into()));
        }
        Ok(())
    }

    pub fn samples_per_tick(&self) -> usize {
        (self.signal_rate / self.servo_rate) as usize
    }
}

/// Device state for one servo tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceSample<T> {
    /// m, 0 when out of contact
    pub penetration: T,
    /// m/s in the surface plane
    pub tangential_velocity: [T; 2],
    pub normal: [T; 3],
    pub tangent: [T; 3],
    /// m/s, set on the tick an impact occurs
    pub impact_speed: Option<T>,
}

impl<T: Scalar> DeviceSample<T> {
    /// Flat surface with normal +z, sliding along +x at `speed` m/s.
    pub fn planar(penetration: T, speed: T) -> Self {
        Self {
            penetration,
            tangential_velocity: [speed, T::zero()],
            normal: [T::zero(), T::zero(), T::one()],
            tangent: [T::one(), T::zero(), T::zero()],
            impact_speed: None,
        }
    }

    pub fn speed(&self) -> T {
        let [x, y] = self.tangential_velocity;
        (x * x + y * y).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForceFrame<T> {
    /// includes the tap impulse during an impact window
    pub f_n: T,
    pub f_t: T,
    pub f_vib: T,
    pub f_tap: T,
    pub total: [T; 3],
}

/// Speeds below this (m/s) get no friction.
pub const STATIC_SPEED: f64 = 1e-6;

/// Force for one tick. `y_n` is the vibration sample, `tap_accel` the summed
/// tap transient (m/s^2) or 0.
pub fn compose_force<T: Scalar>(s: &DeviceSample<T>, mu: T, y_n: T, tap_accel: T, cfg: &RenderConfig<T>) -> ForceFrame<T> {
    if !(s.penetration > T::zero()) {
        return ForceFrame::default();
    }
    let f_tap = cfg.m_eff * tap_accel;
    let f_n = cfg.k_n * s.penetration + f_tap;
    let f_t = if s.speed() < T::lit(STATIC_SPEED) { T::zero() } else { mu * f_n };
    let f_vib = cfg.g_vib * y_n * cfg.f_max;
    let mut total = [T::zero(); 3];
    for i in 0..3 {
        total[i] = f_n * s.normal[i] - f_t * s.tangent[i] + f_vib * s.tangent[i];
    }
    ForceFrame { f_n, f_t, f_vib, f_tap, total }
}

/// Latents paired with friction coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionAnchorSet<T> {
    pub anchors: Vec<(Vec<T>, T)>,
}

fn norm<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

/// Softmax over the cosine similarities of the `k` most similar anchors at
/// temperature `tau`, applied to their friction coefficients.
pub fn estimate_friction<T: Scalar>(z: &[T], set: &FrictionAnchorSet<T>, k: usize, tau: T) -> Result<T, RenderError> {
    if set.anchors.is_empty() {
        return Err(RenderError::NoAnchors);
    }
    let zn = norm(z);
    if !(zn > T::zero()) {
        return Err(RenderError::ZeroVector("query"));
    }
    let mut sims = Vec::with_capacity(set.anchors.len());
    for (i, (a, mu)) in set.anchors.iter().enumerate() {
        if a.len() != z.len() {
            return Err(RenderError::DimensionMismatch(a.len(), z.len()));
        }
        let an = norm(a);
        if !(an > T::zero()) {
            return Err(RenderError::ZeroVector("anchor"));
        }
        let dot: T = a.iter().zip(z).map(|(x, y)| *x * *y).sum();
        sims.push((dot / (an * zn), *mu, i));
    }
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.2.cmp(&b.2)));
    let top = &sims[..k.max(1).min(sims.len())];
    let best = top[0].0;
    let mut wsum = T::zero();
    let mut acc = T::zero();
    for &(s, mu, _) in top {
        let w = ((s - best) / tau).exp();
        wsum += w;
        acc += w * mu;
    }
    Ok(acc / wsum)
}

/// A renderable material: AR grid, tap bank and friction.
#[derive(Debug, Clone)]
pub struct RenderModel<T> {
    pub interp: Interpolator<T>,
    pub taps: TapBank,
    pub mu: T,
}

impl<T: Scalar> RenderModel<T> {
    pub fn new(grid: &ArGrid, taps: TapBank, mu: T) -> Result<Self, RenderError> {
        Ok(Self { interp: Interpolator::new(grid)?, taps, mu })
    }
}

const TAP_SLOTS: usize = 16;

#[derive(Debug, Clone, Copy)]
struct ActiveTap<T> {
    trace: [T; TAP_LEN],
    /// first sample index of the next tick
    pos: usize,
}

/// Servo loop state. `tick` does no allocation.
#[derive(Debug, Clone)]
pub struct ServoSim<T> {
    pub model: RenderModel<T>,
    pub cfg: RenderConfig<T>,
    synth: Synthesizer<T>,
    vib: Vec<T>,
    taps: [Option<ActiveTap<T>>; TAP_SLOTS],
    next_slot: usize,
}

impl<T: Scalar> ServoSim<T> {
    pub fn new(model: RenderModel<T>, cfg: RenderConfig<T>, seed: u64) -> Result<Self, RenderError> {
        cfg.validate()?;
        let mut synth = Synthesizer::new(seed);
        synth.sample_rate = cfg.signal_rate as f64;
        Ok(Self { model, vib: vec![T::zero(); cfg.samples_per_tick()], cfg, synth, taps: [None; TAP_SLOTS], next_slot: 0 })
    }

    /// Vibration samples produced by the last tick.
    pub fn last_vibration(&self) -> &[T] {
        &self.vib
    }

    pub fn reset(&mut self) {
        self.synth.reset();
        self.taps = [None; TAP_SLOTS];
        self.next_slot = 0;
        self.vib.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn tick(&mut self, s: &DeviceSample<T>) -> ForceFrame<T> {
        let n = self.vib.len();
        if let Some(v) = s.impact_speed {
            let mut trace = [T::zero(); TAP_LEN];
            synth::render_tap_into(&self.model.taps, v * T::lit(1000.0), &mut trace);
            self.taps[self.next_slot] = Some(ActiveTap { trace, pos: 0 });
            self.next_slot = (self.next_slot + 1) % TAP_SLOTS;
        }
        // every tap advances one tick of samples; the tick's force uses the
        // last sample of the tick
        let mut tap_accel = T::zero();
        for slot in self.taps.iter_mut() {
            if let Some(t) = slot {
                let last = t.pos + n - 1;
                if last < TAP_LEN {
                    tap_accel += t.trace[last];
                }
                t.pos += n;
                if t.pos >= TAP_LEN {
                    *slot = None;
                }
            }
        }
        let in_contact = s.penetration > T::zero();
        if in_contact {
            // lookup uses the spring force before any tap impulse
            let spring = self.cfg.k_n * s.penetration;
            let params = self.model.interp.interpolate(spring, s.speed() * T::lit(1000.0));
            if self.synth.synthesize_into(&params.ar, &mut self.vib).is_err() {
                self.vib.iter_mut().for_each(|v| *v = T::zero());
            }
        } else {
            self.vib.iter_mut().for_each(|v| *v = T::zero());
        }
        let y = self.vib[n - 1];
        compose_force(s, self.model.mu, y, tap_accel, &self.cfg)
    }
}

/// One scripted segment. Give either `depth_m` or `force_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_n: Option<f64>,
    #[serde(default)]
    pub speed_mm_s: f64,
    /// impact speed in mm/s, applied on the first tick of the segment
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScript {
    pub segments: Vec<Segment>,
}

impl TrajectoryScript {
    pub fn from_json(text: &str) -> Result<Self, RenderError> {
        let script: TrajectoryScript = match serde_json::from_str(text) {
            Ok(s) => s,
            // a bare list of segments is accepted too
            Err(_) => TrajectoryScript { segments: serde_json::from_str(text)? },
        };
        Ok(script)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        for (i, s) in self.segments.iter().enumerate() {
            let bad = |m: &str| Err(RenderError::InvalidScript(format!("segment {i}: {m}")));
            if !s.duration_s.is_finite() || s.duration_s < 0.0 {
                return bad("duration must be finite and >= 0");
            }
            if s.depth_m.is_some() && s.force_n.is_some() {
                return bad("give depth_m or force_n, not both");
            }
            for (name, v) in [("depth_m", s.depth_m), ("force_n", s.force_n), ("tap", s.tap), ("speed_mm_s", Some(s.speed_mm_s))] {
                if let Some(v) = v {
                    if !v.is_finite() || v < 0.0 {
                        return bad(&format!("{name} must be finite and >= 0"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn ticks(&self, servo_rate: u32) -> usize {
        self.segments.iter().map(|s| (s.duration_s * servo_rate as f64).round() as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow<T> {
    pub tick: usize,
    pub penetration: T,
    /// m/s
    pub speed: T,
    pub frame: ForceFrame<T>,
    pub compute_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog<T> {
    pub rows: Vec<LogRow<T>>,
    /// vibration stream at the signal rate
    pub vibration: Vec<T>,
    pub signal_rate: u32,
}

impl<T: Scalar> SimLog<T> {
    pub fn mean_compute_us(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.compute_ns as f64).sum::<f64>() / self.rows.len() as f64 / 1e3
    }

    /// Nearest-rank percentile of tick compute time in microseconds.
    pub fn percentile_compute_us(&self, q: f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let mut t: Vec<u64> = self.rows.iter().map(|r| r.compute_ns).collect();
        t.sort_unstable();
        let rank = ((q / 100.0) * t.len() as f64).ceil().max(1.0) as usize;
        t[rank.min(t.len()) - 1] as f64 / 1e3
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RenderError> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| RenderError::Io(std::io::Error::other(e));
        out.write_record(["tick", "delta_m", "v_t_m_s", "F_n", "F_t", "F_vib", "F_tap", "compute_us"]).map_err(io)?;
        for r in &self.rows {
            let f = |x: T| format!("{}", x.to_f64_lossy());
            out.write_record([
                r.tick.to_string(),
                f(r.penetration),
                f(r.speed),
                f(r.frame.f_n),
                f(r.frame.f_t),
                f(r.frame.f_vib),
                f(r.frame.f_tap),
                format!("{:.3}", r.compute_ns as f64 / 1e3),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_wav(&self, path: &Path) -> Result<(), RenderError> {
        synth::write_wav(path, &self.vibration, self.signal_rate)?;
        Ok(())
    }
}

/// Step the servo over a script. Device samples are planar: normal +z,
/// sliding along +x.
pub fn run_trajectory<T: Scalar>(script: &TrajectoryScript, sim: &mut ServoSim<T>) -> Result<SimLog<T>, RenderError> {
    script.validate()?;
    let rate = sim.cfg.servo_rate;
    let total = script.ticks(rate);
    let n = sim.cfg.samples_per_tick();
    let mut rows = Vec::with_capacity(total);
    let mut vibration = Vec::with_capacity(total * n);
    let mut tick = 0;
    for seg in &script.segments {
        let depth = match (seg.depth_m, seg.force_n) {
            (Some(d), _) => T::lit(d),
            (None, Some(f)) => T::lit(f) / sim.cfg.k_n,
            (None, None) => T::zero(),
        };
        let ticks = (seg.duration_s * rate as f64).round() as usize;
        for j in 0..ticks {
            let mut s = DeviceSample::planar(depth, T::lit(seg.speed_mm_s / 1000.0));
            if j == 0 {
                s.impact_speed = seg.tap.map(|v| T::lit(v / 1000.0));
            }
            let start = Instant::now();
            let frame = sim.tick(&s);
            let compute_ns = start.elapsed().as_nanos() as u64;
            vibration.extend_from_slice(sim.last_vibration());
            rows.push(LogRow { tick, penetration: depth, speed: s.speed(), frame, compute_ns });
            tick += 1;
        }
    }
    Ok(SimLog { rows, vibration, signal_rate: sim.cfg.signal_rate })
}
