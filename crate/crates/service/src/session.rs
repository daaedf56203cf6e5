//! One rendering session: a servo simulator driven by held device states.
//! Offline synthesis and the stream both step through this type, so the same
//! seed and state schedule give the same samples.

use haptex_core::render::{DeviceSample, ForceFrame, RenderConfig, RenderModel, ServoSim};
use haptex_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

/// Device state as sent by a client. `f` in N, `v` in mm/s, `delta` in m
/// (overrides the spring depth `f / k_n`), `tap` impact speed in mm/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceState {
    #[serde(default)]
    pub f: f64,
    #[serde(default)]
    pub v: f64,
    #[serde(default, alias = "δ", skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap: Option<f64>,
}

impl DeviceState {
    pub fn new(f: f64, v: f64) -> Self {
        Self { f, v, delta: None, tap: None }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        for (name, v) in [("f", Some(self.f)), ("v", Some(self.v)), ("delta", self.delta), ("tap", self.tap)] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    return Err(ServiceError::Usage(format!("{name} must be finite and >= 0, got {v}")));
                }
            }
        }
        Ok(())
    }
}

pub struct Session {
    sim: ServoSim<f64>,
    depth: f64,
    speed: f64,
    tap: Option<f64>,
    tick: u64,
}

impl Session {
    pub fn new(model: RenderModel<f64>, cfg: RenderConfig<f64>, seed: u64) -> Result<Self, ServiceError> {
        Ok(Self { sim: ServoSim::new(model, cfg, seed)?, depth: 0.0, speed: 0.0, tap: None, tick: 0 })
    }

    /// Hold `s` from the next tick on. A tap fires once, on that tick.
    pub fn apply(&mut self, s: &DeviceState) {
        // same arithmetic as scripted trajectories
        self.depth = match s.delta {
            Some(d) => f64::lit(d),
            None => f64::lit(s.f) / self.sim.cfg.k_n,
        };
        self.speed = f64::lit(s.v / 1000.0);
        self.tap = s.tap.map(|t| f64::lit(t / 1000.0));
    }

    pub fn step(&mut self) -> ForceFrame<f64> {
        let mut s = DeviceSample::planar(self.depth, self.speed);
        s.impact_speed = self.tap.take();
        self.tick += 1;
        self.sim.tick(&s)
    }

    /// Samples from the last step.
    pub fn vibration(&self) -> &[f64] {
        self.sim.last_vibration()
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn config(&self) -> &RenderConfig<f64> {
        &self.sim.cfg
    }

    /// Run each state for its tick count and collect the vibration.
    pub fn render(&mut self, schedule: &[(DeviceState, usize)]) -> Vec<f64> {
        let n = self.sim.cfg.samples_per_tick();
        let mut out = Vec::with_capacity(schedule.iter().map(|s| s.1).sum::<usize>() * n);
        for (state, ticks) in schedule {
            self.apply(state);
            for _ in 0..*ticks {
                self.step();
                out.extend_from_slice(self.vibration());
            }
        }
        out
    }
}
