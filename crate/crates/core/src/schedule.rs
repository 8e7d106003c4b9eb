//! Cyclic distillation-weight scheduling.
//!
//! Within a cycle of `len` steps the weight follows a cosine ramp from
//! `alpha_min` (position 0) to `alpha_max` (position `len`). The round after
//! the maximum restarts at position 0 of a longer cycle.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the cycle length changes after each completed cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Growth {
    /// `len <- round(len * factor)`, factor >= 1.
    Multiply(f64),
    /// `len <- len + step`.
    Add(usize),
}

impl Growth {
    pub fn apply(self, len: usize) -> usize {
        match self {
            Growth::Multiply(f) => ((len as f64) * f).round().max(len as f64) as usize,
            Growth::Add(a) => len + a,
        }
    }
}

impl Default for Growth {
    fn default() -> Self {
        Growth::Multiply(2.0)
    }
}

impl fmt::Display for Growth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Growth::Multiply(m) => write!(f, "x{m}"),
            Growth::Add(a) => write!(f, "+{a}"),
        }
    }
}

impl FromStr for Growth {
    type Err = Error;

    /// `x2` / `*2` multiply, `+5` add, `fixed` keeps the period constant.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("scheduler.period_growth", format!("cannot parse `{s}`"));
        let s = s.trim();
        if s == "fixed" {
            return Ok(Growth::Add(0));
        }
        if let Some(rest) = s.strip_prefix('x').or_else(|| s.strip_prefix('*')) {
            let f: f64 = rest.parse().map_err(|_| bad())?;
            if !(f >= 1.0 && f.is_finite()) {
                return Err(Error::config("scheduler.period_growth", "factor must be >= 1"));
            }
            return Ok(Growth::Multiply(f));
        }
        if let Some(rest) = s.strip_prefix('+') {
            return Ok(Growth::Add(rest.parse().map_err(|_| bad())?));
        }
        Err(bad())
    }
}

impl Serialize for Growth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Growth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rise-only ramps reach the maximum at the cycle's last position; full
/// cycles rise to the maximum at mid-cycle and fall back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CycleShape {
    #[default]
    Rise,
    Full,
}

/// Static parameters of the cyclic schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleParams {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub initial_len: usize,
    pub growth: Growth,
    pub shape: CycleShape,
}

impl Default for CycleParams {
    fn default() -> Self {
        Self {
            alpha_min: 0.0,
            alpha_max: 1.0,
            initial_len: 10,
            growth: Growth::default(),
            shape: CycleShape::Rise,
        }
    }
}

impl CycleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= alpha_min ({}) <= alpha_max ({}) <= 1",
                self.alpha_min, self.alpha_max
            )));
        }
        if self.initial_len == 0 {
            return Err(Error::InvalidArgument("initial period must be >= 1".into()));
        }
        Ok(())
    }
}

/// Round-stamp pair each aggregator passes to its successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerHandoff {
    pub current_round: u64,
    /// Round at which the current cycle started (position 0).
    pub last_period_update_round: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleState {
    pub params: CycleParams,
    pub cycle_len: usize,
    pub pos: usize,
}

impl CycleState {
    pub fn new(params: CycleParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            cycle_len: params.initial_len,
            pos: 0,
        })
    }

    /// Rebuild the state at `handoff.current_round` (rounds start at 1) from
    /// the two stamps alone.
    pub fn from_handoff(params: CycleParams, handoff: SchedulerHandoff) -> Result<Self> {
        params.validate()?;
        let SchedulerHandoff {
            current_round,
            last_period_update_round: start,
        } = handoff;
        if start == 0 || start > current_round {
            return Err(Error::InvalidArgument(format!(
                "inconsistent handoff: cycle start {start}, round {current_round}"
            )));
        }
        let mut len = params.initial_len;
        let mut cycle_start = 1u64;
        while cycle_start < start {
            cycle_start += len as u64 + 1;
            len = params.growth.apply(len);
        }
        if cycle_start != start {
            return Err(Error::InvalidArgument(format!(
                "round {start} is not a cycle boundary"
            )));
        }
        let pos = (current_round - start) as usize;
        if pos > len {
            return Err(Error::InvalidArgument(format!(
                "position {pos} exceeds cycle length {len}"
            )));
        }
        Ok(Self {
            params,
            cycle_len: len,
            pos,
        })
    }

    /// Normalized phase in `[0, 1]`.
    fn phase_at(&self, pos: usize) -> f64 {
        let len = self.cycle_len as f64;
        match self.params.shape {
            CycleShape::Rise if pos == 0 => 0.0,
            CycleShape::Rise if pos == self.cycle_len => 1.0,
            CycleShape::Rise => 0.5 * (1.0 - (PI * pos as f64 / len).cos()),
            CycleShape::Full => 0.5 * (1.0 - (2.0 * PI * pos as f64 / len).cos()),
        }
    }

    fn alpha_for(&self, pos: usize) -> f64 {
        let CycleParams {
            alpha_min,
            alpha_max,
            ..
        } = self.params;
        let a = alpha_min + (alpha_max - alpha_min) * self.phase_at(pos);
        a.clamp(alpha_min, alpha_max)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_for(self.pos)
    }

    /// Next round's state. Returns `true` when a new cycle starts.
    pub fn advance(&mut self) -> bool {
        if self.pos < self.cycle_len {
            self.pos += 1;
            false
        } else {
            self.pos = 0;
            self.cycle_len = self.params.growth.apply(self.cycle_len);
            true
        }
    }

    /// Whether the current position is among the `m` largest-weight
    /// positions of its cycle.
    pub fn is_peak_round(&self, m: usize) -> bool {
        let m = m.clamp(1, self.cycle_len.max(1));
        let here = self.alpha();
        let above = (0..=self.cycle_len)
            .filter(|&p| self.alpha_for(p) > here)
            .count();
        above < m
    }

    /// `(gamma, alpha)` scales for supervision and distillation.
    pub fn component_scales(&self, mode: ComponentMode) -> (f64, f64) {
        mode.scales(self.alpha())
    }
}

/// How the oscillating factor is assigned to the two loss components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComponentMode {
    /// Supervision scaled by `1 - alpha`, distillation by `alpha`.
    #[default]
    Opposed,
    /// Supervision scaled by `1 - alpha`, distillation fixed at 1.
    SupervisionOnly,
    /// Supervision fixed at 1, distillation scaled by `alpha`.
    DistillationOnly,
    /// Both scaled by `alpha`.
    Common,
}

impl ComponentMode {
    pub fn scales(self, alpha: f64) -> (f64, f64) {
        match self {
            ComponentMode::Opposed => (1.0 - alpha, alpha),
            ComponentMode::SupervisionOnly => (1.0 - alpha, 1.0),
            ComponentMode::DistillationOnly => (1.0, alpha),
            ComponentMode::Common => (alpha, alpha),
        }
    }
}

/// Either the cyclic ramp or a constant weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSchedule {
    Cyclic(CycleState),
    Fixed(f64),
}

impl AlphaSchedule {
    pub fn alpha(&self) -> f64 {
        match self {
            AlphaSchedule::Cyclic(c) => c.alpha(),
            AlphaSchedule::Fixed(a) => *a,
        }
    }

    pub fn advance(&mut self) -> bool {
        match self {
            AlphaSchedule::Cyclic(c) => c.advance(),
            AlphaSchedule::Fixed(_) => false,
        }
    }

    pub fn is_peak_round(&self, m: usize) -> bool {
        match self {
            AlphaSchedule::Cyclic(c) => c.is_peak_round(m),
            AlphaSchedule::Fixed(_) => true,
        }
    }

    pub fn cycle(&self) -> Option<&CycleState> {
        match self {
            AlphaSchedule::Cyclic(c) => Some(c),
            AlphaSchedule::Fixed(_) => None,
        }
    }
}

/// `fixed:<value>` or `cyclic`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleMode {
    Cyclic,
    Fixed(f64),
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = "scheduler.mode";
        match s.trim() {
            "cyclic" => Ok(ScheduleMode::Cyclic),
            other => {
                let v = other
                    .strip_prefix("fixed:")
                    .ok_or_else(|| Error::config(key, format!("expected `cyclic` or `fixed:<alpha>`, got `{other}`")))?;
                let a: f64 = v
                    .parse()
                    .map_err(|_| Error::config(key, format!("bad alpha `{v}`")))?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::config(key, "fixed alpha must lie in [0, 1]"));
                }
                Ok(ScheduleMode::Fixed(a))
            }
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleMode::Cyclic => f.write_str("cyclic"),
            ScheduleMode::Fixed(a) => write!(f, "fixed:{a}"),
        }
    }
}

impl Serialize for ScheduleMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScheduleMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
