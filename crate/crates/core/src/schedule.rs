//! Learning-rate schedules, scheduled weight decay, LR spikes and iterate
//! averaging.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CooldownShape {
    Linear,
    Cosine,
    Sqrt,
}

impl CooldownShape {
    /// Remaining fraction at progress `x ∈ [0, 1]` through the cooldown.
    pub fn factor(self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match self {
            CooldownShape::Linear => 1.0 - x,
            CooldownShape::Cosine => 0.5 * (1.0 + (PI * x).cos()),
            CooldownShape::Sqrt => (1.0 - x).sqrt(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CooldownShape::Linear => "linear",
            CooldownShape::Cosine => "cosine",
            CooldownShape::Sqrt => "sqrt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(CooldownShape::Linear),
            "cosine" => Ok(CooldownShape::Cosine),
            "sqrt" => Ok(CooldownShape::Sqrt),
            other => Err(Error::Config(format!("unknown cooldown shape `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Constant,
    WarmupStableDecay {
        warmup: u64,
        stable_end: u64,
        total: u64,
        shape: CooldownShape,
    },
    LinearDecay {
        total: u64,
    },
    Cosine {
        total: u64,
        min_lr: f64,
    },
    Step {
        period: u64,
        factor: f64,
    },
    Exponential {
        rate: f64,
    },
    OneCycle {
        total: u64,
        peak_fraction: f64,
    },
    ConstantCooldown {
        cooldown: u64,
        total: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub max_lr: f64,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, max_lr: f64) -> Result<Self> {
        if !(max_lr > 0.0) {
            return Err(Error::Config(format!("peak learning rate must be positive, got {max_lr}")));
        }
        let bad = |m: String| Err(Error::Config(m));
        match kind {
            ScheduleKind::WarmupStableDecay {
                warmup,
                stable_end,
                total,
                ..
            } if !(warmup <= stable_end && stable_end <= total && total >= 1) => {
                return bad(format!("need warmup <= stable end <= total, got {warmup}, {stable_end}, {total}"));
            }
            ScheduleKind::LinearDecay { total } | ScheduleKind::Cosine { total, .. } if total == 0 => {
                return bad("schedule horizon must be positive".into());
            }
            ScheduleKind::Cosine { min_lr, .. } if !(0.0..=max_lr).contains(&min_lr) => {
                return bad(format!("cosine floor {min_lr} outside [0, {max_lr}]"));
            }
            ScheduleKind::Step { period, factor } if period == 0 || !(factor > 0.0) => {
                return bad("step schedule needs period >= 1 and factor > 0".into());
            }
            ScheduleKind::Exponential { rate } if !(rate > 0.0) => {
                return bad("exponential rate must be positive".into());
            }
            ScheduleKind::OneCycle { total, peak_fraction } if total == 0 || !(0.0..=1.0).contains(&peak_fraction) => {
                return bad("one-cycle needs total >= 1 and peak fraction in [0, 1]".into());
            }
            ScheduleKind::ConstantCooldown { cooldown, total } if cooldown > total || total == 0 => {
                return bad(format!("cooldown {cooldown} longer than horizon {total}"));
            }
            _ => {}
        }
        Ok(ScheduleSpec { kind, max_lr })
    }

    pub fn horizon(&self) -> Option<u64> {
        match self.kind {
            ScheduleKind::WarmupStableDecay { total, .. }
            | ScheduleKind::LinearDecay { total }
            | ScheduleKind::Cosine { total, .. }
            | ScheduleKind::OneCycle { total, .. }
            | ScheduleKind::ConstantCooldown { total, .. } => Some(total),
            _ => None,
        }
    }
}

/// Learning rate at step `t`. Warmup ramps as `η t / T_w` from `t = 0`.
pub fn lr_at(spec: &ScheduleSpec, t: u64) -> Result<f64> {
    if let Some(horizon) = spec.horizon() {
        if t > horizon {
            return Err(Error::ScheduleExhausted { t, horizon });
        }
    }
    let peak = spec.max_lr;
    let tf = t as f64;
    Ok(match spec.kind {
        ScheduleKind::Constant => peak,
        ScheduleKind::WarmupStableDecay {
            warmup,
            stable_end,
            total,
            shape,
        } => {
            if t < warmup {
                peak * tf / warmup as f64
            } else if t <= stable_end {
                peak
            } else {
                let x = (t - stable_end) as f64 / (total - stable_end) as f64;
                peak * shape.factor(x)
            }
        }
        ScheduleKind::LinearDecay { total } => peak * (1.0 - tf / total as f64),
        ScheduleKind::Cosine { total, min_lr } => {
            min_lr + 0.5 * (peak - min_lr) * (1.0 + (PI * tf / total as f64).cos())
        }
        ScheduleKind::Step { period, factor } => peak * factor.powi((t / period) as i32),
        ScheduleKind::Exponential { rate } => peak * rate.powf(tf),
        ScheduleKind::OneCycle { total, peak_fraction } => {
            let peak_step = peak_fraction * total as f64;
            if tf <= peak_step && peak_step > 0.0 {
                peak * tf / peak_step
            } else {
                let x = (tf - peak_step) / (total as f64 - peak_step);
                peak * CooldownShape::Cosine.factor(x)
            }
        }
        ScheduleKind::ConstantCooldown { cooldown, total } => {
            let start = total - cooldown;
            if t <= start {
                peak
            } else {
                peak * (1.0 - (t - start) as f64 / cooldown as f64)
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightDecaySpec {
    pub base: f64,
    pub scheduled: bool,
}

/// `λ_base η_t / η_0` when scheduled, `λ_base` otherwise.
pub fn wd_at(spec: &WeightDecaySpec, lr: f64, lr0: f64) -> f64 {
    if spec.scheduled {
        assert!(lr0 > 0.0, "reference learning rate must be positive");
        spec.base * (lr / lr0)
    } else {
        spec.base
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeSpec {
    pub period: u64,
    pub factor: f64,
    pub duration: u64,
}

impl SpikeSpec {
    pub fn new(period: u64, factor: f64, duration: u64) -> Result<Self> {
        if period == 0 || duration >= period || !(factor >= 1.0) {
            return Err(Error::Config(format!(
                "spike needs duration < period and factor >= 1 (got period {period}, duration {duration}, factor {factor})"
            )));
        }
        Ok(SpikeSpec { period, factor, duration })
    }

    /// Windows start at each positive multiple of the period.
    pub fn active(&self, t: u64) -> bool {
        t >= self.period && t % self.period < self.duration
    }
}

pub fn spike_lr(lr: f64, spike: &SpikeSpec, t: u64) -> f64 {
    if spike.active(t) {
        lr * spike.factor
    } else {
        lr
    }
}

/// `μ <- β μ + (1 - β) w`; returns `μ / (1 - βᵗ)` when `bias_correct`.
pub fn ema_update(mu: &mut Matrix, w: &Matrix, beta: f64, t: u64, bias_correct: bool) -> Matrix {
    assert!((0.0..1.0).contains(&beta) && t >= 1);
    mu.zip_apply(w, |m, w| *m = beta * *m + (1.0 - beta) * w);
    if bias_correct {
        &*mu / (1.0 - beta.powi(t.min(i32::MAX as u64) as i32))
    } else {
        mu.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BemaConfig {
    pub bias_power: f64,
    pub ema_power: f64,
    pub lag: f64,
    pub multiplier: f64,
    pub burn_in: u64,
    pub frequency: u64,
}

impl Default for BemaConfig {
    fn default() -> Self {
        BemaConfig {
            bias_power: 0.2,
            ema_power: 0.5,
            lag: 10.0,
            multiplier: 1.0,
            burn_in: 0,
            frequency: 1,
        }
    }
}

impl BemaConfig {
    pub fn alpha(&self, t: u64) -> f64 {
        (self.lag + self.multiplier * t as f64).powf(-self.bias_power)
    }

    pub fn beta(&self, t: u64) -> f64 {
        (self.lag + self.multiplier * t as f64).powf(-self.ema_power)
    }

    pub fn is_update_step(&self, t: u64) -> bool {
        t >= self.burn_in && (t - self.burn_in) % self.frequency.max(1) == 0
    }
}

#[derive(Debug, Clone)]
pub struct BemaState {
    pub config: BemaConfig,
    pub average: Option<Matrix>,
    pub snapshot: Option<Matrix>,
}

impl BemaState {
    pub fn new(config: BemaConfig) -> Self {
        BemaState {
            config,
            average: None,
            snapshot: None,
        }
    }
}

/// Averaged weights `α_t (w_t - w_τ) + μ̃` with `μ̃ <- (1 - β_t) μ̃ + β_t w_t`.
/// The first call snapshots `w_τ` and seeds `μ̃` with it.
pub fn bema_update(state: &mut BemaState, w: &Matrix, t: u64) -> Result<Matrix> {
    let cfg = state.config;
    if t < cfg.burn_in {
        return Err(Error::Sequencing(format!("BEMA update at step {t} precedes burn-in {}", cfg.burn_in)));
    }
    let snapshot = state.snapshot.get_or_insert_with(|| w.clone());
    let average = state.average.get_or_insert_with(|| snapshot.clone());
    let (alpha, beta) = (cfg.alpha(t), cfg.beta(t));
    average.zip_apply(w, |m, w| *m = (1.0 - beta) * *m + beta * w);
    Ok((w - &*snapshot) * alpha + &*average)
}
