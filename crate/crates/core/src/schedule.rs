//! Round-indexed amplification factor for pseudo-OOD samples.
//!
//! Every family starts at `0` at the growth-start round `t0`, reaches `2a` at
//! the halt round `T` and stays there. Between the two the round index is
//! rescaled onto `[t0, T]`, so a late start compresses the same curve into a
//! shorter window rather than truncating it.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScheduleFamily {
    Cosine,
    Linear,
    Quadratic,
    /// Saturating exponential with rate `k` per round.
    Exponential {
        k: f64,
    },
    /// Normalised logistic sigmoid with slope `alpha` per round.
    Logistic {
        slope: f64,
    },
}

impl ScheduleFamily {
    /// Exponential rate with `exp(-k T) = 1e-3`.
    pub fn default_exponential(halt_round: u32) -> Self {
        ScheduleFamily::Exponential {
            k: 1000f64.ln() / halt_round as f64,
        }
    }

    /// Logistic slope `10 / T`.
    pub fn default_logistic(halt_round: u32) -> Self {
        ScheduleFamily::Logistic {
            slope: 10.0 / halt_round as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub family: ScheduleFamily,
    /// Amplification coefficient `a`; the plateau is `2a`.
    pub amplification: f64,
    /// Round `T` at which growth halts.
    pub halt_round: u32,
    /// Round `t0` at which growth starts.
    pub start_round: u32,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl WeightSchedule {
    pub fn new(
        family: ScheduleFamily,
        amplification: f64,
        halt_round: u32,
        start_round: u32,
    ) -> Result<Self> {
        let schedule = Self {
            family,
            amplification,
            halt_round,
            start_round,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// The default cosine schedule (`a = 200`, `T = 1000`, `t0 = 0`).
    pub fn cosine(amplification: f64, halt_round: u32) -> Result<Self> {
        Self::new(ScheduleFamily::Cosine, amplification, halt_round, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplification > 0.0 && self.amplification.is_finite()) {
            return Err(Error::config(format!(
                "amplification a must be positive, got {}",
                self.amplification
            )));
        }
        if self.halt_round == 0 {
            return Err(Error::config("halt round T must be positive"));
        }
        if self.start_round >= self.halt_round {
            return Err(Error::config(format!(
                "start round t0 = {} must be below halt round T = {}",
                self.start_round, self.halt_round
            )));
        }
        match self.family {
            ScheduleFamily::Exponential { k } if !(k > 0.0 && k.is_finite()) => Err(Error::config(format!(
                "exponential rate k must be positive, got {k}"
            ))),
            ScheduleFamily::Logistic { slope } if !(slope > 0.0 && slope.is_finite()) => Err(Error::config(
                format!("logistic slope must be positive, got {slope}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn plateau(&self) -> f64 {
        2.0 * self.amplification
    }

    /// `lambda^t`.
    pub fn lambda_at(&self, round: u32) -> f64 {
        if round <= self.start_round {
            return 0.0;
        }
        if round >= self.halt_round {
            return self.plateau();
        }
        let a = self.amplification;
        let span = (self.halt_round - self.start_round) as f64;
        let elapsed = (round - self.start_round) as f64;
        let u = elapsed / span;
        match self.family {
            ScheduleFamily::Cosine => a * (1.0 - (PI * u).cos()),
            ScheduleFamily::Linear => 2.0 * a * u,
            ScheduleFamily::Quadratic => 2.0 * a * u * u,
            ScheduleFamily::Exponential { k } => {
                2.0 * a * (-(-k * elapsed).exp_m1()) / (-(-k * span).exp_m1())
            }
            ScheduleFamily::Logistic { slope } => {
                let half = span / 2.0;
                let lo = sigmoid(-slope * half);
                let hi = sigmoid(slope * half);
                2.0 * a * (sigmoid(slope * (elapsed - half)) - lo) / (hi - lo)
            }
        }
    }
}
