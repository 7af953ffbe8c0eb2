//! Stochastic batch scheduler.
//!
//! A seeded Bernoulli process emitting lambda(t) in {0,1} with
//! P(1) = cos(omega), omega in [0, pi/2]. omega = 0 augments every iteration,
//! omega = pi/2 never augments, and omega = pi/3 gives the fair 50/50
//! schedule. Draws consume a dedicated stream, so scheduler activity never
//! perturbs any other randomness in a run — including on iterations where
//! lambda comes up 0.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};

/// Augmentation probability as a function of the iteration index.
///
/// Extension point for time-varying schedules; only the fixed
/// cos(omega) schedule ships.
pub trait Schedule {
    fn probability(&self, t: u64) -> f64;
}

/// The constant schedule `p = cos(omega)`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSchedule {
    p: f64,
}

impl Schedule for ConstantSchedule {
    fn probability(&self, _t: u64) -> f64 {
        self.p
    }
}

/// Seeded Bernoulli stream with draw accounting.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    omega: f64,
    schedule: ConstantSchedule,
    rng: ChaCha8Rng,
    draw_count: u64,
    one_count: u64,
}

/// `cos(omega)` with the endpoint snapped: the f64 nearest pi/2 has a cosine
/// of ~6.1e-17, but the schedule contract at omega = pi/2 is exactly "never
/// augment".
pub fn augment_probability(omega: f64) -> f64 {
    if omega == FRAC_PI_2 {
        0.0
    } else {
        omega.cos()
    }
}

/// Scheduler with `P(lambda = 1) = cos(omega)`.
pub fn new_scheduler(omega: f64, seed: u64) -> Result<SchedulerState> {
    if !(0.0..=FRAC_PI_2).contains(&omega) {
        return Err(Error::Config(format!(
            "omega must lie in [0, pi/2], got {omega}"
        )));
    }
    Ok(SchedulerState {
        omega,
        schedule: ConstantSchedule {
            p: augment_probability(omega),
        },
        rng: stream(seed, StreamTag::Scheduler),
        draw_count: 0,
        one_count: 0,
    })
}

impl SchedulerState {
    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// The configured augmentation probability, `cos(omega)`.
    pub fn probability(&self) -> f64 {
        self.schedule.probability(self.draw_count)
    }

    /// Draws lambda(t) for the next iteration: 1 with probability p.
    ///
    /// `p = 1` always yields 1 and `p = 0` always yields 0 because the
    /// underlying uniform lies in `[0, 1)`.
    pub fn sample(&mut self) -> u8 {
        let p = self.schedule.probability(self.draw_count);
        let u: f64 = self.rng.random();
        self.draw_count += 1;
        if u < p {
            self.one_count += 1;
            1
        } else {
            0
        }
    }

    pub fn draw_count(&self) -> u64 {
        self.draw_count
    }

    pub fn one_count(&self) -> u64 {
        self.one_count
    }

    /// Observed fraction of lambda = 1 draws.
    pub fn empirical_rate(&self) -> Result<f64> {
        if self.draw_count == 0 {
            return Err(Error::Contract {
                op: "empirical_rate",
                message: "no draws yet".to_string(),
            });
        }
        Ok(self.one_count as f64 / self.draw_count as f64)
    }
}
