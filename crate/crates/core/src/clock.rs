//! Simulated time on top of the tokio clock.
//!
//! Under a paused tokio runtime the clock auto-advances to the next timer,
//! which turns every sleep into a virtual-time jump. With a running runtime
//! the same code paces against wall time, optionally accelerated.

use std::time::{Duration, SystemTime, UNIX_EPOCH};

use tokio::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct SimClock {
    origin: Instant,
    origin_s: f64,
    acceleration: f64,
}

impl SimClock {
    /// Zero at construction, one simulated second per tokio second.
    pub fn virtual_clock() -> Self {
        Self {
            origin: Instant::now(),
            origin_s: 0.0,
            acceleration: 1.0,
        }
    }

    /// Unix time scaled by `acceleration`. Processes on one host built with
    /// the same factor agree on the current simulated time.
    pub fn wall(acceleration: f64) -> Self {
        let unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_secs_f64();
        Self {
            origin: Instant::now(),
            origin_s: unix * acceleration,
            acceleration,
        }
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    pub fn now_s(&self) -> f64 {
        self.origin_s + self.origin.elapsed().as_secs_f64() * self.acceleration
    }

    /// The tokio instant at which simulated time reaches `sim_s`.
    pub fn instant_at(&self, sim_s: f64) -> Instant {
        let wall = ((sim_s - self.origin_s) / self.acceleration).max(0.0);
        self.origin + Duration::from_secs_f64(wall)
    }

    /// Tokio duration covering `sim_s` simulated seconds.
    pub fn wall_duration(&self, sim_s: f64) -> Duration {
        Duration::from_secs_f64((sim_s / self.acceleration).max(0.0))
    }

    pub async fn sleep_until(&self, sim_s: f64) {
        tokio::time::sleep_until(self.instant_at(sim_s)).await
    }
}
