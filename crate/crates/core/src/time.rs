//! Time base shared by the controller, workers and clients.
//!
//! Every timestamp is an integer count of nanoseconds. In simulated mode the
//! epoch is zero; in wall-clock mode it is the UNIX epoch, which processes on
//! one host agree on without exchanging anything.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Sub, SubAssign};
use std::sync::atomic::{AtomicI64, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Signed span of time in nanoseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Nanos(pub i64);

/// Instant in nanoseconds since the experiment epoch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimePoint(pub i64);

impl Nanos {
    pub const ZERO: Nanos = Nanos(0);
    pub const MAX: Nanos = Nanos(i64::MAX);

    pub const fn from_micros(us: i64) -> Self {
        Nanos(us * 1_000)
    }

    pub const fn from_millis(ms: i64) -> Self {
        Nanos(ms * 1_000_000)
    }

    pub const fn from_secs(s: i64) -> Self {
        Nanos(s * 1_000_000_000)
    }

    /// Rounds to the nearest nanosecond.
    pub fn from_millis_f64(ms: f64) -> Self {
        Nanos((ms * 1e6).round() as i64)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        Nanos((s * 1e9).round() as i64)
    }

    pub const fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn is_positive(self) -> bool {
        self.0 > 0
    }

    pub fn abs(self) -> Nanos {
        Nanos(self.0.abs())
    }

    /// Converts to a `std` duration, clamping negatives to zero.
    pub fn to_std(self) -> std::time::Duration {
        std::time::Duration::from_nanos(self.0.max(0) as u64)
    }
}

impl TimePoint {
    pub const ZERO: TimePoint = TimePoint(0);
    pub const MAX: TimePoint = TimePoint(i64::MAX);

    pub const fn as_nanos(self) -> i64 {
        self.0
    }

    pub fn saturating_add(self, d: Nanos) -> TimePoint {
        TimePoint(self.0.saturating_add(d.0))
    }

    pub fn since(self, earlier: TimePoint) -> Nanos {
        self - earlier
    }
}

impl Add<Nanos> for TimePoint {
    type Output = TimePoint;
    fn add(self, rhs: Nanos) -> TimePoint {
        TimePoint(self.0 + rhs.0)
    }
}

impl AddAssign<Nanos> for TimePoint {
    fn add_assign(&mut self, rhs: Nanos) {
        self.0 += rhs.0;
    }
}

impl Sub<Nanos> for TimePoint {
    type Output = TimePoint;
    fn sub(self, rhs: Nanos) -> TimePoint {
        TimePoint(self.0 - rhs.0)
    }
}

impl SubAssign<Nanos> for TimePoint {
    fn sub_assign(&mut self, rhs: Nanos) {
        self.0 -= rhs.0;
    }
}

impl Sub for TimePoint {
    type Output = Nanos;
    fn sub(self, rhs: TimePoint) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl Add for Nanos {
    type Output = Nanos;
    fn add(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 + rhs.0)
    }
}

impl AddAssign for Nanos {
    fn add_assign(&mut self, rhs: Nanos) {
        self.0 += rhs.0;
    }
}

impl Sub for Nanos {
    type Output = Nanos;
    fn sub(self, rhs: Nanos) -> Nanos {
        Nanos(self.0 - rhs.0)
    }
}

impl SubAssign for Nanos {
    fn sub_assign(&mut self, rhs: Nanos) {
        self.0 -= rhs.0;
    }
}

impl Mul<i64> for Nanos {
    type Output = Nanos;
    fn mul(self, rhs: i64) -> Nanos {
        Nanos(self.0 * rhs)
    }
}

impl Div<i64> for Nanos {
    type Output = Nanos;
    fn div(self, rhs: i64) -> Nanos {
        Nanos(self.0 / rhs)
    }
}

impl Sum for Nanos {
    fn sum<I: Iterator<Item = Nanos>>(iter: I) -> Nanos {
        Nanos(iter.map(|n| n.0).sum())
    }
}

impl fmt::Display for Nanos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}ms", self.as_millis_f64())
    }
}

impl fmt::Display for TimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={}ns", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[serde(alias = "sim")]
    Simulated,
    #[serde(alias = "wall")]
    WallClock,
}

impl std::str::FromStr for ClockMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" | "simulated" => Ok(ClockMode::Simulated),
            "wall" | "wallclock" => Ok(ClockMode::WallClock),
            other => Err(format!("unknown clock mode `{other}` (expected sim or wall)")),
        }
    }
}

pub trait Clock: Send + Sync {
    fn mode(&self) -> ClockMode;
    fn now(&self) -> TimePoint;
    /// Blocks (wall clock) or jumps (simulated) until `t`. Never moves backwards.
    fn wait_until(&self, t: TimePoint);
}

/// Clock driven by a discrete-event loop. Time only moves via `advance_to`.
#[derive(Debug, Default)]
pub struct SimClock {
    now: AtomicI64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance_to(&self, t: TimePoint) {
        let prev = self.now.fetch_max(t.0, Ordering::Relaxed);
        debug_assert!(prev <= t.0, "simulated time moved backwards: {prev} -> {}", t.0);
    }
}

impl Clock for SimClock {
    fn mode(&self) -> ClockMode {
        ClockMode::Simulated
    }

    fn now(&self) -> TimePoint {
        TimePoint(self.now.load(Ordering::Relaxed))
    }

    fn wait_until(&self, t: TimePoint) {
        self.advance_to(t);
    }
}

/// OS sleep overshoot is absorbed by sleeping until this close to the target
/// and spinning the rest.
pub const SPIN_GUARD: Nanos = Nanos::from_micros(100);

/// Monotonic clock anchored to the UNIX epoch.
#[derive(Debug, Clone)]
pub struct WallClock {
    origin_unix_ns: i64,
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        let unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system clock before 1970");
        WallClock {
            origin_unix_ns: unix.as_nanos() as i64,
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn mode(&self) -> ClockMode {
        ClockMode::WallClock
    }

    fn now(&self) -> TimePoint {
        TimePoint(self.origin_unix_ns + self.origin.elapsed().as_nanos() as i64)
    }

    fn wait_until(&self, t: TimePoint) {
        let remaining = t - self.now();
        if remaining > SPIN_GUARD {
            std::thread::sleep((remaining - SPIN_GUARD).to_std());
        }
        while self.now() < t {
            std::hint::spin_loop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let t = TimePoint(10) + Nanos::from_millis(2);
        assert_eq!(t, TimePoint(2_000_010));
        assert_eq!(t - TimePoint(10), Nanos(2_000_000));
        assert_eq!(Nanos::from_millis_f64(2.61), Nanos(2_610_000));
        assert_eq!(Nanos::from_micros(3) * 4, Nanos(12_000));
    }

    #[test]
    fn sim_clock_jumps() {
        let c = SimClock::new();
        c.wait_until(TimePoint(500));
        assert_eq!(c.now(), TimePoint(500));
    }

    #[test]
    fn wall_clock_waits() {
        let c = WallClock::new();
        let target = c.now() + Nanos::from_micros(300);
        c.wait_until(target);
        assert!(c.now() >= target);
    }
}
