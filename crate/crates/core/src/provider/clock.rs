use std::sync::Mutex;
use std::time::Instant;

/// Seconds since an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;

    /// Whether time advances on its own. Manual clocks are driven by tests.
    fn is_real(&self) -> bool {
        true
    }
}

#[derive(Debug)]
pub struct RealClock {
    origin: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Default)]
pub struct ManualClock {
    now: Mutex<f64>,
}

impl ManualClock {
    pub fn new(start: f64) -> Self {
        Self { now: Mutex::new(start) }
    }

    pub fn set(&self, t: f64) {
        let mut now = self.now.lock().unwrap();
        assert!(t >= *now, "clock cannot go backwards");
        *now = t;
    }

    pub fn advance(&self, dt: f64) {
        *self.now.lock().unwrap() += dt;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.now.lock().unwrap()
    }

    fn is_real(&self) -> bool {
        false
    }
}
