//! Failpoints for exercising the registration rollback paths.

use std::collections::HashSet;
use std::sync::Mutex;

/// The steps of consumer registration, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    QueueCreate,
    UserCreate,
    RegistryInsert,
    Response,
}

impl FaultPoint {
    pub const ALL: [FaultPoint; 4] =
        [FaultPoint::QueueCreate, FaultPoint::UserCreate, FaultPoint::RegistryInsert, FaultPoint::Response];
}

#[derive(Debug, Default)]
pub struct FaultInjector {
    armed: Mutex<HashSet<FaultPoint>>,
}

impl FaultInjector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the next pass through `point` fail once.
    pub fn arm(&self, point: FaultPoint) {
        self.armed.lock().unwrap().insert(point);
    }

    pub fn disarm_all(&self) {
        self.armed.lock().unwrap().clear();
    }

    /// Returns true (and disarms) if `point` was armed.
    pub fn trip(&self, point: FaultPoint) -> bool {
        self.armed.lock().unwrap().remove(&point)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trips_once() {
        let f = FaultInjector::new();
        assert!(!f.trip(FaultPoint::UserCreate));
        f.arm(FaultPoint::UserCreate);
        assert!(!f.trip(FaultPoint::QueueCreate));
        assert!(f.trip(FaultPoint::UserCreate));
        assert!(!f.trip(FaultPoint::UserCreate));
    }
}
