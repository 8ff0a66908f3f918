use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

/// Counts in-flight units of work (queued deliveries, running processors,
/// executing plans) so drivers can wait for the kernel to go quiet.
#[derive(Clone, Default)]
pub struct Activity {
    inner: Arc<(Mutex<usize>, Condvar)>,
}

impl Activity {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enter(&self) -> ActivityGuard {
        *self.inner.0.lock() += 1;
        ActivityGuard { activity: self.clone() }
    }

    pub fn in_flight(&self) -> usize {
        *self.inner.0.lock()
    }

    /// Blocks until nothing is in flight. Returns false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let (lock, cvar) = &*self.inner;
        let mut count = lock.lock();
        while *count > 0 {
            if cvar.wait_until(&mut count, deadline).timed_out() {
                return *count == 0;
            }
        }
        true
    }
}

pub struct ActivityGuard {
    activity: Activity,
}

impl ActivityGuard {
    pub fn activity(&self) -> &Activity {
        &self.activity
    }
}

impl Drop for ActivityGuard {
    fn drop(&mut self) {
        let (lock, cvar) = &*self.activity.inner;
        let mut count = lock.lock();
        *count -= 1;
        if *count == 0 {
            cvar.notify_all();
        }
    }
}

impl std::fmt::Debug for ActivityGuard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ActivityGuard")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_after_guards_drop() {
        let a = Activity::new();
        let g = a.enter();
        assert!(!a.wait_idle(Duration::from_millis(10)));
        let a2 = a.clone();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            drop(g);
            a2.in_flight()
        });
        assert!(a.wait_idle(Duration::from_secs(2)));
        assert_eq!(h.join().unwrap(), 0);
    }
}
