use std::sync::{Arc, Condvar, Mutex};

/// Counting semaphore bounding in-flight requests.
#[derive(Debug, Clone)]
pub struct Limiter {
    inner: Arc<(Mutex<usize>, Condvar)>,
    max: usize,
}

pub struct Permit {
    inner: Arc<(Mutex<usize>, Condvar)>,
}

impl Limiter {
    pub fn new(max_in_flight: usize) -> Self {
        Self {
            inner: Arc::new((Mutex::new(0), Condvar::new())),
            max: max_in_flight.max(1),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max
    }

    pub fn acquire(&self) -> Permit {
        let (lock, cv) = &*self.inner;
        let mut n = lock.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit {
            inner: Arc::clone(&self.inner),
        }
    }

    pub fn in_flight(&self) -> usize {
        *self.inner.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for Permit {
    fn drop(&mut self) {
        let (lock, cv) = &*self.inner;
        let mut n = lock.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        cv.notify_one();
    }
}
