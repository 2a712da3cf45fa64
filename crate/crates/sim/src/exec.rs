//! Worker pool for independent grid points.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use diffcontact_core::optimize::Executor;

/// Runs jobs on `jobs` scoped threads; results keep index order.
#[derive(Clone, Copy, Debug)]
pub struct Pool {
    pub jobs: usize,
}

impl Pool {
    pub fn new(jobs: usize) -> Self {
        Pool { jobs: jobs.max(1) }
    }
}

impl Executor for Pool {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        if self.jobs == 1 || n <= 1 {
            return (0..n).map(f).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.jobs.min(n) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let r = f(i);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap().expect("every index ran")).collect()
    }
}
