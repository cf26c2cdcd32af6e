//! Order-preserving parallel map over a shared work queue.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// `f` applied to every item on up to `jobs` threads; results come back in
/// item order whatever the scheduling.
pub(crate) fn parallel_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(i, item);
                results.lock().expect("no poisoned results")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned results")
        .into_iter()
        .map(|r| r.expect("every item visited"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_job_count() {
        let items: Vec<u64> = (0..57).collect();
        let serial = parallel_map(1, &items, |i, v| v * v + i as u64);
        for jobs in [2, 3, 8, 100] {
            assert_eq!(parallel_map(jobs, &items, |i, v| v * v + i as u64), serial);
        }
        assert!(parallel_map(4, &Vec::<u8>::new(), |_, v| *v).is_empty());
    }
}
