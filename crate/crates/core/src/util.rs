use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Maps `f` over `0..n` on up to `parallelism` scoped threads. Results come
/// back in index order whatever order the work finishes in.
pub(crate) fn par_map<T, F>(n: usize, parallelism: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = parallelism.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|slot| slot.expect("every index is processed exactly once"))
        .collect()
}

/// Renders a value with at least ten significant digits.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.000000000".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (9 - magnitude).max(1) as usize;
    format!("{x:.decimals$}")
}
