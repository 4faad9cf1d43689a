//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon unless the
//! process-wide policy is set to [`Exec::Sequential`]. Without the feature
//! everything runs on the calling thread. Every helper preserves item order,
//! so reductions performed by callers over the returned vectors are
//! independent of scheduling.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

static POLICY: AtomicU8 = AtomicU8::new(1);

/// Sets the process-wide execution policy.
pub fn set_exec(exec: Exec) {
    POLICY.store(exec as u8, Ordering::Relaxed);
}

/// Current effective policy; always `Sequential` when built without `parallel`.
pub fn exec() -> Exec {
    if cfg!(feature = "parallel") && POLICY.load(Ordering::Relaxed) == 1 {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

/// Runs `f` with the policy temporarily set to `exec`.
pub fn with_exec<R>(exec: Exec, f: impl FnOnce() -> R) -> R {
    let prev = POLICY.swap(exec as u8, Ordering::Relaxed);
    let out = f();
    POLICY.store(prev, Ordering::Relaxed);
    out
}

/// Ordered map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec() == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Ordered map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec() == Exec::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Calls `f(index, chunk)` for each `chunk`-sized piece of `out`.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec() == Exec::Parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree() {
        let seq = with_exec(Exec::Sequential, || map_range(100, |i| (i * i) as f64));
        let par = with_exec(Exec::Parallel, || map_range(100, |i| (i * i) as f64));
        assert_eq!(seq, par);

        let mut a = vec![0usize; 40];
        let mut b = vec![0usize; 40];
        with_exec(Exec::Sequential, || {
            for_each_chunk_mut(&mut a, 7, |i, c| c.iter_mut().for_each(|v| *v = i))
        });
        with_exec(Exec::Parallel, || {
            for_each_chunk_mut(&mut b, 7, |i, c| c.iter_mut().for_each(|v| *v = i))
        });
        assert_eq!(a, b);
    }
}
