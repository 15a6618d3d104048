//! CPU and resident memory of this process, polled on a background thread.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use sysinfo::{Pid, System};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub elapsed: Duration,
    /// Percent of one core since the previous sample.
    pub cpu_pct: f64,
    pub mem_mb: f64,
}

pub struct ResourceSampler {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Vec<Sample>>,
}

/// Granularity at which the polling thread notices a stop request.
const TICK: Duration = Duration::from_millis(10);

impl ResourceSampler {
    /// Polls every `interval` until stopped; a final sample covers the tail.
    pub fn start(interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::Builder::new()
            .name("latteo-sampler".into())
            .spawn(move || poll(interval, &flag))
            .expect("spawn sampler thread");
        ResourceSampler { stop, handle }
    }

    pub fn stop(self) -> Vec<Sample> {
        self.stop.store(true, Ordering::SeqCst);
        self.handle.join().unwrap_or_default()
    }
}

fn poll(interval: Duration, stop: &AtomicBool) -> Vec<Sample> {
    let Ok(pid) = sysinfo::get_current_pid() else { return Vec::new() };
    let mut sys = System::new();
    // CPU usage is a difference between refreshes; this one sets the baseline.
    sys.refresh_process(pid);
    let t0 = Instant::now();
    let mut last = t0;
    let mut samples = Vec::new();
    let mut next = t0 + interval;
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= next {
            samples.extend(take(&mut sys, pid, t0));
            last = now;
            next += interval;
            continue;
        }
        thread::sleep(TICK.min(next - now));
    }
    if samples.is_empty() || last.elapsed() >= TICK {
        samples.extend(take(&mut sys, pid, t0));
    }
    samples
}

fn take(sys: &mut System, pid: Pid, t0: Instant) -> Option<Sample> {
    sys.refresh_process(pid);
    let p = sys.process(pid)?;
    Some(Sample {
        elapsed: t0.elapsed(),
        cpu_pct: p.cpu_usage() as f64,
        mem_mb: p.memory() as f64 / (1024.0 * 1024.0),
    })
}

/// Mean CPU and peak memory; zeros for an empty series.
pub fn summarize(samples: &[Sample]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let cpu = samples.iter().map(|s| s.cpu_pct).sum::<f64>() / samples.len() as f64;
    let mem = samples.iter().map(|s| s.mem_mb).fold(0.0, f64::max);
    (cpu, mem)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_least_one_sample_per_second_of_run() {
        let s = ResourceSampler::start(Duration::from_millis(1000));
        thread::sleep(Duration::from_millis(2200));
        let samples = s.stop();
        assert!(samples.len() >= 2, "{samples:?}");
        assert!(samples.windows(2).all(|w| w[0].elapsed < w[1].elapsed));
        assert!(samples.iter().all(|s| s.mem_mb > 0.0));
    }

    #[test]
    fn busy_thread_shows_up_as_cpu() {
        let s = ResourceSampler::start(Duration::from_millis(200));
        let end = Instant::now() + Duration::from_millis(700);
        let mut x = 0u64;
        while Instant::now() < end {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
        }
        std::hint::black_box(x);
        let (cpu, _) = summarize(&s.stop());
        assert!(cpu > 30.0, "cpu {cpu}");
    }

    #[test]
    fn short_runs_still_report() {
        let samples = ResourceSampler::start(Duration::from_secs(1)).stop();
        assert_eq!(samples.len(), 1);
        assert_eq!(summarize(&[]), (0.0, 0.0));
    }
}
