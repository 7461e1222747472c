//! Best-effort resource sampling from /proc and statvfs. Anything that
//! cannot be read falls back to the idle sample's value.

use std::ffi::CString;
use std::fs;
use std::path::Path;

use h2o_core::monitor::ResourceSample;
use h2o_core::wire::Address;

#[derive(Debug, Default)]
pub struct OsSampler {
    last_cpu: Option<(u64, u64)>,
}

/// `(idle, total)` jiffies from the aggregate cpu line of /proc/stat.
pub fn parse_proc_stat(text: &str) -> Option<(u64, u64)> {
    let line = text.lines().find(|l| l.starts_with("cpu "))?;
    let fields: Vec<u64> = line.split_whitespace().skip(1).filter_map(|f| f.parse().ok()).collect();
    if fields.len() < 4 {
        return None;
    }
    let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
    Some((idle, fields.iter().sum()))
}

/// `(available, total)` bytes from /proc/meminfo.
pub fn parse_meminfo(text: &str) -> Option<(u64, u64)> {
    let kb = |key: &str| -> Option<u64> {
        let line = text.lines().find(|l| l.starts_with(key))?;
        line.split_whitespace().nth(1)?.parse::<u64>().ok().map(|v| v * 1024)
    };
    let total = kb("MemTotal:")?;
    let avail = kb("MemAvailable:").or_else(|| kb("MemFree:"))?;
    Some((avail.min(total), total))
}

fn disk_space(path: &Path) -> Option<(u64, u64)> {
    let c = CString::new(path.as_os_str().as_encoded_bytes()).ok()?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `st` is writable.
    if unsafe { libc::statvfs(c.as_ptr(), &mut st) } != 0 {
        return None;
    }
    let frsize = st.f_frsize as u64;
    Some((st.f_bavail as u64 * frsize, st.f_blocks as u64 * frsize))
}

impl OsSampler {
    pub fn new() -> Self {
        Self::default()
    }

    /// CPU idleness is measured between consecutive calls; the first call
    /// reports the idle fraction since boot.
    pub fn sample(&mut self, instance: &Address, data_dir: &Path, ts: u64) -> ResourceSample {
        let mut s = ResourceSample::idle(instance.clone(), ts);
        if let Some((idle, total)) = fs::read_to_string("/proc/stat").ok().as_deref().and_then(parse_proc_stat) {
            let (pi, pt) = self.last_cpu.unwrap_or((0, 0));
            let (di, dt) = (idle.saturating_sub(pi), total.saturating_sub(pt));
            if dt > 0 {
                s.cpu_idle = (di as f64 / dt as f64).clamp(0.0, 1.0);
            }
            self.last_cpu = Some((idle, total));
        }
        if let Some((free, total)) = fs::read_to_string("/proc/meminfo").ok().as_deref().and_then(parse_meminfo) {
            if total > 0 {
                s.mem_free_bytes = free;
                s.mem_total_bytes = total;
            }
        }
        if let Some((free, total)) = disk_space(data_dir) {
            if total > 0 {
                s.disk_free_bytes = free.min(total);
                s.disk_total_bytes = total;
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_proc_files() {
        let stat = "cpu  100 0 50 800 50 0 0 0 0 0\ncpu0 1 2 3 4\n";
        assert_eq!(parse_proc_stat(stat), Some((850, 1000)));
        let mem = "MemTotal:       2048 kB\nMemFree:         100 kB\nMemAvailable:    1024 kB\n";
        assert_eq!(parse_meminfo(mem), Some((1024 * 1024, 2048 * 1024)));
        assert_eq!(parse_proc_stat("intr 1 2"), None);
    }

    #[test]
    fn live_sample_is_valid() {
        let mut s = OsSampler::new();
        let dir = std::env::temp_dir();
        let a = s.sample(&Address::new("x"), &dir, 1);
        let b = s.sample(&Address::new("x"), &dir, 2);
        a.validate().unwrap();
        b.validate().unwrap();
    }
}
