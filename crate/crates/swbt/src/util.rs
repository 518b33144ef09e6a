//! Small shared helpers: seed derivation, hashing, float formatting.

use sha2::{Digest, Sha256};

/// Derives an independent stream seed from a base seed, a purpose label and a
/// counter. Every random decision in the pipeline draws from its own derived
/// stream so that disabling one consumer (a loss branch, an eval pass) cannot
/// shift the draws of another.
pub fn derive_seed(base: u64, label: &str, k: u64) -> u64 {
    let mut h = fnv1a(label);
    h ^= base.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h = h.wrapping_add(k.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    splitmix64(h)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

pub fn sha256_raw(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Canonical float formatting for CSV artifacts. Uses enough digits to
/// round-trip f64 exactly so reruns produce byte-identical files.
pub fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        let mut s = format!("{v}");
        if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
            s.push_str(".0");
        }
        s
    }
}

/// Process CPU time (user + system) in seconds. Used by the long-running
/// acceptance checks to enforce their budgets.
pub fn cpu_time_secs() -> f64 {
    if let Ok(stat) = std::fs::read_to_string("/proc/self/stat") {
        // Fields 14 and 15 (1-based, after the parenthesised comm field) are
        // utime and stime in clock ticks.
        if let Some(close) = stat.rfind(')') {
            let rest: Vec<&str> = stat[close + 1..].split_whitespace().collect();
            if rest.len() > 13 {
                let utime: f64 = rest[11].parse().unwrap_or(0.0);
                let stime: f64 = rest[12].parse().unwrap_or(0.0);
                let ticks = 100.0; // Linux exposes CLK_TCK=100 on all common configs
                return (utime + stime) / ticks;
            }
        }
    }
    // Fallback: wall clock from an arbitrary epoch.
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
