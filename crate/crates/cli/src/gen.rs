//! Synthetic dataset generators for quick runs and the crash-resilience
//! experiments: low-dimensional class blobs, and image-shaped "spot
//! pattern" classes that a small convolutional net separates quickly.

use pmtrain_core::SplitMix64;
use std::fmt::Write;

/// CSV rows `label,v0..`, `classes` point clouds on the unit circle.
pub fn blobs_csv(rows: usize, cols: usize, classes: usize, spread: f64, seed: u64) -> String {
    assert!(cols >= 2 && classes >= 2);
    let mut rng = SplitMix64::new(seed);
    let mut out = String::new();
    for _ in 0..rows {
        let class = rng.index(classes);
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        let (cy, cx) = (0.5 + 0.4 * angle.sin(), 0.5 + 0.4 * angle.cos());
        write!(out, "{class}").unwrap();
        for c in 0..cols {
            let center = match c {
                0 => cx,
                1 => cy,
                _ => 0.5,
            };
            let v = (center + rng.range_f64(-spread, spread)).clamp(0.0, 1.0);
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// CSV rows of side×side images: class k is a bright gaussian spot at a
/// class-specific position plus pixel noise.
pub fn patterns_csv(rows: usize, side: usize, classes: usize, noise: f64, seed: u64) -> String {
    assert!(side >= 8 && classes >= 2);
    let mut rng = SplitMix64::new(seed);
    let mut out = String::new();
    let sigma = side as f64 / 6.0;
    for _ in 0..rows {
        let class = rng.index(classes);
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        let cy = side as f64 * (0.5 + 0.28 * angle.sin());
        let cx = side as f64 * (0.5 + 0.28 * angle.cos());
        write!(out, "{class}").unwrap();
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = ((-d2 / (2.0 * sigma * sigma)).exp() + rng.range_f64(0.0, noise))
                    .clamp(0.0, 1.0);
                write!(out, ",{v:.4}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}
