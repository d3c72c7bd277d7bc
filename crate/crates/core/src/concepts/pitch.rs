//! Fundamental frequency by normalized autocorrelation.
//!
//! The signal is cut into 40 ms frames with 50% overlap. Each frame's
//! normalized autocorrelation is searched over lags covering 50–500 Hz; the
//! first local maximum reaching 90% of the frame's best peak is refined by
//! parabolic interpolation. Frames whose best peak is below the voicing
//! threshold are dropped and the median of the rest is reported.

use crate::error::{Error, Result};

pub const FRAME_SECONDS: f64 = 0.040;
pub const MIN_HZ: f64 = 50.0;
pub const MAX_HZ: f64 = 500.0;
pub const VOICING_THRESHOLD: f64 = 0.3;
const PEAK_FRACTION: f64 = 0.9;

/// Estimated fundamental frequency in Hz.
pub fn estimate_pitch(samples: &[f32], sample_rate_hz: u32) -> Result<f64> {
    if sample_rate_hz < 8000 {
        return Err(Error::Contract(format!(
            "sample rate {sample_rate_hz} Hz is below 8 kHz"
        )));
    }
    let sr = f64::from(sample_rate_hz);
    let frame = (FRAME_SECONDS * sr).round() as usize;
    if samples.len() < frame {
        return Err(Error::Contract(format!(
            "{} samples is shorter than one {:.0} ms frame",
            samples.len(),
            FRAME_SECONDS * 1000.0
        )));
    }
    let hop = frame / 2;
    let lag_min = (sr / MAX_HZ).floor() as usize;
    let lag_max = ((sr / MIN_HZ).ceil() as usize).min(frame - 2);

    let x: Vec<f64> = samples.iter().map(|&s| f64::from(s)).collect();
    let mut estimates = Vec::new();
    let mut start = 0;
    while start + frame <= x.len() {
        if let Some(f0) = frame_pitch(&x[start..start + frame], sr, lag_min, lag_max) {
            estimates.push(f0);
        }
        start += hop;
    }
    if estimates.is_empty() {
        return Err(Error::NoPitch(format!(
            "no frame reached autocorrelation {VOICING_THRESHOLD}"
        )));
    }
    estimates.sort_by(f64::total_cmp);
    let n = estimates.len();
    Ok(if n % 2 == 1 {
        estimates[n / 2]
    } else {
        0.5 * (estimates[n / 2 - 1] + estimates[n / 2])
    })
}

fn normalized_autocorrelation(x: &[f64], lag: usize) -> f64 {
    let (head, tail) = (&x[..x.len() - lag], &x[lag..]);
    let mut cross = 0.0;
    let mut e0 = 0.0;
    let mut e1 = 0.0;
    for (a, b) in head.iter().zip(tail) {
        cross += a * b;
        e0 += a * a;
        e1 += b * b;
    }
    let denom = (e0 * e1).sqrt();
    if denom <= f64::MIN_POSITIVE {
        0.0
    } else {
        cross / denom
    }
}

fn frame_pitch(x: &[f64], sr: f64, lag_min: usize, lag_max: usize) -> Option<f64> {
    // r[i] holds the lag lag_min - 1 + i, so both neighbours of every
    // candidate lag are available.
    let lo = lag_min.saturating_sub(1).max(1);
    let r: Vec<f64> = (lo..=lag_max + 1)
        .map(|lag| normalized_autocorrelation(x, lag))
        .collect();
    let at = |lag: usize| r[lag - lo];
    let best = (lag_min..=lag_max)
        .map(at)
        .fold(f64::NEG_INFINITY, f64::max);
    if best < VOICING_THRESHOLD {
        return None;
    }
    let lag = (lag_min..=lag_max).find(|&l| {
        let v = at(l);
        v >= PEAK_FRACTION * best && v >= at(l - 1) && v >= at(l + 1)
    })?;
    let (a, b, c) = (at(lag - 1), at(lag), at(lag + 1));
    let curvature = a - 2.0 * b + c;
    let shift = if curvature.abs() > 1e-12 {
        (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Some(sr / (lag as f64 + shift))
}

/// Pure tone helper used by fixtures and the synthetic generator.
pub fn tone(freq_hz: f64, amplitude: f64, phase: f64, sample_rate_hz: u32, n: usize) -> Vec<f32> {
    let sr = f64::from(sample_rate_hz);
    (0..n)
        .map(|i| {
            (amplitude * (2.0 * std::f64::consts::PI * freq_hz * i as f64 / sr + phase).sin())
                as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pure_tones_within_two_hz() {
        for &f in &[440.0, 200.0, 250.0, 320.0, 180.0, 95.0, 480.0] {
            let x = tone(f, 0.5, 0.3, 16_000, 1600);
            let est = estimate_pitch(&x, 16_000).unwrap();
            assert!((est - f).abs() < 2.0, "{f} Hz estimated as {est}");
        }
    }

    #[test]
    fn white_noise_has_no_pitch() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..1600).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(
                matches!(estimate_pitch(&x, 16_000), Err(Error::NoPitch(_))),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn silence_has_no_pitch() {
        assert!(matches!(
            estimate_pitch(&[0.0; 1600], 16_000),
            Err(Error::NoPitch(_))
        ));
    }

    #[test]
    fn amplitude_invariant() {
        let x = tone(263.0, 0.4, 1.1, 16_000, 1600);
        let base = estimate_pitch(&x, 16_000).unwrap();
        for &c in &[0.01f32, 0.5, 2.0, 37.0] {
            let y: Vec<f32> = x.iter().map(|v| v * c).collect();
            let est = estimate_pitch(&y, 16_000).unwrap();
            assert!((est - base).abs() < 1e-4, "scale {c}: {est} vs {base}");
        }
    }

    #[test]
    fn preconditions() {
        assert!(matches!(
            estimate_pitch(&[0.1; 100], 16_000),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            estimate_pitch(&[0.1; 1000], 4_000),
            Err(Error::Contract(_))
        ));
    }
}
