//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

/// Kaiser shape parameter (about 100 dB stopband attenuation).
const KAISER_BETA: f64 = 10.0;
/// Kernel half-width in samples of the lower of the two rates.
const HALF_WIDTH: usize = 128;
/// Cutoff as a fraction of the lower Nyquist frequency.
const CUTOFF: f64 = 0.95;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Resamples `x` from `from` Hz to `to` Hz. The output has
/// `ceil(len * to / from)` samples and zero group delay.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let up = (to as u64 / g) as usize;
    let down = (from as u64 / g) as usize;

    // Work in input-sample units: cutoff relative to the input rate.
    let ratio = (to as f64 / from as f64).min(1.0);
    let fc = CUTOFF * ratio;
    let half = (HALF_WIDTH as f64 / ratio).ceil() as isize;
    let i0_beta = bessel_i0(KAISER_BETA);
    let kernel = |t: f64| -> f64 {
        let r = t / half as f64;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        fc * sinc(fc * t) * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta
    };

    // One tap set per output phase.
    let taps: Vec<Vec<f64>> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            (-half + 1..=half).map(|k| kernel(frac - k as f64)).collect()
        })
        .collect();

    let out_len = (x.len() * up).div_ceil(down);
    (0..out_len)
        .map(|n| {
            let pos = n * down;
            let (base, phase) = ((pos / up) as isize, pos % up);
            taps[phase]
                .iter()
                .enumerate()
                .map(|(j, h)| {
                    let k = base - half + 1 + j as isize;
                    if k >= 0 && (k as usize) < x.len() {
                        h * x[k as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, fs: f64, len: usize) -> Vec<f64> {
        (0..len).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn passband_gain_within_a_hundredth_of_a_db() {
        for f in [150.0, 1000.0, 3000.0, 4300.0] {
            let x = tone(f, 16_000.0, 32_000);
            let y = resample(&x, 16_000, 10_000);
            assert_eq!(y.len(), 20_000);
            let expected = tone(f, 10_000.0, 20_000);
            let (a, b) = (rms(&y[2000..18_000]), rms(&expected[2000..18_000]));
            let db = 20.0 * (a / b).log10();
            assert!(db.abs() < 0.01, "{f} Hz: {db} dB");
            let err = y[2000..18_000]
                .iter()
                .zip(&expected[2000..18_000])
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(err < 2e-3, "{f} Hz: max error {err}");
        }
    }

    #[test]
    fn stopband_is_attenuated() {
        let x = tone(6500.0, 16_000.0, 32_000);
        let y = resample(&x, 16_000, 10_000);
        assert!(rms(&y[2000..18_000]) < 1e-4);
    }

    #[test]
    fn identity_when_rates_match() {
        let x = vec![0.1, 0.2, 0.3];
        assert_eq!(resample(&x, 8000, 8000), x);
    }

    #[test]
    fn upsampling_preserves_tone() {
        let x = tone(1000.0, 10_000.0, 10_000);
        let y = resample(&x, 10_000, 16_000);
        assert_eq!(y.len(), 16_000);
        let expected = tone(1000.0, 16_000.0, 16_000);
        let err = y[2000..14_000]
            .iter()
            .zip(&expected[2000..14_000])
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(err < 2e-3, "{err}");
    }
}
