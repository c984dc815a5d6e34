//! Synthetic grid-flow generator with planted spatial regimes and a daily
//! temporal profile.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, FlowDataset};
use crate::autodiff::Tensor;

/// Generator parameters. Defaults give the desk-scale reference dataset.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub num_steps: usize,
    pub interval_minutes: usize,
    /// Number of contiguous region regimes (≥ 2).
    pub regimes: usize,
    /// Scale of the flow noise; 0 gives the pure daily profile.
    pub noise_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            rows: 8,
            cols: 8,
            num_steps: 2000,
            interval_minutes: 60,
            regimes: 2,
            noise_level: 0.6,
        }
    }
}

/// Step-noise persistence. Successive noise values are correlated so the
/// recent window carries information a per-slot climatology cannot use.
const NOISE_PERSISTENCE: f64 = 0.85;

/// Persistence of the day-level noise offset across consecutive days.
const DAY_PERSISTENCE: f64 = 0.5;

/// Generate a dataset plus the planted per-region regime labels.
///
/// Regions are partitioned into contiguous regimes in row-major order. A
/// regime's profile is `base + amp · max(0, sin(2π·(t mod spd)/spd + φ))`
/// with φ spaced evenly over the circle, plus mean-zero noise whose standard
/// deviation scales like `sqrt(profile + 1)`. The noise has two parts: a
/// step-level component that persists across steps and a day-level offset
/// that shifts a whole day's flows and persists across days (busy and quiet
/// days, as real traffic has). Output values are quantized through f32 so a
/// save/load cycle is lossless.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<(FlowDataset, Vec<usize>), DataError> {
    let n = spec.rows * spec.cols;
    if spec.regimes < 2 || spec.regimes > n {
        return Err(DataError::RegimeCount {
            regimes: spec.regimes,
            regions: n,
        });
    }
    let spd = (24 * 60) / spec.interval_minutes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per-regime, per-channel profile parameters.
    let mut base = vec![[0.0; 2]; spec.regimes];
    let mut amp = vec![[0.0; 2]; spec.regimes];
    let mut phase = vec![0.0; spec.regimes];
    for c in 0..spec.regimes {
        phase[c] = std::f64::consts::TAU * c as f64 / spec.regimes as f64;
        for ch in 0..2 {
            base[c][ch] = rng.gen_range(2.0..6.0);
            amp[c][ch] = rng.gen_range(6.0..14.0);
        }
    }

    // Contiguous label blocks over row-major region order.
    let labels: Vec<usize> = (0..n).map(|r| (r * spec.regimes) / n).collect();

    // daily mean of max(0, sin) is 1/π; sets the day-offset noise scale
    let day_noise_scale = |regime: usize, ch: usize| {
        let mean_profile = base[regime][ch] + amp[regime][ch] / std::f64::consts::PI;
        spec.noise_level * (mean_profile + 1.0).sqrt()
    };

    let mut data = vec![0.0f64; spec.num_steps * n * 2];
    let mut step_noise = vec![[0.0f64; 2]; n];
    let mut day_noise = vec![[0.0f64; 2]; n];
    let mut gauss = |rng: &mut ChaCha8Rng| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    for t in 0..spec.num_steps {
        if t % spd == 0 {
            for r in 0..n {
                for ch in 0..2 {
                    let e = &mut day_noise[r][ch];
                    *e = DAY_PERSISTENCE * *e + day_noise_scale(labels[r], ch) * gauss(&mut rng);
                }
            }
        }
        let day_pos = std::f64::consts::TAU * (t % spd) as f64 / spd as f64;
        for r in 0..n {
            let regime = labels[r];
            for ch in 0..2 {
                let profile =
                    base[regime][ch] + amp[regime][ch] * (day_pos + phase[regime]).sin().max(0.0);
                let e = &mut step_noise[r][ch];
                *e = NOISE_PERSISTENCE * *e
                    + spec.noise_level * (profile + 1.0).sqrt() * gauss(&mut rng);
                let v = (profile + day_noise[r][ch] + *e).max(0.0);
                data[(t * n + r) * 2 + ch] = (v as f32) as f64;
            }
        }
    }
    let ds = FlowDataset::new(
        spec.rows,
        spec.cols,
        spec.interval_minutes,
        Tensor::new(vec![spec.num_steps, n, 2], data),
    );
    Ok((ds, labels))
}
