//! Short-time Fourier transform magnitude spectrograms.
//!
//! The default framing (255-sample Hann frames, hop 128, zero-padded to a
//! 256-point FFT) turns a one-second 16 kHz clip into a 124 x 129 grid:
//! `floor((16000 - 255) / 128) + 1 = 124` frames of `256 / 2 + 1 = 129` bins.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::wav_io::AudioClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi k / n)`.
    Hann,
    Rectangular,
}

impl Window {
    pub fn tag(self) -> u8 {
        match self {
            Window::Hann => 0,
            Window::Rectangular => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Window::Hann),
            1 => Ok(Window::Rectangular),
            other => Err(Error::Config(format!("unknown window tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hann" | "hanning" => Ok(Window::Hann),
            "rect" | "rectangular" | "boxcar" => Ok(Window::Rectangular),
            other => Err(Error::Config(format!("unknown window '{other}'"))),
        }
    }
}

pub fn window_coefficients(kind: Window, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    Ok(match kind {
        Window::Rectangular => vec![1.0; n],
        Window::Hann => (0..n)
            .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_length: usize,
    pub frame_step: usize,
    pub fft_length: usize,
    pub window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_length: 255,
            frame_step: 128,
            fft_length: 256,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_length.is_power_of_two() {
            return Err(Error::Config(format!(
                "fft_length {} is not a power of two",
                self.fft_length
            )));
        }
        if self.frame_length == 0 || self.frame_length > self.fft_length {
            return Err(Error::Config(format!(
                "frame_length {} must be in 1..={}",
                self.frame_length, self.fft_length
            )));
        }
        if self.frame_step == 0 || self.frame_step > self.frame_length {
            return Err(Error::Config(format!(
                "frame_step {} must be in 1..={}",
                self.frame_step, self.frame_length
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    /// Frame count for `n` input samples, `None` when the input is shorter than one frame.
    pub fn num_frames(&self, n: usize) -> Option<usize> {
        (n >= self.frame_length).then(|| (n - self.frame_length) / self.frame_step + 1)
    }
}

/// Precomputed bit-reversal permutation and twiddles for one FFT size.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    bitrev: Vec<usize>,
    twiddles: Vec<Complex64>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Size(n));
        }
        let bits = n.trailing_zeros();
        let bitrev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        // direct evaluation per twiddle, no recurrence drift
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Self {
            n,
            bitrev,
            twiddles,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform, `X[m] = sum_n x[n] e^{-j 2 pi m n / L}`.
    pub fn process(&self, buf: &mut [Complex64]) -> Result<()> {
        if buf.len() != self.n {
            return Err(Error::Shape(format!(
                "FFT plan is for {} points, buffer has {}",
                self.n,
                buf.len()
            )));
        }
        for i in 0..self.n {
            let j = self.bitrev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut half = 1;
        while half < self.n {
            let stride = self.n / (2 * half);
            for start in (0..self.n).step_by(2 * half) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            half *= 2;
        }
        Ok(())
    }
}

/// Radix-2 forward FFT of a power-of-two-length sequence.
pub fn fft(input: &[Complex64]) -> Result<Vec<Complex64>> {
    let plan = FftPlan::new(input.len())?;
    let mut buf = input.to_vec();
    plan.process(&mut buf)?;
    Ok(buf)
}

/// Magnitude grid, `num_frames` rows (time) by `num_bins` columns (frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T = f32> {
    values: Vec<T>,
    num_frames: usize,
    num_bins: usize,
}

impl<T: Real> Spectrogram<T> {
    pub fn from_values(num_frames: usize, num_bins: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != num_frames * num_bins {
            return Err(Error::Shape(format!(
                "{num_frames} x {num_bins} spectrogram needs {} values, got {}",
                num_frames * num_bins,
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::Config("spectrogram magnitudes must be non-negative".into()));
        }
        Ok(Self {
            values,
            num_frames,
            num_bins,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_frames, self.num_bins)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, frame: usize, bin: usize) -> T {
        self.values[frame * self.num_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[T] {
        &self.values[frame * self.num_bins..(frame + 1) * self.num_bins]
    }
}

/// Reusable STFT state: window and FFT plan for one configuration.
#[derive(Debug, Clone)]
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    plan: FftPlan,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            window: window_coefficients(cfg.window, cfg.frame_length)?,
            plan: FftPlan::new(cfg.fft_length)?,
            cfg,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// Magnitudes of each windowed, zero-padded frame (non-centered framing).
    pub fn magnitudes<T: Real>(&self, samples: &[f64]) -> Result<Spectrogram<T>> {
        let cfg = &self.cfg;
        let num_frames = cfg.num_frames(samples.len()).ok_or(Error::TooShort {
            len: samples.len(),
            needed: cfg.frame_length,
        })?;
        let num_bins = cfg.num_bins();
        let mut values = Vec::with_capacity(num_frames * num_bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_length];
        for f in 0..num_frames {
            let frame = &samples[f * cfg.frame_step..f * cfg.frame_step + cfg.frame_length];
            for (slot, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex64::new(x * w, 0.0);
            }
            for slot in &mut buf[cfg.frame_length..] {
                *slot = Complex64::new(0.0, 0.0);
            }
            self.plan.process(&mut buf)?;
            values.extend(buf[..num_bins].iter().map(|c| T::from_f64_lossy(c.norm())));
        }
        Ok(Spectrogram {
            values,
            num_frames,
            num_bins,
        })
    }
}

/// STFT magnitude of raw 64-bit samples.
pub fn stft_magnitude_samples<T: Real>(samples: &[f64], cfg: &StftConfig) -> Result<Spectrogram<T>> {
    Stft::new(*cfg)?.magnitudes(samples)
}

/// STFT magnitude of a clip, stored at 32-bit precision.
pub fn stft_magnitude(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    let samples: Vec<f64> = clip.samples().iter().map(|&s| s as f64).collect();
    stft_magnitude_samples(&samples, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Pgm,
    Csv,
}

impl ExportFormat {
    /// Picks the format from a `.pgm` / `.csv` file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "pgm" => Some(ExportFormat::Pgm),
            "csv" => Some(ExportFormat::Csv),
            _ => None,
        }
    }
}

/// One CSV row per frame, values in shortest round-trip decimal form.
pub fn spectrogram_csv<T: Real>(spec: &Spectrogram<T>) -> String {
    let mut out = String::new();
    for f in 0..spec.num_frames() {
        for (b, v) in spec.frame(f).iter().enumerate() {
            if b > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    out
}

/// Binary PGM with frames as rows: `log1p` then min-max scaled to 0..=255.
/// A constant image maps to all zeros.
pub fn spectrogram_pgm<T: Real>(spec: &Spectrogram<T>) -> Vec<u8> {
    let logs: Vec<f64> = spec.values().iter().map(|v| v.to_f64_lossy().ln_1p()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5 {} {} 255\n", spec.num_bins(), spec.num_frames()).into_bytes();
    let range = hi - lo;
    out.extend(logs.iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn export_spectrogram<T: Real>(
    spec: &Spectrogram<T>,
    path: impl AsRef<Path>,
    format: ExportFormat,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        ExportFormat::Csv => spectrogram_csv(spec).into_bytes(),
        ExportFormat::Pgm => spectrogram_pgm(spec),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n^2) DFT with the exponent reduced mod L before evaluation.
    fn dft_oracle(x: &[Complex64]) -> Vec<Complex64> {
        let l = x.len();
        (0..l)
            .map(|m| {
                x.iter()
                    .enumerate()
                    .map(|(n, v)| {
                        let k = (m * n) % l;
                        v * Complex64::from_polar(1.0, -2.0 * PI * k as f64 / l as f64)
                    })
                    .sum()
            })
            .collect()
    }

    /// Inverse via conjugation; test-only.
    fn ifft(x: &[Complex64]) -> Vec<Complex64> {
        let conj: Vec<Complex64> = x.iter().map(|c| c.conj()).collect();
        let n = x.len() as f64;
        fft(&conj).unwrap().iter().map(|c| c.conj() / n).collect()
    }

    fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn max_rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let scale = b.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_coefficients(Window::Rectangular, 4).unwrap(), vec![1.0; 4]);
        let h2 = window_coefficients(Window::Hann, 2).unwrap();
        assert!((h2[0] - 0.0).abs() < 1e-15 && (h2[1] - 1.0).abs() < 1e-15);
        for n in 1..40 {
            assert_eq!(window_coefficients(Window::Hann, n).unwrap()[0], 0.0);
        }
        assert!(window_coefficients(Window::Hann, 0).is_err());
        assert!("kaiser".parse::<Window>().is_err());
        assert!(Window::from_tag(9).is_err());
    }

    #[test]
    fn fft_basic_cases() {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        let imp = fft(&[one, zero, zero, zero]).unwrap();
        assert!(imp.iter().all(|c| (c - one).norm() < 1e-15));
        let dc = fft(&[one; 4]).unwrap();
        assert!((dc[0] - Complex64::new(4.0, 0.0)).norm() < 1e-15);
        assert!(dc[1..].iter().all(|c| c.norm() < 1e-15));
        assert!(matches!(fft(&[one; 6]), Err(Error::Size(6))));
        assert_eq!(fft(&[one]).unwrap(), vec![one]);
    }

    #[test]
    fn fft_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[2usize, 8, 64, 256, 1024] {
            let x = random_complex(&mut rng, n);
            let err = max_rel_err(&fft(&x).unwrap(), &dft_oracle(&x));
            assert!(err < 1e-9, "n={n} err={err}");
        }
    }

    #[test]
    fn fft_inverse_round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_complex(&mut rng, 512);
        let big = fft(&x).unwrap();
        assert!(max_rel_err(&ifft(&big), &x) < 1e-9);
        let energy_t: f64 = x.iter().map(|c| c.norm_sqr()).sum();
        let energy_f: f64 = big.iter().map(|c| c.norm_sqr()).sum();
        assert!((energy_f - 512.0 * energy_t).abs() / energy_f < 1e-9);
    }

    #[test]
    fn canonical_shape_is_124_by_129() {
        let clip = AudioClip::new(vec![0.0; 16000], 16000).unwrap();
        let spec = stft_magnitude(&clip, &StftConfig::default()).unwrap();
        assert_eq!(spec.shape(), (124, 129));
        assert!(spec.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let samples: Vec<f64> = (0..16000)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin() * 0.8)
            .collect();
        let spec: Spectrogram<f64> = stft_magnitude_samples(&samples, &StftConfig::default()).unwrap();
        for f in 1..spec.num_frames() - 1 {
            assert_eq!(crate::tensor::argmax(spec.frame(f)), 16);
        }
    }

    #[test]
    fn too_short_input() {
        let clip = AudioClip::new(vec![0.0; 254], 16000).unwrap();
        assert!(matches!(
            stft_magnitude(&clip, &StftConfig::default()),
            Err(Error::TooShort { len: 254, needed: 255 })
        ));
    }

    #[test]
    fn rectangular_single_frame_is_plain_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = StftConfig {
            frame_length: 64,
            frame_step: 64,
            fft_length: 64,
            window: Window::Rectangular,
        };
        let spec: Spectrogram<f64> = stft_magnitude_samples(&samples, &cfg).unwrap();
        let x: Vec<Complex64> = samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        let oracle = dft_oracle(&x);
        assert_eq!(spec.shape(), (1, 33));
        for (b, v) in spec.frame(0).iter().enumerate() {
            assert!((v - oracle[b].norm()).abs() <= 1e-9 * oracle[b].norm().max(1.0));
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            StftConfig { fft_length: 200, ..Default::default() },
            StftConfig { frame_length: 300, ..Default::default() },
            StftConfig { frame_step: 0, ..Default::default() },
            StftConfig { frame_step: 256, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        StftConfig::default().validate().unwrap();
    }

    #[test]
    fn csv_export_format() {
        let spec = Spectrogram::<f32>::from_values(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(spectrogram_csv(&spec), "0,1\n2,3\n");
        let frac = Spectrogram::<f32>::from_values(1, 2, vec![0.1, 2.5]).unwrap();
        assert_eq!(spectrogram_csv(&frac), "0.1,2.5\n");
    }

    #[test]
    fn pgm_export_format() {
        let flat = Spectrogram::<f32>::from_values(3, 2, vec![5.0; 6]).unwrap();
        let pgm = spectrogram_pgm(&flat);
        let header = b"P5 2 3 255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert!(pgm[header.len()..].iter().all(|&p| p == 0));

        let big = Spectrogram::<f32>::from_values(124, 129, (0..124 * 129).map(|i| i as f32).collect()).unwrap();
        let pgm = spectrogram_pgm(&big);
        assert!(pgm.starts_with(b"P5 129 124 255\n"));
        assert_eq!(pgm.len(), 15 + 124 * 129);
        assert_eq!(pgm[15], 0);
        assert_eq!(*pgm.last().unwrap(), 255);
    }

    #[test]
    fn export_to_unwritable_path_fails() {
        let spec = Spectrogram::<f32>::from_values(1, 1, vec![1.0]).unwrap();
        let err = export_spectrogram(&spec, "/nonexistent-dir/x.csv", ExportFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn frame_count_law(n in 255usize..48000) {
            let cfg = StftConfig::default();
            let samples = vec![0.0f64; n];
            let spec: Spectrogram<f32> = stft_magnitude_samples(&samples, &cfg).unwrap();
            prop_assert_eq!(spec.num_frames(), (n - 255) / 128 + 1);
            prop_assert_eq!(spec.num_bins(), 129);
        }

        #[test]
        fn magnitude_is_homogeneous(seed in 0u64..1000, a in -8.0f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
            let cfg = StftConfig::default();
            let s: Spectrogram<f64> = stft_magnitude_samples(&x, &cfg).unwrap();
            let sa: Spectrogram<f64> = stft_magnitude_samples(&ax, &cfg).unwrap();
            let scale = s.values().iter().cloned().fold(0.0, f64::max) * a.abs();
            for (p, q) in sa.values().iter().zip(s.values()) {
                prop_assert!((p - a.abs() * q).abs() <= 1e-12 * scale.max(1e-300));
            }
        }
    }
}
