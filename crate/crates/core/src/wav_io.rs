//! WAV parsing/writing, decimation, length standardization and the
//! class-per-directory dataset loader.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Rate every clip is brought to before feature extraction.
pub const CANONICAL_RATE: u32 = 16_000;
/// One second at [`CANONICAL_RATE`].
pub const CANONICAL_LEN: usize = 16_000;

pub const FIR_TAPS: usize = 127;
/// Anti-alias cutoff as a fraction of the target rate.
pub const FIR_CUTOFF: f64 = 0.45;

const PCM_SCALE: f64 = 32768.0;

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(-1.0..=1.0).contains(*s))
        {
            return Err(Error::Config(format!(
                "sample {i} = {s} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a clip, clamping every sample into `[-1, 1]` (NaN becomes 0).
    pub fn from_clamped(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Parses a RIFF/WAVE byte buffer holding 16-bit integer PCM.
///
/// Multi-channel input is downmixed by averaging each frame. Unknown chunks
/// (`LIST`, `fact`, ...) are skipped. A `data` chunk whose declared size runs
/// past the end of the buffer is read up to the last complete frame, which is
/// what streaming recorders leave behind when they are cut off.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;

    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.saturating_add(size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Format(format!(
                        "fmt chunk is {} bytes, need 16",
                        body.len()
                    )));
                }
                fmt = Some(FmtChunk {
                    format: u16_at(body, 0),
                    channels: u16_at(body, 2),
                    sample_rate: u32_at(body, 4),
                    bits: u16_at(body, 14),
                });
            }
            b"data" => {
                data = Some(body);
                break;
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }

    let fmt = fmt.ok_or_else(|| Error::Format("no fmt chunk before data".into()))?;
    if fmt.format != 1 {
        return Err(Error::UnsupportedCodec(fmt.format));
    }
    if fmt.bits != 16 {
        return Err(Error::UnsupportedBitDepth(fmt.bits));
    }
    if fmt.channels == 0 {
        return Err(Error::Format("zero channels".into()));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::Format("zero sample rate".into()));
    }
    let data = data.ok_or_else(|| Error::Format("no data chunk".into()))?;

    let channels = fmt.channels as usize;
    let frame_bytes = 2 * channels;
    let samples = data
        .chunks_exact(frame_bytes)
        .map(|frame| {
            let sum: i32 = frame
                .chunks_exact(2)
                .map(|s| i16::from_le_bytes([s[0], s[1]]) as i32)
                .sum();
            (sum as f64 / channels as f64 / PCM_SCALE) as f32
        })
        .collect();
    AudioClip::new(samples, fmt.sample_rate)
}

/// Quantizes a sample to 16-bit PCM; exact for values of the form `k / 32768`.
pub fn quantize_i16(s: f32) -> i16 {
    (s as f64 * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes a clip as a canonical 44-byte-header mono 16-bit PCM WAV.
pub fn write_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = (clip.len() * 2) as u32;
    let rate = clip.sample_rate();
    let mut buf = Vec::with_capacity(44 + clip.len() * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&rate.to_le_bytes());
    buf.extend_from_slice(&(rate * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in clip.samples() {
        buf.extend_from_slice(&quantize_i16(s).to_le_bytes());
    }
    buf
}

pub fn read_wav_file(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_wav_file(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_wav(clip)).map_err(|e| Error::io(path, e))
}

/// Hann-windowed sinc low-pass with unit DC gain.
///
/// `cutoff` is in cycles per sample (0.5 = Nyquist). The window is the
/// symmetric Hann form so the filter is linear phase with its peak at
/// `(taps - 1) / 2`.
pub fn design_lowpass(cutoff: f64, taps: usize) -> Vec<f64> {
    assert!(taps >= 1, "filter needs at least one tap");
    let center = (taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let t = n as f64 - center;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let window = if taps == 1 {
                1.0
            } else {
                0.5 - 0.5 * (2.0 * PI * n as f64 / (taps - 1) as f64).cos()
            };
            sinc * window
        })
        .collect();
    let gain: f64 = h.iter().sum();
    for v in &mut h {
        *v /= gain;
    }
    h
}

/// Decimates `clip` to `target_rate` by an integer factor.
///
/// Equal rates return the clip untouched. Otherwise the signal is low-passed
/// at `0.45 * target_rate` with a 127-tap FIR (zero-padded at both ends,
/// delay compensated) and every `factor`-th sample is kept. Output samples
/// are clamped back into `[-1, 1]` since filter ringing can overshoot.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    let from = clip.sample_rate();
    if target_rate == 0 {
        return Err(Error::Config("target rate must be positive".into()));
    }
    if from == target_rate {
        return Ok(clip.clone());
    }
    if from < target_rate || from % target_rate != 0 {
        return Err(Error::UnsupportedRatio {
            from,
            to: target_rate,
        });
    }
    let factor = (from / target_rate) as usize;
    let taps = design_lowpass(FIR_CUTOFF / factor as f64, FIR_TAPS);
    let delay = (FIR_TAPS - 1) / 2;
    let x = clip.samples();
    let n = x.len();
    let out_len = n.div_ceil(factor);

    let out = (0..out_len)
        .map(|m| {
            // y[c] = sum_k h[k] x[c + delay - k]
            let c = m * factor + delay;
            let k_lo = c.saturating_sub(n - 1);
            let k_hi = c.min(FIR_TAPS - 1);
            let mut acc = 0.0f64;
            if k_lo <= k_hi {
                for k in k_lo..=k_hi {
                    acc += taps[k] * x[c - k] as f64;
                }
            }
            (acc.clamp(-1.0, 1.0)) as f32
        })
        .collect();
    AudioClip::new(out, target_rate)
}

/// Truncates the tail or appends zeros so the clip is exactly `target_len` long.
pub fn standardize_length(clip: &AudioClip, target_len: usize) -> AudioClip {
    let mut samples = clip.samples().to_vec();
    samples.resize(target_len, 0.0);
    AudioClip {
        samples,
        sample_rate: clip.sample_rate(),
    }
}

/// Resamples to 16 kHz and standardizes to one second.
pub fn canonicalize(clip: &AudioClip) -> Result<AudioClip> {
    let resampled = resample(clip, CANONICAL_RATE)?;
    Ok(standardize_length(&resampled, CANONICAL_LEN))
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!(
                "split ratios must be non-negative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Sizes for `n` items: val and test are floored, train takes the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // the epsilon keeps 0.1 * 30 = 3.0000000000000004 and friends from
        // landing on the wrong side of the floor
        let floor = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
        let val = floor(self.val).min(n);
        let test = floor(self.test).min(n - val);
        (n - val - test, val, test)
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("bad split '{s}': {e}")))?;
        match parts[..] {
            [train, val, test] => Self::new(train, val, test),
            _ => Err(Error::Config(format!(
                "split needs three comma-separated fractions, got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Labeled clips plus a deterministic train/val/test partition.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub items: Vec<(AudioClip, usize)>,
    pub class_names: Vec<String>,
    pub splits: Splits,
    /// File each item came from, when loaded from disk.
    pub sources: Vec<Option<PathBuf>>,
}

impl LabeledDataset {
    /// Shuffles `items` with `seed` and partitions them by `ratios`.
    pub fn from_items(
        items: Vec<(AudioClip, usize)>,
        class_names: Vec<String>,
        ratios: SplitRatios,
        seed: u64,
    ) -> Result<Self> {
        let sources = vec![None; items.len()];
        Self::build(items, sources, class_names, ratios, seed)
    }

    /// Uses the given index sets verbatim.
    pub fn with_splits(
        items: Vec<(AudioClip, usize)>,
        class_names: Vec<String>,
        splits: Splits,
    ) -> Result<Self> {
        let mut seen = vec![false; items.len()];
        for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if i >= items.len() || seen[i] {
                return Err(Error::Dataset(format!(
                    "split index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Dataset("splits do not cover every item".into()));
        }
        check_labels(&items, &class_names)?;
        let sources = vec![None; items.len()];
        Ok(Self {
            items,
            class_names,
            splits,
            sources,
        })
    }

    fn build(
        items: Vec<(AudioClip, usize)>,
        sources: Vec<Option<PathBuf>>,
        class_names: Vec<String>,
        ratios: SplitRatios,
        seed: u64,
    ) -> Result<Self> {
        ratios.validate()?;
        check_labels(&items, &class_names)?;
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));

        let mut slots: Vec<Option<(AudioClip, usize)>> = items.into_iter().map(Some).collect();
        let mut src_slots = sources;
        let mut shuffled = Vec::with_capacity(order.len());
        let mut shuffled_src = Vec::with_capacity(order.len());
        for &i in &order {
            shuffled.push(slots[i].take().expect("permutation visits each index once"));
            shuffled_src.push(src_slots[i].take());
        }

        let (n_train, n_val, _) = ratios.sizes(shuffled.len());
        let n = shuffled.len();
        let splits = Splits {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        };
        Ok(Self {
            items: shuffled,
            class_names,
            splits,
            sources: shuffled_src,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &(AudioClip, usize)> {
        self.splits.get(split).iter().map(move |&i| &self.items[i])
    }
}

fn check_labels(items: &[(AudioClip, usize)], class_names: &[String]) -> Result<()> {
    if let Some((_, label)) = items.iter().find(|(_, l)| *l >= class_names.len()) {
        return Err(Error::Label {
            label: *label,
            classes: class_names.len(),
        });
    }
    Ok(())
}

fn is_wav(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Loads `<root>/<class>/*.wav`, one class per subdirectory.
///
/// Class indices follow the lexicographic order of directory names. Every
/// clip is resampled to 16 kHz and standardized to 16000 samples. Files are
/// decoded in parallel, but the resulting order only depends on the
/// directory contents and `seed`.
pub fn load_dataset(root: impl AsRef<Path>, ratios: SplitRatios, seed: u64) -> Result<LabeledDataset> {
    let root = root.as_ref();
    ratios.validate()?;
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} needs at least 2 class subdirectories, found {}",
            root.display(),
            class_dirs.len()
        )));
    }

    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut files: Vec<(PathBuf, usize)> = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("non UTF-8 class directory {}", dir.display())))?;
        class_names.push(name.to_string());
        let wavs: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_wav(p)).collect();
        if wavs.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} contains no .wav files",
                dir.display()
            )));
        }
        files.extend(wavs.into_iter().map(|p| (p, label)));
    }

    let items = files
        .par_iter()
        .map(|(path, label)| {
            let clip = read_wav_file(path)?;
            let clip = canonicalize(&clip).map_err(|e| {
                Error::Dataset(format!("{}: {e}", path.display()))
            })?;
            Ok((clip, *label))
        })
        .collect::<Result<Vec<_>>>()?;
    let sources = files.into_iter().map(|(p, _)| Some(p)).collect();

    LabeledDataset::build(items, sources, class_names, ratios, seed)
}
