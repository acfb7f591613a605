//! Synthetic four-class corpus used when no recordings are at hand.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::wav_io::{write_wav_file, AudioClip, CANONICAL_LEN, CANONICAL_RATE};

pub const DEFAULT_PER_CLASS: usize = 200;
pub const DEFAULT_SEED: u64 = 7;
pub const NOISE_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthClass {
    Tone,
    Chirp,
    Am,
    Noise,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] = [SynthClass::Tone, SynthClass::Chirp, SynthClass::Am, SynthClass::Noise];

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Tone => "tone",
            SynthClass::Chirp => "chirp",
            SynthClass::Am => "am",
            SynthClass::Noise => "noise",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// One second at 16 kHz. Amplitude is drawn from [0.3, 0.9] and a uniform
/// noise floor of 1% is added on top.
pub fn synth_clip(class: SynthClass, rng: &mut impl Rng) -> AudioClip {
    let rate = CANONICAL_RATE as f64;
    let amp = rng.random_range(0.3..0.9);
    let phase = rng.random_range(0.0..TAU);
    let samples: Vec<f64> = match class {
        SynthClass::Tone => (0..CANONICAL_LEN)
            .map(|i| amp * (TAU * 440.0 * i as f64 / rate + phase).sin())
            .collect(),
        SynthClass::Chirp => {
            let (f0, f1) = (300.0, 3000.0);
            let dur = CANONICAL_LEN as f64 / rate;
            (0..CANONICAL_LEN)
                .map(|i| {
                    let t = i as f64 / rate;
                    amp * (TAU * (f0 * t + (f1 - f0) * t * t / (2.0 * dur)) + phase).sin()
                })
                .collect()
        }
        SynthClass::Am => {
            let mod_phase = rng.random_range(0.0..TAU);
            (0..CANONICAL_LEN)
                .map(|i| {
                    let t = i as f64 / rate;
                    let envelope = 0.5 * (1.0 + (TAU * 8.0 * t + mod_phase).sin());
                    amp * envelope * (TAU * 1000.0 * t + phase).sin()
                })
                .collect()
        }
        SynthClass::Noise => (0..CANONICAL_LEN).map(|_| amp * rng.random_range(-1.0..1.0)).collect(),
    };
    let noisy = samples
        .into_iter()
        .map(|s| (s + NOISE_FLOOR * rng.random_range(-1.0..1.0)) as f32)
        .collect();
    AudioClip::from_clamped(noisy, CANONICAL_RATE).expect("rate is positive")
}

/// Clip `i` of `class`; every clip has its own stream, so the corpus does
/// not depend on generation order.
pub fn corpus_clip(seed: u64, class: SynthClass, i: usize) -> AudioClip {
    let mut rng = rng::stream(seed, Purpose::Synth, (class.index() << 32) | i as u64);
    synth_clip(class, &mut rng)
}

/// Writes `out/<class>/<class>_NNNN.wav` for every class.
pub fn generate_corpus(out: impl AsRef<Path>, per_class: usize, seed: u64) -> Result<()> {
    let out = out.as_ref();
    if per_class == 0 {
        return Err(Error::Config("per-class count must be at least 1".into()));
    }
    for class in SynthClass::ALL {
        let dir = out.join(class.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        (0..per_class).into_par_iter().try_for_each(|i| {
            let clip = corpus_clip(seed, class, i);
            write_wav_file(dir.join(format!("{}_{i:04}.wav", class.name())), &clip)
        })?;
    }
    Ok(())
}
