//! Model files and single-clip prediction.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CRYA"  u32 version  i64 created_unix  u64 seed
//! u32 frame_length  u32 frame_step  u32 fft_length  u8 window
//! u32 class_count { u32 len, utf-8 bytes }*
//! f64 norm_mean  f64 norm_variance
//! u32 input_height  u32 input_width  u32 layer_count { u8 tag, fields }*
//! u64 param_count  f32 * param_count        <- parameter region
//! u32 crc32(parameter region)
//! ```

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::nn::layers::softmax;
use crate::nn::{LayerSpec, Network, NetworkConfig, NormStats, Params};
use crate::spectro::{Stft, StftConfig, Window};
use crate::tensor::Tensor;
use crate::train::spectrogram_tensor;
use crate::wav_io::{resample, standardize_length, AudioClip, CANONICAL_LEN, CANONICAL_RATE};

pub const MAGIC: [u8; 4] = *b"CRYA";
pub const FORMAT_VERSION: u32 = 1;

/// A trained network together with everything inference needs.
#[derive(Debug, Clone)]
pub struct Model {
    pub network: Network<f32>,
    pub stft: StftConfig,
    pub class_names: Vec<String>,
    pub created_unix: i64,
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set so that
/// rebuilt model files can be compared byte for byte.
pub fn creation_timestamp() -> i64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

impl Model {
    pub fn new(network: Network<f32>, stft: StftConfig, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() != network.class_count() {
            return Err(Error::Config(format!(
                "{} class names for a network with {} outputs",
                class_names.len(),
                network.class_count()
            )));
        }
        stft.validate()?;
        let spec_shape = [
            stft.num_frames(CANONICAL_LEN).unwrap_or(0),
            stft.num_bins(),
            1,
        ];
        if spec_shape != network.input_shape() {
            return Err(Error::Config(format!(
                "STFT produces {spec_shape:?} but the network expects {:?}",
                network.input_shape()
            )));
        }
        Ok(Self {
            network,
            stft,
            class_names,
            created_unix: creation_timestamp(),
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        w.extend_from_slice(&self.created_unix.to_le_bytes());
        w.extend_from_slice(&self.network.seed().to_le_bytes());

        put_u32(&mut w, self.stft.frame_length as u32);
        put_u32(&mut w, self.stft.frame_step as u32);
        put_u32(&mut w, self.stft.fft_length as u32);
        w.push(self.stft.window.tag());

        put_u32(&mut w, self.class_names.len() as u32);
        for name in &self.class_names {
            put_u32(&mut w, name.len() as u32);
            w.extend_from_slice(name.as_bytes());
        }

        let norm = self.network.norm_stats();
        w.extend_from_slice(&norm.mean.to_le_bytes());
        w.extend_from_slice(&norm.variance.to_le_bytes());

        let cfg = self.network.config();
        put_u32(&mut w, cfg.input_height as u32);
        put_u32(&mut w, cfg.input_width as u32);
        let specs = cfg.layer_specs();
        put_u32(&mut w, specs.len() as u32);
        for spec in &specs {
            put_layer(&mut w, spec);
        }

        let region_start = w.len();
        let params = self.network.params();
        w.extend_from_slice(&(params.count() as u64).to_le_bytes());
        for t in params.tensors() {
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&w[region_start..]);
        put_u32(&mut w, crc);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::NotAModel);
        }
        r.pos = 4;
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let created_unix = r.i64("timestamp")?;
        let seed = r.u64("seed")?;

        let stft = StftConfig {
            frame_length: r.u32("frame length")? as usize,
            frame_step: r.u32("frame step")? as usize,
            fft_length: r.u32("FFT length")? as usize,
            window: Window::from_tag(r.u8("window")?).map_err(|e| Error::Model(e.to_string()))?,
        };
        stft.validate().map_err(|e| Error::Model(e.to_string()))?;

        let class_count = r.u32("class count")? as usize;
        let mut class_names = Vec::with_capacity(class_count.min(1024));
        for i in 0..class_count {
            let len = r.u32("class name length")? as usize;
            let raw = r.take(len, "class name")?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::Model(format!("class name {i} is not UTF-8")))?;
            class_names.push(name.to_string());
        }

        let norm = NormStats {
            mean: r.f64("normalization mean")?,
            variance: r.f64("normalization variance")?,
        };

        let input_height = r.u32("input height")? as usize;
        let input_width = r.u32("input width")? as usize;
        let layer_count = r.u32("layer count")? as usize;
        let mut specs = Vec::with_capacity(layer_count.min(64));
        for _ in 0..layer_count {
            specs.push(r.layer()?);
        }
        let config = NetworkConfig::from_layer_specs(input_height, input_width, &specs)
            .map_err(|e| Error::Model(e.to_string()))?;
        if config.class_count != class_names.len() {
            return Err(Error::Model(format!(
                "{} class names but {} network outputs",
                class_names.len(),
                config.class_count
            )));
        }

        let region_start = r.pos;
        let param_count = r.u64("parameter count")?;
        let mut template = Params::<f32>::zeros(&config);
        if param_count != template.count() as u64 {
            return Err(Error::Model(format!(
                "{param_count} parameters stored, layer stack needs {}",
                template.count()
            )));
        }
        let raw = r.take(param_count as usize * 4, "parameters")?;
        let region_end = r.pos;
        let stored_crc = r.u32("CRC")?;
        let actual_crc = crc32fast::hash(&bytes[region_start..region_end]);
        if stored_crc != actual_crc {
            return Err(Error::Corrupt {
                expected: stored_crc,
                actual: actual_crc,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Model(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for t in template.tensors_mut() {
            for slot in t.data_mut() {
                *slot = values.next().expect("count checked above");
            }
        }
        let network = Network::from_parts(config, norm, template, seed)?;
        let model = Self {
            network,
            stft,
            class_names,
            created_unix,
        };
        let spec_frames = stft.num_frames(CANONICAL_LEN).unwrap_or(0);
        if [spec_frames, stft.num_bins(), 1] != model.network.input_shape() {
            return Err(Error::Model(format!(
                "stored STFT settings produce {spec_frames}x{} spectrograms, network expects {:?}",
                stft.num_bins(),
                model.network.input_shape()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The network input for a clip: resample, check length, pad or cut to
    /// one second, then take the magnitude spectrogram.
    pub fn input_for(&self, clip: &AudioClip) -> Result<Tensor<f32>> {
        let clip = resample(clip, CANONICAL_RATE)?;
        if clip.len() < self.stft.frame_length {
            return Err(Error::TooShort {
                len: clip.len(),
                needed: self.stft.frame_length,
            });
        }
        let clip = standardize_length(&clip, CANONICAL_LEN);
        let samples: Vec<f64> = clip.samples().iter().map(|&s| s as f64).collect();
        let spec = Stft::new(self.stft)?.magnitudes::<f32>(&samples)?;
        Ok(spectrogram_tensor(&spec))
    }

    pub fn predict(&self, clip: &AudioClip) -> Result<Prediction> {
        let logits = self.network.infer(&self.input_for(clip)?)?;
        let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        Ok(Prediction {
            class_names: self.class_names.clone(),
            probabilities: softmax(&z),
        })
    }
}

/// Softmax probabilities per class, in class-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_names: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    /// Index of the most probable class; ties go to the lowest index.
    pub fn best(&self) -> usize {
        crate::tensor::argmax(&self.probabilities)
    }

    pub fn label(&self) -> &str {
        &self.class_names[self.best()]
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.best()]
    }

    /// `(class, probability)` pairs, most probable first; equal
    /// probabilities keep class order.
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut pairs: Vec<(&str, f64)> = self
            .class_names
            .iter()
            .map(String::as_str)
            .zip(self.probabilities.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
        pairs
    }

    pub fn to_map(&self) -> std::collections::BTreeMap<String, f64> {
        self.class_names.iter().cloned().zip(self.probabilities.iter().copied()).collect()
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

const TAG_RESIZE: u8 = 1;
const TAG_NORMALIZE: u8 = 2;
const TAG_CONV2D: u8 = 3;
const TAG_MAXPOOL: u8 = 4;
const TAG_DROPOUT: u8 = 5;
const TAG_FLATTEN: u8 = 6;
const TAG_DENSE: u8 = 7;

fn put_layer(w: &mut Vec<u8>, spec: &LayerSpec) {
    match *spec {
        LayerSpec::Resize { height, width } => {
            w.push(TAG_RESIZE);
            put_u32(w, height as u32);
            put_u32(w, width as u32);
        }
        LayerSpec::Normalize => w.push(TAG_NORMALIZE),
        LayerSpec::Conv2d { filters, kernel, relu } => {
            w.push(TAG_CONV2D);
            put_u32(w, filters as u32);
            put_u32(w, kernel as u32);
            w.push(relu as u8);
        }
        LayerSpec::MaxPool2d { pool } => {
            w.push(TAG_MAXPOOL);
            put_u32(w, pool as u32);
        }
        LayerSpec::Dropout { rate } => {
            w.push(TAG_DROPOUT);
            w.extend_from_slice(&rate.to_le_bytes());
        }
        LayerSpec::Flatten => w.push(TAG_FLATTEN),
        LayerSpec::Dense { units, relu } => {
            w.push(TAG_DENSE);
            put_u32(w, units as u32);
            w.push(relu as u8);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Model(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn i64(&mut self, what: &str) -> Result<i64> {
        self.array(what).map(i64::from_le_bytes)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        self.array(what).map(f64::from_le_bytes)
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Model(format!("{what} flag is {other}, expected 0 or 1"))),
        }
    }

    fn layer(&mut self) -> Result<LayerSpec> {
        Ok(match self.u8("layer tag")? {
            TAG_RESIZE => LayerSpec::Resize {
                height: self.u32("resize height")? as usize,
                width: self.u32("resize width")? as usize,
            },
            TAG_NORMALIZE => LayerSpec::Normalize,
            TAG_CONV2D => LayerSpec::Conv2d {
                filters: self.u32("filters")? as usize,
                kernel: self.u32("kernel size")? as usize,
                relu: self.flag("relu")?,
            },
            TAG_MAXPOOL => LayerSpec::MaxPool2d {
                pool: self.u32("pool size")? as usize,
            },
            TAG_DROPOUT => LayerSpec::Dropout {
                rate: self.f64("dropout rate")?,
            },
            TAG_FLATTEN => LayerSpec::Flatten,
            TAG_DENSE => LayerSpec::Dense {
                units: self.u32("units")? as usize,
                relu: self.flag("relu")?,
            },
            tag => return Err(Error::Model(format!("unknown layer tag {tag}"))),
        })
    }
}
