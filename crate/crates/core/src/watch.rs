//! Directory polling for newly arrived WAV files.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use crate::alert::{AlertEmitter, AlertEvent, AlertPolicy};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::wav_io::read_wav_file;

pub const DEFAULT_POLL: Duration = Duration::from_millis(500);

/// Tracks `*.wav` files in one directory. A file is handed out once, after
/// its size was the same on two consecutive polls.
#[derive(Debug)]
pub struct Watcher {
    dir: PathBuf,
    sizes: BTreeMap<PathBuf, u64>,
    done: HashSet<PathBuf>,
}

impl Watcher {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(Error::Config(format!("{} is not a directory", dir.display())));
        }
        Ok(Self {
            dir,
            sizes: BTreeMap::new(),
            done: HashSet::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn processed_count(&self) -> usize {
        self.done.len()
    }

    /// Files that became ready since the last poll, in name order.
    pub fn poll(&mut self) -> Result<Vec<PathBuf>> {
        let entries = std::fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut seen = BTreeMap::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let path = entry.path();
            let is_wav = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if !is_wav || self.done.contains(&path) {
                continue;
            }
            // vanished or unreadable entries are retried next poll
            if let Ok(meta) = entry.metadata() {
                if meta.is_file() {
                    seen.insert(path, meta.len());
                }
            }
        }
        let mut ready = Vec::new();
        for (path, size) in &seen {
            if self.sizes.get(path) == Some(size) {
                ready.push(path.clone());
            }
        }
        for path in &ready {
            seen.remove(path);
            self.done.insert(path.clone());
        }
        self.sizes = seen;
        Ok(ready)
    }
}

/// Counters for a finished watch run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WatchSummary {
    pub classified: usize,
    pub alerts: usize,
    pub failed: usize,
}

/// Classifies one file and emits its event.
pub fn process_file(model: &Model, policy: &AlertPolicy, emitter: &mut AlertEmitter, path: &Path) -> Result<AlertEvent> {
    let clip = read_wav_file(path)?;
    let prediction = model.predict(&clip)?;
    let event = policy.decide(&prediction, &path.display().to_string())?;
    emitter.emit(&event);
    Ok(event)
}

/// Polls until `stop` is set. A file being classified when the stop
/// request arrives is finished first.
pub fn run(
    model: &Model,
    policy: &AlertPolicy,
    emitter: &mut AlertEmitter,
    watcher: &mut Watcher,
    poll: Duration,
    stop: &AtomicBool,
) -> Result<WatchSummary> {
    let mut summary = WatchSummary::default();
    let tick = Duration::from_millis(20).min(poll.max(Duration::from_millis(1)));
    while !stop.load(Ordering::SeqCst) {
        for path in watcher.poll()? {
            match process_file(model, policy, emitter, &path) {
                Ok(event) => {
                    summary.classified += 1;
                    summary.alerts += event.alert as usize;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    summary.failed += 1;
                }
            }
            if stop.load(Ordering::SeqCst) {
                return Ok(summary);
            }
        }
        let mut slept = Duration::ZERO;
        while slept < poll && !stop.load(Ordering::SeqCst) {
            thread::sleep(tick);
            slept += tick;
        }
    }
    Ok(summary)
}
