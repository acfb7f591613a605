//! Alert decisions and delivery.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prediction;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_ALERT_CLASSES: [&str; 2] = ["crying", "screaming"];
pub const HTTP_TIMEOUT: Duration = Duration::from_secs(2);

/// One classified clip. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub timestamp: String,
    pub source: String,
    pub predicted_label: String,
    pub probabilities: BTreeMap<String, f64>,
    pub alert: bool,
    pub threshold: f64,
}

impl AlertEvent {
    /// Minified JSON without a trailing newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

pub fn rfc3339(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Which classes raise alerts, and how confident the prediction must be.
#[derive(Debug, Clone, PartialEq)]
pub struct AlertPolicy {
    class_names: Vec<String>,
    alert_classes: Vec<usize>,
    threshold: f64,
}

impl AlertPolicy {
    pub fn new(class_names: &[String], alert_classes: &[String], threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {threshold} must be in (0, 1]")));
        }
        let mut indices = Vec::new();
        for name in alert_classes {
            match class_names.iter().position(|c| c == name) {
                Some(i) => indices.push(i),
                None => {
                    return Err(Error::Config(format!(
                        "alert class {name:?} is not one of the model classes {class_names:?}"
                    )))
                }
            }
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(Self {
            class_names: class_names.to_vec(),
            alert_classes: indices,
            threshold,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn alert_class_names(&self) -> Vec<&str> {
        self.alert_classes.iter().map(|&i| self.class_names[i].as_str()).collect()
    }

    pub fn decide_at(&self, prediction: &Prediction, source: &str, at: DateTime<Utc>) -> Result<AlertEvent> {
        if prediction.class_names != self.class_names {
            return Err(Error::Config(format!(
                "prediction classes {:?} differ from policy classes {:?}",
                prediction.class_names, self.class_names
            )));
        }
        let best = prediction.best();
        let alert = self.alert_classes.contains(&best) && prediction.probabilities[best] >= self.threshold;
        Ok(AlertEvent {
            timestamp: rfc3339(at),
            source: source.to_string(),
            predicted_label: self.class_names[best].clone(),
            probabilities: prediction.to_map(),
            alert,
            threshold: self.threshold,
        })
    }

    pub fn decide(&self, prediction: &Prediction, source: &str) -> Result<AlertEvent> {
        self.decide_at(prediction, source, Utc::now())
    }
}

/// Builds the event for one prediction in a single call.
pub fn decide_alert(
    prediction: &Prediction,
    alert_classes: &[String],
    threshold: f64,
    source: &str,
) -> Result<AlertEvent> {
    AlertPolicy::new(&prediction.class_names, alert_classes, threshold)?.decide(prediction, source)
}

pub trait AlertSink: Send {
    fn name(&self) -> String;

    /// Log-style sinks take every event; notification sinks only alerts.
    fn receives_all(&self) -> bool {
        false
    }

    fn send(&mut self, json: &str) -> Result<()>;
}

/// JSON lines on any writer; receives every event, alert or not.
pub struct WriterSink<W> {
    name: String,
    writer: W,
}

impl<W: Write + Send> WriterSink<W> {
    pub fn new(name: impl Into<String>, writer: W) -> Self {
        Self {
            name: name.into(),
            writer,
        }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl WriterSink<std::io::Stdout> {
    pub fn stdout() -> Self {
        Self::new("stdout", std::io::stdout())
    }
}

impl<W: Write + Send> AlertSink for WriterSink<W> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn receives_all(&self) -> bool {
        true
    }

    fn send(&mut self, json: &str) -> Result<()> {
        let mut line = String::with_capacity(json.len() + 1);
        line.push_str(json);
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::Sink(format!("{}: {e}", self.name)))
    }
}

/// POSTs each alert as JSON, retrying once on failure.
pub struct HttpSink {
    url: String,
    agent: ureq::Agent,
}

impl HttpSink {
    pub fn new(url: impl Into<String>) -> Result<Self> {
        let url = url.into();
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(Error::Config(format!("alert URL {url:?} must start with http:// or https://")));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(HTTP_TIMEOUT))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(Self { url, agent })
    }

    fn post(&self, json: &str) -> std::result::Result<(), ureq::Error> {
        self.agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(json)
            .map(|_| ())
    }
}

impl AlertSink for HttpSink {
    fn name(&self) -> String {
        format!("http {}", self.url)
    }

    fn send(&mut self, json: &str) -> Result<()> {
        match self.post(json) {
            Ok(()) => Ok(()),
            Err(first) => {
                log::debug!("POST to {} failed ({first}), retrying once", self.url);
                self.post(json)
                    .map_err(|e| Error::Sink(format!("POST {} failed twice: {first}; {e}", self.url)))
            }
        }
    }
}

/// Runs a shell command per alert with the JSON on its standard input.
pub struct CommandSink {
    command: String,
}

impl CommandSink {
    pub fn new(command: impl Into<String>) -> Result<Self> {
        let command = command.into();
        if command.trim().is_empty() {
            return Err(Error::Config("alert command is empty".into()));
        }
        Ok(Self { command })
    }
}

impl AlertSink for CommandSink {
    fn name(&self) -> String {
        format!("command {:?}", self.command)
    }

    fn send(&mut self, json: &str) -> Result<()> {
        let fail = |e: String| Error::Sink(format!("command {:?}: {e}", self.command));
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        // The command may exit without reading; a broken pipe is its business.
        let _ = stdin.write_all(json.as_bytes()).and_then(|_| stdin.write_all(b"\n"));
        drop(stdin);
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        if status.success() {
            Ok(())
        } else {
            Err(fail(format!("exited with {status}")))
        }
    }
}

/// Result of handing one event to the sinks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Delivery {
    pub delivered: usize,
    pub failed: usize,
    /// An alert inside the cooldown window; notification sinks were skipped.
    pub suppressed: bool,
}

/// Fans events out to sinks. Sink failures are logged, never returned.
pub struct AlertEmitter {
    sinks: Vec<Box<dyn AlertSink>>,
    cooldown: Duration,
    last_alert: Option<Instant>,
}

impl AlertEmitter {
    pub fn new(sinks: Vec<Box<dyn AlertSink>>, cooldown: Duration) -> Result<Self> {
        if sinks.is_empty() {
            return Err(Error::Config("at least one alert sink must be configured".into()));
        }
        Ok(Self {
            sinks,
            cooldown,
            last_alert: None,
        })
    }

    pub fn emit(&mut self, event: &AlertEvent) -> Delivery {
        self.emit_at(event, Instant::now())
    }

    pub fn emit_at(&mut self, event: &AlertEvent, now: Instant) -> Delivery {
        let mut out = Delivery::default();
        if event.alert {
            let cooling = matches!(self.last_alert, Some(t) if now.saturating_duration_since(t) < self.cooldown);
            if cooling {
                out.suppressed = true;
            } else {
                self.last_alert = Some(now);
            }
        }
        let json = event.to_json();
        for sink in &mut self.sinks {
            if !sink.receives_all() && (!event.alert || out.suppressed) {
                continue;
            }
            match sink.send(&json) {
                Ok(()) => out.delivered += 1,
                Err(e) => {
                    log::warn!("{e}");
                    out.failed += 1;
                }
            }
        }
        if out.failed > 0 && out.delivered == 0 {
            log::warn!("no sink accepted the event for {}", event.source);
        }
        out
    }
}
