//! End-signal labelling for demonstrations and the sliding-window
//! termination detector used at execution time.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminationConfig {
    /// A prediction counts when it is strictly greater than this.
    pub threshold: f64,
    /// Consecutive counting predictions needed to terminate.
    pub window: usize,
    /// Trailing demonstration frames labelled with the end signal.
    pub label_buffer: usize,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            window: 10,
            label_buffer: 10,
        }
    }
}

impl TerminationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.window == 0 || self.label_buffer == 0 {
            return Err("window and label_buffer must be >= 1".into());
        }
        Ok(())
    }
}

/// First index `t` such that the `window` values ending at `t` all exceed
/// the threshold.
pub fn detect_termination(history: &[f64], cfg: &TerminationConfig) -> Option<usize> {
    let mut detector = TerminationDetector::new(*cfg);
    history.iter().find_map(|&v| detector.push(v))
}

/// Per-frame end labels for an episode of `length` frames: the last
/// `label_buffer` frames are 1.
pub fn label_end_signal(length: usize, cfg: &TerminationConfig) -> Vec<u8> {
    let first = length.saturating_sub(cfg.label_buffer);
    (0..length).map(|i| u8::from(i >= first)).collect()
}

/// Streaming form of [`detect_termination`]. Once fired it keeps
/// reporting the same index.
#[derive(Debug, Clone)]
pub struct TerminationDetector {
    cfg: TerminationConfig,
    run: usize,
    seen: usize,
    fired: Option<usize>,
}

impl TerminationDetector {
    pub fn new(cfg: TerminationConfig) -> Self {
        Self {
            cfg,
            run: 0,
            seen: 0,
            fired: None,
        }
    }

    pub fn push(&mut self, value: f64) -> Option<usize> {
        let index = self.seen;
        self.seen += 1;
        if self.fired.is_some() {
            return self.fired;
        }
        if value > self.cfg.threshold {
            self.run += 1;
        } else {
            self.run = 0;
        }
        if self.run >= self.cfg.window {
            self.fired = Some(index);
        }
        self.fired
    }

    pub fn fired(&self) -> Option<usize> {
        self.fired
    }
}
