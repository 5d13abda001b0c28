//! File-access audit trail.
//!
//! Every image or label read flows through [`AccessLog::record`], tagged with
//! the consumer context (which training role, evaluation, pseudo-labeling).
//! Tests and the pipeline use the log to prove that target-domain ground-truth
//! labels are only ever consumed by oracle training and evaluation.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Domain;

/// Consumer contexts used throughout the pipeline.
pub mod context {
    pub const TRAIN_BASELINE: &str = "train:baseline";
    pub const TRAIN_ORACLE: &str = "train:oracle";
    pub const TRAIN_TEACHER: &str = "train:teacher";
    pub const TRAIN_STUDENT: &str = "train:student";
    pub const EVAL: &str = "eval";
    pub const PSEUDO_LABEL: &str = "pseudo-label";
    pub const TRANSLATE_FIT: &str = "translate:fit";
    pub const TRANSLATE_APPLY: &str = "translate:apply";
    pub const FEATURE_STATS: &str = "feature-stats";
}

/// One recorded access.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccessEvent {
    pub context: String,
    pub file: PathBuf,
    pub domain: Domain,
    /// True iff ground-truth annotations were served alongside the image.
    pub gt_labels_read: bool,
}

/// Thread-safe append-only access log.
#[derive(Debug, Default)]
pub struct AccessLog {
    events: Mutex<Vec<AccessEvent>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, ctx: &str, file: &Path, domain: Domain, gt_labels_read: bool) {
        self.events.lock().unwrap().push(AccessEvent {
            context: ctx.to_string(),
            file: file.to_path_buf(),
            domain,
            gt_labels_read,
        });
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.events())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vec<AccessEvent>> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Contexts permitted to read target-domain ground-truth labels.
const TARGET_LABEL_ALLOWED: &[&str] = &[context::TRAIN_ORACLE, context::EVAL];

/// Fails if any event shows target ground-truth labels read outside oracle
/// training or evaluation.
pub fn verify_no_target_label_leak(events: &[AccessEvent]) -> Result<()> {
    for ev in events {
        if ev.domain == Domain::Target
            && ev.gt_labels_read
            && !TARGET_LABEL_ALLOWED.contains(&ev.context.as_str())
        {
            return Err(Error::internal(format!(
                "target ground-truth labels leaked to context `{}` via {}",
                ev.context,
                ev.file.display()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leak_detected() {
        let log = AccessLog::new();
        log.record(context::TRAIN_TEACHER, Path::new("t.png"), Domain::Target, true);
        assert!(verify_no_target_label_leak(&log.events()).is_err());
    }

    #[test]
    fn oracle_and_eval_allowed() {
        let log = AccessLog::new();
        log.record(context::TRAIN_ORACLE, Path::new("t.png"), Domain::Target, true);
        log.record(context::EVAL, Path::new("v.png"), Domain::Target, true);
        log.record(context::TRAIN_TEACHER, Path::new("t.png"), Domain::Target, false);
        assert!(verify_no_target_label_leak(&log.events()).is_ok());
    }
}
