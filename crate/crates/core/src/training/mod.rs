//! Three-phase training: causal LM on the concept model, codec training
//! with translation and alignment losses, then end-to-end fine-tuning.

mod losses;
mod phases;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use losses::{alignment_loss, translation_loss, AlignmentTerms, TranslationExample};
pub use phases::{data_fingerprint, train_phase1, train_phase2, train_phase3};

/// Which sub-networks are held fixed during a phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeFlags {
    pub concept: bool,
    pub encoder: bool,
    pub decoder: bool,
}

impl FreezeFlags {
    pub fn all() -> Self {
        Self {
            concept: true,
            encoder: true,
            decoder: true,
        }
    }

    /// `(parameter-name prefix, frozen)` pairs.
    pub fn prefixes(&self) -> [(&'static str, bool); 3] {
        [
            ("concept.", self.concept),
            ("encoder.", self.encoder),
            ("decoder.", self.decoder),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: u8,
    pub learning_rate: f64,
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_align: f64,
    pub lambda_translate: f64,
    /// Weight of the margin term inside the alignment loss.
    pub lambda_contrast: f64,
    pub margin: f64,
    pub freeze: FreezeFlags,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Train on the pivot language only: phase 2 autoencodes it and
    /// phase 3 sees pivot questions only.
    pub monolingual: bool,
    /// Phase 2: fraction of each batch replaced by near neighbours of the
    /// other items (meaning keys differing in one field), so in-batch
    /// negatives differ by a single word.
    pub hard_negatives: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_phase(1)
    }
}

impl TrainConfig {
    /// Defaults for a phase. Phase 1 only touches the concept model, phase 2
    /// freezes it, phase 3 trains everything.
    pub fn for_phase(phase: u8) -> Self {
        let freeze = match phase {
            1 => FreezeFlags {
                concept: false,
                encoder: true,
                decoder: true,
            },
            2 => FreezeFlags {
                concept: true,
                ..FreezeFlags::default()
            },
            _ => FreezeFlags::default(),
        };
        Self {
            phase,
            learning_rate: 3e-3,
            steps: 500,
            batch_size: 32,
            seed: 0,
            lambda_align: 1.0,
            lambda_translate: 1.0,
            lambda_contrast: 1.0,
            margin: 0.2,
            freeze,
            checkpoint_every: 0,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
            monolingual: false,
            hard_negatives: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.phase) {
            return Err(Error::Config(format!("invalid phase {}, expected 1, 2 or 3", self.phase)));
        }
        let nonneg = [
            ("lambda_align", self.lambda_align),
            ("lambda_translate", self.lambda_translate),
            ("lambda_contrast", self.lambda_contrast),
            ("margin", self.margin),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.hard_negatives) {
            return Err(Error::Config(format!(
                "hard_negatives must lie in [0, 1], got {}",
                self.hard_negatives
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Linear warmup over the first `warmup_fraction` of steps, then constant.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_fraction * self.steps as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.learning_rate
        } else {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub learning_rate: f64,
    pub total: f64,
    /// Unweighted loss terms; `total` is their weighted sum.
    pub components: BTreeMap<String, f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: u8,
    pub seed: u64,
    pub config: TrainConfig,
    /// Weight of each component in `StepRecord::total`.
    pub weights: BTreeMap<String, f64>,
    pub records: Vec<StepRecord>,
    pub data_fingerprint: String,
    pub final_checkpoint: Option<String>,
    pub param_checksum: String,
    /// Tokens routed to each expert of each mixture layer, summed over steps.
    pub expert_load: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
    /// Kept out of the JSON so reports of identical runs are identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    /// Mean total loss over a window of steps.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let xs = self.records.get(range)?;
        (!xs.is_empty()).then(|| xs.iter().map(|r| r.total).sum::<f64>() / xs.len() as f64)
    }

    /// Plain-text loss table with at most `max_rows` evenly spaced rows
    /// (the last step is always shown).
    pub fn to_table(&self, max_rows: usize) -> String {
        let names: Vec<&String> = self.weights.keys().collect();
        let mut s = format!("phase {} seed {} steps {}\n", self.phase, self.seed, self.records.len());
        let _ = write!(s, "{:>6} {:>10} {:>12}", "step", "lr", "total");
        for n in &names {
            let _ = write!(s, " {:>12}", n);
        }
        let _ = writeln!(s, " {:>10}", "grad_norm");
        let n = self.records.len();
        let every = n.div_ceil(max_rows.max(1)).max(1);
        for (i, r) in self.records.iter().enumerate() {
            if i % every != 0 && i + 1 != n {
                continue;
            }
            let _ = write!(s, "{:>6} {:>10.3e} {:>12.6}", r.step, r.learning_rate, r.total);
            for k in &names {
                let _ = write!(s, " {:>12.6}", r.components.get(*k).copied().unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, " {:>10.4}", r.grad_norm);
        }
        s
    }
}

#[cfg(test)]
mod tests;
