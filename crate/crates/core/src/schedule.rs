//! Learning-rate schedules.
//!
//! Fine-tuning uses a tri-stage shape (10% linear warmup from peak/100,
//! 40% hold at peak, 50% linear decay to 5% of peak); pretraining uses
//! linear warmup followed by linear decay to zero. Both are continuous at
//! stage boundaries and clamp beyond the final step.

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    TriStage { peak: f64, total_steps: u64 },
    WarmupDecay { peak: f64, total_steps: u64 },
}

const TRI_WARMUP_FRAC: f64 = 0.1;
const TRI_HOLD_FRAC: f64 = 0.4;
const TRI_INIT_SCALE: f64 = 0.01;
const TRI_FINAL_SCALE: f64 = 0.05;
const WD_WARMUP_FRAC: f64 = 0.1;

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::TriStage { peak, total_steps } => {
                let total = total_steps.max(1) as f64;
                let warmup = (total * TRI_WARMUP_FRAC).round().max(1.0);
                let hold_end = warmup + (total * TRI_HOLD_FRAC).round();
                let s = (step as f64).min(total);
                if s <= warmup {
                    let frac = s / warmup;
                    peak * (TRI_INIT_SCALE + (1.0 - TRI_INIT_SCALE) * frac)
                } else if s <= hold_end {
                    peak
                } else {
                    let decay_len = (total - hold_end).max(1.0);
                    let frac = (s - hold_end) / decay_len;
                    peak * (1.0 + (TRI_FINAL_SCALE - 1.0) * frac)
                }
            }
            LrSchedule::WarmupDecay { peak, total_steps } => {
                let total = total_steps.max(1) as f64;
                let warmup = (total * WD_WARMUP_FRAC).round().max(1.0);
                let s = (step as f64).min(total);
                if s <= warmup {
                    let frac = s / warmup;
                    peak * (TRI_INIT_SCALE + (1.0 - TRI_INIT_SCALE) * frac)
                } else {
                    let decay_len = (total - warmup).max(1.0);
                    peak * (1.0 - (s - warmup) / decay_len)
                }
            }
        }
    }
}
