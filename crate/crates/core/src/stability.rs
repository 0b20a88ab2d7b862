//! Decode-time danger gate and long-horizon stability metrics.

use std::fmt::{self, Write as _};

use crate::decode::DecodeTrace;
use crate::error::{Result, SphKvError};

/// Top-1 minus top-2 value; `+∞` with fewer than two entries.
pub fn margin(logits: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &l in logits {
        if l > a {
            b = a;
            a = l;
        } else if l > b {
            b = l;
        }
    }
    if logits.len() < 2 {
        f64::INFINITY
    } else {
        a - b
    }
}

pub const DANGER_CEILING: f64 = 10.0;

/// `drift / (margin + 1e-9)` clamped to `[0, 10]`.
pub fn danger_score(drift_bound: f64, margin: f64) -> f64 {
    if drift_bound <= 0.0 {
        return 0.0;
    }
    (drift_bound / (margin + 1e-9)).clamp(0.0, DANGER_CEILING)
}

// ── Gate ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub tau_drop: f64,
    pub tau_prot: f64,
    /// Logit scale of the drift bound; `None` means `1/√d`.
    pub alpha: Option<f64>,
}

impl GateConfig {
    pub fn new(tau_drop: f64, tau_prot: f64, alpha: Option<f64>) -> Result<Self> {
        if !(tau_drop < tau_prot) || alpha.is_some_and(|a| a <= 0.0) {
            return Err(SphKvError::Config(format!(
                "gate needs tau_drop < tau_prot and alpha > 0, got {tau_drop}, {tau_prot}, {alpha:?}"
            )));
        }
        Ok(Self { tau_drop, tau_prot, alpha })
    }

    pub fn alpha_for(&self, d: usize) -> f64 {
        self.alpha.unwrap_or(1.0 / (d as f64).sqrt())
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { tau_drop: 0.3, tau_prot: 0.7, alpha: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    Compressible,
    /// Initial mode before the danger score has left the band.
    #[default]
    Held,
    Protected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateAction {
    TierUpOrProtect,
    AllowDowntier,
    Hold,
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Compressible => "compressible",
            GateMode::Held => "held",
            GateMode::Protected => "protected",
        })
    }
}

impl fmt::Display for GateAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateAction::TierUpOrProtect => "protect",
            GateAction::AllowDowntier => "allow",
            GateAction::Hold => "hold",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateState {
    pub mode: GateMode,
    pub last_danger: f64,
}

impl GateState {
    pub fn is_protected(&self) -> bool {
        self.mode == GateMode::Protected
    }
}

/// Hysteretic update: at or above `tau_prot` protect, at or below `tau_drop`
/// release, anything in between keeps the previous mode.
pub fn gate_step(danger: f64, state: GateState, cfg: &GateConfig) -> (GateAction, GateState) {
    let (action, mode) = if danger >= cfg.tau_prot {
        (GateAction::TierUpOrProtect, GateMode::Protected)
    } else if danger <= cfg.tau_drop {
        (GateAction::AllowDowntier, GateMode::Compressible)
    } else {
        (GateAction::Hold, state.mode)
    };
    (action, GateState { mode, last_danger: danger })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateEvent {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub danger: f64,
    pub before: GateMode,
    pub after: GateMode,
    pub action: GateAction,
}

/// `step,state,danger,mode_before,mode_after,action`, with `state` as `layer:head`.
pub fn gate_log_csv(events: &[GateEvent]) -> String {
    let mut out = String::from("step,state,danger,mode_before,mode_after,action\n");
    for e in events {
        let _ = writeln!(out, "{},{}:{},{},{},{},{}", e.step, e.layer, e.head, e.danger, e.before, e.after, e.action);
    }
    out
}

// ── Stability metrics ───────────────────────────────────────────────────────

/// Mean over inputs of the across-seed population variance of a per-trace
/// metric. `grid[x][s]` is the metric of input `x` under seed `s`.
pub fn trajectory_sensitivity(grid: &[Vec<f64>]) -> Result<f64> {
    if grid.is_empty() {
        return Err(SphKvError::Empty("trajectory grid"));
    }
    let mut total = 0.0;
    for row in grid {
        if row.len() < 2 {
            return Err(SphKvError::Config("trajectory sensitivity needs at least two seeds".into()));
        }
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        total += row.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
    }
    Ok(total / grid.len() as f64)
}

/// Mean absolute length difference over paired inputs.
pub fn length_drift(lengths: &[usize], dense_lengths: &[usize]) -> Result<f64> {
    if lengths.len() != dense_lengths.len() {
        return Err(SphKvError::DimensionMismatch { expected: dense_lengths.len(), got: lengths.len() });
    }
    if lengths.is_empty() {
        return Err(SphKvError::Empty("length pairs"));
    }
    let sum: usize = lengths.iter().zip(dense_lengths).map(|(a, b)| a.abs_diff(*b)).sum();
    Ok(sum as f64 / lengths.len() as f64)
}

/// Fraction of episodes whose token sequence differs from the reference.
pub fn disagreement_rate(traces: &[&[usize]], reference: &[&[usize]]) -> Result<f64> {
    if traces.len() != reference.len() {
        return Err(SphKvError::DimensionMismatch { expected: reference.len(), got: traces.len() });
    }
    if traces.is_empty() {
        return Err(SphKvError::Empty("episodes"));
    }
    let differ = traces.iter().zip(reference).filter(|(a, b)| a != b).count();
    Ok(differ as f64 / traces.len() as f64)
}

/// Desk-scale failure predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailurePredicate {
    /// Stopped (EOS) before this many tokens.
    EarlyStop { min_len: usize },
    /// Ran to the cap without emitting EOS.
    NonTermination { max_len: usize },
    /// Top-1 token at this step differs from the reference.
    CriticalFlip { step: usize },
}

impl FailurePredicate {
    pub fn fails(&self, trace: &DecodeTrace, reference: &DecodeTrace) -> bool {
        match *self {
            FailurePredicate::EarlyStop { min_len } => trace.eos_hit && trace.tokens.len() < min_len,
            FailurePredicate::NonTermination { max_len } => !trace.eos_hit && trace.tokens.len() >= max_len,
            FailurePredicate::CriticalFlip { step } => trace.tokens.get(step) != reference.tokens.get(step),
        }
    }
}

/// Fraction of episodes flagged by any predicate.
pub fn failure_rate(
    episodes: &[(&DecodeTrace, &DecodeTrace)],
    predicates: &[FailurePredicate],
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(SphKvError::Empty("episodes"));
    }
    let failed = episodes
        .iter()
        .filter(|(t, r)| predicates.iter().any(|p| p.fails(t, r)))
        .count();
    Ok(failed as f64 / episodes.len() as f64)
}

/// One failure rate per budget point.
pub fn failure_curve(
    per_budget: &[Vec<(&DecodeTrace, &DecodeTrace)>],
    predicates: &[FailurePredicate],
) -> Result<Vec<f64>> {
    per_budget.iter().map(|eps| failure_rate(eps, predicates)).collect()
}
