//! Plain-text run configuration with `[section]` headers and `key = value`
//! lines.
//!
//! Emitting a [`RunConfig`] and parsing it back yields the same value, and the
//! emitted text is a fixed point of parse-then-emit. Unknown sections and keys
//! are errors.

use std::fmt::{self, Write as _};
use std::ops::Range;
use std::path::PathBuf;
use std::str::FromStr;

use crate::codec::TierTable;
use crate::controller::{ControllerConfig, LambdaChoice, SegmentWeights};
use crate::error::{Result, SphKvError};
use crate::frontier::SweepConfig;
use crate::stability::GateConfig;
use crate::workload::WorkloadConfig;

/// Default tier ladder: drop plus four angle/radius precisions.
pub const DEFAULT_TIERS: &str = "tier 0 0 0 0\ntier 1 3 6 8\ntier 2 5 8 8\ntier 3 7 10 8\ntier 4 10 12 8\n";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub workload: WorkloadConfig,
    pub tiers: TierTable,
    pub controller: ControllerConfig,
    /// Budget fraction used by single rollouts.
    pub rollout_budget: f64,
    /// Gate thresholds; `gate_enabled` decides whether rollouts use them.
    pub gate: GateConfig,
    pub gate_enabled: bool,
    pub sweep: SweepConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workload: WorkloadConfig::default(),
            tiers: TierTable::parse(DEFAULT_TIERS).expect("default tier ladder"),
            controller: ControllerConfig::default(),
            rollout_budget: 0.5,
            gate: GateConfig::default(),
            gate_enabled: false,
            sweep: SweepConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// The sweep configuration with the gate block applied.
    pub fn effective_sweep(&self) -> SweepConfig {
        let mut s = self.sweep.clone();
        s.gate = self.gate_enabled.then_some(self.gate);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        GateConfig::new(self.gate.tau_drop, self.gate.tau_prot, self.gate.alpha)?;
        if !(self.rollout_budget > 0.0) {
            return Err(cfg_err("controller.budget must be positive"));
        }
        if self.sweep.budgets.is_empty() || self.sweep.budgets.iter().any(|b| !(*b > 0.0)) {
            return Err(cfg_err("sweep.budgets must be a non-empty list of positive fractions"));
        }
        if self.sweep.seeds.is_empty() || self.sweep.variants.is_empty() {
            return Err(cfg_err("sweep.seeds and sweep.variants must be non-empty"));
        }
        if self.sweep.workers == 0 {
            return Err(cfg_err("sweep.workers must be at least 1"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut section = String::new();
        let mut tier_lines: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(cfg_err(format!("line {}: unknown section [{section}]", n + 1)));
                }
                if section == "tiers" {
                    tier_lines.get_or_insert_with(String::new);
                }
                continue;
            }
            if section == "tiers" {
                let buf = tier_lines.get_or_insert_with(String::new);
                buf.push_str(line);
                buf.push('\n');
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| cfg_err(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(&section, key, value)
                .map_err(|e| cfg_err(format!("line {}: {e}", n + 1)))?;
        }
        if let Some(t) = tier_lines {
            c.tiers = TierTable::parse(&t)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        let w = &mut self.workload;
        let ctrl = &mut self.controller;
        let s = &mut self.sweep;
        match (section, key) {
            ("workload", "model") => w.model = v.to_string(),
            ("workload", "d") => w.d = num(v)?,
            ("workload", "layers") => w.layers = num(v)?,
            ("workload", "heads") => w.heads = num(v)?,
            ("workload", "prefill_len") => w.prefill_len = num(v)?,
            ("workload", "decode_len") => w.decode_len = num(v)?,
            ("workload", "page_size") => w.page_size = num(v)?,
            ("workload", "prefix_end") => w.prefix_end = num(v)?,
            ("workload", "retrieved_end") => w.retrieved_end = num(v)?,
            ("workload", "outlier_frac") => w.outlier_frac = num(v)?,
            ("workload", "outlier_mult") => w.outlier_mult = num(v)?,
            ("workload", "vocab") => w.vocab = num(v)?,
            ("workload", "eos") => w.eos = opt(v, num)?,
            ("workload", "min_len") => w.min_len = num(v)?,
            ("workload", "max_len") => w.max_len = num(v)?,
            ("workload", "salient") => w.salient = num(v)?,
            ("workload", "salient_mult") => w.salient_mult = num(v)?,
            ("workload", "query_scale") => w.query_scale = num(v)?,
            ("workload", "recent_anchor_prob") => w.recent_anchor_prob = num(v)?,
            ("workload", "lm_gap") => w.lm_gap = num(v)?,
            ("workload", "lm_scale") => w.lm_scale = num(v)?,
            ("workload", "sampled") => w.sampled = num(v)?,
            ("workload", "temperature") => w.temperature = num(v)?,
            ("workload", "critical_steps") => w.critical_steps = list(v, num)?,
            ("workload", "seed") => w.seed = num(v)?,

            ("controller", "lambda") => {
                ctrl.lambda = match v {
                    "auto" => LambdaChoice::Auto,
                    x => LambdaChoice::Fixed(num(x)?),
                }
            }
            ("controller", "w_prefix") => ctrl.weights.prefix = num(v)?,
            ("controller", "w_retrieved") => ctrl.weights.retrieved = num(v)?,
            ("controller", "w_recent") => ctrl.weights.recent = num(v)?,
            ("controller", "alpha_theta") => ctrl.alpha_theta = num(v)?,
            ("controller", "alpha_r") => ctrl.alpha_r = num(v)?,
            ("controller", "protect") => ctrl.protect = list(v, span)?,
            ("controller", "budget") => self.rollout_budget = num(v)?,

            ("gate", "enabled") => self.gate_enabled = num(v)?,
            ("gate", "tau_drop") => self.gate.tau_drop = num(v)?,
            ("gate", "tau_prot") => self.gate.tau_prot = num(v)?,
            ("gate", "alpha") => self.gate.alpha = opt(v, num)?,

            ("sweep", "budgets") => s.budgets = list(v, num)?,
            ("sweep", "variants") => s.variants = list(v, num)?,
            ("sweep", "seeds") => s.seeds = list(v, num)?,
            ("sweep", "delta") => s.delta = num(v)?,
            ("sweep", "beta") => s.beta = num(v)?,
            ("sweep", "warmup") => s.warmup = num(v)?,
            ("sweep", "refresh_every") => s.refresh_every = num(v)?,
            ("sweep", "workers") => s.workers = num(v)?,
            ("sweep", "calibration_sample") => s.calibration_sample = num(v)?,
            ("sweep", "quantize_query") => s.quantize_query = num(v)?,

            ("output", "dir") => self.out_dir = PathBuf::from(v),
            ("", _) => return Err(format!("key `{key}` outside any section")),
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }
}

const SECTIONS: [&str; 6] = ["workload", "tiers", "controller", "gate", "sweep", "output"];

fn cfg_err(m: impl Into<String>) -> SphKvError {
    SphKvError::Config(m.into())
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn opt<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Option<T>, String> {
    if v == "none" || v == "auto" {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| f(p.trim())).collect()
}

fn span(v: &str) -> std::result::Result<Range<usize>, String> {
    let (a, b) = v.split_once("..").ok_or_else(|| format!("expected `start..end`, got `{v}`"))?;
    Ok(num(a)?..num(b)?)
}

fn join<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(",")
}

fn show_opt<T: fmt::Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = &self.workload;
        let mut o = String::new();
        let _ = (|| -> fmt::Result {
            writeln!(o, "[workload]")?;
            writeln!(o, "model = {}", w.model)?;
            writeln!(o, "d = {}", w.d)?;
            writeln!(o, "layers = {}", w.layers)?;
            writeln!(o, "heads = {}", w.heads)?;
            writeln!(o, "prefill_len = {}", w.prefill_len)?;
            writeln!(o, "decode_len = {}", w.decode_len)?;
            writeln!(o, "page_size = {}", w.page_size)?;
            writeln!(o, "prefix_end = {}", w.prefix_end)?;
            writeln!(o, "retrieved_end = {}", w.retrieved_end)?;
            writeln!(o, "outlier_frac = {}", w.outlier_frac)?;
            writeln!(o, "outlier_mult = {}", w.outlier_mult)?;
            writeln!(o, "vocab = {}", w.vocab)?;
            writeln!(o, "eos = {}", show_opt(&w.eos, "none"))?;
            writeln!(o, "min_len = {}", w.min_len)?;
            writeln!(o, "max_len = {}", w.max_len)?;
            writeln!(o, "salient = {}", w.salient)?;
            writeln!(o, "salient_mult = {}", w.salient_mult)?;
            writeln!(o, "query_scale = {}", w.query_scale)?;
            writeln!(o, "recent_anchor_prob = {}", w.recent_anchor_prob)?;
            writeln!(o, "lm_gap = {}", w.lm_gap)?;
            writeln!(o, "lm_scale = {}", w.lm_scale)?;
            writeln!(o, "sampled = {}", w.sampled)?;
            writeln!(o, "temperature = {}", w.temperature)?;
            writeln!(o, "critical_steps = {}", join(&w.critical_steps, |x| x.to_string()))?;
            writeln!(o, "seed = {}", w.seed)?;

            writeln!(o, "\n[tiers]")?;
            write!(o, "{}", self.tiers)?;

            let c = &self.controller;
            let SegmentWeights { prefix, retrieved, recent } = c.weights;
            writeln!(o, "\n[controller]")?;
            match c.lambda {
                LambdaChoice::Auto => writeln!(o, "lambda = auto")?,
                LambdaChoice::Fixed(l) => writeln!(o, "lambda = {l}")?,
            }
            writeln!(o, "w_prefix = {prefix}")?;
            writeln!(o, "w_retrieved = {retrieved}")?;
            writeln!(o, "w_recent = {recent}")?;
            writeln!(o, "alpha_theta = {}", c.alpha_theta)?;
            writeln!(o, "alpha_r = {}", c.alpha_r)?;
            writeln!(o, "protect = {}", join(&c.protect, |r| format!("{}..{}", r.start, r.end)))?;
            writeln!(o, "budget = {}", self.rollout_budget)?;

            writeln!(o, "\n[gate]")?;
            writeln!(o, "enabled = {}", self.gate_enabled)?;
            writeln!(o, "tau_drop = {}", self.gate.tau_drop)?;
            writeln!(o, "tau_prot = {}", self.gate.tau_prot)?;
            writeln!(o, "alpha = {}", show_opt(&self.gate.alpha, "auto"))?;

            let s = &self.sweep;
            writeln!(o, "\n[sweep]")?;
            writeln!(o, "budgets = {}", join(&s.budgets, |x| x.to_string()))?;
            writeln!(o, "variants = {}", join(&s.variants, |x| x.to_string()))?;
            writeln!(o, "seeds = {}", join(&s.seeds, |x| x.to_string()))?;
            writeln!(o, "delta = {}", s.delta)?;
            writeln!(o, "beta = {}", s.beta)?;
            writeln!(o, "warmup = {}", s.warmup)?;
            writeln!(o, "refresh_every = {}", s.refresh_every)?;
            writeln!(o, "workers = {}", s.workers)?;
            writeln!(o, "calibration_sample = {}", s.calibration_sample)?;
            writeln!(o, "quantize_query = {}", s.quantize_query)?;

            writeln!(o, "\n[output]")?;
            writeln!(o, "dir = {}", self.out_dir.display())
        })();
        f.write_str(&o)
    }
}

impl FromStr for RunConfig {
    type Err = SphKvError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontier::Variant;

    fn busy() -> RunConfig {
        let mut c = RunConfig::default();
        c.workload = WorkloadConfig::standard_panel();
        c.workload.eos = Some(3);
        c.workload.critical_steps = vec![5, 17];
        c.workload.outlier_frac = 0.1 + 0.2;
        c.controller.lambda = LambdaChoice::Fixed(1e-7);
        c.controller.protect = vec![0..4, 100..108];
        c.gate.alpha = Some(0.125);
        c.gate_enabled = true;
        c.sweep.variants = vec![Variant::Dense, Variant::Joint, Variant::Recon];
        c.sweep.quantize_query = true;
        c.out_dir = PathBuf::from("runs/a b");
        c
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_string();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_string(), text);
    }

    #[test]
    fn nondefault_round_trips_exactly() {
        let c = busy();
        let text = c.to_string();
        let back: RunConfig = text.parse().unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_string(), text);
        assert_eq!(back.workload.outlier_frac.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn missing_keys_take_defaults() {
        let c = RunConfig::parse("[workload]\nd = 32\n").unwrap();
        assert_eq!(c.workload.d, 32);
        assert_eq!(c.sweep, SweepConfig::default());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(RunConfig::parse("[workload]\ndim = 3\n").is_err());
        assert!(RunConfig::parse("[extras]\n").is_err());
        assert!(RunConfig::parse("d = 4\n").is_err());
        assert!(RunConfig::parse("[workload]\nd 4\n").is_err());
        assert!(RunConfig::parse("[sweep]\nvariants = dense,turbo\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("[gate]\ntau_drop = 0.9\ntau_prot = 0.1\n").is_err());
        assert!(RunConfig::parse("[workload]\nvocab = 1\n").is_err());
        assert!(RunConfig::parse("[sweep]\nworkers = 0\n").is_err());
        assert!(RunConfig::parse("[controller]\nprotect = 4\n").is_err());
    }

    #[test]
    fn effective_sweep_carries_gate() {
        let mut c = RunConfig::default();
        assert!(c.effective_sweep().gate.is_none());
        c.gate_enabled = true;
        assert_eq!(c.effective_sweep().gate, Some(c.gate));
    }
}
