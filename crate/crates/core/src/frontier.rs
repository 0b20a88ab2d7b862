//! Variant × budget sweeps, iso-quality filtering, Pareto envelopes and the
//! summary statistics read off them.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Mutex;

use crate::codec::TierTable;
use crate::controller::{
    allocate_greedy, allocate_keep_drop, allocate_quant_only, compute_features, rescore, score_all,
    solve_lambda, ControllerConfig, ControllerFeatures, Decision, LambdaChoice, ScoredState, StateId, TierAssignment,
};
use crate::decode::{decode_rollout, AppendPolicy, AttentionPath, Cache, DecodeTrace, RolloutConfig};
use crate::error::{Result, SphKvError};
use crate::stability::{disagreement_rate, length_drift, trajectory_sensitivity, FailurePredicate, GateConfig};
use crate::workload::{generate, quality_score, SyntheticWorkload, WorkloadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Dense,
    Joint,
    AngleOnly,
    RdOnly,
    KeepDrop,
    QuantOnly,
    Decoupled,
    Recon,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Dense,
        Variant::Joint,
        Variant::AngleOnly,
        Variant::RdOnly,
        Variant::KeepDrop,
        Variant::QuantOnly,
        Variant::Decoupled,
        Variant::Recon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Joint => "joint",
            Variant::AngleOnly => "angle-only",
            Variant::RdOnly => "rd-only",
            Variant::KeepDrop => "keep-drop",
            Variant::QuantOnly => "quant-only",
            Variant::Decoupled => "decoupled",
            Variant::Recon => "recon",
        }
    }

    pub fn path(self) -> AttentionPath {
        match self {
            Variant::Dense => AttentionPath::Dense,
            Variant::RdOnly | Variant::Recon => AttentionPath::Recon,
            _ => AttentionPath::Angle,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = SphKvError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| SphKvError::Config(format!("unknown variant `{s}`")))
    }
}

/// Long-horizon stability of one operating point against dense, over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StabilityRecord {
    pub disagree: f64,
    pub length_drift: f64,
    /// Across-seed variance of the token-agreement rate with dense.
    pub s_traj: f64,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub model: String,
    pub variant: Variant,
    pub context: usize,
    pub budget_idx: usize,
    pub budget_bits: u64,
    pub b_kv: f64,
    pub b_hbm: f64,
    pub s: f64,
    pub q: f64,
    pub feasible: bool,
    /// Mean fraction of prefill states kept.
    pub kept_frac: f64,
    pub stability: StabilityRecord,
}

impl OperatingPoint {
    /// A bare `(b_kv, s)` point, handy for fixtures.
    pub fn at(variant: Variant, budget_idx: usize, b_kv: f64, s: f64, q: f64) -> Self {
        Self {
            model: String::new(),
            variant,
            context: 0,
            budget_idx,
            budget_bits: 0,
            b_kv,
            b_hbm: 0.0,
            s,
            q,
            feasible: true,
            kept_frac: 1.0,
            stability: StabilityRecord::default(),
        }
    }
}

// ── Frontier statistics ─────────────────────────────────────────────────────

/// Points with `q ≥ q_star − delta`, in input order.
pub fn iso_quality_filter(points: &[OperatingPoint], q_star: f64, delta: f64) -> Vec<OperatingPoint> {
    points.iter().filter(|p| p.q >= q_star - delta).cloned().collect()
}

/// Indices of the non-dominated `(b, s)` points (lower b, higher s preferred),
/// sorted by ascending b, then input order. Exact duplicates survive together.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
    let mut out = Vec::new();
    let mut best_lower = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let b = points[order[i]].0;
        let mut j = i;
        let mut group_max = f64::NEG_INFINITY;
        while j < order.len() && points[order[j]].0 == b {
            group_max = group_max.max(points[order[j]].1);
            j += 1;
        }
        if group_max > best_lower {
            out.extend(order[i..j].iter().copied().filter(|&k| points[k].1 == group_max));
            best_lower = group_max;
        }
        i = j;
    }
    out
}

/// Non-dominated points in the `(b_kv, s)` plane, by ascending `b_kv`.
pub fn pareto_envelope(points: &[OperatingPoint]) -> Vec<OperatingPoint> {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.b_kv, p.s)).collect();
    pareto_indices(&xy).into_iter().map(|i| points[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gammas {
    /// Best retained throughput over dense.
    pub gamma_s: Option<f64>,
    /// Smallest resident budget over dense among retained points at least as
    /// fast as dense.
    pub gamma_m: Option<f64>,
}

/// `retained` and `dense` are `(b_kv, s)` pairs.
pub fn gamma_summaries(retained: &[(f64, f64)], dense: (f64, f64)) -> Gammas {
    let (b_d, s_d) = dense;
    let gamma_s = retained.iter().map(|p| p.1 / s_d).max_by(f64::total_cmp);
    let gamma_m = retained.iter().filter(|p| p.1 >= s_d).map(|p| p.0 / b_d).min_by(f64::total_cmp);
    Gammas { gamma_s, gamma_m }
}

fn star_order(a: &OperatingPoint, b: &OperatingPoint) -> Ordering {
    // Greater means preferred.
    (a.s / a.b_kv)
        .total_cmp(&(b.s / b.b_kv))
        .then(a.s.total_cmp(&b.s))
        .then(b.b_kv.total_cmp(&a.b_kv))
        .then(b.b_hbm.total_cmp(&a.b_hbm))
        .then(b.budget_idx.cmp(&a.budget_idx))
}

/// Envelope point with the best throughput per resident byte. Ties go to larger
/// s, then smaller b_kv, smaller b_hbm and the smallest budget index.
pub fn representative_point(envelope: &[OperatingPoint]) -> Result<&OperatingPoint> {
    envelope
        .iter()
        .reduce(|best, p| if star_order(p, best) == Ordering::Greater { p } else { best })
        .ok_or(SphKvError::Empty("envelope"))
}

/// `Ψ = q + β·ln s`.
pub fn psi(q: f64, s: f64, beta: f64) -> f64 {
    q + beta * s.ln()
}

/// `Ψ_joint − max(Ψ_keepdrop, Ψ_quant, Ψ_decoupled)` among points at one budget.
pub fn synergy_gap(points: &[OperatingPoint], budget_idx: usize, beta: f64) -> Result<f64> {
    let find = |v: Variant| {
        points
            .iter()
            .find(|p| p.variant == v && p.budget_idx == budget_idx && p.feasible)
            .ok_or_else(|| SphKvError::Config(format!("no feasible {v} point at budget {budget_idx}")))
    };
    let score = |p: &OperatingPoint| {
        if p.s > 0.0 {
            Ok(psi(p.q, p.s, beta))
        } else {
            Err(SphKvError::Config(format!("{} throughput must be positive", p.variant)))
        }
    };
    let joint = score(find(Variant::Joint)?)?;
    let mut best = f64::NEG_INFINITY;
    for v in [Variant::KeepDrop, Variant::QuantOnly, Variant::Decoupled] {
        best = best.max(score(find(v)?)?);
    }
    Ok(joint - best)
}

/// `n` fractions spaced geometrically from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect(),
    }
}

// ── Sweep ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Budgets as fractions of the dense key bits `N·d·16`.
    pub budgets: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub delta: f64,
    pub beta: f64,
    pub warmup: usize,
    pub refresh_every: usize,
    pub gate: Option<GateConfig>,
    pub workers: usize,
    pub calibration_sample: usize,
    /// Code queries at the key tier instead of keeping them exact.
    pub quantize_query: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: geometric_grid(0.05, 1.0, 8),
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            delta: 0.8,
            beta: 5.0,
            warmup: 8,
            refresh_every: 16,
            gate: None,
            workers: 1,
            calibration_sample: 2048,
            quantize_query: false,
        }
    }
}

/// Dense key bits of the prefill, the 100% budget.
pub fn dense_key_bits(c: &WorkloadConfig) -> u64 {
    (c.layers * c.heads * c.prefill_len * c.d) as u64 * 16
}

/// Everything a variant needs from one seed's prefill.
pub struct PreparedSeed {
    pub workload: SyntheticWorkload,
    pub tiers: TierTable,
    pub features: ControllerFeatures,
    pub scored: Vec<ScoredState>,
}

pub fn prepare_seed(
    wcfg: &WorkloadConfig,
    tiers: &TierTable,
    ctrl: &ControllerConfig,
    seed: u64,
    calibration_sample: usize,
) -> Result<PreparedSeed> {
    let workload = generate(wcfg, seed)?;
    let mut tiers = tiers.clone();
    if !tiers.is_calibrated() {
        tiers.calibrate(&workload.calibration_sample(calibration_sample), seed)?;
    }
    let features = compute_features(&workload.prefill_attention(), wcfg.d, workload.segments, ctrl)?;
    let scored = score_all(&workload.states(), |id| ctrl.is_protected(id.token), &features, &tiers, 0.0)?;
    Ok(PreparedSeed { workload, tiers, features, scored })
}

/// Allocation and append policy of a compressed variant at a bit budget.
pub fn plan_variant(
    variant: Variant,
    prep: &PreparedSeed,
    ctrl: &ControllerConfig,
    budget_bits: u64,
) -> Result<(TierAssignment, AppendPolicy)> {
    let d = prep.workload.config.d;
    let tiers = &prep.tiers;
    let all: Vec<u8> = tiers.tiers().iter().map(|t| t.id).collect();
    let max = tiers.max_tier().id;
    let lambda = match ctrl.lambda {
        LambdaChoice::Fixed(l) => l,
        LambdaChoice::Auto => solve_lambda(&prep.scored, budget_bits),
    };
    let mut scored = prep.scored.clone();
    rescore(&mut scored, lambda);
    let scored_policy = |cands: Vec<u8>| AppendPolicy::scored(prep.features.clone(), lambda, cands);
    match variant {
        Variant::Dense => Err(SphKvError::Config("dense has no allocation".into())),
        Variant::Joint | Variant::RdOnly | Variant::Recon => {
            Ok((allocate_greedy(&scored, tiers, d, budget_bits)?, scored_policy(all)))
        }
        Variant::KeepDrop => Ok((allocate_keep_drop(&scored, tiers, d, budget_bits)?, scored_policy(vec![0, max]))),
        Variant::QuantOnly => {
            Ok((allocate_quant_only(&scored, tiers, d, budget_bits)?, scored_policy((1..=max).collect())))
        }
        Variant::AngleOnly => {
            let n = scored.len() as u64;
            let tier = (1..=max)
                .rev()
                .find(|&t| n * tiers.rate_bits(t, d) <= budget_bits)
                .ok_or(SphKvError::InfeasibleBudget { demand: n * tiers.rate_bits(1, d), budget: budget_bits })?;
            let a = scored.iter().map(|s| (s.id, Decision::keep(tier, false).with_nu(s.nu_at(tier)))).collect();
            Ok((a, AppendPolicy::fixed(tier)))
        }
        Variant::Decoupled => Ok((allocate_decoupled(&scored, tiers, d, budget_bits)?, scored_policy(all))),
    }
}

/// Two-stage baseline: retention first (keep the states that lose the most
/// when dropped, as many as fit at the middle tier), then quantization of the
/// kept set by down-tiering from the top tier.
pub fn allocate_decoupled(
    scored: &[ScoredState],
    tiers: &TierTable,
    d: usize,
    budget_bits: u64,
) -> Result<TierAssignment> {
    let mid = tiers.tiers()[(tiers.len()) / 2].id.max(1);
    let slots = (budget_bits / tiers.rate_bits(mid, d)) as usize;
    let mut order: Vec<&ScoredState> = scored.iter().collect();
    order.sort_by(|a, b| b.protected.cmp(&a.protected).then(b.distortion[0].total_cmp(&a.distortion[0])).then(a.id.cmp(&b.id)));
    let kept: Vec<ScoredState> = order.iter().take(slots).map(|s| (*s).clone()).collect();
    let protected = scored.iter().filter(|s| s.protected).count() as u64;
    if protected as usize > slots {
        return Err(SphKvError::InfeasibleProtection { demand: protected * tiers.rate_bits(mid, d), budget: budget_bits });
    }
    let mut out = allocate_quant_only(&kept, tiers, d, budget_bits)?;
    for s in order.iter().skip(slots) {
        out.insert(s.id, Decision::dropped().with_nu(s.nu));
    }
    Ok(out)
}

/// Result of one (variant, budget, seed) rollout.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub variant: Variant,
    pub budget_idx: usize,
    pub seed: u64,
    pub feasible: bool,
    pub b_kv: f64,
    pub b_hbm: f64,
    pub s: f64,
    pub q: f64,
    pub kept_frac: f64,
    pub tokens: Vec<usize>,
    pub eos_hit: bool,
    pub failed: bool,
}

/// Rollout settings a sweep uses for one variant path.
pub fn rollout_config(path: AttentionPath, wcfg: &WorkloadConfig, sweep: &SweepConfig) -> RolloutConfig {
    RolloutConfig {
        warmup: sweep.warmup.min(wcfg.decode_len.saturating_sub(1)),
        refresh_every: sweep.refresh_every,
        gate: sweep.gate,
        quantize_query: sweep.quantize_query,
        ..RolloutConfig::new(path, wcfg.decode_len)
    }
}

pub fn failure_predicates(c: &WorkloadConfig) -> Vec<FailurePredicate> {
    let mut out = Vec::new();
    if c.min_len > 0 {
        out.push(FailurePredicate::EarlyStop { min_len: c.min_len });
    }
    if c.eos.is_some() {
        out.push(FailurePredicate::NonTermination { max_len: c.max_len });
    }
    out.extend(c.critical_steps.iter().map(|&step| FailurePredicate::CriticalFlip { step }));
    out
}

/// Dense reference rollout of a prepared seed.
pub fn dense_reference(prep: &PreparedSeed, sweep: &SweepConfig) -> Result<DecodeTrace> {
    let w = &prep.workload;
    let mut cache = Cache::dense(w)?;
    decode_rollout(w, &mut cache, &AppendPolicy::fixed(0), &rollout_config(AttentionPath::Dense, &w.config, sweep))
}

fn record_of(variant: Variant, budget_idx: usize, seed: u64, t: &DecodeTrace, dense: &DecodeTrace, kept: f64, preds: &[FailurePredicate]) -> RunRecord {
    RunRecord {
        variant,
        budget_idx,
        seed,
        feasible: true,
        b_kv: t.b_kv,
        b_hbm: t.b_hbm().unwrap_or(0.0),
        s: t.s().unwrap_or(0.0),
        q: quality_score(t, dense),
        kept_frac: kept,
        tokens: t.tokens.clone(),
        eos_hit: t.eos_hit,
        failed: preds.iter().any(|p| p.fails(t, dense)),
    }
}

/// A compressed variant's plan at one budget, or `None` when the budget is
/// infeasible for it.
struct Planned {
    assignment: TierAssignment,
    policy: AppendPolicy,
}

fn plan_or_infeasible(variant: Variant, prep: &PreparedSeed, ctrl: &ControllerConfig, budget_bits: u64) -> Result<Option<Planned>> {
    match plan_variant(variant, prep, ctrl, budget_bits) {
        Ok((assignment, policy)) => {
            debug_assert!(assignment.check(&prep.tiers, prep.workload.config.d, budget_bits).is_ok());
            Ok(Some(Planned { assignment, policy }))
        }
        Err(SphKvError::InfeasibleProtection { .. } | SphKvError::InfeasibleBudget { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Everything a rollout depends on: two jobs with equal keys decode the same
/// tokens through the same bytes.
fn plan_key(path: AttentionPath, p: &Planned) -> (AttentionPath, Vec<(StateId, bool, u8, bool)>, Vec<u8>, u64, bool) {
    let decisions = p.assignment.iter().map(|(id, d)| (*id, d.retained, d.tier, d.protected)).collect();
    (path, decisions, p.policy.candidates.clone(), p.policy.lambda.to_bits(), p.policy.features.is_some())
}

fn infeasible_record(variant: Variant, budget_idx: usize, seed: u64) -> RunRecord {
    RunRecord {
        variant,
        budget_idx,
        seed,
        feasible: false,
        b_kv: 0.0,
        b_hbm: 0.0,
        s: 0.0,
        q: 0.0,
        kept_frac: 0.0,
        tokens: Vec::new(),
        eos_hit: false,
        failed: true,
    }
}

#[allow(clippy::too_many_arguments)]
fn execute(
    variant: Variant,
    budget_idx: usize,
    plan: &Planned,
    prep: &PreparedSeed,
    dense: &DecodeTrace,
    sweep: &SweepConfig,
    seed: u64,
) -> Result<RunRecord> {
    let w = &prep.workload;
    let kept = plan.assignment.retained() as f64 / plan.assignment.len().max(1) as f64;
    let mut cache = Cache::paged(w, &plan.assignment, prep.tiers.clone())?;
    let t = decode_rollout(w, &mut cache, &plan.policy, &rollout_config(variant.path(), &w.config, sweep))?;
    Ok(record_of(variant, budget_idx, seed, &t, dense, kept, &failure_predicates(&w.config)))
}

/// One compressed rollout.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    variant: Variant,
    budget_idx: usize,
    budget_bits: u64,
    prep: &PreparedSeed,
    dense: &DecodeTrace,
    ctrl: &ControllerConfig,
    sweep: &SweepConfig,
    seed: u64,
) -> Result<RunRecord> {
    match plan_or_infeasible(variant, prep, ctrl, budget_bits)? {
        Some(plan) => execute(variant, budget_idx, &plan, prep, dense, sweep, seed),
        None => Ok(infeasible_record(variant, budget_idx, seed)),
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Aggregates per-seed records of one (variant, budget) into an operating
/// point: q and bytes averaged, s as the median.
pub fn aggregate(
    model: &str,
    context: usize,
    budget_bits: u64,
    runs: &[&RunRecord],
    dense: &[&RunRecord],
) -> Result<OperatingPoint> {
    let first = runs.first().ok_or(SphKvError::Empty("runs"))?;
    let feasible = runs.iter().all(|r| r.feasible);
    let mut p = OperatingPoint {
        model: model.to_string(),
        variant: first.variant,
        context,
        budget_idx: first.budget_idx,
        budget_bits,
        b_kv: mean(&runs.iter().map(|r| r.b_kv).collect::<Vec<_>>()),
        b_hbm: mean(&runs.iter().map(|r| r.b_hbm).collect::<Vec<_>>()),
        s: median(&mut runs.iter().map(|r| r.s).collect::<Vec<_>>()),
        q: mean(&runs.iter().map(|r| r.q).collect::<Vec<_>>()),
        feasible,
        kept_frac: mean(&runs.iter().map(|r| r.kept_frac).collect::<Vec<_>>()),
        stability: StabilityRecord::default(),
    };
    if feasible && runs.len() == dense.len() {
        let toks: Vec<&[usize]> = runs.iter().map(|r| r.tokens.as_slice()).collect();
        let refs: Vec<&[usize]> = dense.iter().map(|r| r.tokens.as_slice()).collect();
        let lens: Vec<usize> = toks.iter().map(|t| t.len()).collect();
        let dlens: Vec<usize> = refs.iter().map(|t| t.len()).collect();
        let agreement: Vec<f64> = toks
            .iter()
            .zip(&refs)
            .map(|(a, b)| {
                let n = a.len().max(b.len()).max(1);
                a.iter().zip(b.iter()).filter(|(x, y)| x == y).count() as f64 / n as f64
            })
            .collect();
        p.stability = StabilityRecord {
            disagree: disagreement_rate(&toks, &refs)?,
            length_drift: length_drift(&lens, &dlens)?,
            s_traj: if agreement.len() >= 2 { trajectory_sensitivity(&[agreement])? } else { 0.0 },
            failure_rate: runs.iter().filter(|r| r.failed).count() as f64 / runs.len() as f64,
        };
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<OperatingPoint>,
    pub runs: Vec<RunRecord>,
}

/// Runs every (variant, budget) over every seed and aggregates to operating
/// points. Within one seed, rollouts are spread over `sweep.workers` threads.
pub fn run_sweep(
    wcfg: &WorkloadConfig,
    tiers: &TierTable,
    ctrl: &ControllerConfig,
    sweep: &SweepConfig,
) -> Result<SweepResult> {
    if sweep.budgets.is_empty() || sweep.seeds.is_empty() || sweep.variants.is_empty() {
        return Err(SphKvError::Empty("sweep grid"));
    }
    let full = dense_key_bits(wcfg);
    let budget_bits: Vec<u64> = sweep.budgets.iter().map(|f| (f * full as f64).floor() as u64).collect();
    let mut runs = Vec::new();
    for &seed in &sweep.seeds {
        let prep = prepare_seed(wcfg, tiers, ctrl, seed, sweep.calibration_sample)?;
        let dense = dense_reference(&prep, sweep)?;
        let preds = failure_predicates(&prep.workload.config);
        let dense_rec = record_of(Variant::Dense, 0, seed, &dense, &dense, 1.0, &preds);
        if sweep.variants.contains(&Variant::Dense) {
            for b in 0..budget_bits.len() {
                runs.push(RunRecord { budget_idx: b, ..dense_rec.clone() });
            }
        }
        let jobs: Vec<(Variant, usize)> = sweep
            .variants
            .iter()
            .filter(|v| **v != Variant::Dense)
            .flat_map(|&v| (0..budget_bits.len()).map(move |b| (v, b)))
            .collect();
        // jobs whose plans coincide share one rollout
        let mut plans = Vec::with_capacity(jobs.len());
        let mut source = Vec::with_capacity(jobs.len());
        let mut keys = Vec::new();
        for (i, &(v, b)) in jobs.iter().enumerate() {
            let plan = plan_or_infeasible(v, &prep, ctrl, budget_bits[b])?;
            let src = plan.as_ref().map(|p| {
                let key = plan_key(v.path(), p);
                match keys.iter().find(|(k, _)| *k == key) {
                    Some(&(_, j)) => j,
                    None => {
                        keys.push((key, i));
                        i
                    }
                }
            });
            plans.push(plan);
            source.push(src);
        }
        let unique: Vec<usize> = (0..jobs.len()).filter(|&i| source[i] == Some(i)).collect();
        let next = Mutex::new(0usize);
        let results = Mutex::new(Vec::new());
        let workers = sweep.workers.clamp(1, unique.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = {
                        let mut n = next.lock().unwrap();
                        let i = *n;
                        *n += 1;
                        i
                    };
                    let Some(&i) = unique.get(idx) else { break };
                    let (v, b) = jobs[i];
                    let plan = plans[i].as_ref().expect("unique jobs are feasible");
                    let r = execute(v, b, plan, &prep, &dense, sweep, seed);
                    results.lock().unwrap().push((i, r));
                });
            }
        });
        let mut done: Vec<Option<RunRecord>> = vec![None; jobs.len()];
        for (i, r) in results.into_inner().unwrap() {
            done[i] = Some(r?);
        }
        for (i, &(v, b)) in jobs.iter().enumerate() {
            runs.push(match source[i] {
                Some(j) => RunRecord { variant: v, budget_idx: b, ..done[j].clone().expect("source job ran") },
                None => infeasible_record(v, b, seed),
            });
        }
    }

    let mut points = Vec::new();
    for &v in &sweep.variants {
        for (b, &bits) in budget_bits.iter().enumerate() {
            let group: Vec<&RunRecord> = runs.iter().filter(|r| r.variant == v && r.budget_idx == b).collect();
            let dense: Vec<&RunRecord> = sweep
                .seeds
                .iter()
                .filter_map(|&s| runs.iter().find(|r| r.variant == Variant::Dense && r.seed == s))
                .collect();
            let dense = if dense.len() == group.len() { dense } else { Vec::new() };
            points.push(aggregate(&wcfg.model, wcfg.prefill_len, bits, &group, &dense)?);
        }
    }
    Ok(SweepResult { points, runs })
}

// ── Reporting ───────────────────────────────────────────────────────────────

/// Flags derived from a point set: iso-quality retention, per-variant envelope
/// membership and the representative point of the primary variant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontierFlags {
    pub retained: Vec<bool>,
    pub on_envelope: Vec<bool>,
    pub is_star: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelSummary {
    pub model: String,
    pub context: usize,
    pub gammas: Gammas,
    pub delta_joint: Option<f64>,
    pub star: Option<OperatingPoint>,
}

/// Points of the variant the summary is about: Joint when present, otherwise
/// every variant.
fn primary(points: &[OperatingPoint]) -> Vec<usize> {
    let joint: Vec<usize> = (0..points.len()).filter(|&i| points[i].variant == Variant::Joint).collect();
    if joint.is_empty() {
        (0..points.len()).collect()
    } else {
        joint
    }
}

pub fn frontier_flags(points: &[OperatingPoint], delta: f64) -> FrontierFlags {
    let n = points.len();
    let q_star = points
        .iter()
        .filter(|p| p.variant == Variant::Dense)
        .map(|p| p.q)
        .fold(f64::NEG_INFINITY, f64::max);
    let q_star = if q_star.is_finite() { q_star } else { 100.0 };
    let retained: Vec<bool> = points.iter().map(|p| p.feasible && p.q >= q_star - delta).collect();
    let mut on_envelope = vec![false; n];
    let mut variants: Vec<Variant> = points.iter().map(|p| p.variant).collect();
    variants.sort();
    variants.dedup();
    for v in variants {
        let idx: Vec<usize> = (0..n).filter(|&i| points[i].variant == v && retained[i]).collect();
        let xy: Vec<(f64, f64)> = idx.iter().map(|&i| (points[i].b_kv, points[i].s)).collect();
        for k in pareto_indices(&xy) {
            on_envelope[idx[k]] = true;
        }
    }
    let mut is_star = vec![false; n];
    let env: Vec<usize> = primary(points).into_iter().filter(|&i| on_envelope[i]).collect();
    if let Some(best) = env.iter().copied().reduce(|a, b| if star_order(&points[b], &points[a]) == Ordering::Greater { b } else { a }) {
        is_star[best] = true;
    }
    FrontierFlags { retained, on_envelope, is_star }
}

pub fn panel_summary(points: &[OperatingPoint], delta: f64, beta: f64) -> PanelSummary {
    let flags = frontier_flags(points, delta);
    let (model, context) = points.first().map(|p| (p.model.clone(), p.context)).unwrap_or_default();
    let dense = points
        .iter()
        .filter(|p| p.variant == Variant::Dense)
        .max_by(|a, b| a.q.total_cmp(&b.q).then(b.budget_idx.cmp(&a.budget_idx)));
    let retained: Vec<(f64, f64)> = primary(points)
        .into_iter()
        .filter(|&i| flags.retained[i])
        .map(|i| (points[i].b_kv, points[i].s))
        .collect();
    let gammas = dense.map(|d| gamma_summaries(&retained, (d.b_kv, d.s))).unwrap_or_default();
    let star = flags.is_star.iter().position(|&x| x).map(|i| points[i].clone());
    let delta_joint = star.as_ref().and_then(|s| synergy_gap(points, s.budget_idx, beta).ok());
    PanelSummary { model, context, gammas, delta_joint, star }
}

/// `model,variant,L,budget_idx,b_kv,b_hbm,s,q,retained,on_envelope,is_star`
pub fn frontier_csv(points: &[OperatingPoint], delta: f64) -> String {
    let flags = frontier_flags(points, delta);
    let mut out = String::from("model,variant,L,budget_idx,b_kv,b_hbm,s,q,retained,on_envelope,is_star\n");
    for (i, p) in points.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            p.model,
            p.variant,
            p.context,
            p.budget_idx,
            p.b_kv,
            p.b_hbm,
            p.s,
            p.q,
            u8::from(flags.retained[i]),
            u8::from(flags.on_envelope[i]),
            u8::from(flags.is_star[i])
        );
    }
    out
}

/// `model,L,gamma_s,gamma_m,delta_joint`; absent values are left empty.
pub fn summary_csv(summaries: &[PanelSummary]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("model,L,gamma_s,gamma_m,delta_joint\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.model,
            s.context,
            opt(s.gammas.gamma_s),
            opt(s.gammas.gamma_m),
            opt(s.delta_joint)
        );
    }
    out
}

/// Parsed frontier CSV row: the point plus its recorded flags.
pub fn parse_frontier_csv(text: &str) -> Result<Vec<(OperatingPoint, [bool; 3])>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(SphKvError::Empty("frontier csv"))?;
    if header.trim() != "model,variant,L,budget_idx,b_kv,b_hbm,s,q,retained,on_envelope,is_star" {
        return Err(SphKvError::Config(format!("unexpected frontier header `{header}`")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| SphKvError::Config(format!("bad number `{s}`: {e}")));
    let int = |s: &str| s.parse::<usize>().map_err(|e| SphKvError::Config(format!("bad integer `{s}`: {e}")));
    let flag = |s: &str| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(SphKvError::Config(format!("bad flag `{s}`"))),
    };
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(SphKvError::Config(format!("frontier row needs 11 fields: `{line}`")));
        }
        let p = OperatingPoint {
            model: f[0].to_string(),
            variant: f[1].parse()?,
            context: int(f[2])?,
            budget_idx: int(f[3])?,
            budget_bits: 0,
            b_kv: num(f[4])?,
            b_hbm: num(f[5])?,
            s: num(f[6])?,
            q: num(f[7])?,
            feasible: true,
            kept_frac: 0.0,
            stability: StabilityRecord::default(),
        };
        out.push((p, [flag(f[8])?, flag(f[9])?, flag(f[10])?]));
    }
    Ok(out)
}

/// Checks a finished sweep for violated invariants; each violation is one
/// message. Checked: ranges of q, bytes, s and stability metrics; Dense scoring
/// exactly 100 against itself; recon-path variants paying strictly more HBM
/// traffic than Joint at the same budget (both pack Joint's allocation).
pub fn sweep_invariants(result: &SweepResult) -> Vec<String> {
    let mut bad = Vec::new();
    for p in result.points.iter().filter(|p| p.feasible) {
        let at = format!("{} budget {}", p.variant, p.budget_idx);
        if !(0.0..=100.0).contains(&p.q) {
            bad.push(format!("{at}: q {} outside [0, 100]", p.q));
        }
        if !(p.b_kv.is_finite() && p.b_kv >= 0.0 && p.b_hbm.is_finite() && p.b_hbm >= 0.0 && p.s.is_finite() && p.s >= 0.0) {
            bad.push(format!("{at}: non-finite or negative b_kv/b_hbm/s"));
        }
        let st = &p.stability;
        if ![st.disagree, st.failure_rate].iter().all(|x| (0.0..=1.0).contains(x))
            || !(0.0..=0.25).contains(&st.s_traj)
            || st.length_drift < 0.0
        {
            bad.push(format!("{at}: stability metrics out of range {st:?}"));
        }
        if p.variant == Variant::Dense && p.q != 100.0 {
            bad.push(format!("{at}: dense scores {} against itself", p.q));
        }
    }
    let find = |v: Variant, b: usize| result.points.iter().find(|p| p.variant == v && p.budget_idx == b && p.feasible);
    for p in result.points.iter().filter(|p| p.feasible && p.variant.path() == AttentionPath::Recon) {
        if let Some(j) = find(Variant::Joint, p.budget_idx) {
            if p.b_hbm <= j.b_hbm {
                bad.push(format!("{} budget {}: b_hbm {} does not exceed joint's {}", p.variant, p.budget_idx, p.b_hbm, j.b_hbm));
            }
        }
    }
    bad
}

/// Infeasible points are excluded before reporting.
pub fn feasible_points(points: &[OperatingPoint]) -> Vec<OperatingPoint> {
    points.iter().filter(|p| p.feasible).cloned().collect()
}
