//! Rate–distortion retention controller.
//!
//! Each cache state (token × layer × head) is scored per tier with a distortion
//! proxy `D(t)` and rate `R(t)`; the allocators then choose keep/drop and tier
//! jointly under a hard bit budget.

mod alloc;
mod stats;

pub use alloc::{
    allocate_greedy, allocate_keep_drop, allocate_quant_only, downtier_before_drop, rescore, score_all,
    solve_lambda, LambdaChoice,
};
pub use stats::{head_allocation_stats, segment_stats, HeadAllocation, SegmentStat};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use crate::codec::TierTable;
use crate::error::{Result, SphKvError};

/// One cache state. Ordering is `(layer, head, token)`, the canonical tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateId {
    pub layer: usize,
    pub head: usize,
    pub token: usize,
}

impl StateId {
    pub fn new(layer: usize, head: usize, token: usize) -> Self {
        Self { layer, head, token }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentLabel {
    Prefix,
    Retrieved,
    Recent,
}

impl SegmentLabel {
    pub const ALL: [SegmentLabel; 3] = [SegmentLabel::Prefix, SegmentLabel::Retrieved, SegmentLabel::Recent];

    pub fn name(self) -> &'static str {
        match self {
            SegmentLabel::Prefix => "prefix",
            SegmentLabel::Retrieved => "retrieved",
            SegmentLabel::Recent => "recent",
        }
    }
}

/// Contiguous prefix / retrieved / recent spans over the prefill. Tokens past
/// the prefill (decode appends) are recent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segments {
    pub prefix_end: usize,
    pub retrieved_end: usize,
    pub len: usize,
}

impl Segments {
    pub fn new(prefix_end: usize, retrieved_end: usize, len: usize) -> Result<Self> {
        if prefix_end > retrieved_end || retrieved_end > len {
            return Err(SphKvError::Config(format!(
                "segment spans {prefix_end}/{retrieved_end}/{len} do not partition the prefill"
            )));
        }
        Ok(Self { prefix_end, retrieved_end, len })
    }

    pub fn label(&self, token: usize) -> SegmentLabel {
        if token < self.prefix_end {
            SegmentLabel::Prefix
        } else if token < self.retrieved_end {
            SegmentLabel::Retrieved
        } else {
            SegmentLabel::Recent
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentWeights {
    pub prefix: f64,
    pub retrieved: f64,
    pub recent: f64,
}

impl SegmentWeights {
    pub fn get(&self, s: SegmentLabel) -> f64 {
        match s {
            SegmentLabel::Prefix => self.prefix,
            SegmentLabel::Retrieved => self.retrieved,
            SegmentLabel::Recent => self.recent,
        }
    }
}

impl Default for SegmentWeights {
    fn default() -> Self {
        Self { prefix: 1.0, retrieved: 1.5, recent: 2.0 }
    }
}

/// Prefill attention statistics per head, gathered from a handful of probe
/// queries: `logits[head_index][probe]` holds the probe's logits over all of
/// that head's prefill keys.
#[derive(Debug, Clone)]
pub struct PrefillAttention {
    pub layers: usize,
    pub heads: usize,
    pub logits: Vec<Vec<Vec<f64>>>,
    pub query_norms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadFeatures {
    /// Reuse proxy û in [0, 1].
    pub reuse: f64,
    /// Stability proxy ŝ in [0, 1].
    pub stability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerFeatures {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub prefill_len: usize,
    pub segments: Segments,
    pub weights: SegmentWeights,
    pub alpha_theta: f64,
    pub alpha_r: f64,
    /// Query-norm estimate r_q.
    pub query_norm: f64,
    pub head_features: Vec<HeadFeatures>,
}

impl ControllerFeatures {
    pub fn head(&self, layer: usize, head: usize) -> &HeadFeatures {
        &self.head_features[layer * self.heads + head]
    }

    /// Token age `T_p - i`, zero for decode appends.
    pub fn age(&self, token: usize) -> usize {
        self.prefill_len.saturating_sub(token)
    }

    pub fn segment_weight(&self, token: usize) -> f64 {
        self.weights.get(self.segments.label(token))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub lambda: LambdaChoice,
    pub weights: SegmentWeights,
    pub alpha_theta: f64,
    pub alpha_r: f64,
    /// Token spans protected in every head.
    pub protect: Vec<Range<usize>>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaChoice::Auto,
            weights: SegmentWeights::default(),
            alpha_theta: 1.0,
            alpha_r: 1.0,
            protect: vec![0..4],
        }
    }
}

impl ControllerConfig {
    pub fn is_protected(&self, token: usize) -> bool {
        self.protect.iter().any(|r| r.contains(&token))
    }
}

fn softmax_max(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    1.0 / z
}

fn top2_margin(logits: &[f64]) -> f64 {
    let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &l in logits {
        if l > a {
            b = a;
            a = l;
        } else if l > b {
            b = l;
        }
    }
    if b.is_finite() {
        a - b
    } else {
        f64::INFINITY
    }
}

/// Head features from prefill probes.
///
/// û: mean peak attention weight of the head's probes (how strongly a few keys
/// get reused), divided by the maximum over heads.
/// ŝ: one minus the head's mean inverse top-1/top-2 logit margin, divided by the
/// maximum over heads (a margin-danger estimate).
pub fn compute_features(
    prefill: &PrefillAttention,
    d: usize,
    segments: Segments,
    cfg: &ControllerConfig,
) -> Result<ControllerFeatures> {
    let n_heads = prefill.layers * prefill.heads;
    if n_heads == 0 || prefill.logits.len() != n_heads {
        return Err(SphKvError::Empty("prefill attention"));
    }
    let mut reuse_raw = Vec::with_capacity(n_heads);
    let mut danger_raw = Vec::with_capacity(n_heads);
    for probes in &prefill.logits {
        if probes.is_empty() || probes.iter().any(Vec::is_empty) {
            return Err(SphKvError::Empty("prefill probes"));
        }
        let n = probes.len() as f64;
        reuse_raw.push(probes.iter().map(|p| softmax_max(p)).sum::<f64>() / n);
        danger_raw.push(probes.iter().map(|p| 1.0 / (top2_margin(p) + 1e-9)).sum::<f64>() / n);
    }
    let max_reuse = reuse_raw.iter().copied().fold(0.0, f64::max);
    let max_danger = danger_raw.iter().copied().fold(0.0, f64::max);
    let head_features = reuse_raw
        .iter()
        .zip(&danger_raw)
        .map(|(&u, &g)| HeadFeatures {
            reuse: if max_reuse > 0.0 { u / max_reuse } else { 1.0 },
            stability: if max_danger > 0.0 { 1.0 - g / max_danger } else { 1.0 },
        })
        .collect();
    let query_norm = if prefill.query_norms.is_empty() {
        (d as f64).sqrt()
    } else {
        prefill.query_norms.iter().sum::<f64>() / prefill.query_norms.len() as f64
    };
    Ok(ControllerFeatures {
        d,
        layers: prefill.layers,
        heads: prefill.heads,
        prefill_len: segments.len,
        segments,
        weights: cfg.weights,
        alpha_theta: cfg.alpha_theta,
        alpha_r: cfg.alpha_r,
        query_norm,
        head_features,
    })
}

/// `D(t) = w_θ·ε_θ(t) + w_r·ε_r(t)` with
/// `w_θ = α_θ·û·ω_seg·r_q·‖k‖/√d` and `w_r = α_r·(1−ŝ)·ω_seg·r_q/√d`.
/// The drop tier uses `ε_θ = ε_r = 1`.
pub fn distortion_proxy(
    state: StateId,
    tier_id: u8,
    key_norm: f64,
    feat: &ControllerFeatures,
    tiers: &TierTable,
) -> Result<f64> {
    let eps = tiers.distortion(tier_id)?;
    let (w_theta, w_r) = distortion_weights(state, key_norm, feat);
    Ok(w_theta * eps.eps_theta + w_r * eps.eps_r)
}

fn distortion_weights(state: StateId, key_norm: f64, feat: &ControllerFeatures) -> (f64, f64) {
    let hf = feat.head(state.layer, state.head);
    let omega = feat.segment_weight(state.token);
    let base = feat.query_norm / (feat.d as f64).sqrt();
    let w_theta = feat.alpha_theta * hf.reuse * omega * base * key_norm;
    let w_r = feat.alpha_r * (1.0 - hf.stability) * omega * base;
    (w_theta, w_r)
}

/// Per-state scoring outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredState {
    pub id: StateId,
    pub protected: bool,
    pub best_tier: u8,
    pub score: f64,
    /// Value per bit `(D(drop) − D(t*)) / (R(t*) + ε)`.
    pub nu: f64,
    /// `D(t)` for every tier, index = tier id.
    pub distortion: Vec<f64>,
    /// `R(t)` for every tier.
    pub rate: Vec<u64>,
}

impl ScoredState {
    /// Value per bit at an arbitrary tier.
    pub fn nu_at(&self, tier: u8) -> f64 {
        let t = usize::from(tier);
        (self.distortion[0] - self.distortion[t]) / (self.rate[t] as f64 + NU_EPS)
    }
}

pub const NU_EPS: f64 = 1e-12;

/// Scores every tier with `S(t) = −D(t) − λ·R(t)` and picks the best. Ties go to
/// the lower-rate tier; protected states never pick drop.
pub fn score_and_best_tier(
    state: StateId,
    key_norm: f64,
    protected: bool,
    feat: &ControllerFeatures,
    tiers: &TierTable,
    lambda: f64,
) -> Result<ScoredState> {
    let (w_theta, w_r) = distortion_weights(state, key_norm, feat);
    let mut distortion = Vec::with_capacity(tiers.len());
    let mut rate = Vec::with_capacity(tiers.len());
    for t in tiers.tiers() {
        let eps = tiers.distortion(t.id)?;
        distortion.push(w_theta * eps.eps_theta + w_r * eps.eps_r);
        rate.push(t.rate_bits(feat.d));
    }
    Ok(pick_best(state, protected, distortion, rate, lambda))
}

pub(crate) fn pick_best(
    id: StateId,
    protected: bool,
    distortion: Vec<f64>,
    rate: Vec<u64>,
    lambda: f64,
) -> ScoredState {
    let start = usize::from(protected);
    let mut best = start;
    let mut best_score = f64::NEG_INFINITY;
    for t in start..distortion.len() {
        let s = -distortion[t] - lambda * rate[t] as f64;
        // strict improvement only: equal scores keep the lower-rate tier
        if s > best_score {
            best = t;
            best_score = s;
        }
    }
    let nu = (distortion[0] - distortion[best]) / (rate[best] as f64 + NU_EPS);
    ScoredState { id, protected, best_tier: best as u8, score: best_score, nu, distortion, rate }
}

// ── Assignments ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub retained: bool,
    pub tier: u8,
    pub protected: bool,
    pub nu: f64,
}

impl Decision {
    pub fn dropped() -> Self {
        Self { retained: false, tier: 0, protected: false, nu: 0.0 }
    }

    pub fn keep(tier: u8, protected: bool) -> Self {
        assert!(tier > 0, "kept states need a non-drop tier");
        Self { retained: true, tier, protected, nu: 0.0 }
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = nu;
        self
    }
}

/// Joint `(z, tier, protected)` choice for every state, iterated in
/// `(layer, head, token)` order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TierAssignment {
    decisions: BTreeMap<StateId, Decision>,
}

impl TierAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: StateId, d: Decision) {
        self.decisions.insert(id, d);
    }

    pub fn get(&self, id: StateId) -> Option<&Decision> {
        self.decisions.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateId, &Decision)> {
        self.decisions.iter()
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn retained(&self) -> usize {
        self.decisions.values().filter(|d| d.retained).count()
    }

    pub fn total_bits(&self, tiers: &TierTable, d: usize) -> u64 {
        self.decisions
            .values()
            .filter(|x| x.retained)
            .map(|x| tiers.rate_bits(x.tier, d))
            .sum()
    }

    /// Budget feasibility plus the z/tier/protection invariants.
    pub fn check(&self, tiers: &TierTable, d: usize, budget_bits: u64) -> Result<()> {
        let max = tiers.max_tier().id;
        for (id, x) in &self.decisions {
            let bad = x.retained != (x.tier != 0) || (x.protected && (!x.retained || x.tier != max));
            if bad {
                return Err(SphKvError::Config(format!("inconsistent decision for {id:?}: {x:?}")));
            }
        }
        let used = self.total_bits(tiers, d);
        if used > budget_bits {
            return Err(SphKvError::Config(format!("assignment uses {used} bits over budget {budget_bits}")));
        }
        Ok(())
    }

    /// `layer,head,token,z,tier,protected,nu`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,token,z,tier,protected,nu\n");
        for (id, x) in &self.decisions {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                id.layer,
                id.head,
                id.token,
                u8::from(x.retained),
                x.tier,
                u8::from(x.protected),
                x.nu
            );
        }
        out
    }
}

impl FromIterator<(StateId, Decision)> for TierAssignment {
    fn from_iter<I: IntoIterator<Item = (StateId, Decision)>>(iter: I) -> Self {
        Self { decisions: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Distortion, TierSpec};

    pub(crate) fn calibrated_tiers() -> TierTable {
        let mut t = TierTable::new(vec![
            TierSpec::DROP,
            TierSpec::new(1, 2, 4, 0),
            TierSpec::new(2, 4, 6, 0),
            TierSpec::new(3, 8, 8, 0),
        ])
        .unwrap();
        t.set_distortion(1, Distortion { eps_theta: 0.3, eps_r: 0.05 });
        t.set_distortion(2, Distortion { eps_theta: 0.08, eps_r: 0.01 });
        t.set_distortion(3, Distortion { eps_theta: 0.005, eps_r: 0.002 });
        t
    }

    pub(crate) fn features(layers: usize, heads: usize, d: usize) -> ControllerFeatures {
        ControllerFeatures {
            d,
            layers,
            heads,
            prefill_len: 16,
            segments: Segments::new(4, 8, 16).unwrap(),
            weights: SegmentWeights::default(),
            alpha_theta: 1.0,
            alpha_r: 1.0,
            query_norm: (d as f64).sqrt(),
            head_features: vec![HeadFeatures { reuse: 0.8, stability: 0.5 }; layers * heads],
        }
    }

    fn probe(logits: Vec<Vec<f64>>, layers: usize, heads: usize) -> PrefillAttention {
        PrefillAttention { layers, heads, logits: logits.into_iter().map(|l| vec![l]).collect(), query_norms: vec![] }
    }

    #[test]
    fn single_head_reuse_normalizes_to_one() {
        let f = compute_features(
            &probe(vec![vec![1.0, 0.2, 0.1]], 1, 1),
            4,
            Segments::new(1, 2, 3).unwrap(),
            &ControllerConfig::default(),
        )
        .unwrap();
        assert_eq!(f.head_features[0].reuse, 1.0);
        assert_eq!(f.head_features[0].stability, 0.0);
    }

    #[test]
    fn identical_heads_share_features_and_permutation_follows() {
        let seg = Segments::new(1, 2, 3).unwrap();
        let cfg = ControllerConfig::default();
        let a = vec![3.0, 0.5, 0.1];
        let b = vec![0.2, 0.1, 0.0];
        let c = vec![1.0, 0.9, -2.0];
        let f = compute_features(&probe(vec![a.clone(), a.clone()], 1, 2), 4, seg, &cfg).unwrap();
        assert_eq!(f.head_features[0], f.head_features[1]);

        let f1 = compute_features(&probe(vec![a.clone(), b.clone(), c.clone()], 1, 3), 4, seg, &cfg).unwrap();
        let f2 = compute_features(&probe(vec![c, a, b], 1, 3), 4, seg, &cfg).unwrap();
        assert_eq!(f1.head_features[0], f2.head_features[1]);
        assert_eq!(f1.head_features[1], f2.head_features[2]);
        assert_eq!(f1.head_features[2], f2.head_features[0]);
    }

    #[test]
    fn empty_prefill_is_rejected() {
        let p = PrefillAttention { layers: 0, heads: 0, logits: vec![], query_norms: vec![] };
        assert!(compute_features(&p, 4, Segments::new(0, 0, 0).unwrap(), &ControllerConfig::default()).is_err());
    }

    #[test]
    fn distortion_proxy_properties() {
        let tiers = calibrated_tiers();
        let f = features(1, 1, 16);
        let s = StateId::new(0, 0, 10);
        let low = distortion_proxy(s, 1, 1.0, &f, &tiers).unwrap();
        let high = distortion_proxy(s, 3, 1.0, &f, &tiers).unwrap();
        assert!(low > high);

        // w_θ is linear in ‖k‖
        let w = |norm: f64| distortion_weights(s, norm, &f).0;
        assert_eq!(w(2.0), 2.0 * w(1.0));

        let mut lossless = tiers.clone();
        lossless.set_distortion(3, Distortion { eps_theta: 0.0, eps_r: 0.0 });
        assert_eq!(distortion_proxy(s, 3, 1.0, &f, &lossless).unwrap(), 0.0);

        let uncal = TierTable::new(tiers.tiers().to_vec()).unwrap();
        assert!(matches!(distortion_proxy(s, 2, 1.0, &f, &uncal), Err(SphKvError::Uncalibrated(2))));
    }

    #[test]
    fn best_tier_limits() {
        let tiers = calibrated_tiers();
        let f = features(1, 1, 16);
        let s = StateId::new(0, 0, 10);
        let free = score_and_best_tier(s, 1.0, false, &f, &tiers, 0.0).unwrap();
        assert_eq!(free.best_tier, 3);
        let costly = score_and_best_tier(s, 1.0, false, &f, &tiers, 1e9).unwrap();
        assert_eq!(costly.best_tier, 0);
        assert_eq!(costly.score, -costly.distortion[0]);
        assert_eq!(costly.nu, 0.0);
        let prot = score_and_best_tier(s, 1.0, true, &f, &tiers, 1e9).unwrap();
        assert_ne!(prot.best_tier, 0);
    }

    #[test]
    fn argmax_ties_prefer_lower_rate() {
        let s = pick_best(StateId::new(0, 0, 0), false, vec![1.0, 0.5, 0.5], vec![0, 10, 20], 0.0);
        assert_eq!(s.best_tier, 1);
    }

    #[test]
    fn csv_export() {
        let a: TierAssignment = [
            (StateId::new(0, 1, 2), Decision::keep(3, true).with_nu(0.5)),
            (StateId::new(0, 0, 0), Decision::dropped()),
        ]
        .into_iter()
        .collect();
        assert_eq!(a.to_csv(), "layer,head,token,z,tier,protected,nu\n0,0,0,0,0,0,0\n0,1,2,1,3,1,0.5\n");
    }
}
