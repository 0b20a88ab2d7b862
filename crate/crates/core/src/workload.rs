//! Deterministic synthetic attention workloads and a toy language model.
//!
//! Prefill keys are Gaussian with radii around 1. A few "salient" tokens per
//! head carry larger radii and serve as attention anchors for the queries, and
//! a planted fraction of outlier states get their radius multiplied. The toy LM
//! maps concatenated attention outputs to vocabulary logits with a fixed random
//! projection plus a previous-token transition bias.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use crate::codec::{to_spherical, SphericalKey};
use crate::controller::{PrefillAttention, Segments, StateId};
use crate::decode::DecodeTrace;
use crate::error::{Result, SphKvError};
use crate::store::KvSource;

/// Stable 64-bit mix of a tuple of integers (splitmix64 finalizer chain).
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const TAG_KEY: u64 = 1;
const TAG_VALUE: u64 = 2;
const TAG_QUERY: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_PROBE: u64 = 5;

/// Number of probe queries per head used for the prefill feature pass.
pub const PROBES_PER_HEAD: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub model: String,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub prefill_len: usize,
    pub decode_len: usize,
    pub page_size: usize,
    /// Prefix span is `0..prefix_end`, retrieved `prefix_end..retrieved_end`,
    /// recent `retrieved_end..prefill_len`.
    pub prefix_end: usize,
    pub retrieved_end: usize,
    pub outlier_frac: f64,
    pub outlier_mult: f64,
    pub vocab: usize,
    pub eos: Option<usize>,
    pub min_len: usize,
    pub max_len: usize,
    /// Salient anchor tokens per head.
    pub salient: usize,
    pub salient_mult: f64,
    /// Query scale κ; a query has norm `κ_h·√d` with κ_h spread around κ.
    pub query_scale: f64,
    /// Chance that a decode query anchors on a recently appended key.
    pub recent_anchor_prob: f64,
    /// Transition-bias gap of the toy LM's preferred successor.
    pub lm_gap: f64,
    /// Standard deviation of the projection term of the LM logits.
    pub lm_scale: f64,
    pub sampled: bool,
    pub temperature: f64,
    /// Steps at which the transition bias is switched off so the attention
    /// outputs alone decide the token.
    pub critical_steps: Vec<usize>,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            model: "synthetic".into(),
            d: 16,
            layers: 2,
            heads: 2,
            prefill_len: 256,
            decode_len: 64,
            page_size: 32,
            prefix_end: 32,
            retrieved_end: 192,
            outlier_frac: 0.01,
            outlier_mult: 4.0,
            vocab: 64,
            eos: None,
            min_len: 0,
            max_len: 64,
            salient: 8,
            salient_mult: 3.0,
            query_scale: 5.0,
            recent_anchor_prob: 0.2,
            lm_gap: 6.0,
            lm_scale: 1.0,
            sampled: false,
            temperature: 1.0,
            critical_steps: Vec::new(),
            seed: 0,
        }
    }
}

impl WorkloadConfig {
    /// The standard frontier panel: d=64, 8 heads, 4 layers, 4096 prefill
    /// tokens, 512 decode steps.
    pub fn standard_panel() -> Self {
        Self {
            model: "panel".into(),
            d: 64,
            layers: 4,
            heads: 8,
            prefill_len: 4096,
            decode_len: 512,
            page_size: 64,
            prefix_end: 512,
            retrieved_end: 3584,
            salient: 32,
            max_len: 512,
            ..Self::default()
        }
    }

    pub fn segments(&self) -> Result<Segments> {
        Segments::new(self.prefix_end, self.retrieved_end, self.prefill_len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SphKvError::Config(m));
        self.segments()?;
        if self.d < 2 || self.layers == 0 || self.heads == 0 || self.page_size == 0 {
            return bad("d >= 2, layers >= 1, heads >= 1 and page_size >= 1 are required".into());
        }
        if self.prefill_len == 0 {
            return bad("prefill_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.outlier_frac) || self.outlier_mult < 1.0 {
            return bad(format!("outlier fraction {} / multiplier {}", self.outlier_frac, self.outlier_mult));
        }
        if self.vocab < 2 || self.eos.is_some_and(|e| e >= self.vocab) {
            return bad(format!("vocab {} with eos {:?}", self.vocab, self.eos));
        }
        if self.min_len > self.max_len {
            return bad("min_len exceeds max_len".into());
        }
        if self.salient == 0 || self.salient > self.prefill_len {
            return bad(format!("salient count {} out of range", self.salient));
        }
        if !(self.query_scale > 0.0 && self.temperature > 0.0 && self.lm_scale >= 0.0) {
            return bad("query_scale and temperature must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.recent_anchor_prob) {
            return bad("recent_anchor_prob must lie in [0, 1]".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorkload {
    pub config: WorkloadConfig,
    pub segments: Segments,
    keys: Vec<Vec<SphericalKey>>,
    dense: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    outliers: Vec<Vec<bool>>,
    salient: Vec<Vec<usize>>,
    kappa: Vec<f64>,
    pub lm: ToyLM,
}

/// Builds the workload for `(config, seed)`; bit-identical across runs.
pub fn generate(config: &WorkloadConfig, seed: u64) -> Result<SyntheticWorkload> {
    config.validate()?;
    let config = &WorkloadConfig { seed, ..config.clone() };
    let (d, t_p) = (config.d, config.prefill_len);
    let n_heads = config.layers * config.heads;
    let inv = 1.0 / (d as f64).sqrt();
    let kappa_spread = LogNormal::new(0.0, 0.4).expect("valid lognormal");
    let mut keys = Vec::with_capacity(n_heads);
    let mut dense = Vec::with_capacity(n_heads);
    let mut values = Vec::with_capacity(n_heads);
    let mut outliers = Vec::with_capacity(n_heads);
    let mut salient = Vec::with_capacity(n_heads);
    let mut kappa = Vec::with_capacity(n_heads);
    for hidx in 0..n_heads {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, TAG_KEY, hidx as u64]));
        kappa.push(config.query_scale * kappa_spread.sample(&mut rng));

        // salient anchors: mostly retrieved, some prefix and recent
        let mut picks = BTreeSet::new();
        while picks.len() < config.salient {
            let u: f64 = rng.random();
            let span = if u < 0.7 {
                config.prefix_end..config.retrieved_end
            } else if u < 0.85 {
                0..config.prefix_end
            } else {
                config.retrieved_end..t_p
            };
            let span = if span.is_empty() { 0..t_p } else { span };
            picks.insert(rng.random_range(span));
        }
        let is_salient: BTreeSet<usize> = picks.iter().copied().collect();

        let mut head_dense = Vec::with_capacity(t_p * d);
        let mut head_keys = Vec::with_capacity(t_p);
        let mut head_out = Vec::with_capacity(t_p);
        for i in 0..t_p {
            let mut k = gaussian(&mut rng, d, inv);
            let outlier = config.outlier_frac > 0.0 && rng.random::<f64>() < config.outlier_frac;
            let mult = if outlier { config.outlier_mult } else { 1.0 }
                * if is_salient.contains(&i) { config.salient_mult } else { 1.0 };
            k.iter_mut().for_each(|x| *x *= mult);
            head_keys.push(to_spherical(&k));
            head_dense.extend_from_slice(&k);
            head_out.push(outlier);
        }
        let mut vrng = ChaCha8Rng::seed_from_u64(mix(&[seed, TAG_VALUE, hidx as u64]));
        values.push(gaussian(&mut vrng, t_p * d, 1.0));
        keys.push(head_keys);
        dense.push(head_dense);
        outliers.push(head_out);
        salient.push(picks.into_iter().collect());
    }
    Ok(SyntheticWorkload {
        config: config.clone(),
        segments: config.segments()?,
        keys,
        dense,
        values,
        outliers,
        salient,
        kappa,
        lm: ToyLM::new(config, seed),
    })
}

impl SyntheticWorkload {
    fn hidx(&self, layer: usize, head: usize) -> usize {
        layer * self.config.heads + head
    }

    pub fn key(&self, layer: usize, head: usize, token: usize) -> &SphericalKey {
        &self.keys[self.hidx(layer, head)][token]
    }

    pub fn dense_key(&self, layer: usize, head: usize, token: usize) -> &[f64] {
        let d = self.config.d;
        &self.dense[self.hidx(layer, head)][token * d..(token + 1) * d]
    }

    /// Row-major prefill keys of one head.
    pub fn head_keys(&self, layer: usize, head: usize) -> &[f64] {
        &self.dense[self.hidx(layer, head)]
    }

    pub fn head_values(&self, layer: usize, head: usize) -> &[f64] {
        &self.values[self.hidx(layer, head)]
    }

    pub fn value(&self, layer: usize, head: usize, token: usize) -> &[f64] {
        let d = self.config.d;
        &self.values[self.hidx(layer, head)][token * d..(token + 1) * d]
    }

    pub fn is_outlier(&self, layer: usize, head: usize, token: usize) -> bool {
        self.outliers[self.hidx(layer, head)][token]
    }

    pub fn salient_tokens(&self, layer: usize, head: usize) -> &[usize] {
        &self.salient[self.hidx(layer, head)]
    }

    /// Token fed to the first decode step.
    pub fn start_token(&self) -> usize {
        (mix(&[self.config.seed, 0x57a7]) % self.config.vocab as u64) as usize
    }

    /// Every prefill state with its key norm, in `(layer, head, token)` order.
    pub fn states(&self) -> Vec<(StateId, f64)> {
        let c = &self.config;
        let mut out = Vec::with_capacity(c.layers * c.heads * c.prefill_len);
        for l in 0..c.layers {
            for h in 0..c.heads {
                for i in 0..c.prefill_len {
                    out.push((StateId::new(l, h, i), self.key(l, h, i).radius));
                }
            }
        }
        out
    }

    /// Keys spread evenly over all heads and tokens, for tier calibration.
    pub fn calibration_sample(&self, n: usize) -> Vec<SphericalKey> {
        let total = self.keys.len() * self.config.prefill_len;
        let step = (total / n.max(1)).max(1);
        (0..total)
            .step_by(step)
            .take(n)
            .map(|g| self.keys[g / self.config.prefill_len][g % self.config.prefill_len].clone())
            .collect()
    }

    /// Decode query of head `(layer, head)` at `step`, driven by the previous
    /// token. `recent` holds recently appended keys of this head that may serve
    /// as anchors.
    pub fn query(&self, layer: usize, head: usize, step: usize, prev: usize, recent: &[Vec<f64>]) -> Vec<f64> {
        let seed = mix(&[self.config.seed_mix(), TAG_QUERY, step as u64, prev as u64, layer as u64, head as u64]);
        self.query_from_seed(layer, head, seed, recent)
    }

    fn query_from_seed(&self, layer: usize, head: usize, seed: u64, recent: &[Vec<f64>]) -> Vec<f64> {
        let d = self.config.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let use_recent = !recent.is_empty() && rng.random::<f64>() < self.config.recent_anchor_prob;
        let mut anchor = if use_recent {
            recent[rng.random_range(0..recent.len())].clone()
        } else {
            let s = self.salient_tokens(layer, head);
            self.dense_key(layer, head, s[rng.random_range(0..s.len())]).to_vec()
        };
        normalize(&mut anchor);
        let mut noise = gaussian(&mut rng, d, 1.0);
        normalize(&mut noise);
        let mut q: Vec<f64> = anchor.iter().zip(&noise).map(|(a, n)| 0.8 * a + 0.6 * n).collect();
        normalize(&mut q);
        let norm = self.kappa[self.hidx(layer, head)] * (d as f64).sqrt();
        q.iter_mut().for_each(|x| *x *= norm);
        q
    }

    /// Key and value appended for `token` emitted at `step`.
    pub fn decode_kv(&self, layer: usize, head: usize, step: usize, token: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.d;
        let parts = [self.config.seed_mix(), TAG_KEY, step as u64, token as u64, layer as u64, head as u64];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&parts));
        let k = gaussian(&mut rng, d, 1.0 / (d as f64).sqrt());
        let v = gaussian(&mut rng, d, 1.0);
        (k, v)
    }

    /// Probe-query logits over each head's prefill keys.
    pub fn prefill_attention(&self) -> PrefillAttention {
        let c = &self.config;
        let d = c.d;
        let scale = 1.0 / (d as f64).sqrt();
        let mut logits = Vec::with_capacity(c.layers * c.heads);
        let mut query_norms = Vec::new();
        for l in 0..c.layers {
            for h in 0..c.heads {
                let keys = self.head_keys(l, h);
                let probes = (0..PROBES_PER_HEAD)
                    .map(|p| {
                        let seed = mix(&[c.seed_mix(), TAG_PROBE, p as u64, l as u64, h as u64]);
                        let q = self.query_from_seed(l, h, seed, &[]);
                        query_norms.push(q.iter().map(|x| x * x).sum::<f64>().sqrt());
                        keys.chunks_exact(d).map(|k| dot(&q, k) * scale).collect()
                    })
                    .collect();
                logits.push(probes);
            }
        }
        PrefillAttention { layers: c.layers, heads: c.heads, logits, query_norms }
    }
}

impl WorkloadConfig {
    fn seed_mix(&self) -> u64 {
        mix(&[self.seed, 0x5eed])
    }
}

impl KvSource for SyntheticWorkload {
    fn key(&self, id: StateId) -> Option<&SphericalKey> {
        self.keys.get(self.hidx(id.layer, id.head))?.get(id.token)
    }

    fn value(&self, id: StateId) -> Option<&[f64]> {
        let d = self.config.d;
        self.values.get(self.hidx(id.layer, id.head))?.get(id.token * d..(id.token + 1) * d)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    lanes.iter().sum::<f64>() + tail
}

// ── Toy language model ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ToyLM {
    pub vocab: usize,
    pub input_dim: usize,
    weights: Vec<f64>,
    transition: Vec<f64>,
    proj_scale: f64,
    pub sampled: bool,
    pub temperature: f64,
    pub seed: u64,
    critical: BTreeSet<usize>,
    pub eos: Option<usize>,
}

impl ToyLM {
    pub fn new(c: &WorkloadConfig, seed: u64) -> Self {
        let input_dim = c.layers * c.heads * c.d;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x1f]));
        let weights = gaussian(&mut rng, c.vocab * input_dim, 1.0);
        let mut transition = gaussian(&mut rng, c.vocab * c.vocab, 0.5);
        for p in 0..c.vocab {
            let succ = rng.random_range(0..c.vocab);
            transition[p * c.vocab + succ] += c.lm_gap;
        }
        Self {
            vocab: c.vocab,
            input_dim,
            weights,
            transition,
            proj_scale: c.lm_scale / (input_dim as f64).sqrt(),
            sampled: c.sampled,
            temperature: c.temperature,
            seed,
            critical: c.critical_steps.iter().copied().collect(),
            eos: c.eos,
        }
    }

    pub fn is_critical(&self, step: usize) -> bool {
        self.critical.contains(&step)
    }

    /// Vocabulary logits for concatenated attention outputs.
    pub fn logits(&self, outputs: &[f64], prev: usize, step: usize) -> Vec<f64> {
        let bias = !self.is_critical(step);
        (0..self.vocab)
            .map(|v| {
                let row = &self.weights[v * self.input_dim..(v + 1) * self.input_dim];
                let proj = dot(row, outputs) * self.proj_scale;
                if bias {
                    proj + self.transition[prev * self.vocab + v]
                } else {
                    proj
                }
            })
            .collect()
    }
}

/// Greedy argmax (lowest index on ties) or a categorical sample seeded by
/// `(seed, step)`.
pub fn choose_token(logits: &[f64], lm: &ToyLM, step: usize) -> usize {
    if !lm.sampled {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| ((l - m) / lm.temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[lm.seed, TAG_SAMPLE, step as u64]));
    let mut u = rng.random::<f64>() * total;
    for (i, x) in w.iter().enumerate() {
        if u < *x {
            return i;
        }
        u -= x;
    }
    w.len() - 1
}

/// One LM step over per-head attention outputs in `(layer, head)` order.
pub fn toy_lm_step(outputs: &[Vec<f64>], lm: &ToyLM, prev: usize, step: usize) -> Result<usize> {
    let d = lm.input_dim / outputs.len().max(1);
    if outputs.is_empty() || outputs.iter().any(|o| o.len() != d) || d * outputs.len() != lm.input_dim {
        return Err(SphKvError::DimensionMismatch { expected: lm.input_dim, got: outputs.iter().map(Vec::len).sum() });
    }
    let flat: Vec<f64> = outputs.concat();
    Ok(choose_token(&lm.logits(&flat, prev, step), lm, step))
}

// ── Quality ─────────────────────────────────────────────────────────────────

/// `Q = 100·(0.5·agreement + 0.5·(1 − clamped mean relative L2 error))`.
///
/// Agreement counts matching tokens over the overlap divided by the longer
/// trace, so length differences lower it. The output error is averaged over
/// the overlapping steps.
pub fn quality_score(trace: &DecodeTrace, dense: &DecodeTrace) -> f64 {
    quality_from_parts(&trace.tokens, &trace.outputs, &dense.tokens, &dense.outputs, dense.width.max(trace.width))
}

pub fn quality_from_parts(tokens: &[usize], outputs: &[f64], ref_tokens: &[usize], ref_outputs: &[f64], width: usize) -> f64 {
    let longest = tokens.len().max(ref_tokens.len());
    if longest == 0 {
        return 100.0;
    }
    let overlap = tokens.len().min(ref_tokens.len());
    let agree = tokens.iter().zip(ref_tokens).filter(|(a, b)| a == b).count() as f64 / longest as f64;
    let mut err = 0.0;
    if overlap > 0 && width > 0 {
        for s in 0..overlap {
            let o = &outputs[s * width..(s + 1) * width];
            let r = &ref_outputs[s * width..(s + 1) * width];
            let diff = o.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            err += if norm > 0.0 { (diff / norm).min(1.0) } else if diff > 0.0 { 1.0 } else { 0.0 };
        }
        err /= overlap as f64;
    }
    100.0 * (0.5 * agree + 0.5 * (1.0 - err.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorkloadConfig {
        WorkloadConfig { prefill_len: 128, prefix_end: 16, retrieved_end: 96, ..WorkloadConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small(), 7).unwrap();
        let b = generate(&small(), 7).unwrap();
        assert_eq!(a.dense, b.dense);
        assert_eq!(a.values, b.values);
        assert_eq!(a.salient, b.salient);
        assert_eq!(a.query(1, 1, 3, 5, &[]), b.query(1, 1, 3, 5, &[]));
        let c = generate(&small(), 8).unwrap();
        assert_ne!(a.dense, c.dense);
    }

    #[test]
    fn no_outliers_when_fraction_is_zero() {
        let w = generate(&WorkloadConfig { outlier_frac: 0.0, ..small() }, 1).unwrap();
        assert!(w.outliers.iter().flatten().all(|o| !o));
    }

    #[test]
    fn outlier_radii_scale_with_multiplier() {
        let cfg = WorkloadConfig {
            prefill_len: 4000,
            prefix_end: 0,
            retrieved_end: 4000,
            outlier_frac: 0.05,
            salient: 1,
            ..WorkloadConfig::default()
        };
        let w = generate(&cfg, 3).unwrap();
        let mut radii: Vec<f64> = w.keys.iter().flatten().map(|k| k.radius).collect();
        radii.sort_by(f64::total_cmp);
        let median = radii[radii.len() / 2];
        let mut flagged = 0;
        for (hk, ho) in w.keys.iter().zip(&w.outliers) {
            for (k, &o) in hk.iter().zip(ho) {
                if o {
                    flagged += 1;
                    assert!(k.radius / median >= cfg.outlier_mult * 0.5);
                }
            }
        }
        assert!(flagged > 0);
        let outlier_mean: f64 = w
            .keys
            .iter()
            .flatten()
            .zip(w.outliers.iter().flatten())
            .filter(|(_, &o)| o)
            .map(|(k, _)| k.radius)
            .sum::<f64>()
            / flagged as f64;
        assert!(outlier_mean / median >= cfg.outlier_mult * 0.9);
    }

    #[test]
    fn invalid_spans_rejected() {
        let cfg = WorkloadConfig { prefix_end: 200, retrieved_end: 100, ..small() };
        assert!(generate(&cfg, 0).is_err());
    }

    #[test]
    fn zero_outputs_pick_the_bias_argmax() {
        let w = generate(&small(), 2).unwrap();
        let outputs = vec![vec![0.0; 16]; 4];
        let t = toy_lm_step(&outputs, &w.lm, 5, 0).unwrap();
        let bias = &w.lm.transition[5 * w.lm.vocab..6 * w.lm.vocab];
        let expected = (0..bias.len()).fold(0, |b, i| if bias[i] > bias[b] { i } else { b });
        assert_eq!(t, expected);
        assert_eq!(toy_lm_step(&outputs, &w.lm, 5, 0).unwrap(), t);
        assert!(toy_lm_step(&outputs[..3], &w.lm, 5, 0).is_err());
    }

    #[test]
    fn perturbation_below_margin_keeps_token() {
        let w = generate(&small(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for step in 0..50 {
            let out = gaussian(&mut rng, w.lm.input_dim, 1.0);
            let logits = w.lm.logits(&out, step % 64, step);
            let mut sorted = logits.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let margin = sorted[0] - sorted[1];
            // each logit moves by at most ‖row‖·‖δ‖·scale
            let max_row = (0..w.lm.vocab)
                .map(|v| dot(&w.lm.weights[v * w.lm.input_dim..(v + 1) * w.lm.input_dim], &w.lm.weights[v * w.lm.input_dim..(v + 1) * w.lm.input_dim]).sqrt())
                .fold(0.0, f64::max);
            let budget = 0.49 * margin / (max_row * w.lm.proj_scale);
            let mut dir = gaussian(&mut rng, w.lm.input_dim, 1.0);
            normalize(&mut dir);
            let perturbed: Vec<f64> = out.iter().zip(&dir).map(|(o, x)| o + budget * x).collect();
            assert_eq!(
                choose_token(&logits, &w.lm, step),
                choose_token(&w.lm.logits(&perturbed, step % 64, step), &w.lm, step)
            );
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = WorkloadConfig { sampled: true, ..small() };
        let w = generate(&cfg, 5).unwrap();
        let logits = vec![0.0; 64];
        let a: Vec<usize> = (0..20).map(|s| choose_token(&logits, &w.lm, s)).collect();
        let b: Vec<usize> = (0..20).map(|s| choose_token(&logits, &w.lm, s)).collect();
        assert_eq!(a, b);
        assert!(a.iter().collect::<BTreeSet<_>>().len() > 1);
    }

    #[test]
    fn quality_edges() {
        let t = [1usize, 2, 3];
        let o = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(quality_from_parts(&t, &o, &t, &o, 2), 100.0);
        let orth = [0.0, 1.0, 1.0, 0.0, -1.0, 1.0];
        let q = quality_from_parts(&[4, 5, 6], &orth, &t, &o, 2);
        assert!(q <= 1.0);
        // shorter trace: agreement over the longer length
        let q = quality_from_parts(&t[..2], &o[..4], &t, &o, 2);
        assert!((q - 100.0 * (0.5 * 2.0 / 3.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn quality_decreases_with_output_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let width = 32;
        let steps = 20;
        let reference = gaussian(&mut rng, width * steps, 1.0);
        let tokens: Vec<usize> = (0..steps).collect();
        let mut last = 100.0;
        for sigma in [0.01, 0.05, 0.1, 0.3] {
            let mean: f64 = (0..50)
                .map(|_| {
                    let noisy: Vec<f64> =
                        reference.iter().map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                    quality_from_parts(&tokens, &noisy, &tokens, &reference, width)
                })
                .sum::<f64>()
                / 50.0;
            assert!(mean <= last);
            last = mean;
        }
    }
}
