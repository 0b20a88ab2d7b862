//! Allocation statistics by segment and by head.

use std::collections::BTreeMap;

use super::{SegmentLabel, Segments, TierAssignment};
use crate::codec::TierTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentStat {
    pub states: usize,
    pub retained: usize,
    /// Retention rate `ρ_seg`.
    pub rho: f64,
    /// Mean key-code bytes per retained state, `None` when nothing is retained.
    pub mean_bytes: Option<f64>,
}

/// Retention and bytes per segment. Segments without states are absent.
pub fn segment_stats(
    a: &TierAssignment,
    segments: &Segments,
    tiers: &TierTable,
    d: usize,
) -> BTreeMap<SegmentLabel, SegmentStat> {
    let mut acc: BTreeMap<SegmentLabel, (usize, usize, u64)> = BTreeMap::new();
    for (id, x) in a.iter() {
        let e = acc.entry(segments.label(id.token)).or_default();
        e.0 += 1;
        if x.retained {
            e.1 += 1;
            e.2 += tiers.rate_bits(x.tier, d);
        }
    }
    acc.into_iter()
        .map(|(label, (states, retained, bits))| {
            let stat = SegmentStat {
                states,
                retained,
                rho: retained as f64 / states as f64,
                mean_bytes: (retained > 0).then(|| bits as f64 / 8.0 / retained as f64),
            };
            (label, stat)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadAllocation {
    /// Key-code bytes per token for each `(layer, head)`.
    pub per_head: BTreeMap<(usize, usize), f64>,
    /// Shannon entropy (nats) of the per-head byte shares.
    pub entropy: f64,
    pub gini: f64,
}

pub fn head_allocation_stats(a: &TierAssignment, tiers: &TierTable, d: usize, tokens: usize) -> HeadAllocation {
    let mut bits: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (id, x) in a.iter() {
        let e = bits.entry((id.layer, id.head)).or_default();
        if x.retained {
            *e += tiers.rate_bits(x.tier, d);
        }
    }
    let t = tokens.max(1) as f64;
    let per_head: BTreeMap<_, _> = bits.iter().map(|(&k, &b)| (k, b as f64 / 8.0 / t)).collect();
    let xs: Vec<f64> = per_head.values().copied().collect();
    HeadAllocation { entropy: entropy(&xs), gini: gini(&xs), per_head }
}

fn entropy(xs: &[f64]) -> f64 {
    let total: f64 = xs.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    xs.iter().filter(|&&x| x > 0.0).map(|&x| -(x / total) * (x / total).ln()).sum()
}

fn gini(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let total: f64 = xs.iter().sum();
    if xs.is_empty() || total <= 0.0 {
        return 0.0;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let weighted: f64 = s.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x).sum();
    2.0 * weighted / (n * total) - (n + 1.0) / n
}

#[cfg(test)]
mod tests {
    use super::super::{Decision, StateId};
    use super::*;
    use crate::codec::TierSpec;

    fn tiers() -> TierTable {
        TierTable::new(vec![TierSpec::DROP, TierSpec::new(1, 2, 4, 0), TierSpec::new(2, 4, 4, 0)]).unwrap()
    }

    #[test]
    fn segment_retention() {
        let seg = Segments::new(2, 2, 4).unwrap();
        let a: TierAssignment = [
            (StateId::new(0, 0, 0), Decision::keep(2, false)),
            (StateId::new(0, 0, 1), Decision::dropped()),
            (StateId::new(0, 0, 2), Decision::keep(1, false)),
            (StateId::new(0, 0, 3), Decision::keep(1, false)),
        ]
        .into_iter()
        .collect();
        let s = segment_stats(&a, &seg, &tiers(), 4);
        assert!(!s.contains_key(&SegmentLabel::Retrieved));
        assert_eq!(s[&SegmentLabel::Prefix].rho, 0.5);
        assert_eq!(s[&SegmentLabel::Prefix].mean_bytes, Some(16.0 / 8.0));
        assert_eq!(s[&SegmentLabel::Recent].rho, 1.0);
        assert_eq!(s[&SegmentLabel::Recent].mean_bytes, Some(10.0 / 8.0));
    }

    #[test]
    fn uniform_heads_have_max_entropy_and_zero_gini() {
        let a: TierAssignment =
            (0..4).map(|h| (StateId::new(0, h, 0), Decision::keep(1, false))).collect();
        let s = head_allocation_stats(&a, &tiers(), 4, 1);
        assert!((s.entropy - 4f64.ln()).abs() < 1e-12);
        assert!(s.gini.abs() < 1e-12);
    }

    #[test]
    fn single_funded_head_is_maximally_unequal() {
        let mut a: TierAssignment =
            (1..4).map(|h| (StateId::new(0, h, 0), Decision::dropped())).collect();
        a.insert(StateId::new(0, 0, 0), Decision::keep(2, false));
        let s = head_allocation_stats(&a, &tiers(), 4, 1);
        assert_eq!(s.entropy, 0.0);
        assert!((s.gini - 0.75).abs() < 1e-12);
    }
}
