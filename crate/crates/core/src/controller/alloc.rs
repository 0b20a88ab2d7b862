//! Budgeted allocators over scored states.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{pick_best, score_and_best_tier, ControllerFeatures, Decision, ScoredState, StateId, TierAssignment};
use crate::codec::TierTable;
use crate::error::{Result, SphKvError};

/// How the rate multiplier λ is chosen for a budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    /// Smallest λ whose unconstrained choices fit the budget.
    Auto,
    Fixed(f64),
}

/// Scores `(state, ‖k‖)` pairs at a given λ.
pub fn score_all(
    states: &[(StateId, f64)],
    protected: impl Fn(StateId) -> bool,
    feat: &ControllerFeatures,
    tiers: &TierTable,
    lambda: f64,
) -> Result<Vec<ScoredState>> {
    states
        .iter()
        .map(|&(id, norm)| score_and_best_tier(id, norm, protected(id), feat, tiers, lambda))
        .collect()
}

/// Re-picks every best tier at a new λ (distortions do not depend on λ).
pub fn rescore(scored: &mut [ScoredState], lambda: f64) {
    for s in scored.iter_mut() {
        let distortion = std::mem::take(&mut s.distortion);
        let rate = std::mem::take(&mut s.rate);
        *s = pick_best(s.id, s.protected, distortion, rate, lambda);
    }
}

fn demand_at(scored: &[ScoredState], lambda: f64) -> u64 {
    scored
        .iter()
        .map(|s| {
            if s.protected {
                return *s.rate.last().unwrap();
            }
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for t in 0..s.rate.len() {
                let v = -s.distortion[t] - lambda * s.rate[t] as f64;
                if v > best_score {
                    best = t;
                    best_score = v;
                }
            }
            s.rate[best]
        })
        .sum()
}

/// Bisects for the smallest λ at which the per-state best tiers fit the budget.
/// Returns `0` when everything fits at λ = 0.
pub fn solve_lambda(scored: &[ScoredState], budget_bits: u64) -> f64 {
    if demand_at(scored, 0.0) <= budget_bits {
        return 0.0;
    }
    let mut hi = 1e-6;
    while demand_at(scored, hi) > budget_bits && hi < 1e18 {
        hi *= 4.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        if hi - lo <= hi * 1e-12 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if demand_at(scored, mid) <= budget_bits {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn protected_demand(scored: &[ScoredState], tiers: &TierTable, d: usize, budget_bits: u64) -> Result<u64> {
    let max_rate = tiers.max_tier().rate_bits(d);
    let demand = scored.iter().filter(|s| s.protected).count() as u64 * max_rate;
    if demand > budget_bits {
        return Err(SphKvError::InfeasibleProtection { demand, budget: budget_bits });
    }
    Ok(demand)
}

fn by_value_desc(a: &(f64, StateId), b: &(f64, StateId)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Greedy value-per-bit allocation: protected states take the top tier first,
/// then the rest are visited by descending ν (ties in `(layer, head, token)`
/// order) and kept at their best tier while it fits.
pub fn allocate_greedy(scored: &[ScoredState], tiers: &TierTable, d: usize, budget_bits: u64) -> Result<TierAssignment> {
    let max = tiers.max_tier().id;
    let mut remaining = budget_bits - protected_demand(scored, tiers, d, budget_bits)?;
    let mut out = TierAssignment::new();
    let mut order = Vec::with_capacity(scored.len());
    for (i, s) in scored.iter().enumerate() {
        if s.protected {
            out.insert(s.id, Decision::keep(max, true).with_nu(s.nu_at(max)));
        } else {
            order.push((s.nu, s.id, i));
        }
    }
    order.sort_by(|a, b| by_value_desc(&(a.0, a.1), &(b.0, b.1)));
    for (_, id, i) in order {
        let s = &scored[i];
        let r = s.rate[usize::from(s.best_tier)];
        let decision = if s.best_tier != 0 && r <= remaining {
            remaining -= r;
            Decision::keep(s.best_tier, false)
        } else {
            Decision::dropped()
        };
        out.insert(id, decision.with_nu(s.nu));
    }
    Ok(out)
}

/// Keep/drop only: every kept state sits at the top tier, ranked by its
/// top-tier value per bit.
pub fn allocate_keep_drop(
    scored: &[ScoredState],
    tiers: &TierTable,
    d: usize,
    budget_bits: u64,
) -> Result<TierAssignment> {
    let max = tiers.max_tier().id;
    let r = tiers.max_tier().rate_bits(d);
    let mut remaining = budget_bits - protected_demand(scored, tiers, d, budget_bits)?;
    let mut out = TierAssignment::new();
    let mut order = Vec::new();
    for s in scored {
        let nu = s.nu_at(max);
        if s.protected {
            out.insert(s.id, Decision::keep(max, true).with_nu(nu));
        } else {
            order.push((nu, s.id));
        }
    }
    order.sort_by(by_value_desc);
    for (nu, id) in order {
        let decision = if r <= remaining {
            remaining -= r;
            Decision::keep(max, false)
        } else {
            Decision::dropped()
        };
        out.insert(id, decision.with_nu(nu));
    }
    Ok(out)
}

/// Min-heap entry: lowest ν first, ties broken towards the last state in
/// `(layer, head, token)` order so the greedy's priorities are mirrored.
#[derive(PartialEq)]
struct Victim {
    nu: f64,
    id: StateId,
    idx: usize,
    tier: u8,
}

impl Eq for Victim {}

impl PartialOrd for Victim {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Victim {
    fn cmp(&self, other: &Self) -> Ordering {
        other.nu.total_cmp(&self.nu).then(self.id.cmp(&other.id))
    }
}

fn downtier(
    scored: &[ScoredState],
    tiers: &TierTable,
    d: usize,
    budget_bits: u64,
    start_at_max: bool,
    allow_drop: bool,
) -> Result<TierAssignment> {
    protected_demand(scored, tiers, d, budget_bits)?;
    let max = tiers.max_tier().id;
    let mut tier: Vec<u8> = scored
        .iter()
        .map(|s| if s.protected || start_at_max { max } else { s.best_tier })
        .collect();
    let mut used: u64 = tier.iter().map(|&t| tiers.rate_bits(t, d)).sum();
    let floor = if allow_drop { 0 } else { 1 };
    let mut heap: BinaryHeap<Victim> = scored
        .iter()
        .enumerate()
        .filter(|(i, s)| !s.protected && tier[*i] > floor)
        .map(|(i, s)| Victim { nu: s.nu_at(tier[i]), id: s.id, idx: i, tier: tier[i] })
        .collect();
    while used > budget_bits {
        let Some(v) = heap.pop() else {
            return Err(SphKvError::InfeasibleBudget { demand: used, budget: budget_bits });
        };
        let next = v.tier - 1;
        used -= tiers.rate_bits(v.tier, d) - tiers.rate_bits(next, d);
        tier[v.idx] = next;
        if next > floor {
            heap.push(Victim { nu: scored[v.idx].nu_at(next), id: v.id, idx: v.idx, tier: next });
        }
    }
    Ok(scored
        .iter()
        .zip(&tier)
        .map(|(s, &t)| {
            let decision = if t == 0 { Decision::dropped() } else { Decision::keep(t, s.protected) };
            (s.id, decision.with_nu(s.nu_at(t)))
        })
        .collect())
}

/// Starts every state at its best tier and repeatedly lowers the state with the
/// lowest current value per bit by one tier, dropping only from the lowest
/// retained tier, until the budget holds.
pub fn downtier_before_drop(
    scored: &[ScoredState],
    tiers: &TierTable,
    d: usize,
    budget_bits: u64,
) -> Result<TierAssignment> {
    downtier(scored, tiers, d, budget_bits, false, true)
}

/// Keeps every state: starts at the top tier and lowers tiers by value per bit,
/// never dropping. Fails when even the lowest tier everywhere exceeds the budget.
pub fn allocate_quant_only(
    scored: &[ScoredState],
    tiers: &TierTable,
    d: usize,
    budget_bits: u64,
) -> Result<TierAssignment> {
    downtier(scored, tiers, d, budget_bits, true, false)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{calibrated_tiers, features};
    use super::*;

    fn scored(n: usize, lambda: f64, protect: &[usize]) -> Vec<ScoredState> {
        let tiers = calibrated_tiers();
        let f = features(1, 2, 16);
        let states: Vec<(StateId, f64)> = (0..n)
            .map(|i| (StateId::new(0, i % 2, i / 2), 0.5 + (i as f64 * 0.37).sin().abs() * 3.0))
            .collect();
        score_all(&states, |id| protect.contains(&(id.token * 2 + id.head)), &f, &tiers, lambda).unwrap()
    }

    #[test]
    fn greedy_respects_budget_and_protection() {
        let tiers = calibrated_tiers();
        let s = scored(20, 0.0, &[0, 1]);
        for budget in [0u64, 60, 200, 500, 1000, 5000] {
            match allocate_greedy(&s, &tiers, 16, budget) {
                Ok(a) => {
                    a.check(&tiers, 16, budget).unwrap();
                    assert_eq!(a.len(), 20);
                    assert!(a.get(StateId::new(0, 0, 0)).unwrap().protected);
                }
                Err(SphKvError::InfeasibleProtection { demand, .. }) => assert!(demand > budget),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn greedy_keeps_everything_with_ample_budget() {
        let tiers = calibrated_tiers();
        let s = scored(10, 0.0, &[]);
        let a = allocate_greedy(&s, &tiers, 16, u64::MAX / 2).unwrap();
        assert!(a.iter().all(|(_, x)| x.retained && x.tier == 3));
    }

    #[test]
    fn greedy_is_invariant_to_input_order() {
        let tiers = calibrated_tiers();
        let s = scored(30, 0.0, &[3]);
        let mut r = s.clone();
        r.reverse();
        assert_eq!(allocate_greedy(&s, &tiers, 16, 900).unwrap(), allocate_greedy(&r, &tiers, 16, 900).unwrap());
    }

    #[test]
    fn solved_lambda_fits_budget() {
        let tiers = calibrated_tiers();
        let mut s = scored(40, 0.0, &[]);
        for budget in [100u64, 700, 2000] {
            let lambda = solve_lambda(&s, budget);
            rescore(&mut s, lambda);
            let demand: u64 = s.iter().map(|x| x.rate[usize::from(x.best_tier)]).sum();
            assert!(demand <= budget);
            let a = allocate_greedy(&s, &tiers, 16, budget).unwrap();
            assert_eq!(a.total_bits(&tiers, 16), demand);
        }
    }

    #[test]
    fn downtier_feasible_and_tightening_never_raises_bits() {
        let tiers = calibrated_tiers();
        let s = scored(30, 0.0, &[5]);
        let mut last = u64::MAX;
        for budget in [4000u64, 2500, 1500, 800, 300, 150] {
            let a = downtier_before_drop(&s, &tiers, 16, budget).unwrap();
            a.check(&tiers, 16, budget).unwrap();
            let bits = a.total_bits(&tiers, 16);
            assert!(bits <= last);
            last = bits;
        }
    }

    #[test]
    fn quant_only_never_drops() {
        let tiers = calibrated_tiers();
        let s = scored(10, 0.0, &[]);
        let low = tiers.rate_bits(1, 16) * 10;
        let a = allocate_quant_only(&s, &tiers, 16, low).unwrap();
        assert_eq!(a.retained(), 10);
        assert!(matches!(
            allocate_quant_only(&s, &tiers, 16, low - 1),
            Err(SphKvError::InfeasibleBudget { .. })
        ));
    }

    #[test]
    fn keep_drop_uses_only_top_tier() {
        let tiers = calibrated_tiers();
        let s = scored(10, 0.0, &[]);
        let a = allocate_keep_drop(&s, &tiers, 16, 3 * tiers.rate_bits(3, 16)).unwrap();
        assert_eq!(a.retained(), 3);
        assert!(a.iter().all(|(_, x)| !x.retained || x.tier == 3));
    }
}
