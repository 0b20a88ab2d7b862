use sphkv::codec::TierTable;
use sphkv::config::{RunConfig, DEFAULT_TIERS};
use sphkv::controller::ControllerConfig;
use sphkv::decode::{decode_rollout, AttentionPath, Cache, RolloutConfig};
use sphkv::frontier::{
    dense_key_bits, frontier_csv, frontier_flags, panel_summary, parse_frontier_csv, plan_variant, prepare_seed,
    run_sweep, sweep_invariants, SweepConfig, Variant,
};
use sphkv::snapshot::{read_snapshot, write_snapshot};
use sphkv::workload::WorkloadConfig;

fn small() -> WorkloadConfig {
    WorkloadConfig {
        prefill_len: 128,
        prefix_end: 16,
        retrieved_end: 96,
        page_size: 16,
        decode_len: 16,
        max_len: 16,
        ..WorkloadConfig::default()
    }
}

fn tiers() -> TierTable {
    TierTable::parse(DEFAULT_TIERS).unwrap()
}

#[test]
fn sweep_is_deterministic_apart_from_timing() {
    let sweep = SweepConfig { budgets: vec![0.1, 0.4], seeds: vec![0, 1], ..SweepConfig::default() };
    let a = run_sweep(&small(), &tiers(), &ControllerConfig::default(), &sweep).unwrap();
    let b = run_sweep(&small(), &tiers(), &ControllerConfig::default(), &sweep).unwrap();
    assert_eq!(a.runs.len(), b.runs.len());
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!((x.variant, x.budget_idx, x.seed, x.feasible), (y.variant, y.budget_idx, y.seed, y.feasible));
        assert_eq!(x.tokens, y.tokens);
        assert_eq!((x.q, x.b_kv, x.b_hbm), (y.q, y.b_kv, y.b_hbm));
    }
    assert!(sweep_invariants(&a).is_empty(), "{:?}", sweep_invariants(&a));
}

#[test]
fn frontier_csv_round_trip_keeps_flags() {
    let sweep = SweepConfig { budgets: vec![0.1, 0.3, 0.6], seeds: vec![0], ..SweepConfig::default() };
    let r = run_sweep(&small(), &tiers(), &ControllerConfig::default(), &sweep).unwrap();
    let points: Vec<_> = r.points.into_iter().filter(|p| p.feasible).collect();
    let rows = parse_frontier_csv(&frontier_csv(&points, 0.8)).unwrap();
    let parsed: Vec<_> = rows.iter().map(|(p, _)| p.clone()).collect();
    let flags = frontier_flags(&parsed, 0.8);
    for (i, (_, recorded)) in rows.iter().enumerate() {
        assert_eq!(*recorded, [flags.retained[i], flags.on_envelope[i], flags.is_star[i]]);
    }
    assert_eq!(frontier_flags(&points, 0.8), flags);
}

#[test]
fn star_comes_from_the_joint_envelope() {
    let sweep = SweepConfig { budgets: vec![0.2, 0.5, 1.0], seeds: vec![0], ..SweepConfig::default() };
    let r = run_sweep(&small(), &tiers(), &ControllerConfig::default(), &sweep).unwrap();
    let points: Vec<_> = r.points.into_iter().filter(|p| p.feasible).collect();
    let flags = frontier_flags(&points, 0.8);
    let stars: Vec<usize> = (0..points.len()).filter(|&i| flags.is_star[i]).collect();
    assert!(stars.len() <= 1);
    for i in stars {
        assert_eq!(points[i].variant, Variant::Joint);
        assert!(flags.on_envelope[i] && flags.retained[i]);
        let s = panel_summary(&points, 0.8, 5.0).star.unwrap();
        assert_eq!(s.budget_idx, points[i].budget_idx);
    }
}

#[test]
fn snapshot_after_rollout_restores_the_same_logits() {
    let w = small();
    let prep = prepare_seed(&w, &tiers(), &ControllerConfig::default(), 4, 512).unwrap();
    let bits = dense_key_bits(&w) / 3;
    let (assignment, policy) = plan_variant(Variant::Joint, &prep, &ControllerConfig::default(), bits).unwrap();
    let mut cache = Cache::paged(&prep.workload, &assignment, prep.tiers.clone()).unwrap();
    decode_rollout(&prep.workload, &mut cache, &policy, &RolloutConfig::new(AttentionPath::Angle, 8)).unwrap();
    let Cache::Paged(store) = &cache else { unreachable!() };
    let mut buf = Vec::new();
    write_snapshot(store, &mut buf).unwrap();
    let back = read_snapshot(buf.as_slice()).unwrap();
    let mut again = Vec::new();
    write_snapshot(&back, &mut again).unwrap();
    assert_eq!(buf, again);
    let q = prep.workload.query(1, 1, 99, 5, &[]);
    for l in 0..w.layers {
        for h in 0..w.heads {
            let a = sphkv::decode::angle_logits(&q, store, l, h).unwrap();
            let b = sphkv::decode::angle_logits(&q, &back, l, h).unwrap();
            assert_eq!(a.values, b.values);
        }
    }
}

#[test]
fn config_text_drives_the_same_sweep() {
    let mut c = RunConfig::default();
    c.workload = small();
    c.sweep.budgets = vec![0.3];
    c.sweep.seeds = vec![2];
    c.sweep.variants = vec![Variant::Dense, Variant::Joint];
    let parsed = RunConfig::parse(&c.to_string()).unwrap();
    let a = run_sweep(&c.workload, &c.tiers, &c.controller, &c.effective_sweep()).unwrap();
    let b = run_sweep(&parsed.workload, &parsed.tiers, &parsed.controller, &parsed.effective_sweep()).unwrap();
    let toks = |r: &sphkv::frontier::SweepResult| r.runs.iter().map(|x| x.tokens.clone()).collect::<Vec<_>>();
    assert_eq!(toks(&a), toks(&b));
}
