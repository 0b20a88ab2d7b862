//! `sphkv`: calibration, single rollouts, frontier sweeps and frontier
//! verification.
//!
//! Stdout carries progress lines only; every result is written to files under
//! the output directory. Exit status: 0 on success, 1 on runtime errors, 2 on
//! usage errors, 3 when an invariant check or a verification fails.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sphkv::codec::calibrate_distortion;
use sphkv::config::RunConfig;
use sphkv::decode::{decode_rollout, AttentionPath, Cache, DecodeTrace};
use sphkv::frontier::{
    dense_key_bits, dense_reference, feasible_points, frontier_csv, frontier_flags, panel_summary,
    parse_frontier_csv, plan_variant, prepare_seed, rollout_config, summary_csv, sweep_invariants, RunRecord,
    Variant,
};
use sphkv::snapshot::write_snapshot;
use sphkv::stability::gate_log_csv;
use sphkv::workload::{generate, quality_score};

const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "sphkv", version, about = "Spherical KV cache compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the workload seed (and the sweep seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the sweep worker count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Measure per-tier distortion on a seeded key sample.
    Calibrate(Common),
    /// Run one variant at the configured budget and write its trace.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "joint")]
        variant: Variant,
    },
    /// Run the variant × budget × seed grid and write frontier reports.
    Sweep(Common),
    /// Recompute the flags of a frontier CSV and compare them with the file.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Frontier CSV; defaults to `<out>/frontier.csv`.
        frontier: Option<PathBuf>,
    },
}

enum Outcome {
    Ok,
    Violations(Vec<String>),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(c) => load(&c).and_then(|cfg| calibrate(&cfg)),
        Command::Rollout { common, variant } => load(&common).and_then(|cfg| rollout(&cfg, variant)),
        Command::Sweep(c) => load(&c).and_then(|cfg| sweep(&cfg)),
        Command::Verify { common, frontier } => load(&common).and_then(|cfg| verify(&cfg, frontier)),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violations(v)) => {
            for m in &v {
                println!("violation: {m}");
            }
            ExitCode::from(EXIT_INVARIANT)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.workload.seed = s;
        cfg.sweep.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = c.workers {
        cfg.sweep.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

// ── Commands ────────────────────────────────────────────────────────────────

fn calibrate(cfg: &RunConfig) -> Result<Outcome> {
    let seed = cfg.workload.seed;
    println!("calibrate: {} tiers, seed {seed}", cfg.tiers.len());
    let w = generate(&cfg.workload, seed)?;
    let sample = w.calibration_sample(cfg.sweep.calibration_sample);
    let mut csv = String::from("tier,eps_theta,eps_r\n");
    for t in cfg.tiers.tiers().iter().filter(|t| !t.is_drop()) {
        let eps = calibrate_distortion(t, &sample, seed)?;
        writeln!(csv, "{},{},{}", t.id, eps.eps_theta, eps.eps_r)?;
    }
    write(&cfg.out_dir, "calibration.csv", &csv)?;
    write(&cfg.out_dir, "config.txt", &cfg.to_string())?;
    Ok(Outcome::Ok)
}

fn rollout(cfg: &RunConfig, variant: Variant) -> Result<Outcome> {
    let seed = cfg.workload.seed;
    let sweep = cfg.effective_sweep();
    println!("rollout: {variant}, budget {}, seed {seed}", cfg.rollout_budget);
    let prep = prepare_seed(&cfg.workload, &cfg.tiers, &cfg.controller, seed, sweep.calibration_sample)?;
    let dense = dense_reference(&prep, &sweep)?;
    let w = &prep.workload;
    let mut summary = String::new();
    let trace: DecodeTrace = if variant == Variant::Dense {
        dense.clone()
    } else {
        let budget_bits = (cfg.rollout_budget * dense_key_bits(&cfg.workload) as f64).floor() as u64;
        let (assignment, policy) = plan_variant(variant, &prep, &cfg.controller, budget_bits)
            .with_context(|| format!("planning {variant} at {budget_bits} bits"))?;
        writeln!(summary, "budget_bits={budget_bits} retained={} of {}", assignment.retained(), assignment.len())?;
        write(&cfg.out_dir, &format!("allocation_{variant}.csv"), &assignment.to_csv())?;
        let mut cache = Cache::paged(w, &assignment, prep.tiers.clone())?;
        let rc = sphkv::decode::RolloutConfig { diagnostics: true, ..rollout_config(variant.path(), &w.config, &sweep) };
        let trace = decode_rollout(w, &mut cache, &policy, &rc)?;
        if let Cache::Paged(store) = &cache {
            let b = store.resident_breakdown();
            let mut snap = Vec::new();
            let file_bytes = write_snapshot(store, &mut snap)?;
            writeln!(
                summary,
                "payload_bytes={} header_bytes={} ptr_bytes={} tag_bytes={} prot_bytes={} frag_bytes={} resident_total={} snapshot_bytes={file_bytes}",
                b.payload_bytes, b.header_bytes, b.ptr_bytes, b.tag_bytes, b.prot_bytes, b.frag_bytes, b.total()
            )?;
            fs::create_dir_all(&cfg.out_dir)?;
            fs::write(cfg.out_dir.join(format!("store_{variant}.bin")), &snap)?;
        }
        trace
    };
    let drift = trace.records.iter().filter_map(|r| r.max_drift).fold(0.0, f64::max);
    let checked: Vec<bool> = trace
        .records
        .iter()
        .filter_map(|r| Some(r.max_drift? <= r.drift_bound?))
        .collect();
    let within = checked.iter().filter(|&&x| x).count();
    writeln!(summary, "{}", trace.summary())?;
    writeln!(
        summary,
        "q={} max_drift={drift} steps_within_predicted_drift={within}/{}",
        quality_score(&trace, &dense),
        checked.len()
    )?;
    write(&cfg.out_dir, &format!("trace_{variant}.csv"), &trace.to_csv())?;
    write(&cfg.out_dir, &format!("gate_{variant}.csv"), &gate_log_csv(&trace.gate_log))?;
    write(&cfg.out_dir, &format!("summary_{variant}.txt"), &summary)?;
    if trace.path == AttentionPath::Angle && trace.measured.get(sphkv::meter::Traffic::DenseKRead) != 0 {
        return Ok(Outcome::Violations(vec!["angle path read dense keys".into()]));
    }
    Ok(Outcome::Ok)
}

fn runs_csv(runs: &[RunRecord]) -> String {
    let mut out = String::from("variant,budget_idx,seed,feasible,b_kv,b_hbm,s,q,kept_frac,tokens,eos_hit,failed\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.budget_idx,
            r.seed,
            u8::from(r.feasible),
            r.b_kv,
            r.b_hbm,
            r.s,
            r.q,
            r.kept_frac,
            r.tokens.len(),
            u8::from(r.eos_hit),
            u8::from(r.failed)
        );
    }
    out
}

fn sweep(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.effective_sweep();
    println!(
        "sweep: {} variants x {} budgets x {} seeds, {} workers",
        s.variants.len(),
        s.budgets.len(),
        s.seeds.len(),
        s.workers
    );
    let result = sphkv::frontier::run_sweep(&cfg.workload, &cfg.tiers, &cfg.controller, &s)?;
    println!("sweep: {} runs finished", result.runs.len());
    let violations = sweep_invariants(&result);
    let points = feasible_points(&result.points);
    let mut stab = String::from("variant,budget_idx,disagree,length_drift,s_traj,failure_rate\n");
    for p in &points {
        let st = &p.stability;
        writeln!(stab, "{},{},{},{},{},{}", p.variant, p.budget_idx, st.disagree, st.length_drift, st.s_traj, st.failure_rate)?;
    }
    let summary = panel_summary(&points, s.delta, s.beta);
    if summary.gammas.gamma_s.is_none() {
        println!("warning: no retained points; gamma values are absent");
    }
    write(&cfg.out_dir, "frontier.csv", &frontier_csv(&points, s.delta))?;
    write(&cfg.out_dir, "summary.csv", &summary_csv(&[summary]))?;
    write(&cfg.out_dir, "runs.csv", &runs_csv(&result.runs))?;
    write(&cfg.out_dir, "stability.csv", &stab)?;
    write(&cfg.out_dir, "config.txt", &cfg.to_string())?;
    if violations.is_empty() {
        Ok(Outcome::Ok)
    } else {
        write(&cfg.out_dir, "violations.txt", &(violations.join("\n") + "\n"))?;
        Ok(Outcome::Violations(violations))
    }
}

fn verify(cfg: &RunConfig, frontier: Option<PathBuf>) -> Result<Outcome> {
    let path = frontier.unwrap_or_else(|| cfg.out_dir.join("frontier.csv"));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = parse_frontier_csv(&text)?;
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    let points: Vec<_> = rows.iter().map(|(p, _)| p.clone()).collect();
    let flags = frontier_flags(&points, cfg.sweep.delta);
    let mut mismatches = Vec::new();
    for (i, (p, recorded)) in rows.iter().enumerate() {
        let now = [flags.retained[i], flags.on_envelope[i], flags.is_star[i]];
        if now != *recorded {
            mismatches.push(format!("row {} ({} budget {}): recorded {recorded:?}, recomputed {now:?}", i + 1, p.variant, p.budget_idx));
        }
    }
    println!("verify: {} rows, {} mismatches", rows.len(), mismatches.len());
    Ok(if mismatches.is_empty() { Outcome::Ok } else { Outcome::Violations(mismatches) })
}
