//! Decode loop with three interchangeable attention paths.
//!
//! * dense: full-precision keys from a contiguous cache (reference).
//! * angle: logits straight from packed angle and radius codes.
//! * recon: reconstruct dense keys from the codes, then dot (negative control).

use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use half::f16;
use half::slice::HalfFloatSliceExt;

use crate::bits::BitReader;
use crate::codec::{
    dequantize_angle, dequantize_radius, from_spherical, quantize_angle, record_densify, to_spherical, AngleLut,
    QueryTrig, SphericalKey, TierTable,
};
use crate::controller::{distortion_proxy, ControllerFeatures, StateId, TierAssignment};
use crate::error::{Result, SphKvError};
use crate::meter::{MeterSnapshot, Traffic, TrafficMeter};
use crate::stability::{danger_score, gate_step, margin, GateConfig, GateEvent, GateState};
use crate::store::{DenseKvStore, Page, PageItem, PagedStore, VALUE_ENTRY_BYTES};
use crate::workload::{dot, SyntheticWorkload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionPath {
    Dense,
    Angle,
    Recon,
}

impl AttentionPath {
    pub fn name(self) -> &'static str {
        match self {
            AttentionPath::Dense => "dense",
            AttentionPath::Angle => "angle",
            AttentionPath::Recon => "recon",
        }
    }
}

impl fmt::Display for AttentionPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub values: Vec<f64>,
    pub path: AttentionPath,
}

// ── Logit kernels ───────────────────────────────────────────────────────────

/// `qᵀk/√d` for each row of the row-major `keys`.
pub fn dense_logits(q: &[f64], keys: &[f64]) -> Result<LogitVector> {
    let d = q.len();
    if d == 0 || keys.len() % d != 0 {
        return Err(SphKvError::DimensionMismatch { expected: d, got: keys.len() % d.max(1) });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let values = keys.chunks_exact(d).map(|k| dot(q, k) * scale).collect();
    Ok(LogitVector { values, path: AttentionPath::Dense })
}

/// Reusable buffers for the page kernels.
#[derive(Debug, Default)]
pub struct Scratch {
    acc: Vec<f64>,
    prod: Vec<f64>,
    dense: Vec<f64>,
    radii: Vec<f64>,
    codes: Vec<u32>,
    radius_codes: Vec<u32>,
    half: Vec<f32>,
    /// Query-scaled trig tables per tier id, valid where `prescaled` is set.
    tables: Vec<Vec<[f64; 2]>>,
    prescaled: Vec<bool>,
}

impl Scratch {
    fn clear_tables(&mut self) {
        self.prescaled.fill(false);
    }

    /// Tabulates `(cos φ^q_j·cos φ^k, sin φ^q_j·sin φ^k)` over every grid
    /// point of the tier, coordinate-major (`j·2^b + code`). Worth it only
    /// when the head holds at least `2^b` items of that tier.
    fn prescale(&mut self, tier_id: u8, lut: &AngleLut, qt: &QueryTrig) {
        let (Some(closed), Some(periodic)) = (lut.table(false), lut.table(true)) else {
            return;
        };
        let slot = usize::from(tier_id);
        if self.tables.len() <= slot {
            self.tables.resize(slot + 1, Vec::new());
            self.prescaled.resize(slot + 1, false);
        }
        let n_angles = qt.cos.len();
        let t = &mut self.tables[slot];
        t.clear();
        for j in 0..n_angles {
            let grid = if j + 1 == n_angles { periodic } else { closed };
            let (cq, sq) = (qt.cos[j], qt.sin[j]);
            t.extend(grid.iter().map(|&[ck, sk]| [cq * ck, sq * sk]));
        }
        self.prescaled[slot] = true;
    }

    /// Prescales every tabulated tier of which the head holds at least `2^b` items.
    fn prescale_head<'q>(&mut self, store: &PagedStore, pages: &[usize], qt_for: impl Fn(u8) -> &'q QueryTrig) {
        self.clear_tables();
        let mut counts: Vec<usize> = Vec::new();
        for &p in pages {
            let page = &store.pages()[p];
            let slot = usize::from(page.header.tier_id);
            if counts.len() <= slot {
                counts.resize(slot + 1, 0);
            }
            counts[slot] += page.len();
        }
        for (slot, &n) in counts.iter().enumerate() {
            let tier_id = slot as u8;
            let lut = store.lut(tier_id);
            if lut.table(false).is_some_and(|t| n > 0 && n >= t.len()) {
                self.prescale(tier_id, lut, qt_for(tier_id));
            }
        }
    }
}

fn page_radii(page: &Page, out: &mut Vec<f64>, codes: &mut Vec<u32>) {
    let bits = page.tier().radius_bits;
    let scale = page.header.radius_scale;
    let n = page.len();
    out.clear();
    let mut r = BitReader::new(page.radius_stream());
    if bits <= 32 {
        codes.resize(n, 0);
        r.read_into(bits, codes);
        out.extend(codes.iter().map(|&c| dequantize_radius(u64::from(c), scale, bits)));
    } else {
        out.extend((0..n).map(|_| dequantize_radius(r.read(bits), scale, bits)));
    }
}

/// Unpacks the page's angle stream into `codes` (coordinate-major, `codes[j·n + i]`).
/// Returns false when the tier is too wide to tabulate.
fn unpack_angles(page: &Page, lut: &AngleLut, n_angles: usize, codes: &mut Vec<u32>) -> bool {
    if lut.table(false).is_none() {
        return false;
    }
    codes.resize(page.len() * n_angles, 0);
    BitReader::new(page.angle_stream()).read_into(page.tier().angle_bits, codes);
    true
}

const LANES: usize = 4;

/// Cosines of every slot of `page` against the query. Slots are swept in
/// groups of four, each carrying its own running sum and sine product.
fn page_cosines(page: &Page, lut: &AngleLut, qt: &QueryTrig, s: &mut Scratch) {
    let n = page.len();
    let n_angles = qt.cos.len();
    s.acc.clear();
    if !unpack_angles(page, lut, n_angles, &mut s.codes) {
        let bits = page.tier().angle_bits;
        s.acc.resize(n, 0.0);
        s.prod.clear();
        s.prod.resize(n, 1.0);
        let mut rd = BitReader::new(page.angle_stream());
        for j in 0..n_angles {
            let periodic = j + 1 == n_angles;
            for (acc, prod) in s.acc.iter_mut().zip(s.prod.iter_mut()) {
                let (ck, sk) = lut.trig(rd.read(bits), periodic);
                *acc += *prod * (qt.cos[j] * ck);
                *prod *= qt.sin[j] * sk;
            }
        }
        for (acc, prod) in s.acc.iter_mut().zip(&s.prod) {
            *acc += prod;
        }
        return;
    }
    let slot = usize::from(page.header.tier_id);
    if s.prescaled.get(slot) == Some(&true) {
        let table = &s.tables[slot];
        let levels = table.len() / n_angles;
        s.acc.resize(n, 0.0);
        s.prod.clear();
        s.prod.resize(n, 1.0);
        let mask = levels - 1;
        let (acc, prod) = (&mut s.acc[..n], &mut s.prod[..n]);
        for (t, codes) in table.chunks_exact(levels).zip(s.codes.chunks_exact(n)) {
            let t = &t[..=mask];
            for i in 0..n {
                let [x, y] = t[codes[i] as usize & mask];
                acc[i] += prod[i] * x;
                prod[i] *= y;
            }
        }
        for (acc, prod) in s.acc.iter_mut().zip(&s.prod) {
            *acc += prod;
        }
        return;
    }
    let closed = lut.table(false).expect("tabulated tier");
    let periodic = lut.table(true).expect("tabulated tier");
    let last = n_angles - 1;
    let codes = &s.codes;
    let sweep = |i: usize, acc: &mut [f64; LANES], prod: &mut [f64; LANES]| {
        for j in 0..n_angles {
            let table = if j == last { periodic } else { closed };
            let (cq, sq) = (qt.cos[j], qt.sin[j]);
            let row: &[u32; LANES] = codes[j * n + i..j * n + i + LANES].try_into().unwrap();
            for k in 0..LANES {
                let [ck, sk] = table[row[k] as usize];
                acc[k] += prod[k] * (cq * ck);
                prod[k] *= sq * sk;
            }
        }
    };
    let full = n - n % LANES;
    for i in (0..full).step_by(LANES) {
        let mut acc = [0.0f64; LANES];
        let mut prod = [1.0f64; LANES];
        sweep(i, &mut acc, &mut prod);
        s.acc.extend(acc.iter().zip(&prod).map(|(a, p)| a + p));
    }
    for i in full..n {
        let (mut acc, mut prod) = (0.0, 1.0);
        for j in 0..n_angles {
            let table = if j == last { periodic } else { closed };
            let [ck, sk] = table[codes[j * n + i] as usize];
            acc += prod * (qt.cos[j] * ck);
            prod *= qt.sin[j] * sk;
        }
        s.acc.push(acc + prod);
    }
}

fn angle_page_logits(page: &Page, lut: &AngleLut, qt: &QueryTrig, rq_scaled: f64, s: &mut Scratch, out: &mut Vec<f64>) {
    page_cosines(page, lut, qt, s);
    page_radii(page, &mut s.radii, &mut s.radius_codes);
    for (r, c) in s.radii.iter().zip(&s.acc) {
        out.push(rq_scaled * r * c);
    }
}

/// Appends the page's keys, rebuilt densely, to the row-major `s.dense`. The
/// products are the ones `from_spherical` forms.
fn reconstruct_page(page: &Page, lut: &AngleLut, d: usize, meter: &TrafficMeter, s: &mut Scratch) {
    let n = page.len();
    let n_angles = d - 1;
    let start = s.dense.len();
    s.dense.resize(start + n * d, 0.0);
    let rows = &mut s.dense[start..];
    page_radii(page, &mut s.prod, &mut s.radius_codes);
    if unpack_angles(page, lut, n_angles, &mut s.codes) {
        let closed = lut.table(false).expect("tabulated tier");
        let periodic = lut.table(true).expect("tabulated tier");
        let codes = &s.codes;
        for (g, (group, prods)) in rows.chunks_mut(LANES * d).zip(s.prod.chunks_mut(LANES)).enumerate() {
            let i = g * LANES;
            for j in 0..n_angles {
                let table = if j + 1 == n_angles { periodic } else { closed };
                for (k, prod) in prods.iter_mut().enumerate() {
                    let [ck, sk] = table[codes[j * n + i + k] as usize];
                    group[k * d + j] = *prod * ck;
                    *prod *= sk;
                }
            }
        }
    } else {
        let bits = page.tier().angle_bits;
        let mut rd = BitReader::new(page.angle_stream());
        for j in 0..n_angles {
            let periodic = j + 1 == n_angles;
            for (row, prod) in rows.chunks_exact_mut(d).zip(s.prod.iter_mut()) {
                let (ck, sk) = lut.trig(rd.read(bits), periodic);
                row[j] = *prod * ck;
                *prod *= sk;
            }
        }
    }
    for (row, prod) in rows.chunks_exact_mut(d).zip(&s.prod) {
        row[n_angles] = *prod;
    }
    meter.add(Traffic::DenseKWrite, (n * d) as u64 * VALUE_ENTRY_BYTES);
    record_densify(n as u64);
}

/// Scores the rebuilt keys in `s.dense` with the dense kernel, page by page
/// with each page's query, and meters the re-read.
fn score_reconstructed(queries: &[(&[f64], usize)], meter: &TrafficMeter, s: &Scratch, out: &mut Vec<f64>) -> Result<()> {
    meter.add(Traffic::DenseKRead, s.dense.len() as u64 * VALUE_ENTRY_BYTES);
    let mut at = 0;
    for &(q, n) in queries {
        let rows = &s.dense[at..at + n * q.len()];
        out.extend(dense_logits(q, rows)?.values);
        at += rows.len();
    }
    Ok(())
}

fn check_query(q: &[f64], store: &PagedStore) -> Result<()> {
    if q.len() != store.d() {
        return Err(SphKvError::DimensionMismatch { expected: store.d(), got: q.len() });
    }
    Ok(())
}

/// Angle-domain logits `r_q·r̃·cos/√d` for one head, streamed page by page
/// from the packed codes. Each page is metered once (metadata, codes, values).
pub fn angle_logits(q: &[f64], store: &PagedStore, layer: usize, head: usize) -> Result<LogitVector> {
    check_query(q, store)?;
    let qs = to_spherical(q);
    let qt = QueryTrig::new(&qs.angles);
    let rq_scaled = qs.radius / (store.d() as f64).sqrt();
    let mut s = Scratch::default();
    let mut values = Vec::new();
    let pages = store.head_pages(layer, head)?;
    s.prescale_head(store, pages, |_| &qt);
    for &p in pages {
        let page = &store.pages()[p];
        store.meter_page_read(page);
        angle_page_logits(page, store.lut(page.header.tier_id), &qt, rq_scaled, &mut s, &mut values);
    }
    Ok(LogitVector { values, path: AttentionPath::Angle })
}

/// Reconstruct-then-dot logits: every page of the head is rebuilt into one
/// dense buffer, which the dense kernel then scores. Same numbers as
/// [`angle_logits`] to rounding, plus the densification tax of `2·d` written
/// and `2·d` read bytes per item.
pub fn recon_logits(q: &[f64], store: &PagedStore, layer: usize, head: usize) -> Result<LogitVector> {
    check_query(q, store)?;
    let mut s = Scratch::default();
    let mut queries = Vec::new();
    for &p in store.head_pages(layer, head)? {
        let page = &store.pages()[p];
        store.meter_page_read(page);
        reconstruct_page(page, store.lut(page.header.tier_id), q.len(), store.meter(), &mut s);
        queries.push((q, page.len()));
    }
    let mut values = Vec::new();
    score_reconstructed(&queries, store.meter(), &s, &mut values)?;
    Ok(LogitVector { values, path: AttentionPath::Recon })
}

/// Max-subtracted softmax weights.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

/// Softmax weights and the weighted sum of the row-major `values`.
pub fn softmax_mix(logits: &[f64], values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if logits.is_empty() {
        return Err(SphKvError::Empty("logits"));
    }
    if values.len() % logits.len() != 0 {
        return Err(SphKvError::DimensionMismatch { expected: logits.len(), got: values.len() });
    }
    let d = values.len() / logits.len();
    let alpha = softmax(logits);
    let mut out = vec![0.0; d];
    for (a, v) in alpha.iter().zip(values.chunks_exact(d)) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    Ok((alpha, out))
}

/// Adds `Σ α_i·v_i` over the row-major half-precision `values` into `out`.
/// Columns are summed in blocks of eight so each block's running sums stay in
/// registers across all rows.
pub fn mix_half(alpha: &[f64], values: &[f16], out: &mut [f64], buf: &mut Vec<f32>) {
    let d = out.len();
    buf.resize(values.len(), 0.0);
    values.convert_to_f32_slice(buf);
    let rows = &buf[..alpha.len() * d];
    let mut c = 0;
    while c + MIX_BLOCK <= d {
        let mut acc = [0.0f64; MIX_BLOCK];
        for (&a, row) in alpha.iter().zip(rows.chunks_exact(d)) {
            let v: &[f32; MIX_BLOCK] = row[c..c + MIX_BLOCK].try_into().unwrap();
            for (o, &x) in acc.iter_mut().zip(v) {
                *o += a * f64::from(x);
            }
        }
        for (o, x) in out[c..c + MIX_BLOCK].iter_mut().zip(acc) {
            *o += x;
        }
        c += MIX_BLOCK;
    }
    for col in c..d {
        out[col] += alpha.iter().zip(rows.chunks_exact(d)).map(|(a, row)| a * f64::from(row[col])).sum::<f64>();
    }
}

const MIX_BLOCK: usize = 8;

/// `(r_q/√d)·(r_k·ε_θ + ε_r + ε_r·ε_θ)`.
pub fn logit_drift_bound(r_q: f64, r_k: f64, eps_r: f64, eps_theta: f64, d: usize) -> f64 {
    r_q / (d as f64).sqrt() * (r_k * eps_theta + eps_r + eps_r * eps_theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DriftRecord {
    pub max_abs: f64,
    pub l1: f64,
    pub bound: Option<f64>,
}

impl DriftRecord {
    /// The Lipschitz inequality `L1 ≤ 2·max|Δℓ| + 1e-9`.
    pub fn holds(&self) -> bool {
        self.l1 <= 2.0 * self.max_abs + 1e-9
    }
}

pub fn softmax_drift_check(dense: &[f64], approx: &[f64]) -> Result<DriftRecord> {
    if dense.len() != approx.len() {
        return Err(SphKvError::DimensionMismatch { expected: dense.len(), got: approx.len() });
    }
    if dense.is_empty() {
        return Ok(DriftRecord::default());
    }
    let max_abs = dense.iter().zip(approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (p, q) = (softmax(dense), softmax(approx));
    let l1 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
    let rec = DriftRecord { max_abs, l1, bound: None };
    debug_assert!(rec.holds(), "softmax drift exceeds its Lipschitz bound: {rec:?}");
    Ok(rec)
}

// ── Rollout ─────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum Cache {
    Dense(DenseKvStore),
    Paged(PagedStore),
}

impl Cache {
    /// Every prefill state, uncompressed.
    pub fn dense(w: &SyntheticWorkload) -> Result<Self> {
        let c = &w.config;
        let mut store = DenseKvStore::new(c.d, c.layers, c.heads);
        for l in 0..c.layers {
            for h in 0..c.heads {
                for i in 0..c.prefill_len {
                    store.append(l, h, w.dense_key(l, h, i), w.value(l, h, i))?;
                }
            }
        }
        Ok(Cache::Dense(store))
    }

    pub fn paged(w: &SyntheticWorkload, assignment: &TierAssignment, tiers: TierTable) -> Result<Self> {
        let c = &w.config;
        Ok(Cache::Paged(PagedStore::pack_pages(assignment, w, c.d, c.layers, c.heads, c.page_size, tiers)?))
    }

    pub fn meter(&self) -> &TrafficMeter {
        match self {
            Cache::Dense(s) => s.meter(),
            Cache::Paged(s) => s.meter(),
        }
    }

    pub fn b_kv(&self, t_active: usize) -> f64 {
        match self {
            Cache::Dense(s) => s.b_kv(t_active),
            Cache::Paged(s) => s.b_kv(t_active),
        }
    }

    pub fn retained_items(&self) -> usize {
        match self {
            Cache::Dense(s) => s.resident_bytes() as usize / (2 * s.d() * VALUE_ENTRY_BYTES as usize),
            Cache::Paged(s) => s.retained_items(),
        }
    }
}

/// Tier choice for decode-time appends.
#[derive(Debug, Clone)]
pub struct AppendPolicy {
    /// Tiers the policy may choose from, ascending.
    pub candidates: Vec<u8>,
    pub lambda: f64,
    pub features: Option<ControllerFeatures>,
}

impl AppendPolicy {
    pub fn fixed(tier: u8) -> Self {
        Self { candidates: vec![tier], lambda: 0.0, features: None }
    }

    pub fn scored(features: ControllerFeatures, lambda: f64, mut candidates: Vec<u8>) -> Self {
        candidates.sort_unstable();
        candidates.dedup();
        Self { candidates, lambda, features: Some(features) }
    }

    /// Tier maximizing the summed score `−D − λR` of the given new items.
    fn choose(&self, layer: usize, head: usize, token: usize, norms: &[f64], tiers: &TierTable) -> Result<u8> {
        let (Some(feat), [_, _, ..]) = (&self.features, self.candidates.as_slice()) else {
            return Ok(self.candidates[0]);
        };
        let d = feat.d;
        let mut best = self.candidates[0];
        let mut best_score = f64::NEG_INFINITY;
        for &t in &self.candidates {
            let mut score = 0.0;
            for &n in norms {
                let dist = distortion_proxy(StateId::new(layer, head, token), t, n, feat, tiers)?;
                score -= dist + self.lambda * tiers.rate_bits(t, d) as f64;
            }
            if score > best_score {
                best = t;
                best_score = score;
            }
        }
        Ok(best)
    }
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub path: AttentionPath,
    pub steps: usize,
    pub warmup: usize,
    /// Re-choose each head's append tier every `refresh_every` steps; 0 disables.
    pub refresh_every: usize,
    pub gate: Option<GateConfig>,
    /// Compare every head's logits with exact keys each step.
    pub diagnostics: bool,
    /// Code each query's angles at the tier of the page it is scored against.
    pub quantize_query: bool,
}

impl RolloutConfig {
    pub fn new(path: AttentionPath, steps: usize) -> Self {
        Self { path, steps, warmup: 0, refresh_every: 16, gate: None, diagnostics: false, quantize_query: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    pub step: usize,
    pub token: usize,
    pub margin: f64,
    /// Largest `‖q‖/√d` over heads, the query-norm brittleness candidate.
    pub query_norm: f64,
    /// Largest `max|Δℓ|` over heads (diagnostics only).
    pub max_drift: Option<f64>,
    pub l1_softmax: Option<f64>,
    /// Largest analytic drift bound over heads (gate or diagnostics).
    pub drift_bound: Option<f64>,
    pub items_streamed: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub dense_k_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct DecodeTrace {
    pub path: AttentionPath,
    pub tokens: Vec<usize>,
    /// Concatenated attention outputs per step, `width` values each.
    pub outputs: Vec<f64>,
    pub width: usize,
    pub records: Vec<StepRecord>,
    pub warmup: usize,
    /// Meter totals over the measurement window.
    pub measured: MeterSnapshot,
    pub elapsed: Option<Duration>,
    pub gate_log: Vec<GateEvent>,
    pub eos_hit: bool,
    /// Resident bytes per addressable token at the end of the rollout.
    pub b_kv: f64,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens per second over the measurement window.
    pub fn s(&self) -> Option<f64> {
        let n = self.measured.decode_tokens;
        let t = self.elapsed?.as_secs_f64();
        (n > 0 && t > 0.0).then(|| n as f64 / t)
    }

    pub fn b_hbm(&self) -> Option<f64> {
        self.measured.b_hbm()
    }

    /// `step,token,margin,inv_margin,query_norm,max_drift,l1_softmax,read_bytes,write_bytes`.
    /// `inv_margin` and `query_norm` are the two brittleness candidates; the
    /// gate uses the margin.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("step,token,margin,inv_margin,query_norm,max_drift,l1_softmax,read_bytes,write_bytes\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.token,
                r.margin,
                1.0 / (r.margin + 1e-9),
                r.query_norm,
                opt(r.max_drift),
                opt(r.l1_softmax),
                r.read_bytes,
                r.write_bytes
            );
        }
        out
    }

    /// One-line `key=value` summary: throughput, traffic and per-category bytes.
    pub fn summary(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "absent".into());
        let mut out = format!(
            "path={} tokens={} s={} b_hbm={} b_kv={:.3}",
            self.path,
            self.tokens.len(),
            opt(self.s()),
            opt(self.b_hbm()),
            self.b_kv
        );
        for c in Traffic::ALL {
            let _ = write!(out, " {}={}", c.name(), self.measured.get(c));
        }
        out
    }
}

struct HeadState {
    recent: Vec<Vec<f64>>,
    appended: Vec<Vec<f64>>,
    pending: Vec<f64>,
    tier: u8,
    gate: GateState,
}

const RECENT_WINDOW: usize = 16;

struct HeadOut {
    output: Vec<f64>,
    items: u64,
    drift: Option<DriftRecord>,
    bound: Option<f64>,
}

struct Ctx<'a> {
    w: &'a SyntheticWorkload,
    cfg: &'a RolloutConfig,
    scratch: Scratch,
    /// Coded query of the current head per tier id, when queries are coded.
    coded: Vec<Option<(Vec<f64>, QueryTrig)>>,
}

/// The query with its angles snapped to a tier's grid, as trig and, when
/// `dense` is set, rebuilt densely for the recon path.
fn coded_query(qs: &SphericalKey, bits: u32, dense: bool) -> (Vec<f64>, QueryTrig) {
    let n = qs.angles.len();
    let angles: Vec<f64> = qs
        .angles
        .iter()
        .enumerate()
        .map(|(j, &a)| dequantize_angle(quantize_angle(a, bits, j + 1 == n), bits, j + 1 == n))
        .collect();
    let trig = QueryTrig::new(&angles);
    let q = if dense { from_spherical(&SphericalKey { radius: qs.radius, angles }) } else { Vec::new() };
    (q, trig)
}

impl Ctx<'_> {
    fn exact_key<'k>(&'k self, hs: &'k HeadState, layer: usize, head: usize, token: usize) -> &'k [f64] {
        let t_p = self.w.config.prefill_len;
        if token < t_p {
            self.w.dense_key(layer, head, token)
        } else {
            &hs.appended[token - t_p]
        }
    }

    fn paged_head(&mut self, store: &PagedStore, hs: &HeadState, q: &[f64], layer: usize, head: usize) -> Result<HeadOut> {
        let d = store.d();
        let qs = to_spherical(q);
        let qt = QueryTrig::new(&qs.angles);
        let rq_scaled = qs.radius / (d as f64).sqrt();
        let recon = self.cfg.path == AttentionPath::Recon;
        let mut logits = Vec::new();
        let mut tokens = Vec::new();
        let (mut worst_theta, mut worst_r, mut max_scale) = (0.0f64, 0.0f64, 0.0f64);
        let pages = store.head_pages(layer, head)?;
        if self.cfg.quantize_query {
            for &p in pages {
                let page = &store.pages()[p];
                let slot = usize::from(page.header.tier_id);
                if self.coded.len() <= slot {
                    self.coded.resize(slot + 1, None);
                }
                if self.coded[slot].is_none() {
                    self.coded[slot] = Some(coded_query(&qs, page.tier().angle_bits, recon));
                }
            }
        }
        let quantize = self.cfg.quantize_query;
        let page_query = |coded: &[Option<(Vec<f64>, QueryTrig)>], page: &Page| -> (usize, bool) {
            let slot = usize::from(page.header.tier_id);
            (slot, quantize && coded.get(slot).is_some_and(Option::is_some))
        };
        if !recon {
            let coded = &self.coded;
            self.scratch.prescale_head(store, pages, |t| match coded.get(usize::from(t)) {
                Some(Some((_, coded_trig))) if quantize => coded_trig,
                _ => &qt,
            });
        }
        self.scratch.dense.clear();
        for &p in pages {
            let page = &store.pages()[p];
            store.meter_page_read(page);
            let lut = store.lut(page.header.tier_id);
            if recon {
                reconstruct_page(page, lut, d, store.meter(), &mut self.scratch);
            } else {
                let (slot, use_coded) = page_query(&self.coded, page);
                let qt_page = if use_coded { &self.coded[slot].as_ref().unwrap().1 } else { &qt };
                angle_page_logits(page, lut, qt_page, rq_scaled, &mut self.scratch, &mut logits);
            }
            if self.cfg.diagnostics {
                tokens.extend_from_slice(page.tokens());
            }
            if self.cfg.gate.is_some() || self.cfg.diagnostics {
                let eps = store.tiers().distortion(page.header.tier_id)?;
                worst_theta = worst_theta.max(eps.eps_theta);
                worst_r = worst_r.max(eps.eps_r * page.header.radius_scale);
                max_scale = max_scale.max(page.header.radius_scale);
            }
        }
        if recon {
            let queries: Vec<(&[f64], usize)> = pages
                .iter()
                .map(|&p| {
                    let page = &store.pages()[p];
                    let (slot, use_coded) = page_query(&self.coded, page);
                    let qp = if use_coded { self.coded[slot].as_ref().unwrap().0.as_slice() } else { q };
                    (qp, page.len())
                })
                .collect();
            score_reconstructed(&queries, store.meter(), &self.scratch, &mut logits)?;
        }
        let items = logits.len() as u64;
        if logits.is_empty() {
            return Ok(HeadOut { output: vec![0.0; d], items, drift: None, bound: None });
        }
        let alpha = softmax(&logits);
        let mut output = vec![0.0; d];
        let mut k = 0;
        for &p in pages {
            let page = &store.pages()[p];
            mix_half(&alpha[k..k + page.len()], page.values(), &mut output, &mut self.scratch.half);
            k += page.len();
        }
        let bound = (self.cfg.gate.is_some() || self.cfg.diagnostics)
            .then(|| logit_drift_bound(qs.radius, max_scale, worst_r, worst_theta, d));
        let drift = if self.cfg.diagnostics {
            let scale = 1.0 / (d as f64).sqrt();
            let exact: Vec<f64> =
                tokens.iter().map(|&t| dot(q, self.exact_key(hs, layer, head, t)) * scale).collect();
            let mut rec = softmax_drift_check(&exact, &logits)?;
            rec.bound = bound;
            Some(rec)
        } else {
            None
        };
        Ok(HeadOut { output, items, drift, bound })
    }
}

/// Runs `cfg.steps` autoregressive steps (fewer if the LM emits EOS).
///
/// Per step and head: build the query, compute logits on the configured path,
/// mix values, then feed all head outputs to the toy LM. The emitted token's
/// key/value is appended to every head at the head's current append tier,
/// which is re-chosen every `refresh_every` steps from the items appended since
/// the last refresh; existing pages are never rewritten. With a gate, a head in
/// protected mode appends at the top tier with its protect bit set.
pub fn decode_rollout(
    w: &SyntheticWorkload,
    cache: &mut Cache,
    policy: &AppendPolicy,
    cfg: &RolloutConfig,
) -> Result<DecodeTrace> {
    let c = &w.config;
    let (d, t_p) = (c.d, c.prefill_len);
    match (cfg.path, &*cache) {
        (AttentionPath::Dense, Cache::Dense(_)) | (AttentionPath::Angle | AttentionPath::Recon, Cache::Paged(_)) => {}
        _ => return Err(SphKvError::Config(format!("{} path does not match the cache kind", cfg.path))),
    }
    if cfg.steps == 0 {
        return Err(SphKvError::Config("a rollout needs at least one step".into()));
    }
    let tiers = match &*cache {
        Cache::Paged(s) => Some(s.tiers().clone()),
        Cache::Dense(_) => None,
    };
    let max_tier = tiers.as_ref().map(|t| t.max_tier().id).unwrap_or(0);
    let mut heads = Vec::with_capacity(c.layers * c.heads);
    for l in 0..c.layers {
        for h in 0..c.heads {
            let tier = match &tiers {
                Some(t) => policy.choose(l, h, t_p, &[1.0], t)?,
                None => 0,
            };
            heads.push(HeadState { recent: Vec::new(), appended: Vec::new(), pending: Vec::new(), tier, gate: GateState::default() });
        }
    }
    let width = c.layers * c.heads * d;
    let mut ctx = Ctx { w, cfg, scratch: Scratch::default(), coded: Vec::new() };
    let mut trace = DecodeTrace {
        path: cfg.path,
        tokens: Vec::with_capacity(cfg.steps),
        outputs: Vec::with_capacity(cfg.steps * width),
        width,
        records: Vec::with_capacity(cfg.steps),
        warmup: cfg.warmup,
        measured: MeterSnapshot::default(),
        elapsed: None,
        gate_log: Vec::new(),
        eos_hit: false,
        b_kv: 0.0,
    };
    let mut prev = w.start_token();
    let mut started: Option<Instant> = None;
    let mut outputs: Vec<Vec<f64>> = vec![Vec::new(); c.layers * c.heads];
    for step in 0..cfg.steps {
        if step == cfg.warmup {
            cache.meter().reset();
            started = Some(Instant::now());
        }
        let before = cache.meter().snapshot();
        let wrap = |e: SphKvError| SphKvError::Step { step, source: Box::new(e) };
        let mut record = StepRecord { step, ..StepRecord::default() };
        let mut bounds = Vec::with_capacity(heads.len());
        for l in 0..c.layers {
            for h in 0..c.heads {
                let hidx = l * c.heads + h;
                let q = w.query(l, h, step, prev, &heads[hidx].recent);
                record.query_norm = record.query_norm.max(dot(&q, &q).sqrt() / (d as f64).sqrt());
                let out = match &*cache {
                    Cache::Dense(store) => {
                        let (keys, values) = store.stream_head(l, h).map_err(wrap)?;
                        let logits = dense_logits(&q, keys).map_err(wrap)?;
                        let mut o = vec![0.0; d];
                        mix_half(&softmax(&logits.values), values, &mut o, &mut ctx.scratch.half);
                        HeadOut { output: o, items: logits.values.len() as u64, drift: None, bound: None }
                    }
                    Cache::Paged(store) => {
                        ctx.coded.clear();
                        ctx.paged_head(store, &heads[hidx], &q, l, h).map_err(wrap)?
                    }
                };
                record.items_streamed += out.items;
                if let Some(dr) = out.drift {
                    record.max_drift = Some(record.max_drift.unwrap_or(0.0).max(dr.max_abs));
                    record.l1_softmax = Some(record.l1_softmax.unwrap_or(0.0).max(dr.l1));
                }
                if let Some(b) = out.bound {
                    record.drift_bound = Some(record.drift_bound.unwrap_or(0.0).max(b));
                }
                bounds.push(out.bound.unwrap_or(0.0));
                outputs[hidx] = out.output;
            }
        }
        let flat = outputs.concat();
        let lm_logits = w.lm.logits(&flat, prev, step);
        let token = crate::workload::choose_token(&lm_logits, &w.lm, step);
        let m = margin(&lm_logits);
        if step >= cfg.warmup {
            cache.meter().add_decode_token();
        }

        // gate, then appends
        for (hidx, hs) in heads.iter_mut().enumerate() {
            let (l, h) = (hidx / c.heads, hidx % c.heads);
            if let Some(gc) = &cfg.gate {
                let scaled = bounds[hidx] * gc.alpha_for(d) * (d as f64).sqrt();
                let danger = danger_score(scaled, m);
                let before_mode = hs.gate.mode;
                let (action, next) = gate_step(danger, hs.gate, gc);
                hs.gate = next;
                trace.gate_log.push(GateEvent { step, layer: l, head: h, danger, before: before_mode, after: next.mode, action });
            }
            let (k, v) = w.decode_kv(l, h, step, token);
            let ks = to_spherical(&k);
            let tok_idx = t_p + step;
            match cache {
                Cache::Dense(store) => {
                    store.append(l, h, &k, &v).map_err(wrap)?;
                }
                Cache::Paged(store) => {
                    let protected = hs.gate.is_protected();
                    let tier = if protected { max_tier } else { hs.tier };
                    let item = PageItem { token: tok_idx, key: &ks, value: &v, protected };
                    store.append(l, h, tier, item).map_err(wrap)?;
                    hs.pending.push(ks.radius);
                    if cfg.refresh_every > 0 && (step + 1) % cfg.refresh_every == 0 {
                        let t = tiers.as_ref().expect("paged cache has tiers");
                        hs.tier = policy.choose(l, h, tok_idx, &hs.pending, t).map_err(wrap)?;
                        hs.pending.clear();
                    }
                }
            }
            hs.recent.push(k.clone());
            if hs.recent.len() > RECENT_WINDOW {
                hs.recent.remove(0);
            }
            if cfg.diagnostics {
                hs.appended.push(k);
            }
        }

        let after = cache.meter().snapshot();
        let delta = after.since(&before);
        record.token = token;
        record.margin = m;
        record.read_bytes = delta.read_bytes();
        record.write_bytes = delta.write_bytes();
        record.dense_k_bytes = delta.get(Traffic::DenseKRead) + delta.get(Traffic::DenseKWrite);
        trace.records.push(record);
        trace.tokens.push(token);
        trace.outputs.extend_from_slice(&flat);
        prev = token;
        if w.lm.eos == Some(token) {
            trace.eos_hit = true;
            break;
        }
    }
    if let Some(t0) = started {
        trace.elapsed = Some(t0.elapsed());
        trace.measured = cache.meter().snapshot();
    }
    trace.b_kv = cache.b_kv(t_p + trace.tokens.len());
    Ok(trace)
}

/// Closed-form bytes one full read of a head group costs on the paged store.
pub fn head_read_bytes(store: &PagedStore, layer: usize, head: usize) -> Result<u64> {
    Ok(store
        .head_pages(layer, head)?
        .iter()
        .map(|&p| store.pages()[p].bytes(store.d()).total())
        .sum())
}
