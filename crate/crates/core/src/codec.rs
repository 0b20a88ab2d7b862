//! Spherical key coding.
//!
//! A key `k` is factored into its radius `‖k‖` and the `d-1` hyperspherical
//! angles of its direction. Angles are quantized per precision tier and the
//! cosine between a query and a coded key is computed straight from the codes
//! with a single running-sine-product pass, so no dense key is ever rebuilt.
//!
//! Angle layout for dimension `d`: `angles[0..d-2]` live in `[0, π]`, the last
//! angle `angles[d-2]` lives in `[0, 2π)`.

use std::cell::Cell;
use std::f64::consts::PI;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SphKvError};

/// Guard added to the radius before normalizing a key.
pub const NORM_EPS: f64 = 1e-12;

/// Widest code the quantizers accept; 53 bits is the f64 mantissa, i.e. lossless.
pub const MAX_CODE_BITS: u32 = 53;

/// Tiers with at most this many angle bits get cos/sin lookup tables.
const LUT_MAX_BITS: u32 = 16;

const TWO_PI: f64 = 2.0 * PI;

thread_local! {
    static DENSIFY_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of dense reconstructions (`from_spherical` and friends) performed on
/// this thread. The angle-domain decode path must leave it untouched.
pub fn densify_count() -> u64 {
    DENSIFY_CALLS.with(Cell::get)
}

fn note_densify() {
    record_densify(1);
}

/// Counts `n` dense reconstructions done outside [`from_spherical`].
pub(crate) fn record_densify(n: u64) {
    DENSIFY_CALLS.with(|c| c.set(c.get() + n));
}

// ── Spherical coordinates ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SphericalKey {
    pub radius: f64,
    pub angles: Vec<f64>,
}

impl SphericalKey {
    pub fn dim(&self) -> usize {
        self.angles.len() + 1
    }
}

fn is_periodic(j: usize, n_angles: usize) -> bool {
    j + 1 == n_angles
}

/// Hyperspherical coordinates of `k`. The zero vector maps to radius 0 with
/// all-zero angles.
pub fn to_spherical(k: &[f64]) -> SphericalKey {
    let d = k.len();
    assert!(d >= 2, "spherical coding needs d >= 2, got {d}");
    let radius = k.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n = d - 1;
    if radius == 0.0 {
        return SphericalKey { radius, angles: vec![0.0; n] };
    }
    let inv = 1.0 / (radius + NORM_EPS);
    let unit: Vec<f64> = k.iter().map(|x| x * inv).collect();

    // tail[j] = ‖unit[j..]‖
    let mut tail = vec![0.0f64; d + 1];
    for j in (0..d).rev() {
        tail[j] = tail[j + 1].hypot(unit[j]);
    }
    let mut angles = Vec::with_capacity(n);
    for j in 0..n - 1 {
        angles.push(tail[j + 1].atan2(unit[j]));
    }
    let mut last = unit[d - 1].atan2(unit[d - 2]);
    if last < 0.0 {
        last += TWO_PI;
    }
    if last >= TWO_PI {
        last = 0.0;
    }
    angles.push(last);
    SphericalKey { radius, angles }
}

/// Inverse map. Counts as a dense reconstruction.
pub fn from_spherical(s: &SphericalKey) -> Vec<f64> {
    note_densify();
    let n = s.angles.len();
    let mut out = Vec::with_capacity(n + 1);
    let mut sin_prod = s.radius;
    for &phi in &s.angles {
        out.push(sin_prod * phi.cos());
        sin_prod *= phi.sin();
    }
    out.push(sin_prod);
    out
}

/// Cosine between two directions given by exact angle vectors, one pass.
pub fn cos_between_angles(q: &[f64], k: &[f64]) -> f64 {
    debug_assert_eq!(q.len(), k.len());
    let mut acc = 0.0;
    let mut prod = 1.0;
    for (a, b) in q.iter().zip(k) {
        acc += prod * a.cos() * b.cos();
        prod *= a.sin() * b.sin();
    }
    acc + prod
}

// ── Tiers ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TierSpec {
    pub id: u8,
    pub angle_bits: u32,
    pub radius_bits: u32,
    pub meta_bits: u32,
}

impl TierSpec {
    pub const DROP: TierSpec = TierSpec { id: 0, angle_bits: 0, radius_bits: 0, meta_bits: 0 };

    pub fn new(id: u8, angle_bits: u32, radius_bits: u32, meta_bits: u32) -> Self {
        Self { id, angle_bits, radius_bits, meta_bits }
    }

    pub fn is_drop(&self) -> bool {
        self.id == 0
    }

    /// Bits charged per retained item: `(d-1)·b_θ + b_r + b_meta`.
    pub fn rate_bits(&self, d: usize) -> u64 {
        (d as u64 - 1) * u64::from(self.angle_bits)
            + u64::from(self.radius_bits)
            + u64::from(self.meta_bits)
    }
}

pub fn rate_bits(t: &TierSpec, d: usize) -> u64 {
    t.rate_bits(d)
}

/// Calibrated per-tier distortion constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distortion {
    pub eps_theta: f64,
    pub eps_r: f64,
}

impl Distortion {
    /// Convention for the drop tier: unit-normalized maximal error.
    pub const DROP: Distortion = Distortion { eps_theta: 1.0, eps_r: 1.0 };
}

/// Ordered tier set; index 0 is drop and `tiers[i].id == i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TierTable {
    tiers: Vec<TierSpec>,
    distortion: Vec<Option<Distortion>>,
}

impl TierTable {
    /// Rates must increase strictly for every `d >= 2`, which holds exactly when
    /// the rate at `d = 2` increases strictly and angle bits never shrink.
    pub fn new(tiers: Vec<TierSpec>) -> Result<Self> {
        let bad = |m: String| Err(SphKvError::InvalidTierTable(m));
        if tiers.len() < 2 {
            return bad("need the drop tier plus at least one retained tier".into());
        }
        if tiers[0] != TierSpec::DROP {
            return bad(format!("tier 0 must be drop with zero bits, got {:?}", tiers[0]));
        }
        for (i, t) in tiers.iter().enumerate().skip(1) {
            if usize::from(t.id) != i {
                return bad(format!("tier at position {i} has id {}", t.id));
            }
            if t.angle_bits == 0 || t.radius_bits == 0 {
                return bad(format!("tier {i} needs angle_bits >= 1 and radius_bits >= 1"));
            }
            if t.angle_bits > MAX_CODE_BITS || t.radius_bits > MAX_CODE_BITS || t.meta_bits > 32 {
                return bad(format!("tier {i} exceeds {MAX_CODE_BITS} bits per code or 32 meta bits"));
            }
            if i >= 2 {
                let p = &tiers[i - 1];
                if t.rate_bits(2) <= p.rate_bits(2) || t.angle_bits < p.angle_bits {
                    return bad(format!("tier {i} does not increase the rate over tier {}", i - 1));
                }
            }
        }
        let n = tiers.len();
        Ok(Self { tiers, distortion: vec![None; n] })
    }

    pub fn len(&self) -> usize {
        self.tiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiers.is_empty()
    }

    pub fn tiers(&self) -> &[TierSpec] {
        &self.tiers
    }

    pub fn get(&self, id: u8) -> Option<&TierSpec> {
        self.tiers.get(usize::from(id))
    }

    pub fn max_tier(&self) -> &TierSpec {
        self.tiers.last().expect("validated non-empty")
    }

    pub fn lowest_retained(&self) -> &TierSpec {
        &self.tiers[1]
    }

    pub fn rate_bits(&self, id: u8, d: usize) -> u64 {
        self.tiers[usize::from(id)].rate_bits(d)
    }

    pub fn is_calibrated(&self) -> bool {
        self.distortion.iter().skip(1).all(Option::is_some)
    }

    pub fn distortion(&self, id: u8) -> Result<Distortion> {
        if id == 0 {
            return Ok(Distortion::DROP);
        }
        self.distortion
            .get(usize::from(id))
            .copied()
            .flatten()
            .ok_or(SphKvError::Uncalibrated(id))
    }

    pub fn set_distortion(&mut self, id: u8, eps: Distortion) {
        self.distortion[usize::from(id)] = Some(eps);
    }

    /// Calibrates every retained tier against the same sample and seed.
    pub fn calibrate(&mut self, sample: &[SphericalKey], seed: u64) -> Result<()> {
        for i in 1..self.tiers.len() {
            let eps = calibrate_distortion(&self.tiers[i], sample, seed)?;
            self.distortion[i] = Some(eps);
        }
        Ok(())
    }

    /// Parses `tier <id> <b_theta> <b_r> <b_meta>` lines; blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tiers = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            tiers.push(parse_tier_line(line)?);
        }
        Self::new(tiers)
    }
}

pub(crate) fn parse_tier_line(line: &str) -> Result<TierSpec> {
    let err = || SphKvError::Config(format!("bad tier line `{line}`"));
    let mut parts = line.split_whitespace();
    if parts.next() != Some("tier") {
        return Err(err());
    }
    let nums: Vec<u32> = parts
        .map(|p| p.parse::<u32>().map_err(|_| err()))
        .collect::<Result<_>>()?;
    if nums.len() != 4 || nums[0] > u32::from(u8::MAX) {
        return Err(err());
    }
    Ok(TierSpec::new(nums[0] as u8, nums[1], nums[2], nums[3]))
}

impl fmt::Display for TierTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tiers {
            writeln!(f, "tier {} {} {} {}", t.id, t.angle_bits, t.radius_bits, t.meta_bits)?;
        }
        Ok(())
    }
}

// ── Quantizers ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AngleCode {
    pub codes: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RadiusCode(pub u64);

fn levels(bits: u32) -> u64 {
    1u64 << bits
}

/// Closed coordinates use `2^b` midpoint cells over `[0, π]`; the periodic
/// coordinate rounds onto the wrapped grid `c·2π/2^b`.
pub fn quantize_angle(phi: f64, bits: u32, periodic: bool) -> u64 {
    let n = levels(bits);
    if periodic {
        let step = TWO_PI / n as f64;
        let c = (phi / step).round();
        if c <= 0.0 {
            0
        } else {
            (c as u64) % n
        }
    } else {
        let step = PI / n as f64;
        let c = (phi / step).floor();
        if c <= 0.0 {
            0
        } else {
            (c as u64).min(n - 1)
        }
    }
}

pub fn dequantize_angle(code: u64, bits: u32, periodic: bool) -> f64 {
    let n = levels(bits) as f64;
    if periodic {
        code as f64 * (TWO_PI / n)
    } else {
        (code as f64 + 0.5) * (PI / n)
    }
}

/// Half the grid step of angle coordinate `j` out of `n_angles`.
pub fn angle_half_step(bits: u32, j: usize, n_angles: usize) -> f64 {
    let range = if is_periodic(j, n_angles) { TWO_PI } else { PI };
    range / levels(bits) as f64 / 2.0
}

pub fn quantize_radius(r: f64, scale: f64, bits: u32) -> u64 {
    if scale <= 0.0 {
        return 0;
    }
    let max = (levels(bits) - 1) as f64;
    let c = (r / scale * max).round();
    if c <= 0.0 {
        0
    } else {
        (c as u64).min(levels(bits) - 1)
    }
}

pub fn dequantize_radius(code: u64, scale: f64, bits: u32) -> f64 {
    let max = (levels(bits) - 1) as f64;
    code as f64 / max * scale
}

/// Half the radius grid step: `scale / (2·(2^b − 1))`.
pub fn radius_half_step(scale: f64, bits: u32) -> f64 {
    scale / (2.0 * (levels(bits) - 1) as f64)
}

pub fn encode_key(
    s: &SphericalKey,
    t: &TierSpec,
    radius_scale: f64,
) -> Result<(AngleCode, RadiusCode)> {
    if t.is_drop() {
        return Err(SphKvError::DropTier);
    }
    if radius_scale < s.radius {
        return Err(SphKvError::ScaleTooSmall { scale: radius_scale, radius: s.radius });
    }
    let n = s.angles.len();
    let codes = s
        .angles
        .iter()
        .enumerate()
        .map(|(j, &phi)| quantize_angle(phi, t.angle_bits, is_periodic(j, n)))
        .collect();
    let r = quantize_radius(s.radius, radius_scale, t.radius_bits);
    Ok((AngleCode { codes }, RadiusCode(r)))
}

pub fn decode_key(
    a: &AngleCode,
    r: RadiusCode,
    t: &TierSpec,
    radius_scale: f64,
) -> Result<SphericalKey> {
    if t.is_drop() {
        return Err(SphKvError::DropTier);
    }
    check_code(r.0, t.radius_bits)?;
    let n = a.codes.len();
    let mut angles = Vec::with_capacity(n);
    for (j, &c) in a.codes.iter().enumerate() {
        check_code(c, t.angle_bits)?;
        angles.push(dequantize_angle(c, t.angle_bits, is_periodic(j, n)));
    }
    Ok(SphericalKey { radius: dequantize_radius(r.0, radius_scale, t.radius_bits), angles })
}

fn check_code(code: u64, bits: u32) -> Result<()> {
    if code >= levels(bits) {
        Err(SphKvError::CodeOutOfRange { code, bits })
    } else {
        Ok(())
    }
}

// ── Compressed-domain cosine ────────────────────────────────────────────────

/// Cosine between exact query angles and a coded key, decoding each angle on
/// the fly inside the running-product pass.
pub fn cos_from_codes(q_angles: &[f64], k_code: &AngleCode, t: &TierSpec) -> f64 {
    debug_assert_eq!(q_angles.len(), k_code.codes.len());
    let n = q_angles.len();
    let mut acc = 0.0;
    let mut prod = 1.0;
    for (j, (&qa, &c)) in q_angles.iter().zip(&k_code.codes).enumerate() {
        let ka = dequantize_angle(c, t.angle_bits, is_periodic(j, n));
        acc += prod * qa.cos() * ka.cos();
        prod *= qa.sin() * ka.sin();
    }
    acc + prod
}

/// Cos/sin of a query's angles, computed once per decode step.
#[derive(Debug, Clone)]
pub struct QueryTrig {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl QueryTrig {
    pub fn new(angles: &[f64]) -> Self {
        Self {
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        }
    }
}

/// Cos/sin of every angle grid point of one tier. Tiers wider than 16 bits
/// fall back to evaluating the trig functions per code; the values are
/// bit-identical either way.
#[derive(Debug, Clone)]
pub struct AngleLut {
    bits: u32,
    closed: Option<Vec<[f64; 2]>>,
    periodic: Option<Vec<[f64; 2]>>,
}

impl AngleLut {
    pub fn new(t: &TierSpec) -> Self {
        let bits = t.angle_bits;
        if t.is_drop() || bits > LUT_MAX_BITS {
            return Self { bits, closed: None, periodic: None };
        }
        let build = |periodic: bool| {
            let n = levels(bits);
            let phis: Vec<f64> = (0..n).map(|c| dequantize_angle(c, bits, periodic)).collect();
            phis.iter().map(|p| [p.cos(), p.sin()]).collect()
        };
        Self { bits, closed: Some(build(false)), periodic: Some(build(true)) }
    }

    /// `[cos, sin]` per code of one angle kind, when tabulated.
    pub fn table(&self, periodic: bool) -> Option<&[[f64; 2]]> {
        let table = if periodic { &self.periodic } else { &self.closed };
        table.as_deref()
    }

    #[inline]
    pub fn trig(&self, code: u64, periodic: bool) -> (f64, f64) {
        let table = if periodic { &self.periodic } else { &self.closed };
        match table {
            Some(t) => {
                let [c, s] = t[code as usize];
                (c, s)
            }
            None => {
                let phi = dequantize_angle(code, self.bits, periodic);
                (phi.cos(), phi.sin())
            }
        }
    }
}

// ── Calibration ─────────────────────────────────────────────────────────────

/// Empirical RMS distortion of tier `t` on `sample`: angular error is the RMS
/// gap between the exact and coded cosine against seeded random queries, radial
/// error is the RMS radius decode error normalized by the sample's max radius.
pub fn calibrate_distortion(t: &TierSpec, sample: &[SphericalKey], seed: u64) -> Result<Distortion> {
    if t.is_drop() {
        return Err(SphKvError::DropTier);
    }
    let first = sample.first().ok_or(SphKvError::Empty("calibration sample"))?;
    let d = first.dim();
    let scale = sample.iter().map(|s| s.radius).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = vec![0.0; d];
    let (mut se_theta, mut se_r) = (0.0, 0.0);
    for key in sample {
        if key.dim() != d {
            return Err(SphKvError::DimensionMismatch { expected: d, got: key.dim() });
        }
        for x in q.iter_mut() {
            *x = StandardNormal.sample(&mut rng);
        }
        let qs = to_spherical(&q);
        let (code, rcode) = encode_key(key, t, scale)?;
        let exact = cos_between_angles(&qs.angles, &key.angles);
        let coded = cos_from_codes(&qs.angles, &code, t);
        se_theta += (exact - coded).powi(2);
        if scale > 0.0 {
            let r = dequantize_radius(rcode.0, scale, t.radius_bits);
            se_r += ((r - key.radius) / scale).powi(2);
        }
    }
    let n = sample.len() as f64;
    Ok(Distortion { eps_theta: (se_theta / n).sqrt(), eps_r: (se_r / n).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn circular_gap(a: f64, b: f64) -> f64 {
        let g = (a - b).rem_euclid(TWO_PI);
        g.min(TWO_PI - g)
    }

    #[test]
    fn axis_aligned_examples() {
        let s = to_spherical(&[1.0, 0.0]);
        assert_eq!(s.radius, 1.0);
        assert_eq!(s.angles, vec![0.0]);

        let s = to_spherical(&[0.0, 2.0]);
        assert_eq!(s.radius, 2.0);
        assert!((s.angles[0] - PI / 2.0).abs() < 1e-15);

        let s = to_spherical(&[0.0; 5]);
        assert_eq!(s.radius, 0.0);
        assert_eq!(s.angles, vec![0.0; 4]);
    }

    #[test]
    fn from_spherical_examples() {
        let v = from_spherical(&SphericalKey { radius: 1.0, angles: vec![0.0] });
        assert_eq!(v, vec![1.0, 0.0]);
        let v = from_spherical(&SphericalKey { radius: 3.0, angles: vec![PI / 2.0, 0.0] });
        assert!(v[0].abs() < 1e-15 && (v[1] - 3.0).abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn round_trip_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &d in &[2usize, 4, 64] {
            for _ in 0..100 {
                let k = random_vec(&mut rng, d);
                let s = to_spherical(&k);
                assert!(s.angles[..d - 2].iter().all(|a| (0.0..=PI).contains(a)));
                assert!((0.0..TWO_PI).contains(&s.angles[d - 2]));
                let back = from_spherical(&s);
                let norm = dot(&k, &k).sqrt();
                let err = k.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(err / norm < 1e-9, "d={d} rel err {}", err / norm);
                let back_norm = dot(&back, &back).sqrt();
                assert!((back_norm - s.radius).abs() / s.radius < 1e-12);
            }
        }
    }

    #[test]
    fn spherical_round_trip_on_canonical_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut angles: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..PI - 0.05)).collect();
            angles.push(rng.random_range(0.0..TWO_PI));
            let s = SphericalKey { radius: rng.random_range(0.1..4.0), angles };
            let back = to_spherical(&from_spherical(&s));
            assert!((back.radius - s.radius).abs() < 1e-12);
            for (j, (a, b)) in back.angles.iter().zip(&s.angles).enumerate() {
                let gap = if j == 5 { circular_gap(*a, *b) } else { (a - b).abs() };
                assert!(gap < 1e-9);
            }
        }
    }

    #[test]
    fn rate_bits_examples() {
        assert_eq!(TierSpec::new(1, 4, 8, 8).rate_bits(64), 268);
        assert_eq!(TierSpec::DROP.rate_bits(64), 0);
        assert_eq!(TierSpec::new(1, 1, 1, 0).rate_bits(2), 2);
    }

    #[test]
    fn tier_table_validation() {
        let ok = TierTable::new(vec![TierSpec::DROP, TierSpec::new(1, 2, 4, 0), TierSpec::new(2, 4, 4, 0)]);
        assert!(ok.is_ok());
        assert!(TierTable::new(vec![TierSpec::new(0, 1, 0, 0), TierSpec::new(1, 2, 4, 0)]).is_err());
        assert!(TierTable::new(vec![TierSpec::DROP, TierSpec::new(1, 0, 4, 0)]).is_err());
        // rate not increasing
        assert!(TierTable::new(vec![TierSpec::DROP, TierSpec::new(1, 4, 4, 0), TierSpec::new(2, 4, 4, 0)]).is_err());
        // angle bits shrink: would invert the order at large d
        assert!(TierTable::new(vec![TierSpec::DROP, TierSpec::new(1, 4, 1, 0), TierSpec::new(2, 3, 8, 0)]).is_err());
    }

    #[test]
    fn tier_table_text_round_trip() {
        let t = TierTable::parse("tier 0 0 0 0\ntier 1 3 6 8\n# top\ntier 2 8 8 8\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(TierTable::parse(&t.to_string()).unwrap(), t);
        assert!(TierTable::parse("tier 0 0 0\n").is_err());
    }

    #[test]
    fn encode_grid_and_range_examples() {
        let t = TierSpec::new(1, 8, 8, 0);
        let s = SphericalKey { radius: 2.0, angles: vec![0.0] };
        let (a, r) = encode_key(&s, &t, 2.0).unwrap();
        assert_eq!(a.codes, vec![0]);
        assert_eq!(r.0, 255);
        let back = decode_key(&a, r, &t, 2.0).unwrap();
        assert_eq!(back.angles[0], 0.0);
        assert!((back.radius - 2.0).abs() < 1e-9);
    }

    #[test]
    fn encode_rejects_small_scale_and_drop() {
        let s = SphericalKey { radius: 2.0, angles: vec![0.1, 0.2] };
        assert!(matches!(
            encode_key(&s, &TierSpec::new(1, 4, 4, 0), 1.0),
            Err(SphKvError::ScaleTooSmall { .. })
        ));
        assert!(matches!(encode_key(&s, &TierSpec::DROP, 2.0), Err(SphKvError::DropTier)));
        let a = AngleCode { codes: vec![0, 0] };
        assert!(matches!(decode_key(&a, RadiusCode(0), &TierSpec::DROP, 1.0), Err(SphKvError::DropTier)));
        let a = AngleCode { codes: vec![16, 0] };
        assert!(matches!(
            decode_key(&a, RadiusCode(0), &TierSpec::new(1, 4, 4, 0), 1.0),
            Err(SphKvError::CodeOutOfRange { code: 16, bits: 4 })
        ));
    }

    #[test]
    fn quantizer_half_step_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tiers = [(1u32, 1u32), (2, 3), (4, 6), (8, 8), (12, 16), (53, 53)];
        for i in 0..1000 {
            let d = [2usize, 4, 16][i % 3];
            let s = to_spherical(&random_vec(&mut rng, d));
            let scale = s.radius * rng.random_range(1.0..2.0);
            for &(bt, br) in &tiers {
                let t = TierSpec::new(1, bt, br, 0);
                let (a, r) = encode_key(&s, &t, scale).unwrap();
                let back = decode_key(&a, r, &t, scale).unwrap();
                for j in 0..d - 1 {
                    let gap = if j + 2 == d {
                        circular_gap(back.angles[j], s.angles[j])
                    } else {
                        (back.angles[j] - s.angles[j]).abs()
                    };
                    let bound = angle_half_step(bt, j, d - 1);
                    assert!(gap <= bound * (1.0 + 1e-12) + 1e-15, "angle gap {gap} > {bound}");
                }
                let rb = radius_half_step(scale, br) + 4.0 * f64::EPSILON * scale;
                assert!((back.radius - s.radius).abs() <= rb);
            }
        }
    }

    #[test]
    fn recurrence_matches_dense_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &d in &[2usize, 4, 64] {
            for _ in 0..500 {
                let q = to_spherical(&random_vec(&mut rng, d));
                let k = to_spherical(&random_vec(&mut rng, d));
                let uq = from_spherical(&SphericalKey { radius: 1.0, angles: q.angles.clone() });
                let uk = from_spherical(&SphericalKey { radius: 1.0, angles: k.angles.clone() });
                let c = cos_between_angles(&q.angles, &k.angles);
                assert!((c - dot(&uq, &uk)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cos_from_codes_examples() {
        let t = TierSpec::new(1, 2, 1, 0);
        // φ_k = π/2 sits on the periodic 2-bit grid (code 1)
        let c = cos_from_codes(&[0.0], &AngleCode { codes: vec![1] }, &t);
        assert!(c.abs() < 1e-15);

        let lossless = TierSpec::new(1, 53, 53, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = to_spherical(&random_vec(&mut rng, 16));
        let (code, _) = encode_key(&s, &lossless, s.radius).unwrap();
        assert!((cos_from_codes(&s.angles, &code, &lossless) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lut_matches_direct_trig() {
        let t = TierSpec::new(1, 6, 4, 0);
        let lut = AngleLut::new(&t);
        for code in 0..64 {
            for periodic in [false, true] {
                let phi = dequantize_angle(code, 6, periodic);
                assert_eq!(lut.trig(code, periodic), (phi.cos(), phi.sin()));
            }
        }
        let wide = AngleLut::new(&TierSpec::new(1, 40, 4, 0));
        let phi = dequantize_angle(12345, 40, false);
        assert_eq!(wide.trig(12345, false), (phi.cos(), phi.sin()));
    }

    #[test]
    fn densify_counter_tracks_reconstructions() {
        let before = densify_count();
        from_spherical(&SphericalKey { radius: 1.0, angles: vec![0.3] });
        assert_eq!(densify_count(), before + 1);
        cos_from_codes(&[0.1], &AngleCode { codes: vec![3] }, &TierSpec::new(1, 4, 4, 0));
        assert_eq!(densify_count(), before + 1);
    }

    fn sample(seed: u64, n: usize, d: usize) -> Vec<SphericalKey> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| to_spherical(&random_vec(&mut rng, d))).collect()
    }

    #[test]
    fn calibration_lossless_and_monotone() {
        let keys = sample(21, 300, 16);
        let lossless = calibrate_distortion(&TierSpec::new(1, 53, 53, 0), &keys, 9).unwrap();
        assert!(lossless.eps_theta <= 1e-9 && lossless.eps_r <= 1e-9);
        let e2 = calibrate_distortion(&TierSpec::new(1, 2, 2, 0), &keys, 9).unwrap();
        let e8 = calibrate_distortion(&TierSpec::new(1, 8, 8, 0), &keys, 9).unwrap();
        assert!(e2.eps_theta > e8.eps_theta);
        assert!(e2.eps_r > e8.eps_r);
        let again = calibrate_distortion(&TierSpec::new(1, 8, 8, 0), &keys, 9).unwrap();
        assert_eq!(e8.eps_theta.to_bits(), again.eps_theta.to_bits());
        assert_eq!(e8.eps_r.to_bits(), again.eps_r.to_bits());
        assert!(calibrate_distortion(&TierSpec::new(1, 8, 8, 0), &[], 9).is_err());
    }

    #[test]
    fn table_calibration_fills_every_tier() {
        let mut t = TierTable::parse("tier 0 0 0 0\ntier 1 2 4 0\ntier 2 6 8 0\n").unwrap();
        assert!(matches!(t.distortion(1), Err(SphKvError::Uncalibrated(1))));
        assert_eq!(t.distortion(0).unwrap(), Distortion::DROP);
        t.calibrate(&sample(4, 64, 8), 1).unwrap();
        assert!(t.is_calibrated());
        assert!(t.distortion(1).unwrap().eps_theta > t.distortion(2).unwrap().eps_theta);
    }
}
