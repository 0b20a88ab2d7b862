//! Tier-homogeneous paged KV store.
//!
//! Every page holds items of exactly one tier for one `(layer, head)`. Keys are
//! kept as packed structure-of-arrays code streams (all items' angle 0, then
//! angle 1, ...), followed by a packed radius stream. Values stay dense and are
//! accounted at 2 bytes per entry. A pointer table lists each head's pages in
//! append order.

use std::collections::BTreeMap;

use half::f16;

use crate::bits::{pack, unpack, BitReader};
use crate::codec::{
    dequantize_radius, encode_key, AngleCode, AngleLut, RadiusCode, SphericalKey, TierSpec,
    TierTable,
};
use crate::controller::{StateId, TierAssignment};
use crate::error::{Result, SphKvError};
use crate::meter::{Traffic, TrafficMeter};

pub const HEADER_BYTES: u64 = 16;
pub const PTR_ENTRY_BYTES: u64 = 8;
pub const VALUE_ENTRY_BYTES: u64 = 2;

/// Radius scale of a page opened by a decode-time append, relative to the
/// radius of its first item, so later appends of larger keys still fit.
pub const APPEND_SCALE_HEADROOM: f64 = 2.0;

/// Supplies the key and value of each prefill state.
pub trait KvSource {
    fn key(&self, id: StateId) -> Option<&SphericalKey>;
    fn value(&self, id: StateId) -> Option<&[f64]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageHeader {
    pub tier_id: u8,
    pub count: usize,
    pub radius_scale: f64,
    /// One protect bit per used slot.
    pub protect: Vec<bool>,
    pub layer: usize,
    pub head: usize,
}

#[derive(Debug, Clone)]
pub struct Page {
    pub header: PageHeader,
    tier: TierSpec,
    angle_stream: Vec<u8>,
    radius_stream: Vec<u8>,
    tag_stream: Vec<u8>,
    values: Vec<f16>,
    /// Source token of each slot. Simulator bookkeeping, not part of the
    /// accounted layout.
    tokens: Vec<usize>,
}

/// Byte footprint of one page, split the way the meter and the resident
/// breakdown consume it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PageBytes {
    pub header: u64,
    pub angle: u64,
    pub radius: u64,
    pub values: u64,
    pub tag: u64,
    pub prot: u64,
}

impl PageBytes {
    pub fn metadata(&self) -> u64 {
        self.header + self.tag + self.prot
    }

    pub fn codes(&self) -> u64 {
        self.angle + self.radius
    }

    pub fn total(&self) -> u64 {
        self.metadata() + self.codes() + self.values
    }
}

fn tag_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

impl Page {
    fn build(
        tier: TierSpec,
        layer: usize,
        head: usize,
        radius_scale: f64,
        items: &[PageItem<'_>],
        d: usize,
    ) -> Result<Self> {
        let n = items.len();
        let mut codes = vec![0u64; n * (d - 1)];
        let mut radii = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * d);
        for (i, it) in items.iter().enumerate() {
            let (a, r) = encode_key(it.key, &tier, radius_scale)?;
            if it.value.len() != d {
                return Err(SphKvError::DimensionMismatch { expected: d, got: it.value.len() });
            }
            for (j, c) in a.codes.into_iter().enumerate() {
                codes[j * n + i] = c;
            }
            radii.push(r.0);
            values.extend(it.value.iter().map(|&v| f16::from_f64(v)));
        }
        let tags: Vec<u64> = items.iter().map(|it| it.token as u64 & tag_mask(tier.meta_bits)).collect();
        Ok(Self {
            header: PageHeader {
                tier_id: tier.id,
                count: n,
                radius_scale,
                protect: items.iter().map(|it| it.protected).collect(),
                layer,
                head,
            },
            tier,
            angle_stream: pack(&codes, tier.angle_bits),
            radius_stream: pack(&radii, tier.radius_bits),
            tag_stream: pack(&tags, tier.meta_bits),
            values,
            tokens: items.iter().map(|it| it.token).collect(),
        })
    }

    pub fn tier(&self) -> &TierSpec {
        &self.tier
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn angle_stream(&self) -> &[u8] {
        &self.angle_stream
    }

    pub fn radius_stream(&self) -> &[u8] {
        &self.radius_stream
    }

    pub fn tag_stream(&self) -> &[u8] {
        &self.tag_stream
    }

    /// Half-precision values, row-major.
    pub fn values(&self) -> &[f16] {
        &self.values
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn bytes(&self, d: usize) -> PageBytes {
        let n = self.header.count as u64;
        let t = &self.tier;
        PageBytes {
            header: HEADER_BYTES,
            angle: (n * (d as u64 - 1) * u64::from(t.angle_bits)).div_ceil(8),
            radius: (n * u64::from(t.radius_bits)).div_ceil(8),
            values: n * d as u64 * VALUE_ENTRY_BYTES,
            tag: (n * u64::from(t.meta_bits)).div_ceil(8),
            prot: n.div_ceil(8),
        }
    }

    /// Angle codes of slot `i`, unpacked from the SoA stream.
    pub fn angle_code(&self, i: usize, d: usize) -> AngleCode {
        let n = self.header.count;
        let b = self.tier.angle_bits;
        let codes = (0..d - 1)
            .map(|j| BitReader::at(&self.angle_stream, (j * n + i) * b as usize).read(b))
            .collect();
        AngleCode { codes }
    }

    pub fn radius_code(&self, i: usize) -> RadiusCode {
        let b = self.tier.radius_bits;
        RadiusCode(BitReader::at(&self.radius_stream, i * b as usize).read(b))
    }

    pub fn decoded_radius(&self, i: usize) -> f64 {
        dequantize_radius(self.radius_code(i).0, self.header.radius_scale, self.tier.radius_bits)
    }

    fn push(&mut self, item: &PageItem<'_>, d: usize) -> Result<()> {
        let n = self.header.count;
        let (a, r) = encode_key(item.key, &self.tier, self.header.radius_scale)?;
        let mut codes = unpack(&self.angle_stream, self.tier.angle_bits, n * (d - 1));
        let mut radii = unpack(&self.radius_stream, self.tier.radius_bits, n);
        let mut tags = unpack(&self.tag_stream, self.tier.meta_bits, n);
        // re-interleave into the wider SoA layout
        let mut next = vec![0u64; (n + 1) * (d - 1)];
        for j in 0..d - 1 {
            next[j * (n + 1)..j * (n + 1) + n].copy_from_slice(&codes[j * n..j * n + n]);
            next[j * (n + 1) + n] = a.codes[j];
        }
        codes = next;
        radii.push(r.0);
        tags.push(item.token as u64 & tag_mask(self.tier.meta_bits));
        self.angle_stream = pack(&codes, self.tier.angle_bits);
        self.radius_stream = pack(&radii, self.tier.radius_bits);
        self.tag_stream = pack(&tags, self.tier.meta_bits);
        self.values.extend(item.value.iter().map(|&v| f16::from_f64(v)));
        self.tokens.push(item.token);
        self.header.protect.push(item.protected);
        self.header.count += 1;
        Ok(())
    }
}

/// One item headed for a page.
#[derive(Debug, Clone, Copy)]
pub struct PageItem<'a> {
    pub token: usize,
    pub key: &'a SphericalKey,
    pub value: &'a [f64],
    pub protected: bool,
}

/// One item yielded by [`PagedStore::stream_head`].
#[derive(Debug, Clone, PartialEq)]
pub struct StreamedItem {
    pub tier: u8,
    pub radius: f64,
    pub angles: AngleCode,
    pub value: Vec<f64>,
    pub protected: bool,
    pub token: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResidentBreakdown {
    pub payload_bytes: u64,
    pub header_bytes: u64,
    pub ptr_bytes: u64,
    pub tag_bytes: u64,
    pub prot_bytes: u64,
    pub frag_bytes: u64,
}

impl ResidentBreakdown {
    pub fn total(&self) -> u64 {
        self.payload_bytes
            + self.header_bytes
            + self.ptr_bytes
            + self.tag_bytes
            + self.prot_bytes
            + self.frag_bytes
    }

    /// Share of resident bytes that is not payload.
    pub fn eta_meta(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            (total - self.payload_bytes) as f64 / total as f64
        }
    }
}

#[derive(Debug)]
pub struct PagedStore {
    d: usize,
    layers: usize,
    heads: usize,
    page_size: usize,
    tiers: TierTable,
    luts: Vec<AngleLut>,
    pages: Vec<Page>,
    pointers: BTreeMap<(usize, usize), Vec<usize>>,
    meter: TrafficMeter,
}

impl PagedStore {
    pub fn new(d: usize, layers: usize, heads: usize, page_size: usize, tiers: TierTable) -> Self {
        assert!(d >= 2 && page_size >= 1);
        let luts = tiers.tiers().iter().map(AngleLut::new).collect();
        let pointers = (0..layers)
            .flat_map(|l| (0..heads).map(move |h| ((l, h), Vec::new())))
            .collect();
        Self { d, layers, heads, page_size, tiers, luts, pages: Vec::new(), pointers, meter: TrafficMeter::new() }
    }

    /// Groups retained states by `(layer, head, tier)` in `(layer, head, token)`
    /// order and chunks each group into pages of at most `page_size` items.
    pub fn pack_pages(
        assignment: &TierAssignment,
        source: &impl KvSource,
        d: usize,
        layers: usize,
        heads: usize,
        page_size: usize,
        tiers: TierTable,
    ) -> Result<Self> {
        let mut store = Self::new(d, layers, heads, page_size, tiers);
        let mut groups: BTreeMap<(usize, usize, u8), Vec<PageItem<'_>>> = BTreeMap::new();
        for (&id, dec) in assignment.iter() {
            if !dec.retained {
                continue;
            }
            let missing = || SphKvError::MissingState { layer: id.layer, head: id.head, token: id.token };
            let key = source.key(id).ok_or_else(missing)?;
            let value = source.value(id).ok_or_else(missing)?;
            if id.layer >= layers || id.head >= heads {
                return Err(SphKvError::UnknownHead { layer: id.layer, head: id.head });
            }
            groups.entry((id.layer, id.head, dec.tier)).or_default().push(PageItem {
                token: id.token,
                key,
                value,
                protected: dec.protected,
            });
        }
        for ((layer, head, tier_id), items) in groups {
            let tier = *store
                .tiers
                .get(tier_id)
                .ok_or_else(|| SphKvError::InvalidTierTable(format!("unknown tier {tier_id}")))?;
            for chunk in items.chunks(page_size) {
                let scale = chunk.iter().map(|it| it.key.radius).fold(0.0, f64::max);
                let page = Page::build(tier, layer, head, scale, chunk, d)?;
                store.insert_page(page);
            }
        }
        Ok(store)
    }

    fn insert_page(&mut self, page: Page) {
        let b = page.bytes(self.d);
        self.meter.add(Traffic::HeaderWrite, b.metadata());
        self.meter.add(Traffic::KCodesWrite, b.codes());
        self.meter.add(Traffic::ValuesWrite, b.values);
        let idx = self.pages.len();
        self.pointers.entry((page.header.layer, page.header.head)).or_default().push(idx);
        self.pages.push(page);
        debug_assert!(self.check_page(idx).is_ok());
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn tiers(&self) -> &TierTable {
        &self.tiers
    }

    pub fn lut(&self, tier_id: u8) -> &AngleLut {
        &self.luts[usize::from(tier_id)]
    }

    pub fn pages(&self) -> &[Page] {
        &self.pages
    }

    pub fn meter(&self) -> &TrafficMeter {
        &self.meter
    }

    pub fn pointer_table(&self) -> &BTreeMap<(usize, usize), Vec<usize>> {
        &self.pointers
    }

    pub fn head_pages(&self, layer: usize, head: usize) -> Result<&[usize]> {
        self.pointers
            .get(&(layer, head))
            .map(Vec::as_slice)
            .ok_or(SphKvError::UnknownHead { layer, head })
    }

    pub fn retained_items(&self) -> usize {
        self.pages.iter().map(Page::len).sum()
    }

    pub fn head_items(&self, layer: usize, head: usize) -> Result<usize> {
        Ok(self.head_pages(layer, head)?.iter().map(|&p| self.pages[p].len()).sum())
    }

    /// Meters one full read of a page: metadata, code streams and value block.
    pub fn meter_page_read(&self, page: &Page) {
        let b = page.bytes(self.d);
        self.meter.add(Traffic::HeaderRead, b.metadata());
        self.meter.add(Traffic::KCodesRead, b.codes());
        self.meter.add(Traffic::ValuesRead, b.values);
    }

    /// Streams a head's pages in pointer order, each page metered once.
    /// Angle codes are returned packed per item; decoding them densely is up to
    /// the caller.
    pub fn stream_head(&self, layer: usize, head: usize) -> Result<Vec<StreamedItem>> {
        let mut out = Vec::new();
        for &p in self.head_pages(layer, head)? {
            let page = &self.pages[p];
            self.meter_page_read(page);
            for i in 0..page.len() {
                out.push(StreamedItem {
                    tier: page.header.tier_id,
                    radius: page.decoded_radius(i),
                    angles: page.angle_code(i, self.d),
                    value: page.values[i * self.d..(i + 1) * self.d].iter().map(|v| v.to_f64()).collect(),
                    protected: page.header.protect[i],
                    token: page.tokens[i],
                });
            }
        }
        Ok(out)
    }

    /// Appends one decode-time state. The item joins the last non-full page of
    /// its `(layer, head, tier)` group when that page's radius scale covers it;
    /// otherwise a new page is opened. Returns the bytes written.
    pub fn append(
        &mut self,
        layer: usize,
        head: usize,
        tier_id: u8,
        item: PageItem<'_>,
    ) -> Result<u64> {
        if tier_id == 0 {
            return Ok(0);
        }
        let tier = *self
            .tiers
            .get(tier_id)
            .ok_or_else(|| SphKvError::InvalidTierTable(format!("unknown tier {tier_id}")))?;
        let d = self.d;
        let page_size = self.page_size;
        let target = self
            .head_pages(layer, head)?
            .iter()
            .rev()
            .copied()
            .find(|&p| self.pages[p].header.tier_id == tier_id)
            .filter(|&p| {
                let pg = &self.pages[p];
                pg.len() < page_size && pg.header.radius_scale >= item.key.radius
            });
        match target {
            Some(p) => {
                let before = self.pages[p].bytes(d);
                self.pages[p].push(&item, d)?;
                debug_assert!(self.check_page(p).is_ok());
                let after = self.pages[p].bytes(d);
                let meta = after.metadata() - before.metadata();
                let codes = after.codes() - before.codes();
                let values = after.values - before.values;
                self.meter.add(Traffic::HeaderWrite, meta);
                self.meter.add(Traffic::KCodesWrite, codes);
                self.meter.add(Traffic::ValuesWrite, values);
                Ok(meta + codes + values)
            }
            None => {
                let scale = item.key.radius * APPEND_SCALE_HEADROOM;
                let page = Page::build(tier, layer, head, scale, &[item], d)?;
                let written = page.bytes(d).total();
                self.insert_page(page);
                Ok(written)
            }
        }
    }

    pub fn resident_breakdown(&self) -> ResidentBreakdown {
        let d = self.d as u64;
        let mut r = ResidentBreakdown::default();
        for page in &self.pages {
            let b = page.bytes(self.d);
            r.payload_bytes += b.angle + b.radius + b.values;
            r.header_bytes += b.header;
            r.tag_bytes += b.tag;
            r.prot_bytes += b.prot;
            let slot_bits = page.tier.rate_bits(self.d) + 1 + 8 * VALUE_ENTRY_BYTES * d;
            r.frag_bytes += ((self.page_size - page.len()) as u64 * slot_bits).div_ceil(8);
        }
        r.ptr_bytes = self.pages.len() as u64 * PTR_ENTRY_BYTES;
        r
    }

    /// Resident bytes per addressable token.
    pub fn b_kv(&self, t_active: usize) -> f64 {
        assert!(t_active >= 1);
        self.resident_breakdown().total() as f64 / t_active as f64
    }

    /// Tier homogeneity, capacity, scale covering and pointer coverage.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(SphKvError::Snapshot(m));
        let mut seen = vec![false; self.pages.len()];
        for (&(l, h), list) in &self.pointers {
            for &p in list {
                if p >= self.pages.len() || seen[p] {
                    return fail(format!("page {p} listed twice or out of range"));
                }
                seen[p] = true;
                let pg = &self.pages[p];
                if (pg.header.layer, pg.header.head) != (l, h) {
                    return fail(format!("page {p} filed under the wrong head"));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return fail("page missing from pointer table".into());
        }
        (0..self.pages.len()).try_for_each(|p| self.check_page(p))
    }

    fn check_page(&self, p: usize) -> Result<()> {
        let fail = |m: String| Err(SphKvError::Snapshot(m));
        let pg = &self.pages[p];
        if pg.len() > self.page_size || pg.len() == 0 || pg.header.protect.len() != pg.len() {
            return fail(format!("page {p} holds {} items", pg.len()));
        }
        if pg.header.tier_id != pg.tier.id || pg.tier.is_drop() {
            return fail(format!("page {p} is not tier-homogeneous"));
        }
        for i in 0..pg.len() {
            if pg.decoded_radius(i) > pg.header.radius_scale * (1.0 + 1e-12) {
                return fail(format!("page {p} radius scale does not cover slot {i}"));
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        d: usize,
        layers: usize,
        heads: usize,
        page_size: usize,
        tiers: TierTable,
        pages: Vec<RawPage>,
        pointer_order: Vec<usize>,
    ) -> Result<Self> {
        let mut store = Self::new(d, layers, heads, page_size, tiers);
        let mut built = Vec::with_capacity(pages.len());
        for raw in pages {
            let tier = *store
                .tiers
                .get(raw.tier_id)
                .ok_or_else(|| SphKvError::Snapshot(format!("unknown tier {}", raw.tier_id)))?;
            let n = raw.protect.len();
            let tags = unpack(&raw.tag_stream, tier.meta_bits, n);
            built.push(Page {
                header: PageHeader {
                    tier_id: raw.tier_id,
                    count: n,
                    radius_scale: raw.radius_scale,
                    protect: raw.protect,
                    layer: raw.layer,
                    head: raw.head,
                },
                tier,
                angle_stream: raw.angle_stream,
                radius_stream: raw.radius_stream,
                tag_stream: raw.tag_stream,
                values: raw.values,
                tokens: tags.into_iter().map(|t| t as usize).collect(),
            });
        }
        for p in pointer_order {
            let pg = built.get(p).ok_or_else(|| SphKvError::Snapshot(format!("bad page index {p}")))?;
            store
                .pointers
                .get_mut(&(pg.header.layer, pg.header.head))
                .ok_or(SphKvError::UnknownHead { layer: pg.header.layer, head: pg.header.head })?
                .push(p);
        }
        store.pages = built;
        store.check_invariants()?;
        Ok(store)
    }
}

pub(crate) struct RawPage {
    pub tier_id: u8,
    pub layer: usize,
    pub head: usize,
    pub radius_scale: f64,
    pub protect: Vec<bool>,
    pub angle_stream: Vec<u8>,
    pub radius_stream: Vec<u8>,
    pub tag_stream: Vec<u8>,
    pub values: Vec<f16>,
}

// ── Dense baseline ──────────────────────────────────────────────────────────

/// `B·L·T·H·(d_K + d_V)·bytes`.
pub fn dense_mem_estimate(
    batch: u64,
    layers: u64,
    tokens: u64,
    heads: u64,
    d_k: u64,
    d_v: u64,
    bytes_per_entry: u64,
) -> u64 {
    batch * layers * tokens * heads * (d_k + d_v) * bytes_per_entry
}

/// Uncompressed contiguous KV cache, accounted at 2 bytes per entry.
#[derive(Debug)]
pub struct DenseKvStore {
    d: usize,
    layers: usize,
    heads: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f16>>,
    meter: TrafficMeter,
}

impl DenseKvStore {
    pub fn new(d: usize, layers: usize, heads: usize) -> Self {
        let n = layers * heads;
        Self {
            d,
            layers,
            heads,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            meter: TrafficMeter::new(),
        }
    }

    fn slot(&self, layer: usize, head: usize) -> Result<usize> {
        if layer < self.layers && head < self.heads {
            Ok(layer * self.heads + head)
        } else {
            Err(SphKvError::UnknownHead { layer, head })
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn meter(&self) -> &TrafficMeter {
        &self.meter
    }

    pub fn append(&mut self, layer: usize, head: usize, key: &[f64], value: &[f64]) -> Result<u64> {
        if key.len() != self.d || value.len() != self.d {
            return Err(SphKvError::DimensionMismatch { expected: self.d, got: key.len() });
        }
        let s = self.slot(layer, head)?;
        self.keys[s].extend_from_slice(key);
        self.values[s].extend(value.iter().map(|&v| f16::from_f64(v)));
        let bytes = self.d as u64 * VALUE_ENTRY_BYTES;
        self.meter.add(Traffic::DenseBaselineKWrite, bytes);
        self.meter.add(Traffic::ValuesWrite, bytes);
        Ok(2 * bytes)
    }

    /// Keys and half-precision values of a head as flat row-major slices,
    /// metered as one read.
    pub fn stream_head(&self, layer: usize, head: usize) -> Result<(&[f64], &[f16])> {
        let s = self.slot(layer, head)?;
        let n = self.keys[s].len() as u64;
        self.meter.add(Traffic::DenseBaselineKRead, n * VALUE_ENTRY_BYTES);
        self.meter.add(Traffic::ValuesRead, n * VALUE_ENTRY_BYTES);
        Ok((&self.keys[s], &self.values[s]))
    }

    pub fn head_len(&self, layer: usize, head: usize) -> Result<usize> {
        Ok(self.keys[self.slot(layer, head)?].len() / self.d)
    }

    pub fn resident_bytes(&self) -> u64 {
        let entries: usize = self.keys.iter().map(Vec::len).sum::<usize>() + self.values.iter().map(Vec::len).sum::<usize>();
        entries as u64 * VALUE_ENTRY_BYTES
    }

    pub fn b_kv(&self, t_active: usize) -> f64 {
        assert!(t_active >= 1);
        self.resident_bytes() as f64 / t_active as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::to_spherical;
    use crate::controller::Decision;
    use std::collections::HashMap;

    struct MapSource {
        keys: HashMap<StateId, SphericalKey>,
        values: HashMap<StateId, Vec<f64>>,
    }

    impl KvSource for MapSource {
        fn key(&self, id: StateId) -> Option<&SphericalKey> {
            self.keys.get(&id)
        }
        fn value(&self, id: StateId) -> Option<&[f64]> {
            self.values.get(&id).map(Vec::as_slice)
        }
    }

    fn tiers() -> TierTable {
        TierTable::parse("tier 0 0 0 0\ntier 1 4 8 0\ntier 2 8 8 8\n").unwrap()
    }

    fn source(d: usize, layers: usize, heads: usize, tokens: usize) -> MapSource {
        let mut keys = HashMap::new();
        let mut values = HashMap::new();
        for l in 0..layers {
            for h in 0..heads {
                for t in 0..tokens {
                    let id = StateId::new(l, h, t);
                    let k: Vec<f64> = (0..d).map(|j| ((t * 7 + j * 3 + l + h) % 11) as f64 - 5.0 + 0.5).collect();
                    keys.insert(id, to_spherical(&k));
                    values.insert(id, (0..d).map(|j| (j + t) as f64 * 0.1).collect());
                }
            }
        }
        MapSource { keys, values }
    }

    fn assign(layers: usize, heads: usize, tokens: usize, tier: impl Fn(usize) -> u8) -> TierAssignment {
        let mut a = TierAssignment::new();
        for l in 0..layers {
            for h in 0..heads {
                for t in 0..tokens {
                    let tier = tier(t);
                    let dec = if tier == 0 { Decision::dropped() } else { Decision::keep(tier, false) };
                    a.insert(StateId::new(l, h, t), dec);
                }
            }
        }
        a
    }

    #[test]
    fn ceiling_page_split() {
        let src = source(4, 1, 1, 5);
        let store = PagedStore::pack_pages(&assign(1, 1, 5, |_| 1), &src, 4, 1, 1, 4, tiers()).unwrap();
        let counts: Vec<usize> = store.pages().iter().map(Page::len).collect();
        assert_eq!(counts, vec![4, 1]);
        assert!(store.resident_breakdown().frag_bytes > 0);
    }

    #[test]
    fn all_dropped_is_empty() {
        let src = source(4, 1, 2, 5);
        let store = PagedStore::pack_pages(&assign(1, 2, 5, |_| 0), &src, 4, 1, 2, 4, tiers()).unwrap();
        let r = store.resident_breakdown();
        assert_eq!(r.payload_bytes, 0);
        assert_eq!(r.total(), 0);
        assert_eq!(store.b_kv(1), 0.0);
        assert!(store.stream_head(0, 1).unwrap().is_empty());
    }

    #[test]
    fn mixed_tiers_stay_homogeneous() {
        let src = source(4, 2, 2, 23);
        let a = assign(2, 2, 23, |t| (t % 3) as u8);
        let store = PagedStore::pack_pages(&a, &src, 4, 2, 2, 4, tiers()).unwrap();
        store.check_invariants().unwrap();
        for pg in store.pages() {
            assert_eq!(pg.header.tier_id, pg.tier().id);
        }
        let kept = a.iter().filter(|(_, d)| d.retained).count();
        assert_eq!(store.retained_items(), kept);
    }

    #[test]
    fn single_full_page_payload() {
        let src = source(4, 1, 1, 8);
        let t = TierTable::parse("tier 0 0 0 0\ntier 1 4 8 0\n").unwrap();
        let store = PagedStore::pack_pages(&assign(1, 1, 8, |_| 1), &src, 4, 1, 1, 8, t).unwrap();
        let r = store.resident_breakdown();
        assert_eq!(r.payload_bytes, 12 + 8 + 64);
        assert_eq!(r.header_bytes, 16);
        assert_eq!(r.ptr_bytes, 8);
        assert_eq!(r.prot_bytes, 1);
        assert_eq!(r.tag_bytes, 0);
        assert_eq!(r.frag_bytes, 0);
        assert!((r.eta_meta() - 25.0 / 109.0).abs() < 1e-15);
    }

    #[test]
    fn doubling_items_doubles_payload() {
        let src = source(6, 1, 1, 32);
        let a16 = assign(1, 1, 32, |t| if t < 16 { 2 } else { 0 });
        let a32 = assign(1, 1, 32, |_| 2);
        let s16 = PagedStore::pack_pages(&a16, &src, 6, 1, 1, 8, tiers()).unwrap();
        let s32 = PagedStore::pack_pages(&a32, &src, 6, 1, 1, 8, tiers()).unwrap();
        assert_eq!(2 * s16.resident_breakdown().payload_bytes, s32.resident_breakdown().payload_bytes);
    }

    #[test]
    fn stream_order_and_metering() {
        let src = source(4, 1, 1, 10);
        let store = PagedStore::pack_pages(&assign(1, 1, 10, |_| 2), &src, 4, 1, 1, 4, tiers()).unwrap();
        let before = store.meter().read_bytes();
        let items = store.stream_head(0, 0).unwrap();
        assert_eq!(items.len(), 10);
        assert_eq!(items.iter().map(|i| i.token).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
        // closed form: 3 pages of (4, 4, 2) items at tier (8,8,8), d = 4
        let page = |n: u64| 16 + (n * 8).div_ceil(8) + n.div_ceil(8) + (n * 3 * 8).div_ceil(8) + n + n * 4 * 2;
        let expected = page(4) + page(4) + page(2);
        assert_eq!(store.meter().read_bytes() - before, expected);
        store.stream_head(0, 0).unwrap();
        assert_eq!(store.meter().read_bytes() - before, 2 * expected);
        assert!(matches!(store.stream_head(3, 0), Err(SphKvError::UnknownHead { .. })));
    }

    #[test]
    fn streamed_codes_match_direct_encoding() {
        let src = source(5, 1, 1, 9);
        let store = PagedStore::pack_pages(&assign(1, 1, 9, |_| 1), &src, 5, 1, 1, 4, tiers()).unwrap();
        for (i, item) in store.stream_head(0, 0).unwrap().iter().enumerate() {
            let key = src.key(StateId::new(0, 0, i)).unwrap();
            let page = &store.pages()[i / 4];
            let (code, _) = encode_key(key, page.tier(), page.header.radius_scale).unwrap();
            assert_eq!(item.angles, code);
        }
    }

    #[test]
    fn append_behaviour() {
        let src = source(4, 1, 1, 3);
        let mut store = PagedStore::pack_pages(&assign(1, 1, 3, |_| 1), &src, 4, 1, 1, 4, tiers()).unwrap();
        let value = [0.0; 4];
        let small = SphericalKey { radius: 0.01, angles: vec![0.1, 0.2, 0.3] };
        let pages = store.pages().len();
        store.append(0, 0, 1, PageItem { token: 3, key: &small, value: &value, protected: false }).unwrap();
        assert_eq!(store.pages().len(), pages);
        assert_eq!(store.pages()[0].len(), 4);

        // page is full now; a big radius also forces a fresh page
        let big = SphericalKey { radius: 1e3, angles: vec![0.1, 0.2, 0.3] };
        store.append(0, 0, 1, PageItem { token: 4, key: &big, value: &value, protected: true }).unwrap();
        assert_eq!(store.pages().len(), pages + 1);
        let mid = SphericalKey { radius: 3e3, angles: vec![0.1, 0.2, 0.3] };
        store.append(0, 0, 1, PageItem { token: 5, key: &mid, value: &value, protected: false }).unwrap();
        assert_eq!(store.pages().len(), pages + 2);
        store.check_invariants().unwrap();

        let written = store.meter().write_bytes();
        let n = store.append(0, 0, 0, PageItem { token: 6, key: &mid, value: &value, protected: false }).unwrap();
        assert_eq!(n, 0);
        assert_eq!(store.meter().write_bytes(), written);
    }

    #[test]
    fn append_slice_sums_to_resident_growth() {
        let src = source(4, 1, 1, 3);
        let mut store = PagedStore::pack_pages(&assign(1, 1, 3, |_| 2), &src, 4, 1, 1, 8, tiers()).unwrap();
        let r0 = store.resident_breakdown();
        let w0 = store.meter().write_bytes();
        let key = SphericalKey { radius: 0.5, angles: vec![1.0, 1.0, 1.0] };
        let written = store.append(0, 0, 2, PageItem { token: 3, key: &key, value: &[1.0; 4], protected: false }).unwrap();
        let r1 = store.resident_breakdown();
        let grown = (r1.payload_bytes + r1.tag_bytes + r1.prot_bytes) - (r0.payload_bytes + r0.tag_bytes + r0.prot_bytes);
        assert_eq!(written, grown);
        assert_eq!(store.meter().write_bytes() - w0, written);
    }

    #[test]
    fn dense_estimate_examples() {
        assert_eq!(dense_mem_estimate(1, 2, 4, 2, 8, 8, 2), 512);
        assert_eq!(dense_mem_estimate(1, 1, 1, 1, 1, 1, 1), 2);
        let mut dense = DenseKvStore::new(8, 2, 2);
        for l in 0..2 {
            for h in 0..2 {
                for _ in 0..4 {
                    dense.append(l, h, &[1.0; 8], &[2.0; 8]).unwrap();
                }
            }
        }
        assert_eq!(dense.resident_bytes(), dense_mem_estimate(1, 2, 4, 2, 8, 8, 2));
    }
}
