//! Flat binary snapshot of a [`PagedStore`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPHKV1"                                   6 bytes
//! d u16 | page_size u16 | layers u16 | heads u16 | n_tiers u8
//! n_tiers × (id u8, b_theta u8, b_r u8, b_meta u8)
//! page_count u32
//! per page:
//!   header   tier u8 | reserved u8 | layer u16 | head u16 | count u16 | radius_scale f64   (16 bytes)
//!   angle stream  ceil(n·(d-1)·b_theta / 8)
//!   radius stream ceil(n·b_r / 8)
//!   value block   n·d × f16
//!   tag stream    ceil(n·b_meta / 8)
//!   protect bits  ceil(n / 8)
//! pointer table: page_count × (layer u16 | head u16 | page u32), per head in append order
//! ```
//!
//! Everything after the preamble is exactly the resident footprint minus
//! fragmentation, so `file_len == framing_bytes + total - frag`.

use std::io::{Read, Write};

use half::f16;

use crate::bits::{pack, unpack};
use crate::codec::{TierSpec, TierTable};
use crate::error::{Result, SphKvError};
use crate::store::{PagedStore, RawPage, HEADER_BYTES};

pub const MAGIC: &[u8; 6] = b"SPHKV1";

/// Bytes of file framing that are not part of the resident footprint.
pub fn framing_bytes(store: &PagedStore) -> u64 {
    6 + 9 + 4 * store.tiers().len() as u64 + 4
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| SphKvError::Snapshot(format!("{what} = {v} does not fit")))
}

pub fn write_snapshot(store: &PagedStore, mut w: impl Write) -> Result<u64> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [store.d(), store.page_size(), store.layers(), store.heads()] {
        buf.extend_from_slice(&narrow::<u16>(v, "dimension")?.to_le_bytes());
    }
    buf.push(narrow::<u8>(store.tiers().len(), "tier count")?);
    for t in store.tiers().tiers() {
        buf.extend_from_slice(&[t.id, t.angle_bits as u8, t.radius_bits as u8, t.meta_bits as u8]);
    }
    buf.extend_from_slice(&narrow::<u32>(store.pages().len(), "page count")?.to_le_bytes());
    for page in store.pages() {
        let h = &page.header;
        let start = buf.len();
        buf.push(h.tier_id);
        buf.push(0);
        buf.extend_from_slice(&narrow::<u16>(h.layer, "layer")?.to_le_bytes());
        buf.extend_from_slice(&narrow::<u16>(h.head, "head")?.to_le_bytes());
        buf.extend_from_slice(&narrow::<u16>(h.count, "count")?.to_le_bytes());
        buf.extend_from_slice(&h.radius_scale.to_le_bytes());
        debug_assert_eq!((buf.len() - start) as u64, HEADER_BYTES);
        buf.extend_from_slice(page.angle_stream());
        buf.extend_from_slice(page.radius_stream());
        for v in page.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(page.tag_stream());
        let bits: Vec<u64> = h.protect.iter().map(|&p| u64::from(p)).collect();
        buf.extend_from_slice(&pack(&bits, 1));
    }
    for (&(l, h), pages) in store.pointer_table() {
        for &p in pages {
            buf.extend_from_slice(&narrow::<u16>(l, "layer")?.to_le_bytes());
            buf.extend_from_slice(&narrow::<u16>(h, "head")?.to_le_bytes());
            buf.extend_from_slice(&narrow::<u32>(p, "page index")?.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(buf.len() as u64)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SphKvError::Snapshot("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a snapshot back. Values and code streams come back bit-exact. Tier distortion constants are not stored.
pub fn read_snapshot(mut r: impl Read) -> Result<PagedStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(6)? != MAGIC {
        return Err(SphKvError::Snapshot("bad magic".into()));
    }
    let (d, page_size, layers, heads) = (c.u16()?, c.u16()?, c.u16()?, c.u16()?);
    if d < 2 || page_size == 0 {
        return Err(SphKvError::Snapshot("bad dimensions".into()));
    }
    let n_tiers = c.u8()?;
    let mut tiers = Vec::new();
    for _ in 0..n_tiers {
        let t = c.take(4)?;
        tiers.push(TierSpec::new(t[0], t[1].into(), t[2].into(), t[3].into()));
    }
    let tiers = TierTable::new(tiers)?;
    let page_count = c.u32()?;
    let mut pages = Vec::with_capacity(page_count);
    for _ in 0..page_count {
        let tier_id = c.u8()?;
        c.u8()?;
        let (layer, head, n) = (c.u16()?, c.u16()?, c.u16()?);
        let radius_scale = c.f64()?;
        let t = *tiers
            .get(tier_id)
            .ok_or_else(|| SphKvError::Snapshot(format!("unknown tier {tier_id}")))?;
        let angle_stream = c.take((n * (d - 1) * t.angle_bits as usize).div_ceil(8))?.to_vec();
        let radius_stream = c.take((n * t.radius_bits as usize).div_ceil(8))?.to_vec();
        let values = c
            .take(n * d * 2)?
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]))
            .collect();
        let tag_stream = c.take((n * t.meta_bits as usize).div_ceil(8))?.to_vec();
        let protect = unpack(c.take(n.div_ceil(8))?, 1, n).into_iter().map(|b| b == 1).collect();
        pages.push(RawPage {
            tier_id,
            layer,
            head,
            radius_scale,
            protect,
            angle_stream,
            radius_stream,
            tag_stream,
            values,
        });
    }
    let mut order = Vec::with_capacity(page_count);
    for _ in 0..page_count {
        let (_l, _h, p) = (c.u16()?, c.u16()?, c.u32()?);
        order.push(p);
    }
    if c.pos != bytes.len() {
        return Err(SphKvError::Snapshot("trailing bytes".into()));
    }
    PagedStore::from_parts(d, layers, heads, page_size, tiers, pages, order)
}
