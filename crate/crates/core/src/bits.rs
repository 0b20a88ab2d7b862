//! LSB-first bit packing for fixed-width code streams.

#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_bits(bits: usize) -> Self {
        Self { bytes: Vec::with_capacity(bits.div_ceil(8)), bit_len: 0 }
    }

    pub fn push(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || value >> width == 0, "value {value} wider than {width}");
        let mut remaining = width;
        let mut v = value;
        while remaining > 0 {
            let offset = (self.bit_len % 8) as u32;
            if offset == 0 {
                self.bytes.push(0);
            }
            let take = remaining.min(8 - offset);
            let mask = (1u64 << take) - 1;
            *self.bytes.last_mut().unwrap() |= ((v & mask) as u8) << offset;
            v = if take == 64 { 0 } else { v >> take };
            remaining -= take;
            self.bit_len += take as usize;
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Sequential reader over a packed stream.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn at(bytes: &'a [u8], bit_pos: usize) -> Self {
        Self { bytes, pos: bit_pos }
    }

    /// Reads `width <= 57` bits. Panics when the stream is exhausted.
    #[inline]
    pub fn read(&mut self, width: u32) -> u64 {
        debug_assert!(width <= 57);
        if width == 0 {
            return 0;
        }
        let byte = self.pos / 8;
        let shift = (self.pos % 8) as u32;
        let word = match self.bytes.get(byte..byte + 8) {
            Some(w) => u64::from_le_bytes(w.try_into().unwrap()),
            None => {
                let mut w = [0u8; 8];
                let avail = self.bytes.len().saturating_sub(byte).min(8);
                w[..avail].copy_from_slice(&self.bytes[byte..byte + avail]);
                u64::from_le_bytes(w)
            }
        };
        let raw = word >> shift;
        assert!(self.pos + width as usize <= self.bytes.len() * 8, "bit stream exhausted");
        self.pos += width as usize;
        raw & ((1u64 << width) - 1)
    }
}

impl BitReader<'_> {
    /// Reads `out.len()` consecutive codes of `width <= 32` bits.
    pub fn read_into(&mut self, width: u32, out: &mut [u32]) {
        assert!(width <= 32);
        let total = self.pos + width as usize * out.len();
        assert!(total <= self.bytes.len() * 8, "bit stream exhausted");
        match width {
            0 => out.fill(0),
            1 => unpack_fixed::<1>(self.bytes, self.pos, out),
            2 => unpack_fixed::<2>(self.bytes, self.pos, out),
            3 => unpack_fixed::<3>(self.bytes, self.pos, out),
            4 => unpack_fixed::<4>(self.bytes, self.pos, out),
            5 => unpack_fixed::<5>(self.bytes, self.pos, out),
            6 => unpack_fixed::<6>(self.bytes, self.pos, out),
            7 => unpack_fixed::<7>(self.bytes, self.pos, out),
            8 => unpack_fixed::<8>(self.bytes, self.pos, out),
            9 => unpack_fixed::<9>(self.bytes, self.pos, out),
            10 => unpack_fixed::<10>(self.bytes, self.pos, out),
            11 => unpack_fixed::<11>(self.bytes, self.pos, out),
            12 => unpack_fixed::<12>(self.bytes, self.pos, out),
            _ => unpack_var(self.bytes, self.pos, width, out),
        }
        self.pos = total;
    }
}

#[inline(always)]
fn word_at(bytes: &[u8], byte: usize) -> u64 {
    match bytes.get(byte..byte + 8) {
        Some(w) => u64::from_le_bytes(w.try_into().unwrap()),
        None => {
            let mut w = [0u8; 8];
            let n = bytes.len().saturating_sub(byte).min(8);
            w[..n].copy_from_slice(&bytes[byte..byte + n]);
            u64::from_le_bytes(w)
        }
    }
}

/// Groups of eight `W`-bit codes span exactly `W` bytes, so a byte-aligned
/// start unpacks eight codes per load.
fn unpack_fixed<const W: u32>(bytes: &[u8], pos: usize, out: &mut [u32]) {
    if pos % 8 != 0 {
        return unpack_var(bytes, pos, W, out);
    }
    let mask = (1u128 << W) - 1;
    let w = W as usize;
    let mut groups = out.chunks_exact_mut(8);
    let mut byte = pos / 8;
    for g in &mut groups {
        let mut raw = [0u8; 16];
        raw[..w].copy_from_slice(&bytes[byte..byte + w]);
        let word = u128::from_le_bytes(raw);
        for (k, o) in g.iter_mut().enumerate() {
            *o = ((word >> (k * w)) & mask) as u32;
        }
        byte += w;
    }
    unpack_var(bytes, byte * 8, W, groups.into_remainder());
}

fn unpack_var(bytes: &[u8], pos: usize, width: u32, out: &mut [u32]) {
    let mask = (1u64 << width) - 1;
    let mut bit = pos;
    for o in out.iter_mut() {
        *o = ((word_at(bytes, bit / 8) >> (bit % 8)) & mask) as u32;
        bit += width as usize;
    }
}

pub fn pack(values: &[u64], width: u32) -> Vec<u8> {
    debug_assert!(width <= 64);
    let mut out = Vec::with_capacity((values.len() * width as usize).div_ceil(8));
    let mut acc: u128 = 0;
    let mut filled = 0u32;
    for &v in values {
        debug_assert!(width == 64 || v >> width == 0, "value {v} wider than {width}");
        acc |= u128::from(v) << filled;
        filled += width;
        while filled >= 64 {
            out.extend_from_slice(&(acc as u64).to_le_bytes());
            acc >>= 64;
            filled -= 64;
        }
    }
    let tail = filled.div_ceil(8) as usize;
    out.extend_from_slice(&(acc as u64).to_le_bytes()[..tail]);
    out
}

pub fn unpack(bytes: &[u8], width: u32, count: usize) -> Vec<u64> {
    let mut r = BitReader::new(bytes);
    (0..count).map(|_| r.read(width)).collect()
}
