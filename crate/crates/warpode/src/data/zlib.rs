//! Minimal zlib: full inflate (stored, fixed and dynamic Huffman blocks)
//! plus a stored-block compressor for writing. Checksums included.

use super::DataError;

pub(crate) fn adler32(data: &[u8]) -> u32 {
    const MOD: u32 = 65521;
    let (mut a, mut b) = (1u32, 0u32);
    for chunk in data.chunks(5552) {
        for &byte in chunk {
            a += byte as u32;
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (b << 16) | a
}

pub(crate) fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (n, slot) in t.iter_mut().enumerate() {
            let mut c = n as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut c = 0xFFFF_FFFFu32;
    for &byte in data {
        c = table[((c ^ byte as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

struct BitReader<'a> {
    data: &'a [u8],
    byte: usize,
    bit: u32,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        BitReader { data, byte: 0, bit: 0 }
    }

    fn offset(&self) -> usize {
        self.byte
    }

    fn take_bit(&mut self) -> Result<u32, DataError> {
        if self.byte >= self.data.len() {
            return Err(DataError::Truncated { offset: self.byte });
        }
        let v = (self.data[self.byte] >> self.bit) & 1;
        self.bit += 1;
        if self.bit == 8 {
            self.bit = 0;
            self.byte += 1;
        }
        Ok(v as u32)
    }

    fn take_bits(&mut self, n: u32) -> Result<u32, DataError> {
        let mut v = 0u32;
        for i in 0..n {
            v |= self.take_bit()? << i;
        }
        Ok(v)
    }

    fn align_byte(&mut self) {
        if self.bit != 0 {
            self.bit = 0;
            self.byte += 1;
        }
    }
}

/// Canonical Huffman decoder built from code lengths.
struct Huffman {
    // counts[len] and symbols sorted by (len, symbol)
    counts: [u16; 16],
    symbols: Vec<u16>,
}

impl Huffman {
    fn from_lengths(lengths: &[u8]) -> Result<Self, DataError> {
        let mut counts = [0u16; 16];
        for &l in lengths {
            counts[l as usize] += 1;
        }
        counts[0] = 0;
        // over-subscription check
        let mut left = 1i32;
        for len in 1..16 {
            left <<= 1;
            left -= counts[len] as i32;
            if left < 0 {
                return Err(DataError::Corrupt("oversubscribed huffman code".into()));
            }
        }
        let mut offsets = [0u16; 16];
        for len in 1..15 {
            offsets[len + 1] = offsets[len] + counts[len];
        }
        let mut symbols = vec![0u16; lengths.iter().filter(|&&l| l > 0).count()];
        for (sym, &l) in lengths.iter().enumerate() {
            if l > 0 {
                symbols[offsets[l as usize] as usize] = sym as u16;
                offsets[l as usize] += 1;
            }
        }
        Ok(Huffman { counts, symbols })
    }

    fn decode(&self, r: &mut BitReader) -> Result<u16, DataError> {
        let (mut code, mut first, mut index) = (0i32, 0i32, 0i32);
        for len in 1..16 {
            code |= r.take_bit()? as i32;
            let count = self.counts[len] as i32;
            if code - count < first {
                return Ok(self.symbols[(index + (code - first)) as usize]);
            }
            index += count;
            first += count;
            first <<= 1;
            code <<= 1;
        }
        Err(DataError::Corrupt("invalid huffman code".into()))
    }
}

const LEN_BASE: [u16; 29] = [
    3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31, 35, 43, 51, 59, 67, 83, 99, 115,
    131, 163, 195, 227, 258,
];
const LEN_EXTRA: [u8; 29] = [
    0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0,
];
const DIST_BASE: [u16; 30] = [
    1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193, 257, 385, 513, 769, 1025, 1537,
    2049, 3073, 4097, 6145, 8193, 12289, 16385, 24577,
];
const DIST_EXTRA: [u8; 30] = [
    0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12,
    13, 13,
];

/// Raw DEFLATE stream decompression.
pub(crate) fn inflate(data: &[u8]) -> Result<Vec<u8>, DataError> {
    let mut r = BitReader::new(data);
    let mut out = Vec::new();
    loop {
        let last = r.take_bit()?;
        let btype = r.take_bits(2)?;
        match btype {
            0 => {
                r.align_byte();
                let at = r.offset();
                if at + 4 > data.len() {
                    return Err(DataError::Truncated { offset: at });
                }
                let len = u16::from_le_bytes([data[at], data[at + 1]]) as usize;
                let nlen = u16::from_le_bytes([data[at + 2], data[at + 3]]);
                if !len as u16 != nlen {
                    return Err(DataError::Corrupt(format!(
                        "stored block length check failed at byte {at}"
                    )));
                }
                if at + 4 + len > data.len() {
                    return Err(DataError::Truncated { offset: at + 4 });
                }
                out.extend_from_slice(&data[at + 4..at + 4 + len]);
                r.byte = at + 4 + len;
                r.bit = 0;
            }
            1 => {
                let mut lens = [0u8; 288];
                lens[..144].fill(8);
                lens[144..256].fill(9);
                lens[256..280].fill(7);
                lens[280..].fill(8);
                let lit = Huffman::from_lengths(&lens)?;
                let dist = Huffman::from_lengths(&[5u8; 30])?;
                inflate_block(&mut r, &lit, &dist, &mut out)?;
            }
            2 => {
                let hlit = r.take_bits(5)? as usize + 257;
                let hdist = r.take_bits(5)? as usize + 1;
                let hclen = r.take_bits(4)? as usize + 4;
                const ORDER: [usize; 19] = [
                    16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15,
                ];
                let mut code_lens = [0u8; 19];
                for &idx in ORDER.iter().take(hclen) {
                    code_lens[idx] = r.take_bits(3)? as u8;
                }
                let code_huff = Huffman::from_lengths(&code_lens)?;
                let mut lens = vec![0u8; hlit + hdist];
                let mut i = 0;
                while i < lens.len() {
                    let sym = code_huff.decode(&mut r)?;
                    match sym {
                        0..=15 => {
                            lens[i] = sym as u8;
                            i += 1;
                        }
                        16 => {
                            if i == 0 {
                                return Err(DataError::Corrupt("repeat with no prior length".into()));
                            }
                            let prev = lens[i - 1];
                            let n = 3 + r.take_bits(2)? as usize;
                            for _ in 0..n {
                                lens[i] = prev;
                                i += 1;
                            }
                        }
                        17 => {
                            i += 3 + r.take_bits(3)? as usize;
                        }
                        18 => {
                            i += 11 + r.take_bits(7)? as usize;
                        }
                        _ => return Err(DataError::Corrupt("bad code-length symbol".into())),
                    }
                    if i > lens.len() {
                        return Err(DataError::Corrupt("code lengths overflow".into()));
                    }
                }
                let lit = Huffman::from_lengths(&lens[..hlit])?;
                let dist = Huffman::from_lengths(&lens[hlit..])?;
                inflate_block(&mut r, &lit, &dist, &mut out)?;
            }
            _ => return Err(DataError::Corrupt("reserved block type".into())),
        }
        if last == 1 {
            break;
        }
    }
    Ok(out)
}

fn inflate_block(
    r: &mut BitReader,
    lit: &Huffman,
    dist: &Huffman,
    out: &mut Vec<u8>,
) -> Result<(), DataError> {
    loop {
        let sym = lit.decode(r)?;
        match sym {
            0..=255 => out.push(sym as u8),
            256 => return Ok(()),
            257..=285 => {
                let li = sym as usize - 257;
                let len = LEN_BASE[li] as usize + r.take_bits(LEN_EXTRA[li] as u32)? as usize;
                let dsym = dist.decode(r)? as usize;
                if dsym >= 30 {
                    return Err(DataError::Corrupt("bad distance symbol".into()));
                }
                let d = DIST_BASE[dsym] as usize + r.take_bits(DIST_EXTRA[dsym] as u32)? as usize;
                if d > out.len() {
                    return Err(DataError::Corrupt("distance beyond output".into()));
                }
                let start = out.len() - d;
                for k in 0..len {
                    let b = out[start + k];
                    out.push(b);
                }
            }
            _ => return Err(DataError::Corrupt("bad literal/length symbol".into())),
        }
    }
}

/// zlib wrapper: header check, inflate, adler32 verification.
pub(crate) fn zlib_decompress(data: &[u8]) -> Result<Vec<u8>, DataError> {
    if data.len() < 6 {
        return Err(DataError::Truncated { offset: 0 });
    }
    let cmf = data[0];
    let flg = data[1];
    if cmf & 0x0F != 8 {
        return Err(DataError::Corrupt("zlib: not deflate".into()));
    }
    if ((cmf as u16) << 8 | flg as u16) % 31 != 0 {
        return Err(DataError::Corrupt("zlib: bad header check".into()));
    }
    if flg & 0x20 != 0 {
        return Err(DataError::Unsupported("zlib preset dictionary".into()));
    }
    let out = inflate(&data[2..data.len() - 4])?;
    let stored = u32::from_be_bytes([
        data[data.len() - 4],
        data[data.len() - 3],
        data[data.len() - 2],
        data[data.len() - 1],
    ]);
    let computed = adler32(&out);
    if stored != computed {
        return Err(DataError::Corrupt(format!(
            "zlib: adler32 mismatch (stored {stored:08x}, computed {computed:08x})"
        )));
    }
    Ok(out)
}

/// zlib stream using stored (uncompressed) deflate blocks.
pub(crate) fn zlib_compress_stored(data: &[u8]) -> Vec<u8> {
    let mut out = vec![0x78, 0x01];
    let mut chunks = data.chunks(65535).peekable();
    if data.is_empty() {
        out.extend_from_slice(&[0x01, 0, 0, 0xFF, 0xFF]);
    }
    while let Some(chunk) = chunks.next() {
        let last = chunks.peek().is_none();
        out.push(if last { 1 } else { 0 });
        let len = chunk.len() as u16;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&(!len).to_le_bytes());
        out.extend_from_slice(chunk);
    }
    out.extend_from_slice(&adler32(data).to_be_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stored_roundtrip() {
        let data: Vec<u8> = (0..100_000u32).map(|i| (i * 7 + 13) as u8).collect();
        let z = zlib_compress_stored(&data);
        assert_eq!(zlib_decompress(&z).unwrap(), data);
    }

    #[test]
    fn adler_and_crc_known_values() {
        assert_eq!(adler32(b"hello"), 0x062C0215);
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
        assert_eq!(crc32(b"IEND"), 0xAE426082);
    }

    #[test]
    fn fixed_huffman_block_decodes() {
        // "abcabcabc" deflated with fixed codes and one back-reference,
        // assembled by hand: literals a,b,c then length=6 distance=3.
        // Easier to verify via a stored stream vs inflate агreement is in
        // stored_roundtrip; here check a tiny fixed-block stream produced
        // by a known-good encoder (python zlib, level 9):
        // zlib.compress(b"abcabcabcabc", 9) ==
        let z: &[u8] = &[
            0x78, 0xda, 0x4b, 0x4c, 0x4a, 0x4e, 0x84, 0x21, 0x00, 0x1d, 0xe0, 0x04, 0x99,
        ];
        assert_eq!(zlib_decompress(z).unwrap(), b"abcabcabcabc");
    }

    #[test]
    fn truncated_stream_reports_offset() {
        let data = vec![1u8, 2, 3];
        let z = zlib_compress_stored(&data);
        let err = zlib_decompress(&z[..z.len() - 6]).unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. } | DataError::Corrupt(_)));
    }
}
