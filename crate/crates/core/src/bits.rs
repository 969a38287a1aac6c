//! Bit-exact packing for feedback payloads. Fields are written
//! most-significant-bit first, with no alignment padding between
//! fields.

use crate::error::{Error, Result};

/// A packed feedback payload plus the metadata needed to unpack it.
/// `bit_len` counts exactly the payload bits; trailing bits of the last
/// byte are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackBitstream {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl FeedbackBitstream {
    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader {
            bytes: &self.bytes,
            bit_len: self.bit_len,
            pos: 0,
        }
    }
}

/// MSB-first bit writer.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn write(&mut self, value: u32, width: usize) {
        debug_assert!(width <= 32);
        debug_assert!(width == 32 || value < (1u32 << width));
        for i in (0..width).rev() {
            let bit = (value >> i) & 1;
            let byte_idx = self.bit_len / 8;
            if byte_idx == self.bytes.len() {
                self.bytes.push(0);
            }
            self.bytes[byte_idx] |= (bit as u8) << (7 - self.bit_len % 8);
            self.bit_len += 1;
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn finish(self) -> FeedbackBitstream {
        FeedbackBitstream {
            bytes: self.bytes,
            bit_len: self.bit_len,
        }
    }
}

/// MSB-first bit reader over a packed payload.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    bit_len: usize,
    pos: usize,
}

impl BitReader<'_> {
    pub fn read(&mut self, width: usize) -> Result<u32> {
        if self.pos + width > self.bit_len {
            return Err(Error::Format(format!(
                "bitstream truncated: need {} bits at offset {}, have {}",
                width, self.pos, self.bit_len
            )));
        }
        let mut v = 0u32;
        for _ in 0..width {
            let byte = self.bytes[self.pos / 8];
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u32;
            self.pos += 1;
        }
        Ok(v)
    }

    pub fn remaining(&self) -> usize {
        self.bit_len - self.pos
    }
}
