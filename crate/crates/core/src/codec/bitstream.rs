//! Container format (multi-byte fields little-endian):
//!
//! ```text
//! "PCDC" | version u8 | height u16 | width u16 | block_size u8 | K u8 | C u8
//! sigma table   C x u16 (sigma * 256)
//! action table  3 bits per block, MSB first, raster order, zero padded to a byte
//! payload       range-coded symbols, blocks -> channels -> cells
//! payload_len   u32
//! ```

use super::encoder::DOWNSAMPLE;
use super::entropy::EntropyModel;
use super::ladder::StepLadder;
use super::quantize::QuantizedLatent;
use super::range_coder::{RangeDecoder, RangeEncoder, CODER_OVERHEAD_BITS};
use crate::error::{Error, Result};
use crate::imaging::BlockGrid;

pub const MAGIC: &[u8; 4] = b"PCDC";
pub const VERSION: u8 = 1;
pub const PREFIX_BYTES: usize = 12;
const ACTION_BITS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub height: usize,
    pub width: usize,
    pub block_size: usize,
    pub num_actions: usize,
    pub channels: usize,
}

impl StreamHeader {
    pub fn grid(&self) -> Result<BlockGrid> {
        BlockGrid::new(self.height, self.width, self.block_size)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    bytes: Vec<u8>,
}

impl Bitstream {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// `R_tot`.
    pub fn total_bits(&self) -> f64 {
        8.0 * self.bytes.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub header: StreamHeader,
    pub latent: QuantizedLatent,
    pub model: EntropyModel,
}

pub fn action_table_bytes(blocks: usize) -> usize {
    (ACTION_BITS * blocks).div_ceil(8)
}

/// Bits spent outside the payload: prefix, sigma table, action table, length trailer.
pub fn container_bits(channels: usize, blocks: usize) -> f64 {
    8.0 * (PREFIX_BYTES + 2 * channels + action_table_bytes(blocks) + 4) as f64
}

/// Upper bound on everything except the summed symbol code lengths.
pub fn fixed_overhead_bits(channels: usize, blocks: usize) -> f64 {
    container_bits(channels, blocks) + CODER_OVERHEAD_BITS
}

pub fn pack_actions(actions: &[usize]) -> Vec<u8> {
    let mut out = vec![0u8; action_table_bytes(actions.len())];
    for (i, &a) in actions.iter().enumerate() {
        for bit in 0..ACTION_BITS {
            if (a >> (ACTION_BITS - 1 - bit)) & 1 == 1 {
                let pos = i * ACTION_BITS + bit;
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
        }
    }
    out
}

pub fn unpack_actions(table: &[u8], blocks: usize) -> Vec<usize> {
    (0..blocks)
        .map(|i| {
            (0..ACTION_BITS).fold(0, |acc, bit| {
                let pos = i * ACTION_BITS + bit;
                (acc << 1) | ((table[pos / 8] >> (7 - pos % 8)) & 1) as usize
            })
        })
        .collect()
}

pub fn serialize(
    q: &QuantizedLatent,
    height: usize,
    width: usize,
    block_size: usize,
    model: &EntropyModel,
    ladder: &StepLadder,
) -> Result<Bitstream> {
    let grid = BlockGrid::new(height, width, block_size)?;
    if height > u16::MAX as usize || width > u16::MAX as usize || block_size > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{height}x{width} / block {block_size} exceeds header fields"
        )));
    }
    if q.channels != model.channels() || q.channels > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "latent has {} channels, model {}",
            q.channels,
            model.channels()
        )));
    }
    if q.num_blocks() != grid.len()
        || q.height * DOWNSAMPLE != grid.padded_height()
        || q.width * DOWNSAMPLE != grid.padded_width()
    {
        return Err(Error::InvalidArgument(
            "latent does not match the stated dimensions".into(),
        ));
    }
    if q.actions.iter().any(|&a| a >= ladder.len()) {
        return Err(Error::InvalidArgument("action outside the step ladder".into()));
    }
    let bank = model.bank(ladder)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(height as u16).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.push(block_size as u8);
    out.push(ladder.len() as u8);
    out.push(q.channels as u8);
    for s in model.to_fixed_point() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend(pack_actions(&q.actions));
    let mut enc = RangeEncoder::new();
    for (b, c, s) in q.coding_order() {
        enc.encode(s, bank.get(q.actions[b], c))?;
    }
    let payload = enc.finish();
    out.extend_from_slice(&payload);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    Ok(Bitstream { bytes: out })
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let s = bytes
        .get(*pos..*pos + n)
        .ok_or_else(|| Error::Bitstream(format!("truncated at byte {}", *pos)))?;
    *pos += n;
    Ok(s)
}

pub fn read_header(bytes: &[u8]) -> Result<StreamHeader> {
    if bytes.len() < PREFIX_BYTES {
        return Err(Error::Bitstream("shorter than the fixed prefix".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Bitstream("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Bitstream(format!("unsupported version {}", bytes[4])));
    }
    let h = StreamHeader {
        height: u16::from_le_bytes([bytes[5], bytes[6]]) as usize,
        width: u16::from_le_bytes([bytes[7], bytes[8]]) as usize,
        block_size: bytes[9] as usize,
        num_actions: bytes[10] as usize,
        channels: bytes[11] as usize,
    };
    if h.height == 0 || h.width == 0 || h.channels == 0 || h.block_size < 4 || !h.block_size.is_multiple_of(DOWNSAMPLE) {
        return Err(Error::Bitstream(format!("invalid header {h:?}")));
    }
    if h.num_actions == 0 || h.num_actions > StepLadder::MAX_ACTIONS {
        return Err(Error::Bitstream(format!("invalid action count {}", h.num_actions)));
    }
    Ok(h)
}

pub fn deserialize(bytes: &[u8], ladder: &StepLadder) -> Result<Decoded> {
    let header = read_header(bytes)?;
    if header.num_actions != ladder.len() {
        return Err(Error::Bitstream(format!(
            "stream uses K = {}, decoder ladder has {}",
            header.num_actions,
            ladder.len()
        )));
    }
    let grid = header.grid()?;
    let blocks = grid.len();
    let mut pos = PREFIX_BYTES;
    let fixed: Vec<u16> = take(bytes, &mut pos, 2 * header.channels)?
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let model = EntropyModel::from_fixed_point(&fixed)?;
    let actions = unpack_actions(take(bytes, &mut pos, action_table_bytes(blocks))?, blocks);
    if let Some(&a) = actions.iter().find(|&&a| a >= ladder.len()) {
        return Err(Error::Bitstream(format!(
            "action index {a} outside K = {}",
            ladder.len()
        )));
    }
    if bytes.len() < pos + 4 {
        return Err(Error::Bitstream("missing payload length".into()));
    }
    let tail = bytes.len() - 4;
    let payload_len = u32::from_le_bytes(bytes[tail..].try_into().unwrap()) as usize;
    if pos + payload_len != tail {
        return Err(Error::Bitstream(format!(
            "payload length {payload_len} disagrees with stream size {}",
            bytes.len()
        )));
    }
    let payload = &bytes[pos..tail];
    let bank = model.bank(ladder)?;
    let (lh, lw) = (grid.padded_height() / DOWNSAMPLE, grid.padded_width() / DOWNSAMPLE);
    let mut latent = QuantizedLatent {
        channels: header.channels,
        height: lh,
        width: lw,
        cell_block: header.block_size / DOWNSAMPLE,
        grid_cols: grid.cols,
        actions,
        symbols: vec![0; header.channels * lh * lw],
        clamped: 0,
    };
    let mut dec = RangeDecoder::new(payload)?;
    for b in 0..blocks {
        let a = latent.actions[b];
        for c in 0..header.channels {
            let cells: Vec<(usize, usize)> = latent.footprint(b).collect();
            for (y, x) in cells {
                latent.symbols[(c * lh + y) * lw + x] = dec.decode(bank.get(a, c))?;
            }
        }
    }
    dec.finish()?;
    Ok(Decoded { header, latent, model })
}
