//! On-disk ledger format: an 8-byte magic followed by `u32`-length-framed
//! canonical blocks.

use std::fmt::Write as _;

use super::{verify_blocks, ChainStatus, EntryKind, Ledger, LedgerBlock, LedgerEntry, LedgerError};
use crate::codec::{DecodeError, Decoder, Encoder};
use crate::types::EntityId;

pub const LEDGER_MAGIC: &[u8; 8] = b"TSLEDGR1";

fn encode_block(b: &LedgerBlock, enc: &mut Encoder) {
    enc.u64(b.index)
        .hash(&b.prev_hash)
        .u64(b.ts)
        .u32(b.entries.len() as u32);
    for e in &b.entries {
        enc.u8(e.kind.tag())
            .str(e.author.as_str())
            .u64(e.ts)
            .bytes(&e.body)
            .hash(&e.body_hash);
    }
    enc.hash(&b.block_hash);
}

fn decode_block(buf: &[u8]) -> Result<LedgerBlock, DecodeError> {
    let mut dec = Decoder::new(buf);
    let index = dec.u64()?;
    let prev_hash = dec.hash()?;
    let ts = dec.u64()?;
    let n = dec.u32()?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let kind = EntryKind::from_tag(dec.u8()?).ok_or(DecodeError::Invalid("entry kind"))?;
        entries.push(LedgerEntry {
            kind,
            author: EntityId(dec.str()?),
            ts: dec.u64()?,
            body: dec.bytes()?.to_vec(),
            body_hash: dec.hash()?,
        });
    }
    let block_hash = dec.hash()?;
    dec.finish()?;
    Ok(LedgerBlock {
        index,
        prev_hash,
        ts,
        entries,
        block_hash,
    })
}

pub fn export(ledger: &Ledger) -> Vec<u8> {
    let mut out = Encoder::new();
    out.raw(LEDGER_MAGIC);
    for b in ledger.blocks() {
        let mut enc = Encoder::new();
        encode_block(b, &mut enc);
        out.bytes(&enc.finish());
    }
    out.finish()
}

/// Parses as many blocks as possible. The second value is the index of the
/// first frame that could not be parsed, if any.
fn parse(bytes: &[u8]) -> (Vec<LedgerBlock>, Option<u64>) {
    if bytes.len() < LEDGER_MAGIC.len() || &bytes[..LEDGER_MAGIC.len()] != LEDGER_MAGIC {
        return (Vec::new(), Some(0));
    }
    let mut dec = Decoder::new(&bytes[LEDGER_MAGIC.len()..]);
    let mut blocks = Vec::new();
    while dec.remaining() > 0 {
        let frame = match dec.bytes() {
            Ok(f) => f,
            Err(_) => {
                let at = blocks.len() as u64;
                return (blocks, Some(at));
            }
        };
        match decode_block(frame) {
            Ok(b) => blocks.push(b),
            Err(_) => {
                let at = blocks.len() as u64;
                return (blocks, Some(at));
            }
        }
    }
    (blocks, None)
}

/// Verifies a serialized ledger without building it. Any byte that fails
/// to parse or to verify is reported at the block that contains it.
pub fn verify_bytes(bytes: &[u8]) -> ChainStatus {
    let (blocks, parse_failure) = parse(bytes);
    match (verify_blocks(&blocks), parse_failure) {
        (ChainStatus::Broken { index }, _) => ChainStatus::Broken { index },
        (ChainStatus::Valid, Some(index)) => ChainStatus::Broken { index },
        (ChainStatus::Valid, None) => ChainStatus::Valid,
    }
}

pub fn import(bytes: &[u8]) -> Result<Ledger, LedgerError> {
    let (blocks, parse_failure) = parse(bytes);
    if let Some(index) = parse_failure {
        return Err(LedgerError::Broken { index });
    }
    Ledger::from_blocks(blocks)
}

/// Human-readable listing with lowercase hex digests.
pub fn dump(ledger: &Ledger) -> String {
    let mut s = String::new();
    for b in ledger.blocks() {
        let _ = writeln!(
            s,
            "block {} ts={} entries={} prev={} hash={}",
            b.index,
            b.ts,
            b.entries.len(),
            b.prev_hash,
            b.block_hash
        );
        for (j, e) in b.entries.iter().enumerate() {
            let summary = e
                .payload()
                .map(|p| p.summary())
                .unwrap_or_else(|err| format!("<undecodable: {err}>"));
            let _ = writeln!(
                s,
                "  [{j}] {} author={} ts={} body={} {}",
                e.kind.as_str(),
                e.author,
                e.ts,
                e.body_hash,
                summary
            );
        }
    }
    s
}
