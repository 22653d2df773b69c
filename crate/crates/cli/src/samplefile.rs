//! Binary click-sample files.
//!
//! Layout: a fixed 69-byte header followed by bit-packed patterns, one
//! row of `ceil(n_modes / 8)` bytes per sample, mode m at bit `m % 8` of
//! byte `m / 8` (little-endian throughout). The header records enough
//! provenance (seed, source, efficiency, config hash) to refuse mixing
//! samples across configurations.

use std::io::Read;
use std::path::Path;

use gbselm_core::gaussian::Efficiency;
use gbselm_core::sampler::{ClickPattern, SampleBatch, SampleSource};
use gbselm_core::{Error, Result};

const MAGIC: &[u8; 4] = b"GBSS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleHeader {
    pub n_modes: u32,
    pub count: u64,
    pub seed: u64,
    pub source: SampleSource,
    pub efficiency: f64,
    pub config_hash: [u8; 32],
}

fn row_bytes(n_modes: usize) -> usize {
    n_modes.div_ceil(8)
}

pub fn write_batch(path: &Path, batch: &SampleBatch, config_hash: [u8; 32]) -> Result<()> {
    let n_modes = batch.n_modes();
    if n_modes > u32::MAX as usize {
        return Err(Error::capacity("mode count does not fit the sample header"));
    }
    let mut buf = Vec::with_capacity(69 + batch.len() * row_bytes(n_modes));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n_modes as u32).to_le_bytes());
    buf.extend_from_slice(&(batch.len() as u64).to_le_bytes());
    buf.extend_from_slice(&batch.seed().to_le_bytes());
    buf.push(match batch.source() {
        SampleSource::Gbs => 0,
        SampleSource::Coherent => 1,
    });
    buf.extend_from_slice(&batch.efficiency().value().to_bits().to_le_bytes());
    buf.extend_from_slice(&config_hash);
    for pattern in batch.patterns() {
        let mut row = vec![0u8; row_bytes(n_modes)];
        for m in 0..n_modes {
            if pattern.bit(m) {
                row[m / 8] |= 1 << (m % 8);
            }
        }
        buf.extend_from_slice(&row);
    }
    crate::artifacts::atomic_write(path, &buf)
}

pub fn read_header(path: &Path) -> Result<SampleHeader> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 69];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(format!("{}: truncated header", path.display())))?;
    parse_header(&header, path)
}

fn parse_header(header: &[u8; 69], path: &Path) -> Result<SampleHeader> {
    let name = path.display();
    if &header[0..4] != MAGIC {
        return Err(Error::format(format!("{name}: not a sample file (bad magic)")));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!(
            "{name}: unsupported sample file version {version}"
        )));
    }
    let n_modes = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    let seed = u64::from_le_bytes(header[20..28].try_into().unwrap());
    let source = match header[28] {
        0 => SampleSource::Gbs,
        1 => SampleSource::Coherent,
        b => return Err(Error::format(format!("{name}: unknown source tag {b}"))),
    };
    let efficiency = f64::from_bits(u64::from_le_bytes(header[29..37].try_into().unwrap()));
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(&header[37..69]);
    if n_modes == 0 || n_modes > 32 {
        return Err(Error::format(format!("{name}: mode count {n_modes} out of range")));
    }
    if count == 0 {
        return Err(Error::format(format!("{name}: empty sample file")));
    }
    Ok(SampleHeader { n_modes, count, seed, source, efficiency, config_hash })
}

pub fn read_batch(path: &Path) -> Result<(SampleHeader, SampleBatch)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 69 {
        return Err(Error::format(format!("{}: truncated header", path.display())));
    }
    let header = parse_header(bytes[0..69].try_into().unwrap(), path)?;
    let n_modes = header.n_modes as usize;
    let row = row_bytes(n_modes);
    let expected = 69 + header.count as usize * row;
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {expected} bytes for {} samples, found {}",
            path.display(),
            header.count,
            bytes.len()
        )));
    }
    let mut patterns = Vec::with_capacity(header.count as usize);
    for chunk in bytes[69..].chunks_exact(row) {
        let mut mask = 0u32;
        for m in 0..n_modes {
            if chunk[m / 8] >> (m % 8) & 1 == 1 {
                mask |= 1 << m;
            }
        }
        // Padding bits beyond n_modes must be zero.
        for m in n_modes..row * 8 {
            if chunk[m / 8] >> (m % 8) & 1 == 1 {
                return Err(Error::format(format!(
                    "{}: nonzero padding bits in pattern row",
                    path.display()
                )));
            }
        }
        patterns.push(ClickPattern::from_mask(mask, n_modes)?);
    }
    let batch = SampleBatch::new(
        patterns,
        header.seed,
        header.source,
        Efficiency::new(header.efficiency)?,
    )?;
    Ok((header, batch))
}
