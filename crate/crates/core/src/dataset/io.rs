//! Little-endian "SCDS" container and CSV export.
//!
//! Layout: a fixed [`HEADER_LEN`]-byte header, then per record a split tag
//! byte, a [`RECORD_PARAMS_LEN`]-byte parameter block and `5 * n_samples` f64
//! samples in row order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, DatasetError, GenConfig, Record, Split, N_ROWS, ROW_NAMES};
use crate::adc::AdcConfig;
use crate::signal::RecordParams;

pub const MAGIC: [u8; 4] = *b"SCDS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 120;
/// Nine f64 fields and the u64 record seed.
pub const RECORD_PARAMS_LEN: usize = 80;

const FLAG_SPLIT: u16 = 1;

fn record_len(n_samples: usize) -> usize {
    1 + RECORD_PARAMS_LEN + N_ROWS * n_samples * 8
}

/// Expected byte size of a file holding `n_records` records.
pub fn file_len(n_records: usize, n_samples: usize) -> usize {
    HEADER_LEN + n_records * record_len(n_samples)
}

pub fn write_dataset(d: &Dataset) -> Vec<u8> {
    let g = &d.gen;
    let n_samples = g.n_samples;
    let mut out = Vec::with_capacity(file_len(d.len(), n_samples));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if d.split_seed.is_some() { FLAG_SPLIT } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for v in [d.master_seed, d.len() as u64, d.split_seed.unwrap_or(0)] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [N_ROWS as u32, n_samples as u32, g.prbs_order, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        g.duration,
        g.sample_dt,
        g.f_cut,
        g.clk_edge,
        g.adc.v_ref,
        g.adc.r_drv,
        g.adc.v_high,
        g.adc.clk_threshold,
        g.adc.fine_dt,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    debug_assert_eq!(out.len(), HEADER_LEN);

    for (r, s) in d.records.iter().zip(&d.split) {
        out.push(s.tag());
        let p = &r.params;
        for v in [
            p.bit_time,
            p.edge_frac,
            p.v_cm,
            p.v_dm,
            p.clk_period,
            p.clk_phase,
            p.clk_edge,
            p.r_load,
            p.c_load,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.rng_seed.to_le_bytes());
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let b = self.buf[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        b
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

pub fn read_dataset(buf: &[u8]) -> Result<Dataset, DatasetError> {
    if buf.len() < MAGIC.len() {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN,
            found: buf.len(),
        });
    }
    let magic: [u8; 4] = buf[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    if buf.len() < HEADER_LEN {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN,
            found: buf.len(),
        });
    }
    let mut rd = Reader { buf, pos: 4 };
    let version = rd.u16();
    if version != VERSION {
        return Err(DatasetError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let flags = rd.u16();
    let master_seed = rd.u64();
    let n_records = rd.u64() as usize;
    let split_seed = rd.u64();
    let n_rows = rd.u32() as usize;
    let n_samples = rd.u32() as usize;
    let prbs_order = rd.u32();
    let _reserved = rd.u32();
    if n_rows != N_ROWS {
        return Err(DatasetError::Corrupt {
            index: 0,
            msg: format!("header declares {n_rows} rows, expected {N_ROWS}"),
        });
    }
    let gen = GenConfig {
        duration: rd.f64(),
        sample_dt: rd.f64(),
        f_cut: rd.f64(),
        clk_edge: rd.f64(),
        n_samples,
        prbs_order,
        adc: AdcConfig {
            v_ref: rd.f64(),
            r_drv: rd.f64(),
            v_high: rd.f64(),
            clk_threshold: rd.f64(),
            fine_dt: rd.f64(),
        },
    };
    let expected = n_records
        .checked_mul(record_len(n_samples))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or(DatasetError::Corrupt {
            index: 0,
            msg: "record count overflows".into(),
        })?;
    if buf.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(DatasetError::TrailingBytes {
            extra: buf.len() - expected,
        });
    }

    let mut records = Vec::with_capacity(n_records);
    let mut split = Vec::with_capacity(n_records);
    for index in 0..n_records {
        let tag = rd.take::<1>()[0];
        split.push(Split::from_tag(tag).ok_or(DatasetError::Corrupt {
            index,
            msg: format!("unknown split tag {tag}"),
        })?);
        let params = RecordParams {
            bit_time: rd.f64(),
            edge_frac: rd.f64(),
            v_cm: rd.f64(),
            v_dm: rd.f64(),
            clk_period: rd.f64(),
            clk_phase: rd.f64(),
            clk_edge: rd.f64(),
            r_load: rd.f64(),
            c_load: rd.f64(),
            rng_seed: rd.u64(),
        };
        let data = (0..N_ROWS * n_samples).map(|_| rd.f64()).collect();
        records.push(Record {
            data,
            n_samples,
            params,
        });
    }
    Ok(Dataset {
        records,
        split,
        master_seed,
        split_seed: (flags & FLAG_SPLIT != 0).then_some(split_seed),
        gen,
    })
}

pub fn save(d: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    fs::write(path, write_dataset(d))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    read_dataset(&fs::read(path)?)
}

/// One line per time step: `t, VInP, VInM, ClkEval, DOut1, DOut0`.
pub fn write_record_csv(r: &Record, sample_dt: f64, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "t,{}", ROW_NAMES.join(","))?;
    for j in 0..r.n_samples {
        write!(w, "{:e}", j as f64 * sample_dt)?;
        for row in 0..N_ROWS {
            write!(w, ",{}", r.row(row)[j])?;
        }
        writeln!(w)?;
    }
    Ok(())
}
