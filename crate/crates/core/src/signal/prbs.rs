//! Maximal-length Fibonacci LFSR bit sources.

use super::SignalError;

/// Feedback taps (1-based bit positions) of a primitive trinomial for each
/// supported register length.
fn taps(register_length: u32) -> Option<(u32, u32)> {
    Some(match register_length {
        3 => (3, 2),
        4 => (4, 3),
        5 => (5, 3),
        6 => (6, 5),
        7 => (7, 6),
        9 => (9, 5),
        10 => (10, 7),
        11 => (11, 9),
        15 => (15, 14),
        17 => (17, 14),
        20 => (20, 17),
        23 => (23, 18),
        31 => (31, 28),
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrbsConfig {
    pub register_length: u32,
    pub seed: u32,
    pub n_bits: usize,
}

impl PrbsConfig {
    pub fn prbs7(seed: u32, n_bits: usize) -> Self {
        Self {
            register_length: 7,
            seed,
            n_bits,
        }
    }
}

/// Fibonacci LFSR. Each step shifts the feedback bit in at the LSB and emits it.
#[derive(Debug, Clone)]
pub struct Lfsr {
    state: u32,
    mask: u32,
    tap_hi: u32,
    tap_lo: u32,
}

impl Lfsr {
    pub fn new(register_length: u32, seed: u32) -> Result<Self, SignalError> {
        let (hi, lo) =
            taps(register_length).ok_or(SignalError::UnsupportedRegisterLength(register_length))?;
        let mask = if register_length == 32 {
            u32::MAX
        } else {
            (1u32 << register_length) - 1
        };
        if seed & mask == 0 {
            return Err(SignalError::ZeroSeed);
        }
        Ok(Self {
            state: seed & mask,
            mask,
            tap_hi: hi - 1,
            tap_lo: lo - 1,
        })
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    pub fn next_bit(&mut self) -> u8 {
        let bit = ((self.state >> self.tap_hi) ^ (self.state >> self.tap_lo)) & 1;
        self.state = ((self.state << 1) | bit) & self.mask;
        bit as u8
    }
}

impl Iterator for Lfsr {
    type Item = u8;

    fn next(&mut self) -> Option<u8> {
        Some(self.next_bit())
    }
}

/// `cfg.n_bits` bits of the maximal-length sequence started from `cfg.seed`.
pub fn gen_prbs(cfg: &PrbsConfig) -> Result<Vec<u8>, SignalError> {
    Ok(Lfsr::new(cfg.register_length, cfg.seed)?
        .take(cfg.n_bits)
        .collect())
}
