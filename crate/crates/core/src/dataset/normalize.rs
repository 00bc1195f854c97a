use super::N_ROWS;

/// Rails of the analog input rows (VInP, VInM).
pub const ANALOG_RAIL: (f64, f64) = (0.325, 0.575);
/// Rails of the clock and digital output rows.
pub const DIGITAL_RAIL: (f64, f64) = (0.0, 0.9);

/// Rails of row `row` of a 5×T record.
pub fn channel_rails(row: usize) -> (f64, f64) {
    assert!(row < N_ROWS, "row {row} out of range");
    if row < 2 {
        ANALOG_RAIL
    } else {
        DIGITAL_RAIL
    }
}

pub fn normalize_channel(v: f64, row: usize) -> f64 {
    let (lo, hi) = channel_rails(row);
    (v - lo) / (hi - lo)
}

pub fn denormalize_channel(u: f64, row: usize) -> f64 {
    let (lo, hi) = channel_rails(row);
    lo + u * (hi - lo)
}

/// Maps rows `first_row..` of a flat row-major block of `n_samples` columns
/// to [0, 1].
pub fn normalize(block: &[f64], first_row: usize, n_samples: usize) -> Vec<f64> {
    block
        .iter()
        .enumerate()
        .map(|(i, &v)| normalize_channel(v, first_row + i / n_samples))
        .collect()
}

pub fn denormalize(block: &[f64], first_row: usize, n_samples: usize) -> Vec<f64> {
    block
        .iter()
        .enumerate()
        .map(|(i, &u)| denormalize_channel(u, first_row + i / n_samples))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn rail_examples() {
        assert!((normalize_channel(0.45, 0) - 0.5).abs() < 1e-15);
        assert_eq!(normalize_channel(0.9, 2), 1.0);
        assert_eq!(normalize_channel(0.0, 4), 0.0);
        assert_eq!(normalize_channel(0.325, 1), 0.0);
    }

    #[test]
    fn round_trip_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 500;
        let block: Vec<f64> = (0..5 * n)
            .map(|i| {
                let (lo, hi) = channel_rails(i / n);
                rng.random_range(lo..=hi)
            })
            .collect();
        let back = denormalize(&normalize(&block, 0, n), 0, n);
        let worst = block.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn offset_rows_use_their_own_rails() {
        let out = normalize(&[0.45, 0.45], 3, 1);
        assert_eq!(out, vec![0.5, 0.5]);
    }
}
