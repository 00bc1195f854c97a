use super::SignalError;

/// Piecewise-linear waveform. Held constant outside its breakpoint range.
#[derive(Debug, Clone, PartialEq)]
pub struct Pwl {
    points: Vec<(f64, f64)>,
}

impl Pwl {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, SignalError> {
        match points.first() {
            None => return Err(SignalError::InvalidPwl("no breakpoints".into())),
            Some(&(t0, _)) if t0 != 0.0 => {
                return Err(SignalError::InvalidPwl(format!("first time is {t0}, not 0")))
            }
            _ => {}
        }
        if let Some(w) = points.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(SignalError::InvalidPwl(format!(
                "times not strictly increasing at {} -> {}",
                w[0].0, w[1].0
            )));
        }
        if points.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(SignalError::InvalidPwl("non-finite breakpoint".into()));
        }
        Ok(Self { points })
    }

    pub fn constant(value: f64, duration: f64) -> Self {
        Self {
            points: vec![(0.0, value), (duration, value)],
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn end_time(&self) -> f64 {
        self.points.last().expect("non-empty").0
    }

    pub fn eval(&self, t: f64) -> f64 {
        let pts = &self.points;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        let last = pts[pts.len() - 1];
        if t >= last.0 {
            return last.1;
        }
        // index of the first breakpoint strictly after t
        let hi = pts.partition_point(|&(pt, _)| pt <= t);
        let (t0, v0) = pts[hi - 1];
        let (t1, v1) = pts[hi];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Values at `t = k * dt` for `k in 0..n`.
    pub fn sample(&self, dt: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.eval(k as f64 * dt)).collect()
    }

    /// `offset + gain * self`, applied at every breakpoint.
    pub fn affine(&self, gain: f64, offset: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|&(t, v)| (t, offset + gain * v))
                .collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, v)| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Trapezoidal NRZ waveform for `bits`, one bit per `bit_time`. Rising
/// transitions take `rise` seconds and falling ones `fall`, each starting at
/// the bit boundary. The waveform starts at the level of the first bit.
pub fn bits_to_pwl(
    bits: &[u8],
    bit_time: f64,
    rise: f64,
    fall: f64,
    v_lo: f64,
    v_hi: f64,
) -> Result<Pwl, SignalError> {
    if bits.is_empty() {
        return Err(SignalError::InvalidPwl("empty bit sequence".into()));
    }
    if rise <= 0.0 || fall <= 0.0 || rise + fall > bit_time {
        return Err(SignalError::EdgesExceedBitTime {
            rise,
            fall,
            bit_time,
        });
    }
    let level = |b: u8| if b != 0 { v_hi } else { v_lo };
    let mut pts = vec![(0.0, level(bits[0]))];
    for i in 1..bits.len() {
        if bits[i] == bits[i - 1] {
            continue;
        }
        let t0 = i as f64 * bit_time;
        let edge = if bits[i] != 0 { rise } else { fall };
        if pts.last().unwrap().0 < t0 {
            pts.push((t0, level(bits[i - 1])));
        }
        pts.push((t0 + edge, level(bits[i])));
    }
    let end = bits.len() as f64 * bit_time;
    if pts.last().unwrap().0 < end {
        pts.push((end, level(bits[bits.len() - 1])));
    }
    Pwl::new(pts)
}

/// Splits a waveform normalized to ±1/2 into the two rails
/// `v_cm ± v_dm * pwl`.
pub fn differential_pair(pwl: &Pwl, v_cm: f64, v_dm: f64) -> (Pwl, Pwl) {
    (pwl.affine(v_dm, v_cm), pwl.affine(-v_dm, v_cm))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const NS: f64 = 1e-9;

    #[test]
    fn rejects_bad_breakpoints() {
        assert!(Pwl::new(vec![]).is_err());
        assert!(Pwl::new(vec![(1.0, 0.0)]).is_err());
        assert!(Pwl::new(vec![(0.0, 0.0), (1.0, 1.0), (1.0, 2.0)]).is_err());
    }

    #[test]
    fn constant_bits_stay_high() {
        let p = bits_to_pwl(&[1, 1, 1], 100.0 * NS, 25.0 * NS, 25.0 * NS, 0.0, 1.0).unwrap();
        for k in 0..=300 {
            assert_eq!(p.eval(k as f64 * NS), 1.0);
        }
    }

    #[test]
    fn ramp_midpoint() {
        let p = bits_to_pwl(&[0, 1], 100.0 * NS, 25.0 * NS, 25.0 * NS, 0.0, 0.9).unwrap();
        assert!((p.eval(112.5 * NS) - 0.45).abs() < 1e-12);
        assert_eq!(p.eval(100.0 * NS), 0.0);
        assert_eq!(p.eval(125.0 * NS), 0.9);
    }

    #[test]
    fn edges_take_exactly_rise_and_fall() {
        let p = bits_to_pwl(&[1, 0, 1], 100.0 * NS, 20.0 * NS, 30.0 * NS, -0.5, 0.5).unwrap();
        assert_eq!(p.eval(100.0 * NS), 0.5);
        assert!((p.eval(130.0 * NS) + 0.5).abs() < 1e-12);
        assert!((p.eval(115.0 * NS) - 0.0).abs() < 1e-12);
        assert_eq!(p.eval(200.0 * NS), -0.5);
        assert!((p.eval(220.0 * NS) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn edges_exceeding_bit_time_rejected() {
        assert!(matches!(
            bits_to_pwl(&[0, 1], 10.0, 6.0, 5.0, 0.0, 1.0),
            Err(SignalError::EdgesExceedBitTime { .. })
        ));
    }

    #[test]
    fn random_bits_stay_within_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let bits: Vec<u8> = (0..30).map(|_| rng.random_range(0..2)).collect();
            let bt = rng.random_range(50.0..150.0) * NS;
            let edge = rng.random_range(0.2..0.3) * bt;
            let p = bits_to_pwl(&bits, bt, edge, edge, -0.5, 0.5).unwrap();
            for k in 0..20_000 {
                let v = p.eval(k as f64 * 0.2 * NS);
                assert!((-0.5..=0.5).contains(&v));
            }
        }
    }

    #[test]
    fn differential_pair_examples() {
        let zero = Pwl::constant(0.0, 1e-6);
        let (p, m) = differential_pair(&zero, 0.45, 0.2);
        assert_eq!((p.eval(0.0), m.eval(0.0)), (0.45, 0.45));

        let half = Pwl::constant(0.5, 1e-6);
        let (p, m) = differential_pair(&half, 0.45, 0.2);
        assert!((p.eval(5e-7) - 0.55).abs() < 1e-15);
        assert!((m.eval(5e-7) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn differential_pair_common_mode_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bits: Vec<u8> = (0..15).map(|_| rng.random_range(0..2)).collect();
        let pwl = bits_to_pwl(&bits, 90.0 * NS, 20.0 * NS, 20.0 * NS, -0.5, 0.5).unwrap();
        let (p, m) = differential_pair(&pwl, 0.45, 0.23);
        let worst = (0..13_500)
            .map(|k| {
                let t = k as f64 * 0.1 * NS;
                (p.eval(t) + m.eval(t) - 0.9).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }
}
