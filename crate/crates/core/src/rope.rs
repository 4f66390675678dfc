//! Rotary position embedding primitives.
//!
//! Dimensions are paired interleaved, `(2i, 2i + 1)`, so pair index `i` is also
//! the frequency index. Pair 0 carries the highest frequency (`1.0`) and the
//! frequencies decrease strictly with `i`. Positions are real-valued: plans
//! produced by [`crate::extension`] routinely place tokens at fractional
//! positions.

use crate::error::{invalid, Result};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Per-pair angular frequencies `base^(-2i/d)` of one rotary head.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    head_dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl FrequencyTable {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim < 2 || head_dim % 2 != 0 {
            return Err(invalid(format!(
                "head_dim must be an even integer >= 2, got {head_dim}"
            )));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(invalid(format!("rope base must be finite and > 1, got {base}")));
        }
        let d = head_dim as f64;
        let freqs = (0..head_dim / 2)
            .map(|i| base.powf(-((2 * i) as f64) / d))
            .collect();
        Ok(Self {
            head_dim,
            base,
            freqs,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn num_pairs(&self) -> usize {
        self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn freq(&self, pair: usize) -> f64 {
        self.freqs[pair]
    }

    /// Tokens per full turn of the given pair, `2π / θ`.
    pub fn wavelength(&self, pair: usize) -> f64 {
        std::f64::consts::TAU / self.freqs[pair]
    }
}

/// Where a vector sits (possibly fractionally) and the factor its rotated form
/// is scaled by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSpec {
    pub position: f64,
    pub magnitude: f64,
}

impl RotationSpec {
    pub fn new(position: f64, magnitude: f64) -> Result<Self> {
        if !(magnitude > 0.0) || !magnitude.is_finite() {
            return Err(invalid(format!("magnitude must be positive, got {magnitude}")));
        }
        if !position.is_finite() {
            return Err(invalid(format!("position must be finite, got {position}")));
        }
        Ok(Self {
            position,
            magnitude,
        })
    }

    pub fn at(position: f64) -> Self {
        Self {
            position,
            magnitude: 1.0,
        }
    }
}

pub fn rotate(vec: &[f64], spec: RotationSpec, table: &FrequencyTable) -> Result<Vec<f64>> {
    check_len(vec.len(), table)?;
    let angles: Vec<f64> = table.freqs.iter().map(|f| spec.position * f).collect();
    let mut out = vec![0.0; vec.len()];
    rotate_with_angles(vec, &angles, spec.magnitude, &mut out);
    Ok(out)
}

/// `⟨rotate(q, m), rotate(k, n)⟩`.
pub fn relative_dot(q: &[f64], k: &[f64], m: f64, n: f64, table: &FrequencyTable) -> Result<f64> {
    if q.len() != k.len() {
        return Err(invalid(format!(
            "query length {} differs from key length {}",
            q.len(),
            k.len()
        )));
    }
    let rq = rotate(q, RotationSpec::at(m), table)?;
    let rk = rotate(k, RotationSpec::at(n), table)?;
    Ok(crate::matrix::dot(&rq, &rk))
}

fn check_len(len: usize, table: &FrequencyTable) -> Result<()> {
    if len != table.head_dim {
        return Err(invalid(format!(
            "vector length {len} does not match head_dim {}",
            table.head_dim
        )));
    }
    Ok(())
}

/// Rotates every pair `i` of `input` by `angles[i]` and scales by `magnitude`.
///
/// `input.len()` must equal `2 * angles.len()`; `out` has the same length.
pub(crate) fn rotate_with_angles(input: &[f64], angles: &[f64], magnitude: f64, out: &mut [f64]) {
    debug_assert_eq!(input.len(), 2 * angles.len());
    for (i, &angle) in angles.iter().enumerate() {
        let (s, c) = angle.sin_cos();
        let a = input[2 * i];
        let b = input[2 * i + 1];
        out[2 * i] = magnitude * (a * c - b * s);
        out[2 * i + 1] = magnitude * (a * s + b * c);
    }
}

/// Same as [`rotate_with_angles`] with precomputed `(sin, cos)` pairs.
pub(crate) fn rotate_with_trig(input: &[f64], trig: &[(f64, f64)], magnitude: f64, out: &mut [f64]) {
    for (i, &(s, c)) in trig.iter().enumerate() {
        let a = input[2 * i];
        let b = input[2 * i + 1];
        out[2 * i] = magnitude * (a * c - b * s);
        out[2 * i + 1] = magnitude * (a * s + b * c);
    }
}

/// Adjoint of [`rotate_with_trig`]: accumulates `magnitude · Rᵀ · grad` into `out`.
pub(crate) fn rotate_transpose_accumulate(
    grad: &[f64],
    trig: &[(f64, f64)],
    magnitude: f64,
    out: &mut [f64],
) {
    for (i, &(s, c)) in trig.iter().enumerate() {
        let ga = grad[2 * i];
        let gb = grad[2 * i + 1];
        out[2 * i] += magnitude * (ga * c + gb * s);
        out[2 * i + 1] += magnitude * (-ga * s + gb * c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn powers_of_ten_at_d8() {
        let t = FrequencyTable::new(8, 10_000.0).unwrap();
        let expected = [1.0, 0.1, 0.01, 0.001];
        for (f, e) in t.freqs().iter().zip(expected) {
            assert!((f - e).abs() <= 1e-15 * e, "{f} vs {e}");
        }
        assert_eq!(t.freqs()[0], 1.0);
    }

    #[test]
    fn single_pair_table() {
        let t = FrequencyTable::new(2, 10_000.0).unwrap();
        assert_eq!(t.freqs(), &[1.0]);
    }

    #[test]
    fn last_frequency_at_d128() {
        let t = FrequencyTable::new(128, 10_000.0).unwrap();
        assert_eq!(t.num_pairs(), 64);
        // 10000^(-126/128) = 10^(-3.9375)
        let golden = 1.154_781_984_689_458e-4;
        assert!((t.freq(63) - golden).abs() < 1e-18, "{}", t.freq(63));
        assert!(t.freqs().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_head_dims() {
        assert!(FrequencyTable::new(7, 10_000.0).is_err());
        assert!(FrequencyTable::new(0, 10_000.0).is_err());
        assert!(FrequencyTable::new(8, 1.0).is_err());
    }

    #[test]
    fn zero_position_is_identity() {
        let t = FrequencyTable::new(6, 10_000.0).unwrap();
        let v = [0.3, -1.2, 2.0, 0.5, -0.7, 1.1];
        assert_eq!(rotate(&v, RotationSpec::at(0.0), &t).unwrap(), v.to_vec());
    }

    #[test]
    fn half_turn_negates() {
        let t = FrequencyTable::new(2, 10_000.0).unwrap();
        let out = rotate(&[1.0, 0.0], RotationSpec::at(PI / t.freq(0)), &t).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-9 && out[1].abs() < 1e-9, "{out:?}");
    }

    #[test]
    fn scaled_rotation_matches_per_pair_trig() {
        let t = FrequencyTable::new(4, 100.0).unwrap();
        let v = [1.0, 0.0, 0.0, 0.0];
        let out = rotate(&v, RotationSpec::new(1.5, 0.5).unwrap(), &t).unwrap();
        // pair 0: angle 1.5 * 1.0; pair 1 is zero.
        let expected = [0.5 * 1.5f64.cos(), 0.5 * 1.5f64.sin(), 0.0, 0.0];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn relative_dot_hand_evaluated() {
        let t = FrequencyTable::new(2, 10_000.0).unwrap();
        // q=(1,0) at 0, k=(0,1) rotated by π/2 becomes (-1, 0).
        let got = relative_dot(&[1.0, 0.0], &[0.0, 1.0], 0.0, PI / 2.0, &t).unwrap();
        assert!((got - (-1.0)).abs() < 1e-12, "{got}");
    }

    #[test]
    fn relative_dot_same_position_is_plain_dot() {
        let t = FrequencyTable::new(4, 10_000.0).unwrap();
        let q = [0.2, 0.4, -1.0, 3.0];
        let k = [1.0, -2.0, 0.5, 0.25];
        let got = relative_dot(&q, &k, 7.25, 7.25, &t).unwrap();
        assert!((got - crate::matrix::dot(&q, &k)).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let t = FrequencyTable::new(4, 10_000.0).unwrap();
        assert!(rotate(&[1.0, 2.0], RotationSpec::at(1.0), &t).is_err());
        assert!(relative_dot(&[0.0; 4], &[0.0; 2], 0.0, 0.0, &t).is_err());
        assert!(RotationSpec::new(0.0, 0.0).is_err());
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0..2.0f64, d)
    }

    proptest! {
        #[test]
        fn shift_invariance(
            q in vec_strategy(16),
            k in vec_strategy(16),
            m in -500.0..500.0f64,
            n in -500.0..500.0f64,
            delta in -1000.0..1000.0f64,
        ) {
            let t = FrequencyTable::new(16, 10_000.0).unwrap();
            let a = relative_dot(&q, &k, m, n, &t).unwrap();
            let b = relative_dot(&q, &k, m + delta, n + delta, &t).unwrap();
            let scale = norm(&q) * norm(&k);
            prop_assert!((a - b).abs() <= 1e-6 * scale.max(1e-12));
            // contract form: ⟨q, R_{n-m} k⟩
            let c = crate::matrix::dot(&q, &rotate(&k, RotationSpec::at(n - m), &t).unwrap());
            prop_assert!((a - c).abs() <= 1e-6 * scale.max(1e-12));
        }

        #[test]
        fn unit_magnitude_preserves_norm(v in vec_strategy(8), pos in -1e4..1e4f64) {
            let t = FrequencyTable::new(8, 10_000.0).unwrap();
            let r = rotate(&v, RotationSpec::at(pos), &t).unwrap();
            prop_assert!((norm(&r) - norm(&v)).abs() <= 1e-9 * norm(&v).max(1e-12));
        }

        #[test]
        fn angles_add(v in vec_strategy(8), m in -100.0..100.0f64, n in -100.0..100.0f64) {
            let t = FrequencyTable::new(8, 10_000.0).unwrap();
            let twice = rotate(&rotate(&v, RotationSpec::at(m), &t).unwrap(), RotationSpec::at(n), &t).unwrap();
            let once = rotate(&v, RotationSpec::at(m + n), &t).unwrap();
            for (a, b) in twice.iter().zip(&once) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }
    }
}
