//! Branch-free exp, sigmoid and tanh for the batched path. Straight-line code
//! so loops over slices auto-vectorize; libm calls do not.

const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52, round-to-nearest trick
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-01;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// e^x with relative error below 1e-15 on [−708, 709]; saturates outside.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let x = x.clamp(-708.0, 709.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let k = t - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of e^r, |r| ≤ ln2/2, truncated after r^12/12!.
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k_int = (t.to_bits() as i64).wrapping_sub(SHIFT.to_bits() as i64);
    p * f64::from_bits(((k_int + 1023) as u64) << 52)
}

#[inline(always)]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

/// Absolute error ~1e-16; relative accuracy degrades only for |x| ≪ 1.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / (exp(2.0 * x) + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_libm() {
        let mut x = -700.0;
        while x < 700.0 {
            let rel = (exp(x) - x.exp()).abs() / x.exp();
            assert!(rel < 2e-15, "exp({x}) rel err {rel}");
            x += 0.173;
        }
        let mut x = -30.0;
        while x < 30.0 {
            assert!((tanh(x) - x.tanh()).abs() < 1e-15, "tanh({x})");
            assert!((sigmoid(x) - crate::cells::sigmoid(x)).abs() < 3e-16, "sigmoid({x})");
            x += 0.0137;
        }
    }

    #[test]
    fn saturates() {
        assert_eq!(tanh(1e6), 1.0);
        assert_eq!(tanh(-1e6), -1.0);
        assert!(sigmoid(-1e6) < 1e-300);
        assert!(exp(f64::NAN).is_nan());
    }
}
