//! Branch-free `exp` and `tanh` that vectorize inside simple loops. Both agree
//! with the standard library to within a few ulp.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52

/// `e^x`, with the argument clamped to `[-700, 700]`.
#[inline(always)]
pub fn exp(x: f64) -> f64 {
    let x = if x < -700.0 {
        -700.0
    } else if x > 700.0 {
        700.0
    } else {
        x
    };
    let kf = x * LOG2E + SHIFT;
    let bits = kf.to_bits();
    let k = kf - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series on |r| <= ln2 / 2, Estrin evaluation
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    const C: [f64; 13] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
    ];
    let p01 = C[0] + r;
    let p23 = C[2] + C[3] * r;
    let p45 = C[4] + C[5] * r;
    let p67 = C[6] + C[7] * r;
    let p89 = C[8] + C[9] * r;
    let p1011 = C[10] + C[11] * r;
    let p = (p01 + p23 * r2) + (p45 + p67 * r2) * r4 + ((p89 + p1011 * r2) + C[12] * r4) * r8;
    // the low mantissa bits of `kf` hold k in two's complement
    let scale = f64::from_bits(bits.wrapping_sub(SHIFT.to_bits()).wrapping_add(1023) << 52);
    p * scale
}

#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    let t = exp(-2.0 * x.abs());
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

/// Single-precision `e^x`, argument clamped to `[-87, 87]`.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const SHIFT32: f32 = 12_582_912.0; // 1.5 * 2^23
    let x = if x < -87.0 {
        -87.0
    } else if x > 87.0 {
        87.0
    } else {
        x
    };
    let kf = x * std::f32::consts::LOG2_E + SHIFT32;
    let bits = kf.to_bits();
    let k = kf - SHIFT32;
    let r = (x - k * 0.693_145_75) - k * 1.428_606_8e-6;
    let r2 = r * r;
    let p = (1.0 + r) + (0.5 + r * (1.0 / 6.0)) * r2
        + ((1.0 / 24.0) + r * (1.0 / 120.0) + r2 * (1.0 / 720.0)) * (r2 * r2);
    let scale = f32::from_bits(bits.wrapping_sub(SHIFT32.to_bits()).wrapping_add(127) << 23);
    p * scale
}

#[inline(always)]
pub fn tanh_f32(x: f32) -> f32 {
    let t = exp_f32(-2.0 * x.abs());
    ((1.0 - t) / (1.0 + t)).copysign(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_matches_std() {
        let mut worst = 0.0f64;
        for i in -400_000..=400_000 {
            let x = i as f64 * 1e-4 + 0.3e-5;
            worst = worst.max((tanh(x) - x.tanh()).abs());
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(tanh(1e6), 1.0);
        assert_eq!(tanh(-1e6), -1.0);
        assert_eq!(tanh(0.0), 0.0);
    }

    #[test]
    fn single_precision_variants() {
        let (mut we, mut wt) = (0.0f64, 0.0f64);
        for i in -86_000..=86_000 {
            let x = i as f32 * 1e-3;
            let e = (x as f64).exp();
            we = we.max(((exp_f32(x) as f64 - e) / e).abs());
            wt = wt.max((tanh_f32(x) as f64 - (x as f64).tanh()).abs());
        }
        assert!(we < 1e-6, "exp {we}");
        assert!(wt < 1e-6, "tanh {wt}");
    }

    #[test]
    fn exp_relative_error() {
        let mut worst = 0.0f64;
        for i in -69_900..=69_900 {
            let x = i as f64 * 1e-2 + 0.7e-3;
            worst = worst.max(((exp(x) - x.exp()) / x.exp()).abs());
        }
        assert!(worst < 1e-14, "{worst}");
        assert_eq!(exp(0.0), 1.0);
    }
}
