//! Gauss–Kronrod (7/15) quadrature on a fixed partition.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// Gauss weights for the odd-indexed Kronrod nodes (1, 3, 5, 7).
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// One 15-point Kronrod panel; returns (integral, |K15 − G7|).
pub fn gk15<T: Scalar, F: Fn(T) -> T>(f: &F, a: T, b: T) -> (T, T) {
    let center = T::half() * (a + b);
    let half = T::half() * (b - a);
    let fc = f(center);
    let mut kronrod = fc * T::of(WGK[7]);
    let mut gauss = fc * T::of(WG[3]);
    for j in 0..7 {
        let dx = half * T::of(XGK[j]);
        let pair = f(center - dx) + f(center + dx);
        kronrod += T::of(WGK[j]) * pair;
        if j % 2 == 1 {
            gauss += T::of(WG[j / 2]) * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Composite rule over `panels` equal sub-intervals of `[a, b]`.
pub fn composite<T: Scalar, F: Fn(T) -> T>(f: &F, a: T, b: T, panels: usize) -> (T, T) {
    let width = (b - a) / T::of_usize(panels);
    let mut total = T::zero();
    let mut err = T::zero();
    for i in 0..panels {
        let lo = a + width * T::of_usize(i);
        let hi = if i + 1 == panels { b } else { lo + width };
        let (v, e) = gk15(f, lo, hi);
        total += v;
        err += e;
    }
    (total, err)
}

/// Chooses a panel count for `[a, b]` by doubling until the summed
/// Kronrod–Gauss error estimate falls below `tol`.
///
/// The returned grid is meant to be reused for a family of integrands that
/// vary smoothly with a parameter, so the quadrature error does not jitter
/// between evaluations.
pub fn choose_panels<T: Scalar, F: Fn(T) -> T>(f: &F, a: T, b: T, tol: T) -> Result<usize> {
    let mut panels = 8;
    while panels <= 1 << 16 {
        let (_, err) = composite(f, a, b, panels);
        if err <= tol {
            return Ok(panels);
        }
        panels *= 2;
    }
    Err(Error::Numeric(format!(
        "quadrature did not reach tolerance {tol} on [{a}, {b}]"
    )))
}
