//! Cosine from basic IEEE arithmetic only, so generated labels do not depend
//! on the platform's libm.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

pub(crate) fn det_cos(x: f64) -> f64 {
    let mut r = x.abs() % TAU;
    if r > PI {
        r = TAU - r;
    }
    let (r, sign) = if r > FRAC_PI_2 { (PI - r, -1.0) } else { (r, 1.0) };
    let r2 = r * r;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=12u32 {
        let (a, b) = (f64::from(2 * k - 1), f64::from(2 * k));
        term *= -r2 / (a * b);
        sum += term;
    }
    sign * sum
}
