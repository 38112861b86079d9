//! Arbitrary-precision evaluation of the two cost formulas as printed,
//! written without reference to the library's arithmetic.

use gated_vlm::flops::FlopsScenario;
use num::{BigInt, BigRational, Signed, ToPrimitive, Zero};
use rand::Rng;

pub fn q(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

pub fn qf(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

/// 24 B (s_img + s_txt) h^2 + 4 B (s_img + s_txt)^2 h
pub fn oracle_full(sc: &FlopsScenario) -> BigRational {
    let (b, s, h) = (q(sc.batch), q(sc.s_img) + q(sc.s_txt), q(sc.h_llm));
    q(24) * &b * &s * &h * &h + q(4) * &b * &s * &s * &h
}

/// 4 (6 + r_xc + r_xf) B (16 + s_txt) h^2 + 4 B (16 + s_txt)^2 h
///   + 4 r_xc B s_img d h + 4 r_xc B (16 + s_txt) s_img h
pub fn oracle_cross(sc: &FlopsScenario) -> BigRational {
    let (b, si, st, h, d) = (
        q(sc.batch),
        q(sc.s_img),
        q(sc.s_txt),
        q(sc.h_llm),
        q(sc.d_img),
    );
    let (rc, rf) = (qf(sc.r_xc), qf(sc.r_xf));
    let qlen = q(16) + st;
    q(4) * (q(6) + &rc + &rf) * &b * &qlen * &h * &h
        + q(4) * &b * &qlen * &qlen * &h
        + q(4) * &rc * &b * &si * &d * &h
        + q(4) * &rc * &b * &qlen * &si * &h
}

pub fn rel_err(got: f64, want: &BigRational) -> f64 {
    if want.is_zero() {
        return got.abs();
    }
    ((qf(got) - want).abs() / want.abs()).to_f64().unwrap()
}

pub fn random_scenario(rng: &mut impl Rng) -> FlopsScenario {
    let r = |rng: &mut dyn rand::RngCore| -> f64 {
        // half exact small rationals, half arbitrary floats in (0, 1]
        if rng.random_bool(0.5) {
            rng.random_range(1..=100) as f64 / 100.0
        } else {
            1.0 - rng.random::<f64>()
        }
    };
    FlopsScenario {
        batch: rng.random_range(1..=4096),
        s_img: rng.random_range(1..=8192),
        s_txt: rng.random_range(1..=4096),
        h_llm: rng.random_range(1..=16384),
        d_img: rng.random_range(1..=8192),
        r_xc: r(rng),
        r_xf: r(rng),
        media_len: 16,
    }
}
