//! Analytical per-layer training cost of concatenation-style fusion versus
//! gated cross-attention fusion.
//!
//! Full attention (visual tokens concatenated into the LM sequence):
//!
//! ```text
//! 24 B (s_img + s_txt) h^2 + 4 B (s_img + s_txt)^2 h
//! ```
//!
//! Cross-attention (only media tokens and text in the LM sequence):
//!
//! ```text
//! 4 (6 + r_xc + r_xf) B (m + s_txt) h^2        term1
//! + 4 B (m + s_txt)^2 h                         term2
//! + 4 r_xc B s_img d h                          term3
//! + 4 r_xc B (m + s_txt) s_img h                term4
//! ```
//!
//! with `m` the media-token count. The expressions are evaluated as written,
//! with no correction toward other accounting conventions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::DEFAULT_MEDIA_LEN;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsScenario {
    #[serde(rename = "B")]
    pub batch: u64,
    pub s_img: u64,
    pub s_txt: u64,
    pub h_llm: u64,
    pub d_img: u64,
    pub r_xc: f64,
    pub r_xf: f64,
    #[serde(default = "default_media_len")]
    pub media_len: u64,
}

fn default_media_len() -> u64 {
    DEFAULT_MEDIA_LEN as u64
}

/// Named scenarios with the reduction ratio published alongside them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Pretrain,
    Continual,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pretrain" => Ok(Preset::Pretrain),
            "continual" => Ok(Preset::Continual),
            _ => Err(Error::config(format!(
                "unknown preset `{name}` (pretrain | continual)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Pretrain => "pretrain",
            Preset::Continual => "continual",
        }
    }

    /// Published cross/full ratio for this preset.
    pub fn reported_ratio(self) -> f64 {
        match self {
            Preset::Pretrain => 0.24,
            Preset::Continual => 0.077,
        }
    }

    pub fn scenario(self) -> FlopsScenario {
        let s_img = match self {
            Preset::Pretrain => 256,
            Preset::Continual => 1024,
        };
        FlopsScenario {
            batch: 1,
            s_img,
            s_txt: 64,
            h_llm: 5120,
            d_img: 1792,
            r_xc: 0.2,
            r_xf: 0.5,
            media_len: DEFAULT_MEDIA_LEN as u64,
        }
    }
}

pub fn preset(name: &str) -> Result<FlopsScenario> {
    Preset::parse(name).map(Preset::scenario)
}

impl FlopsScenario {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r_xc", self.r_xc), ("r_xf", self.r_xf)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("{name} = {r} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Sets one field from its `key=value` name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| Error::config(format!("{key}: `{v}` is not a count")))
        };
        let real = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::config(format!("{key}: `{v}` is not a number")))
        };
        match key {
            "B" => self.batch = int(value)?,
            "s_img" => self.s_img = int(value)?,
            "s_txt" => self.s_txt = int(value)?,
            "h_llm" | "h" => self.h_llm = int(value)?,
            "d_img" | "d" => self.d_img = int(value)?,
            "r_xc" => self.r_xc = real(value)?,
            "r_xf" => self.r_xf = real(value)?,
            "media_len" => self.media_len = int(value)?,
            _ => return Err(Error::config(format!("unknown scenario field `{key}`"))),
        }
        Ok(())
    }

    /// Builds a scenario from `key=value` pairs; every field but `media_len`
    /// is required.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut sc = FlopsScenario {
            batch: 0,
            s_img: 0,
            s_txt: 0,
            h_llm: 0,
            d_img: 0,
            r_xc: f64::NAN,
            r_xf: f64::NAN,
            media_len: DEFAULT_MEDIA_LEN as u64,
        };
        let mut seen = Vec::new();
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected key=value, got `{pair}`")))?;
            sc.set(k.trim(), v.trim())?;
            seen.push(k.trim().to_string());
        }
        for required in ["B", "s_img", "s_txt", "r_xc", "r_xf"] {
            if !seen.iter().any(|s| s == required) {
                return Err(Error::config(format!("scenario is missing `{required}`")));
            }
        }
        if !seen.iter().any(|s| s == "h_llm" || s == "h")
            || !seen.iter().any(|s| s == "d_img" || s == "d")
        {
            return Err(Error::config("scenario is missing `h_llm` or `d_img`"));
        }
        sc.validate()?;
        Ok(sc)
    }
}

/// `r` as `p / q` with `q <= 1000` when that is its exact value.
fn small_rational(r: f64) -> Option<(u128, u128)> {
    (1..=1000u32).find_map(|q| {
        let p = (r * f64::from(q)).round();
        (p >= 0.0 && p / f64::from(q) == r).then_some((p as u128, u128::from(q)))
    })
}

fn cross_terms_exact(sc: &FlopsScenario) -> Option<[f64; 4]> {
    let (pc, qc) = small_rational(sc.r_xc)?;
    let (pf, qf) = small_rational(sc.r_xf)?;
    let b = u128::from(sc.batch);
    let q = u128::from(sc.media_len).checked_add(u128::from(sc.s_txt))?;
    let h = u128::from(sc.h_llm);
    let si = u128::from(sc.s_img);
    let d = u128::from(sc.d_img);
    let den = qc.checked_mul(qf)?;
    let coef = (6 * den).checked_add(pc * qf)?.checked_add(pf * qc)?;
    let t1 = 4u128
        .checked_mul(coef)?
        .checked_mul(b)?
        .checked_mul(q)?
        .checked_mul(h)?
        .checked_mul(h)?;
    let t2 = 4u128
        .checked_mul(b)?
        .checked_mul(q)?
        .checked_mul(q)?
        .checked_mul(h)?;
    let t3 = 4u128
        .checked_mul(pc)?
        .checked_mul(b)?
        .checked_mul(si)?
        .checked_mul(d)?
        .checked_mul(h)?;
    let t4 = 4u128
        .checked_mul(pc)?
        .checked_mul(b)?
        .checked_mul(q)?
        .checked_mul(si)?
        .checked_mul(h)?;
    Some([
        t1 as f64 / den as f64,
        t2 as f64,
        t3 as f64 / qc as f64,
        t4 as f64 / qc as f64,
    ])
}

/// Exact cross-attention total as `num / den`, when it fits in `u128`.
fn cross_total_exact(sc: &FlopsScenario) -> Option<(u128, u128)> {
    let (pc, qc) = small_rational(sc.r_xc)?;
    let (pf, qf) = small_rational(sc.r_xf)?;
    let b = u128::from(sc.batch);
    let q = u128::from(sc.media_len).checked_add(u128::from(sc.s_txt))?;
    let h = u128::from(sc.h_llm);
    let si = u128::from(sc.s_img);
    let d = u128::from(sc.d_img);
    let den = qc.checked_mul(qf)?;
    let coef = (6 * den).checked_add(pc * qf)?.checked_add(pf * qc)?;
    // every term scaled by den
    let t1 = 4u128
        .checked_mul(coef)?
        .checked_mul(b)?
        .checked_mul(q)?
        .checked_mul(h)?
        .checked_mul(h)?;
    let t2 = 4u128
        .checked_mul(b)?
        .checked_mul(q)?
        .checked_mul(q)?
        .checked_mul(h)?
        .checked_mul(den)?;
    let t34 = 4u128
        .checked_mul(pc)?
        .checked_mul(qf)?
        .checked_mul(b)?
        .checked_mul(si)?
        .checked_mul(h)?
        .checked_mul(d.checked_add(q)?)?;
    let num = t1.checked_add(t2)?.checked_add(t34)?;
    let g = gcd(num, den).max(1);
    Some((num / g, den / g))
}

fn full_total_exact(sc: &FlopsScenario) -> Option<u128> {
    let b = u128::from(sc.batch);
    let s = u128::from(sc.s_img).checked_add(u128::from(sc.s_txt))?;
    let h = u128::from(sc.h_llm);
    let a = 24u128
        .checked_mul(b)?
        .checked_mul(s)?
        .checked_mul(h)?
        .checked_mul(h)?;
    a.checked_add(
        4u128
            .checked_mul(b)?
            .checked_mul(s)?
            .checked_mul(s)?
            .checked_mul(h)?,
    )
}

/// `flops_cross / flops_full` reduced to lowest terms before the single
/// float division, so it does not depend on `B`.
fn ratio_exact(sc: &FlopsScenario) -> Option<f64> {
    let (num, den) = cross_total_exact(sc)?;
    let full = full_total_exact(sc)?.checked_mul(den)?;
    if full == 0 {
        return None;
    }
    let g = gcd(num, full);
    Some((num / g) as f64 / (full / g) as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn cross_terms_float(sc: &FlopsScenario) -> [f64; 4] {
    let b = sc.batch as f64;
    let q = (sc.media_len + sc.s_txt) as f64;
    let h = sc.h_llm as f64;
    let si = sc.s_img as f64;
    let d = sc.d_img as f64;
    [
        4.0 * (6.0 + sc.r_xc + sc.r_xf) * b * q * h * h,
        4.0 * b * q * q * h,
        4.0 * sc.r_xc * b * si * d * h,
        4.0 * sc.r_xc * b * q * si * h,
    ]
}

/// The four summands of the cross-attention cost, in order.
pub fn cross_attention_terms(sc: &FlopsScenario) -> [f64; 4] {
    cross_terms_exact(sc).unwrap_or_else(|| cross_terms_float(sc))
}

pub fn flops_full_attention(sc: &FlopsScenario) -> f64 {
    match full_total_exact(sc) {
        Some(v) => v as f64,
        None => {
            let (b, s, h) = (
                sc.batch as f64,
                (sc.s_img + sc.s_txt) as f64,
                sc.h_llm as f64,
            );
            24.0 * b * s * h * h + 4.0 * b * s * s * h
        }
    }
}

pub fn flops_cross_attention(sc: &FlopsScenario) -> f64 {
    match cross_total_exact(sc) {
        Some((num, 1)) => num as f64,
        Some((num, den)) => num as f64 / den as f64,
        None => cross_terms_float(sc).iter().sum(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub scenario: FlopsScenario,
    pub flops_full: f64,
    pub flops_cross: f64,
    /// `flops_cross / flops_full`.
    pub ratio: f64,
    pub terms: [f64; 4],
}

pub fn ratio(sc: &FlopsScenario) -> Result<FlopsReport> {
    let flops_full = flops_full_attention(sc);
    if flops_full == 0.0 {
        return Err(Error::Contract(
            "full-attention cost is zero; ratio undefined".into(),
        ));
    }
    let terms = cross_attention_terms(sc);
    let flops_cross = flops_cross_attention(sc);
    let ratio = ratio_exact(sc).unwrap_or(flops_cross / flops_full);
    Ok(FlopsReport {
        scenario: sc.clone(),
        flops_full,
        flops_cross,
        ratio,
        terms,
    })
}

impl FlopsReport {
    fn scenario_pairs(&self) -> Vec<(&'static str, String)> {
        let s = &self.scenario;
        vec![
            ("B", s.batch.to_string()),
            ("s_img", s.s_img.to_string()),
            ("s_txt", s.s_txt.to_string()),
            ("h_llm", s.h_llm.to_string()),
            ("d_img", s.d_img.to_string()),
            ("r_xc", s.r_xc.to_string()),
            ("r_xf", s.r_xf.to_string()),
            ("media_len", s.media_len.to_string()),
        ]
    }

    /// `key=value` lines. With a preset, also the published ratio and the
    /// absolute gap to it.
    pub fn to_record(&self, preset: Option<Preset>) -> String {
        let mut out = String::new();
        if let Some(p) = preset {
            let _ = writeln!(out, "preset={}", p.name());
        }
        for (k, v) in self.scenario_pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "flops_full={}", self.flops_full);
        let _ = writeln!(out, "flops_cross={}", self.flops_cross);
        for (i, t) in self.terms.iter().enumerate() {
            let _ = writeln!(out, "term{}={t}", i + 1);
        }
        let _ = writeln!(out, "S={}", self.ratio);
        if let Some(p) = preset {
            let _ = writeln!(out, "S_reported={}", p.reported_ratio());
            let _ = writeln!(
                out,
                "S_abs_diff={}",
                (self.ratio - p.reported_ratio()).abs()
            );
        }
        out
    }

    pub fn to_table(&self, preset: Option<Preset>) -> String {
        let mut out = String::new();
        let title = preset.map_or("custom scenario".to_string(), |p| {
            format!("preset {}", p.name())
        });
        let _ = writeln!(out, "{title}");
        for (k, v) in self.scenario_pairs() {
            let _ = writeln!(out, "  {k:<12} {v:>20}");
        }
        let _ = writeln!(out, "  {:<12} {:>20.0}", "flops_full", self.flops_full);
        let _ = writeln!(out, "  {:<12} {:>20.0}", "flops_cross", self.flops_cross);
        let labels = [
            "  term1 qkvo+ffn",
            "  term2 scores",
            "  term3 kv proj",
            "  term4 x-scores",
        ];
        for (l, t) in labels.iter().zip(&self.terms) {
            let _ = writeln!(out, "  {l:<18} {t:>14.0}");
        }
        let _ = writeln!(out, "  {:<12} {:>20.6}", "S computed", self.ratio);
        if let Some(p) = preset {
            let _ = writeln!(out, "  {:<12} {:>20.6}", "S reported", p.reported_ratio());
            let _ = writeln!(
                out,
                "  {:<12} {:>20.6}",
                "|diff|",
                (self.ratio - p.reported_ratio()).abs()
            );
        }
        out
    }
}

/// Parses `key=value` lines back into a map, for harnesses.
pub fn parse_record(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::config(format!("record line without `=`: {l}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FlopsScenario {
        FlopsScenario {
            batch: 1,
            s_img: 2,
            s_txt: 2,
            h_llm: 1,
            d_img: 1,
            r_xc: 0.5,
            r_xf: 0.5,
            media_len: 16,
        }
    }

    #[test]
    fn zero_batch_is_zero_cost() {
        let sc = FlopsScenario { batch: 0, ..tiny() };
        assert_eq!(flops_full_attention(&sc), 0.0);
        assert_eq!(cross_attention_terms(&sc), [0.0; 4]);
        assert!(matches!(ratio(&sc), Err(Error::Contract(_))));
    }

    #[test]
    fn hand_arithmetic() {
        assert_eq!(flops_full_attention(&tiny()), 160.0);
        let sc = FlopsScenario {
            s_txt: 0,
            s_img: 1,
            ..tiny()
        };
        assert_eq!(cross_attention_terms(&sc), [448.0, 1024.0, 2.0, 32.0]);
        assert_eq!(flops_cross_attention(&sc), 1506.0);
    }

    #[test]
    fn presets() {
        let p = preset("pretrain").unwrap();
        let c = preset("continual").unwrap();
        assert_eq!((p.s_img, p.s_txt), (256, 64));
        assert_eq!((c.s_img, c.s_txt), (1024, 64));
        for s in [&p, &c] {
            assert_eq!((s.h_llm, s.d_img, s.media_len), (5120, 1792, 16));
            assert_eq!((s.r_xc, s.r_xf), (0.2, 0.5));
        }
        assert!(preset("finetune").is_err());
    }

    #[test]
    fn exact_path_matches_float_path_closely() {
        let sc = preset("continual").unwrap();
        let e = cross_terms_exact(&sc).unwrap();
        let f = cross_terms_float(&sc);
        for (a, b) in e.iter().zip(&f) {
            assert!(((a - b) / a).abs() < 1e-14);
        }
    }

    #[test]
    fn small_rational_detection() {
        assert_eq!(small_rational(0.2), Some((1, 5)));
        assert_eq!(small_rational(0.5), Some((1, 2)));
        assert_eq!(small_rational(1.0), Some((1, 1)));
        assert_eq!(small_rational(std::f64::consts::PI / 4.0), None);
    }

    #[test]
    fn batch_cancels_in_ratio() {
        let sc = preset("pretrain").unwrap();
        let r1 = ratio(&sc).unwrap().ratio;
        let r2 = ratio(&FlopsScenario { batch: 2, ..sc }).unwrap().ratio;
        assert_eq!(r1, r2);
    }

    #[test]
    fn scenario_from_pairs() {
        let sc = FlopsScenario::from_pairs([
            "B=2", "s_img=3", "s_txt=4", "h_llm=5", "d_img=6", "r_xc=0.2", "r_xf=0.5",
        ])
        .unwrap();
        assert_eq!(sc.batch, 2);
        assert_eq!(sc.media_len, 16);
        assert!(FlopsScenario::from_pairs(["B=2"]).is_err());
        assert!(FlopsScenario::from_pairs(["B=2", "bogus=1"]).is_err());
        assert!(FlopsScenario::from_pairs(["B=x"]).is_err());
    }

    #[test]
    fn record_round_trip() {
        let r = ratio(&preset("continual").unwrap()).unwrap();
        let rec = r.to_record(Some(Preset::Continual));
        let kv = parse_record(&rec).unwrap();
        let get = |k: &str| {
            kv.iter()
                .find(|(a, _)| a == k)
                .unwrap()
                .1
                .parse::<f64>()
                .unwrap()
        };
        assert_eq!(get("flops_full"), r.flops_full);
        assert_eq!(get("S"), r.ratio);
        assert_eq!(get("S_reported"), 0.077);
        assert_eq!(get("s_img"), 1024.0);
    }
}
