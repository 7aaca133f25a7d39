//! Sub-policy augmentation engine over 8-bit images.
//!
//! Ops run on the `round(x·255)` quantization of the image, like the PIL-based
//! reference implementations. Geometric ops use bilinear sampling with zero fill.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

const LEVELS: u8 = 10;
const DEFAULT_POLICY: &str = include_str!("../../data/autoaugment_cifar10.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpName {
    ShearX,
    ShearY,
    Rotate,
    TranslateX,
    TranslateY,
    Color,
    Posterize,
    Solarize,
    Brightness,
    Contrast,
    Sharpness,
    Autocontrast,
    Equalize,
    Invert,
}

impl OpName {
    pub const ALL: [OpName; 14] = [
        OpName::ShearX,
        OpName::ShearY,
        OpName::Rotate,
        OpName::TranslateX,
        OpName::TranslateY,
        OpName::Color,
        OpName::Posterize,
        OpName::Solarize,
        OpName::Brightness,
        OpName::Contrast,
        OpName::Sharpness,
        OpName::Autocontrast,
        OpName::Equalize,
        OpName::Invert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpName::ShearX => "shear_x",
            OpName::ShearY => "shear_y",
            OpName::Rotate => "rotate",
            OpName::TranslateX => "translate_x",
            OpName::TranslateY => "translate_y",
            OpName::Color => "color",
            OpName::Posterize => "posterize",
            OpName::Solarize => "solarize",
            OpName::Brightness => "brightness",
            OpName::Contrast => "contrast",
            OpName::Sharpness => "sharpness",
            OpName::Autocontrast => "autocontrast",
            OpName::Equalize => "equalize",
            OpName::Invert => "invert",
        }
    }

    pub fn takes_magnitude(self) -> bool {
        !matches!(self, OpName::Autocontrast | OpName::Equalize | OpName::Invert)
    }

    /// Ops whose magnitude gets a random sign.
    pub fn signed(self) -> bool {
        matches!(
            self,
            OpName::ShearX
                | OpName::ShearY
                | OpName::Rotate
                | OpName::TranslateX
                | OpName::TranslateY
                | OpName::Color
                | OpName::Brightness
                | OpName::Contrast
                | OpName::Sharpness
        )
    }
}

impl fmt::Display for OpName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpName {
    type Err = Error;

    /// Case, `-` and `_` are ignored: `shear-x`, `shear_x` and `ShearX` all parse.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase();
        OpName::ALL
            .into_iter()
            .find(|op| op.name().replace('_', "") == key)
            .ok_or_else(|| Error::Policy(format!("unknown op `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOp {
    pub op: OpName,
    pub probability: f64,
    /// Level in `0..10`; `None` for ops without a magnitude.
    pub magnitude: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubPolicy {
    pub ops: [PolicyOp; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub sub_policies: Vec<SubPolicy>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    sub_policy: Vec<RawSub>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSub {
    ops: Vec<RawOp>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOp {
    op: String,
    p: f64,
    magnitude: Option<i64>,
}

impl AugmentPolicy {
    /// The published CIFAR-10 AutoAugment table.
    pub fn cifar10() -> Self {
        Self::parse(DEFAULT_POLICY).expect("bundled policy parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawPolicy = toml::from_str(text).map_err(|e| Error::Policy(e.to_string()))?;
        let mut sub_policies = Vec::with_capacity(raw.sub_policy.len());
        for (i, sub) in raw.sub_policy.into_iter().enumerate() {
            let ops: Vec<PolicyOp> = sub
                .ops
                .into_iter()
                .map(|r| {
                    let op: OpName = r.op.parse()?;
                    if !(0.0..=1.0).contains(&r.p) {
                        return Err(Error::Policy(format!("sub-policy {i}: probability {} outside [0, 1]", r.p)));
                    }
                    let magnitude = match (op.takes_magnitude(), r.magnitude) {
                        (true, Some(m)) if (0..LEVELS as i64).contains(&m) => Some(m as u8),
                        (true, Some(m)) => {
                            return Err(Error::Policy(format!("sub-policy {i}: {op} level {m} outside 0..{LEVELS}")))
                        }
                        (true, None) => return Err(Error::Policy(format!("sub-policy {i}: {op} needs a magnitude"))),
                        (false, _) => None,
                    };
                    Ok(PolicyOp {
                        op,
                        probability: r.p,
                        magnitude,
                    })
                })
                .collect::<Result<_>>()?;
            let ops: [PolicyOp; 2] = ops
                .try_into()
                .map_err(|v: Vec<PolicyOp>| Error::Policy(format!("sub-policy {i} has {} ops, expected 2", v.len())))?;
            sub_policies.push(SubPolicy { ops });
        }
        if sub_policies.is_empty() {
            return Err(Error::Policy("policy has no sub-policies".into()));
        }
        Ok(AugmentPolicy { sub_policies })
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for sub in &self.sub_policies {
            out.push_str("[[sub_policy]]\nops = [");
            let parts: Vec<String> = sub
                .ops
                .iter()
                .map(|o| match o.magnitude {
                    Some(m) => format!("{{ op = \"{}\", p = {:?}, magnitude = {m} }}", o.op, o.probability),
                    None => format!("{{ op = \"{}\", p = {:?} }}", o.op, o.probability),
                })
                .collect();
            out.push_str(&parts.join(", "));
            out.push_str("]\n\n");
        }
        out
    }
}

struct U8Image {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl U8Image {
    fn quantize(x: &[f32], dims: [usize; 3]) -> Self {
        U8Image {
            c: dims[0],
            h: dims[1],
            w: dims[2],
            data: x.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn gray(&self) -> Vec<f64> {
        let p = self.plane();
        if self.c < 3 {
            return self.data[..p].iter().map(|&v| v as f64).collect();
        }
        (0..p)
            .map(|i| {
                let (r, g, b) = (self.data[i] as f64, self.data[p + i] as f64, self.data[2 * p + i] as f64);
                (r * 299.0 + g * 587.0 + b * 114.0) / 1000.0
            })
            .collect()
    }

    /// `out = degenerate + factor·(img − degenerate)`; `degenerate` is per pixel and channel.
    fn blend(&mut self, degenerate: impl Fn(usize, usize) -> f64, factor: f64) {
        let p = self.plane();
        for ch in 0..self.c {
            for i in 0..p {
                let px = &mut self.data[ch * p + i];
                let d = degenerate(ch, i);
                *px = (d + factor * (*px as f64 - d)).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    /// Resamples through an inverse map from output to input pixel-center coordinates.
    fn warp(&mut self, inverse: impl Fn(f64, f64) -> (f64, f64)) {
        let (h, w) = (self.h, self.w);
        let p = self.plane();
        let mut out = vec![0u8; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inverse(x as f64 + 0.5, y as f64 + 0.5);
                let (fx, fy) = (sx - 0.5, sy - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - x0, fy - y0);
                for ch in 0..self.c {
                    let at = |xx: f64, yy: f64| -> f64 {
                        if xx < 0.0 || yy < 0.0 || xx >= w as f64 || yy >= h as f64 {
                            0.0
                        } else {
                            self.data[ch * p + yy as usize * w + xx as usize] as f64
                        }
                    };
                    let v = (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1.0, y0))
                        + ay * ((1.0 - ax) * at(x0, y0 + 1.0) + ax * at(x0 + 1.0, y0 + 1.0));
                    out[ch * p + y * w + x] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        self.data = out;
    }

    fn per_channel(&mut self, f: impl Fn(&mut [u8])) {
        let p = self.plane();
        for ch in 0..self.c {
            f(&mut self.data[ch * p..(ch + 1) * p]);
        }
    }
}

fn equalize_channel(px: &mut [u8]) {
    let mut hist = [0usize; 256];
    for &v in px.iter() {
        hist[v as usize] += 1;
    }
    let last = hist.iter().rposition(|&c| c > 0).map_or(0, |i| hist[i]);
    let step = (px.len() - last) / 255;
    if step == 0 {
        return;
    }
    let mut lut = [0u8; 256];
    let mut n = step / 2;
    for (i, l) in lut.iter_mut().enumerate() {
        *l = (n / step).min(255) as u8;
        n += hist[i];
    }
    px.iter_mut().for_each(|v| *v = lut[*v as usize]);
}

fn autocontrast_channel(px: &mut [u8]) {
    let lo = *px.iter().min().unwrap_or(&0);
    let hi = *px.iter().max().unwrap_or(&255);
    if hi <= lo {
        return;
    }
    let scale = 255.0 / (hi - lo) as f64;
    px.iter_mut()
        .for_each(|v| *v = ((*v - lo) as f64 * scale).clamp(0.0, 255.0) as u8);
}

fn apply_u8(img: &mut U8Image, op: OpName, level: u8, negate: bool) {
    let m = level as f64 / (LEVELS - 1) as f64;
    let sign = if negate { -1.0 } else { 1.0 };
    let (w, h) = (img.w as f64, img.h as f64);
    match op {
        OpName::ShearX => {
            let s = sign * 0.3 * m;
            img.warp(|x, y| (x + s * y, y));
        }
        OpName::ShearY => {
            let s = sign * 0.3 * m;
            img.warp(|x, y| (x, y + s * x));
        }
        OpName::TranslateX => {
            let t = sign * 150.0 / 331.0 * w * m;
            img.warp(|x, y| (x - t, y));
        }
        OpName::TranslateY => {
            let t = sign * 150.0 / 331.0 * h * m;
            img.warp(|x, y| (x, y - t));
        }
        OpName::Rotate => {
            let theta = (sign * 30.0 * m).to_radians();
            let (sin, cos) = theta.sin_cos();
            let (cx, cy) = (w / 2.0, h / 2.0);
            img.warp(|x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
            });
        }
        OpName::Color => {
            let gray = img.gray();
            img.blend(|_, i| gray[i], 1.0 + sign * 0.9 * m);
        }
        OpName::Brightness => img.blend(|_, _| 0.0, 1.0 + sign * 0.9 * m),
        OpName::Contrast => {
            let gray = img.gray();
            let mean = gray.iter().sum::<f64>() / gray.len() as f64;
            img.blend(|_, _| mean, 1.0 + sign * 0.9 * m);
        }
        OpName::Sharpness => {
            let (hh, ww, p) = (img.h, img.w, img.plane());
            let mut smooth: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
            if hh > 2 && ww > 2 {
                for ch in 0..img.c {
                    for y in 1..hh - 1 {
                        for x in 1..ww - 1 {
                            let mut acc = 0.0;
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let k = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                                    acc += k * img.data[ch * p + (y + dy - 1) * ww + x + dx - 1] as f64;
                                }
                            }
                            smooth[ch * p + y * ww + x] = (acc / 13.0).round();
                        }
                    }
                }
            }
            img.blend(|ch, i| smooth[ch * p + i], 1.0 + sign * 0.9 * m);
        }
        OpName::Posterize => {
            let bits = 8 - (level as f64 / 2.25).round() as u32;
            let mask = !((1u32 << (8 - bits)) - 1) as u8;
            img.data.iter_mut().for_each(|v| *v &= mask);
        }
        OpName::Solarize => {
            let threshold = 255.0 * (1.0 - m);
            img.data.iter_mut().for_each(|v| {
                if *v as f64 >= threshold {
                    *v = 255 - *v;
                }
            });
        }
        OpName::Autocontrast => img.per_channel(autocontrast_channel),
        OpName::Equalize => img.per_channel(equalize_channel),
        OpName::Invert => img.data.iter_mut().for_each(|v| *v = 255 - *v),
    }
}

/// Applies one op to a `[c, h, w]` image in `[0, 1]`; the result is 8-bit quantized.
pub fn apply_op(x: &[f32], dims: [usize; 3], op: OpName, level: u8, negate: bool) -> Result<Vec<f32>> {
    if level >= LEVELS {
        return Err(Error::Policy(format!("level {level} outside 0..{LEVELS}")));
    }
    let mut img = U8Image::quantize(x, dims);
    apply_u8(&mut img, op, level, negate);
    Ok(img.to_f32())
}

/// Picks one sub-policy uniformly and applies each of its ops with its own
/// probability. An image no op touches is returned unchanged.
pub fn apply_policy(x: &[f32], dims: [usize; 3], policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Vec<f32>> {
    if policy.sub_policies.is_empty() {
        return Err(Error::Policy("policy has no sub-policies".into()));
    }
    if x.len() != dims.iter().product::<usize>() {
        return Err(Error::Dimension("pixel count does not match dims".into()));
    }
    let sub = &policy.sub_policies[rng.random_range(0..policy.sub_policies.len())];
    let mut img: Option<U8Image> = None;
    for op in &sub.ops {
        let u: f64 = rng.random();
        let negate: bool = rng.random();
        if u < op.probability {
            let im = img.get_or_insert_with(|| U8Image::quantize(x, dims));
            apply_u8(im, op.op, op.magnitude.unwrap_or(0), negate);
        }
    }
    Ok(match img {
        Some(im) => im.to_f32(),
        None => x.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthOptions};
    use crate::rng::{stream, Purpose};

    fn image() -> (Vec<f32>, [usize; 3]) {
        let b = synth_dataset(&SynthOptions { n: 10, ..SynthOptions::default() }).unwrap();
        let q: Vec<f32> = b.images.row(2).iter().map(|v| (v * 255.0).round() / 255.0).collect();
        (q, b.dims())
    }

    #[test]
    fn bundled_policy_has_25_pairs_over_the_vocabulary() {
        let p = AugmentPolicy::cifar10();
        assert_eq!(p.sub_policies.len(), 25);
        let reparsed = AugmentPolicy::parse(&p.to_toml()).unwrap();
        assert_eq!(reparsed, p);
    }

    #[test]
    fn unknown_op_and_bad_probability_are_policy_errors() {
        let bad = "[[sub_policy]]\nops = [{ op = \"mixup\", p = 0.5 }, { op = \"invert\", p = 0.1 }]\n";
        assert!(matches!(AugmentPolicy::parse(bad), Err(Error::Policy(_))));
        let bad = "[[sub_policy]]\nops = [{ op = \"invert\", p = 1.5 }, { op = \"invert\", p = 0.1 }]\n";
        assert!(matches!(AugmentPolicy::parse(bad), Err(Error::Policy(_))));
        let bad = "[[sub_policy]]\nops = [{ op = \"rotate\", p = 0.5 }, { op = \"invert\", p = 0.1 }]\n";
        assert!(matches!(AugmentPolicy::parse(bad), Err(Error::Policy(_))));
        assert_eq!("shear-x".parse::<OpName>().unwrap(), OpName::ShearX);
        assert_eq!("AutoContrast".parse::<OpName>().unwrap(), OpName::Autocontrast);
    }

    #[test]
    fn zero_probability_is_identity() {
        let (x, d) = image();
        let zero = AugmentPolicy::parse(
            "[[sub_policy]]\nops = [{ op = \"rotate\", p = 0.0, magnitude = 5 }, { op = \"invert\", p = 0.0 }]\n",
        )
        .unwrap();
        let mut rng = stream(0, 0, 0, Purpose::Augment, 0);
        for _ in 0..20 {
            assert_eq!(apply_policy(&x, d, &zero, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn involutions_and_full_depth_posterize() {
        let (x, d) = image();
        let once = apply_op(&x, d, OpName::Invert, 0, false).unwrap();
        assert_ne!(once, x);
        assert_eq!(apply_op(&once, d, OpName::Invert, 0, false).unwrap(), x);
        assert_eq!(apply_op(&x, d, OpName::Posterize, 0, false).unwrap(), x);
    }

    #[test]
    fn zero_magnitude_geometry_and_enhance_are_identity() {
        let (x, d) = image();
        for op in [
            OpName::ShearX,
            OpName::ShearY,
            OpName::Rotate,
            OpName::TranslateX,
            OpName::TranslateY,
            OpName::Color,
            OpName::Brightness,
            OpName::Contrast,
            OpName::Sharpness,
        ] {
            assert_eq!(apply_op(&x, d, op, 0, true).unwrap(), x, "{op}");
        }
    }

    #[test]
    fn every_op_stays_in_range_and_shape() {
        let (x, d) = image();
        for op in OpName::ALL {
            for level in [3, 9] {
                let y = apply_op(&x, d, op, level, level == 9).unwrap();
                assert_eq!(y.len(), x.len());
                assert!(y.iter().all(|v| (0.0..=1.0).contains(v)), "{op}");
            }
        }
    }

    #[test]
    fn equalize_and_autocontrast_on_known_values() {
        let mut px = vec![10u8, 10, 20, 30];
        autocontrast_channel(&mut px);
        assert_eq!(px, [0, 0, 127, 255]);
        let mut flat = vec![7u8; 16];
        equalize_channel(&mut flat);
        assert_eq!(flat, vec![7u8; 16]);
        let mut solar = U8Image { c: 1, h: 1, w: 2, data: vec![100, 200] };
        apply_u8(&mut solar, OpName::Solarize, 4, false);
        // threshold 255·(1 − 4/9) ≈ 141.7
        assert_eq!(solar.data, [100, 55]);
    }
}
