//! Intuitionistic fuzzy encoding of crisp intensity images.
//!
//! An image is mapped pixel-wise to a triplet `(mu, nu, pi)`: a membership
//! degree from one of the [`MembershipConfig`] functions, a non-membership
//! degree from a parametric fuzzy negation ([`NegationConfig`]), and the
//! hesitation `pi = 1 - mu - nu` left over between them. Everything in this
//! module runs in `f64`; the invariant checks need a tolerance of [`EPS`].

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance for the triplet invariants and the rounding clamp window.
pub const EPS: f64 = 1e-9;

/// Default histogram resolution.
pub const DEFAULT_BINS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl IntensityImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidImage(format!(
                "non-finite value at pixel {i}"
            )));
        }
        Ok(IntensityImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Applies `a * x + b` to every pixel.
    pub fn affine(&self, a: f64, b: f64) -> Result<Self> {
        IntensityImage::new(
            self.width,
            self.height,
            self.data.iter().map(|&x| a * x + b).collect(),
        )
    }

    fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// What min-max membership does when every pixel has the same value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstantPolicy {
    #[default]
    Error,
    Zero,
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MembershipConfig {
    /// `(x - min) / (max - min)`.
    MinMax {
        #[serde(default)]
        constant: ConstantPolicy,
    },
    /// `exp(-(x - c)^2 / (2 sigma^2))`.
    Gaussian { center: f64, sigma: f64 },
    /// `1 / (1 + exp(-slope (x - c)))`.
    Sigmoid { center: f64, slope: f64 },
}

impl Default for MembershipConfig {
    fn default() -> Self {
        MembershipConfig::MinMax {
            constant: ConstantPolicy::Error,
        }
    }
}

impl MembershipConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MembershipConfig::MinMax { .. } => Ok(()),
            MembershipConfig::Gaussian { center, sigma } => {
                if !center.is_finite() {
                    return Err(Error::InvalidConfig(format!("gaussian center {center}")));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "gaussian sigma must be > 0, got {sigma}"
                    )));
                }
                Ok(())
            }
            MembershipConfig::Sigmoid { center, slope } => {
                if !center.is_finite() || !slope.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "sigmoid center {center} / slope {slope} must be finite"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NegationConfig {
    /// `(1 - mu) / (1 + lambda mu)`, `lambda > 0`.
    Sugeno { lambda: f64 },
    /// `(1 - mu^alpha)^(1/alpha)`, `0 < alpha < 1`.
    Yager { alpha: f64 },
}

impl NegationConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NegationConfig::Sugeno { lambda } if !(lambda > 0.0 && lambda.is_finite()) => Err(
                Error::InvalidConfig(format!("sugeno lambda must be > 0, got {lambda}")),
            ),
            NegationConfig::Yager { alpha } if !(alpha > 0.0 && alpha < 1.0) => Err(
                Error::InvalidConfig(format!("yager alpha must lie in (0, 1), got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    /// Short family name used in tables: `sugeno` or `yager`.
    pub fn family(&self) -> &'static str {
        match self {
            NegationConfig::Sugeno { .. } => "sugeno",
            NegationConfig::Yager { .. } => "yager",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            NegationConfig::Sugeno { lambda } => lambda,
            NegationConfig::Yager { alpha } => alpha,
        }
    }

    /// Negation of a single membership value; `mu` must already be in `[0, 1]`.
    #[inline]
    pub fn apply(&self, mu: f64) -> f64 {
        match *self {
            NegationConfig::Sugeno { lambda } => (1.0 - mu) / (1.0 + lambda * mu),
            NegationConfig::Yager { alpha } => (1.0 - mu.powf(alpha)).max(0.0).powf(alpha.recip()),
        }
    }
}

/// Snaps values that rounding pushed just outside `[0, 1]` back inside.
#[inline]
fn snap_unit(v: f64) -> f64 {
    if v < 0.0 && v > -EPS {
        0.0
    } else if v > 1.0 && v < 1.0 + EPS {
        1.0
    } else {
        v
    }
}

fn check_unit(plane: &[f64]) -> Result<()> {
    match plane.iter().position(|&v| !(-EPS..=1.0 + EPS).contains(&v)) {
        Some(index) => Err(Error::OutOfUnitRange {
            index,
            value: plane[index],
        }),
        None => Ok(()),
    }
}

pub fn membership(img: &IntensityImage, cfg: &MembershipConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let out = match *cfg {
        MembershipConfig::MinMax { constant } => {
            let (lo, hi) = img.min_max();
            if hi == lo {
                match constant {
                    ConstantPolicy::Error => return Err(Error::ConstantImage { value: lo }),
                    ConstantPolicy::Zero => vec![0.0; img.len()],
                    ConstantPolicy::Half => vec![0.5; img.len()],
                }
            } else {
                let span = hi - lo;
                img.data
                    .iter()
                    .map(|&x| snap_unit((x - lo) / span))
                    .collect()
            }
        }
        MembershipConfig::Gaussian { center, sigma } => {
            let denom = 2.0 * sigma * sigma;
            img.data
                .iter()
                .map(|&x| snap_unit((-(x - center).powi(2) / denom).exp()))
                .collect()
        }
        MembershipConfig::Sigmoid { center, slope } => img
            .data
            .iter()
            .map(|&x| snap_unit(1.0 / (1.0 + (-slope * (x - center)).exp())))
            .collect(),
    };
    Ok(out)
}

pub fn negation(mu: &[f64], cfg: &NegationConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_unit(mu)?;
    Ok(mu
        .iter()
        .map(|&m| snap_unit(cfg.apply(m.clamp(0.0, 1.0))))
        .collect())
}

pub fn hesitation(mu: &[f64], nu: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != nu.len() {
        return Err(Error::ShapeMismatch(format!(
            "mu has {} pixels, nu has {}",
            mu.len(),
            nu.len()
        )));
    }
    // Report the worst offender, not the first.
    let worst = mu.iter().zip(nu).map(|(m, n)| m + n).enumerate().fold(
        None::<(usize, f64)>,
        |acc, (i, s)| match acc {
            Some((_, best)) if best >= s => acc,
            _ => Some((i, s)),
        },
    );
    if let Some((index, sum)) = worst {
        if sum > 1.0 + EPS || sum.is_nan() {
            return Err(Error::ConstraintViolation { index, sum });
        }
    }
    Ok(mu
        .iter()
        .zip(nu)
        .map(|(m, n)| {
            let p = 1.0 - m - n;
            if p < 0.0 {
                0.0
            } else {
                p
            }
        })
        .collect())
}

/// Three-plane `(mu, nu, pi)` encoding of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct IfsImage {
    pub width: usize,
    pub height: usize,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub pi: Vec<f64>,
}

impl IfsImage {
    /// Planes in channel order `(mu, nu, pi)`.
    pub fn planes(&self) -> [&[f64]; 3] {
        [&self.mu, &self.nu, &self.pi]
    }

    /// Checks every per-pixel invariant, returning the first violating pixel.
    pub fn check_invariants(&self) -> std::result::Result<(), usize> {
        let n = self.width * self.height;
        if self.mu.len() != n || self.nu.len() != n || self.pi.len() != n {
            return Err(0);
        }
        for i in 0..n {
            let (m, v, p) = (self.mu[i], self.nu[i], self.pi[i]);
            let ok = (0.0..=1.0).contains(&m)
                && (0.0..=1.0).contains(&v)
                && m + v <= 1.0 + EPS
                && p >= -EPS
                && (p - (1.0 - m - v)).abs() <= EPS;
            if !ok {
                return Err(i);
            }
        }
        Ok(())
    }
}

pub fn encode(
    img: &IntensityImage,
    membership_cfg: &MembershipConfig,
    negation_cfg: &NegationConfig,
) -> Result<IfsImage> {
    negation_cfg.validate()?;
    let mu = membership(img, membership_cfg)?;
    let nu = negation(&mu, negation_cfg)?;
    let pi = hesitation(&mu, &nu)?;
    Ok(IfsImage {
        width: img.width,
        height: img.height,
        mu,
        nu,
        pi,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Writes `bin_lo,bin_hi,count` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                c.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Uniform-bin histogram over `[0, 1]`; the value `1.0` lands in the last bin.
pub fn plane_histogram(plane: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidBins);
    }
    check_unit(plane)?;
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in plane {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}
