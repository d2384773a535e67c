//! Synthetic 2-D brain-like phantoms with exact ground truth.
//!
//! Each phantom is three nested smooth blobs (CSF ring, GM annulus, WM core)
//! over background. Labels are crisp; the intensity image gets a smooth
//! multiplicative bias field, a Gaussian blur that mixes tissues across
//! boundaries (partial-volume ambiguity), and additive Gaussian noise.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::encoding::IntensityImage;
use crate::metrics::LabelMask;
use crate::{derive_seed, Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "CSF", "GM", "WM"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub size: usize,
    /// Mean intensity per class, BG < CSF < GM < WM, on a 0-255 scale.
    pub tissue_means: [f64; NUM_CLASSES],
    pub noise_sigma: f64,
    pub pv_blur_sigma: f64,
    pub bias_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            tissue_means: [10.0, 60.0, 120.0, 200.0],
            noise_sigma: 8.0,
            pv_blur_sigma: 1.5,
            bias_amplitude: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "size must be even and >= 16, got {}",
                self.size
            )));
        }
        if !self.tissue_means.windows(2).all(|w| w[0] < w[1])
            || !self.tissue_means.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidSpec(format!(
                "tissue means must be strictly increasing BG < CSF < GM < WM, got {:?}",
                self.tissue_means
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("pv_blur_sigma", self.pv_blur_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(Error::InvalidSpec(format!(
                "bias_amplitude must lie in [0, 1), got {}",
                self.bias_amplitude
            )));
        }
        Ok(())
    }

    /// Checks that the phantom size survives `depth` halvings.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        if !self.size.is_multiple_of(1 << depth) {
            return Err(Error::InvalidSpec(format!(
                "size {} is not divisible by 2^{depth}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Closed curve `r(theta) = scale * (1 + sum_h a_h cos(h theta + phi_h))`.
struct Contour {
    harmonics: Vec<(f64, f64, f64)>,
}

impl Contour {
    fn random(rng: &mut ChaCha8Rng, total_amplitude: f64) -> Self {
        let count = rng.random_range(3..=6);
        let raw: Vec<f64> = (0..count).map(|_| rng.random_range(0.1..1.0)).collect();
        let norm: f64 = raw.iter().sum();
        let harmonics = raw
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let order = (i + 2) as f64;
                (
                    order,
                    a / norm * total_amplitude,
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        Contour { harmonics }
    }

    fn factor(&self, theta: f64) -> f64 {
        1.0 + self
            .harmonics
            .iter()
            .map(|&(h, a, phi)| a * (h * theta + phi).cos())
            .sum::<f64>()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(data: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let n = size as isize;
    let at = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * data[y * size + at(x as isize + j as isize - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[at(y as isize + j as isize - r) * size + x])
                .sum();
        }
    }
    out
}

fn generate_one(spec: &PhantomSpec, index: usize) -> Result<Sample> {
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let s = size as f64;

    let cx = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let cy = s / 2.0 + rng.random_range(-0.05..0.05) * s;
    let radius = s * rng.random_range(0.30..0.36);
    let outer_amp = rng.random_range(0.08..0.20);
    let outer = Contour::random(&mut rng, outer_amp);
    let gm_scale = rng.random_range(0.78..0.84);
    let gm_amp = rng.random_range(0.0..0.04);
    let gm = Contour::random(&mut rng, gm_amp);
    let wm_scale = rng.random_range(0.50..0.60);
    let wm_amp = rng.random_range(0.0..0.08);
    let wm = Contour::random(&mut rng, wm_amp);

    let fx = rng.random_range(0.3..0.8);
    let fy = rng.random_range(0.3..0.8);
    let (px, py) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));

    let mut labels = vec![0u8; size * size];
    let mut clean = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let rho = dx.hypot(dy);
            let theta = dy.atan2(dx);
            let r_out = radius * outer.factor(theta);
            let class = if rho < r_out * wm_scale * wm.factor(theta) {
                3
            } else if rho < r_out * gm_scale * gm.factor(theta) {
                2
            } else if rho < r_out {
                1
            } else {
                0
            };
            let field = (TAU * fx * x as f64 / s + px).sin() * (TAU * fy * y as f64 / s + py).cos();
            let i = y * size + x;
            labels[i] = class;
            clean[i] = spec.tissue_means[class as usize] * (1.0 + spec.bias_amplitude * field);
        }
    }

    let mut data = gaussian_blur(&clean, size, spec.pv_blur_sigma);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidSpec(format!("noise: {e}")))?;
        data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }

    Ok(Sample {
        id: format!("phantom_{:05}", index),
        image: IntensityImage::new(size, size, data)?,
        label: LabelMask::new(size, size, labels)?,
    })
}

/// Generates `count` phantoms; sample `i` depends only on `(spec, i)`.
pub fn generate(spec: &PhantomSpec, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidSpec("count must be >= 1".into()));
    }
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect()
}

/// Pixels whose Chebyshev `radius`-neighbourhood contains a different class.
pub fn boundary_band(label: &LabelMask, radius: usize) -> Vec<bool> {
    let (w, h) = (label.width, label.height);
    let r = radius as isize;
    let mut band = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let me = label.data[(y as usize) * w + x as usize];
            'search: for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    if label.data[yy as usize * w + xx as usize] != me {
                        band[y as usize * w + x as usize] = true;
                        break 'search;
                    }
                }
            }
        }
    }
    band
}

/// Pixels with at least one differently-labelled 8-neighbour.
pub fn transition_set(label: &LabelMask) -> Vec<bool> {
    boundary_band(label, 1)
}
