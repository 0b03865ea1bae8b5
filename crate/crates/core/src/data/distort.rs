//! Severity-ordered distortion families.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Patch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistortionKind {
    GaussianBlur,
    GaussianNoise,
    Quantization,
    /// Downscale then upscale back (resolution adaptation).
    Resample,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 4] = [
        DistortionKind::GaussianBlur,
        DistortionKind::GaussianNoise,
        DistortionKind::Quantization,
        DistortionKind::Resample,
    ];

    pub fn code(self) -> u8 {
        match self {
            DistortionKind::GaussianBlur => 0,
            DistortionKind::GaussianNoise => 1,
            DistortionKind::Quantization => 2,
            DistortionKind::Resample => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::data(format!("unknown distortion kind code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussianBlur => "gaussian-blur",
            DistortionKind::GaussianNoise => "additive-gaussian-noise",
            DistortionKind::Quantization => "uniform-quantization",
            DistortionKind::Resample => "downsample-upsample",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown distortion kind {s:?}")))
    }
}

/// One rung of a distortion ladder. Level 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: u8,
    /// Top of the ladder (S).
    pub levels: u8,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, level: u8, levels: u8) -> Result<Self> {
        if levels == 0 || level > levels {
            return Err(Error::config(format!(
                "level {level} outside ladder 0..={levels}"
            )));
        }
        Ok(DistortionSpec {
            kind,
            level,
            levels,
        })
    }

    /// Kind-specific magnitude; strictly increasing in level.
    ///
    /// blur σ, noise σ, quantization step, or resample factor − 1.
    pub fn magnitude(&self) -> f64 {
        let l = self.level as f64;
        match self.kind {
            DistortionKind::GaussianBlur => 0.5 * l,
            DistortionKind::GaussianNoise => 0.025 * l,
            DistortionKind::Quantization if self.level == 0 => 0.0,
            DistortionKind::Quantization => 2f64.powi(self.level as i32 - self.levels as i32),
            DistortionKind::Resample => 0.5 * l,
        }
    }
}

/// Applies `spec` to `patch`; deterministic for a given seed, clipped to `[0,1]`.
pub fn apply_distortion(patch: &Patch, spec: &DistortionSpec, seed: u64) -> Result<Patch> {
    if spec.level > spec.levels {
        return Err(Error::config(format!(
            "level {} outside ladder 0..={}",
            spec.level, spec.levels
        )));
    }
    let mut out = patch.clone();
    if spec.level == 0 {
        return Ok(out);
    }
    let g = patch.geometry();
    let m = spec.magnitude();
    match spec.kind {
        DistortionKind::GaussianBlur => {
            for c in 0..g.channels {
                let blurred = gaussian_blur(patch.plane(c), g.height, g.width, m);
                out.plane_mut(c).copy_from_slice(&blurred);
            }
        }
        DistortionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, m).expect("positive sigma");
            for v in out.data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        DistortionKind::Quantization => {
            let steps = (1.0 / m).round() as f32;
            for v in out.data_mut() {
                *v = (v.clamp(0.0, 1.0) * steps).round() / steps;
            }
        }
        DistortionKind::Resample => {
            let factor = 1.0 + m;
            let nh = ((g.height as f64 / factor).round() as usize).max(1);
            let nw = ((g.width as f64 / factor).round() as usize).max(1);
            for c in 0..g.channels {
                let pre = gaussian_blur(patch.plane(c), g.height, g.width, 0.35 * factor);
                let small = resize_bilinear(&pre, g.height, g.width, nh, nw);
                let back = resize_bilinear(&small, nh, nw, g.height, g.width);
                out.plane_mut(c).copy_from_slice(&back);
            }
        }
    }
    out.clip_unit();
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with reflected borders.
pub(crate) fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= norm);

    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * plane[y * w + reflect(x as isize + k as isize - radius, w)] as f64)
                .sum();
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let acc: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, &t)| t * tmp[reflect(y as isize + k as isize - radius, h) * w + x] as f64)
                .sum();
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub(crate) fn resize_bilinear(plane: &[f32], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let sample_axis = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let (y0, y1, fy) = sample_axis(y, nh, h);
        for x in 0..nw {
            let (x0, x1, fx) = sample_axis(x, nw, w);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
