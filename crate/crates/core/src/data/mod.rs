//! Procedural corpus: source textures, a distortion ladder, ranked pair
//! instances and pseudo-MOS evaluation sets.
//!
//! Every item draws its randomness from a seed derived from the global seed
//! and its own index, so generation order never changes the output.

mod container;
mod distort;

pub use container::{
    read_dataset, read_eval_set, write_dataset, write_eval_set, DATASET_VERSION, EVAL_VERSION,
};
pub use distort::{apply_distortion, DistortionKind, DistortionSpec};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Geometry, Patch};

/// SplitMix64 finalizer over a seed and a list of stream indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    FilteredNoise,
    Gradient,
    JitteredCheckerboard,
    SmoothBlobs,
}

impl Generator {
    pub const ALL: [Generator; 4] = [
        Generator::FilteredNoise,
        Generator::Gradient,
        Generator::JitteredCheckerboard,
        Generator::SmoothBlobs,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourcePatch {
    pub patch: Patch,
    pub generator: Generator,
    pub seed: u64,
}

impl SourcePatch {
    /// Regenerates a source from its generator id and seed.
    pub fn generate(generator: Generator, geometry: Geometry, seed: u64) -> Result<Self> {
        if geometry.is_empty() {
            return Err(Error::config(format!("degenerate geometry {geometry}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (geometry.height, geometry.width);
        let mut data = Vec::with_capacity(geometry.len());
        for _ in 0..geometry.channels {
            let mut plane = match generator {
                Generator::FilteredNoise => {
                    let raw: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
                    let sigma = rng.random_range(0.6..2.0);
                    distort::gaussian_blur(&raw, h, w, sigma)
                }
                Generator::Gradient => {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let freq = rng.random_range(0.2..0.9);
                    let (ca, sa) = (angle.cos(), angle.sin());
                    let span = (h + w) as f64;
                    (0..h * w)
                        .map(|i| {
                            let (y, x) = ((i / w) as f64, (i % w) as f64);
                            let t = (x * ca + y * sa) / span;
                            (t + 0.15 * (freq * (x * sa - y * ca)).sin()) as f32
                        })
                        .collect()
                }
                Generator::JitteredCheckerboard => {
                    let cell = rng.random_range(2..=5usize);
                    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
                    let cells = (h / cell + 2) * (w / cell + 2);
                    let jitter: Vec<f32> = (0..cells).map(|_| rng.random_range(-0.2..0.2)).collect();
                    (0..h * w)
                        .map(|i| {
                            let (cy, cx) = ((i / w + oy) / cell, (i % w + ox) / cell);
                            let base = if (cy + cx) % 2 == 0 { 0.3 } else { 0.7 };
                            base + jitter[cy * (w / cell + 2) + cx]
                        })
                        .collect()
                }
                Generator::SmoothBlobs => {
                    let n = rng.random_range(3..=7);
                    let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
                        .map(|_| {
                            (
                                rng.random_range(0.0..h as f64),
                                rng.random_range(0.0..w as f64),
                                rng.random_range(1.5..(h.max(w) as f64 / 3.0).max(2.0)),
                                rng.random_range(-1.0..1.0),
                            )
                        })
                        .collect();
                    (0..h * w)
                        .map(|i| {
                            let (y, x) = ((i / w) as f64, (i % w) as f64);
                            blobs
                                .iter()
                                .map(|&(by, bx, r, a)| {
                                    a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * r * r))
                                        .exp()
                                })
                                .sum::<f64>() as f32
                        })
                        .collect()
                }
            };
            // Fine texture on every generator so blur and quantization are visible.
            for v in &mut plane {
                *v += rng.random_range(-0.04..0.04);
            }
            let (lo, hi) = plane
                .iter()
                .fold((f32::MAX, f32::MIN), |(l, u), &v| (l.min(v), u.max(v)));
            let out_lo = rng.random_range(0.05..0.3f32);
            let out_hi = rng.random_range(0.7..0.95f32);
            let scale = if hi > lo { (out_hi - out_lo) / (hi - lo) } else { 0.0 };
            data.extend(plane.iter().map(|&v| out_lo + (v - lo) * scale));
        }
        let mut patch = Patch::new(geometry, data)?;
        patch.clip_unit();
        Ok(SourcePatch {
            patch,
            generator,
            seed,
        })
    }
}

/// `n` procedural source patches cycling through all generators.
pub fn generate_sources(n: usize, geometry: Geometry, seed: u64) -> Result<Vec<SourcePatch>> {
    if n == 0 {
        return Err(Error::config("need at least one source patch"));
    }
    if geometry.is_empty() {
        return Err(Error::config(format!("degenerate geometry {geometry}")));
    }
    (0..n)
        .map(|i| {
            let generator = Generator::ALL[i % Generator::ALL.len()];
            SourcePatch::generate(generator, geometry, derive_seed(seed, &[0x50_55, i as u64]))
        })
        .collect()
}

/// Provenance of a ranked pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairMeta {
    pub kind: DistortionKind,
    pub level1: u8,
    pub level2: u8,
    pub source1: u32,
    pub source2: u32,
}

impl PairMeta {
    /// 1 when the first pair has the lower severity.
    pub fn label_from_levels(&self) -> u8 {
        u8::from(self.level1 < self.level2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedPairInstance {
    pub r1: Patch,
    pub d1: Patch,
    pub r2: Patch,
    pub d2: Patch,
    /// 1 if `(r1, d1)` is the higher-quality pair.
    pub label: u8,
    pub meta: PairMeta,
}

impl RankedPairInstance {
    /// Exchanges the two pairs; flips the label.
    pub fn swapped(&self) -> Self {
        RankedPairInstance {
            r1: self.r2.clone(),
            d1: self.d2.clone(),
            r2: self.r1.clone(),
            d2: self.d1.clone(),
            label: 1 - self.label,
            meta: PairMeta {
                level1: self.meta.level2,
                level2: self.meta.level1,
                source1: self.meta.source2,
                source2: self.meta.source1,
                ..self.meta
            },
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.r1.geometry()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairOptions {
    pub pairs_per_source: usize,
    /// Top severity level S.
    pub levels: u8,
    /// Different content in the two pairs (levels then differ by at least 2).
    pub cross_content: bool,
}

/// Ranked instances labeled by severity order; labels alternate so the
/// corpus is balanced.
pub fn make_pair_dataset(
    sources: &[SourcePatch],
    options: PairOptions,
    seed: u64,
) -> Result<Vec<RankedPairInstance>> {
    let s = options.levels;
    if s < 2 {
        return Err(Error::config(format!("ladder needs at least 2 levels, got {s}")));
    }
    if options.cross_content && s < 3 {
        return Err(Error::config("cross-content pairs need at least 3 levels"));
    }
    if sources.is_empty() {
        return Err(Error::config("no source patches"));
    }
    let levels: Vec<u8> = (1..=s).collect();
    let mut out = Vec::with_capacity(sources.len() * options.pairs_per_source);
    for si in 0..sources.len() {
        for j in 0..options.pairs_per_source {
            let index = out.len();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7a_1e, si as u64, j as u64]));
            let kind = *DistortionKind::ALL.choose(&mut rng).expect("non-empty");
            let (better, worse) = loop {
                let a = *levels.choose(&mut rng).expect("non-empty");
                let b = *levels.choose(&mut rng).expect("non-empty");
                let gap = if options.cross_content { 2 } else { 1 };
                if a.abs_diff(b) >= gap {
                    break (a.min(b), a.max(b));
                }
            };
            let other = if options.cross_content && sources.len() > 1 {
                let k = rng.random_range(0..sources.len() - 1);
                if k >= si {
                    k + 1
                } else {
                    k
                }
            } else {
                si
            };
            let label = (index % 2) as u8;
            let (level1, level2, src1, src2) = if label == 1 {
                (better, worse, si, other)
            } else {
                (worse, better, other, si)
            };
            let d1 = apply_distortion(
                &sources[src1].patch,
                &DistortionSpec::new(kind, level1, s)?,
                rng.random(),
            )?;
            let d2 = apply_distortion(
                &sources[src2].patch,
                &DistortionSpec::new(kind, level2, s)?,
                rng.random(),
            )?;
            let meta = PairMeta {
                kind,
                level1,
                level2,
                source1: src1 as u32,
                source2: src2 as u32,
            };
            debug_assert_eq!(meta.label_from_levels(), label);
            out.push(RankedPairInstance {
                r1: sources[src1].patch.clone(),
                d1,
                r2: sources[src2].patch.clone(),
                d2,
                label,
                meta,
            });
        }
    }
    Ok(out)
}

/// Graded evaluation item: a reference/distorted frame sequence and its
/// pseudo-MOS.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub reference: Vec<Patch>,
    pub distorted: Vec<Patch>,
    pub kind: DistortionKind,
    pub level: u8,
    pub source: u32,
    /// `S − level + U(−jitter, jitter)`.
    pub mos: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    pub name: String,
    pub items: Vec<EvalItem>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub levels: u8,
    pub frames: usize,
    pub jitter: f64,
}

/// One evaluation dataset per distortion kind, covering every source and
/// every level 1..=S. Each frame of a sequence is an independent source
/// texture distorted at the item's level.
pub fn make_eval_sets(
    frame_geometry: Geometry,
    sources: usize,
    options: EvalOptions,
    seed: u64,
) -> Result<Vec<EvalDataset>> {
    if options.levels < 2 {
        return Err(Error::config("ladder needs at least 2 levels"));
    }
    if options.frames == 0 {
        return Err(Error::config("frames must be at least 1"));
    }
    let frames = generate_sources(sources * options.frames, frame_geometry, seed)?;
    DistortionKind::ALL
        .iter()
        .map(|&kind| {
            let mut items = Vec::with_capacity(sources * options.levels as usize);
            for si in 0..sources {
                let reference: Vec<Patch> = frames[si * options.frames..(si + 1) * options.frames]
                    .iter()
                    .map(|s| s.patch.clone())
                    .collect();
                for level in 1..=options.levels {
                    let item_seed = derive_seed(seed, &[0xe7a1, kind.code() as u64, si as u64, level as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
                    let spec = DistortionSpec::new(kind, level, options.levels)?;
                    let distorted = reference
                        .iter()
                        .map(|f| apply_distortion(f, &spec, rng.random()))
                        .collect::<Result<Vec<_>>>()?;
                    let jitter = if options.jitter > 0.0 {
                        rng.random_range(-options.jitter..options.jitter)
                    } else {
                        0.0
                    };
                    items.push(EvalItem {
                        reference: reference.clone(),
                        distorted,
                        kind,
                        level,
                        source: si as u32,
                        mos: (options.levels as f64 - level as f64 + jitter) as f32,
                    });
                }
            }
            Ok(EvalDataset {
                name: kind.name().to_string(),
                items,
            })
        })
        .collect()
}
