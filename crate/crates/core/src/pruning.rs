//! Layer densities and backward structured channel pruning.
//!
//! Each layer keeps `round_half_up(density · C_in)` input channels (at least
//! one), walking from the output head back to the first layer. The producer
//! of those channels drops the matching output channels. The network input
//! and the score output are never pruned.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::image::Patch;
use crate::net::{branch_scores, patches_tensor, BoundParams, NetworkSpec, ParameterSet};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDensity {
    pub name: String,
    pub nonzero: u64,
    pub total: u64,
    /// `nonzero / total`, or 1.0 for an empty layer.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub layers: Vec<LayerDensity>,
}

impl DensityReport {
    pub fn nonzero(&self) -> u64 {
        self.layers.iter().map(|l| l.nonzero).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.total).sum()
    }

    pub fn global_density(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            1.0
        } else {
            self.nonzero() as f64 / t as f64
        }
    }

    pub fn get(&self, name: &str) -> Option<&LayerDensity> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>10} {:>10} {:>9}\n", "layer", "nonzero", "total", "density");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>10} {:>9.6}",
                l.name, l.nonzero, l.total, l.density
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>10} {:>10} {:>9.6}",
            "global",
            self.nonzero(),
            self.total(),
            self.global_density()
        );
        s
    }
}

/// Per-layer weight densities; biases are excluded.
pub fn compute_density<T: Real>(params: &ParameterSet<T>) -> DensityReport {
    let layers = params
        .layers()
        .iter()
        .map(|l| {
            let total = l.weight.len() as u64;
            let nonzero = l.weight.count_nonzero() as u64;
            let density = if total == 0 {
                log::warn!("layer {} has no weights; density taken as 1", l.name);
                1.0
            } else {
                nonzero as f64 / total as f64
            };
            LayerDensity {
                name: l.name.clone(),
                nonzero,
                total,
                density,
            }
        })
        .collect();
    DensityReport { layers }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    /// Retained input channels, strictly increasing.
    pub keep_in: Vec<usize>,
    /// Retained output channels, strictly increasing.
    pub keep_out: Vec<usize>,
    /// `round_half_up(density · C_in)`, clamped to `1..=C_in`.
    pub target_in: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruningPlan {
    pub layers: Vec<LayerPlan>,
}

/// `round_half_up(nonzero/total · channels)` in integer arithmetic, clamped to `1..=channels`.
pub fn target_channels(nonzero: u64, total: u64, channels: usize) -> usize {
    if total == 0 {
        return channels;
    }
    let c = channels as u128;
    let n = (2 * nonzero as u128 * c + total as u128) / (2 * total as u128);
    (n as usize).clamp(1, channels.max(1))
}

fn full(n: usize) -> Vec<usize> {
    (0..n).collect()
}

impl PruningPlan {
    /// Keeps every channel.
    pub fn identity(spec: &NetworkSpec) -> Self {
        PruningPlan {
            layers: spec
                .layers
                .iter()
                .map(|l| LayerPlan {
                    name: l.name.clone(),
                    keep_in: full(l.in_channels),
                    keep_out: full(l.out_channels),
                    target_in: l.in_channels,
                })
                .collect(),
        }
    }

    /// Plan from the retained input channels of every layer after the first;
    /// output channels follow by adjacency.
    pub fn from_input_keeps(spec: &NetworkSpec, keeps: &[Vec<usize>]) -> Result<Self> {
        let n = spec.layers.len();
        if keeps.len() + 1 != n {
            return Err(Error::Structure(format!(
                "{} input-channel lists for {} layers (the first layer's input is fixed)",
                keeps.len(),
                n
            )));
        }
        let mut plan = PruningPlan::identity(spec);
        for (i, keep) in keeps.iter().enumerate() {
            plan.layers[i + 1].keep_in = keep.clone();
            plan.layers[i + 1].target_in = keep.len();
            plan.layers[i].keep_out = keep.clone();
        }
        plan.check(spec)?;
        Ok(plan)
    }

    /// Range, ordering and chain-consistency checks against `spec`.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Structure(format!(
                "plan has {} layers, network has {}",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (p, l) in self.layers.iter().zip(&spec.layers) {
            if p.name != l.name {
                return Err(Error::Structure(format!(
                    "plan entry {} where layer {} expected",
                    p.name, l.name
                )));
            }
            for (what, keep, limit) in [
                ("input", &p.keep_in, l.in_channels),
                ("output", &p.keep_out, l.out_channels),
            ] {
                if keep.is_empty() {
                    return Err(Error::Structure(format!("layer {} keeps no {what} channels", l.name)));
                }
                if keep.windows(2).any(|w| w[0] >= w[1]) || keep.iter().any(|&c| c >= limit) {
                    return Err(Error::Structure(format!(
                        "layer {} {what} channels {keep:?} are not an increasing subset of 0..{limit}",
                        l.name
                    )));
                }
            }
        }
        if self.layers[0].keep_in.len() != spec.layers[0].in_channels {
            return Err(Error::Structure(format!(
                "layer {} input channels are the network input and cannot be pruned",
                spec.layers[0].name
            )));
        }
        let last = self.layers.last().expect("non-empty");
        if last.keep_out.len() != spec.layers.last().expect("non-empty").out_channels {
            return Err(Error::Structure(format!(
                "output head {} cannot lose output units",
                last.name
            )));
        }
        for pair in self.layers.windows(2) {
            if pair[0].keep_out != pair[1].keep_in {
                return Err(Error::Structure(format!(
                    "layer {} keeps outputs {:?} but layer {} keeps inputs {:?}",
                    pair[0].name, pair[0].keep_out, pair[1].name, pair[1].keep_in
                )));
            }
        }
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::from("# layer target_in kept_in kept_out in_channels out_channels\n");
        for p in &self.layers {
            let _ = writeln!(
                s,
                "{} {} {} {} in={} out={}",
                p.name,
                p.target_in,
                p.keep_in.len(),
                p.keep_out.len(),
                join(&p.keep_in),
                join(&p.keep_out)
            );
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_table()).map_err(|e| Error::io(path, e))
    }
}

/// Walks backwards from the head. Channel `c` entering layer `L` scores
/// `‖W_L[kept rows, c]‖₁ + ‖W_{L−1}[c]‖₁`; the highest scores survive, ties
/// to the lower index.
pub fn build_pruning_plan<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    report: &DensityReport,
) -> Result<PruningPlan> {
    spec.check()?;
    if let Some(v) = params.check_against(spec).into_iter().next() {
        return Err(Error::Structure(v));
    }
    let mut plan = PruningPlan::identity(spec);
    for li in (1..spec.layers.len()).rev() {
        let layer = &spec.layers[li];
        let d = report
            .get(&layer.name)
            .ok_or_else(|| Error::Structure(format!("density report lacks layer {}", layer.name)))?;
        let target = target_channels(d.nonzero, d.total, layer.in_channels);
        if d.nonzero == 0 {
            log::warn!("layer {} is entirely zero; keeping one channel", layer.name);
        }
        let weight = &params.layers()[li].weight;
        let rows = weight.select(0, &plan.layers[li].keep_out)?;
        let fan_in = rows.slice_l1(1);
        let fan_out = params.layers()[li - 1].weight.slice_l1(0);
        let mut order: Vec<usize> = full(layer.in_channels);
        order.sort_by(|&a, &b| {
            let (sa, sb) = (fan_in[a] + fan_out[a], fan_in[b] + fan_out[b]);
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        let mut keep = order[..target].to_vec();
        keep.sort_unstable();
        plan.layers[li].target_in = target;
        plan.layers[li].keep_in = keep.clone();
        plan.layers[li - 1].keep_out = keep;
    }
    plan.check(spec)?;
    Ok(plan)
}

/// Slices every weight along both channel axes and biases along outputs.
pub fn prune_network<T: Real>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    plan: &PruningPlan,
) -> Result<(NetworkSpec, ParameterSet<T>)> {
    plan.check(spec)?;
    if let Some(v) = params.check_against(spec).into_iter().next() {
        return Err(Error::Structure(v));
    }
    let mut compact = spec.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for ((l, p), lp) in compact.layers.iter_mut().zip(params.layers()).zip(&plan.layers) {
        let weight = p
            .weight
            .select(0, &lp.keep_out)
            .and_then(|w| w.select(1, &lp.keep_in))
            .map_err(|e| Error::Structure(format!("layer {}: {e}", l.name)))?;
        let bias = p
            .bias
            .select(0, &lp.keep_out)
            .map_err(|e| Error::Structure(format!("layer {}: {e}", l.name)))?;
        l.in_channels = lp.keep_in.len();
        l.out_channels = lp.keep_out.len();
        layers.push(crate::net::LayerParams {
            name: p.name.clone(),
            weight,
            bias,
        });
    }
    Ok((compact, ParameterSet::new(layers)))
}

/// Every structural problem found; empty means the model is usable.
pub fn validate_structure<T: Real>(spec: &NetworkSpec, params: &ParameterSet<T>) -> Vec<String> {
    let mut v = spec.violations();
    if let Err(e) = spec.conv_extents() {
        v.push(e.to_string());
    }
    v.extend(params.check_against(spec));
    if !v.is_empty() {
        return v;
    }
    let zero = Patch::filled(spec.patch, 0.0);
    let dry_run = (|| -> Result<()> {
        let mut tape = Tape::<T>::new();
        let bound = BoundParams::bind(&mut tape, params, false);
        let r = tape.constant(patches_tensor(&[&zero])?);
        let d = tape.constant(patches_tensor(&[&zero])?);
        let s = branch_scores(&mut tape, spec, &bound, r, d)?;
        if tape.shape(s) != [1, 1] {
            return Err(Error::Structure(format!(
                "score head yields shape {:?}",
                tape.shape(s)
            )));
        }
        if !tape.value(s).all_finite() {
            return Err(Error::Numerical("dry run produced a non-finite score".into()));
        }
        Ok(())
    })();
    if let Err(e) = dry_run {
        v.push(format!("dry-run forward failed: {e}"));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Geometry;
    use crate::net::{build_teacher, QualityNetConfig};

    fn small() -> (NetworkSpec, ParameterSet<f32>) {
        build_teacher(&QualityNetConfig {
            patch: Geometry::new(1, 8, 8),
            conv_widths: vec![4, 6],
            head_width: 5,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn rounding_is_half_up_and_clamped() {
        assert_eq!(target_channels(1, 4, 64), 16);
        assert_eq!(target_channels(1, 8, 5), 1);
        assert_eq!(target_channels(3, 8, 4), 2);
        assert_eq!(target_channels(0, 8, 4), 1);
        assert_eq!(target_channels(8, 8, 4), 4);
    }

    #[test]
    fn full_density_gives_identity_plan() {
        let (spec, params) = small();
        let plan = build_pruning_plan(&spec, &params, &compute_density(&params)).unwrap();
        assert_eq!(plan, PruningPlan::identity(&spec));
        let (s2, p2) = prune_network(&spec, &params, &plan).unwrap();
        assert_eq!((s2, p2), (spec, params));
    }

    #[test]
    fn tandem_adjustment() {
        let (spec, _) = small();
        let plan = PruningPlan::from_input_keeps(&spec, &[vec![0, 3], vec![1, 2, 5], vec![0, 4]])
            .unwrap();
        assert_eq!(plan.layers[0].keep_out, vec![0, 3]);
        assert_eq!(plan.layers[1].keep_in, vec![0, 3]);
        assert_eq!(plan.layers[3].keep_out, vec![0]);
    }

    #[test]
    fn inconsistent_plan_is_rejected() {
        let (spec, params) = small();
        let mut plan = PruningPlan::identity(&spec);
        plan.layers[1].keep_in = vec![0, 1];
        let err = prune_network(&spec, &params, &plan).unwrap_err();
        assert!(err.to_string().contains("conv1"), "{err}");
    }

    #[test]
    fn corrupted_spec_is_reported() {
        let (mut spec, params) = small();
        assert!(validate_structure(&spec, &params).is_empty());
        spec.layers[1].in_channels = 3;
        let v = validate_structure(&spec, &params);
        assert!(v.iter().any(|m| m.contains("conv1") && m.contains("conv2")), "{v:?}");
    }
}
