//! Scattering structurally different submodel updates back to parent shape
//! and combining them into one global update.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{structural, CflError, Result};
use crate::nn::{ParamSet, Tensor};
use crate::supernet::{layer_id, ArchDescriptor, Supernet, SupernetConfig};

/// Weight and bias update of one convolution or dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDelta {
    pub w: Tensor,
    pub b: Tensor,
}

/// A delta split into the stem, the residual groups (in layer order) and the head.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDelta {
    pub stem: LayerDelta,
    pub groups: Vec<Vec<LayerDelta>>,
    pub head: LayerDelta,
}

impl GroupedDelta {
    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    /// Back to a flat parameter set with the usual ids.
    pub fn flatten(&self) -> ParamSet {
        let mut p = ParamSet::new();
        let mut put = |id: &str, l: &LayerDelta| {
            p.insert(format!("{}.w", id), l.w.clone());
            p.insert(format!("{}.b", id), l.b.clone());
        };
        put("stem", &self.stem);
        for (g, layers) in self.groups.iter().enumerate() {
            for (d, l) in layers.iter().enumerate() {
                put(&layer_id(g, d), l);
            }
        }
        put("head", &self.head);
        p
    }
}

fn take_layer(delta: &ParamSet, id: &str) -> Result<LayerDelta> {
    let w = delta.get(&format!("{}.w", id)).ok_or_else(|| structural!("delta lacks layer {}", id))?;
    let b = delta.get(&format!("{}.b", id)).ok_or_else(|| structural!("delta lacks bias of layer {}", id))?;
    Ok(LayerDelta { w: w.clone(), b: b.clone() })
}

/// Splits `delta` by residual group following `arch`. The stem and head are
/// kept apart since they are never sliced or padded.
pub fn group_layers(cfg: &SupernetConfig, delta: &ParamSet, arch: &ArchDescriptor) -> Result<GroupedDelta> {
    if arch.depth.len() != cfg.num_groups {
        return Err(structural!("arch has {} groups, parent {}", arch.depth.len(), cfg.num_groups));
    }
    let stem = take_layer(delta, "stem")?;
    let head = take_layer(delta, "head")?;
    let mut groups = Vec::with_capacity(cfg.num_groups);
    let mut used = 4;
    for (g, &depth) in arch.depth.iter().enumerate() {
        let layers = (0..depth).map(|d| take_layer(delta, &layer_id(g, d))).collect::<Result<Vec<_>>>()?;
        used += 2 * layers.len();
        groups.push(layers);
    }
    if used != delta.len() {
        return Err(structural!(
            "delta has {} tensors but arch with depths {:?} accounts for {}",
            delta.len(),
            arch.depth,
            used
        ));
    }
    Ok(GroupedDelta { stem, groups, head })
}

/// Scatters every active layer into parent width: output channels land at
/// `channels[g][d]`, input channels at the previous layer's indices. Layers
/// keep their submodel depth.
pub fn expand_width(cfg: &SupernetConfig, delta: &ParamSet, arch: &ArchDescriptor) -> Result<ParamSet> {
    arch.validate(cfg)?;
    let mut grouped = group_layers(cfg, delta, arch)?;
    for (g, layers) in grouped.groups.iter_mut().enumerate() {
        for (d, layer) in layers.iter_mut().enumerate() {
            let rows = &arch.channels[g][d];
            let cols = arch.input_channels(cfg, g, d);
            let cin_parent = if d == 0 { cfg.group_input_width(g) } else { cfg.max_widths[g] };
            let w = layer.w.scatter_axis(0, rows, cfg.max_widths[g])?;
            layer.w = w.scatter_axis(1, &cols, cin_parent)?;
            layer.b = layer.b.scatter_axis(0, rows, cfg.max_widths[g])?;
        }
    }
    Ok(grouped.flatten())
}

/// Appends all-zero parent-shaped layers to every group shallower than the parent.
pub fn expand_depth(cfg: &SupernetConfig, widened: &ParamSet, arch: &ArchDescriptor) -> Result<ParamSet> {
    if let Some((g, &d)) = arch.depth.iter().enumerate().find(|(_, &d)| d > cfg.max_depth) {
        return Err(structural!("group {} has depth {} beyond the parent's {}", g, d, cfg.max_depth));
    }
    let mut grouped = group_layers(cfg, widened, arch)?;
    let k = cfg.kernel_size;
    for (g, layers) in grouped.groups.iter_mut().enumerate() {
        let w = cfg.max_widths[g];
        for (d, layer) in layers.iter().enumerate() {
            let cin = if d == 0 { cfg.group_input_width(g) } else { w };
            if layer.w.shape() != [w, cin, k, k] || layer.b.shape() != [w] {
                return Err(structural!(
                    "layer {} has shape {:?} before depth expansion; widen it first",
                    layer_id(g, d),
                    layer.w.shape()
                ));
            }
        }
        while layers.len() < cfg.max_depth {
            layers.push(LayerDelta { w: Tensor::zeros(&[w, w, k, k]), b: Tensor::zeros(&[w]) });
        }
    }
    Ok(grouped.flatten())
}

/// A worker's update in parent shape, with the arch and data size it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDelta {
    pub delta: ParamSet,
    pub source_arch: ArchDescriptor,
    pub n_k: usize,
    pub worker_id: usize,
}

impl AlignedDelta {
    /// Widens and deepens a submodel delta to parent shape.
    pub fn align(
        net: &Supernet,
        delta: &ParamSet,
        arch: &ArchDescriptor,
        n_k: usize,
        worker_id: usize,
    ) -> Result<Self> {
        if n_k == 0 {
            return Err(CflError::Argument(format!("worker {} reported no samples", worker_id)));
        }
        net.check_model(delta, arch)?;
        let cfg = net.config();
        let widened = expand_width(cfg, delta, arch)?;
        let delta = expand_depth(cfg, &widened, arch)?;
        Ok(AlignedDelta { delta, source_arch: arch.clone(), n_k, worker_id })
    }

    /// `arch=<line> n=<n_k> worker=<id>` then the parameter set bytes.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "arch={} n={} worker={}", self.source_arch.to_line(), self.n_k, self.worker_id)?;
        self.delta.write_to(w)
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let bad = || CflError::Parse(format!("malformed aligned delta header '{}'", header.trim_end()));
        let mut parts = header.trim_end().split(' ');
        let arch_text = parts.next().and_then(|p| p.strip_prefix("arch=")).ok_or_else(bad)?;
        // arch lines contain spaces, so n= and worker= are taken from the end
        let rest: Vec<&str> = parts.collect();
        if rest.len() < 2 {
            return Err(bad());
        }
        let worker_id = rest[rest.len() - 1].strip_prefix("worker=").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let n_k = rest[rest.len() - 2].strip_prefix("n=").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let arch_line = std::iter::once(arch_text).chain(rest[..rest.len() - 2].iter().copied()).collect::<Vec<_>>();
        let source_arch = ArchDescriptor::from_line(&arch_line.join(" "))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let delta = ParamSet::from_bytes(&bytes)?;
        Ok(AlignedDelta { delta, source_arch, n_k, worker_id })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AggregationVariant {
    /// `sum_k (n_k / n) delta_k`, padded zeros included.
    #[default]
    Weighted,
    /// Each position averages only over the workers whose arch covers it.
    CoverageNormalized,
}

/// `n_k / n` in ascending worker order.
pub fn aggregation_weights(deltas: &[AlignedDelta]) -> Vec<f64> {
    let n: f64 = deltas.iter().map(|d| d.n_k as f64).sum();
    canonical(deltas).iter().map(|d| d.n_k as f64 / n).collect()
}

fn canonical(deltas: &[AlignedDelta]) -> Vec<&AlignedDelta> {
    let mut v: Vec<&AlignedDelta> = deltas.iter().collect();
    v.sort_by_key(|d| d.worker_id);
    v
}

/// Combines aligned updates, summing in ascending worker order so the result
/// does not depend on the order workers finished in.
pub fn aggregate(net: &Supernet, deltas: &[AlignedDelta], variant: AggregationVariant) -> Result<ParamSet> {
    if deltas.is_empty() {
        return Err(CflError::Argument("nothing to aggregate".into()));
    }
    let ordered = canonical(deltas);
    if let Some(p) = ordered.windows(2).find(|p| p[0].worker_id == p[1].worker_id) {
        return Err(CflError::Argument(format!("worker {} contributed twice", p[0].worker_id)));
    }
    let first = &ordered[0].delta;
    for d in &ordered[1..] {
        first.check_compatible(&d.delta)?;
    }
    let weights = aggregation_weights(deltas);
    match variant {
        AggregationVariant::Weighted => {
            let mut acc = first.zeros_like();
            for (d, w) in ordered.iter().zip(&weights) {
                acc = acc.axpy(*w, &d.delta)?;
            }
            Ok(acc)
        }
        AggregationVariant::CoverageNormalized => {
            let mut num = first.zeros_like();
            let mut den = first.zeros_like();
            for (d, w) in ordered.iter().zip(&weights) {
                num = num.axpy(*w, &d.delta)?;
                den = den.axpy(*w, &coverage_mask(net, &d.source_arch)?)?;
            }
            let mut out = num;
            let ids: Vec<String> = out.ids().cloned().collect();
            for id in ids {
                let cov = den.get(&id).expect("same ids").data().to_vec();
                for (v, c) in out.get_mut(&id).expect("present").data_mut().iter_mut().zip(cov) {
                    *v = if c > 0.0 { *v / c } else { 0.0 };
                }
            }
            Ok(out)
        }
    }
}

/// Ones at parent positions that `arch` trains, zeros elsewhere.
pub fn coverage_mask(net: &Supernet, arch: &ArchDescriptor) -> Result<ParamSet> {
    let ones: ParamSet =
        net.submodel_shapes(arch)?.into_iter().map(|(id, shape)| (id, Tensor::full(&shape, 1.0))).collect();
    let cfg = net.config();
    expand_depth(cfg, &expand_width(cfg, &ones, arch)?, arch)
}

/// `parent + delta`: workers report new minus old, so adding the weighted
/// update moves the parent toward the average of the trained models.
pub fn apply_global_update(parent: &ParamSet, delta: &ParamSet) -> Result<ParamSet> {
    parent.axpy(1.0, delta)
}
