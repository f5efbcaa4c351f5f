use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{structural, Result};
use crate::nn::{ParamSet, Tape, Tensor, Var};

use super::arch::ArchDescriptor;
use super::config::SupernetConfig;
use super::gates::{ExecutionMask, GatePolicy};

/// Parameter-id prefix of layer `(group, slot)`.
pub fn layer_id(group: usize, slot: usize) -> String {
    format!("g{}.l{}", group, slot)
}

/// One labelled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, C, H, W]`.
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How skippable layers are decided during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Execute everything and ignore the gates.
    AllOn,
    /// Execute when the execute logit is at least the skip logit.
    Greedy,
    /// Draw each decision from the gate distribution with a seeded generator.
    Sample(u64),
    /// Scale each residual branch by its execute probability (differentiable).
    Soft,
}

/// Per skippable layer: the features the gate saw and what it decided.
#[derive(Debug, Clone)]
pub struct GateRecord {
    pub group: usize,
    pub slot: usize,
    /// `[N, W_max[group]]` pooled gate input.
    pub pooled: Tensor,
    pub p_exec: Vec<f64>,
    pub executed: Vec<bool>,
}

pub(crate) struct ForwardTrace {
    pub logits: Var,
    pub gates: Vec<GateRecord>,
}

/// Loss, gradients and gate decisions of one mini-batch.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    pub model: ParamSet,
    pub gates: ParamSet,
    pub records: Vec<GateRecord>,
    pub correct: Vec<bool>,
}

/// The elastic parent model: parameter layout, extraction and forward passes.
#[derive(Debug, Clone)]
pub struct Supernet {
    cfg: SupernetConfig,
}

impl Supernet {
    pub fn new(cfg: SupernetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Supernet { cfg })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.cfg
    }

    /// He-initialised parent weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.cfg;
        let k = cfg.kernel_size;
        let mut p = ParamSet::new();
        let mut conv = |rng: &mut ChaCha8Rng, id: String, cout: usize, cin: usize| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            p.insert(format!("{}.w", id), normal_tensor(rng, &[cout, cin, k, k], std));
            p.insert(format!("{}.b", id), Tensor::zeros(&[cout]));
        };
        conv(&mut rng, "stem".into(), cfg.stem_width, cfg.input_shape[0]);
        for g in 0..cfg.num_groups {
            for d in 0..cfg.max_depth {
                let cin = if d == 0 { cfg.group_input_width(g) } else { cfg.max_widths[g] };
                // residual branches start small so the identity path dominates
                let scale_down = if d > 0 { 0.5 } else { 1.0 };
                let id = layer_id(g, d);
                let std = scale_down * (2.0 / (cin * k * k) as f64).sqrt();
                p.insert(format!("{}.w", id), normal_tensor(&mut rng, &[cfg.max_widths[g], cin, k, k], std));
                p.insert(format!("{}.b", id), Tensor::zeros(&[cfg.max_widths[g]]));
            }
        }
        let last = cfg.max_widths[cfg.num_groups - 1];
        let std = (1.0 / last as f64).sqrt();
        p.insert("head.w", normal_tensor(&mut rng, &[cfg.num_classes, last], std));
        p.insert("head.b", Tensor::zeros(&[cfg.num_classes]));
        p
    }

    /// Expected parameter shapes of the submodel `arch`.
    pub fn submodel_shapes(&self, arch: &ArchDescriptor) -> Result<BTreeMap<String, Vec<usize>>> {
        arch.validate(&self.cfg)?;
        let cfg = &self.cfg;
        let k = cfg.kernel_size;
        let mut shapes = BTreeMap::new();
        shapes.insert("stem.w".to_string(), vec![cfg.stem_width, cfg.input_shape[0], k, k]);
        shapes.insert("stem.b".to_string(), vec![cfg.stem_width]);
        for g in 0..cfg.num_groups {
            for d in 0..arch.depth[g] {
                let cout = arch.channels[g][d].len();
                let cin = arch.input_channels(cfg, g, d).len();
                shapes.insert(format!("{}.w", layer_id(g, d)), vec![cout, cin, k, k]);
                shapes.insert(format!("{}.b", layer_id(g, d)), vec![cout]);
            }
        }
        let last = cfg.max_widths[cfg.num_groups - 1];
        shapes.insert("head.w".to_string(), vec![cfg.num_classes, last]);
        shapes.insert("head.b".to_string(), vec![cfg.num_classes]);
        Ok(shapes)
    }

    pub fn check_model(&self, model: &ParamSet, arch: &ArchDescriptor) -> Result<()> {
        let shapes = self.submodel_shapes(arch)?;
        if model.len() != shapes.len() {
            return Err(structural!("model has {} parameters, arch needs {}", model.len(), shapes.len()));
        }
        for (id, shape) in &shapes {
            let t = model.require(id)?;
            if t.shape() != shape.as_slice() {
                return Err(structural!("parameter '{}' has shape {:?}, arch needs {:?}", id, t.shape(), shape));
            }
        }
        Ok(())
    }

    /// Slices the parameters addressed by `arch` out of the parent. The stem and
    /// classifier head are shared whole.
    pub fn extract_submodel(&self, parent: &ParamSet, arch: &ArchDescriptor) -> Result<ParamSet> {
        self.check_model(parent, &ArchDescriptor::full(&self.cfg))?;
        arch.validate(&self.cfg)?;
        let mut out = ParamSet::new();
        for id in ["stem.w", "stem.b", "head.w", "head.b"] {
            out.insert(id, parent.require(id)?.clone());
        }
        for g in 0..self.cfg.num_groups {
            for d in 0..arch.depth[g] {
                let id = layer_id(g, d);
                let rows = &arch.channels[g][d];
                let cols = arch.input_channels(&self.cfg, g, d);
                let w = parent.require(&format!("{}.w", id))?.gather_axis(0, rows)?.gather_axis(1, &cols)?;
                let b = parent.require(&format!("{}.b", id))?.gather_axis(0, rows)?;
                out.insert(format!("{}.w", id), w);
                out.insert(format!("{}.b", id), b);
            }
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.cfg.input_shape {
            return Err(structural!("input shape {:?} does not match [N, {:?}]", s, self.cfg.input_shape));
        }
        Ok(())
    }

    /// Records the forward pass of submodel `arch` on `tape`.
    ///
    /// Group streams live in parent channel space: each layer reads the
    /// previous layer's channels and scatters its output to its own channel
    /// indices. Skippable layers add their branch onto the stream, so a
    /// skipped layer is an identity.
    pub(crate) fn build_forward(
        &self,
        tape: &mut Tape,
        arch: &ArchDescriptor,
        params: &BTreeMap<String, Var>,
        gates: Option<&BTreeMap<String, Var>>,
        x: Var,
        mode: GateMode,
    ) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        let p = |id: String| params.get(&id).copied().ok_or_else(|| structural!("missing parameter '{}'", id));
        let n = tape.value(x).shape()[0];
        let mut rng = match mode {
            GateMode::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };

        let h = tape.conv2d(x, p("stem.w".into())?, 1)?;
        let h = tape.channel_bias(h, p("stem.b".into())?)?;
        let mut stream = tape.relu(h)?;
        let mut records = Vec::new();

        for g in 0..cfg.num_groups {
            let width = cfg.max_widths[g];
            for d in 0..arch.depth[g] {
                let id = layer_id(g, d);
                let in_idx = arch.input_channels(cfg, g, d);
                let out_idx = &arch.channels[g][d];
                let stream_width = tape.value(stream).shape()[1];
                let input = if is_identity(&in_idx, stream_width) {
                    stream
                } else {
                    tape.gather_channels(stream, &in_idx)?
                };
                let stride = if d == 0 { cfg.stride(g) } else { 1 };
                let y = tape.conv2d(input, p(format!("{}.w", id))?, stride)?;
                let y = tape.channel_bias(y, p(format!("{}.b", id))?)?;
                let y = tape.relu(y)?;
                let y = if is_identity(out_idx, width) { y } else { tape.scatter_channels(y, out_idx, width)? };
                if d == 0 {
                    stream = y;
                    continue;
                }
                let branch = match mode {
                    GateMode::AllOn => y,
                    _ => {
                        let gv = gates.ok_or_else(|| structural!("gated forward needs gate parameters"))?;
                        let gw = gv.get(&format!("gate.{}.w", id)).copied();
                        let gb = gv.get(&format!("gate.{}.b", id)).copied();
                        let (gw, gb) = gw.zip(gb).ok_or_else(|| structural!("missing gate for layer {}", id))?;
                        let pooled = tape.global_avg_pool(stream)?;
                        let logits = tape.dense(pooled, gw, gb)?;
                        let diff = tape.column_diff(logits)?;
                        let prob = tape.sigmoid(diff)?;
                        let p_exec = tape.value(prob).data().to_vec();
                        let logit_rows = tape.value(logits).data().to_vec();
                        let executed: Vec<bool> = match mode {
                            GateMode::Soft => vec![true; n],
                            GateMode::Greedy => logit_rows.chunks(2).map(|r| r[0] >= r[1]).collect(),
                            GateMode::Sample(_) => {
                                let rng = rng.as_mut().expect("sampling generator");
                                p_exec.iter().map(|&pe| rng.random::<f64>() < pe).collect()
                            }
                            GateMode::AllOn => unreachable!(),
                        };
                        records.push(GateRecord {
                            group: g,
                            slot: d,
                            pooled: tape.value(pooled).clone(),
                            p_exec,
                            executed: executed.clone(),
                        });
                        if mode == GateMode::Soft {
                            tape.scale_samples(y, prob)?
                        } else {
                            let mask: Vec<f64> = executed.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
                            tape.mask_samples(y, &mask)?
                        }
                    }
                };
                stream = tape.add(stream, branch)?;
            }
        }
        let pooled = tape.global_avg_pool(stream)?;
        let logits = tape.dense(pooled, p("head.w".into())?, p("head.b".into())?)?;
        Ok(ForwardTrace { logits, gates: records })
    }

    pub(crate) fn execution_masks(&self, arch: &ArchDescriptor, n: usize, records: &[GateRecord]) -> Vec<ExecutionMask> {
        let mandatory = 1 + self.cfg.num_groups;
        let skippable = arch.active_layers() - self.cfg.num_groups;
        (0..n)
            .map(|s| ExecutionMask {
                mandatory,
                skippable: if records.is_empty() {
                    vec![true; skippable]
                } else {
                    records.iter().map(|r| r.executed[s]).collect()
                },
            })
            .collect()
    }

    /// Ungated forward of a submodel whose parameters match `arch`.
    pub fn forward(&self, model: &ParamSet, arch: &ArchDescriptor, x: &Tensor) -> Result<Tensor> {
        let empty = GatePolicy::empty();
        self.gated_forward(model, arch, &empty, x, GateMode::AllOn).map(|(l, _)| l)
    }

    /// Forward with layer gating. Returns logits and one mask per sample.
    pub fn gated_forward(
        &self,
        model: &ParamSet,
        arch: &ArchDescriptor,
        gates: &GatePolicy,
        x: &Tensor,
        mode: GateMode,
    ) -> Result<(Tensor, Vec<ExecutionMask>)> {
        self.check_model(model, arch)?;
        self.check_input(x)?;
        let mut tape = Tape::new();
        let pv = leaves(&mut tape, model);
        let gv = leaves(&mut tape, gates.params());
        let xv = tape.leaf(x.clone());
        let trace = self.build_forward(&mut tape, arch, &pv, Some(&gv), xv, mode)?;
        let masks = self.execution_masks(arch, x.shape()[0], &trace.gates);
        Ok((tape.value(trace.logits).clone(), masks))
    }

    /// Mean cross-entropy of `batch` and its gradients for model and gates.
    pub fn loss_grads(
        &self,
        model: &ParamSet,
        arch: &ArchDescriptor,
        gates: &GatePolicy,
        batch: &Batch,
        mode: GateMode,
    ) -> Result<LossGrads> {
        self.check_model(model, arch)?;
        self.check_input(&batch.x)?;
        let mut tape = Tape::new();
        let pv = leaves(&mut tape, model);
        let gv = leaves(&mut tape, gates.params());
        let xv = tape.leaf(batch.x.clone());
        let trace = self.build_forward(&mut tape, arch, &pv, Some(&gv), xv, mode)?;
        let loss = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
        let correct = argmax_rows(tape.value(trace.logits)).iter().zip(&batch.labels).map(|(p, y)| p == y).collect();
        let mut adj = tape.backward(loss)?;
        let model_grads = tape.take_grads(&mut adj, &pv);
        let gate_grads = tape.take_grads(&mut adj, &gv);
        Ok(LossGrads {
            loss: tape.value(loss).data()[0],
            model: model_grads,
            gates: gate_grads,
            records: trace.gates,
            correct,
        })
    }

    /// Class predictions and execution masks for `x`.
    pub fn predict(
        &self,
        model: &ParamSet,
        arch: &ArchDescriptor,
        gates: &GatePolicy,
        x: &Tensor,
        mode: GateMode,
    ) -> Result<(Vec<usize>, Vec<ExecutionMask>)> {
        let (logits, masks) = self.gated_forward(model, arch, gates, x, mode)?;
        Ok((argmax_rows(&logits), masks))
    }
}

pub(crate) fn leaves(tape: &mut Tape, params: &ParamSet) -> BTreeMap<String, Var> {
    params.iter().map(|(id, t)| (id.clone(), tape.leaf(t.clone()))).collect()
}

fn is_identity(idx: &[usize], width: usize) -> bool {
    idx.len() == width && idx.iter().enumerate().all(|(i, &v)| i == v)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}
