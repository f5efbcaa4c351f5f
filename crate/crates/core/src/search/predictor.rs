use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CflError, Result};
use crate::nn::{grad_of, ParamSet, Tape, Tensor, Var};
use crate::supernet::{leaves, normal_tensor};

use super::encode::TrainingProfile;

const HIDDEN: [usize; 3] = [64, 64, 32];
/// Every `VALIDATION_STRIDE`-th accumulated profile is held out.
const VALIDATION_STRIDE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorOptions {
    pub lr: f64,
    pub batch_size: usize,
    /// Validation MSE under which the predictor counts as converged.
    pub threshold: f64,
    /// Held-out profiles needed before convergence can be declared.
    pub min_validation: usize,
}

impl Default for PredictorOptions {
    fn default() -> Self {
        PredictorOptions { lr: 0.003, batch_size: 16, threshold: 1e-3, min_validation: 8 }
    }
}

/// Four-layer regressor from an arch encoding to expected accuracy in `[0, 1]`.
///
/// Profiles accumulate across rounds; each round trains one epoch over all
/// of them except the held-out validation share.
#[derive(Debug, Clone)]
pub struct AccuracyPredictor {
    params: ParamSet,
    m: ParamSet,
    v: ParamSet,
    steps: u64,
    converged: bool,
    opts: PredictorOptions,
    input_len: usize,
    profiles: Vec<TrainingProfile>,
    rng: ChaCha8Rng,
}

/// Fit statistics after one training round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundFit {
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub converged: bool,
}

impl AccuracyPredictor {
    pub fn new(input_len: usize, seed: u64, opts: PredictorOptions) -> Result<Self> {
        if input_len == 0 {
            return Err(CflError::Config("predictor input length must be positive".into()));
        }
        if !(opts.lr > 0.0) || opts.batch_size == 0 || !(opts.threshold > 0.0) {
            return Err(CflError::Config(format!("invalid predictor options {:?}", opts)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fan_in = input_len;
        for (i, &out) in HIDDEN.iter().chain(&[1]).enumerate() {
            let std = if i < HIDDEN.len() { (2.0 / fan_in as f64).sqrt() } else { (1.0 / fan_in as f64).sqrt() };
            params.insert(format!("l{}.w", i), normal_tensor(&mut rng, &[out, fan_in], std));
            params.insert(format!("l{}.b", i), Tensor::zeros(&[out]));
            fan_in = out;
        }
        let m = params.zeros_like();
        let v = params.zeros_like();
        Ok(AccuracyPredictor {
            params,
            m,
            v,
            steps: 0,
            converged: false,
            opts,
            input_len,
            profiles: Vec::new(),
            rng,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn profiles(&self) -> &[TrainingProfile] {
        &self.profiles
    }

    fn check_input(&self, enc: &[f64]) -> Result<()> {
        if enc.len() != self.input_len {
            return Err(CflError::Structural(format!(
                "predictor expects encodings of length {}, got {}",
                self.input_len,
                enc.len()
            )));
        }
        Ok(())
    }

    fn build(tape: &mut Tape, vars: &BTreeMap<String, Var>, x: Tensor) -> Result<Var> {
        let mut h = tape.leaf(x);
        for i in 0..=HIDDEN.len() {
            h = tape.dense(h, vars[&format!("l{}.w", i)], vars[&format!("l{}.b", i)])?;
            h = if i < HIDDEN.len() { tape.relu(h)? } else { tape.sigmoid(h)? };
        }
        Ok(h)
    }

    /// Predicted accuracies for a batch of encodings.
    pub fn predict_batch(&self, encodings: &[Vec<f64>]) -> Result<Vec<f64>> {
        if encodings.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(encodings.len() * self.input_len);
        for e in encodings {
            self.check_input(e)?;
            data.extend_from_slice(e);
        }
        let mut tape = Tape::new();
        let vars = leaves(&mut tape, &self.params);
        let x = Tensor::new(vec![encodings.len(), self.input_len], data)?;
        let out = Self::build(&mut tape, &vars, x)?;
        // overflowing hidden activations can turn into NaN; keep the contract
        Ok(tape.value(out).data().iter().map(|&p| if p.is_nan() { 0.5 } else { p.clamp(0.0, 1.0) }).collect())
    }

    pub fn predict(&self, encoding: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(&[encoding.to_vec()])?[0])
    }

    fn split(&self) -> (Vec<&TrainingProfile>, Vec<&TrainingProfile>) {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, p) in self.profiles.iter().enumerate() {
            if i % VALIDATION_STRIDE == VALIDATION_STRIDE - 1 {
                val.push(p);
            } else {
                train.push(p);
            }
        }
        (train, val)
    }

    fn mse(&self, set: &[&TrainingProfile]) -> Result<f64> {
        let enc: Vec<Vec<f64>> = set.iter().map(|p| p.encoding.clone()).collect();
        let pred = self.predict_batch(&enc)?;
        Ok(pred.iter().zip(set).map(|(a, p)| (a - p.accuracy).powi(2)).sum::<f64>() / set.len() as f64)
    }

    /// Adds `new` to the accumulated profiles and trains one epoch over the
    /// training share. The converged flag is set once the held-out MSE drops
    /// below the threshold.
    pub fn train_round(&mut self, new: &[TrainingProfile]) -> Result<RoundFit> {
        for p in new {
            self.check_input(&p.encoding)?;
            if !(0.0..=1.0).contains(&p.accuracy) {
                return Err(CflError::Argument(format!("profile accuracy {} outside [0, 1]", p.accuracy)));
            }
        }
        self.profiles.extend_from_slice(new);
        if self.profiles.is_empty() {
            return Err(CflError::Argument("no profiles to train the predictor on".into()));
        }
        let (train, val) = self.split();
        let train: Vec<TrainingProfile> = train.into_iter().cloned().collect();
        let val: Vec<TrainingProfile> = val.into_iter().cloned().collect();

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.opts.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * self.input_len);
            let mut target = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&train[i].encoding);
                target.push(train[i].accuracy);
            }
            let x = Tensor::new(vec![chunk.len(), self.input_len], data)?;
            let (_, grads) = grad_of(&self.params, |tape, vars| {
                let out = Self::build(tape, vars, x)?;
                tape.mse(out, &target)
            })?;
            self.adam_step(&grads)?;
        }

        let train_refs: Vec<&TrainingProfile> = train.iter().collect();
        let train_mse = self.mse(&train_refs)?;
        let val_mse = if val.is_empty() { None } else { Some(self.mse(&val.iter().collect::<Vec<_>>())?) };
        if let Some(v) = val_mse {
            if v < self.opts.threshold && val.len() >= self.opts.min_validation {
                self.converged = true;
            }
        }
        Ok(RoundFit { train_mse, val_mse, converged: self.converged })
    }

    fn adam_step(&mut self, grads: &ParamSet) -> Result<()> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.params.check_compatible(grads)?;
        self.steps += 1;
        let c1 = 1.0 - B1.powi(self.steps as i32);
        let c2 = 1.0 - B2.powi(self.steps as i32);
        for (id, g) in grads.iter() {
            let m = self.m.get_mut(id).expect("moment shapes follow params").data_mut();
            let v = self.v.get_mut(id).expect("moment shapes follow params").data_mut();
            let p = self.params.get_mut(id).expect("checked compatible").data_mut();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                m[i] = B1 * m[i] + (1.0 - B1) * gi;
                v[i] = B2 * v[i] + (1.0 - B2) * gi * gi;
                p[i] -= self.opts.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AccuracyPredictor::train_round`].
pub fn train_predictor_round(
    pred: &AccuracyPredictor,
    profiles: &[TrainingProfile],
) -> Result<(AccuracyPredictor, RoundFit)> {
    let mut next = pred.clone();
    let fit = next.train_round(profiles)?;
    Ok((next, fit))
}
