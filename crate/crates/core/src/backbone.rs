//! The shared embedding network.
//!
//! Every architecture is a stack of conv + batch-norm units ending in a dense
//! `H × W × K` feature grid. The pooled embedding is the spatial mean of that
//! grid. Tensors are NHWC throughout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{self, Image, CHANNELS};
use crate::numeric::{Gradients, Real, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;
/// Share of the previous running statistic kept on every update.
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// `depth` blocks of conv3×3 → norm → relu → maxpool2×2, all `channels` wide.
    Conv4,
    /// Four residual blocks of three conv3×3 units plus a 1×1 shortcut,
    /// widths `channels · (1/10, 1/4, 1/2, 1)`.
    Resnet12,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub arch: Arch,
    /// Feature dimension `K` of the dense grid and pooled embedding.
    pub channels: usize,
    /// Side of the square input image.
    pub input_hw: usize,
    /// Number of downsampling blocks (conv arch only; resnet12 always has 4).
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            arch: Arch::Conv4,
            channels: 64,
            input_hw: 84,
            depth: 4,
        }
    }
}

impl BackboneConfig {
    pub fn blocks(&self) -> usize {
        match self.arch {
            Arch::Conv4 => self.depth,
            Arch::Resnet12 => 4,
        }
    }

    /// Side of the dense feature grid (each block halves it, rounding down).
    pub fn output_hw(&self) -> usize {
        (0..self.blocks()).fold(self.input_hw, |s, _| s / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if self.blocks() == 0 {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.output_hw() == 0 {
            return Err(Error::Config(format!(
                "input side {} is too small for {} downsampling blocks",
                self.input_hw,
                self.blocks()
            )));
        }
        Ok(())
    }

    fn block_widths(&self) -> Vec<usize> {
        let k = self.channels;
        match self.arch {
            Arch::Conv4 => vec![k; self.depth],
            Arch::Resnet12 => vec![k.div_ceil(10), k.div_ceil(4), k.div_ceil(2), k],
        }
    }
}

/// Conv → batch-norm unit with its running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl ConvUnit {
    fn new<R: Rng + ?Sized>(k: usize, cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvUnit {
            weight: Tensor::glorot(&[k, k, cin, cout], k * k * cin, k * k * cout, rng),
            bias: Tensor::zeros(&[cout]),
            gamma: Tensor::full(&[cout], 1.0),
            beta: Tensor::zeros(&[cout]),
            running_mean: Tensor::zeros(&[cout]),
            running_var: Tensor::full(&[cout], 1.0),
        }
    }

    fn pad(&self) -> usize {
        self.weight.shape()[0] / 2
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvUnitVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// How batch-norm layers normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (meta-training).
    Batch,
    /// Frozen running averages (fine-tuning and inference).
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    units: Vec<ConvUnit>,
}

/// Backbone parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub units: Vec<ConvUnitVars>,
}

/// Tape handles for a batch of backbone outputs.
#[derive(Debug, Clone)]
pub struct FeatureVars {
    /// `[B, H, W, K]`
    pub dense: Var,
    /// `[B, K]`
    pub pooled: Var,
    /// Per-unit batch `(mean, var)`; empty in [`NormMode::Running`].
    pub batch_stats: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Backbone output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `H × W × K`
    pub dense: Tensor,
    /// `K`, the spatial mean of `dense`.
    pub pooled: Tensor,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let widths = config.block_widths();
        let mut units = Vec::new();
        let mut cin = CHANNELS;
        for &w in &widths {
            match config.arch {
                Arch::Conv4 => units.push(ConvUnit::new(3, cin, w, rng)),
                Arch::Resnet12 => {
                    units.push(ConvUnit::new(3, cin, w, rng));
                    units.push(ConvUnit::new(3, w, w, rng));
                    units.push(ConvUnit::new(3, w, w, rng));
                    units.push(ConvUnit::new(1, cin, w, rng));
                }
            }
            cin = w;
        }
        Ok(Backbone { config, units })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn units(&self) -> &[ConvUnit] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [ConvUnit] {
        &mut self.units
    }

    /// Trainable tensors in a fixed order, with stable names.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, u) in self.units.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), &mut u.weight));
            out.push((format!("backbone.{i}.bias"), &mut u.bias));
            out.push((format!("backbone.{i}.gamma"), &mut u.gamma));
            out.push((format!("backbone.{i}.beta"), &mut u.beta));
        }
        out
    }

    /// Every stored tensor including running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &u.weight));
            out.push((format!("backbone.{i}.bias"), &u.bias));
            out.push((format!("backbone.{i}.gamma"), &u.gamma));
            out.push((format!("backbone.{i}.beta"), &u.beta));
            out.push((format!("backbone.{i}.running_mean"), &u.running_mean));
            out.push((format!("backbone.{i}.running_var"), &u.running_var));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, u) in self.units.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), &mut u.weight));
            out.push((format!("backbone.{i}.bias"), &mut u.bias));
            out.push((format!("backbone.{i}.gamma"), &mut u.gamma));
            out.push((format!("backbone.{i}.beta"), &mut u.beta));
            out.push((format!("backbone.{i}.running_mean"), &mut u.running_mean));
            out.push((format!("backbone.{i}.running_var"), &mut u.running_var));
        }
        out
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> BackboneVars {
        let units = self
            .units
            .iter()
            .map(|u| ConvUnitVars {
                weight: tape.param(&u.weight),
                bias: tape.param(&u.bias),
                gamma: tape.param(&u.gamma),
                beta: tape.param(&u.beta),
            })
            .collect();
        BackboneVars { units }
    }

    /// Adds the gradients of every bound parameter into the tensors.
    pub fn write_grads<T: Real>(&mut self, vars: &BackboneVars, grads: &Gradients<T>) -> Result<()> {
        for (u, v) in self.units.iter_mut().zip(&vars.units) {
            grads.write_into(v.weight, &mut u.weight)?;
            grads.write_into(v.bias, &mut u.bias)?;
            grads.write_into(v.gamma, &mut u.gamma)?;
            grads.write_into(v.beta, &mut u.beta)?;
        }
        Ok(())
    }

    /// Folds batch statistics from a [`NormMode::Batch`] pass into the
    /// running averages.
    pub fn update_running_stats(&mut self, stats: &[(Vec<f32>, Vec<f32>)]) {
        for (u, (mean, var)) in self.units.iter_mut().zip(stats) {
            let blend = |run: &mut Tensor, batch: &[f32]| {
                for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            };
            blend(&mut u.running_mean, mean);
            blend(&mut u.running_var, var);
        }
    }

    fn unit_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        idx: usize,
        vars: &ConvUnitVars,
        x: Var,
        mode: NormMode,
        stats: &mut Vec<(Vec<f32>, Vec<f32>)>,
    ) -> Result<Var> {
        let unit = &self.units[idx];
        let y = tape.conv2d(x, vars.weight, unit.pad())?;
        match mode {
            NormMode::Batch => {
                let y = tape.add(y, vars.bias)?;
                let (normed, mean, var) = tape.batch_norm(y, BN_EPS)?;
                stats.push((mean, var));
                let scaled = tape.mul(normed, vars.gamma)?;
                tape.add(scaled, vars.beta)
            }
            NormMode::Running => {
                // γ·(y + b − μ)/σ + β folded into one per-channel affine map.
                let inv_std: Vec<f32> = unit
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| (1.0 / (v as f64 + BN_EPS).sqrt()) as f32)
                    .collect();
                let inv_std = tape.constant(&Tensor::new(unit.running_var.shape(), inv_std)?);
                let mean = tape.constant(&unit.running_mean);
                let scale = tape.mul(vars.gamma, inv_std)?;
                let offset = tape.sub(vars.bias, mean)?;
                let offset = tape.mul(offset, scale)?;
                let shift = tape.add(offset, vars.beta)?;
                let y = tape.mul(y, scale)?;
                tape.add(y, shift)
            }
        }
    }

    /// Embeds an NHWC image batch.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &BackboneVars,
        images: Var,
        mode: NormMode,
    ) -> Result<FeatureVars> {
        let shape = tape.shape(images).to_vec();
        let side = self.config.input_hw;
        if shape.len() != 4 || shape[1] != side || shape[2] != side || shape[3] != CHANNELS {
            return Err(Error::Invalid(format!(
                "backbone expects input [B, {side}, {side}, {CHANNELS}], got {shape:?}"
            )));
        }
        let mut stats = Vec::new();
        let mut x = images;
        match self.config.arch {
            Arch::Conv4 => {
                for (i, v) in vars.units.iter().enumerate() {
                    let y = self.unit_forward(tape, i, v, x, mode, &mut stats)?;
                    let y = tape.relu(y);
                    x = tape.maxpool2d(y)?;
                }
            }
            Arch::Resnet12 => {
                for b in 0..4 {
                    let u = &vars.units[4 * b..4 * b + 4];
                    let y = self.unit_forward(tape, 4 * b, &u[0], x, mode, &mut stats)?;
                    let y = tape.relu(y);
                    let y = self.unit_forward(tape, 4 * b + 1, &u[1], y, mode, &mut stats)?;
                    let y = tape.relu(y);
                    let y = self.unit_forward(tape, 4 * b + 2, &u[2], y, mode, &mut stats)?;
                    let s = self.unit_forward(tape, 4 * b + 3, &u[3], x, mode, &mut stats)?;
                    let y = tape.add(y, s)?;
                    let y = tape.relu(y);
                    x = tape.maxpool2d(y)?;
                }
            }
        }
        let dense = x;
        let ds = tape.shape(dense).to_vec();
        let (b, hw, k) = (ds[0], ds[1] * ds[2], ds[3]);
        let flat = tape.reshape(dense, &[b, hw, k])?;
        let pooled = tape.mean_axis(flat, 1)?;
        let pooled = tape.reshape(pooled, &[b, k])?;
        Ok(FeatureVars {
            dense,
            pooled,
            batch_stats: stats,
        })
    }

    /// Inference-mode embedding of individual images.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<FeatureMap>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind_frozen(&mut tape);
        let input = tape.constant(&image::batch(images)?);
        let out = self.forward(&mut tape, &vars, input, NormMode::Running)?;
        tape.check_finite()?;
        let dense = tape.tensor(out.dense);
        let pooled = tape.tensor(out.pooled);
        let ds = dense.shape().to_vec();
        let per_dense = ds[1] * ds[2] * ds[3];
        let k = ds[3];
        Ok((0..ds[0])
            .map(|i| FeatureMap {
                dense: Tensor::new(&ds[1..], dense.data()[i * per_dense..(i + 1) * per_dense].to_vec())
                    .expect("dense slice"),
                pooled: Tensor::new(&[k], pooled.data()[i * k..(i + 1) * k].to_vec()).expect("pooled slice"),
            })
            .collect())
    }

    /// Binds parameters as constants (no gradient tracking).
    pub fn bind_frozen<T: Real>(&self, tape: &mut Tape<T>) -> BackboneVars {
        let units = self
            .units
            .iter()
            .map(|u| ConvUnitVars {
                weight: tape.constant(&u.weight),
                bias: tape.constant(&u.bias),
                gamma: tape.constant(&u.gamma),
                beta: tape.constant(&u.beta),
            })
            .collect();
        BackboneVars { units }
    }
}
