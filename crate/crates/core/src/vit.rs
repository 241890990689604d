//! A small pre-norm vision transformer with a frozen backbone.
//!
//! Images are square and single-channel. Each block is
//! `x += A_msa(MSA(LN(x)))` followed by `x += A_mlp(MLP(LN(x)))`, where the
//! `A_*` are optional adapters applied to the sub-layer output. Tokens are
//! mean-pooled after a final layer norm and fed to a linear head. Stages with
//! different widths are joined by a frozen token-wise projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::Adapter;
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

fn default_mlp_ratio() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub patch_size: usize,
    pub image_side: usize,
    /// `(embed_dim, num_blocks)` per stage.
    pub stages: Vec<(usize, usize)>,
    pub heads_per_stage: Vec<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.patch_size == 0 || self.image_side == 0 || self.num_classes == 0 {
            return bad("patch_size, image_side and num_classes must be positive".into());
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.heads_per_stage.len() != self.stages.len() {
            return bad(format!(
                "{} head counts for {} stages",
                self.heads_per_stage.len(),
                self.stages.len()
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        for (s, (&(dim, blocks), &heads)) in self.stages.iter().zip(&self.heads_per_stage).enumerate() {
            if dim == 0 || blocks == 0 || heads == 0 {
                return bad(format!("stage {s}: dims, blocks and heads must be positive"));
            }
            if dim % heads != 0 {
                return bad(format!("stage {s}: embed dim {dim} not divisible by {heads} heads"));
            }
            if self.mlp_hidden(dim) == 0 {
                return bad(format!("stage {s}: MLP hidden size rounds to zero"));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (self.mlp_ratio * dim as f64).round() as usize
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.1).sum()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub stage: usize,
    pub heads: usize,
    pub ln1: Norm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Which sub-layer an adapter slot follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Msa,
    Mlp,
}

impl SlotKind {
    pub fn name(self) -> &'static str {
        match self {
            SlotKind::Msa => "msa",
            SlotKind::Mlp => "mlp",
        }
    }
}

/// Slot `2·b` follows the attention of block `b`; slot `2·b + 1` its MLP.
pub fn slot_location(slot: usize) -> (usize, SlotKind) {
    let kind = if slot.is_multiple_of(2) { SlotKind::Msa } else { SlotKind::Mlp };
    (slot / 2, kind)
}

pub fn slot_index(layer: usize, kind: SlotKind) -> usize {
    2 * layer + usize::from(kind == SlotKind::Mlp)
}

/// Identifies a parameter tensor of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    /// Index into [`Model::backbone_params`].
    Backbone(usize),
    HeadWeight,
    HeadBias,
    AdapterDown(usize),
    AdapterUp(usize),
}

/// Which leaves of a forward pass produce gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Inference only.
    None,
    /// Adapters and head.
    Trainable,
    /// Everything, backbone included. Used by gradient checks.
    All,
}

/// Handles recorded by [`Model::forward_tape`].
#[derive(Debug)]
pub struct Trace {
    pub logits: Var,
    pub params: Vec<(ParamId, Var)>,
    /// Post-activation hidden values of each non-empty adapter.
    pub hidden: Vec<(usize, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    seed: u64,
    patch_embed: Linear<T>,
    pos_embed: Tensor<T>,
    blocks: Vec<Block<T>>,
    /// `transitions[s]` maps stage `s` width to stage `s + 1` width.
    transitions: Vec<Linear<T>>,
    final_norm: Norm<T>,
    head: Linear<T>,
    slots: Vec<Option<Adapter<T>>>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Normal with std 0.02 truncated at two standard deviations.
    fn trunc_normal<T: Scalar>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                break T::of(z * INIT_STD);
            }
        })
    }

    fn linear<T: Scalar>(&mut self, out: usize, inp: usize) -> Linear<T> {
        Linear {
            weight: self.trunc_normal(vec![out, inp]),
            bias: Tensor::zeros(vec![out]),
        }
    }

    fn norm<T: Scalar>(dim: usize) -> Norm<T> {
        Norm {
            gamma: Tensor::from_fn(vec![dim], |_| T::one()),
            beta: Tensor::zeros(vec![dim]),
        }
    }
}

/// Builds a model with a seeded frozen backbone, a zero trainable head and
/// all adapter slots empty.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    Model::build(spec, seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d0 = spec.stages[0].0;
        let patch_embed = init.linear(d0, spec.patch_dim());
        let pos_embed = init.trunc_normal(vec![spec.tokens(), d0]);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (s, (&(dim, n), &heads)) in spec.stages.iter().zip(&spec.heads_per_stage).enumerate() {
            if s > 0 {
                transitions.push(init.linear(dim, spec.stages[s - 1].0));
            }
            let hidden = spec.mlp_hidden(dim);
            for _ in 0..n {
                blocks.push(Block {
                    stage: s,
                    heads,
                    ln1: Init::norm(dim),
                    q: init.linear(dim, dim),
                    k: init.linear(dim, dim),
                    v: init.linear(dim, dim),
                    proj: init.linear(dim, dim),
                    ln2: Init::norm(dim),
                    fc1: init.linear(hidden, dim),
                    fc2: init.linear(dim, hidden),
                });
            }
        }
        let d_last = spec.stages.last().expect("validated").0;
        let head = Linear {
            weight: Tensor::zeros(vec![spec.num_classes, d_last]).with_requires_grad(true),
            bias: Tensor::zeros(vec![spec.num_classes]).with_requires_grad(true),
        };
        let slots = vec![None; 2 * blocks.len()];
        Ok(Self {
            spec: spec.clone(),
            seed,
            patch_embed,
            pos_embed,
            blocks,
            transitions,
            final_norm: Init::norm(d_last),
            head,
            slots,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn head(&self) -> &Linear<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Linear<T> {
        &mut self.head
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_stage(&self, slot: usize) -> usize {
        self.blocks[slot / 2].stage
    }

    pub fn slot_input_dim(&self, slot: usize) -> usize {
        self.spec.stages[self.slot_stage(slot)].0
    }

    pub fn slot_input_dims(&self) -> Vec<usize> {
        (0..self.num_slots()).map(|s| self.slot_input_dim(s)).collect()
    }

    pub fn slots(&self) -> &[Option<Adapter<T>>] {
        &self.slots
    }

    pub fn adapter(&self, slot: usize) -> Option<&Adapter<T>> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn adapter_mut(&mut self, slot: usize) -> Option<&mut Adapter<T>> {
        self.slots.get_mut(slot).and_then(Option::as_mut)
    }

    /// Every injected adapter with its slot index, including ones pruned
    /// down to zero neurons.
    pub fn adapters(&self) -> Vec<(usize, &Adapter<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.as_ref().map(|a| (i, a)))
            .collect()
    }

    pub fn set_adapter(&mut self, slot: usize, adapter: Option<Adapter<T>>) -> Result<()> {
        if slot >= self.slots.len() {
            return Err(Error::InvalidArgument(format!("slot {slot} out of range")));
        }
        if let Some(a) = &adapter {
            if a.input_dim() != self.slot_input_dim(slot) {
                return Err(Error::Shape(format!(
                    "slot {slot} expects input dim {}, adapter has {}",
                    self.slot_input_dim(slot),
                    a.input_dim()
                )));
            }
        }
        self.slots[slot] = adapter;
        Ok(())
    }

    pub fn clear_adapters(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }

    /// Frozen tensors in a fixed order with stable names.
    pub fn backbone_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, t) in self.transitions.iter().enumerate() {
            out.push((format!("transition.{i}.weight"), &t.weight));
            out.push((format!("transition.{i}.bias"), &t.bias));
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{b}");
            out.push((format!("{p}.ln1.gamma"), &blk.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), &blk.ln1.beta));
            for (name, lin) in [("q", &blk.q), ("k", &blk.k), ("v", &blk.v), ("proj", &blk.proj)] {
                out.push((format!("{p}.{name}.weight"), &lin.weight));
                out.push((format!("{p}.{name}.bias"), &lin.bias));
            }
            out.push((format!("{p}.ln2.gamma"), &blk.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), &blk.ln2.beta));
            for (name, lin) in [("fc1", &blk.fc1), ("fc2", &blk.fc2)] {
                out.push((format!("{p}.{name}.weight"), &lin.weight));
                out.push((format!("{p}.{name}.bias"), &lin.bias));
            }
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &self.final_norm.beta));
        out
    }

    fn backbone_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.pos_embed,
        ];
        for t in &mut self.transitions {
            out.push(&mut t.weight);
            out.push(&mut t.bias);
        }
        for blk in &mut self.blocks {
            out.push(&mut blk.ln1.gamma);
            out.push(&mut blk.ln1.beta);
            for lin in [&mut blk.q, &mut blk.k, &mut blk.v, &mut blk.proj] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            out.push(&mut blk.ln2.gamma);
            out.push(&mut blk.ln2.beta);
            for lin in [&mut blk.fc1, &mut blk.fc2] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        match id {
            ParamId::Backbone(i) => self.backbone_params().get(i).map(|(_, t)| *t),
            ParamId::HeadWeight => Some(&self.head.weight),
            ParamId::HeadBias => Some(&self.head.bias),
            ParamId::AdapterDown(s) => self.adapter(s).map(Adapter::down),
            ParamId::AdapterUp(s) => self.adapter(s).map(Adapter::up),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        match id {
            ParamId::Backbone(i) => self.backbone_params_mut().into_iter().nth(i),
            ParamId::HeadWeight => Some(&mut self.head.weight),
            ParamId::HeadBias => Some(&mut self.head.bias),
            ParamId::AdapterDown(s) => self.adapter_mut(s).map(Adapter::down_mut),
            ParamId::AdapterUp(s) => self.adapter_mut(s).map(Adapter::up_mut),
        }
    }

    /// Adapters (non-empty) and head, in a fixed order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (slot, a) in self.adapters() {
            if a.hidden() > 0 {
                ids.push(ParamId::AdapterDown(slot));
                ids.push(ParamId::AdapterUp(slot));
            }
        }
        ids.push(ParamId::HeadWeight);
        ids.push(ParamId::HeadBias);
        ids
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.weight.len() + self.head.bias.len()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters().iter().map(|(_, a)| a.param_count()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapter_param_count() + self.head_param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.backbone_param_count() + self.trainable_param_count()
    }

    /// Hex SHA-256 over the bytes of every backbone tensor.
    pub fn backbone_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.backbone_params() {
            hasher.update(name.as_bytes());
            buf.clear();
            t.data().iter().for_each(|x| x.write_le(&mut buf));
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Rearranges `[batch, side·side]` images into `[batch·tokens, patch²]`.
    pub fn patchify(&self, images: &[T], batch: usize) -> Result<Vec<T>> {
        let side = self.spec.image_side;
        let p = self.spec.patch_size;
        if images.len() != batch * side * side {
            return Err(Error::Shape(format!(
                "expected {batch} images of {} pixels, got {} values",
                side * side,
                images.len()
            )));
        }
        let g = side / p;
        let mut out = Vec::with_capacity(images.len());
        for b in 0..batch {
            let img = &images[b * side * side..(b + 1) * side * side];
            for py in 0..g {
                for px in 0..g {
                    for y in 0..p {
                        let row = (py * p + y) * side + px * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Records a forward pass for `batch` images stored row-major in
    /// `images`.
    pub fn forward_tape(&self, tape: &mut Tape<T>, images: &[T], batch: usize, mode: GradMode) -> Result<Trace> {
        let tokens = self.spec.tokens();
        let patches = self.patchify(images, batch)?;
        let mut params = Vec::new();
        let mut backbone_idx = 0usize;
        let track_backbone = mode == GradMode::All;
        let track_trainable = mode != GradMode::None;

        let mut bb = |tape: &mut Tape<T>, t: &Tensor<T>, params: &mut Vec<(ParamId, Var)>| -> Result<Var> {
            let v = tape.leaf_raw(t.shape().to_vec(), t.data().to_vec(), track_backbone)?;
            params.push((ParamId::Backbone(backbone_idx), v));
            backbone_idx += 1;
            Ok(v)
        };

        // Leaves are recorded in the same order as `backbone_params`.
        let pe_w = bb(tape, &self.patch_embed.weight, &mut params)?;
        let pe_b = bb(tape, &self.patch_embed.bias, &mut params)?;
        let pos = bb(tape, &self.pos_embed, &mut params)?;
        let mut trans = Vec::new();
        for t in &self.transitions {
            let w = bb(tape, &t.weight, &mut params)?;
            let b = bb(tape, &t.bias, &mut params)?;
            trans.push((w, b));
        }
        struct BlockVars {
            ln1: (Var, Var),
            q: (Var, Var),
            k: (Var, Var),
            v: (Var, Var),
            proj: (Var, Var),
            ln2: (Var, Var),
            fc1: (Var, Var),
            fc2: (Var, Var),
        }
        let mut block_vars = Vec::new();
        for blk in &self.blocks {
            let ln1 = (bb(tape, &blk.ln1.gamma, &mut params)?, bb(tape, &blk.ln1.beta, &mut params)?);
            let mut lin = |tape: &mut Tape<T>, l: &Linear<T>, params: &mut Vec<(ParamId, Var)>| -> Result<(Var, Var)> {
                Ok((bb(tape, &l.weight, params)?, bb(tape, &l.bias, params)?))
            };
            let q = lin(tape, &blk.q, &mut params)?;
            let k = lin(tape, &blk.k, &mut params)?;
            let v = lin(tape, &blk.v, &mut params)?;
            let proj = lin(tape, &blk.proj, &mut params)?;
            let ln2 = (bb(tape, &blk.ln2.gamma, &mut params)?, bb(tape, &blk.ln2.beta, &mut params)?);
            let mut lin = |tape: &mut Tape<T>, l: &Linear<T>, params: &mut Vec<(ParamId, Var)>| -> Result<(Var, Var)> {
                Ok((bb(tape, &l.weight, params)?, bb(tape, &l.bias, params)?))
            };
            let fc1 = lin(tape, &blk.fc1, &mut params)?;
            let fc2 = lin(tape, &blk.fc2, &mut params)?;
            block_vars.push(BlockVars {
                ln1,
                q,
                k,
                v,
                proj,
                ln2,
                fc1,
                fc2,
            });
        }
        let fin = (
            bb(tape, &self.final_norm.gamma, &mut params)?,
            bb(tape, &self.final_norm.beta, &mut params)?,
        );

        let trainable_leaf = |tape: &mut Tape<T>, t: &Tensor<T>| -> Result<Var> {
            tape.leaf_raw(t.shape().to_vec(), t.data().to_vec(), track_trainable && t.requires_grad())
        };
        let head_w = trainable_leaf(tape, &self.head.weight)?;
        let head_b = trainable_leaf(tape, &self.head.bias)?;
        params.push((ParamId::HeadWeight, head_w));
        params.push((ParamId::HeadBias, head_b));

        let linear = |tape: &mut Tape<T>, x: Var, (w, b): (Var, Var)| -> Result<Var> {
            let y = tape.matmul_nt(x, w)?;
            tape.add_bias(y, b)
        };

        let x = tape.constant(vec![batch * tokens, self.spec.patch_dim()], patches)?;
        let x = linear(tape, x, (pe_w, pe_b))?;
        let mut x = tape.add_tiled(x, pos)?;
        let mut hidden = Vec::new();
        let mut stage = 0;
        for (b, (blk, vars)) in self.blocks.iter().zip(&block_vars).enumerate() {
            while stage < blk.stage {
                x = linear(tape, x, trans[stage])?;
                stage += 1;
            }
            let a = tape.layernorm(x, vars.ln1.0, vars.ln1.1, LN_EPS)?;
            let q = linear(tape, a, vars.q)?;
            let k = linear(tape, a, vars.k)?;
            let v = linear(tape, a, vars.v)?;
            let att = tape.attention(q, k, v, tokens, blk.heads)?;
            let m = linear(tape, att, vars.proj)?;
            let m = self.adapter_on_tape(tape, 2 * b, m, &trainable_leaf, &mut params, &mut hidden)?;
            x = tape.add(x, m)?;

            let a = tape.layernorm(x, vars.ln2.0, vars.ln2.1, LN_EPS)?;
            let f = linear(tape, a, vars.fc1)?;
            let f = tape.gelu(f)?;
            let f = linear(tape, f, vars.fc2)?;
            let f = self.adapter_on_tape(tape, 2 * b + 1, f, &trainable_leaf, &mut params, &mut hidden)?;
            x = tape.add(x, f)?;
        }
        let x = tape.layernorm(x, fin.0, fin.1, LN_EPS)?;
        let pooled = tape.mean_pool(x, tokens)?;
        let logits = linear(tape, pooled, (head_w, head_b))?;
        Ok(Trace {
            logits,
            params,
            hidden,
        })
    }

    fn adapter_on_tape(
        &self,
        tape: &mut Tape<T>,
        slot: usize,
        h: Var,
        leaf: &dyn Fn(&mut Tape<T>, &Tensor<T>) -> Result<Var>,
        params: &mut Vec<(ParamId, Var)>,
        hidden: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        let Some(a) = self.adapter(slot).filter(|a| a.hidden() > 0) else {
            return Ok(h);
        };
        let d = leaf(tape, a.down())?;
        let u = leaf(tape, a.up())?;
        params.push((ParamId::AdapterDown(slot), d));
        params.push((ParamId::AdapterUp(slot), u));
        let (out, z) = a.forward_tape(tape, h, d, u)?;
        if let Some(z) = z {
            hidden.push((slot, z));
        }
        Ok(out)
    }

    /// Logits `[batch, num_classes]` for images given as `[batch, side, side]`
    /// or `[batch, side·side]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let pixels = self.spec.pixels();
        let n = batch.shape().first().copied().unwrap_or(0);
        if batch.shape().len() < 2 || n * pixels != batch.len() {
            return Err(Error::Shape(format!(
                "expected a batch of {}x{} images, got shape {:?}",
                self.spec.image_side,
                self.spec.image_side,
                batch.shape()
            )));
        }
        let mut tape = Tape::new();
        let trace = self.forward_tape(&mut tape, batch.data(), n, GradMode::None)?;
        Ok(tape.to_tensor(trace.logits))
    }

    /// Adds tape gradients into the matching parameter tensors. Tensors
    /// with `requires_grad == false` are left untouched.
    pub fn accumulate_grads(&mut self, trace: &Trace, grads: &Gradients<T>) -> Result<()> {
        for &(id, var) in &trace.params {
            if let Some(g) = grads.get(var) {
                if let Some(t) = self.param_mut(id) {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for id in self.trainable_ids() {
            if let Some(t) = self.param_mut(id) {
                t.zero_grad();
            }
        }
    }

    /// Marks every backbone tensor as requiring gradients. Only meant for
    /// gradient checks on a throwaway copy.
    pub fn unfreeze_backbone_for_check(&mut self) {
        for t in self.backbone_params_mut() {
            t.set_requires_grad(true);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        let norm = |n: &Norm<T>| Norm {
            gamma: n.gamma.cast(),
            beta: n.beta.cast(),
        };
        Model {
            spec: self.spec.clone(),
            seed: self.seed,
            patch_embed: lin(&self.patch_embed),
            pos_embed: self.pos_embed.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    stage: b.stage,
                    heads: b.heads,
                    ln1: norm(&b.ln1),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    proj: lin(&b.proj),
                    ln2: norm(&b.ln2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            transitions: self.transitions.iter().map(lin).collect(),
            final_norm: norm(&self.final_norm),
            head: lin(&self.head),
            slots: self
                .slots
                .iter()
                .map(|s| s.as_ref().map(Adapter::cast))
                .collect(),
        }
    }
}
