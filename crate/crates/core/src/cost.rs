//! Parameter, storage and FLOP accounting.
//!
//! FLOPs count one forward pass of one image: every matrix product costs
//! two FLOPs per multiply-accumulate (patch embedding, q/k/v/output
//! projections, attention scores and weighted values, MLP, stage
//! transitions, head and adapters), and softmax and the backbone MLP GELU
//! cost one FLOP per element. Additions, normalization and the adapter
//! GELU are not counted, so an adapter contributes exactly `2·T·(2·N·M)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::{slot_location, Model, SlotKind};

pub const FLOP_CONVENTION: &str = "flops: 1 MAC = 2 FLOPs; attention QK^T and AV counted exactly; softmax and MLP GELU 1 FLOP/element; adds, norms and adapter GELU not counted";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub backbone_params: usize,
    pub head_params: usize,
    pub adapter_params: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_percent: f64,
    /// Bytes needed to store the trainable parameters.
    pub storage_bytes: usize,
    pub tokens: usize,
    pub forward_flops: u64,
}

impl CostReport {
    /// Table-style summary such as `27.8 M / 100%`.
    pub fn summary(&self) -> String {
        format!(
            "{:.1} M / {}%",
            self.total_params as f64 / 1e6,
            trim_percent(self.trainable_percent)
        )
    }

    /// The same model with every parameter trained.
    pub fn full_finetuning(&self) -> Self {
        let bytes_per = self.storage_bytes.checked_div(self.trainable_params).unwrap_or(0);
        Self {
            trainable_params: self.total_params,
            trainable_percent: 100.0,
            storage_bytes: self.total_params * bytes_per,
            ..self.clone()
        }
    }
}

fn trim_percent(p: f64) -> String {
    let s = format!("{p:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn mac(a: usize, b: usize, c: usize) -> u64 {
    2 * (a as u64) * (b as u64) * (c as u64)
}

/// FLOPs of the frozen backbone and head for `tokens` tokens per image.
pub fn backbone_flops<T: Scalar>(model: &Model<T>, tokens: usize) -> u64 {
    let spec = model.spec();
    let t = tokens;
    let mut flops = mac(t, spec.patch_dim(), spec.stages[0].0);
    let mut stage = 0;
    for blk in model.blocks() {
        while stage < blk.stage {
            flops += mac(t, spec.stages[stage].0, spec.stages[stage + 1].0);
            stage += 1;
        }
        let d = spec.stages[blk.stage].0;
        let h = spec.mlp_hidden(d);
        flops += 4 * mac(t, d, d);
        flops += 2 * mac(t, t, d);
        flops += (blk.heads * t * t) as u64;
        flops += 2 * mac(t, d, h);
        flops += (t * h) as u64;
    }
    let last = spec.stages[stage].0;
    flops + mac(1, last, spec.num_classes)
}

pub fn adapter_flops(input_dim: usize, hidden: usize, tokens: usize) -> u64 {
    2 * mac(tokens, hidden, input_dim)
}

/// Costs of `model`; `tokens` defaults to the model's own sequence length.
pub fn cost_report<T: Scalar>(model: &Model<T>, tokens: Option<usize>) -> CostReport {
    let tokens = tokens.unwrap_or(model.spec().tokens());
    let adapter_flops: u64 = model
        .adapters()
        .iter()
        .map(|(_, a)| adapter_flops(a.input_dim(), a.hidden(), tokens))
        .sum();
    let trainable = model.trainable_param_count();
    let total = model.total_param_count();
    CostReport {
        backbone_params: model.backbone_param_count(),
        head_params: model.head_param_count(),
        adapter_params: model.adapter_param_count(),
        trainable_params: trainable,
        total_params: total,
        trainable_percent: 100.0 * trainable as f64 / total as f64,
        storage_bytes: trainable * T::BYTES,
        tokens,
        forward_flops: backbone_flops(model, tokens) + adapter_flops,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub slot: usize,
    pub layer_index: usize,
    pub kind: SlotKind,
    pub input_dim: usize,
    pub initial_hidden: usize,
    pub current_hidden: usize,
    pub percent_remaining: f64,
}

/// One row per injected adapter, fully pruned ones included.
pub fn allocation_report<T: Scalar>(model: &Model<T>) -> Vec<AllocationRow> {
    model
        .adapters()
        .iter()
        .map(|(slot, a)| {
            let (layer_index, kind) = slot_location(*slot);
            AllocationRow {
                slot: *slot,
                layer_index,
                kind,
                input_dim: a.input_dim(),
                initial_hidden: a.initial_hidden(),
                current_hidden: a.hidden(),
                percent_remaining: if a.initial_hidden() == 0 {
                    0.0
                } else {
                    100.0 * a.hidden() as f64 / a.initial_hidden() as f64
                },
            }
        })
        .collect()
}

pub fn write_allocation_csv<W: Write>(rows: &[AllocationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer_index", "slot", "M", "N_initial", "N_current", "percent_remaining"])?;
    for r in rows {
        w.write_record([
            r.layer_index.to_string(),
            r.kind.name().to_string(),
            r.input_dim.to_string(),
            r.initial_hidden.to_string(),
            r.current_hidden.to_string(),
            r.percent_remaining.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes the FLOP convention as a `#` comment line followed by one CSV
/// row per report.
pub fn write_cost_csv<W: Write>(rows: &[(&str, &CostReport)], mut out: W) -> Result<()> {
    writeln!(out, "# {FLOP_CONVENTION}").map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "backbone_params",
        "head_params",
        "adapter_params",
        "trainable_params",
        "total_params",
        "trainable_percent",
        "storage_bytes",
        "tokens",
        "forward_flops",
    ])?;
    for (name, c) in rows {
        w.write_record([
            name.to_string(),
            c.backbone_params.to_string(),
            c.head_params.to_string(),
            c.adapter_params.to_string(),
            c.trainable_params.to_string(),
            c.total_params.to_string(),
            c.trainable_percent.to_string(),
            c.storage_bytes.to_string(),
            c.tokens.to_string(),
            c.forward_flops.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
