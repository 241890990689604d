//! Neuron importance scores and the selection of neurons to remove.
//!
//! The default score of neuron `j` in adapter `i` is
//!
//! ```text
//! I_ij = (Σ_k |W_down[j,k]| + Σ_l |W_up[l,j]|) / (N_i + M_i)
//! ```
//!
//! i.e. the L¹ mass flowing into the neuron plus the mass it emits,
//! normalized so that adapters of different sizes can be ranked together.
//! Both sums run over the `M_i` weights attached to the neuron.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::autodiff::Tape;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::{slot_location, GradMode, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerId {
    Mimi,
    UnnormalizedI0,
    GradientL1,
    ActivationL1,
    Random,
    MagnitudeLocal,
    MagnitudeDw,
}

impl ScorerId {
    pub fn name(self) -> &'static str {
        match self {
            ScorerId::Mimi => "mimi",
            ScorerId::UnnormalizedI0 => "i0",
            ScorerId::GradientL1 => "grad",
            ScorerId::ActivationL1 => "act",
            ScorerId::Random => "random",
            ScorerId::MagnitudeLocal => "magnitude_local",
            ScorerId::MagnitudeDw => "magnitude_dw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronScore {
    pub adapter_id: usize,
    pub neuron: usize,
    pub score: f64,
    /// Contribution of the `W_down` row alone, under the same scaling as
    /// `score`. Only weight-based scorers provide it.
    pub down_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScoreTable {
    pub scorer: ScorerId,
    pub entries: Vec<NeuronScore>,
}

impl NeuronScoreTable {
    pub fn get(&self, adapter_id: usize, neuron: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.adapter_id == adapter_id && e.neuron == neuron)
            .map(|e| e.score)
    }

    /// Multiplies every score by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut t = self.clone();
        for e in &mut t.entries {
            e.score *= c;
            e.down_score = e.down_score.map(|d| d * c);
        }
        t
    }

    /// Columns: adapter_id, layer_index, slot, neuron_index, score, scorer_id.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["adapter_id", "layer_index", "slot", "neuron_index", "score", "scorer_id"])?;
        for e in &self.entries {
            let (layer, kind) = slot_location(e.adapter_id);
            w.write_record([
                e.adapter_id.to_string(),
                layer.to_string(),
                kind.name().to_string(),
                e.neuron.to_string(),
                format!("{:e}", e.score),
                self.scorer.name().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn l1_parts<T: Scalar>(a: &Adapter<T>, j: usize) -> (f64, f64) {
    let down = a.down_row(j).iter().map(|w| w.as_f64().abs()).sum::<f64>();
    let up = a.up_col(j).map(|w| w.as_f64().abs()).sum::<f64>();
    (down, up)
}

fn magnitude_table<T: Scalar>(
    adapters: &[(usize, &Adapter<T>)],
    scorer: ScorerId,
    normalized: bool,
    down_only: bool,
) -> NeuronScoreTable {
    let mut entries = Vec::new();
    for &(id, a) in adapters {
        let scale = if normalized {
            1.0 / (a.hidden() + a.input_dim()) as f64
        } else {
            1.0
        };
        for j in 0..a.hidden() {
            let (down, up) = l1_parts(a, j);
            let score = if down_only { down } else { down + up };
            entries.push(NeuronScore {
                adapter_id: id,
                neuron: j,
                score: score * scale,
                down_score: Some(down * scale),
            });
        }
    }
    NeuronScoreTable { scorer, entries }
}

/// Normalized look-ahead magnitude score.
pub fn score_mimi<T: Scalar>(adapters: &[(usize, &Adapter<T>)]) -> NeuronScoreTable {
    magnitude_table(adapters, ScorerId::Mimi, true, false)
}

/// The look-ahead magnitude score without the `1/(N+M)` factor.
pub fn score_unnormalized<T: Scalar>(adapters: &[(usize, &Adapter<T>)]) -> NeuronScoreTable {
    magnitude_table(adapters, ScorerId::UnnormalizedI0, false, false)
}

/// Plain L¹ magnitude for per-adapter selection; with `down_only` the
/// `W_up` column is ignored.
pub fn score_magnitude<T: Scalar>(adapters: &[(usize, &Adapter<T>)], down_only: bool) -> NeuronScoreTable {
    let id = if down_only {
        ScorerId::MagnitudeDw
    } else {
        ScorerId::MagnitudeLocal
    };
    magnitude_table(adapters, id, false, down_only)
}

/// Uniform draws in `[0, 1)`.
pub fn score_random<T: Scalar>(adapters: &[(usize, &Adapter<T>)], seed: u64) -> NeuronScoreTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for &(id, a) in adapters {
        for j in 0..a.hidden() {
            entries.push(NeuronScore {
                adapter_id: id,
                neuron: j,
                score: rng.random::<f64>(),
                down_score: None,
            });
        }
    }
    NeuronScoreTable {
        scorer: ScorerId::Random,
        entries,
    }
}

/// Element-wise `Σ_batches |∂L/∂w|` for every adapter's weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradAccumulator {
    /// slot -> (|grad W_down| `[N, M]`, |grad W_up| `[M, N]`)
    pub slots: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
    pub batches: usize,
}

impl GradAccumulator {
    pub fn add_abs(&mut self, slot: usize, down: &[f64], up: &[f64]) {
        let entry = self
            .slots
            .entry(slot)
            .or_insert_with(|| (vec![0.0; down.len()], vec![0.0; up.len()]));
        for (a, g) in entry.0.iter_mut().zip(down) {
            *a += g.abs();
        }
        for (a, g) in entry.1.iter_mut().zip(up) {
            *a += g.abs();
        }
    }
}

/// Runs forward and backward on every batch without updating weights and
/// accumulates absolute adapter gradients.
pub fn accumulate_gradients<T: Scalar>(model: &Model<T>, batches: &[Batch<T>]) -> Result<GradAccumulator> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset("gradient scoring needs at least one batch".into()));
    }
    let mut acc = GradAccumulator::default();
    for b in batches {
        let mut tape = Tape::new();
        let trace = model.forward_tape(&mut tape, &b.images, b.len(), GradMode::Trainable)?;
        let loss = tape.cross_entropy(trace.logits, &b.labels)?;
        let grads = tape.backward(loss)?;
        let mut per_slot: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for &(id, var) in &trace.params {
            let to_f64 = |g: Option<&[T]>| g.map(|g| g.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
            match id {
                crate::vit::ParamId::AdapterDown(s) => {
                    let len = tape.value(var).len();
                    per_slot.entry(s).or_default().0 = to_f64(grads.get(var)).unwrap_or(vec![0.0; len]);
                }
                crate::vit::ParamId::AdapterUp(s) => {
                    let len = tape.value(var).len();
                    per_slot.entry(s).or_default().1 = to_f64(grads.get(var)).unwrap_or(vec![0.0; len]);
                }
                _ => {}
            }
        }
        for (s, (d, u)) in per_slot {
            acc.add_abs(s, &d, &u);
        }
        acc.batches += 1;
    }
    Ok(acc)
}

/// Per-neuron sum of accumulated `|∂L/∂w|` over its `W_down` row and
/// `W_up` column, scaled by `1/(N+M)`.
pub fn score_gradient<T: Scalar>(adapters: &[(usize, &Adapter<T>)], acc: &GradAccumulator) -> Result<NeuronScoreTable> {
    if acc.batches == 0 {
        return Err(Error::InvalidArgument("gradients accumulated over zero batches".into()));
    }
    let mut entries = Vec::new();
    for &(id, a) in adapters {
        let (n, m) = (a.hidden(), a.input_dim());
        if n == 0 {
            continue;
        }
        let (down, up) = acc
            .slots
            .get(&id)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradients recorded for adapter {id}")))?;
        if down.len() != n * m || up.len() != n * m {
            return Err(Error::Shape(format!("gradient buffers for adapter {id} do not match its shape")));
        }
        let scale = 1.0 / (n + m) as f64;
        for j in 0..n {
            let d: f64 = down[j * m..(j + 1) * m].iter().sum();
            let u: f64 = (0..m).map(|l| up[l * n + j]).sum();
            entries.push(NeuronScore {
                adapter_id: id,
                neuron: j,
                score: (d + u) * scale,
                down_score: Some(d * scale),
            });
        }
    }
    Ok(NeuronScoreTable {
        scorer: ScorerId::GradientL1,
        entries,
    })
}

/// Mean `|z_ij|` of each hidden neuron over every token of every sample
/// in `batches`. Values are sorted before summation so the result does not
/// depend on the order of the stream.
pub fn score_activation<T: Scalar>(model: &Model<T>, batches: &[Batch<T>]) -> Result<NeuronScoreTable> {
    if batches.iter().all(|b| b.is_empty()) {
        return Err(Error::EmptyDataset("activation scoring needs at least one sample".into()));
    }
    let mut values: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for b in batches.iter().filter(|b| !b.is_empty()) {
        let mut tape = Tape::new();
        let trace = model.forward_tape(&mut tape, &b.images, b.len(), GradMode::None)?;
        for &(slot, z) in &trace.hidden {
            let n = tape.shape(z)[1];
            for (i, v) in tape.value(z).iter().enumerate() {
                values.entry((slot, i % n)).or_default().push(v.as_f64().abs());
            }
        }
    }
    let mut entries = Vec::new();
    for (slot, a) in model.adapters() {
        for j in 0..a.hidden() {
            let mut v = values.remove(&(slot, j)).unwrap_or_default();
            v.sort_by(f64::total_cmp);
            let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            entries.push(NeuronScore {
                adapter_id: slot,
                neuron: j,
                score: mean,
                down_score: None,
            });
        }
    }
    Ok(NeuronScoreTable {
        scorer: ScorerId::ActivationL1,
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Global,
    Local,
    LocalDw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    /// Surviving neuron indices for every adapter present in the table.
    pub keep: BTreeMap<usize, Vec<usize>>,
    pub rho: f64,
    pub mode: SelectionMode,
    pub removed: usize,
}

impl SelectionPlan {
    pub fn removed_from(&self, adapter_id: usize, hidden: usize) -> usize {
        self.keep.get(&adapter_id).map_or(0, |k| hidden - k.len())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("rho {rho} must lie in (0, 1)")))
    }
}

fn removal_count(rho: f64, n: usize) -> usize {
    (rho * n as f64).floor() as usize
}

fn check_scores(table: &NeuronScoreTable) -> Result<()> {
    match table.entries.iter().find(|e| !(e.score.is_finite() && e.score >= 0.0)) {
        Some(e) => Err(Error::InvalidArgument(format!(
            "score {} for adapter {} neuron {} is not finite and non-negative",
            e.score, e.adapter_id, e.neuron
        ))),
        None => Ok(()),
    }
}

/// Ascending score, ties broken by adapter then neuron index.
fn rank(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

fn plan_from_removed(
    table: &NeuronScoreTable,
    removed: &std::collections::BTreeSet<(usize, usize)>,
    rho: f64,
    mode: SelectionMode,
) -> SelectionPlan {
    let mut keep: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in &table.entries {
        let k = keep.entry(e.adapter_id).or_default();
        if !removed.contains(&(e.adapter_id, e.neuron)) {
            k.push(e.neuron);
        }
    }
    keep.values_mut().for_each(|k| k.sort_unstable());
    SelectionPlan {
        keep,
        rho,
        mode,
        removed: removed.len(),
    }
}

/// Pools every neuron across adapters and removes the `floor(ρ·total)`
/// lowest-scored ones. An adapter may lose all of its neurons.
pub fn select_global(table: &NeuronScoreTable, rho: f64) -> Result<SelectionPlan> {
    check_rho(rho)?;
    check_scores(table)?;
    let mut ranked: Vec<(f64, usize, usize)> =
        table.entries.iter().map(|e| (e.score, e.adapter_id, e.neuron)).collect();
    ranked.sort_by(rank);
    let count = removal_count(rho, ranked.len());
    let removed = ranked[..count].iter().map(|r| (r.1, r.2)).collect();
    Ok(plan_from_removed(table, &removed, rho, SelectionMode::Global))
}

/// Removes `floor(ρ·N_i)` lowest-scored neurons inside each adapter. With
/// `dw_only` the ranking uses only the `W_down` contribution.
pub fn select_local(table: &NeuronScoreTable, rho: f64, dw_only: bool) -> Result<SelectionPlan> {
    check_rho(rho)?;
    check_scores(table)?;
    let mut per_adapter: BTreeMap<usize, Vec<(f64, usize, usize)>> = BTreeMap::new();
    for e in &table.entries {
        let s = if dw_only {
            e.down_score.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "scorer {} has no W_down component for down-only selection",
                    table.scorer.name()
                ))
            })?
        } else {
            e.score
        };
        per_adapter.entry(e.adapter_id).or_default().push((s, e.adapter_id, e.neuron));
    }
    let mut removed = std::collections::BTreeSet::new();
    for ranked in per_adapter.values_mut() {
        ranked.sort_by(rank);
        let count = removal_count(rho, ranked.len());
        removed.extend(ranked[..count].iter().map(|r| (r.1, r.2)));
    }
    let mode = if dw_only {
        SelectionMode::LocalDw
    } else {
        SelectionMode::Local
    };
    Ok(plan_from_removed(table, &removed, rho, mode))
}

pub fn select(table: &NeuronScoreTable, rho: f64, mode: SelectionMode) -> Result<SelectionPlan> {
    match mode {
        SelectionMode::Global => select_global(table, rho),
        SelectionMode::Local => select_local(table, rho, false),
        SelectionMode::LocalDw => select_local(table, rho, true),
    }
}

/// Scorers selectable from the command line and the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Mimi,
    I0,
    Grad,
    Act,
    Random,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Mimi => "mimi",
            ScorerKind::I0 => "i0",
            ScorerKind::Grad => "grad",
            ScorerKind::Act => "act",
            ScorerKind::Random => "random",
        }
    }

    /// Scores every live neuron of `model`. Data-dependent scorers use
    /// `batches`; the random scorer uses `seed`.
    pub fn score<T: Scalar>(self, model: &Model<T>, batches: &[Batch<T>], seed: u64) -> Result<NeuronScoreTable> {
        let adapters = model.adapters();
        match self {
            ScorerKind::Mimi => Ok(score_mimi(&adapters)),
            ScorerKind::I0 => Ok(score_unnormalized(&adapters)),
            ScorerKind::Random => Ok(score_random(&adapters, seed)),
            ScorerKind::Grad => score_gradient(&adapters, &accumulate_gradients(model, batches)?),
            ScorerKind::Act => score_activation(model, batches),
        }
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mimi" => Ok(ScorerKind::Mimi),
            "i0" => Ok(ScorerKind::I0),
            "grad" => Ok(ScorerKind::Grad),
            "act" => Ok(ScorerKind::Act),
            "random" => Ok(ScorerKind::Random),
            other => Err(Error::InvalidArgument(format!("unknown scorer {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn adapter(down: Vec<f64>, up: Vec<f64>, n: usize, m: usize) -> Adapter<f64> {
        Adapter::new(
            Tensor::new(vec![n, m], down).unwrap(),
            Tensor::new(vec![m, n], up).unwrap(),
        )
        .unwrap()
    }

    fn flat_table(scores: &[(usize, f64)]) -> NeuronScoreTable {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let entries = scores
            .iter()
            .map(|&(a, s)| {
                let c = counts.entry(a).or_default();
                *c += 1;
                NeuronScore {
                    adapter_id: a,
                    neuron: *c - 1,
                    score: s,
                    down_score: Some(s),
                }
            })
            .collect();
        NeuronScoreTable {
            scorer: ScorerId::Mimi,
            entries,
        }
    }

    #[test]
    fn hand_computed_mimi_score() {
        let a = adapter(vec![1.0, -1.0], vec![0.5, 0.5], 1, 2);
        let t = score_mimi(&[(0, &a)]);
        assert!((t.entries[0].score - 1.0).abs() < 1e-15);
        let t0 = score_unnormalized(&[(0, &a)]);
        assert!((t0.entries[0].score - 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_neuron_scores_zero() {
        let mut a = adapter(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        a.zero_neuron(1).unwrap();
        let t = score_mimi(&[(0, &a)]);
        assert_eq!(t.get(0, 1), Some(0.0));
        assert!(t.get(0, 0).unwrap() > 0.0);
        assert_eq!(score_unnormalized(&[(0, &a)]).get(0, 1), Some(0.0));
    }

    #[test]
    fn normalization_separates_sizes() {
        // Same neuron weights, different (N, M).
        let small = adapter(vec![1.0, 1.0], vec![1.0, 1.0], 1, 2);
        let big = adapter(
            vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            3,
            2,
        );
        let i0 = score_unnormalized(&[(0, &small), (1, &big)]);
        assert_eq!(i0.get(0, 0), i0.get(1, 0));
        let i = score_mimi(&[(0, &small), (1, &big)]);
        assert_ne!(i.get(0, 0), i.get(1, 0));
    }

    #[test]
    fn global_tie_break_order() {
        let t = flat_table(&[(0, 1.0), (0, 1.0), (1, 1.0), (1, 1.0)]);
        let p = select_global(&t, 0.5).unwrap();
        assert_eq!(p.removed, 2);
        assert_eq!(p.keep[&0], Vec::<usize>::new());
        assert_eq!(p.keep[&1], vec![0, 1]);
    }

    #[test]
    fn global_can_empty_an_adapter_local_cannot() {
        let t = flat_table(&[(0, 0.0), (0, 0.0), (1, 2.0), (1, 3.0), (2, 1.0), (2, 4.0)]);
        let g = select_global(&t, 0.5).unwrap();
        assert!(g.keep[&0].is_empty());
        assert_eq!(g.removed, 3);
        let l = select_local(&t, 0.5, false).unwrap();
        assert!(l.keep.values().all(|k| k.len() == 1));
    }

    #[test]
    fn local_flooring_keeps_single_neurons() {
        let t = flat_table(&[(0, 0.1), (1, 0.2)]);
        let l = select_local(&t, 0.5, false).unwrap();
        assert_eq!(l.removed, 0);
        assert_eq!(l.keep[&0], vec![0]);
    }

    #[test]
    fn down_only_ranking_differs() {
        // Neuron 0: small down row, large up column. Neuron 1: the reverse.
        let a = adapter(vec![0.1, 0.1, 1.0, 1.0], vec![5.0, 0.0, 5.0, 0.0], 2, 2);
        let full = select_local(&score_mimi(&[(0, &a)]), 0.5, false).unwrap();
        let dw = select_local(&score_mimi(&[(0, &a)]), 0.5, true).unwrap();
        assert_eq!(full.keep[&0], vec![0]);
        assert_eq!(dw.keep[&0], vec![1]);
        assert_eq!(select_local(&score_magnitude(&[(0, &a)], true), 0.5, false).unwrap().keep[&0], vec![1]);
    }

    #[test]
    fn rho_out_of_range() {
        let t = flat_table(&[(0, 1.0)]);
        assert!(select_global(&t, 0.0).is_err());
        assert!(select_global(&t, 1.0).is_err());
        assert!(select_local(&t, 1.5, false).is_err());
    }

    #[test]
    fn random_scores_in_unit_interval() {
        let a = adapter(vec![0.0; 8], vec![0.0; 8], 4, 2);
        let t = score_random(&[(0, &a)], 3);
        assert!(t.entries.iter().all(|e| (0.0..1.0).contains(&e.score)));
        assert_eq!(t, score_random(&[(0, &a)], 3));
        assert!(select_local(&t, 0.5, true).is_err());
    }

    #[test]
    fn gradient_score_matches_hand_sums() {
        let a = adapter(vec![0.0; 4], vec![0.0; 4], 2, 2);
        let mut acc = GradAccumulator::default();
        acc.add_abs(0, &[1.0, -2.0, 0.5, 0.0], &[3.0, -1.0, 0.0, 2.0]);
        acc.add_abs(0, &[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, -1.0]);
        acc.batches = 2;
        let t = score_gradient(&[(0, &a)], &acc).unwrap();
        // neuron 0: down |1|+|-2|+|1| = 4, up col 0: |3| + |0| = 3
        assert!((t.get(0, 0).unwrap() - 7.0 / 4.0).abs() < 1e-15);
        // neuron 1: down 0.5, up col 1: |-1| + |2| + |-1| = 4
        assert!((t.get(0, 1).unwrap() - 4.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn csv_has_fixed_header() {
        let t = flat_table(&[(3, 0.5)]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("adapter_id,layer_index,slot,neuron_index,score,scorer_id\n"));
        assert!(s.contains("3,1,mlp,0,5e-1,mimi"));
    }
}
