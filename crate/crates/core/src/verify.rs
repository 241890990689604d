//! Self-check suites behind the `verify` subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapter::{inject_adapters, Adapter, AdapterPlan};
use crate::autodiff::{finite_diff_check, Tape, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint, BLOB_FILE, MANIFEST_FILE};
use crate::engine::{cycle_count_paper, cycle_count_simulated};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{GradMode, Model, ModelSpec, ParamId};

pub const GRAD_TOL: f64 = 1e-6;
pub const PRUNE_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst error seen, where the suite measures one.
    pub max_error: f64,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} cases, max error {:e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(" ({})", self.detail)
            }
        )
    }
}

fn normal_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Checks `d loss / d input_i` for every input, holding the others
/// constant. The loss is a random weighting of the op's output.
fn check_op<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, op: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| probe.constant(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let out = op(&mut probe, &vars)?;
    let weights = normal_tensor(probe.shape(out).to_vec(), rng, 1.0);
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let err = finite_diff_check(
            |tape, p| {
                let mut vars = Vec::with_capacity(inputs.len());
                for (j, t) in inputs.iter().enumerate() {
                    vars.push(if j == i {
                        p
                    } else {
                        tape.constant(t.shape().to_vec(), t.data().to_vec())?
                    });
                }
                let out = op(tape, &vars)?;
                let w = tape.constant(weights.shape().to_vec(), weights.data().to_vec())?;
                let prod = tape.mul(out, w)?;
                tape.sum(prod)
            },
            &inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

const PRIMITIVES: [&str; 11] = [
    "matmul", "add", "mul", "add_bias", "add_tiled", "gelu", "layernorm", "attention", "mean_pool", "cross_entropy", "model",
];

/// One seeded instance of primitive `kind` (an index into the list of
/// primitives, the last being the full model).
fn grad_instance(kind: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (n, k, m) = (dim(1, 5), dim(1, 6), dim(1, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut t = |shape: Vec<usize>| normal_tensor(shape, &mut rng, 1.0);
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A);
    match kind {
        0 => check_op(&[t(vec![n, k]), t(vec![m, k])], &mut wrng, |tp, v| tp.matmul_nt(v[0], v[1])),
        1 => check_op(&[t(vec![n, k]), t(vec![n, k])], &mut wrng, |tp, v| tp.add(v[0], v[1])),
        2 => check_op(&[t(vec![n, k]), t(vec![n, k])], &mut wrng, |tp, v| tp.mul(v[0], v[1])),
        3 => check_op(&[t(vec![n, k]), t(vec![k])], &mut wrng, |tp, v| tp.add_bias(v[0], v[1])),
        4 => check_op(&[t(vec![n * m, k]), t(vec![m, k])], &mut wrng, |tp, v| tp.add_tiled(v[0], v[1])),
        5 => check_op(&[t(vec![n, k])], &mut wrng, |tp, v| tp.gelu(v[0])),
        6 => {
            let k = k.max(2);
            check_op(&[t(vec![n, k]), t(vec![k]), t(vec![k])], &mut wrng, |tp, v| {
                tp.layernorm(v[0], v[1], v[2], 1e-5)
            })
        }
        7 => {
            let heads = 1 + (seed as usize % 2);
            let d = heads * k;
            let inputs = [t(vec![n * m, d]), t(vec![n * m, d]), t(vec![n * m, d])];
            check_op(&inputs, &mut wrng, move |tp, v| tp.attention(v[0], v[1], v[2], m, heads))
        }
        8 => check_op(&[t(vec![n * m, k])], &mut wrng, |tp, v| tp.mean_pool(v[0], m)),
        9 => {
            let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % m.max(2)).collect();
            check_op(&[t(vec![n, m.max(2)])], &mut wrng, move |tp, v| {
                let ce = tp.cross_entropy(v[0], &labels)?;
                Ok(ce)
            })
        }
        _ => model_instance(seed),
    }
}

fn gradcheck_spec() -> ModelSpec {
    ModelSpec {
        patch_size: 2,
        image_side: 4,
        stages: vec![(4, 1), (6, 1)],
        heads_per_stage: vec![2, 3],
        mlp_ratio: 2.0,
        num_classes: 3,
    }
}

/// Analytic vs central-difference gradients of the classification loss
/// with respect to a sample of entries of every parameter tensor,
/// backbone included.
pub fn model_gradcheck(
    model: &Model<f64>,
    images: &[f64],
    labels: &[usize],
    entries_per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    let batch = labels.len();
    let mut tape = Tape::new();
    let trace = model.forward_tape(&mut tape, images, batch, GradMode::All)?;
    let loss = tape.cross_entropy(trace.logits, labels)?;
    let grads = tape.backward(loss)?;
    let analytic: BTreeMap<ParamId, Vec<f64>> = trace
        .params
        .iter()
        .map(|&(id, v)| {
            let g = grads.get(v).map(<[f64]>::to_vec);
            (id, g.unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        })
        .collect();

    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let trace = m.forward_tape(&mut tape, images, batch, GradMode::None)?;
        let loss = tape.cross_entropy(trace.logits, labels)?;
        Ok(tape.value(loss)[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (id, g) in &analytic {
        let len = g.len();
        let picks: Vec<usize> = if len <= entries_per_tensor {
            (0..len).collect()
        } else {
            (0..entries_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for e in picks {
            let orig = probe.param(*id).expect("traced parameter exists").data()[e];
            let set = |m: &mut Model<f64>, v: f64| {
                m.param_mut(*id).expect("traced parameter exists").data_mut()[e] = v;
            };
            set(&mut probe, orig + FD_STEP);
            let plus = loss_of(&probe)?;
            set(&mut probe, orig - FD_STEP);
            let minus = loss_of(&probe)?;
            set(&mut probe, orig);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max((g[e] - numeric).abs() / g[e].abs().max(1.0));
        }
    }
    Ok(worst)
}

/// A two-stage model with randomly filled adapters and head so that every
/// path carries gradient.
pub fn random_model_instance(seed: u64) -> Result<(Model<f64>, Vec<f64>, Vec<usize>)> {
    let spec = gradcheck_spec();
    let mut model = Model::<f64>::build(&spec, seed)?;
    inject_adapters(&mut model, &AdapterPlan::FixedHidden(2), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
    let ids = model.trainable_ids();
    for id in ids {
        let t = model.param_mut(id).expect("trainable id exists");
        for x in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = 0.5 * z;
        }
    }
    // Larger backbone weights make the check sensitive to every block.
    for i in 0..model.backbone_params().len() {
        let t = model.param_mut(ParamId::Backbone(i)).expect("backbone index in range");
        for x in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += 0.3 * z;
        }
    }
    let batch = 2;
    let images: Vec<f64> = (0..batch * spec.pixels()).map(|_| rng.random::<f64>()).collect();
    let labels = (0..batch).map(|i| (i + seed as usize) % spec.num_classes).collect();
    Ok((model, images, labels))
}

fn model_instance(seed: u64) -> Result<f64> {
    let (model, images, labels) = random_model_instance(seed)?;
    model_gradcheck(&model, &images, &labels, 3, seed)
}

/// Runs `instances` seeded gradient checks cycling through every primitive
/// and the full model.
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mut worst_kind = "";
    for i in 0..instances {
        let kind = i % PRIMITIVES.len();
        let err = grad_instance(kind, seed.wrapping_add(i as u64))?;
        if err > worst {
            worst = err;
            worst_kind = PRIMITIVES[kind];
        }
    }
    Ok(SuiteResult {
        name: "gradcheck",
        passed: worst <= GRAD_TOL,
        cases: instances,
        max_error: worst,
        detail: if worst_kind.is_empty() {
            String::new()
        } else {
            format!("worst on {worst_kind}")
        },
    })
}

/// Random adapter with `M ≤ 32`, `N ≤ 16` and Gaussian weights.
pub fn random_adapter(rng: &mut ChaCha8Rng) -> Result<Adapter<f64>> {
    let m = rng.random_range(1..=32);
    let n = rng.random_range(1..=16);
    let down = normal_tensor(vec![n, m], rng, 1.0);
    let up = normal_tensor(vec![m, n], rng, 1.0);
    Adapter::new(down, up)
}

/// Zeroing a neuron's row and column and then removing it must leave the
/// adapter output unchanged.
pub fn prune_equivalence_suite(adapters: usize, inputs: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..adapters {
        let mut a = random_adapter(&mut rng)?;
        let j = rng.random_range(0..a.hidden());
        a.zero_neuron(j)?;
        let keep: Vec<usize> = (0..a.hidden()).filter(|&i| i != j).collect();
        let pruned = a.prune(&keep)?;
        let h = normal_tensor(vec![inputs, a.input_dim()], &mut rng, 2.0);
        let before = a.forward(&h)?;
        let after = pruned.forward(&h)?;
        for (x, y) in before.data().iter().zip(after.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(SuiteResult {
        name: "prune-equiv",
        passed: worst <= PRUNE_TOL,
        cases: adapters * inputs,
        max_error: worst,
        detail: String::new(),
    })
}

pub fn cycle_formula_suite() -> SuiteResult {
    let cases: [(f64, f64, f64, usize, usize); 4] = [
        (8.0, 32.0, 0.5, 1, 2),
        (8.0, 128.0, 0.5, 3, 4),
        (8.0, 8.0, 0.5, 0, 0),
        (8.0, 9.0, 0.5, 0, 1),
    ];
    let mut failures = Vec::new();
    for (s0, st, rho, paper, sim) in cases {
        let (p, s) = (cycle_count_paper(s0, st, rho), cycle_count_simulated(s0, st, rho));
        if (p, s) != (paper, sim) {
            failures.push(format!("({s0}, {st}, {rho}): closed form {p}, simulated {s}"));
        }
    }
    SuiteResult {
        name: "cycle-formula",
        passed: failures.is_empty(),
        cases: cases.len(),
        max_error: failures.len() as f64,
        detail: failures.join("; "),
    }
}

/// Saves a pruned model, reloads it, saves again and compares the files
/// and a forward pass bit for bit.
pub fn checkpoint_roundtrip_suite(dir: &Path) -> Result<SuiteResult> {
    let spec = ModelSpec {
        patch_size: 4,
        image_side: 8,
        stages: vec![(16, 2)],
        heads_per_stage: vec![2],
        mlp_ratio: 4.0,
        num_classes: 4,
    };
    let mut model = Model::<f32>::build(&spec, 5)?;
    inject_adapters(&mut model, &AdapterPlan::uniform(4.0, 1), 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for id in model.trainable_ids() {
        for x in model.param_mut(id).expect("trainable id exists").data_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    let a = model.adapter(1).expect("adapter injected").prune(&[0, 2])?;
    model.set_adapter(1, Some(a))?;
    let a = model.adapter(2).expect("adapter injected").prune(&[])?;
    model.set_adapter(2, Some(a))?;

    let (first, second) = (dir.join("first"), dir.join("second"));
    save_checkpoint(&model, &[], &first)?;
    let loaded = load_checkpoint::<f32>(&first)?;
    save_checkpoint(&loaded.model, &loaded.manifest.history, &second)?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let mut problems = Vec::new();
    for f in [MANIFEST_FILE, BLOB_FILE] {
        if read(&first.join(f))? != read(&second.join(f))? {
            problems.push(format!("{f} differs"));
        }
    }
    let images = Tensor::from_fn(vec![3, spec.pixels()], |i| ((i * 37) % 101) as f32 / 100.0);
    let (x, y) = (model.forward(&images)?, loaded.model.forward(&images)?);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(&x) != bits(&y) {
        problems.push("forward differs".into());
    }
    Ok(SuiteResult {
        name: "checkpoint-roundtrip",
        passed: problems.is_empty(),
        cases: 1,
        max_error: 0.0,
        detail: problems.join("; "),
    })
}
