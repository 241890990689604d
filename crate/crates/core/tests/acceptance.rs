//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the report is always printed; exits non-zero if any check
//! fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mimi::adapter::{inject_adapters, Adapter, AdapterPlan};
use mimi::analysis::{compare_kl, identity_regime_case, kl_neuron_removal, mc_oracle, preact_stats, GaussianInputSpec};
use mimi::checkpoint::{encode, load_checkpoint, save_checkpoint};
use mimi::config::RunConfig;
use mimi::cost::{adapter_flops, backbone_flops, cost_report};
use mimi::engine::{cycle_count_paper, cycle_count_simulated, run_mimi, run_vanilla, MimiRun, VanillaBudget};
use mimi::scoring::{score_mimi, select_global, select_local, ScorerKind, SelectionMode};
use mimi::verify::{gradcheck_suite, prune_equivalence_suite};
use mimi::{build_model, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn toy_config() -> RunConfig {
    RunConfig::from_path(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.json")).expect("toy config")
}

/// Toy config for seed `s`: backbone seed 100 + s, and `s` for data,
/// adapter init and training order.
fn seeded(s: u64) -> RunConfig {
    let mut c = toy_config();
    c.backbone_seed = 100 + s;
    c.train.seed = s;
    if let mimi::data::DatasetSpec::Synthetic(d) = &mut c.dataset {
        d.seed = s;
    }
    c
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let r = gradcheck_suite(110, 0).expect("gradcheck");
    let t = start.elapsed();
    outcome(
        r.passed && t < Duration::from_secs(60),
        format!("{} instances, max rel. error {:.2e} ({}), {:.1}s", r.cases, r.max_error, r.detail, t.as_secs_f64()),
    )
}

fn prune_equivalence() -> Outcome {
    let r = prune_equivalence_suite(100, 100, 0).expect("prune suite");
    outcome(r.passed, format!("100 adapters x 100 inputs, max |diff| {:e}", r.max_error))
}

fn identity() -> Outcome {
    let cfg = toy_config();
    let bare = build_model::<f64>(&cfg.model, 3).expect("model");
    let mut with = bare.clone();
    inject_adapters(&mut with, &AdapterPlan::uniform(4.0, 1), 3).expect("inject");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for slot in 0..with.num_slots() {
        let a = with.adapter_mut(slot).expect("injected");
        a.down_mut().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        assert!(a.up().data().iter().all(|v| *v == 0.0));
    }
    let head = |m: &mut Model<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        m.head_mut().weight.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    };
    let mut bare = bare;
    head(&mut bare);
    head(&mut with);
    let side = cfg.model.image_side;
    let images = Tensor::from_fn(vec![8, side, side], |_| rng.random_range(-2.0..2.0));
    let (a, b) = (bare.forward(&images).expect("fwd"), with.forward(&images).expect("fwd"));
    let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let f32_same = {
        let (a, b) = (bare.cast::<f32>(), with.cast::<f32>());
        let im = images.cast::<f32>();
        a.forward(&im).expect("fwd").data().iter().zip(b.forward(&im).expect("fwd").data()).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    outcome(same && f32_same, format!("{} logits compared bitwise in f64 and f32", a.len()))
}

fn random_adapter(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Adapter<f64> {
    let mut g = || -> f64 { StandardNormal.sample(&mut *rng) };
    let down = Tensor::from_fn(vec![n, m], |_| g());
    let up = Tensor::from_fn(vec![m, n], |_| g());
    Adapter::new(down, up).expect("adapter")
}

fn selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    for trial in 0..50 {
        let adapters: Vec<Adapter<f64>> = (0..rng.random_range(1..6))
            .map(|_| {
                let (m, n) = (rng.random_range(2..20), rng.random_range(1..10));
                random_adapter(&mut rng, m, n)
            })
            .collect();
        let refs: Vec<(usize, &Adapter<f64>)> = adapters.iter().enumerate().collect();
        let table = score_mimi(&refs);
        let total: usize = adapters.iter().map(Adapter::hidden).sum();
        let rho = rng.random_range(0.05..0.95);
        let plan = select_global(&table, rho).expect("select");
        if plan.removed != (rho * total as f64).floor() as usize {
            failures.push(format!("trial {trial}: removed {} of {total} at rho {rho}", plan.removed));
        }
        let c = rng.random_range(0.001..1000.0);
        if select_global(&table.scaled(c), rho).expect("select").keep != plan.keep {
            failures.push(format!("trial {trial}: plan changed under scaling by {c}"));
        }
    }
    let mut zero = random_adapter(&mut rng, 16, 4);
    for j in 0..4 {
        zero.zero_neuron(j).expect("zero");
    }
    let others = [random_adapter(&mut rng, 16, 4), random_adapter(&mut rng, 16, 4)];
    let refs = [(0, &others[0]), (1, &zero), (2, &others[1])];
    let table = score_mimi(&refs);
    let global = select_global(&table, 0.5).expect("select");
    let local = select_local(&table, 0.5, false).expect("select");
    if !global.keep[&1].is_empty() {
        failures.push(format!("global kept {:?} of the zero adapter", global.keep[&1]));
    }
    if local.keep[&1].len() != 2 {
        failures.push(format!("local kept {:?} of the zero adapter", local.keep[&1]));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "50 random tables; zero adapter: global keeps {}, local keeps {}",
                global.keep[&1].len(),
                local.keep[&1].len()
            )
        } else {
            failures.join("; ")
        },
    )
}

fn cycles(run: &MimiRun<f32>) -> Outcome {
    let (sim, paper) = (cycle_count_simulated(8.0, 32.0, 0.5), cycle_count_paper(8.0, 32.0, 0.5));
    let events = run.cycles.iter().filter(|c| c.cycle > 0).count();
    let reported = run.cycles.iter().all(|c| c.cycles_simulated == sim && c.cycles_paper == paper);
    outcome(
        sim == 2 && paper == 1 && events == sim && reported,
        format!("simulated {sim}, closed form {paper}, prune events executed {events}, recorded in every report: {reported}"),
    )
}

struct Desk {
    mimi: Vec<f64>,
    vanilla: Vec<(f64, Vec<f64>)>,
    runs: Vec<MimiRun<f32>>,
    elapsed: Duration,
}

fn desk_scale() -> Desk {
    let start = Instant::now();
    let mut desk = Desk {
        mimi: Vec::new(),
        vanilla: vec![(32.0, Vec::new()), (8.0, Vec::new()), (512.0, Vec::new())],
        runs: Vec::new(),
        elapsed: Duration::ZERO,
    };
    for s in 0..3 {
        let cfg = seeded(s);
        let data = cfg.dataset.load().expect("data");
        let mut model = build_model::<f32>(&cfg.model, cfg.backbone_seed).expect("model");
        inject_adapters(&mut model, &cfg.adapters, s).expect("inject");
        let run = run_mimi(model, &cfg.schedule, &cfg.train, &data, ScorerKind::Mimi, SelectionMode::Global, &mut ())
            .expect("mimi run");
        desk.mimi.push(run.cycles.last().expect("cycles").test_acc);
        desk.runs.push(run);
        let budget = VanillaBudget::matching(&cfg.schedule);
        for (sigma, accs) in &mut desk.vanilla {
            let mut model = build_model::<f32>(&cfg.model, cfg.backbone_seed).expect("model");
            inject_adapters(&mut model, &AdapterPlan::uniform(*sigma, 1), s).expect("inject");
            let r = run_vanilla(model, &cfg.train, &data, &budget, &mut ()).expect("vanilla run");
            accs.push(r.report.test_acc);
        }
    }
    desk.elapsed = start.elapsed();
    desk
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

fn mimi_vs_vanilla(d: &Desk) -> Outcome {
    let v32 = &d.vanilla[0].1;
    let wins = d.mimi.iter().zip(v32).filter(|(m, v)| m >= v).count();
    let in_band = v32.iter().all(|a| (0.6..=0.9).contains(a));
    outcome(
        wins >= 2 && in_band && d.elapsed < Duration::from_secs(600),
        format!(
            "MiMi {} vs vanilla sigma=32 {} ({wins}/3 seeds), {:.0}s",
            fmt(&d.mimi),
            fmt(v32),
            d.elapsed.as_secs_f64()
        ),
    )
}

fn monotone(d: &Desk) -> Outcome {
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (a8, a512) = (mean(&d.vanilla[1].1), mean(&d.vanilla[2].1));
    outcome(
        a8 >= a512,
        format!("sigma=8 mean {a8:.3} ({}), sigma=512 mean {a512:.3} ({})", fmt(&d.vanilla[1].1), fmt(&d.vanilla[2].1)),
    )
}

fn gaussian() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_z = 0.0f64;
    let mut misses = 0;
    for case in 0..20u64 {
        let (m, n) = (rng.random_range(2..7), rng.random_range(1..5));
        let a = random_adapter(&mut rng, m, n);
        let mu = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var = (0..m).map(|_| rng.random_range(0.1..2.0)).collect();
        let input = GaussianInputSpec::new(mu, var).expect("input");
        let (mu_d, var_d) = preact_stats(&a, &input).expect("stats");
        let mc = mc_oracle(&a, &input, 100_000, case).expect("mc");
        for (j, got) in mc.preact.iter().enumerate() {
            let z = ((got.mean - mu_d[j]) / got.mean_se).abs().max(((got.var - var_d[j]) / got.var_se).abs());
            worst_z = worst_z.max(z);
            misses += usize::from(!got.agrees(mu_d[j], var_d[j], 3.0));
        }
    }

    // Zero row: the neuron never fires. Zero emission: it fires but writes nothing.
    let input = GaussianInputSpec::new(vec![0.5, -1.0, 2.0], vec![1.0, 0.5, 0.2]).expect("input");
    let mut a = random_adapter(&mut rng, 3, 3);
    a.down_mut().data_mut()[3..6].iter_mut().for_each(|v| *v = 0.0);
    let row = kl_neuron_removal(&a, &input, 1).expect("kl").total();
    let mut b = random_adapter(&mut rng, 3, 3);
    (0..3).for_each(|k| b.up_mut().data_mut()[k * 3 + 2] = 0.0);
    let emit = kl_neuron_removal(&b, &input, 2).expect("kl").total();

    let mut worst_rel = 0.0f64;
    for seed in 0..10 {
        let (a, input) = identity_regime_case(4, 3, seed).expect("case");
        for k in compare_kl(&a, &input, 100_000, seed).expect("kl") {
            worst_rel = worst_rel.max(k.relative_error());
        }
    }
    let t = start.elapsed();
    outcome(
        misses == 0 && row == 0.0 && emit == 0.0 && worst_rel <= 0.05 && t < Duration::from_secs(120),
        format!(
            "preact: {misses} outside 3 SE (worst {worst_z:.2} SE); KL zero-row {row}, zero-emission {emit}; KL max rel. error {:.2}%; {:.1}s",
            100.0 * worst_rel,
            t.as_secs_f64()
        ),
    )
}

fn persistence(dir: &Path) -> Outcome {
    let cfg = toy_config();
    let mut model = build_model::<f32>(&cfg.model, 1).expect("model");
    inject_adapters(&mut model, &AdapterPlan::uniform(32.0, 1), 1).expect("inject");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in model.trainable_ids() {
        model.param_mut(id).expect("id").data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let keep: Vec<usize> = vec![1];
    let pruned = model.adapter(2).expect("slot").prune(&keep).expect("prune");
    model.set_adapter(2, Some(pruned)).expect("set");
    save_checkpoint(&model, &[], dir).expect("save");
    let back = load_checkpoint::<f32>(dir).expect("load").model;
    let bits = |m: &Model<f32>| -> Vec<u32> {
        m.trainable_ids().into_iter().flat_map(|id| m.param(id).expect("id").data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    let roundtrip = back == model && bits(&back) == bits(&model) && encode(&back, &[]).1 == encode(&model, &[]).1;

    let mut fresh = build_model::<f32>(&cfg.model, 1).expect("model");
    inject_adapters(&mut fresh, &AdapterPlan::uniform(32.0, 1), 1).expect("inject");
    let (manifest, blob) = encode(&fresh, &[]);
    let full_bytes = fresh.total_param_count() * 4;
    let fraction = blob.len() as f64 / full_bytes as f64;

    let tokens = cfg.model.tokens();
    let bare = build_model::<f32>(&cfg.model, 1).expect("model");
    let mut cleared = fresh.clone();
    cleared.clear_adapters();
    let flops_cleared = cost_report(&cleared, None).forward_flops == backbone_flops(&bare, tokens);
    let mut one = cleared.clone();
    let extra = random_adapter(&mut rng, 64, 5).cast::<f32>();
    one.set_adapter(1, Some(extra)).expect("set");
    let delta = cost_report(&one, None).forward_flops - cost_report(&cleared, None).forward_flops;
    let delta_ok = delta == 2 * tokens as u64 * (2 * 5 * 64) && delta == adapter_flops(64, 5, tokens);
    outcome(
        roundtrip && fraction < 0.05 && manifest.blob_bytes == blob.len() && flops_cleared && delta_ok,
        format!(
            "round trip bit-exact: {roundtrip}; blob {} B = {:.2}% of {full_bytes} B; bare FLOPs restored: {flops_cleared}; one adapter adds {delta}",
            blob.len(),
            100.0 * fraction
        ),
    )
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).expect("read dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("prefix").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(tmp: &Path) -> Outcome {
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.json")).expect("read"))
            .expect("json");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.join(run);
        cfg["output_dir"] = serde_json::Value::String(out.display().to_string());
        let path = tmp.join(format!("{run}.json"));
        fs::write(&path, cfg.to_string()).expect("write config");
        let status = Command::new(env!("CARGO_BIN_EXE_mimi"))
            .args(["train", "--config"])
            .arg(&path)
            .env("REPRODUCIBLE", "1")
            .output()
            .expect("spawn")
            .status;
        if !status.success() {
            return outcome(false, format!("train exited with {status}"));
        }
        outputs.push(out);
    }
    let names = files(&outputs[0]);
    if names != files(&outputs[1]) {
        return outcome(false, "output file sets differ");
    }
    let differing: Vec<String> = names
        .iter()
        .filter(|n| fs::read(outputs[0].join(n)).ok() != fs::read(outputs[1].join(n)).ok())
        .map(|n| n.display().to_string())
        .collect();
    let has = |n: &str| names.iter().any(|p| p.ends_with(n));
    outcome(
        differing.is_empty() && has("metrics.csv") && has("tensors.bin"),
        if differing.is_empty() {
            format!("{} files identical across two runs", names.len())
        } else {
            format!("differ: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let report = |name: &'static str, o: Outcome, results: &mut Vec<(&str, Outcome)>| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("1 gradient fidelity", gradients(), &mut results);
    report("2 pruning equivalence", prune_equivalence(), &mut results);
    report("3 identity degeneration", identity(), &mut results);
    report("4 selection properties", selection(), &mut results);
    let desk = desk_scale();
    report("5 cycle accounting", cycles(&desk.runs[0]), &mut results);
    report("6 mimi vs vanilla", mimi_vs_vanilla(&desk), &mut results);
    report("7 vanilla monotonicity", monotone(&desk), &mut results);
    report("8 gaussian and kl", gaussian(), &mut results);
    report("9 persistence and accounting", persistence(&tmp.path().join("ckpt")), &mut results);
    report("10 determinism", determinism(tmp.path()), &mut results);
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
