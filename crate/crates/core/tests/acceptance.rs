//! The nine acceptance criteria, each printed as one PASS/FAIL line.
//!
//! Lines go straight to the process stdout so they show up even when the
//! harness captures test output.

use std::io::Write;
use std::time::{Duration, Instant};

use crossfire_core::attack::{ibfa, pbfa, AttackBudget, CandidatePolicy};
use crossfire_core::baselines::NeuropotsConfig;
use crossfire_core::crossfire::{
    build_ledger, encode_honeypots, hash_overhead, induce_sparsity, localize, protect,
    rescale_neuron, verify, CrossfireConfig, CrossfireVault, DigestSizing,
};
use crossfire_core::gnn::{
    backward, forward, loss, synth_dataset, Architecture, GinModel, GraphBatch, LossKind,
    RealModel, Target, TaskSpec,
};
use crossfire_core::harness::{
    prepare, protect_model, reliability_study, sweep, test_quality, DefenseKind, ExperimentConfig,
    ReliabilityConfig, SealedState, SweepGrid, SweepRow,
};
use crossfire_core::quant::flipped;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Cell = (usize, usize, usize);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed <= Duration::from_secs(limit_s), || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

// 1. Digest reliability.
fn reliability() -> Check {
    let t = Instant::now();
    let table = reliability_study(&ReliabilityConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    for d in [2, 3] {
        let (misses, trials) = table.totals(d);
        ensure(misses == 0, || {
            format!("digest {d}: {misses}/{trials} flip sets missed")
        })?;
    }
    let (misses, trials) = table.totals(1);
    let rate = misses as f64 / trials as f64;
    ensure(misses > 0 && rate <= 0.02, || {
        format!("digest 1 miss rate {rate}")
    })?;
    within(elapsed, 300)?;
    Ok(format!(
        "d>=2: 0 misses; d=1: {misses}/{trials} = {:.3}% missed; {:.1}s",
        100.0 * rate,
        elapsed.as_secs_f64()
    ))
}

fn random_model(seed: u64, in_dim: usize, hidden: usize, depth: usize) -> GinModel {
    let arch = Architecture::new(in_dim, hidden, depth, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut real = RealModel::init(arch, &mut rng);
    for b in &mut real.biases {
        b.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    GinModel::quantize(&real, seed).unwrap()
}

// 2. Single-flip localization over random quantized layers.
fn localization() -> Check {
    let t = Instant::now();
    let mut trials = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let hidden = rng.gen_range(4..=48);
        let mut model = random_model(seed, 8, hidden, 3);
        let ledger = build_ledger(&model, DigestSizing::Fixed(2)).unwrap();
        for _ in 0..100 {
            let layer = rng.gen_range(0..model.n_tensors());
            let (rows, cols) = model.weights[layer].dim();
            let (r, c, bit) = (
                rng.gen_range(0..rows),
                rng.gen_range(0..cols),
                rng.gen_range(0..8u8),
            );
            model.flip_bit(layer, r, c, bit).unwrap();
            let suspects = localize(&model, &ledger);
            ensure(suspects.contains((layer, r, c)), || {
                format!("seed {seed}: ({layer},{r},{c}) not flagged")
            })?;
            ensure(!verify(&model, &ledger), || {
                format!("seed {seed}: flip at ({layer},{r},{c}) verified")
            })?;
            model.flip_bit(layer, r, c, bit).unwrap();
            ensure(verify(&model, &ledger), || {
                format!("seed {seed}: reverted model fails verify")
            })?;
            trials += 1;
        }
    }
    within(t.elapsed(), 120)?;
    Ok(format!(
        "{trials} flips localized, detected and cleared; {:.1}s",
        t.elapsed().as_secs_f64()
    ))
}

fn protected_random(seed: u64) -> (GinModel, CrossfireVault) {
    let spec = TaskSpec::default();
    let model = random_model(seed, spec.feature_dim, 16, 2);
    let data = synth_dataset(seed, 64, &spec).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let calib: Vec<GraphBatch> = data
        .batches(&idx, 32)
        .unwrap()
        .into_iter()
        .map(|b| b.unlabeled())
        .collect();
    protect(&model, &calib, &CrossfireConfig::default()).unwrap()
}

#[derive(Clone, Copy, Debug)]
enum Scenario {
    HoneypotOnly,
    SingleMsb,
    PrunedZeros,
}

/// Flips for one scripted scenario; each is `(layer, row, col, bit)`.
fn scripted_flips(
    model: &GinModel,
    vault: &CrossfireVault,
    s: Scenario,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize, usize, u8)> {
    let reg = vault.registry();
    let cells = |pred: &dyn Fn(usize, usize, usize, i8) -> bool| -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (l, t) in model.weights.iter().enumerate() {
            for r in 0..t.rows() {
                for c in 0..t.cols() {
                    if pred(l, r, c, t.get(r, c)) {
                        out.push((l, r, c));
                    }
                }
            }
        }
        out
    };
    match s {
        Scenario::HoneypotOnly => {
            let mut sealed: Vec<_> = reg.sealed_entries().map(|(c, _)| c).collect();
            sealed.shuffle(rng);
            let n = rng.gen_range(1..=5);
            sealed[..n]
                .iter()
                .map(|&(l, r, c)| (l, r, c, rng.gen_range(0..8)))
                .collect()
        }
        Scenario::SingleMsb => {
            let pool = cells(&|l, r, c, v| {
                let b = vault.ledger().layers[l].bounds;
                reg.sealed_value((l, r, c)).is_none() && v >= 0 && !b.contains(flipped(v, 7))
            });
            let &(l, r, c) = pool.choose(rng).expect("an out-of-range target exists");
            vec![(l, r, c, 7)]
        }
        Scenario::PrunedZeros => {
            // One flip per layer keeps each layer's suspect product a single cell.
            // Only layers holding a pruned non-sealed cell and an in-range bit qualify.
            let mut targets: Vec<(Vec<Cell>, Vec<u8>)> = (0..model.n_tensors())
                .map(|l| {
                    let b = vault.ledger().layers[l].bounds;
                    let bits: Vec<u8> = (0..7).filter(|&k| b.contains(flipped(0, k))).collect();
                    let pool = cells(&|ll, r, c, v| {
                        ll == l && v == 0 && reg.sealed_value((l, r, c)).is_none()
                    });
                    (pool, bits)
                })
                .filter(|(pool, bits)| !pool.is_empty() && !bits.is_empty())
                .collect();
            targets.shuffle(rng);
            let n = rng.gen_range(1..=3).min(targets.len());
            let mut out = Vec::new();
            for (pool, bits) in &targets[..n] {
                let &(l, r, c) = pool.choose(rng).unwrap();
                out.push((l, r, c, *bits.choose(rng).unwrap()));
            }
            out
        }
    }
}

// 3. Scripted reconstruction scenarios.
fn scenarios() -> Check {
    let mut summary = Vec::new();
    for (k, s) in [
        Scenario::HoneypotOnly,
        Scenario::SingleMsb,
        Scenario::PrunedZeros,
    ]
    .into_iter()
    .enumerate()
    {
        let mut ok = 0;
        for seed in 0..100u64 {
            let (mut model, vault) = protected_random(seed);
            let pristine = model.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(7 * seed + k as u64);
            let flips = scripted_flips(&model, &vault, s, &mut rng);
            ensure(!flips.is_empty(), || {
                format!("{s:?} seed {seed}: no flip targets")
            })?;
            for &(l, r, c, bit) in &flips {
                model.flip_bit(l, r, c, bit).unwrap();
            }
            let report = vault.reconstruct(&mut model);
            if report.verified && model == pristine {
                ok += 1;
            }
        }
        ensure(ok == 100, || format!("{s:?}: {ok}/100 seeds restored"))?;
        summary.push(format!("{s:?} 100/100"));
    }
    Ok(summary.join(", "))
}

fn tiny_batches(seed: u64) -> (GraphBatch, GraphBatch, Array2<f64>) {
    let spec = TaskSpec {
        feature_dim: 3,
        min_nodes: 4,
        max_nodes: 8,
        ..TaskSpec::default()
    };
    let data = synth_dataset(seed, 12, &spec).unwrap();
    let a = data.batch(&[0, 1, 2, 3, 4, 5]).unwrap();
    let b = data.batch(&[6, 7, 8, 9, 10, 11]).unwrap();
    let labels = a.labels().unwrap().clone();
    (a.unlabeled(), b.unlabeled(), labels)
}

/// Best single `(layer, row, col, bit)` by exhaustive search; ties keep the
/// lexicographically first.
fn brute_force(
    model: &GinModel,
    objective: &dyn Fn(&RealModel) -> f64,
    maximize: bool,
) -> (usize, usize, usize, u8) {
    let mut best: Option<((usize, usize, usize, u8), f64)> = None;
    let mut m = model.clone();
    for l in 0..m.n_tensors() {
        let (rows, cols) = m.weights[l].dim();
        for r in 0..rows {
            for c in 0..cols {
                for bit in 0..8 {
                    m.flip_bit(l, r, c, bit).unwrap();
                    let v = objective(&m.dequantize());
                    m.flip_bit(l, r, c, bit).unwrap();
                    let better = match best {
                        None => true,
                        Some((_, b)) => (maximize && v > b) || (!maximize && v < b),
                    };
                    if better {
                        best = Some(((l, r, c, bit), v));
                    }
                }
            }
        }
    }
    best.unwrap().0
}

// 4. First committed flip equals exhaustive search.
fn attack_oracle() -> Check {
    let budget = AttackBudget::new(1, CandidatePolicy::Exhaustive).unwrap();
    let mut cells = 0;
    for seed in 0..20u64 {
        let model = random_model(seed, 3, 3, 2);
        cells = model.weights.iter().map(|t| t.len()).sum::<usize>();
        ensure(cells <= 64, || format!("{cells} cells"))?;
        let (a, b, labels) = tiny_batches(seed);

        let want = brute_force(
            &model,
            &|m| loss(m, &a, Target::Labels(&labels), LossKind::Bce).unwrap(),
            true,
        );
        let mut m = model.clone();
        let trace = pbfa(&mut m, &a, &labels, budget).map_err(|e| e.to_string())?;
        let f = trace
            .flips
            .first()
            .ok_or_else(|| format!("seed {seed}: PBFA committed nothing"))?;
        ensure((f.layer, f.row, f.col, f.bit) == want, || {
            format!("seed {seed} bce: {f:?} vs {want:?}")
        })?;

        for kind in [LossKind::L1, LossKind::Kl] {
            let want = brute_force(
                &model,
                &|m| loss(m, &a, Target::Batch(&b), kind).unwrap(),
                false,
            );
            let mut m = model.clone();
            let trace = ibfa(&mut m, &a, &b, budget, kind).map_err(|e| e.to_string())?;
            let f = trace
                .flips
                .first()
                .ok_or_else(|| format!("seed {seed}: IBFA committed nothing"))?;
            ensure((f.layer, f.row, f.col, f.bit) == want, || {
                format!("seed {seed} {kind:?}: {f:?} vs {want:?}")
            })?;
        }
    }
    Ok(format!("20/20 seeds, {cells}-cell model, BCE/L1/KL"))
}

// 5. Analytic gradients against central differences.
fn gradients() -> Check {
    let spec = TaskSpec {
        feature_dim: 4,
        ..TaskSpec::default()
    };
    let data = synth_dataset(11, 8, &spec).unwrap();
    let a = data.batch(&[0, 1, 2, 3]).unwrap();
    let b = data.batch(&[4, 5, 6, 7]).unwrap().unlabeled();
    let labels = a.labels().unwrap().clone();
    let a = a.unlabeled();
    let arch = Architecture::new(4, 5, 2, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = RealModel::init(arch, &mut rng);
    for bias in &mut model.biases {
        bias.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    }
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (kind, target) in [
        (LossKind::Bce, Target::Labels(&labels)),
        (LossKind::L1, Target::Batch(&b)),
        (LossKind::Kl, Target::Batch(&b)),
    ] {
        let (_, g) = backward(&model, &a, target, kind).map_err(|e| e.to_string())?;
        let f = |m: &RealModel| loss(m, &a, target, kind).unwrap();
        let mut check = |analytic: f64,
                         plus: &RealModel,
                         minus: &RealModel,
                         what: String|
         -> Result<(), String> {
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            ensure(rel <= 1e-4, || {
                format!("{kind:?} {what}: analytic {analytic} vs fd {fd}")
            })
        };
        for l in 0..model.weights.len() {
            for ((r, c), &gv) in g.weights[l].indexed_iter() {
                let (mut p, mut m) = (model.clone(), model.clone());
                p.weights[l][(r, c)] += h;
                m.weights[l][(r, c)] -= h;
                check(gv, &p, &m, format!("w{l}[{r},{c}]"))?;
            }
            for (i, &gv) in g.biases[l].iter().enumerate() {
                let (mut p, mut m) = (model.clone(), model.clone());
                p.biases[l][i] += h;
                m.biases[l][i] -= h;
                check(gv, &p, &m, format!("b{l}[{i}]"))?;
            }
        }
    }
    Ok(format!(
        "BCE/L1/KL weights and biases, worst relative error {worst:.2e}"
    ))
}

fn max_abs_diff(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

// 6. Encoding identity and the protection quality budget.
fn encoding_and_quality() -> Check {
    let mut worst_identity: f64 = 0.0;
    let mut worst_drop: f64 = f64::NEG_INFINITY;
    for seed in 0..5u64 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let prep = prepare(&cfg, seed).map_err(|e| e.to_string())?;
        let test = prep.data.batch(&prep.test_idx).unwrap();

        let (deployed, sealed) = protect_model(&cfg, &prep).map_err(|e| e.to_string())?;
        let SealedState::Crossfire(vault) = sealed else {
            unreachable!()
        };
        let mut pruned = prep.model.dequantize();
        for w in &mut pruned.weights {
            *w = induce_sparsity(w, cfg.params.prune).unwrap();
        }
        let encoded = encode_honeypots(&pruned, &vault.registry().layers).unwrap();
        let d = max_abs_diff(
            &forward(&pruned, &test).unwrap(),
            &forward(&encoded, &test).unwrap(),
        );
        worst_identity = worst_identity.max(d);

        let np_cfg = ExperimentConfig {
            defense: DefenseKind::Neuropots,
            ..cfg.clone()
        };
        let (_, sealed) = protect_model(&np_cfg, &prep).map_err(|e| e.to_string())?;
        let SealedState::Neuropots(state) = sealed else {
            unreachable!()
        };
        let base = prep.model.dequantize();
        let mut np = base.clone();
        for s in &state.seals {
            rescale_neuron(&mut np, s.tensor, s.neuron, state.gamma).unwrap();
        }
        ensure(
            NeuropotsConfig::default().gamma > 1.0 && state.gamma > 1.0,
            || "no rescaling".into(),
        )?;
        let d = max_abs_diff(
            &forward(&base, &test).unwrap(),
            &forward(&np, &test).unwrap(),
        );
        worst_identity = worst_identity.max(d);

        let drop = test_quality(&cfg, &prep, &prep.model).unwrap()
            - test_quality(&cfg, &prep, &deployed).unwrap();
        worst_drop = worst_drop.max(drop);
    }
    ensure(worst_identity <= 1e-9, || {
        format!("encoding changed outputs by {worst_identity:e}")
    })?;
    ensure(worst_drop <= 0.05, || {
        format!("AUROC dropped by {worst_drop:.4}")
    })?;
    Ok(format!(
        "max output change {worst_identity:.1e}; worst AUROC drop {worst_drop:.4} over 5 seeds"
    ))
}

// 7. Storage overhead.
fn storage() -> Check {
    let (bytes, ratio) = hash_overhead(128, 128, 2);
    let pct = (ratio * 100.0 * 1000.0).round() / 1000.0;
    ensure(bytes == 516 && pct == 3.149, || {
        format!("{bytes} bytes, {pct}%")
    })?;
    let ratios: Vec<f64> = [64, 128, 256, 512, 1024]
        .iter()
        .map(|&n| hash_overhead(n, n, 2).1)
        .collect();
    ensure(ratios.windows(2).all(|w| w[1] < w[0]), || {
        format!("not decreasing: {ratios:?}")
    })?;
    Ok(format!(
        "516 bytes = {pct}% at 128x128, decreasing to {:.3}% at 1024",
        100.0 * ratios[4]
    ))
}

// 8. Reconstruction rates over 30 seeded runs.
fn comparative() -> Check {
    let t = Instant::now();
    let base = ExperimentConfig {
        seed: 100,
        flips: 15,
        repetitions: 30,
        ..ExperimentConfig::default()
    };
    let grid = SweepGrid {
        base,
        defenses: vec![
            DefenseKind::Crossfire,
            DefenseKind::Neuropots,
            DefenseKind::Radar,
        ],
        ..SweepGrid::default()
    };
    let (_, rows) = sweep(&grid).map_err(|e| e.to_string())?;
    let rate = |d: &str| {
        rows.iter()
            .find(|r| r.defense == d)
            .map(|r| r.reconstructed)
            .unwrap()
    };
    let (cf, np, rd) = (rate("crossfire"), rate("neuropots"), rate("radar"));
    ensure(rd == 0.0, || format!("radar reconstructed {rd}"))?;
    ensure(cf > np && cf > rd, || {
        format!("crossfire {cf}, neuropots {np}, radar {rd}")
    })?;
    within(t.elapsed(), 1800)?;
    Ok(format!(
        "reconstruction crossfire {cf:.3}, neuropots {np:.3}, radar {rd:.3}; {:.1}s",
        t.elapsed().as_secs_f64()
    ))
}

// 9. Sweep determinism.
fn determinism() -> Check {
    let mut base = ExperimentConfig {
        seed: 42,
        repetitions: 2,
        ..ExperimentConfig::default()
    };
    base.dataset.n_graphs = 400;
    let grid = SweepGrid {
        base,
        attacks: serde_json::from_str(r#"["pbfa", "ibfa-kl"]"#).unwrap(),
        defenses: vec![
            DefenseKind::Crossfire,
            DefenseKind::Neuropots,
            DefenseKind::Radar,
        ],
        ..SweepGrid::default()
    };
    let run = || SweepRow::to_csv(&sweep(&grid).unwrap().1).unwrap();
    let (first, second) = (run(), run());
    ensure(first == second, || "sweep CSVs differ".into())?;
    Ok(format!(
        "{} rows byte-identical across reruns",
        first.lines().count() - 1
    ))
}

type Criterion = (&'static str, fn() -> Check);

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        ("reliability", reliability),
        ("localization soundness", localization),
        ("scripted reconstruction", scenarios),
        ("attack oracle", attack_oracle),
        ("gradient correctness", gradients),
        ("encoding identity and quality", encoding_and_quality),
        ("storage overhead", storage),
        ("comparative reconstruction", comparative),
        ("determinism", determinism),
    ];
    // ACCEPTANCE_ONLY=3,5 reruns a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    // The harness prints "test acceptance_criteria ... " without a newline.
    std::io::stdout().lock().write_all(b"\n").unwrap();
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let line = match check() {
            Ok(detail) => format!("PASS {} {name}: {detail}\n", i + 1),
            Err(why) => {
                failed.push(i + 1);
                format!("FAIL {} {name}: {why}\n", i + 1)
            }
        };
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
