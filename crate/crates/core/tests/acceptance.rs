//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{batch_balanced, check_network, exhaustive_matching, first_category_case, pair_count_auroc, random_network};
use mucran::ensemble::{consensus_batch, member_predictions, threshold_filter, verdicts_from_predictions};
use mucran::eval::{auroc, confound_auroc, match_pairs, matched_subsample};
use mucran::model::{Architecture, ModelPair, Variant};
use mucran::nn::{AdamConfig, SgdConfig};
use mucran::outputs::{encoder_loss, regressor_loss, ConfoundSpec};
use mucran::par::Execution;
use mucran::scheduler::{BatchSampler, SampleIndex, ScheduleConfig, ScheduleLog};
use mucran::synthdata::{generate, read_dataset, write_dataset, Dataset, GeneratorConfig, SynthConfound};
use mucran::trainer::{load_checkpoint, save_checkpoint, OptimConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADIENT_NETWORKS: u64 = 20;
const GRADIENT_TIME_LIMIT: Duration = Duration::from_secs(60);
const LOSS_CASES: u64 = 100;
const LOSS_TOL: f64 = 1e-9;
const SCHEDULER_BATCHES: usize = 1000;
const AUROC_CASES: u64 = 200;
const AUROC_TOL: f64 = 1e-12;
const MATCH_CASES: u64 = 100;
const MATCH_COST_TOL: f64 = 1e-9;
const CONSENSUS_VERDICTS: usize = 1000;
const ROUND_TRIP_INPUTS: usize = 10;

// shared settings for the trained criteria
const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_N: usize = 4000;
const TEST_N: usize = 1000;
const DIMS: usize = 16;
const ENCODER_LR: f64 = 3e-4;
const REGRESSOR_LR: f64 = 3e-2;

const NEUTRAL_LABEL_EFFECT: f64 = 0.05;
const NEUTRAL_CONFOUND_EFFECT: f64 = 0.02;
const NEUTRAL_BUDGET: usize = 2400;
const NEUTRAL_BAND: (f64, f64) = (0.40, 0.60);
const CONFOUNDED_FLOOR: f64 = 0.85;

const SHIFT_LABEL_EFFECT: f64 = 0.02;
const SHIFT_CONFOUND_EFFECT: f64 = 0.1;
const SHIFT_TRAIN_RHO: f64 = 0.8;
const SHIFT_BUDGET: usize = 9600;
const SHIFT_MARGIN: f64 = 0.05;

const ENSEMBLE_MEMBERS: usize = 10;
const OOD_FRACTION: f64 = 0.3;
const OOD_TEMPLATE_OFFSET: u64 = 9000;
const THRESHOLD_GAIN: f64 = 0.05;
const OOD_EXCLUDED_MIN: f64 = 0.5;

type Check = fn() -> Outcome;

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

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut params = 0;
    let mut failures = 0;
    let mut worst = 0.0f64;
    for seed in 0..GRADIENT_NETWORKS {
        let (mut net, x) = random_network(seed);
        let r = check_network(&mut net, &x, seed);
        params += r.params;
        failures += r.failures;
        worst = worst.max(r.worst_abs);
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < GRADIENT_TIME_LIMIT,
        format!("{GRADIENT_NETWORKS} networks, {params} params, {failures} mismatches, worst abs {worst:.1e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn loss_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..LOSS_CASES {
        let (layout, pred, target) = first_category_case(seed);
        let e = encoder_loss(&pred, &target, &layout).unwrap();
        let r = regressor_loss(&pred, &target, &layout).unwrap();
        worst = worst.max((e - r).abs());
    }
    outcome(worst <= LOSS_TOL, format!("{LOSS_CASES} cases, worst |difference| {worst:.1e}"))
}

fn scheduler_balance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut batches = 0;
    let mut unbalanced = 0;
    let mut uncovered = 0;
    while batches < SCHEDULER_BATCHES {
        let k = rng.random_range(1..=4);
        let n = rng.random_range(30..150);
        let arities: Vec<usize> = (0..k).map(|_| rng.random_range(2..=5)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let confounds: Vec<Vec<Option<usize>>> = (0..n)
            .map(|_| arities.iter().map(|&a| (!rng.random_bool(0.1)).then(|| rng.random_range(0..a))).collect())
            .collect();
        let index = SampleIndex::new(&labels, &confounds, 2, &arities);
        let batch_size = rng.random_range(2..=16);
        let config = ScheduleConfig {
            batch_size,
            chunk_size: batch_size * 4,
            seed: rng.random(),
            ..ScheduleConfig::default()
        };
        let mut sampler = BatchSampler::new(&config, k).unwrap();
        for _ in 0..10 {
            let mut seen = vec![false; k];
            for _ in 0..k {
                let plan = sampler.next_batch(&index).unwrap();
                batches += 1;
                if plan.indices.len() != batch_size || !batch_balanced(&plan, &index) {
                    unbalanced += 1;
                }
                if let Some(c) = plan.balanced_confound {
                    seen[c] = true;
                }
            }
            if !seen.iter().all(|&s| s) {
                uncovered += 1;
            }
        }
    }
    outcome(
        unbalanced == 0 && uncovered == 0,
        format!("{batches} batches, {unbalanced} unbalanced, {uncovered} rotation windows missing a confound"),
    )
}

fn optim() -> OptimConfig {
    OptimConfig {
        encoder: AdamConfig {
            lr: ENCODER_LR,
            ..AdamConfig::default()
        },
        regressor: SgdConfig {
            lr: REGRESSOR_LR,
            momentum: 0.0,
        },
    }
}

fn generator(n: usize, label_effect: f64, confound_effect: f64, rho: f64, seed: u64, template_seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n,
        dims: DIMS,
        label_effect,
        confounds: vec![SynthConfound::new(ConfoundSpec::indexed("site", 2).unwrap(), confound_effect, rho)],
        seed,
        template_seed: Some(template_seed),
        ..GeneratorConfig::default()
    }
}

fn schedule(train: &Dataset, budget: usize, seed: u64) -> ScheduleLog {
    let config = ScheduleConfig {
        budget,
        seed,
        ..ScheduleConfig::default()
    };
    ScheduleLog::plan(&SampleIndex::from_dataset(train), &config).unwrap()
}

fn train_members(variant: Variant, train: &Dataset, log: &ScheduleLog, seeds: &[u64]) -> Vec<ModelPair> {
    let arch = Architecture::with_dims(DIMS);
    let mut states: Vec<TrainState> = seeds
        .iter()
        .map(|&s| TrainState::new(ModelPair::build(variant, &train.layout, &arch, s).unwrap(), optim()))
        .collect();
    Execution::default().for_each_mut(&mut states, |_, st| st.train_on_log(train, log, |_, _| {}).unwrap());
    states.into_iter().map(|s| s.pair).collect()
}

fn label_accuracy(models: &[ModelPair], ds: &Dataset) -> f64 {
    let vols: Vec<&[f32]> = (0..ds.len()).map(|i| ds.volume(i)).collect();
    let verdicts = consensus_batch(models, &vols, 0.5, Execution::default()).unwrap();
    let hits = verdicts.iter().zip(&ds.labels).filter(|(v, &y)| v.class == y).count();
    hits as f64 / ds.len() as f64
}

fn confound_neutrality() -> Outcome {
    let mut violations = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let train = generate(&generator(TRAIN_N, NEUTRAL_LABEL_EFFECT, NEUTRAL_CONFOUND_EFFECT, 0.0, seed * 10 + 1, 100 + seed)).unwrap();
        let test = generate(&generator(TEST_N, NEUTRAL_LABEL_EFFECT, NEUTRAL_CONFOUND_EFFECT, 0.0, seed * 10 + 2, 100 + seed)).unwrap();
        let log = schedule(&train, NEUTRAL_BUDGET, seed);
        let mucran = train_members(Variant::Mucran, &train, &log, &[seed * 100]);
        let confounded = train_members(Variant::Confounded, &train, &log, &[seed * 100]);
        let m = confound_auroc(&mucran, &test, Execution::default()).unwrap()["site"];
        let c = confound_auroc(&confounded, &test, Execution::default()).unwrap()["site"];
        let ok = (NEUTRAL_BAND.0..=NEUTRAL_BAND.1).contains(&m) && c >= CONFOUNDED_FLOOR;
        violations += usize::from(!ok);
        lines.push(format!("seed {seed}: mucran {m:.3} confounded {c:.3}"));
    }
    outcome(violations <= 1, format!("{}; {violations} violations", lines.join(", ")))
}

fn shift_robustness() -> Outcome {
    let mut satisfied = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let train = generate(&generator(TRAIN_N, SHIFT_LABEL_EFFECT, SHIFT_CONFOUND_EFFECT, SHIFT_TRAIN_RHO, seed * 10 + 1, 100 + seed)).unwrap();
        let test = generate(&generator(TEST_N, SHIFT_LABEL_EFFECT, SHIFT_CONFOUND_EFFECT, 0.0, seed * 10 + 2, 100 + seed)).unwrap();
        let log = schedule(&train, SHIFT_BUDGET, seed);
        let m = label_accuracy(&train_members(Variant::Mucran, &train, &log, &[seed * 100]), &test);
        let c = label_accuracy(&train_members(Variant::Confounded, &train, &log, &[seed * 100]), &test);
        satisfied += usize::from(m - c >= SHIFT_MARGIN);
        lines.push(format!("seed {seed}: mucran {m:.3} confounded {c:.3}"));
    }
    outcome(satisfied * 2 > SEEDS.len(), format!("{}; {satisfied}/{} seeds", lines.join(", "), SEEDS.len()))
}

fn uncertainty_thresholding() -> Outcome {
    let mut satisfied = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let effect = (NEUTRAL_LABEL_EFFECT, NEUTRAL_CONFOUND_EFFECT);
        let train = generate(&generator(TRAIN_N, effect.0, effect.1, 0.0, seed * 10 + 1, 100 + seed)).unwrap();
        let ood_n = (TEST_N as f64 * OOD_FRACTION).round() as usize;
        let inside = generate(&generator(TEST_N - ood_n, effect.0, effect.1, 0.0, seed * 10 + 2, 100 + seed)).unwrap();
        let outside = generate(&generator(ood_n, effect.0, effect.1, 0.0, seed * 10 + 3, OOD_TEMPLATE_OFFSET + seed)).unwrap();
        let test = inside.concat(&outside).unwrap();
        let log = schedule(&train, NEUTRAL_BUDGET, seed);
        let member_seeds: Vec<u64> = (0..ENSEMBLE_MEMBERS as u64).map(|m| seed * 100 + m).collect();
        let models = train_members(Variant::Mucran, &train, &log, &member_seeds);

        let vols: Vec<&[f32]> = (0..test.len()).map(|i| test.volume(i)).collect();
        let preds = member_predictions(&models, &vols, Execution::default()).unwrap();
        let verdicts = verdicts_from_predictions(&preds, 0.5).unwrap();
        let acc = |idx: &[usize]| idx.iter().filter(|&&i| verdicts[i].class == test.labels[i]).count() as f64 / idx.len().max(1) as f64;
        let (all, _) = threshold_filter(&verdicts, 0.5).unwrap();
        let (kept, _) = threshold_filter(&verdicts, 0.9).unwrap();
        let ood_kept = kept.iter().filter(|&&i| i >= inside.len()).count();
        let excluded = 1.0 - ood_kept as f64 / ood_n as f64;
        let (a5, a9) = (acc(&all), acc(&kept));
        let ok = !kept.is_empty() && a9 - a5 >= THRESHOLD_GAIN && excluded >= OOD_EXCLUDED_MIN;
        satisfied += usize::from(ok);
        lines.push(format!("seed {seed}: acc {a5:.3} -> {a9:.3} ({} kept), ood excluded {excluded:.2}", kept.len()));
    }
    outcome(satisfied * 2 > SEEDS.len(), format!("{}; {satisfied}/{} seeds", lines.join(", "), SEEDS.len()))
}

fn consensus_bounds() -> Outcome {
    let layout = mucran::outputs::OutputLayout::new(2, vec![ConfoundSpec::indexed("site", 3).unwrap()]).unwrap();
    let arch = Architecture {
        input_dims: [4, 4, 4],
        conv_channels: vec![2],
        feature_width: 6,
        regressor_hidden: 6,
    };
    let models: Vec<ModelPair> = (0..ENSEMBLE_MEMBERS as u64)
        .map(|s| ModelPair::build(Variant::Mucran, &layout, &arch, s).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<Vec<f32>> = (0..CONSENSUS_VERDICTS)
        .map(|_| {
            let scale = rng.random_range(0.1..20.0f32);
            (0..64).map(|_| rng.random_range(-scale..scale)).collect()
        })
        .collect();
    let vols: Vec<&[f32]> = data.iter().map(Vec::as_slice).collect();
    let verdicts = consensus_batch(&models, &vols, 0.5, Execution::default()).unwrap();
    let out_of_range = verdicts.iter().filter(|v| !(0.5..=1.0).contains(&v.confidence)).count();
    let (included, excluded) = threshold_filter(&verdicts, 0.5).unwrap();
    let (lo, hi) = verdicts.iter().fold((1.0f64, 0.0f64), |(lo, hi), v| (lo.min(v.confidence), hi.max(v.confidence)));
    outcome(
        verdicts.len() == CONSENSUS_VERDICTS && out_of_range == 0 && included.len() == CONSENSUS_VERDICTS && excluded.is_empty(),
        format!("{} verdicts, confidence in [{lo:.3}, {hi:.3}], {} included at 0.5", verdicts.len(), included.len()),
    )
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = generator(40, 0.5, 0.3, 0.4, 11, 11);
    cfg.dims = 8;
    cfg.confounds[0].missing_rate = 0.2;
    let ds = generate(&cfg).unwrap();
    let first = dir.path().join("a.mucr");
    let second = dir.path().join("b.mucr");
    write_dataset(&ds, &first).unwrap();
    let back = read_dataset(&first).unwrap();
    write_dataset(&back, &second).unwrap();
    let dataset_ok = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap() && back == ds;

    let arch = Architecture::with_dims(8);
    let log = schedule(&ds, 24, 1);
    let mut st = TrainState::new(ModelPair::build(Variant::Mucran, &ds.layout, &arch, 5).unwrap(), optim());
    st.train_on_log(&ds, &log, |_, _| {}).unwrap();
    let first = dir.path().join("a.mckp");
    let second = dir.path().join("b.mckp");
    save_checkpoint(&st, &first).unwrap();
    let loaded = load_checkpoint(&first).unwrap();
    save_checkpoint(&loaded, &second).unwrap();
    let checkpoint_ok = std::fs::read(&first).unwrap() == std::fs::read(&second).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatched = 0;
    for _ in 0..ROUND_TRIP_INPUTS {
        let v: Vec<f32> = (0..ds.volume_len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = st.pair.predict(&v).unwrap();
        let b = loaded.pair.predict(&v).unwrap();
        let same = a.rows.iter().flatten().zip(b.rows.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits());
        mismatched += usize::from(!same);
    }
    outcome(
        dataset_ok && checkpoint_ok && mismatched == 0,
        format!("dataset bytes equal {dataset_ok}, checkpoint bytes equal {checkpoint_ok}, {mismatched}/{ROUND_TRIP_INPUTS} predictions differ"),
    )
}

fn auroc_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..AUROC_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=25);
        let levels = rng.random_range(2..=8);
        let mut s: Vec<(f64, bool)> = (0..n).map(|_| (rng.random_range(0..levels) as f64 * 0.37, rng.random_bool(0.5))).collect();
        s[0].1 = true;
        s[1].1 = false;
        worst = worst.max((auroc(&s).unwrap() - pair_count_auroc(&s)).abs());
    }
    outcome(worst <= AUROC_TOL, format!("{AUROC_CASES} score sets, worst |difference| {worst:.1e}"))
}

fn matched_sampling() -> Outcome {
    let mut disagreements = 0;
    let mut violations = 0;
    for seed in 0..MATCH_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = rng.random_range(2..=10);
        let n_cases = rng.random_range(1..total);
        let tol = rng.random_range(0.0..3.0);
        let values: Vec<f64> = (0..total).map(|_| rng.random_range(0..12) as f64 * 0.5).collect();
        let cases: Vec<(usize, f64)> = values[..n_cases].iter().copied().enumerate().collect();
        let controls: Vec<(usize, f64)> = values[n_cases..].iter().copied().enumerate().collect();
        let pairs = match_pairs(&cases, &controls, tol);
        let mut used_cases: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut used_controls: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        used_cases.sort_unstable();
        used_cases.dedup();
        used_controls.sort_unstable();
        used_controls.dedup();
        let within = pairs.iter().all(|&(a, b)| (cases[a].1 - controls[b].1).abs() <= tol);
        if used_cases.len() != pairs.len() || used_controls.len() != pairs.len() || !within {
            violations += 1;
        }
        let cost: f64 = pairs.iter().map(|&(a, b)| (cases[a].1 - controls[b].1).abs()).sum();
        let case_values: Vec<f64> = cases.iter().map(|c| c.1).collect();
        let control_values: Vec<f64> = controls.iter().map(|c| c.1).collect();
        let (count, best) = exhaustive_matching(&case_values, &control_values, tol);
        if count != pairs.len() || (cost - best).abs() > MATCH_COST_TOL {
            disagreements += 1;
        }
    }
    // matched subsamples drawn from datasets are balanced as well
    let mut unequal = 0;
    for seed in 0..10 {
        let mut cfg = generator(60, 0.1, 0.1, 0.5, seed, seed);
        cfg.dims = 2;
        cfg.confounds = vec![SynthConfound::new(ConfoundSpec::binned("age", vec![50.0, 60.0, 70.0, 80.0, 90.0]).unwrap(), 0.1, 0.5)];
        let ds = generate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = matched_subsample(&ds, "age", None, 10.0, &mut rng).unwrap();
        let idx = m.indices();
        let cases = idx.iter().filter(|&&i| ds.labels[i] == 1).count();
        if cases * 2 != idx.len() {
            unequal += 1;
        }
    }
    outcome(
        disagreements == 0 && violations == 0 && unequal == 0,
        format!("{MATCH_CASES} instances, {disagreements} disagree with exhaustive search, {violations} invalid pairings, {unequal} unequal dataset groups"),
    )
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("gradient suite", gradients),
        ("loss identity", loss_identity),
        ("scheduler balance", scheduler_balance),
        ("confound neutrality", confound_neutrality),
        ("shift robustness", shift_robustness),
        ("uncertainty thresholding", uncertainty_thresholding),
        ("consensus bounds", consensus_bounds),
        ("round trips", round_trips),
        ("auroc oracle", auroc_oracle),
        ("matched sampling", matched_sampling),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let r = check();
        failed += usize::from(!r.passed);
        println!(
            "criterion {n:>2} {}: {name}: {} ({:.1}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
