//! Independent oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use mucran::nn::{LayerSpec, Network, Tensor};
use mucran::scheduler::{BatchPlan, SampleIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_TOL: f64 = 1e-6;
pub const MAX_GRAD_PARAMS: usize = 500;

/// A small random f64 network (optionally convolutional, optionally ending in
/// softmax rows) with at most `MAX_GRAD_PARAMS` parameters, and a random input.
pub fn random_network(seed: u64) -> (Network<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut specs = Vec::new();
        let batch = rng.random_range(1..=3);
        let (input_shape, mut width) = if rng.random_bool(0.5) {
            let d = [rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4)];
            let mut channels = 1;
            let mut dims = d;
            for _ in 0..rng.random_range(1..=2) {
                let out = rng.random_range(1..=2);
                specs.push(LayerSpec::ConvStrided {
                    in_channels: channels,
                    out_channels: out,
                    in_dims: dims,
                });
                specs.push(LayerSpec::SmoothLeaky);
                dims = dims.map(|x| (x - 1) / 2 + 1);
                channels = out;
            }
            (vec![1, d[0], d[1], d[2]], channels * dims.iter().product::<usize>())
        } else {
            let w = rng.random_range(2..=8);
            (vec![w], w)
        };
        for _ in 0..rng.random_range(1..=2) {
            let out = rng.random_range(2..=8);
            specs.push(LayerSpec::Dense { inputs: width, outputs: out });
            specs.push(LayerSpec::SmoothLeaky);
            width = out;
        }
        let arities: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=3)).collect();
        let total: usize = arities.iter().sum();
        specs.push(LayerSpec::Dense { inputs: width, outputs: total });
        if rng.random_bool(0.7) {
            specs.push(LayerSpec::SoftmaxRows { arities });
        }
        let net = Network::<f64>::from_specs(input_shape.clone(), specs, &mut rng).expect("valid specs");
        if net.param_count() > MAX_GRAD_PARAMS {
            continue;
        }
        // random nonzero biases so every term is exercised
        let mut net = net;
        for layer in net.layers_mut() {
            for p in layer.params_mut() {
                if p.shape().len() == 1 {
                    p.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
                }
            }
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&input_shape);
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        return (net, x);
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub params: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Gradient agreement with the given tolerance: absolute or relative.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= GRAD_ABS_TOL || diff <= GRAD_REL_TOL * analytic.abs().max(numeric.abs())
}

fn scalar_loss(net: &Network<f64>, x: &Tensor<f64>, weights: &[f64]) -> f64 {
    let y = net.infer(x).unwrap();
    y.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// Compares backward() against central differences of `sum(w * output)` for a
/// random weighting `w`, on every parameter.
pub fn check_network(net: &mut Network<f64>, x: &Tensor<f64>, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let y = net.forward(x).unwrap();
    let weights: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    net.zero_grads();
    net.backward(&Tensor::new(y.shape().to_vec(), weights.clone()).unwrap())
        .unwrap();
    let analytic: Vec<Vec<f64>> = net.grads().map(|g| g.data().to_vec()).collect();

    let mut report = GradCheck::default();
    let n_layers = net.layers().len();
    let mut tensor_index = 0;
    for l in 0..n_layers {
        let count = net.layers()[l].params().len();
        for p in 0..count {
            let len = net.layers()[l].params()[p].len();
            for i in 0..len {
                let orig = net.layers()[l].params()[p].data()[i];
                net.layers_mut()[l].params_mut()[p].data_mut()[i] = orig + GRAD_STEP;
                let up = scalar_loss(net, x, &weights);
                net.layers_mut()[l].params_mut()[p].data_mut()[i] = orig - GRAD_STEP;
                let down = scalar_loss(net, x, &weights);
                net.layers_mut()[l].params_mut()[p].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * GRAD_STEP);
                let a = analytic[tensor_index][i];
                let diff = (a - numeric).abs();
                report.params += 1;
                report.worst_abs = report.worst_abs.max(diff);
                if diff > GRAD_ABS_TOL {
                    report.worst_rel = report.worst_rel.max(diff / a.abs().max(numeric.abs()));
                }
                if !grad_close(a, numeric) {
                    report.failures += 1;
                }
            }
            tensor_index += 1;
        }
    }
    report
}

/// AUROC by counting ordered pairs, ties worth one half.
pub fn pair_count_auroc(scores: &[(f64, bool)]) -> f64 {
    let mut wins = 0.0;
    let mut total = 0.0;
    for &(sp, p) in scores {
        if !p {
            continue;
        }
        for &(sn, n) in scores {
            if n {
                continue;
            }
            total += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / total
}

/// Best `(pair count, total |difference|)` over every within-tolerance
/// matching, by exhaustive search.
pub fn exhaustive_matching(cases: &[f64], controls: &[f64], tol: f64) -> (usize, f64) {
    fn go(i: usize, cases: &[f64], controls: &[f64], used: &mut Vec<bool>, tol: f64) -> (usize, f64) {
        if i == cases.len() {
            return (0, 0.0);
        }
        let mut best = go(i + 1, cases, controls, used, tol);
        for j in 0..controls.len() {
            let d = (cases[i] - controls[j]).abs();
            if used[j] || d > tol {
                continue;
            }
            used[j] = true;
            let (c, cost) = go(i + 1, cases, controls, used, tol);
            used[j] = false;
            let cand = (c + 1, cost + d);
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1 - 1e-12) {
                best = cand;
            }
        }
        best
    }
    go(0, cases, controls, &mut vec![false; controls.len()], tol)
}

/// Largest minus smallest count over the categories present in `pools`.
pub fn count_spread(indices: &[usize], pools: &[Vec<usize>]) -> usize {
    let live: Vec<&Vec<usize>> = pools.iter().filter(|p| !p.is_empty()).collect();
    let counts: Vec<usize> = live
        .iter()
        .map(|pool| indices.iter().filter(|i| pool.contains(i)).count())
        .collect();
    counts.iter().max().unwrap() - counts.iter().min().unwrap()
}

/// Both halves of a batch balanced to within one sample.
pub fn batch_balanced(plan: &BatchPlan, index: &SampleIndex) -> bool {
    let label_ok = count_spread(&plan.label_half, index.label_pools()) <= 1;
    let confound_ok = match plan.balanced_confound {
        Some(k) => count_spread(&plan.confound_half, index.confound_pools(k)) <= 1,
        None => count_spread(&plan.confound_half, index.label_pools()) <= 1,
    };
    label_ok && confound_ok
}

/// A random layout, a random prediction (valid softmax rows) and a target
/// whose present confounds are all in the first category.
pub fn first_category_case(seed: u64) -> (mucran::outputs::OutputLayout, mucran::outputs::OutputArray, mucran::outputs::OutputArray) {
    use mucran::outputs::{encode_categories, ConfoundSpec, OutputLayout};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label_arity = rng.random_range(2..=4);
    let k = rng.random_range(0..=4);
    let specs: Vec<ConfoundSpec> = (0..k)
        .map(|i| ConfoundSpec::indexed(format!("c{i}"), rng.random_range(2..=6)).unwrap())
        .collect();
    let weight = rng.random_range(0.5..8.0);
    let layout = OutputLayout::with_weight(label_arity, specs, weight).unwrap();
    let cats: Vec<Option<usize>> = (0..k).map(|_| if rng.random_bool(0.2) { None } else { Some(0) }).collect();
    let target = encode_categories(rng.random_range(0..label_arity), &cats, &layout).unwrap();
    let pred = random_prediction(&layout, &mut rng);
    (layout, pred, target)
}

pub fn random_prediction<R: Rng>(layout: &mucran::outputs::OutputLayout, rng: &mut R) -> mucran::outputs::OutputArray {
    let rows: Vec<Vec<f64>> = layout
        .row_arities()
        .into_iter()
        .map(|n| {
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0f64).exp()).collect();
            let s: f64 = z.iter().sum();
            z.into_iter().map(|v| v / s).collect()
        })
        .collect();
    mucran::outputs::OutputArray {
        missing: vec![false; rows.len()],
        rows,
    }
}
