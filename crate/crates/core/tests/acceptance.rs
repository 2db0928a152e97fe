//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 9`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use dpe::acquisition::{
    entropy, h_cat, h_ens, mutual_information, Acquisition, ClassWeights, PredictionSet,
};
use dpe::active::{
    run_active, ActiveConfig, ActiveTask, GrowthSchedule, Pool, RoundFit, TableAnnotator,
};
use dpe::data::pnm::{encode_pnm, parse_pnm};
use dpe::data::{load_cifar_binary, load_idx, load_seg_pairs, synth_blobs, BlobSpec, Dataset};
use dpe::ensemble::{decode_checkpoint, encode_checkpoint, member_seed, train, Dpe, Regularizer, TrainConfig, MAGIC};
use dpe::kl::{layer_penalty, omega_grad, param_penalty, param_penalty_partials, ParamRole, ParameterGroup, Prior};
use dpe::nn::{he_initialize, mlp, LayerSpec, Mode, Network};
use dpe::report::{compare, prepare_data, run_seed, ExperimentConfig, RunRecord};
use dpe::seed;
use dpe::seg::{make_grid, pixel_scores, score_crop, SegDpe, SegModelConfig};
use dpe::{Error, Tensor};

type Check = fn() -> Result<String, String>;

const CRITERIA: [(usize, &str, Check); 10] = [
    (1, "kl penalty closed forms and gradient", kl_penalty),
    (2, "penalty minimum at the prior", minimum_at_prior),
    (3, "sum and mean entropy forms rank-identical", rank_equivalence),
    (4, "zero beta decouples members bitwise", zero_beta_decoupling),
    (5, "layer gradients match finite differences", gradient_integrity),
    (6, "h_ens beats random on blobs", active_benefit),
    (7, "kl ensemble not worse than l2 ensemble", dpe_vs_l2),
    (8, "class-weighted variance finds the rare class", segmentation_targeting),
    (9, "crop additivity and pool invariants", crops_and_pool),
    (10, "file formats round-trip and reject corruption", formats),
];

fn main() {
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= limit, || format!("{what} took {took:?}, limit {limit:?}"))
}

fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

fn scalars(values: &[f64]) -> Vec<Tensor> {
    values.iter().map(|&v| Tensor::new(vec![1], vec![v]).unwrap()).collect()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).unwrap()
}

fn run_all(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, String> {
    cfg.seeds
        .iter()
        .map(|&s| run_seed(cfg, s, None).map(|(r, _)| r).map_err(|e| e.to_string()))
        .collect()
}

// ---------------------------------------------------------------- 1

fn kl_penalty() -> Result<String, String> {
    let start = Instant::now();
    let conv = Prior::conv(1, 1, 1);
    let cases: [(&[f64], Prior, ParamRole, f64, f64); 3] = [
        (&[1.0, -1.0, 1.0, -1.0], conv, ParamRole::ConvWeight, 2.0, 1e-12),
        (&[2.0, 0.0, 2.0, 0.0], conv, ParamRole::ConvWeight, 3.0, 1e-12),
        (&[1.0, 1.0, 1.2, 0.8], Prior::bn_weight(), ParamRole::BnWeight, -3.4120, 1e-4),
    ];
    for (values, prior, role, expected, tol) in cases {
        let t = scalars(values);
        let group = ParameterGroup::new("g", role, prior, t.iter().collect()).unwrap();
        let got = layer_penalty(&group).unwrap();
        ensure((got - expected).abs() <= tol, || format!("penalty of {values:?}: {got}, expected {expected}"))?;
    }

    const STEP: f64 = 1e-5;
    const REL: f64 = 1e-4;
    let mut rng = seed::rng(101);
    let mut checked = 0;
    let roles = [ParamRole::ConvWeight, ParamRole::LinearWeight, ParamRole::BnWeight, ParamRole::BnBias];
    for role in roles {
        for _ in 0..100 {
            let prior = match role {
                ParamRole::ConvWeight => {
                    let k = [1, 3, 5][rng.gen_range(0..3)];
                    Prior::conv(rng.gen_range(1..=16), k, k)
                }
                ParamRole::LinearWeight => Prior::linear(rng.gen_range(1..=32)),
                ParamRole::BnWeight => Prior::bn_weight(),
                ParamRole::BnBias => Prior::bn_bias(),
            };
            let e = rng.gen_range(2..=8);
            let len = rng.gen_range(1..=6);
            let members = well_spread_members(e, len, prior, &mut rng);
            let group = ParameterGroup::new("g", role, prior, members.iter().collect()).unwrap();
            let grad = omega_grad(std::slice::from_ref(&group)).unwrap().remove(0);
            for m in 0..e {
                for i in 0..len {
                    let penalty_at = |delta: f64| {
                        let mut moved = members.clone();
                        moved[m].data_mut()[i] += delta;
                        let g = ParameterGroup::new("g", role, prior, moved.iter().collect()).unwrap();
                        layer_penalty(&g).unwrap()
                    };
                    let numeric = (penalty_at(STEP) - penalty_at(-STEP)) / (2.0 * STEP);
                    let analytic = grad[m].data()[i];
                    ensure(rel_close(analytic, numeric, REL, 1e-9), || {
                        format!("{role:?} member {m} entry {i}: analytic {analytic}, numeric {numeric}")
                    })?;
                    checked += 1;
                }
            }
        }
    }
    within(start, Duration::from_secs(10), "criterion")?;
    Ok(format!("3 closed forms, {checked} gradient entries over 400 groups"))
}

/// Members drawn around the prior with a cross-member variance well above
/// the floor, so central differences stay in the smooth regime.
fn well_spread_members(e: usize, len: usize, prior: Prior, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let sd = prior.var.sqrt() * rng.gen_range(0.5..2.0);
    let noise = Normal::new(0.0, sd).unwrap();
    loop {
        let members: Vec<Tensor> = (0..e)
            .map(|_| {
                let data = (0..len).map(|_| prior.mu + noise.sample(rng)).collect();
                Tensor::new(vec![len], data).unwrap()
            })
            .collect();
        let spread_ok = (0..len).all(|i| {
            let xs: Vec<f64> = members.iter().map(|t| t.data()[i]).collect();
            let mean = xs.iter().sum::<f64>() / e as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e as f64;
            var >= 0.05 * prior.var
        });
        if spread_ok {
            return members;
        }
    }
}

// ---------------------------------------------------------------- 2

fn minimum_at_prior() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = seed::rng(202);
    let mut worst: f64 = 0.0;
    for run in 0..50 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let n_o = rng.gen_range(1..=64);
        let prior = Prior::conv(n_o, k, k);
        let var_p = 2.0 / (n_o * k * k) as f64;
        let mut mu: f64 = rng.gen_range(-3.0..3.0);
        let mut t: f64 = rng.gen_range(-7.0f64..2.5);
        // gradient descent with backtracking in (mu, ln var)
        let f = |mu: f64, t: f64| param_penalty(mu, t.exp(), prior);
        let grad = |mu: f64, t: f64| {
            let (d_mu, d_var) = param_penalty_partials(mu, t.exp(), prior);
            (d_mu, d_var * t.exp())
        };
        let mut step = 1.0;
        for _ in 0..200_000 {
            let (g_mu, g_t) = grad(mu, t);
            let g2 = g_mu * g_mu + g_t * g_t;
            if g2 < 1e-26 {
                break;
            }
            let f0 = f(mu, t);
            step *= 2.0;
            loop {
                let (m1, t1) = (mu - step * g_mu, t - step * g_t);
                if f(m1, t1) <= f0 - 0.5 * step * g2 || step < 1e-300 {
                    mu = m1;
                    t = t1;
                    break;
                }
                step *= 0.5;
            }
        }
        let var = t.exp();
        let value = f(mu, t);
        let err = mu.abs().max((var - var_p).abs()).max((value - (var_p.ln() + 1.0)).abs());
        worst = worst.max(err);
        ensure(err <= 1e-6, || {
            format!("start {run}: converged to mu={mu:e} var={var:e} value={value} (prior var {var_p:e})")
        })?;
    }
    within(start, Duration::from_secs(10), "criterion")?;
    Ok(format!("50 starts, worst deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn rank_equivalence() -> Result<String, String> {
    const E: usize = 8;
    const K: usize = 10;
    let mut rng = seed::rng(303);
    let sets: Vec<PredictionSet> = (0..1000)
        .map(|_| {
            let sharp = rng.gen_range(0.2..5.0);
            let probs: Vec<f64> = (0..E)
                .flat_map(|_| {
                    let raw: Vec<f64> = (0..K).map(|_| rng.gen::<f64>().powf(sharp)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(move |v| v / s)
                })
                .collect();
            PredictionSet::from_flat(E, K, probs).unwrap()
        })
        .collect();
    // sum forms: entropy of the unnormalized member sum, and that minus
    // the summed member entropies
    let sum_entropy = |ps: &PredictionSet| {
        let s: Vec<f64> = (0..K).map(|k| ps.members().map(|m| m[k]).sum()).collect();
        -s.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
    };
    let sum_mi = |ps: &PredictionSet| sum_entropy(ps) - ps.members().map(entropy).sum::<f64>();
    let mean_mi = |ps: &PredictionSet| h_ens(ps) - h_cat(ps);

    let h_sum: Vec<f64> = sets.iter().map(sum_entropy).collect();
    let h_mean: Vec<f64> = sets.iter().map(h_ens).collect();
    let mi_sum: Vec<f64> = sets.iter().map(sum_mi).collect();
    let mi_mean: Vec<f64> = sets.iter().map(mean_mi).collect();
    let mi_lib: Vec<f64> = sets.iter().map(mutual_information).collect();

    let tau_h = kendall_tau(&h_sum, &h_mean);
    let tau_mi = kendall_tau(&mi_sum, &mi_mean);
    let tau_lib = kendall_tau(&mi_sum, &mi_lib);
    ensure(tau_h == 1.0, || format!("H_ens tau {tau_h}"))?;
    ensure(tau_mi == 1.0, || format!("MI tau {tau_mi}"))?;
    ensure(tau_lib == 1.0, || format!("library MI tau {tau_lib}"))?;
    let affine = h_sum
        .iter()
        .zip(&h_mean)
        .map(|(s, m)| (s - (E as f64 * m - E as f64 * (E as f64).ln())).abs())
        .fold(0.0, f64::max);
    ensure(affine <= 1e-9, || format!("affine identity off by {affine:e}"))?;
    Ok(format!("tau(H_ens) = {tau_h}, tau(MI) = {tau_mi} over 1000 sets"))
}

fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let (mut concordant, mut discordant) = (0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let s = (a[i] - a[j]).signum() * (b[i] - b[j]).signum();
            if s > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    (concordant - discordant) as f64 / (concordant + discordant) as f64
}

// ---------------------------------------------------------------- 4

fn zero_beta_decoupling() -> Result<String, String> {
    let spec = BlobSpec::new(3, 200, 5);
    let data = synth_blobs(&spec, 404).unwrap();
    let layers = mlp(5, &[8], 3);
    let cfg = TrainConfig {
        max_epochs: 5,
        early_stopping: false,
        seed: 17,
        ..TrainConfig::default()
    };
    let empty = data.subset(&[]);
    let ensemble = 4;
    let mut joint = Dpe::new(layers.clone(), ensemble, Regularizer::Kl { beta: 0.0 }, 44).unwrap();
    train(&mut joint, &data, &empty, &cfg).map_err(|e| e.to_string())?;
    for e in 0..ensemble {
        let net = he_initialize(Network::new(layers.clone()).unwrap(), member_seed(44, e));
        let mut solo = Dpe::from_members(vec![net], Regularizer::None).unwrap();
        train(&mut solo, &data, &empty, &cfg).map_err(|e| e.to_string())?;
        let (a, b) = (&solo.members()[0], &joint.members()[e]);
        let same_params = a
            .params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        ensure(same_params, || format!("member {e}: parameters differ from its independent run"))?;
        ensure(a.running_stats() == b.running_stats(), || format!("member {e}: running statistics differ"))?;
    }
    Ok(format!("{ensemble} members bitwise equal to independent runs after 5 epochs"))
}

// ---------------------------------------------------------------- 5

fn gradient_integrity() -> Result<String, String> {
    const TRIALS: usize = 200;
    let mut rng = seed::rng(505);
    let mut failures = Vec::new();
    let mut coordinates = 0;
    for trial in 0..TRIALS {
        let (kind, layers, shape) = random_config(trial % 9, &mut rng);
        let mut net = Network::new(layers).unwrap();
        for p in net.params_mut() {
            *p = random_tensor(p.shape(), &mut rng);
        }
        let x = random_tensor(&shape, &mut rng);
        let mode = if rng.gen_bool(0.5) { Mode::Train } else { Mode::Eval };
        match finite_difference_check(&mut net, &x, mode, &mut rng) {
            Ok(0) => failures.push(format!("trial {trial} ({kind}): no smooth coordinate checked")),
            Ok(n) => coordinates += n,
            Err(msg) => failures.push(format!("trial {trial} ({kind}, {mode:?}): {msg}")),
        }
    }
    ensure(failures.is_empty(), || format!("{} failures, first: {}", failures.len(), failures[0]))?;
    Ok(format!("{TRIALS} trials, 0 failures, {coordinates} coordinates"))
}

fn random_config(kind: usize, rng: &mut ChaCha8Rng) -> (&'static str, Vec<LayerSpec>, Vec<usize>) {
    let n = rng.gen_range(2..=3);
    match kind {
        0 => {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (kw, kh) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let stride = rng.gen_range(1..=2);
            let padding = rng.gen_range(0..=1);
            let layer = LayerSpec::Conv2d { in_channels: ci, out_channels: co, kernel: (kw, kh), stride, padding };
            ("conv2d", vec![layer], vec![n, ci, rng.gen_range(3..=6), rng.gen_range(3..=6)])
        }
        1 => {
            if rng.gen_bool(0.5) {
                let (i, o) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
                ("linear", vec![LayerSpec::linear(i, o)], vec![n, i])
            } else {
                let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=3), rng.gen_range(2..=3));
                ("linear", vec![LayerSpec::linear(c * h * w, rng.gen_range(1..=4))], vec![n, c, h, w])
            }
        }
        2 => ("relu", vec![LayerSpec::Relu], vec![n, rng.gen_range(2..=6)]),
        3 | 4 => {
            let kernel = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let stride = rng.gen_range(1..=2);
            let shape = vec![n, rng.gen_range(1..=2), rng.gen_range(3..=6), rng.gen_range(3..=6)];
            if kind == 3 {
                ("maxpool2d", vec![LayerSpec::MaxPool2d { kernel, stride }], shape)
            } else {
                ("avgpool2d", vec![LayerSpec::AvgPool2d { kernel, stride }], shape)
            }
        }
        5 => {
            let c = rng.gen_range(1..=3);
            let shape = if rng.gen_bool(0.5) {
                vec![rng.gen_range(2..=5), c]
            } else {
                vec![n, c, rng.gen_range(2..=4), rng.gen_range(2..=4)]
            };
            ("batchnorm", vec![LayerSpec::BatchNorm { channels: c }], shape)
        }
        6 => {
            let (i, k) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
            ("softmax", vec![LayerSpec::linear(i, k), LayerSpec::Softmax], vec![n, i])
        }
        7 => {
            let c = rng.gen_range(1..=3);
            let body = vec![LayerSpec::conv(c, c, 3, 1, 1), LayerSpec::BatchNorm { channels: c }, LayerSpec::Relu];
            ("residual", vec![LayerSpec::Residual(body)], vec![n, c, rng.gen_range(3..=5), rng.gen_range(3..=5)])
        }
        _ => {
            let (ci, c) = (rng.gen_range(1..=2), rng.gen_range(2..=3));
            let layers = vec![
                LayerSpec::conv(ci, c, 3, 1, 1),
                LayerSpec::BatchNorm { channels: c },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: (2, 2), stride: 2 },
                LayerSpec::linear(c * 4, 3),
                LayerSpec::Softmax,
            ];
            ("stack", layers, vec![n, ci, 4, 4])
        }
    }
}

/// Central differences of `sum(r * net(x))` against backprop for every
/// parameter and input entry. Entries whose perturbation changes a ReLU
/// sign or max-pool winner are skipped. Returns the number checked.
fn finite_difference_check(net: &mut Network, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<usize, String> {
    const STEP: f64 = 1e-5;
    const REL: f64 = 1e-3;
    let out = net.forward(x, mode).map_err(|e| e.to_string())?;
    let fingerprint = net.activation_fingerprint();
    let r = random_tensor(out.shape(), rng);
    let grads = net.backward(&r).map_err(|e| e.to_string())?;
    let objective = |net: &mut Network, x: &Tensor| {
        let y = net.forward(x, mode).unwrap();
        let v: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        (v, net.activation_fingerprint())
    };
    let mut checked = 0;
    for p in 0..net.params().len() {
        for i in 0..net.params()[p].len() {
            let orig = net.params()[p].data()[i];
            net.params_mut()[p].data_mut()[i] = orig + STEP;
            let (up, fu) = objective(net, x);
            net.params_mut()[p].data_mut()[i] = orig - STEP;
            let (down, fd) = objective(net, x);
            net.params_mut()[p].data_mut()[i] = orig;
            if fu != fingerprint || fd != fingerprint {
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.params[p].data()[i];
            if !rel_close(analytic, numeric, REL, 1e-7) {
                return Err(format!("param {p}[{i}]: analytic {analytic}, numeric {numeric}"));
            }
            checked += 1;
        }
    }
    let mut moved = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        moved.data_mut()[i] = orig + STEP;
        let (up, fu) = objective(net, &moved);
        moved.data_mut()[i] = orig - STEP;
        let (down, fd) = objective(net, &moved);
        moved.data_mut()[i] = orig;
        if fu != fingerprint || fd != fingerprint {
            continue;
        }
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads.input.data()[i];
        if !rel_close(analytic, numeric, REL, 1e-7) {
            return Err(format!("input[{i}]: analytic {analytic}, numeric {numeric}"));
        }
        checked += 1;
    }
    Ok(checked)
}

// ---------------------------------------------------------------- 6, 7

fn paired_final(a: &[RunRecord], b: &[RunRecord]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.final_metric().unwrap() - y.final_metric().unwrap()).collect()
}

fn metric_at(r: &RunRecord, count: usize) -> f64 {
    r.rounds.iter().find(|x| x.labeled_count == count).expect("round with that count").val_metric
}

fn active_benefit() -> Result<String, String> {
    let start = Instant::now();
    let mut cfg = load_config("blobs.json");
    ensure(cfg.seeds.len() >= 10, || "fewer than 10 seeds".into())?;
    cfg.acquisition = "random".into();
    let random = run_all(&cfg)?;
    cfg.acquisition = "h_ens".into();
    let hens = run_all(&cfg)?;
    within(start, Duration::from_secs(15 * 60), "criterion")?;

    let (pool, _) = prepare_data(&cfg, cfg.seeds[0]).map_err(|e| e.to_string())?;
    ensure(pool.len() == 2000 && pool.classes == 4, || format!("pool {} / {} classes", pool.len(), pool.classes))?;
    let cmp = compare(&hens, &random).map_err(|e| e.to_string())?;
    let paired = cmp.paired.ok_or("paired test declined")?;
    let diffs = paired_final(&hens, &random);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let widening = hens
        .iter()
        .zip(&random)
        .filter(|(h, r)| h.final_metric().unwrap() - r.final_metric().unwrap() >= metric_at(h, 80) - metric_at(r, 80))
        .count();
    let detail = format!(
        "mean gap {mean:+.4} over {} seeds, paired z {:.2} p {:.2e}, gap widened 80->320 in {widening}/{}",
        diffs.len(),
        paired.z,
        paired.p,
        diffs.len()
    );
    ensure(mean > 0.0 && paired.z > 0.0 && paired.p < 0.05, || detail.clone())?;
    ensure(widening * 10 >= 7 * diffs.len(), || detail.clone())?;
    Ok(detail)
}

fn dpe_vs_l2() -> Result<String, String> {
    let mut cfg = load_config("blobs.json");
    cfg.acquisition = "h_ens".into();
    let model = cfg.model.as_mut().unwrap();
    ensure(model.regularizer == Regularizer::Kl { beta: 1e-5 }, || format!("{:?}", model.regularizer))?;
    let kl = run_all(&cfg)?;
    cfg.model.as_mut().unwrap().regularizer = Regularizer::L2 { lambda: 1e-4 };
    let l2 = run_all(&cfg)?;
    let mean = |rs: &[RunRecord]| rs.iter().map(|r| r.final_metric().unwrap()).sum::<f64>() / rs.len() as f64;
    let (a, b) = (mean(&kl), mean(&l2));
    let detail = format!("kl {a:.4}, l2 {b:.4}, margin {:+.4} (needs >= -0.0050) over {} seeds", a - b, kl.len());
    ensure(a >= b - 0.005, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn segmentation_targeting() -> Result<String, String> {
    let mut cfg = load_config("shapes.json");
    ensure(cfg.seeds.len() >= 10, || "fewer than 10 seeds".into())?;
    let classes = cfg.seg_model.as_ref().unwrap().classes;
    let rare = classes - 1;
    let mut one_hot = vec![0.0; classes];
    one_hot[rare] = 1.0;
    ensure(cfg.class_weights.as_deref() == Some(&one_hot[..]), || "var_w weights must be one-hot on the rare class".into())?;

    let mut worst_fraction: f64 = 0.0;
    let mut pools = Vec::new();
    for &s in &cfg.seeds {
        let (pool, val) = prepare_data(&cfg, s).map_err(|e| e.to_string())?;
        worst_fraction = worst_fraction.max(class_fraction(&[&pool, &val], rare));
        pools.push(pool);
    }
    ensure(worst_fraction <= 0.02, || format!("rare class covers {worst_fraction:.4} of pixels"))?;

    // rare pixels inside the purchased crops, reported alongside the gate
    let purchased_rare = |cfg: &ExperimentConfig| -> Result<(Vec<RunRecord>, Vec<usize>), String> {
        let mut records = Vec::new();
        let mut counts = Vec::new();
        for (&s, pool) in cfg.seeds.iter().zip(&pools) {
            let (record, queries) = run_seed(cfg, s, None).map_err(|e| e.to_string())?;
            let (h, w) = (pool.inputs.dim(2), pool.inputs.dim(3));
            let grid = make_grid((w, h), cfg.grid.cols, cfg.grid.rows).map_err(|e| e.to_string())?;
            let masks = pool.masks().unwrap();
            let count = queries
                .iter()
                .map(|q| {
                    let (image, crop) = grid.locate(q.unit_id);
                    grid.rects[crop].pixels(w).filter(|&p| masks[image][p] as usize == rare).count()
                })
                .sum();
            records.push(record);
            counts.push(count);
        }
        Ok((records, counts))
    };
    cfg.acquisition = "var_w".into();
    let (weighted, weighted_px) = purchased_rare(&cfg)?;
    cfg.acquisition = "h_ens".into();
    let (hens, hens_px) = purchased_rare(&cfg)?;
    let rare_iou = |r: &RunRecord| r.final_iou.as_ref().and_then(|i| i.per_class[rare]).unwrap_or(0.0);
    let wins = weighted.iter().zip(&hens).filter(|(w, h)| rare_iou(w) > rare_iou(h)).count();
    let ties = weighted.iter().zip(&hens).filter(|(w, h)| rare_iou(w) == rare_iou(h)).count();
    let more_px = weighted_px.iter().zip(&hens_px).filter(|(a, b)| a > b).count();
    let mean = |rs: &[RunRecord]| rs.iter().map(rare_iou).sum::<f64>() / rs.len() as f64;
    let total = |v: &[usize]| v.iter().sum::<usize>();
    let detail = format!(
        "rare-class IoU higher in {wins}/{} seeds, tied in {ties} (mean var_w {:.3}, h_ens {:.3}); \
         var_w bought more rare pixels in {more_px}/{} seeds ({} vs {}); rare fraction <= {worst_fraction:.4}",
        weighted.len(),
        mean(&weighted),
        mean(&hens),
        weighted.len(),
        total(&weighted_px),
        total(&hens_px)
    );
    ensure(wins * 10 >= 7 * weighted.len(), || detail.clone())?;
    Ok(detail)
}

fn class_fraction(parts: &[&Dataset], class: usize) -> f64 {
    let masks: Vec<&Vec<u8>> = parts.iter().flat_map(|d| d.masks().unwrap()).collect();
    let total: usize = masks.iter().map(|m| m.len()).sum();
    let hits: usize = masks.iter().map(|m| m.iter().filter(|&&v| v as usize == class).count()).sum();
    hits as f64 / total as f64
}

// ---------------------------------------------------------------- 9

fn crops_and_pool() -> Result<String, String> {
    let mut rng = seed::rng(909);
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let classes = rng.gen_range(2..=5);
        let cfg = SegModelConfig {
            in_channels: 3,
            classes,
            encoder_widths: [4, 6, 6],
            head_hidden: 6,
            heads: rng.gen_range(2..=4),
            beta: 1e-4,
            lambda: 1e-4,
        };
        let model = SegDpe::new(&cfg, trial).unwrap();
        let (w, h) = (rng.gen_range(16..=40), rng.gen_range(12..=30));
        let image = random_tensor(&[1, 3, h, w], &mut rng);
        let acq = match trial % 7 {
            0 => Acquisition::Random,
            1 => Acquisition::HEns,
            2 => Acquisition::HCat,
            3 => Acquisition::MutualInformation,
            4 => Acquisition::Variance,
            5 => Acquisition::VariationRatios,
            _ => {
                let weights = (0..classes).map(|_| rng.gen_range(0.0..2.0)).collect::<Vec<_>>();
                Acquisition::VarianceWeighted(ClassWeights::new(weights).map_err(|e| e.to_string())?)
            }
        };
        let grid = make_grid((w, h), 4, 3).unwrap();
        ensure(grid.crops() == 12, || "grid must have 12 crops".into())?;
        let whole: f64 = pixel_scores(&model, &image, &acq, trial).unwrap().iter().sum();
        let parts: f64 = grid.rects.iter().map(|r| score_crop(&model, &image, r, &acq, trial).unwrap()).sum();
        let err = (whole - parts).abs();
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("trial {trial}: image {whole} vs crops {parts}"))?;
    }
    let (rounds, rejected) = fuzz_active_rounds()?;
    Ok(format!(
        "100 models, worst additivity error {worst:.1e}; {rounds} fuzzed rounds, {rejected} invalid requests rejected, no double query"
    ))
}

/// A task whose scores are arbitrary: random, constant, or adversarially
/// tied, so selection is exercised without training.
struct StubTask {
    rng: ChaCha8Rng,
}

impl ActiveTask for StubTask {
    type Label = usize;

    fn fit(&mut self, labeled: &std::collections::BTreeMap<usize, usize>, _seed: u64) -> dpe::Result<RoundFit> {
        Ok(RoundFit {
            val_metric: labeled.len() as f64,
            train_epochs: 0,
        })
    }

    fn score(&mut self, unlabeled: &[usize], _acq: &Acquisition, _seed: u64) -> dpe::Result<Vec<f64>> {
        let mode = self.rng.gen_range(0..3);
        Ok(unlabeled
            .iter()
            .map(|&id| match mode {
                0 => self.rng.gen(),
                1 => 0.5,
                _ => (id % 3) as f64,
            })
            .collect())
    }
}

fn fuzz_active_rounds() -> Result<(usize, usize), String> {
    let mut rng = seed::rng(9090);
    let mut rounds = 0;
    let mut rejected = 0;
    let mut experiment = 0u64;
    while rounds < 1000 {
        experiment += 1;
        let n = rng.gen_range(5..=200);
        let b0 = rng.gen_range(1..=8);
        let r = rng.gen_range(1..=6);
        let schedule = if rng.gen_bool(0.5) { GrowthSchedule::linear(b0, r) } else { GrowthSchedule::exponential(b0, r) };
        let clamp = rng.gen_bool(0.5);
        let mut ids: Vec<usize> = (0..n).map(|i| i * 7 + 3).collect();
        ids.shuffle(&mut rng);
        let mut pool = Pool::new(ids.iter().copied());
        let annotator = TableAnnotator((0..n * 7 + 3).collect::<Vec<usize>>());
        let mut task = StubTask { rng: seed::rng(experiment) };
        let cfg = ActiveConfig { seed: experiment, clamp_to_pool: clamp };
        match run_active(&mut task, &mut pool, &annotator, &schedule, &Acquisition::HEns, &cfg) {
            Ok(record) => {
                rounds += record.rounds.len();
                let cumulative = schedule.cumulative().unwrap();
                for (round, c) in record.rounds.iter().zip(&cumulative) {
                    ensure(round.labeled_count == (*c).min(n), || format!("experiment {experiment}: labeled count {} vs {c}", round.labeled_count))?;
                }
            }
            Err(Error::Config(_)) if !clamp && n < schedule.budget => {
                rejected += 1;
                continue;
            }
            Err(e) => return Err(format!("experiment {experiment}: {e}")),
        }
        let log = pool.query_log();
        let unique: BTreeSet<usize> = log.iter().map(|q| q.unit_id).collect();
        ensure(unique.len() == log.len(), || format!("experiment {experiment}: a unit was queried twice"))?;
        ensure(pool.labeled().len() + pool.unlabeled().len() == n, || format!("experiment {experiment}: pool size changed"))?;

        // requests that must be refused without touching the pool
        let before = (pool.labeled().clone(), pool.query_log().len());
        let mut bad = Vec::new();
        if let Some(&id) = pool.labeled().iter().next() {
            bad.push(vec![(id, 1.0)]);
        }
        if let Some(&id) = pool.unlabeled().iter().next() {
            bad.push(vec![(id, 1.0), (id, 0.5)]);
        }
        bad.push(vec![(n * 7 + 100, 1.0)]);
        for request in bad {
            match pool.annotate(&annotator, &request, 99) {
                Err(Error::Protocol(_)) | Err(Error::Bounds(_)) => rejected += 1,
                other => return Err(format!("experiment {experiment}: {request:?} gave {other:?}")),
            }
        }
        ensure(before == (pool.labeled().clone(), pool.query_log().len()), || "a refused request changed the pool".into())?;
    }
    Ok((rounds, rejected))
}

// ---------------------------------------------------------------- 10

fn formats() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut passed = Vec::new();

    // IDX: two 2x3 images, labels 1 and 0
    let pixels: Vec<u8> = vec![0, 51, 102, 153, 204, 255, 255, 0, 128, 1, 2, 3];
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    images.extend(&pixels);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
    std::fs::write(d.join("img.idx"), &images).unwrap();
    std::fs::write(d.join("lab.idx"), &labels).unwrap();
    let ds = load_idx(&d.join("img.idx"), &d.join("lab.idx"), 2).map_err(|e| e.to_string())?;
    ensure(ds.inputs.shape() == [2, 1, 2, 3], || format!("idx shape {:?}", ds.inputs.shape()))?;
    let back: Vec<u8> = ds.inputs.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    ensure(back == pixels && ds.class_labels().unwrap() == [1, 0], || "idx content".into())?;
    let idx_cases: Vec<(&str, Vec<u8>, Vec<u8>)> = vec![
        ("bad magic", [&[0, 0, 8, 4][..], &images[4..]].concat(), labels.clone()),
        ("truncated", images[..images.len() - 1].to_vec(), labels.clone()),
        ("trailing", [&images[..], &[7]].concat(), labels.clone()),
        ("count mismatch", images.clone(), [&[0, 0, 8, 1, 0, 0, 0, 1][..], &[1]].concat()),
    ];
    for (what, img, lab) in idx_cases {
        std::fs::write(d.join("bad.idx"), img).unwrap();
        std::fs::write(d.join("badl.idx"), lab).unwrap();
        match load_idx(&d.join("bad.idx"), &d.join("badl.idx"), 2) {
            Err(Error::Format { .. }) | Err(Error::Data(_)) => {}
            other => return Err(format!("idx {what}: {other:?}")),
        }
    }
    match load_idx(&d.join("img.idx"), &d.join("lab.idx"), 1) {
        Err(Error::Data(_)) => {}
        other => return Err(format!("idx label out of range: {:?}", other.map(|_| ()))),
    }
    passed.push("idx");

    // CIFAR binary: two records
    let mut cifar = Vec::new();
    for (label, base) in [(3u8, 10u8), (9, 200)] {
        cifar.push(label);
        cifar.extend((0..3072).map(|i| base.wrapping_add((i % 7) as u8)));
    }
    std::fs::write(d.join("c.bin"), &cifar).unwrap();
    let ds = load_cifar_binary(&[d.join("c.bin")]).map_err(|e| e.to_string())?;
    ensure(ds.inputs.shape() == [2, 3, 32, 32] && ds.class_labels().unwrap() == [3, 9], || "cifar content".into())?;
    let back: Vec<u8> = ds.inputs.row(1).iter().map(|v| (v * 255.0).round() as u8).collect();
    ensure(back == cifar[3074..], || "cifar pixels".into())?;
    std::fs::write(d.join("t.bin"), &cifar[..5000]).unwrap();
    match load_cifar_binary(&[d.join("t.bin")]) {
        Err(Error::Format { offset: 3073, .. }) => {}
        other => return Err(format!("cifar truncated: {:?}", other.map(|_| ()))),
    }
    let mut bad_label = cifar.clone();
    bad_label[0] = 10;
    std::fs::write(d.join("l.bin"), &bad_label).unwrap();
    match load_cifar_binary(&[d.join("l.bin")]) {
        Err(Error::Data(_)) => {}
        other => return Err(format!("cifar label 10: {:?}", other.map(|_| ()))),
    }
    passed.push("cifar");

    // PPM/PGM with a comment; a pair directory
    let ppm = b"P6\n# fixture\n2 1\n255\n\x00\x80\xff\x10\x20\x30".to_vec();
    let img = parse_pnm(&ppm, Path::new("a.ppm")).map_err(|e| e.to_string())?;
    ensure((img.width, img.height, img.channels, img.maxval) == (2, 1, 3, 255), || format!("{img:?}"))?;
    let canonical = encode_pnm(&img);
    ensure(encode_pnm(&parse_pnm(&canonical, Path::new("b.ppm")).unwrap()) == canonical, || "pnm re-encode".into())?;
    ensure(img.pixels == ppm[ppm.len() - 6..], || "ppm pixels".into())?;
    let pairs = d.join("pairs");
    std::fs::create_dir(&pairs).unwrap();
    std::fs::write(pairs.join("x.ppm"), &ppm).unwrap();
    std::fs::write(pairs.join("x.pgm"), b"P5 2 1 255 \x01\x00").unwrap();
    let ds = load_seg_pairs(&pairs, 2).map_err(|e| e.to_string())?;
    ensure(ds.masks().unwrap() == [vec![1u8, 0]], || "pair mask".into())?;
    for (what, bytes) in [("magic", &b"P3\n2 1\n255\n"[..]), ("truncated", &ppm[..ppm.len() - 1])] {
        match parse_pnm(bytes, Path::new("bad.ppm")) {
            Err(Error::Format { .. }) => {}
            other => return Err(format!("pnm {what}: {other:?}")),
        }
    }
    std::fs::write(pairs.join("y.ppm"), &ppm).unwrap();
    match load_seg_pairs(&pairs, 2) {
        Err(Error::Data(msg)) if msg.contains('y') => {}
        other => return Err(format!("missing partner: {:?}", other.map(|_| ()))),
    }
    passed.push("ppm/pgm");

    // checkpoints
    let layers = vec![
        LayerSpec::conv(1, 2, 3, 1, 1),
        LayerSpec::BatchNorm { channels: 2 },
        LayerSpec::Relu,
        LayerSpec::linear(2 * 4 * 4, 3),
        LayerSpec::Softmax,
    ];
    let mut dpe = Dpe::new(layers.clone(), 3, Regularizer::Kl { beta: 1e-5 }, 7).unwrap();
    let mut rng = seed::rng(1010);
    for m in dpe.members_mut() {
        for r in m.running_stats_mut() {
            r.mean.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            r.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        }
    }
    let path = d.join("model.ckpt");
    dpe.save(&path).map_err(|e| e.to_string())?;
    let loaded = Dpe::load(&path).map_err(|e| e.to_string())?;
    let bits = |x: &Dpe| -> Vec<u64> {
        x.members()
            .iter()
            .flat_map(|m| {
                let p = m.params().iter().flat_map(|t| t.data().to_vec());
                let s = m.running_stats().iter().flat_map(|r| r.mean.iter().chain(&r.var).copied().collect::<Vec<_>>());
                p.chain(s).map(f64::to_bits).collect::<Vec<_>>()
            })
            .collect()
    };
    ensure(bits(&loaded) == bits(&dpe) && loaded.regularizer() == dpe.regularizer(), || "v2 round-trip".into())?;
    let compact = d.join("model.v1");
    dpe.save_compact(&compact).map_err(|e| e.to_string())?;
    let first = std::fs::read(&compact).unwrap();
    ensure(first[..4] == MAGIC[..], || "v1 magic".into())?;
    let reloaded = Dpe::load_with(&compact, layers.clone(), Regularizer::Kl { beta: 1e-5 }).map_err(|e| e.to_string())?;
    reloaded.save_compact(&compact).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&compact).unwrap() == first, || "v1 save/load/save differs".into())?;
    let good = std::fs::read(&path).unwrap();
    ensure(encode_checkpoint(&decode_checkpoint(&good).unwrap()).unwrap() == good, || "checkpoint re-encode".into())?;
    let mut bad_cases = vec![
        ("magic", [&b"XXXX"[..], &good[4..]].concat()),
        ("version", [&good[..4], &99u32.to_le_bytes()[..], &good[8..]].concat()),
        ("trailing", [&good[..], &[0]].concat()),
    ];
    for cut in [0, 3, 7, good.len() / 2, good.len() - 1] {
        bad_cases.push(("truncated", good[..cut].to_vec()));
    }
    for (what, bytes) in bad_cases {
        match decode_checkpoint(&bytes) {
            Err(Error::CorruptCheckpoint(_)) => {}
            other => return Err(format!("checkpoint {what}: {:?}", other.map(|_| ()))),
        }
    }
    passed.push("checkpoint");
    Ok(format!("{} round-trip; malformed inputs rejected with named errors", passed.join(", ")))
}
