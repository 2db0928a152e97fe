use rand::Rng;

use super::*;
use crate::acquisition::{Acquisition, ClassWeights};
use crate::active::{run_active, ActiveConfig, GrowthSchedule, Pool};
use crate::data::{synth_shapes_seg, ShapesSpec};
use crate::nn::LayerSpec;

fn tiny_cfg(heads: usize, beta: f64, lambda: f64) -> SegModelConfig {
    SegModelConfig {
        in_channels: 3,
        classes: 3,
        encoder_widths: [3, 4, 4],
        head_hidden: 5,
        heads,
        beta,
        lambda,
    }
}

fn image(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    Tensor::new(vec![n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn targets(n: usize, hw: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    (0..n * hw).map(|_| rng.gen_range(0..3)).collect()
}

fn with_identical_heads(model: &SegDpe) -> SegDpe {
    let head = model.heads().members()[0].clone();
    let heads = Dpe::from_members(vec![head.clone(), head.clone(), head], Regularizer::Kl { beta: 1.0 }).unwrap();
    SegDpe::from_parts(model.encoder().clone(), heads, 0.0).unwrap()
}

#[test]
fn identical_heads_give_zero_variance() {
    let model = with_identical_heads(&SegDpe::new(&tiny_cfg(3, 1.0, 0.0), 1).unwrap());
    let scores = pixel_scores(&model, &image(1, 16, 16, 2), &Acquisition::Variance, 0).unwrap();
    assert!(scores.iter().all(|&s| s == 0.0));
}

#[test]
fn pixel_distributions_sum_to_one_at_input_resolution() {
    let model = SegDpe::new(&tiny_cfg(2, 1.0, 0.0), 3).unwrap();
    let p = model.predict(&image(2, 20, 12, 4)).unwrap();
    assert_eq!(p.mean.shape(), &[2, 3, 20, 12]);
    for n in 0..2 {
        for y in 0..20 {
            for x in 0..12 {
                let s: f64 = p.pixel_set(n, y, x).unwrap().mean().iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn single_head_is_a_plain_segmenter() {
    let model = SegDpe::new(&tiny_cfg(1, 1.0, 0.0), 3).unwrap();
    assert_eq!(model.heads().regularizer(), Regularizer::None);
    let p = model.predict(&image(1, 8, 8, 1)).unwrap();
    assert_eq!(p.members[0], p.mean);
}

#[test]
fn upsample_and_downsample_are_adjoint() {
    let mut rng = seed::rng(5);
    let a = Tensor::new(vec![2, 3, 3, 2], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let b = Tensor::new(vec![2, 3, 17, 11], (0..2 * 3 * 17 * 11).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let up = upsample_nearest(&a, 17, 11);
    let down = downsample_sum(&b, 3, 2);
    let lhs: f64 = up.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let rhs: f64 = a.data().iter().zip(down.data()).map(|(x, y)| x * y).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn empty_mask_leaves_only_regularizer_gradients() {
    let (beta, lambda) = (0.7, 0.01);
    let mut model = SegDpe::new(&tiny_cfg(3, beta, lambda), 6).unwrap();
    let x = image(2, 16, 16, 7);
    let g = model.gradients(&x, &targets(2, 256, 1), &[false; 512]).unwrap();
    let reg = model.heads().penalty_grad().unwrap().unwrap();
    assert_eq!(g.heads, reg);
    for (ge, p) in g.encoder.iter().zip(model.encoder().params()) {
        for (a, b) in ge.data().iter().zip(p.data()) {
            assert_eq!(*a, 2.0 * lambda * b);
        }
    }
}

#[test]
fn omega_never_reaches_the_encoder() {
    let mut model = SegDpe::new(&tiny_cfg(3, 1e6, 0.0), 8).unwrap();
    let g = model.gradients(&image(1, 16, 16, 9), &targets(1, 256, 2), &[false; 256]).unwrap();
    assert!(g.encoder.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(g.heads.iter().flatten().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn encoder_gradient_is_the_sum_over_heads() {
    let mut model = SegDpe::new(&tiny_cfg(3, 0.0, 0.0), 10).unwrap();
    let x = image(2, 16, 24, 11);
    let t = targets(2, 16 * 24, 3);
    let mask: Vec<bool> = (0..2 * 16 * 24).map(|i| i % 3 != 0).collect();
    let joint = model.gradients(&x, &t, &mask).unwrap();
    let mut summed: Vec<Tensor> = joint.encoder.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for e in 0..3 {
        let head = model.heads().members()[e].clone();
        let solo_heads = Dpe::from_members(vec![head], Regularizer::None).unwrap();
        let mut solo = SegDpe::from_parts(model.encoder().clone(), solo_heads, 0.0).unwrap();
        let g = solo.gradients(&x, &t, &mask).unwrap();
        assert_eq!(g.heads[0], joint.heads[e]);
        for (s, ge) in summed.iter_mut().zip(&g.encoder) {
            s.axpy(1.0, ge).unwrap();
        }
    }
    for (s, j) in summed.iter().zip(&joint.encoder) {
        for (a, b) in s.data().iter().zip(j.data()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

fn fingerprint(m: &SegDpe) -> Vec<Option<u64>> {
    std::iter::once(m.encoder().activation_fingerprint())
        .chain(m.heads().members().iter().map(|h| h.activation_fingerprint()))
        .collect()
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut model = SegDpe::new(&tiny_cfg(2, 0.3, 0.05), 12).unwrap();
    let x = image(2, 16, 16, 13);
    let t = targets(2, 256, 4);
    let mask: Vec<bool> = (0..512).map(|i| i % 2 == 0).collect();
    let g = model.gradients(&x, &t, &mask).unwrap();
    let base_fp = fingerprint(&model);
    let mut rng = seed::rng(14);
    let step = 1e-5;
    let (mut checked, mut failures) = (0, Vec::new());
    for _ in 0..60 {
        let on_encoder = rng.gen_bool(0.5);
        let (slot, member) = if on_encoder {
            (rng.gen_range(0..model.encoder().params().len()), None)
        } else {
            (rng.gen_range(0..model.heads().members()[0].params().len()), Some(rng.gen_range(0..2)))
        };
        let eval = |m: &mut SegDpe, delta: f64, idx: usize| -> (f64, Vec<Option<u64>>) {
            let mut probe = m.clone();
            let p = match member {
                None => &mut probe.encoder.params_mut()[slot],
                Some(e) => &mut probe.heads.members_mut()[e].params_mut()[slot],
            };
            p.data_mut()[idx] += delta;
            let loss = probe.gradients(&x, &t, &mask).unwrap().loss;
            (loss, fingerprint(&probe))
        };
        let len = match member {
            None => model.encoder().params()[slot].len(),
            Some(_) => model.heads().members()[0].params()[slot].len(),
        };
        let idx = rng.gen_range(0..len);
        let (lp, fp_p) = eval(&mut model, step, idx);
        let (lm, fp_m) = eval(&mut model, -step, idx);
        if fp_p != base_fp || fp_m != base_fp {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * step);
        let analytic = match member {
            None => g.encoder[slot].data()[idx],
            Some(e) => g.heads[e][slot].data()[idx],
        };
        checked += 1;
        if (numeric - analytic).abs() > 1e-4 * numeric.abs().max(analytic.abs()) + 1e-7 {
            failures.push((on_encoder, slot, idx, analytic, numeric));
        }
    }
    assert!(checked >= 40, "only {checked} coordinates checked");
    assert!(failures.is_empty(), "{failures:?}");
}

fn zero_weight_model(classes: usize) -> SegDpe {
    let encoder = Network::new(crate::nn::seg_encoder(3, [2, 2, 2])).unwrap();
    let head = Network::new(vec![LayerSpec::conv(2, classes, 1, 1, 0), LayerSpec::Softmax]).unwrap();
    let heads = Dpe::from_members(vec![head.clone(), head], Regularizer::Kl { beta: 1.0 }).unwrap();
    SegDpe::from_parts(encoder, heads, 0.0).unwrap()
}

#[test]
fn uniform_prediction_crop_entropy() {
    let k = 5;
    let model = zero_weight_model(k);
    let rect = Rect { x: 3, y: 2, width: 7, height: 5 };
    let s = score_crop(&model, &image(1, 16, 16, 1), &rect, &Acquisition::HEns, 0).unwrap();
    assert!((s - 35.0 * (k as f64).ln()).abs() < 1e-9);
    let outside = Rect { x: 10, y: 0, width: 7, height: 1 };
    assert!(matches!(
        score_crop(&model, &image(1, 16, 16, 1), &outside, &Acquisition::HEns, 0),
        Err(Error::Bounds(_))
    ));
}

#[test]
fn crop_scores_add_up_to_the_image_score() {
    let model = SegDpe::new(&tiny_cfg(3, 1.0, 0.0), 15).unwrap();
    let img = image(1, 48, 64, 16);
    let grid = make_grid((64, 48), 4, 3).unwrap();
    let full = Rect { x: 0, y: 0, width: 64, height: 48 };
    let w = ClassWeights::new(vec![0.2, 1.0, 3.0]).unwrap();
    for acq in [
        Acquisition::HEns,
        Acquisition::HCat,
        Acquisition::MutualInformation,
        Acquisition::Variance,
        Acquisition::VariationRatios,
        Acquisition::VarianceWeighted(w),
    ] {
        let total = score_crop(&model, &img, &full, &acq, 0).unwrap();
        let parts: f64 = grid.rects.iter().map(|r| score_crop(&model, &img, r, &acq, 0).unwrap()).sum();
        assert!((total - parts).abs() < 1e-6, "{acq}: {total} vs {parts}");
    }
}

#[test]
fn one_hot_weight_scale_does_not_change_crop_ranking() {
    let model = SegDpe::new(&tiny_cfg(3, 1.0, 0.0), 17).unwrap();
    let img = image(1, 48, 64, 18);
    let grid = make_grid((64, 48), 4, 3).unwrap();
    let rank = |scale: f64| {
        let acq = Acquisition::VarianceWeighted(ClassWeights::new(vec![0.0, 0.0, scale]).unwrap());
        let scores: Vec<(usize, f64)> = grid
            .rects
            .iter()
            .enumerate()
            .map(|(i, r)| (i, score_crop(&model, &img, r, &acq, 0).unwrap()))
            .collect();
        crate::acquisition::select_top_b(&scores, 12)
    };
    assert_eq!(rank(1.0), rank(7.3));
    assert_eq!(rank(1.0), rank(1e-3));
}

#[test]
fn crop_active_loop_respects_pool_invariants() {
    let spec = ShapesSpec {
        images: 6,
        width: 32,
        height: 24,
        classes: 3,
        rare_prob: 0.5,
        noise: 0.05,
        ..ShapesSpec::default()
    };
    let pool = synth_shapes_seg(&spec, 1).unwrap();
    let val = synth_shapes_seg(&ShapesSpec { images: 2, ..spec.clone() }, 2).unwrap();
    let grid = make_grid((32, 24), 4, 3).unwrap();
    let train = TrainConfig {
        lr0: 0.05,
        batch_size: 4,
        max_epochs: 2,
        early_stopping: false,
        ..TrainConfig::default()
    };
    let (mut task, annotator) = SegTask::new(&pool, val, grid.clone(), tiny_cfg(2, 1e-4, 1e-4), train).unwrap();
    let mut p = Pool::new(task.units());
    let schedule = GrowthSchedule::exponential(6, 3);
    let cfg = ActiveConfig { seed: 3, clamp_to_pool: false };
    let rec = run_active(&mut task, &mut p, &annotator, &schedule, &Acquisition::HEns, &cfg).unwrap();
    assert_eq!(rec.rounds.iter().map(|r| r.labeled_count).collect::<Vec<_>>(), [6, 12, 24]);
    assert_eq!(p.len(), 72);
    assert!(task.last_iou().is_some());
    // Revealed crop labels equal the ground truth under each crop.
    let masks = pool.masks().unwrap();
    for (&unit, pixels) in p.revealed() {
        let (img, crop) = grid.locate(unit);
        let truth: Vec<u8> = grid.rects[crop].pixels(32).map(|q| masks[img][q]).collect();
        assert_eq!(&truth, pixels);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crops.csv");
    write_crop_log(&rec.query_log, &grid, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("round,image_id,crop_col,crop_row,score"));
    assert_eq!(text.lines().count(), 25);
}
