use std::sync::Arc;

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::explicit::{attention_output, attention_scores, attention_weights, retrieve_relative};
use super::*;
use crate::data::{window, CheckIn, IdSet};
use crate::numcore::{grad_check, AdamConfig, Var};
use crate::relenc::{build_relative, net_embeddings, RelativeIndexMatrices};
use crate::{AdamState, Graph};

fn arch(dim: usize, max_len: usize, blocks: usize, heads: usize) -> Architecture {
    Architecture {
        dim,
        max_len,
        blocks,
        heads,
        num_pois: 8,
        num_app_categories: 4,
        num_poi_categories: 3,
        relative: RelativeConfig {
            clip_app: 3,
            clip_poi: 3,
            clip_time: 3,
            ..RelativeConfig::default()
        },
        use_abs: true,
    }
}

fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    normal(shape, 1.0, rng)
}

fn categories(a: &Architecture, seed: u64) -> CategoryEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CategoryEmbeddings::new(
        gaussian(&[a.num_app_categories, a.dim], &mut rng),
        gaussian(&[a.num_poi_categories, a.dim], &mut rng),
    )
    .unwrap()
    .freeze()
}

fn model(a: Architecture, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(a, categories(&a, seed + 100), &mut rng).unwrap()
}

/// Perturbs every initialized value so layer-norm and bias terms matter.
fn jitter(p: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.named_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
}

fn random_checkins(len: usize, a: &Architecture, rng: &mut impl Rng) -> Vec<CheckIn> {
    let mut t = rng.random_range(0..1000u64);
    (0..len)
        .map(|_| {
            t += rng.random_range(1..400u64);
            let apps = vec![rng.random_range(0..a.num_app_categories)];
            let mut cats = vec![rng.random_range(0..a.num_poi_categories)];
            if rng.random::<bool>() {
                cats.push(rng.random_range(0..a.num_poi_categories));
            }
            CheckIn::new(rng.random_range(0..a.num_pois), t, apps, cats)
        })
        .collect()
}

fn prepare(seq: &[CheckIn], n: usize, p: &ModelParams) -> PreparedWindow {
    let w = window(seq, n, p.arch.pad_poi()).unwrap();
    let (_, rel) = build_relative(&w, &p.categories, &p.arch.relative).unwrap();
    PreparedWindow { window: w, rel }
}

fn example(seq: &[CheckIn], n: usize, p: &ModelParams, exclude: IdSet) -> TrainExample {
    let input = prepare(&seq[..seq.len() - 1], n, p);
    let real = seq.len() - 1;
    let mut targets = vec![None; n.saturating_sub(real.min(n))];
    targets.extend(seq[seq.len() - real.min(n)..].iter().cloned().map(Some));
    TrainExample {
        input,
        targets,
        exclude: Arc::new(exclude),
    }
}

fn matmul(x: &Tensor, w: &Tensor) -> Tensor {
    let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            out.row_mut(i)[j] = (0..k).map(|t| x.row(i)[t] * w.row(t)[j]).sum();
        }
    }
    out
}

fn plain_layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    for i in 0..x.outer() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<Real>() / d as Real;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / d as Real;
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / (var + LN_EPS).sqrt() * scale.data()[c] + shift.data()[c];
        }
    }
    out
}

#[test]
fn hand_evaluated_score() {
    let q = Tensor::from_rows(&[&[2.0]]).unwrap();
    let k = Tensor::from_rows(&[&[3.0]]).unwrap();
    assert_eq!(attention_scores(&q, &k, &[], 1.0).data(), &[6.0]);
}

#[test]
fn zero_padding_the_width_rescales_scores() {
    let q = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
    let k = Tensor::from_rows(&[&[3.0, -1.0]]).unwrap();
    let narrow = attention_scores(&q, &k, &[], 1.0 / 2f64.sqrt()).data()[0];
    let qp = Tensor::from_rows(&[&[1.0, 2.0, 0.0, 0.0]]).unwrap();
    let kp = Tensor::from_rows(&[&[3.0, -1.0, 0.0, 0.0]]).unwrap();
    let wide = attention_scores(&qp, &kp, &[], 0.5).data()[0];
    assert_abs_diff_eq!(wide, narrow / 2f64.sqrt(), epsilon = 1e-15);
}

#[test]
fn identical_keys_split_attention_evenly() {
    let scores = Tensor::from_rows(&[&[0.0, 0.0], &[1.5, 1.5]]).unwrap();
    let alpha = attention_weights(&scores, &[true, true]);
    assert_eq!(alpha.row(0), &[1.0, 0.0]);
    assert_eq!(alpha.row(1), &[0.5, 0.5]);
    let values = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]).unwrap();
    let z = attention_output(&alpha, &values, &[]);
    assert_eq!(z.row(0), &[2.0, 0.0]);
    assert_eq!(z.row(1), &[1.0, 2.0]);
}

#[test]
fn zero_blocks_is_a_config_error() {
    let a = Architecture {
        blocks: 0,
        ..arch(4, 3, 1, 1)
    };
    assert!(matches!(a.validate(), Err(Error::Config(_))));
    let a = Architecture {
        heads: 3,
        ..arch(4, 3, 1, 1)
    };
    assert!(matches!(a.validate(), Err(Error::Config(_))));
}

#[test]
fn layer_norm_of_constant_row_is_shift() {
    let x = Tensor::full(&[2, 3], 7.0);
    let scale = Tensor::vector(vec![2.0, -1.0, 0.5]);
    let shift = Tensor::vector(vec![0.1, 0.2, 0.3]);
    let mut g = Graph::new();
    let (xv, sv, bv) = (g.constant(x), g.constant(scale), g.constant(shift));
    let y = model::layer_norm(&mut g, xv, sv, bv).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
}

#[test]
fn zero_weight_ffn_adds_its_output_bias() {
    let a = arch(4, 4, 1, 1);
    let mut p = model(a, 1);
    let zero_cats = CategoryEmbeddings::new(Tensor::zeros(&[4, 4]), Tensor::zeros(&[3, 4])).unwrap().freeze();
    p.categories = zero_cats;
    for (name, t) in p.named_mut() {
        if name != "poi" && !name.contains("ln") {
            t.fill(0.0);
        }
    }
    p.blocks[0].ffn_b2 = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = random_checkins(3, &a, &mut rng);
    let pw = prepare(&seq, 4, &p);
    let (z, _) = encode(&p, &[&pw]).unwrap();
    assert!(z.row(0).iter().all(|&v| v == 0.0));
    for i in 1..4 {
        let e = p.poi.row(pw.window.pois[i]);
        for c in 0..4 {
            assert_abs_diff_eq!(z.row(i)[c], e[c] + p.blocks[0].ffn_b2.data()[c], epsilon = 1e-15);
        }
    }
}

#[test]
fn prediction_scores_are_dot_products() {
    let a = arch(4, 3, 1, 1);
    let mut p = model(a, 2);
    p.poi.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    p.poi.row_mut(2).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
    let z = [1.0, 0.0, 0.0, 0.0];
    assert_eq!(predict_scores(&z, &[1, 2], &p).unwrap(), vec![1.0, 0.0]);
    let z = [0.3, -1.2, 2.0, 0.7];
    let z2: Vec<Real> = z.iter().map(|v| 2.0 * v).collect();
    let all: Vec<usize> = (0..8).collect();
    let s = predict_scores(&z, &all, &p).unwrap();
    let s2 = predict_scores(&z2, &all, &p).unwrap();
    for (a, b) in s.iter().zip(&s2) {
        assert_eq!(2.0 * a, *b);
    }
    assert!(matches!(predict_scores(&z, &[8], &p), Err(Error::Usage(_))));
    assert!(matches!(predict_scores(&z, &[9], &p), Err(Error::OutOfRange { .. })));
}

#[test]
fn score_ranking_matches_brute_force() {
    let a = arch(6, 3, 1, 1);
    let mut a10 = a;
    a10.num_pois = 10;
    let p = model(a10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let z: Vec<Real> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cands: Vec<usize> = (0..10).collect();
        let scores = predict_scores(&z, &cands, &p).unwrap();
        let mut by_model: Vec<usize> = cands.clone();
        by_model.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]));
        let brute: Vec<Real> = (0..10)
            .map(|c| (0..6).map(|k| z[k] * p.poi.row(c)[k]).sum())
            .collect();
        let mut by_brute = cands.clone();
        by_brute.sort_by(|&x, &y| brute[y].total_cmp(&brute[x]));
        assert_eq!(by_model, by_brute);
    }
}

fn loss_value(p: &ModelParams, examples: &[&TrainExample], hyper: &SrHyper, seed: u64) -> Real {
    let windows: Vec<&PreparedWindow> = examples.iter().map(|e| &e.input).collect();
    let batch = SrBatch::new(&windows, &p.arch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let targets = sample_targets(examples, &p.arch, &mut rng).unwrap();
    let mut g = Graph::new();
    let vars = ParamVars::register(p, &mut g);
    let z = forward(&mut g, &vars, p, &batch, 0.0, &mut rng).unwrap();
    let l = loss_sr(&mut g, &vars, z, &targets, hyper).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn zero_scores_cost_two_log_two() {
    let a = arch(4, 3, 1, 1);
    let mut p = model(a, 4);
    p.poi.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seq = random_checkins(2, &a, &mut rng);
    let ex = example(&seq, 3, &p, IdSet::new([seq[0].poi, seq[1].poi]));
    assert_eq!(ex.targets.iter().flatten().count(), 1);
    let hyper = SrHyper {
        dropout: 0.0,
        kappa: 0.0,
        lambda: 0.0,
    };
    assert_abs_diff_eq!(loss_value(&p, &[&ex], &hyper, 1), 2.0 * 2f64.ln(), epsilon = 1e-15);
}

fn log_sigmoid(x: Real) -> Real {
    -(1.0 + (-x).exp()).ln()
}

#[test]
fn kappa_zero_leaves_only_the_recommendation_loss() {
    let a = arch(4, 4, 1, 1);
    let mut p = model(a, 6);
    jitter(&mut p, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = random_checkins(5, &a, &mut rng);
    // every POI except 5 is excluded, so the negative is always 5
    let ex = example(&seq, 4, &p, IdSet::new((0..8).filter(|&c| c != 5)));
    let hyper = SrHyper {
        dropout: 0.0,
        kappa: 0.0,
        lambda: 0.0,
    };
    let got = loss_value(&p, &[&ex], &hyper, 2);
    let (z, _) = encode(&p, &[&ex.input]).unwrap();
    let mut expect = 0.0;
    for (i, t) in ex.targets.iter().enumerate() {
        if let Some(t) = t {
            let sp: Real = z.row(i).iter().zip(p.poi.row(t.poi)).map(|(a, b)| a * b).sum();
            let sn: Real = z.row(i).iter().zip(p.poi.row(5)).map(|(a, b)| a * b).sum();
            expect -= log_sigmoid(sp) + log_sigmoid(-sn);
        }
    }
    assert_abs_diff_eq!(got, expect, epsilon = 1e-10);
    let with_kappa = loss_value(&p, &[&ex], &SrHyper { kappa: 0.5, ..hyper }, 2);
    assert!(with_kappa > got);
}

#[test]
fn l2_penalty_grows_with_unscored_parameters() {
    let a = arch(4, 4, 1, 1);
    let mut p = model(a, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seq = random_checkins(4, &a, &mut rng);
    let ex = example(&seq, 4, &p, IdSet::new(seq.iter().map(|c| c.poi)));
    let hyper = SrHyper {
        dropout: 0.0,
        kappa: 0.3,
        lambda: 0.01,
    };
    let base = loss_value(&p, &[&ex], &hyper, 3);
    let free = loss_value(&p, &[&ex], &SrHyper { lambda: 0.0, ..hyper }, 3);
    let pad = p.arch.pad_poi();
    p.poi.row_mut(pad).fill(2.0);
    let grown = loss_value(&p, &[&ex], &hyper, 3);
    assert!(grown > base);
    assert_abs_diff_eq!(grown - base, 0.01 * 4.0 * 4.0, epsilon = 1e-9);
    assert_eq!(loss_value(&p, &[&ex], &SrHyper { lambda: 0.0, ..hyper }, 3), free);
}

fn perturb_after(pw: &PreparedWindow, j: usize, a: &Architecture, rng: &mut impl Rng) -> PreparedWindow {
    let mut out = pw.clone();
    let n = out.window.len();
    out.window.pois[j] = rng.random_range(0..a.num_pois);
    out.window.app_categories[j] = vec![rng.random_range(0..a.num_app_categories)];
    out.window.poi_categories[j] = vec![rng.random_range(0..a.num_poi_categories)];
    out.window.timestamps[j] += rng.random_range(1..1000);
    for m in [&mut out.rel.j, &mut out.rel.k, &mut out.rel.t] {
        for other in 0..n {
            if other != j {
                let v = rng.random_range(0..=3u16);
                m[j * n + other] = v;
                m[other * n + j] = v;
            }
        }
    }
    out
}

#[test]
fn future_checkins_never_reach_past_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..12 {
        let heads = if trial % 2 == 0 { 1 } else { 2 };
        let a = arch(4, 6, 2, heads);
        let mut p = model(a, trial);
        jitter(&mut p, trial);
        let seq = random_checkins(rng.random_range(2..=6), &a, &mut rng);
        let pw = prepare(&seq, 6, &p);
        let first = pw.window.first_real();
        let i = rng.random_range(first..5);
        let j = rng.random_range(i + 1..6);
        let changed = perturb_after(&pw, j, &a, &mut rng);
        let (z0, al0) = encode(&p, &[&pw]).unwrap();
        let (z1, al1) = encode(&p, &[&changed]).unwrap();
        for r in 0..=i {
            assert_eq!(z0.row(r), z1.row(r), "trial {trial}, row {r}");
            for (x, y) in al0.iter().zip(&al1) {
                assert_eq!(x.row(r), y.row(r));
            }
        }
        let cands: Vec<usize> = (0..8).collect();
        assert_eq!(
            predict_scores(z0.row(i), &cands, &p).unwrap(),
            predict_scores(z1.row(i), &cands, &p).unwrap()
        );
    }
}

#[test]
fn attention_rows_are_normalized_and_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = arch(4, 5, 1, 2);
    let p = model(a, 12);
    let windows: Vec<PreparedWindow> = (0..4)
        .map(|_| {
            let seq = random_checkins(rng.random_range(1..=5), &a, &mut rng);
            prepare(&seq, 5, &p)
        })
        .collect();
    let refs: Vec<&PreparedWindow> = windows.iter().collect();
    let (_, alphas) = encode(&p, &refs).unwrap();
    assert_eq!(alphas.len(), 2);
    for alpha in &alphas {
        for (b, pw) in windows.iter().enumerate() {
            let real = &pw.window.pad_mask;
            for i in 0..5 {
                let row = alpha.row(b * 5 + i);
                for j in 0..5 {
                    if !(real[i] && real[j] && j <= i) {
                        assert_eq!(row[j], 0.0);
                    }
                }
                let total: Real = row.iter().sum();
                if real[i] {
                    assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
                } else {
                    assert_eq!(total, 0.0);
                }
            }
        }
    }
}

#[test]
fn leading_pads_do_not_change_real_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..5 {
        let mut a = arch(4, 9, 2, 1);
        a.use_abs = false;
        let mut p = model(a, trial);
        jitter(&mut p, trial + 50);
        let seq = random_checkins(4, &a, &mut rng);
        let short = prepare(&seq, 5, &p);
        let long = prepare(&seq, 9, &p);
        let (zs, _) = encode(&p, &[&short]).unwrap();
        let (zl, _) = encode(&p, &[&long]).unwrap();
        for k in 0..4 {
            for c in 0..4 {
                assert_abs_diff_eq!(zs.row(1 + k)[c], zl.row(5 + k)[c], epsilon = 1e-9);
            }
        }
    }
}

#[test]
fn pad_positions_get_no_positional_gradient() {
    let a = arch(4, 6, 2, 1);
    let mut p = model(a, 14);
    jitter(&mut p, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let seq = random_checkins(4, &a, &mut rng);
    let ex = example(&seq, 6, &p, IdSet::new(seq.iter().map(|c| c.poi)));
    let pads = ex.input.window.first_real();
    assert_eq!(pads, 3);
    let batch = SrBatch::new(&[&ex.input], &a).unwrap();
    let targets = sample_targets(&[&ex], &a, &mut rng).unwrap();
    let mut g = Graph::new();
    let vars = ParamVars::register(&p, &mut g);
    let z = forward(&mut g, &vars, &p, &batch, 0.0, &mut rng).unwrap();
    let hyper = SrHyper {
        dropout: 0.0,
        kappa: 0.5,
        lambda: 0.0,
    };
    let loss = loss_sr(&mut g, &vars, z, &targets, &hyper).unwrap();
    let names = p.trainable_names();
    let ids = vars.trainable().to_vec();
    let grads = g.backward(loss).unwrap();
    for (name, id) in names.iter().zip(ids) {
        let gt = grads.get(id).unwrap();
        if name == "pos_key" || name == "pos_val" {
            for r in 0..pads {
                assert!(gt.row(r).iter().all(|&v| v == 0.0), "{name} row {r}");
            }
            assert!(gt.row(pads).iter().any(|&v| v != 0.0) || name == "pos_key");
        }
        if name == "poi" {
            assert!(gt.row(p.arch.pad_poi()).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let a = arch(4, 3, 1, 1);
    let mut p = model(a, 21);
    jitter(&mut p, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let seq = random_checkins(4, &a, &mut rng);
    let ex = example(&seq, 3, &p, IdSet::new(seq.iter().map(|c| c.poi)));
    let idx_seen: Vec<u16> = ex.input.rel.j.iter().chain(&ex.input.rel.k).chain(&ex.input.rel.t).copied().collect();
    assert!(idx_seen.iter().any(|&v| v > 0));
    let batch = SrBatch::new(&[&ex.input], &a).unwrap();
    let targets = sample_targets(&[&ex], &a, &mut rng).unwrap();
    let hyper = SrHyper {
        dropout: 0.0,
        kappa: 0.5,
        lambda: 0.01,
    };
    let named: Vec<(String, Tensor)> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    assert_eq!(named.iter().filter(|(n, _)| n.starts_with("rel_")).count(), 6);
    for (name, point) in &named {
        let err = grad_check(
            |g, x| {
                let vars = ParamVars::register_with(&p, g, |n, _| (n == name).then_some(x));
                let mut unused = ChaCha8Rng::seed_from_u64(0);
                let z = forward(g, &vars, &p, &batch, 0.0, &mut unused)?;
                loss_sr(g, &vars, z, &targets, &hyper)
            },
            point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: rel error {err}");
    }
}

#[test]
fn fused_route_matches_explicit_stacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..6 {
        let a = arch(5, 6, 1, 1);
        let mut p = model(a, trial);
        jitter(&mut p, trial + 7);
        let seq = random_checkins(rng.random_range(2..=6), &a, &mut rng);
        let pw = prepare(&seq, 6, &p);
        let (z, _) = encode(&p, &[&pw]).unwrap();

        let real = &pw.window.pad_mask;
        let n = 6;
        let b = &p.blocks[0];
        let mut z0 = Tensor::zeros(&[n, 5]);
        for i in (0..n).filter(|&i| real[i]) {
            z0.row_mut(i).copy_from_slice(p.poi.row(pw.window.pois[i]));
        }
        let h = plain_layer_norm(&z0, &b.ln1_scale, &b.ln1_shift);
        let q = matmul(&h, &b.w_q);
        let mut k = matmul(&h, &b.w_k);
        k.add_assign(&p.pos_key);
        let mu = net_embeddings(&pw.window, &p.categories).unwrap();
        let mut v = matmul(&h, &b.w_v);
        v.add_assign(&mu.mu_app);
        v.add_assign(&mu.mu_poi);
        v.add_assign(&p.pos_val);
        let stacks = retrieve_relative(&pw.rel, &p).unwrap();
        let keys: Vec<&Tensor> = stacks.key.iter().collect();
        let vals: Vec<&Tensor> = stacks.val.iter().collect();
        let x = attention_scores(&q, &k, &keys, 1.0 / 5f64.sqrt());
        let alpha = attention_weights(&x, real);
        let o = attention_output(&alpha, &v, &vals);
        let mut z1 = z0.clone();
        z1.add_assign(&o);
        let h2 = plain_layer_norm(&z1, &b.ln2_scale, &b.ln2_shift);
        let mut f = matmul(&h2, &b.ffn_w1);
        for i in 0..n {
            for (c, v) in f.row_mut(i).iter_mut().enumerate() {
                *v = (*v + b.ffn_b1.data()[c]).max(0.0);
            }
        }
        let mut f = matmul(&f, &b.ffn_w2);
        for i in 0..n {
            for (c, v) in f.row_mut(i).iter_mut().enumerate() {
                *v += b.ffn_b2.data()[c];
            }
        }
        z1.add_assign(&f);
        for i in 0..n {
            for c in 0..5 {
                let expect = if real[i] { z1.row(i)[c] } else { 0.0 };
                assert_abs_diff_eq!(z.row(i)[c], expect, epsilon = 1e-11);
            }
        }
    }
}

#[test]
fn retrieval_examples() {
    let a = arch(3, 3, 1, 1);
    let p = model(a, 41);
    let zero = retrieve_relative(&RelativeIndexMatrices::zeros(3), &p).unwrap();
    for c in 0..3 {
        for cell in zero.key[c].data().chunks(3) {
            assert_eq!(cell, p.rel_key[c].row(0));
        }
    }
    let sym = RelativeIndexMatrices {
        n: 3,
        j: vec![0, 1, 2, 1, 0, 3, 2, 3, 0],
        k: vec![0; 9],
        t: vec![0, 3, 3, 3, 0, 1, 3, 1, 0],
    };
    let s = retrieve_relative(&sym, &p).unwrap();
    for c in [0, 2] {
        let d = s.val[c].data();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[(i * 3 + j) * 3..(i * 3 + j + 1) * 3], d[(j * 3 + i) * 3..(j * 3 + i + 1) * 3]);
            }
        }
    }
    let bad = RelativeIndexMatrices {
        j: vec![0, 4, 4, 0, 0, 0, 0, 0, 0],
        ..sym
    };
    assert!(matches!(retrieve_relative(&bad, &p), Err(Error::Integrity(_))));
    let pw = PreparedWindow {
        window: window(&random_checkins(3, &a, &mut ChaCha8Rng::seed_from_u64(1)), 3, 8).unwrap(),
        rel: bad,
    };
    assert!(matches!(SrBatch::new(&[&pw], &a), Err(Error::Integrity(_))));
}

#[test]
fn single_cell_gradient_reaches_one_table_row() {
    let m = RelativeIndexMatrices {
        n: 2,
        j: vec![0, 2, 2, 0],
        k: vec![0; 4],
        t: vec![0; 4],
    };
    let table = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.1], &[-0.3, 0.7], &[1.0, 1.0]]).unwrap();
    let w = Tensor::vector(vec![1.5, -2.0]);
    let cell = usize::from(m.j[1]);
    let f = |g: &mut Graph<'_>, x: Var| {
        let row = g.gather(x, &[cell])?;
        let row = g.reshape(row, vec![2])?;
        let wv = g.constant(w.clone());
        g.dot(row, wv)
    };
    assert!(grad_check(f, &table, 1e-6).unwrap() < 1e-8);
    let mut g = Graph::new();
    let x = g.param(&table);
    let y = f(&mut g, x).unwrap();
    let grads = g.backward(y).unwrap();
    let gt = grads.get(x).unwrap();
    for r in 0..4 {
        let nonzero = gt.row(r).iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, r == cell);
    }
}

fn train_run(p: &mut ModelParams, examples: &[TrainExample], steps: usize) -> Vec<Real> {
    let mut adam = AdamState::new(AdamConfig::with_lr(0.01), p.trainable());
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let hyper = SrHyper {
        dropout: 0.2,
        kappa: 0.5,
        lambda: 0.002,
    };
    let refs: Vec<&TrainExample> = examples.iter().collect();
    (0..steps)
        .map(|_| train_step(p, &mut adam, &refs, &hyper, &mut rng).unwrap())
        .collect()
}

#[test]
fn zeroed_frozen_channels_match_disabled_channels_bitwise() {
    let base = arch(4, 5, 2, 2);
    let off = Architecture {
        relative: RelativeConfig {
            use_app: false,
            use_poi: false,
            use_time: false,
            ..base.relative
        },
        ..base
    };
    let mut disabled = model(off, 9);
    let mut zeroed = model(base, 9);
    for c in 0..3 {
        zeroed.rel_key[c].fill(0.0);
        zeroed.rel_val[c].fill(0.0);
        for part in ["key", "val"] {
            zeroed.freeze(&format!("rel_{}_{part}", CHANNELS[c])).unwrap();
        }
    }
    assert_eq!(disabled.trainable_names(), zeroed.trainable_names());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ex_on = Vec::new();
    let mut ex_off = Vec::new();
    for _ in 0..3 {
        let seq = random_checkins(rng.random_range(3..8), &base, &mut rng);
        let mut e = example(&seq, 5, &zeroed, IdSet::new(seq.iter().map(|c| c.poi)));
        ex_off.push(e.clone());
        e.input.rel = RelativeIndexMatrices::zeros(5);
        ex_on.push(e);
    }
    assert!(ex_off.iter().any(|e| e.input.rel.t.iter().any(|&v| v > 0)));

    let l_off = train_run(&mut disabled, &ex_off, 4);
    let l_on = train_run(&mut zeroed, &ex_on, 4);
    let bits = |v: &[Real]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&l_off), bits(&l_on));
    for ((n1, t1), (_, t2)) in disabled.named().into_iter().zip(zeroed.named()) {
        if disabled.is_active(&n1) {
            assert_eq!(bits(t1.data()), bits(t2.data()), "{n1}");
        }
    }
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let a = arch(4, 5, 2, 2);
    let mut p = model(a, 50);
    p.freeze("rel_time_val").unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&p, &mut buf).unwrap();
    let back = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back, p);
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(buf, again);

    let mut other = p.clone();
    other.pos_key = Tensor::zeros(&[4, 4]);
    let mut bad = Vec::new();
    write_checkpoint(&other, &mut bad).unwrap();
    assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Integrity(_))));

    assert!(matches!(read_checkpoint(&mut &buf[..buf.len() - 3]), Err(Error::Io(_))));
    let mut wrong = buf.clone();
    wrong[0] = b'Z';
    assert!(matches!(read_checkpoint(&mut wrong.as_slice()), Err(Error::Integrity(_))));
}

#[test]
fn recommender_training_leaves_category_tables_untouched() {
    use crate::data::Cardinalities;
    use crate::ei::{train_ei, EiConfig, PretrainedVectors};

    let a = arch(4, 4, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let seqs: Vec<Vec<CheckIn>> = (0..3).map(|_| random_checkins(5, &a, &mut rng)).collect();
    let flat: Vec<&CheckIn> = seqs.iter().flatten().collect();
    let card = Cardinalities {
        num_pois: 8,
        num_app_categories: 4,
        num_poi_categories: 3,
    };
    let cfg = EiConfig {
        dim: 4,
        epochs: 3,
        ..EiConfig::default()
    };
    let ei = train_ei(&flat, card, &PretrainedVectors::fallback_only(6, 0), &cfg).unwrap();
    assert!(ei.table.is_frozen());
    let mut p = ModelParams::init(a, ei.table.clone(), &mut rng).unwrap();
    let examples: Vec<TrainExample> = seqs
        .iter()
        .map(|s| example(s, 4, &p, IdSet::new(s.iter().map(|c| c.poi))))
        .collect();
    let refs: Vec<&TrainExample> = examples.iter().collect();

    let grads_for = |p: &ModelParams| {
        let windows: Vec<&PreparedWindow> = refs.iter().map(|e| &e.input).collect();
        let batch = SrBatch::new(&windows, &p.arch).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let targets = sample_targets(&refs, &p.arch, &mut r).unwrap();
        let mut g = Graph::new();
        let vars = ParamVars::register(p, &mut g);
        let z = forward(&mut g, &vars, p, &batch, 0.0, &mut r).unwrap();
        let loss = loss_sr(&mut g, &vars, z, &targets, &SrHyper::default()).unwrap();
        let (ca, cp) = (vars.cat_app, vars.cat_poi);
        let grads = g.backward(loss).unwrap();
        (grads.get(ca).cloned(), grads.get(cp).cloned())
    };
    assert_eq!(grads_for(&p), (None, None));
    let mut open = p.clone();
    open.categories = CategoryEmbeddings::new(p.categories.app.clone(), p.categories.poi.clone()).unwrap();
    let (ga, _) = grads_for(&open);
    assert!(ga.unwrap().data().iter().any(|&v| v != 0.0));

    let mut adam = AdamState::new(AdamConfig::default(), p.trainable());
    train_step(&mut p, &mut adam, &refs, &SrHyper::default(), &mut rng).unwrap();
    assert_eq!(p.categories, ei.table);
}
