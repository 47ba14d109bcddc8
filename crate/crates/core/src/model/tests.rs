use super::*;
use crate::conditioning::{Arity, FilmGenerator, ModulatedWeight};
use crate::init::{rng_from_seed, uniform};
use crate::tensor::finite_diff_check_params;

fn randomize(store: &mut ParamStore, ids: &[ParamId], bound: f64, seed: u64) {
    let mut rng = rng_from_seed(seed);
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        store.replace(id, uniform(&shape, bound, &mut rng));
    }
}

fn mat(data: &[f64], cols: usize) -> Vec<Vec<f64>> {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn film(z: &[f64], store: &ParamStore, g: &FilmGenerator) -> (Vec<f64>, Vec<f64>) {
    let [gw, gb, bw, bb] = g.param_ids();
    let p = g.output_dim();
    let apply = |w: ParamId, b: ParamId| -> Vec<f64> {
        (0..p)
            .map(|j| {
                let mut s = store.get(b).data()[j];
                for (i, zi) in z.iter().enumerate() {
                    s += zi * store.get(w).data()[i * p + j];
                }
                s
            })
            .collect()
    };
    (apply(gw, gb), apply(bw, bb))
}

fn oracle_layer_norm(a: &[Vec<f64>], scale: &[f64], shift: &[f64]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, x)| (x - mu) / (var + norm::LN_EPS).sqrt() * scale[j] + shift[j])
                .collect()
        })
        .collect()
}

fn oracle_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn max_diff(a: &[Vec<f64>], b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn block_diagonal_attention_matches_loop_oracle() {
    let (l, n, dh, e) = (4, 2, 3, 3);
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(3);
    let site =
        ConditionalAttentionSite::new(&mut store, "a", AttentionVariant::BlockDiagonal, l, n, e, &mut rng).unwrap();
    let mut ids = site.blocks().to_vec();
    ids.extend(site.generator().param_ids());
    randomize(&mut store, &ids, 0.8, 4);
    let q = uniform(&[l, dh], 1.0, &mut rng);
    let k = uniform(&[l, dh], 1.0, &mut rng);
    let v = uniform(&[l, dh], 1.0, &mut rng);
    let z = vec![0.3, -0.7, 0.5];

    let tape = Tape::inference();
    let zv = tape.constant(Tensor::vector(z.clone()));
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = site.attend(&tape, &store, qv, kv, vv, zv).unwrap();

    let (gamma, beta) = film(&z, &store, site.generator());
    let side = l / n;
    let mut m = vec![vec![0.0; l]; l];
    for (b, &id) in site.blocks().iter().enumerate() {
        let a = store.get(id).data();
        for i in 0..side {
            for j in 0..side {
                let p = i * side + j;
                m[b * side + i][b * side + j] = gamma[p] * a[p] + beta[p];
            }
        }
    }
    let (qm, km, vm) = (mat(q.data(), dh), mat(k.data(), dh), mat(v.data(), dh));
    let mut expected = vec![vec![0.0; dh]; l];
    for i in 0..l {
        let scores: Vec<f64> = (0..l)
            .map(|j| {
                let dot: f64 = (0..dh).map(|t| qm[i][t] * km[j][t]).sum();
                dot / (dh as f64).sqrt() + m[i][j]
            })
            .collect();
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let total: f64 = w.iter().sum();
        for j in 0..l {
            for t in 0..dh {
                expected[i][t] += w[j] / total * vm[j][t];
            }
        }
    }
    assert!(max_diff(&expected, &tape.values(out)) < 1e-10);

    let short = tape.constant(Tensor::zeros(&[3, dh]));
    assert_eq!(
        site.attend(&tape, &store, short, short, short, zv).unwrap_err(),
        ModelError::SequenceLength { expected: 4, found: 3 }
    );
}

#[test]
fn conditional_bias_is_exactly_zero_at_init() {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(9);
    for variant in [AttentionVariant::BlockDiagonal, AttentionVariant::FullBlock] {
        let site = ConditionalAttentionSite::new(&mut store, &format!("{variant:?}"), variant, 6, 3, 4, &mut rng)
            .unwrap();
        let tape = Tape::inference();
        let z = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.1]));
        let m = site.conditional_matrix(&tape, &store, z).unwrap();
        assert_eq!(tape.shape(m), vec![6, 6]);
        assert!(tape.values(m).iter().all(|&x| x == 0.0));
        let expected_gen = if variant == AttentionVariant::FullBlock { 36 } else { 4 };
        assert_eq!(site.generator().output_dim(), expected_gen);
    }
}

#[test]
fn alignment_matches_loop_oracle() {
    let d = 4;
    let mut store = ParamStore::new();
    let site = ConditionalAlignmentSite::new(&mut store, "align", d, 3).unwrap();
    let mut ids = vec![site.weight().base()];
    ids.extend(site.weight().generator().param_ids());
    randomize(&mut store, &ids, 0.9, 5);
    let mut rng = rng_from_seed(6);
    let x = uniform(&[3, d], 1.0, &mut rng);
    let z = vec![0.2, 0.4, -0.6];
    let tape = Tape::inference();
    let out = site
        .forward(&tape, &store, tape.constant(x.clone()), tape.constant(Tensor::vector(z.clone())))
        .unwrap();
    let (gamma, beta) = film(&z, &store, site.weight().generator());
    let r = mat(store.get(site.weight().base()).data(), d);
    let r_hat: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| gamma[i] * r[i][j] + beta[i]).collect())
        .collect();
    let expected = mm(&mat(x.data(), d), &r_hat);
    assert!(max_diff(&expected, &tape.values(out)) < 1e-12);
}

#[test]
fn alignment_is_identity_at_init() {
    let mut store = ParamStore::new();
    let site = ConditionalAlignmentSite::new(&mut store, "align", 3, 2).unwrap();
    let tape = Tape::inference();
    let x = Tensor::from_rows(&[vec![1.5, -2.0, 0.25], vec![3.0, 7.0, -1.0]]).unwrap();
    let z = tape.constant(Tensor::vector(vec![0.9, -0.4]));
    let out = site.forward(&tape, &store, tape.constant(x.clone()), z).unwrap();
    assert_eq!(tape.values(out), x.data());
}

#[test]
fn conditional_layer_norm_matches_loop_oracle() {
    let d = 5;
    let mut store = ParamStore::new();
    let site = ConditionalLayerNormSite::new(&mut store, "cln", d, 2, true).unwrap();
    let mut ids = vec![site.inherited().gamma, site.inherited().beta];
    ids.extend(site.generator().param_ids());
    randomize(&mut store, &ids, 1.2, 7);
    let mut rng = rng_from_seed(8);
    let a = uniform(&[3, d], 2.0, &mut rng);
    let z = vec![0.7, -0.3];
    let tape = Tape::inference();
    let out = site
        .forward(&tape, &store, tape.constant(a.clone()), tape.constant(Tensor::vector(z.clone())))
        .unwrap();
    let (gamma, beta) = film(&z, &store, site.generator());
    let g0 = store.get(site.inherited().gamma).data();
    let b0 = store.get(site.inherited().beta).data();
    let scale: Vec<f64> = (0..d).map(|j| g0[j] * gamma[j]).collect();
    let shift: Vec<f64> = (0..d).map(|j| b0[j] + beta[j]).collect();
    let expected = oracle_layer_norm(&mat(a.data(), d), &scale, &shift);
    assert!(max_diff(&expected, &tape.values(out)) < 1e-10);
}

#[test]
fn top_bottleneck_matches_loop_oracle() {
    let (l, d, k) = (2, 4, 2);
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(10);
    let site = ConditionalBottleneckSite::new(&mut store, "bn", BottleneckVariant::BaseTop, d, k, 3, &mut rng).unwrap();
    let (db, ub) = site.biases();
    let cln = site.norm().unwrap();
    let mut ids = vec![site.down().base(), site.up().base(), db, ub, cln.inherited().gamma, cln.inherited().beta];
    ids.extend(site.down().generator().param_ids());
    ids.extend(site.up().generator().param_ids());
    ids.extend(cln.generator().param_ids());
    randomize(&mut store, &ids, 0.7, 11);
    let h = uniform(&[l, d], 1.5, &mut rng);
    let z = vec![0.1, -0.5, 0.8];
    let tape = Tape::inference();
    let out = site
        .forward(&tape, &store, tape.constant(h.clone()), tape.constant(Tensor::vector(z.clone())))
        .unwrap();

    let (cg, cb) = film(&z, &store, cln.generator());
    let g0 = store.get(cln.inherited().gamma).data();
    let b0 = store.get(cln.inherited().beta).data();
    let scale: Vec<f64> = (0..d).map(|j| g0[j] * cg[j]).collect();
    let shift: Vec<f64> = (0..d).map(|j| b0[j] + cb[j]).collect();
    let hm = mat(h.data(), d);
    let normed = oracle_layer_norm(&hm, &scale, &shift);
    let modulate = |w: &ModulatedWeight, cols: usize| -> Vec<Vec<f64>> {
        let (g, b) = film(&z, &store, w.generator());
        mat(store.get(w.base()).data(), cols)
            .into_iter()
            .enumerate()
            .map(|(i, row)| row.into_iter().map(|x| g[i] * x + b[i]).collect())
            .collect()
    };
    let down = modulate(site.down(), k);
    let up = modulate(site.up(), d);
    let mut hidden = mm(&normed, &down);
    for row in hidden.iter_mut() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = oracle_gelu(*x + store.get(db).data()[j]);
        }
    }
    let branch = mm(&hidden, &up);
    let expected: Vec<Vec<f64>> = (0..l)
        .map(|i| (0..d).map(|j| hm[i][j] + branch[i][j] + store.get(ub).data()[j]).collect())
        .collect();
    assert!(max_diff(&expected, &tape.values(out)) < 1e-10);

    let zv = tape.constant(Tensor::vector(z));
    let hv = tape.constant(h);
    assert!(matches!(
        site.skip(&tape, &store, hv, None, zv),
        Err(ModelError::VariantMismatch { .. })
    ));
}

#[test]
fn skip_bottleneck_chains_state() {
    let d = 3;
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(12);
    let site = ConditionalBottleneckSite::new(&mut store, "s", BottleneckVariant::LargeSkip, d, 2, 2, &mut rng).unwrap();
    assert!(site.norm().is_none());
    let (db, ub) = site.biases();
    randomize(&mut store, &[site.up().base(), db, ub], 0.5, 13);
    let tape = Tape::inference();
    let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let h = tape.constant(uniform(&[2, d], 1.0, &mut rng));
    let prev = tape.constant(uniform(&[2, d], 1.0, &mut rng));
    let s = site.skip(&tape, &store, h, Some(prev), z).unwrap();
    let summed = tape.add(h, prev).unwrap();
    let direct = site.skip(&tape, &store, summed, None, z).unwrap();
    assert_eq!(tape.values(s), tape.values(direct));
}

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::camtl(4, 8, 2, 2, 7);
    c.ff_dim = Some(8);
    c
}

fn two_tasks() -> Vec<(String, TaskKind)> {
    vec![
        ("cls".into(), TaskKind::Classification { classes: 3 }),
        ("reg".into(), TaskKind::Regression { min: -1.0, max: 3.0 }),
    ]
}

#[test]
fn model_layout_follows_config() {
    let model = CaMtlModel::new(ModelConfig::camtl(4, 8, 4, 2, 9), &two_tasks(), 1).unwrap();
    let layers = model.layers();
    assert!(layers[0].frozen() && layers[1].frozen());
    assert!(layers[0].attention().is_none() && layers[2].attention().is_some());
    assert!(matches!(layers[1].norms().0, NormSite::Plain(_)));
    assert!(matches!(layers[3].norms().1, NormSite::Conditional(_)));
    assert!(layers[2].bottleneck().is_some() && layers[1].bottleneck().is_none());
    for id in model.frozen_params() {
        assert!(!model.store().get(id).requires_grad(), "{}", model.store().name(id));
    }
    assert_eq!(model.tasks().names(), ["cls", "reg"]);
}

#[test]
fn conditional_model_equals_plain_transformer_at_init() {
    for variant in [BottleneckVariant::BaseTop, BottleneckVariant::LargeSkip] {
        let mut c = small_config();
        c.bottleneck_variant = variant;
        let model = CaMtlModel::new(c, &two_tasks(), 2).unwrap();
        let tokens = [CLS_ID, 4, 5, 2];
        let tape = Tape::inference();
        let plain = model.plain_context(&tape).unwrap();
        let base = tape.values(model.encode(&tape, &plain, &tokens).unwrap());
        for task in ["cls", "reg"] {
            let ctx = model.context(&tape, task).unwrap();
            assert_eq!(tape.values(model.encode(&tape, &ctx, &tokens).unwrap()), base);
        }
    }
}

#[test]
fn padding_rows_do_not_reach_the_pooled_output() {
    let mut model = CaMtlModel::new(small_config(), &two_tasks(), 3).unwrap();
    let all: Vec<ParamId> = model.store().ids().filter(|&id| model.store().get(id).requires_grad()).collect();
    randomize(model.store_mut(), &all, 0.3, 14);
    let before = model.predict("cls", &[CLS_ID, 3]).unwrap();
    let tok = model.embedding_params()[0];
    let mut table = model.store().get(tok).clone();
    table.data_mut()[..8].iter_mut().for_each(|x| *x += 5.0);
    model.store_mut().replace(tok, table);
    assert_eq!(model.predict("cls", &[CLS_ID, 3]).unwrap(), before);
}

#[test]
fn predictions_have_the_head_shape() {
    let model = CaMtlModel::new(small_config(), &two_tasks(), 4).unwrap();
    match model.predict("cls", &[CLS_ID, 2, 3]).unwrap() {
        Prediction::Probs(p) => {
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(model.predict("reg", &[CLS_ID]).unwrap(), Prediction::Value(_)));
    assert!(matches!(model.predict("cls", &[CLS_ID, 7]), Err(ModelError::Token { id: 7, vocab: 7 })));
    assert!(matches!(
        model.predict("nope", &[CLS_ID]),
        Err(ModelError::Conditioning(ConditioningError::UnknownTask { .. }))
    ));
    let tape = Tape::inference();
    let enc = model.encoder_forward(&tape, &[CLS_ID], "cls").unwrap();
    assert!(matches!(
        model.heads()[0].forward(&tape, model.store(), enc, "reg"),
        Err(ModelError::HeadMismatch { .. })
    ));
}

#[test]
fn gradients_respect_freezing_and_task_isolation() {
    let mut model = CaMtlModel::new(small_config(), &two_tasks(), 5).unwrap();
    let trainable: Vec<ParamId> = model.store().ids().filter(|&id| model.store().get(id).requires_grad()).collect();
    randomize(model.store_mut(), &trainable, 0.3, 17);
    let tape = Tape::new();
    let loss = model
        .batch_loss(&tape, "cls", &[(&[CLS_ID, 2, 3][..], Target::Class(1)), (&[CLS_ID, 4][..], Target::Class(0))])
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    for id in model.frozen_params() {
        assert!(grads.param(id).is_none());
    }
    let table = model.tasks().param();
    let g = grads.param(table).unwrap();
    let d = model.config().d_model;
    assert!(g[..d].iter().any(|&x| x != 0.0));
    assert!(g[d..].iter().all(|&x| x == 0.0));
    assert_eq!(grads.touched_rows(table).unwrap().iter().copied().collect::<Vec<_>>(), vec![0]);
    let reg_head = model.head("reg").unwrap().weight();
    assert!(grads.param(reg_head).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
}

#[test]
fn mismatched_target_is_rejected() {
    let model = CaMtlModel::new(small_config(), &two_tasks(), 5).unwrap();
    let tape = Tape::new();
    assert!(model.batch_loss(&tape, "reg", &[(&[CLS_ID][..], Target::Class(1))]).is_err());
    assert!(model.batch_loss(&tape, "reg", &[]).is_err());
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    for variant in [BottleneckVariant::BaseTop, BottleneckVariant::LargeSkip] {
        let mut c = small_config();
        c.bottleneck_variant = variant;
        c.n_layers = 2;
        c.frozen_layers = Some(vec![]);
        let mut model = CaMtlModel::new(c, &two_tasks(), 6).unwrap();
        let trainable: Vec<ParamId> = model.store().ids().filter(|&id| model.store().get(id).requires_grad()).collect();
        randomize(model.store_mut(), &trainable, 0.4, 15);
        let err = fd_on_model(&model, &trainable);
        assert!(err < 1e-5, "{variant:?}: relative error {err}");
    }
}

/// Central differences over every element of `ids`, perturbing a clone of
/// the model so the shared regression loss sees each change.
fn fd_on_model(model: &CaMtlModel, ids: &[ParamId]) -> f64 {
    let eval = |m: &CaMtlModel| -> f64 {
        let tape = Tape::inference();
        let v = regression_loss(m, &tape);
        tape.scalar(v).unwrap()
    };
    let analytic = {
        let tape = Tape::new();
        let v = regression_loss(model, &tape);
        tape.backward(v).unwrap()
    };
    let step = 1e-6;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let n = model.store().get(id).numel();
        let g = analytic.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = model.store().get(id).data()[i];
            probe.store_mut().get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe);
            probe.store_mut().get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe);
            probe.store_mut().get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * step);
            // Many entries are ~1e-7; floor the scale so roundoff in the
            // numeric estimate is not mistaken for a wrong gradient.
            worst = worst.max((g[i] - num).abs() / num.abs().max(1e-3));
        }
    }
    worst
}

fn regression_loss<'a>(m: &'a CaMtlModel, tape: &Tape<'a>) -> Var {
    let batch = [(&[CLS_ID, 2, 5][..], Target::Value(0.5)), (&[CLS_ID, 3, 3, 4][..], Target::Value(2.0))];
    m.batch_loss(tape, "reg", &batch).unwrap()
}

#[test]
fn generator_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let g = FilmGenerator::identity(&mut store, "g", 2, 3).unwrap();
    randomize(&mut store, &g.param_ids(), 0.5, 16);
    let base = store.add("w", Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![2.0, 1.0]]).unwrap().with_requires_grad(true)).unwrap();
    let w = ModulatedWeight::new(&store, base, g, Arity::PerRow).unwrap();
    let mut ids = w.generator().param_ids().to_vec();
    ids.push(base);
    let err = finite_diff_check_params(&store, &ids, 1e-6, |tape, s| {
        let z = tape.constant(Tensor::vector(vec![0.4, -1.1]));
        let m = w.modulate(tape, s, z).map_err(|e| TensorError::Oracle(e.to_string()))?;
        let sq = tape.mul(m, m)?;
        Ok(tape.sum(sq))
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn adding_a_task_leaves_existing_outputs_unchanged() {
    let mut model = CaMtlModel::new(small_config(), &two_tasks(), 7).unwrap();
    let tokens = [CLS_ID, 2, 6];
    let before: Vec<_> = ["cls", "reg"].iter().map(|t| model.predict(t, &tokens).unwrap()).collect();
    model
        .add_task("new", TaskKind::Classification { classes: 2 }, &EmbeddingInit::CopyOf("cls".into()))
        .unwrap();
    let after: Vec<_> = ["cls", "reg"].iter().map(|t| model.predict(t, &tokens).unwrap()).collect();
    assert_eq!(before, after);
    assert_eq!(model.tasks().row(model.store(), "new").unwrap(), model.tasks().row(model.store(), "cls").unwrap());
    assert!(model.add_task("new", TaskKind::Classification { classes: 2 }, &EmbeddingInit::Zeros).is_err());
    assert!(matches!(model.predict("new", &tokens).unwrap(), Prediction::Probs(p) if p.len() == 2));
}

#[test]
fn first_layer_inputs_average_real_positions() {
    let model = CaMtlModel::new(small_config(), &two_tasks(), 8).unwrap();
    let pooled = model.first_layer_inputs("cls", &[&[CLS_ID, 3][..]]).unwrap();
    let tok = model.store().get(model.embedding_params()[0]).data();
    let pos = model.store().get(model.embedding_params()[1]).data();
    let d = 8;
    for j in 0..d {
        let expected = (tok[d + j] + pos[j] + tok[3 * d + j] + pos[d + j]) / 2.0;
        assert!((pooled[0][j] - expected).abs() < 1e-12);
    }
}
