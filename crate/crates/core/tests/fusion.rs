use dpanet::fusion::{
    coarse_to_fine, cross_attention, embed_scale, fusion_block, CrossAttention, FusionBlock, FusionConfig,
    FusionStack, ScaleEmbedding,
};
use dpanet::model::{Model, ModelConfig, Variant};
use dpanet::numerics::Tensor;
use dpanet::params::{Linear, Mode, ParamStore, Session};
use dpanet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn zero_matching(store: &mut ParamStore<f64>, pred: impl Fn(&str) -> bool) {
    let ids: Vec<_> = store.iter().filter(|(_, n, _)| pred(n)).map(|(id, _, _)| id).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `x (n, in) · W + b` with plain loops.
fn affine(store: &ParamStore<f64>, lin: &Linear, x: &[f64], n: usize) -> Vec<f64> {
    let w = store.get(lin.weight).data();
    let b = store.get(lin.bias).data();
    let (i_dim, o_dim) = (lin.in_dim, lin.out_dim);
    let mut out = vec![0.0; n * o_dim];
    for r in 0..n {
        for o in 0..o_dim {
            let mut acc = b[o];
            for i in 0..i_dim {
                acc += x[r * i_dim + i] * w[i * o_dim + o];
            }
            out[r * o_dim + o] = acc;
        }
    }
    out
}

/// Per-head loop oracle for one batch row.
fn naive_attention(store: &ParamStore<f64>, attn: &CrossAttention, q: &[f64], kv: &[f64], lq: usize, lk: usize, d: usize) -> Vec<f64> {
    let h = attn.heads;
    let dh = d / h;
    let qp = affine(store, &attn.query, q, lq);
    let kp = affine(store, &attn.key, kv, lk);
    let vp = affine(store, &attn.value, kv, lk);
    let mut concat = vec![0.0; lq * d];
    for head in 0..h {
        for i in 0..lq {
            let scores: Vec<f64> = (0..lk)
                .map(|j| (0..dh).map(|c| qp[i * d + head * dh + c] * kp[j * d + head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..dh {
                concat[i * d + head * dh + c] = (0..lk).map(|j| exps[j] / z * vp[j * d + head * dh + c]).sum();
            }
        }
    }
    affine(store, &attn.output, &concat, lq)
}

fn run_attention(store: &ParamStore<f64>, attn: &CrossAttention, q: &Tensor<f64>, kv: &Tensor<f64>) -> Tensor<f64> {
    let mut sess = Session::new(store, Mode::Eval);
    let qv = sess.tape.constant(q.clone());
    let kvv = sess.tape.constant(kv.clone());
    let out = cross_attention(&mut sess, qv, kvv, attn, 0.0, None).unwrap();
    sess.tape.value(out).clone()
}

#[test]
fn attention_matches_per_head_oracle() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "a", 4, 2, &mut r);
    let q = Tensor::randn(vec![2, 3, 4], 1.0, &mut r);
    let kv = Tensor::randn(vec![2, 3, 4], 1.0, &mut r);
    let out = run_attention(&store, &attn, &q, &kv);
    assert_eq!(out.shape(), q.shape());
    for b in 0..2 {
        let expect = naive_attention(&store, &attn, &q.data()[b * 12..(b + 1) * 12], &kv.data()[b * 12..(b + 1) * 12], 3, 3, 4);
        for (a, e) in out.data()[b * 12..(b + 1) * 12].iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }
}

#[test]
fn single_key_returns_projected_value() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "a", 4, 2, &mut r);
    let q = Tensor::randn(vec![1, 5, 4], 1.0, &mut r);
    let kv = Tensor::randn(vec![1, 1, 4], 1.0, &mut r);
    let out = run_attention(&store, &attn, &q, &kv);
    let v = affine(&store, &attn.value, kv.data(), 1);
    let expect = affine(&store, &attn.output, &v, 1);
    for i in 0..5 {
        for c in 0..4 {
            assert!((out.at(&[0, i, c]) - expect[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_scores_average_the_values() {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "a", 4, 2, &mut r);
    zero_matching(&mut store, |n| n.starts_with("a.query"));
    let q = Tensor::randn(vec![1, 2, 4], 1.0, &mut r);
    let kv = Tensor::randn(vec![1, 6, 4], 1.0, &mut r);
    let out = run_attention(&store, &attn, &q, &kv);
    let v = affine(&store, &attn.value, kv.data(), 6);
    let mean: Vec<f64> = (0..4).map(|c| (0..6).map(|j| v[j * 4 + c]).sum::<f64>() / 6.0).collect();
    let expect = affine(&store, &attn.output, &mean, 1);
    for i in 0..2 {
        for c in 0..4 {
            assert!((out.at(&[0, i, c]) - expect[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn head_count_must_divide_width() {
    let mut store = ParamStore::<f64>::new();
    let attn = CrossAttention::new(&mut store, "a", 4, 3, &mut rng(0));
    let mut sess = Session::new(&store, Mode::Eval);
    let q = sess.tape.constant(Tensor::zeros(vec![1, 2, 4]));
    assert!(matches!(cross_attention(&mut sess, q, q, &attn, 0.0, None), Err(Error::Config(_))));
    let cfg = FusionConfig {
        seq_len: 8,
        levels: 2,
        d_model: 4,
        heads: 3,
        d_ff: 4,
        dropout: 0.0,
        cross_attention: true,
    };
    assert!(FusionStack::new(&mut ParamStore::<f64>::new(), cfg, &mut rng(0)).is_err());
}

#[test]
fn embedding_contracts() {
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let emb = ScaleEmbedding::new(&mut store, "e", 6, 8, &mut r);
    let series: Vec<f64> = (0..6).map(|t| (t as f64).sin()).collect();
    let mut data = Vec::new();
    for t in 0..6 {
        data.extend([series[t], series[t], 0.5]);
    }
    let mut sess = Session::new(&store, Mode::Eval);
    let x = sess.tape.constant(Tensor::new(vec![1, 6, 3], data).unwrap());
    let h = embed_scale(&mut sess, x, &emb).unwrap();
    assert_eq!(sess.tape.shape(h), [3, 6, 8]);
    let out = sess.tape.value(h).data();
    assert_eq!(out[..48], out[48..96]);
    assert_ne!(out[..48], out[96..]);

    let bad = sess.tape.constant(Tensor::zeros(vec![1, 5, 3]));
    assert!(matches!(embed_scale(&mut sess, bad, &emb), Err(Error::Contract(_))));

    zero_matching(&mut store, |n| n.ends_with("bias") || n.ends_with("position"));
    let mut sess = Session::new(&store, Mode::Eval);
    let x = sess.tape.constant(Tensor::zeros(vec![2, 6, 1]));
    let h = embed_scale(&mut sess, x, &emb).unwrap();
    assert!(sess.tape.value(h).data().iter().all(|&v| v == 0.0));
}

fn tiny_fusion(levels: usize, seq_len: usize) -> FusionConfig {
    FusionConfig {
        seq_len,
        levels,
        d_model: 4,
        heads: 2,
        d_ff: 8,
        dropout: 0.0,
        cross_attention: true,
    }
}

fn layer_normed(x: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d)
        .flat_map(|row| {
            let m = row.iter().sum::<f64>() / d as f64;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
            row.iter().map(move |a| (a - m) / (v + 1e-5).sqrt()).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn zero_weight_block_reduces_to_layer_norm() {
    let mut r = rng(5);
    let cfg = tiny_fusion(2, 8);
    let mut store = ParamStore::new();
    let block = FusionBlock::new(&mut store, "b", &cfg, &mut r);
    zero_matching(&mut store, |n| n.contains(".output.") || n.starts_with("b.ffn_out"));
    let ht = Tensor::<f64>::randn(vec![2, 5, 4], 2.0, &mut r);
    let hf = Tensor::<f64>::randn(vec![2, 5, 4], 0.5, &mut r);
    let mut sess = Session::new(&store, Mode::Eval);
    let (tv, fv) = (sess.tape.constant(ht.clone()), sess.tape.constant(hf.clone()));
    let (ot, of) = fusion_block(&mut sess, tv, fv, &block, 0.0, 0).unwrap();
    assert_eq!(sess.tape.shape(ot), ht.shape());
    // residual path only: LN over the concatenation of the two normed streams
    let (nt, nf) = (layer_normed(ht.data(), 4), layer_normed(hf.data(), 4));
    let joint: Vec<f64> = nt.chunks(4).zip(nf.chunks(4)).flat_map(|(a, b)| a.iter().chain(b).copied()).collect();
    let fused = layer_normed(&joint, 8);
    for (k, (out, single)) in [(ot, &nt), (of, &nf)].into_iter().enumerate() {
        let got = sess.tape.value(out).data();
        for (row, chunk) in fused.chunks(8).enumerate() {
            for c in 0..4 {
                let (a, e) = (got[row * 4 + c], chunk[k * 4 + c]);
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
                assert!((a - single[row * 4 + c]).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn block_rejects_mismatched_streams() {
    let cfg = tiny_fusion(2, 8);
    let mut store = ParamStore::<f64>::new();
    let block = FusionBlock::new(&mut store, "b", &cfg, &mut rng(0));
    let mut sess = Session::new(&store, Mode::Eval);
    let a = sess.tape.constant(Tensor::zeros(vec![1, 4, 4]));
    let b = sess.tape.constant(Tensor::zeros(vec![1, 2, 4]));
    assert!(fusion_block(&mut sess, a, b, &block, 0.0, 0).is_err());
}

#[test]
fn coarse_to_fine_shapes_and_degenerate_weights() {
    let mut r = rng(6);
    let cfg = tiny_fusion(2, 4);
    let mut store = ParamStore::new();
    let stack = FusionStack::new(&mut store, cfg, &mut r).unwrap();
    zero_matching(&mut store, |n| n.contains(".output.") || n.contains("ffn_out"));
    let mut sess = Session::new(&store, Mode::Eval).with_probe();
    let fine = sess.tape.constant(Tensor::<f64>::randn(vec![2, 4, 3], 1.0, &mut r));
    let coarse = sess.tape.constant(Tensor::<f64>::randn(vec![2, 2, 3], 1.0, &mut r));
    let out = coarse_to_fine(&mut sess, &[(fine, fine), (coarse, coarse)], &stack).unwrap();
    assert_eq!(sess.tape.shape(out), [6, 4, 4]);
    assert!(sess.tape.value(out).is_finite());
    let probe = sess.take_probe().unwrap();
    let scales: Vec<usize> = probe.fused.iter().map(|(s, _, _)| *s).collect();
    assert_eq!(scales, vec![1, 0]);
    assert_eq!(probe.fused[0].1.shape(), [6, 2, 4]);
    assert!(coarse_to_fine(&mut sess, &[(fine, fine)], &stack).is_err());
}

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        l_in: 16,
        l_pred: 8,
        channels: 3,
        levels: 3,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        variant,
        ..ModelConfig::default()
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (model, store) = Model::new::<f64>(&small_model(Variant::Full), 3).unwrap();
    let x = Tensor::randn(vec![2, 16, 3], 1.0, &mut rng(7));
    let (_, probe) = model.forward_probed(&store, &x).unwrap();
    assert_eq!(probe.attention.len(), 6);
    for rec in &probe.attention {
        let lk = *rec.weights.shape().last().unwrap();
        for row in rec.weights.data().chunks(lk) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let streams: Vec<_> = probe.attention.iter().map(|r| (r.scale, r.query_stream)).collect();
    assert_eq!(streams[0], (2, "temporal"));
    assert_eq!(streams[1], (2, "frequency"));
}

#[test]
fn batch_permutation_is_exact() {
    let (model, store) = Model::new::<f32>(&small_model(Variant::Full), 8).unwrap();
    let x = Tensor::<f32>::randn(vec![3, 16, 3], 1.0, &mut rng(8));
    let per = 16 * 3;
    let perm = [2usize, 0, 1];
    let mut permuted = Vec::new();
    for &p in &perm {
        permuted.extend_from_slice(&x.data()[p * per..(p + 1) * per]);
    }
    let xp = Tensor::new(vec![3, 16, 3], permuted).unwrap();
    let y = model.forward(&store, &x).unwrap().values;
    let yp = model.forward(&store, &xp).unwrap().values;
    let out = 8 * 3;
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(yp.data()[i * out..(i + 1) * out], y.data()[p * out..(p + 1) * out]);
    }
}

#[test]
fn finer_parameters_leave_coarser_activations_untouched() {
    let (model, store) = Model::new::<f64>(&small_model(Variant::Full), 9).unwrap();
    let x = Tensor::randn(vec![2, 16, 3], 1.0, &mut rng(9));
    let (_, base) = model.forward_probed(&store, &x).unwrap();
    let mut changed = store.clone();
    let ids: Vec<_> = changed.iter().filter(|(_, n, _)| n.starts_with("scale0.")).map(|(id, _, _)| id).collect();
    for id in ids {
        changed.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.3);
    }
    let (_, after) = model.forward_probed(&changed, &x).unwrap();
    for (a, b) in base.fused.iter().zip(&after.fused) {
        assert_eq!(a.0, b.0);
        if a.0 > 0 {
            assert_eq!(a.1, b.1, "scale {} temporal changed", a.0);
            assert_eq!(a.2, b.2, "scale {} frequency changed", a.0);
        } else {
            assert_ne!(a.1, b.1);
        }
    }
}

#[test]
fn ablated_variant_computes_no_attention() {
    let (model, store) = Model::new::<f64>(&small_model(Variant::NoCrossFusion), 10).unwrap();
    assert!(store.iter().all(|(_, n, _)| !n.contains("attn")));
    let x = Tensor::randn(vec![1, 16, 3], 1.0, &mut rng(10));
    let (_, probe) = model.forward_probed(&store, &x).unwrap();
    assert!(probe.attention.is_empty());
    assert_eq!(probe.fused.len(), 3);
}

#[test]
fn training_dropout_is_seeded() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..small_model(Variant::Full)
    };
    let (model, store) = Model::new::<f32>(&cfg, 11).unwrap();
    let x = Tensor::<f32>::randn(vec![2, 16, 3], 1.0, &mut rng(11));
    let run = |seed| {
        let mut sess = Session::new(&store, Mode::Train { seed });
        let xv = sess.tape.constant(x.clone());
        let out = model.forward_vars(&mut sess, xv).unwrap();
        sess.tape.value(out.values).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    assert_ne!(run(1), model.forward(&store, &x).unwrap().values);
}
