//! Finite-difference gradient checks for every differentiable component.
//!
//! Each component is a small 64-bit graph. Its output is projected onto a
//! fixed random direction to get a scalar, the tape gradient of that scalar
//! is compared with central differences, and the worst error over all
//! checked scalars is reported. Errors are `|a - n| / max(1, |a|, |n|)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{
    coarse_to_fine, cross_attention, fusion_block, CrossAttention, FusionBlock, FusionConfig, FusionStack,
};
use crate::model::{Model, ModelConfig, Variant};
use crate::numerics::{num_bins, Fault, Tensor, Var};
use crate::params::{Mode, ParamStore, Session};
use crate::pyramid::{build_frequency_pyramid, make_band_partition, BandOrder};
use crate::revin::{revin_denormalize, revin_normalize, Revin};
use crate::trainer::mse_loss;

pub const THRESHOLD: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

type Build<'a> = dyn Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + 'a;

/// Worst error of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: String,
    pub max_error: f64,
    pub scalars: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.max_error < self.threshold)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.components
            .iter()
            .filter(|c| !(c.max_error < self.threshold))
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.components.iter().map(|c| c.max_error).fold(0.0, f64::max)
    }
}

/// Checks the gradient of `build` with respect to `inputs` (passed as tape
/// leaves) and every parameter in `params`.
pub fn check_graph(
    inputs: &[Tensor<f64>],
    params: &ParamStore<f64>,
    fault: Option<Fault>,
    build: &Build<'_>,
) -> Result<(f64, usize)> {
    let direction = {
        let mut sess = Session::inference(params);
        let vars: Vec<Var> = inputs.iter().map(|t| sess.tape.constant(t.clone())).collect();
        let out = build(&mut sess, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        Tensor::randn(sess.tape.shape(out).to_vec(), 1.0, &mut rng)
    };

    let (input_grads, param_grads) = {
        let mut sess = Session::new(params, Mode::Eval);
        if let Some(f) = fault {
            sess.tape.inject_fault(f);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| sess.tape.leaf(t.clone())).collect();
        let out = build(&mut sess, &vars)?;
        let w = sess.tape.constant(direction.clone());
        let prod = sess.tape.mul(out, w)?;
        let loss = sess.tape.sum(prod);
        sess.tape.backward(loss)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| sess.tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (ig, sess.param_grads())
    };

    let objective = |ins: &[Tensor<f64>], store: &ParamStore<f64>| -> Result<f64> {
        let mut sess = Session::inference(store);
        let vars: Vec<Var> = ins.iter().map(|t| sess.tape.constant(t.clone())).collect();
        let out = build(&mut sess, &vars)?;
        Ok(sess.tape.value(out).data().iter().zip(direction.data()).map(|(a, b)| a * b).sum())
    };
    let error = |analytic: f64, numeric: f64| (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);

    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut ins = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = ins[i].data()[j];
            ins[i].data_mut()[j] = orig + STEP;
            let plus = objective(&ins, params)?;
            ins[i].data_mut()[j] = orig - STEP;
            let minus = objective(&ins, params)?;
            ins[i].data_mut()[j] = orig;
            worst = worst.max(error(input_grads[i][j], (plus - minus) / (2.0 * STEP)));
            count += 1;
        }
    }
    let mut store = params.clone();
    for id in params.ids() {
        for j in 0..params.get(id).numel() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + STEP;
            let plus = objective(inputs, &store)?;
            store.get_mut(id).data_mut()[j] = orig - STEP;
            let minus = objective(inputs, &store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let analytic = param_grads[id.index()].as_ref().map_or(0.0, |g| g[j]);
            worst = worst.max(error(analytic, (plus - minus) / (2.0 * STEP)));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Tiny end-to-end configuration used by the suite.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        l_in: 8,
        l_pred: 4,
        channels: 2,
        levels: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        dropout: 0.0,
        variant,
        ..ModelConfig::default()
    }
}

struct Component<'a> {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    params: ParamStore<f64>,
    build: Box<Build<'a>>,
}

fn component<'a>(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    params: ParamStore<f64>,
    build: impl Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var> + 'a,
) -> Component<'a> {
    Component {
        name,
        inputs,
        params,
        build: Box::new(build),
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Positive values away from zero, for divisors.
fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(shape, rng).map(|v| 1.0 + v.abs())
}

fn build_components() -> Result<Vec<Component<'static>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let r = &mut rng;
    let none = ParamStore::new;
    let mut list = vec![
        component("add", vec![randn(&[2, 3, 4], r), randn(&[3, 1], r)], none(), |s, v| s.tape.add(v[0], v[1])),
        component("sub", vec![randn(&[2, 3], r), randn(&[3], r)], none(), |s, v| s.tape.sub(v[0], v[1])),
        component("mul", vec![randn(&[2, 3, 4], r), randn(&[1, 3, 1], r)], none(), |s, v| s.tape.mul(v[0], v[1])),
        component("div", vec![randn(&[2, 3], r), positive(&[2, 1], r)], none(), |s, v| s.tape.div(v[0], v[1])),
        component("scale", vec![randn(&[5], r)], none(), |s, v| Ok(s.tape.scale(v[0], -1.7))),
        component("square", vec![randn(&[2, 4], r)], none(), |s, v| Ok(s.tape.square(v[0]))),
        component("gelu", vec![randn(&[3, 5], r)], none(), |s, v| Ok(s.tape.gelu(v[0]))),
        component("matmul", vec![randn(&[2, 2, 3, 4], r), randn(&[2, 1, 4, 5], r)], none(), |s, v| {
            s.tape.matmul(v[0], v[1])
        }),
        component("softmax", vec![randn(&[2, 3, 4], r)], none(), |s, v| s.tape.softmax(v[0], 2)),
        component("softmax_axis1", vec![randn(&[2, 3, 4], r)], none(), |s, v| s.tape.softmax(v[0], 1)),
        component(
            "layer_norm",
            vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)],
            none(),
            |s, v| s.tape.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        component("avg_pool", vec![randn(&[2, 8, 3], r)], none(), |s, v| s.tape.avg_pool(v[0])),
        component("upsample", vec![randn(&[2, 4, 3], r)], none(), |s, v| s.tape.upsample(v[0], 8)),
        component("rfft", vec![randn(&[2, 8], r)], none(), |s, v| s.tape.rfft(v[0])),
        component("rfft_odd", vec![randn(&[3, 7], r)], none(), |s, v| s.tape.rfft(v[0])),
        component("irfft", vec![randn(&[2, 5, 2], r)], none(), |s, v| s.tape.irfft(v[0], 8)),
        component("irfft_odd", vec![randn(&[2, 4, 2], r)], none(), |s, v| s.tape.irfft(v[0], 7)),
        component("permute", vec![randn(&[2, 3, 4], r)], none(), |s, v| s.tape.permute(v[0], &[2, 0, 1])),
        component("concat", vec![randn(&[2, 3, 2], r), randn(&[2, 3, 4], r)], none(), |s, v| {
            s.tape.concat(&[v[0], v[1]], 2)
        }),
        component("narrow", vec![randn(&[2, 6, 3], r)], none(), |s, v| s.tape.narrow(v[0], 1, 2, 3)),
        component("mean_axis", vec![randn(&[2, 5, 3], r)], none(), |s, v| s.tape.mean_axis(v[0], 1)),
        component("sum", vec![randn(&[4, 3], r)], none(), |s, v| Ok(s.tape.sum(v[0]))),
        component("dropout", vec![randn(&[2, 6], r)], none(), |s, v| {
            let mask = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
            s.tape.dropout_with_mask(v[0], mask)
        }),
        component("mse_loss", vec![randn(&[2, 4, 3], r), randn(&[2, 4, 3], r)], none(), |s, v| {
            mse_loss(&mut s.tape, v[0], v[1])
        }),
    ];

    let partition = make_band_partition(num_bins(8), 3)?;
    list.push(component("frequency_pyramid", vec![randn(&[2, 8, 2], r)], none(), move |s, v| {
        let levels = build_frequency_pyramid(&mut s.tape, v[0], &partition, BandOrder::LowFirst)?;
        let flat: Vec<Var> = levels
            .into_iter()
            .map(|l| {
                let n = s.tape.value(l).numel();
                s.tape.reshape(l, vec![n])
            })
            .collect::<Result<_>>()?;
        s.tape.concat(&flat, 0)
    }));

    let mut store = ParamStore::new();
    let revin = Revin::new(&mut store, 3, true, 1e-5);
    let (g, b) = revin.affine.expect("affine");
    store.set(g, randn(&[3], r).map(|v| 1.0 + 0.3 * v))?;
    store.set(b, randn(&[3], r))?;
    let x = randn(&[2, 6, 3], r).map(|v| 2.0 * v + 0.5);
    let y = randn(&[2, 4, 3], r);
    list.push(component("revin", vec![], store, move |s, _| {
        let xv = s.tape.constant(x.clone());
        let (norm, state) = revin_normalize(s, xv, &revin)?;
        let yv = s.tape.constant(y.clone());
        let back = revin_denormalize(s, yv, &state, &revin)?;
        let a = s.tape.reshape(norm, vec![36])?;
        let b = s.tape.reshape(back, vec![24])?;
        s.tape.concat(&[a, b], 0)
    }));

    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "attn", 4, 2, r);
    list.push(component(
        "cross_attention",
        vec![randn(&[2, 3, 4], r), randn(&[2, 5, 4], r)],
        store,
        move |s, v| cross_attention(s, v[0], v[1], &attn, 0.0, None),
    ));

    let fcfg = FusionConfig {
        seq_len: 4,
        levels: 2,
        d_model: 4,
        heads: 2,
        d_ff: 6,
        dropout: 0.0,
        cross_attention: true,
    };
    let mut store = ParamStore::new();
    let block = FusionBlock::new(&mut store, "block", &fcfg, r);
    perturb_norms(&mut store, r);
    list.push(component(
        "fusion_block",
        vec![randn(&[2, 4, 4], r), randn(&[2, 4, 4], r)],
        store,
        move |s, v| {
            let (t, f) = fusion_block(s, v[0], v[1], &block, 0.0, 0)?;
            s.tape.concat(&[t, f], 2)
        },
    ));

    let mut store = ParamStore::new();
    let stack = FusionStack::new(&mut store, fcfg, r)?;
    perturb_norms(&mut store, r);
    list.push(component(
        "coarse_to_fine",
        vec![randn(&[1, 4, 2], r), randn(&[1, 4, 2], r), randn(&[1, 2, 2], r), randn(&[1, 2, 2], r)],
        store,
        move |s, v| coarse_to_fine(s, &[(v[0], v[1]), (v[2], v[3])], &stack),
    ));

    for (name, variant) in [
        ("model_full", Variant::Full),
        ("model_temporal_only", Variant::TemporalOnly),
        ("model_frequency_only", Variant::FrequencyOnly),
        ("model_no_cross_fusion", Variant::NoCrossFusion),
    ] {
        let (model, mut store) = Model::new::<f64>(&tiny_config(variant), 11)?;
        perturb_norms(&mut store, r);
        let x = randn(&[2, 8, 2], r).map(|v| 3.0 * v + 1.0);
        let target = randn(&[2, 4, 2], r);
        list.push(component(name, vec![], store, move |s, _| {
            let xv = s.tape.constant(x.clone());
            let out = model.forward_vars(s, xv)?;
            let t = s.tape.constant(target.clone());
            mse_loss(&mut s.tape, out.values, t)
        }));
    }
    Ok(list)
}

/// Moves gains and biases off their `1`/`0` initialization.
fn perturb_norms(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, name, _)| name.ends_with(".gain") || name.ends_with(".bias"))
        .map(|(id, _, t)| (id, t.shape().to_vec()))
        .collect();
    for (id, shape) in ids {
        let noise = Tensor::randn(shape, 0.2, rng);
        let t = store.get_mut(id);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, n)| *a += n);
    }
}

/// Names of every component in the suite, in run order.
pub fn component_names() -> Result<Vec<&'static str>> {
    Ok(build_components()?.into_iter().map(|c| c.name).collect())
}

/// Runs the suite, optionally with an injected backward fault.
pub fn run_suite(fault: Option<Fault>) -> Result<GradcheckReport> {
    run_filtered(fault, |_| true)
}

/// Runs the components whose name passes `keep`.
pub fn run_filtered(fault: Option<Fault>, keep: impl Fn(&str) -> bool) -> Result<GradcheckReport> {
    let mut components = Vec::new();
    for c in build_components()?.into_iter().filter(|c| keep(c.name)) {
        let (max_error, scalars) = check_graph(&c.inputs, &c.params, fault, &*c.build)?;
        components.push(ComponentReport {
            name: c.name.to_string(),
            max_error,
            scalars,
        });
    }
    Ok(GradcheckReport {
        threshold: THRESHOLD,
        components,
    })
}
