//! Finite-difference gradient verification backing `mixer gradcheck`.
//!
//! Runs the toy model in f64 and compares every parameter gradient against
//! central differences at h=1e-4. The reported metric is the worst per-tensor
//! vector relative error `||analytic - fd|| / max(||analytic||, ||fd||)`;
//! tensors whose gradient is zero on both sides (the token-MLP output bias
//! is structurally dead in eval mode) are skipped.

use mixer_core::model::{
    bind_params, build_forward, init_params, patchify, MixerConfig, MixerParams, Phase,
};
use mixer_core::rng;
use mixer_core::train::grads_like;
use mixer_core::{Error, Graph, Tensor};

pub struct Report {
    pub parameters: usize,
    pub max_rel: f64,
}

fn loss_of(
    cfg: &MixerConfig,
    params: &MixerParams<f64>,
    images: &Tensor<f64>,
    targets: &Tensor<f64>,
) -> Result<f64, Error> {
    let patches = patchify(cfg, images)?;
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params);
    let input = g.input(patches);
    let nodes = build_forward(&mut g, cfg, &bound, input, Phase::Eval, None)?;
    let loss = g.softmax_xent(nodes.logits, targets.clone())?;
    Ok(g.value(loss).item())
}

pub fn run(seed: u64) -> Result<Report, Error> {
    let cfg = MixerConfig::named("toy").expect("toy config exists");
    let mut params = init_params::<f64>(&cfg, seed)?;
    let mut r = rng::stream(seed, 41);
    for v in params.head_w.data_mut() {
        *v = rand::Rng::random_range(&mut r, -0.5..0.5);
    }
    let images = rng::uniform_tensor::<f64>(&[1, 8, 8, 3], 0.0, 1.0, &mut r);
    let mut targets = rng::uniform_tensor::<f64>(&[1, 10], 0.01, 1.0, &mut r);
    let sum: f64 = targets.data().iter().sum();
    for v in targets.data_mut() {
        *v /= sum;
    }

    let analytic = {
        let patches = patchify(&cfg, &images)?;
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params);
        let input = g.input(patches);
        let nodes = build_forward(&mut g, &cfg, &bound, input, Phase::Eval, None)?;
        let loss = g.softmax_xent(nodes.logits, targets.clone())?;
        let grads = g.backward(loss)?;
        grads_like(&params, &grads)
    };

    let h = 1e-4;
    let names = params.names();
    let mut max_rel = 0.0f64;
    let mut parameters = 0usize;
    for (ti, _name) in names.iter().enumerate() {
        let n = params.flatten()[ti].numel();
        parameters += n;
        let mut err_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut fd_sq = 0.0f64;
        for e in 0..n {
            let eval = |delta: f64| -> Result<f64, Error> {
                let mut bumped = params.clone();
                let mut idx = 0;
                bumped.visit_mut(|_, t| {
                    if idx == ti {
                        t.data_mut()[e] += delta;
                    }
                    idx += 1;
                });
                loss_of(&cfg, &bumped, &images, &targets)
            };
            let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic.flatten()[ti].data()[e];
            err_sq += (a - fd) * (a - fd);
            a_sq += a * a;
            fd_sq += fd * fd;
        }
        if a_sq.sqrt() < 1e-9 && fd_sq.sqrt() < 1e-7 {
            continue;
        }
        max_rel = max_rel.max(err_sq.sqrt() / a_sq.sqrt().max(fd_sq.sqrt()));
    }
    Ok(Report {
        parameters,
        max_rel,
    })
}
