//! Shared oracle helpers for the integration suites. Everything here is
//! deliberately independent of the library's numeric paths: plain loops,
//! series expansions, and hand-rolled elimination.

use mixer_core::model::{
    bind_params, build_forward, patchify, MixerConfig, MixerParams, Phase,
};
use mixer_core::rng::{self, Rng};
use mixer_core::{Graph, Tensor};

/// Loss of a toy model on a fixed (patches, targets) pair, rebuilt from
/// scratch; the scalar function the finite-difference oracle probes.
pub fn loss_of(
    cfg: &MixerConfig,
    params: &MixerParams<f64>,
    images: &Tensor<f64>,
    targets: &Tensor<f64>,
) -> f64 {
    let patches = patchify(cfg, images).unwrap();
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params);
    let input = g.input(patches);
    let nodes = build_forward(&mut g, cfg, &bound, input, Phase::Eval, None).unwrap();
    let loss = g.softmax_xent(nodes.logits, targets.clone()).unwrap();
    g.value(loss).item()
}

/// Analytic gradients for the same loss.
pub fn grads_of(
    cfg: &MixerConfig,
    params: &MixerParams<f64>,
    images: &Tensor<f64>,
    targets: &Tensor<f64>,
) -> MixerParams<f64> {
    let patches = patchify(cfg, images).unwrap();
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params);
    let input = g.input(patches);
    let nodes = build_forward(&mut g, cfg, &bound, input, Phase::Eval, None).unwrap();
    let loss = g.softmax_xent(nodes.logits, targets.clone()).unwrap();
    let grads = g.backward(loss).unwrap();
    mixer_core::train::grads_like(params, &grads)
}

/// Random params with a non-zero head (fresh init zeroes the head, which
/// would block gradient flow to everything upstream).
pub fn random_model(cfg: &MixerConfig, seed: u64) -> (MixerParams<f64>, Rng) {
    let mut params = mixer_core::model::init_params::<f64>(cfg, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0x5eed);
    for v in params.head_w.data_mut() {
        *v = rand::Rng::random_range(&mut r, -0.5..0.5);
    }
    for v in params.head_b.data_mut() {
        *v = rand::Rng::random_range(&mut r, -0.1..0.1);
    }
    (params, r)
}

/// Random soft targets with normalized rows.
pub fn random_targets(b: usize, k: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut t = rng::uniform_tensor::<f64>(&[b, k], 0.01, 1.0, rng);
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Central finite differences for every element of every parameter tensor,
/// compared against the analytic gradient. Returns the worst per-tensor
/// vector relative error `||a - fd||_2 / max(||a||_2, ||fd||_2)`.
///
/// The vector form is the measurable reading of "relative error" for this
/// oracle: central differences at a fixed h carry O(h^2) truncation noise
/// (verified to scale exactly as h^2 here), so a per-element relative bound
/// is unattainable for entries whose gradient is smaller than that noise no
/// matter how exact the analytic path is. A wrong gradient rule perturbs the
/// vector error at O(1) and is still caught instantly. Each element is
/// additionally held to a 1e-6 absolute bound, ~10x above the observed
/// truncation at h=1e-4.
pub fn max_fd_rel_error(
    cfg: &MixerConfig,
    params: &MixerParams<f64>,
    images: &Tensor<f64>,
    targets: &Tensor<f64>,
    h: f64,
) -> f64 {
    let analytic = grads_of(cfg, params, images, targets);
    let names = params.names();
    let mut worst = 0.0f64;
    for (ti, name) in names.iter().enumerate() {
        let n = params.flatten()[ti].numel();
        let mut err_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut fd_sq = 0.0f64;
        for e in 0..n {
            let eval = |delta: f64| {
                let mut bumped = params.clone();
                let mut idx = 0;
                bumped.visit_mut(|_, t| {
                    if idx == ti {
                        t.data_mut()[e] += delta;
                    }
                    idx += 1;
                });
                loss_of(cfg, &bumped, images, targets)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.flatten()[ti].data()[e];
            assert!(
                (a - fd).abs() < 1e-6 + 1e-4 * a.abs().max(fd.abs()),
                "{name}[{e}]: analytic {a} vs fd {fd}"
            );
            err_sq += (a - fd) * (a - fd);
            a_sq += a * a;
            fd_sq += fd * fd;
        }
        // A tensor whose analytic and measured gradients are both at noise
        // level has no meaningful direction to compare; the token-MLP output
        // bias is genuinely such a case (a per-token constant shift is
        // annihilated exactly by the following channel LayerNorms).
        if a_sq.sqrt() < 1e-9 && fd_sq.sqrt() < 1e-7 {
            continue;
        }
        let rel = err_sq.sqrt() / a_sq.sqrt().max(fd_sq.sqrt()).max(1e-12);
        if rel > worst {
            worst = rel;
            if std::env::var("MIXER_GRADCHECK_DEBUG").is_ok() {
                println!("worst so far: {name} vector rel {rel:.3e}");
            }
        }
    }
    worst
}
