//! Property tests over the spec's stated invariants.

use proptest::prelude::*;

use mixer_core::data::{self, Dataset, Split};
use mixer_core::model::MixerConfig;
use mixer_core::rng;
use mixer_core::surgery::{invert_permutation, permute_input, PermSpec};
use mixer_core::train::{clip_global_norm, lr_at, mixup, Schedule};
use mixer_core::{Graph, Tensor};

fn vec_strategy(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_associativity_f64(seed in 0u64..10_000) {
        let mut r = rng::seeded(seed);
        let a = rng::uniform_tensor::<f64>(&[6, 6], -1.0, 1.0, &mut r);
        let b = rng::uniform_tensor::<f64>(&[6, 6], -1.0, 1.0, &mut r);
        let c = rng::uniform_tensor::<f64>(&[6, 6], -1.0, 1.0, &mut r);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_affine_rescale_invariance(
        xs in vec_strategy(24, -4.0, 4.0),
        a in 0.5f64..5.0,
        b in -3.0f64..3.0,
    ) {
        // scale rows so the variance is comfortably above 1, making the eps
        // term negligible as the invariant requires
        let mut xs = xs;
        for v in xs.iter_mut() {
            *v *= 3.0;
        }
        let run = |data: Vec<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.input(Tensor::from_vec(&[3, 8], data).unwrap());
            let gamma = g.input(Tensor::filled(&[8], 1.0));
            let beta = g.input(Tensor::zeros(&[8]));
            let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
            g.value(y).clone()
        };
        let base: Vec<f64> = xs.clone();
        // reject degenerate rows with tiny variance
        for row in base.chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            prop_assume!(var > 1.0);
        }
        let scaled: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
        let y0 = run(base);
        let y1 = run(scaled);
        for (p, q) in y0.data().iter().zip(y1.data()) {
            prop_assert!((p - q).abs() < 1e-6, "{p} vs {q}");
        }
    }

    #[test]
    fn clip_idempotent_and_norm_bounded(gs in vec_strategy(40, -2.0, 2.0), c in 0.1f64..3.0) {
        let cfg = MixerConfig::named("toy").unwrap();
        let mut grads = mixer_core::model::init_params::<f64>(&cfg, 1).unwrap();
        // overwrite one tensor with the generated values
        grads.visit_mut(|name, t| {
            if name == "stem.w" {
                for (dst, src) in t.data_mut().iter_mut().zip(gs.iter().cycle()) {
                    *dst = *src;
                }
            }
        });
        let pre = clip_global_norm(&mut grads, c).unwrap();
        let mut sq = 0.0;
        grads.visit(|_, t| {
            for v in t.data() {
                sq += v * v;
            }
        });
        prop_assert!((sq.sqrt() - pre.min(c)).abs() < 1e-7);
        let once = grads.clone();
        clip_global_norm(&mut grads, c).unwrap();
        for (x, y) in grads.flatten().iter().zip(once.flatten()) {
            prop_assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn lr_continuity_at_warmup(warmup in 1u64..50, extra in 1u64..100, peak in 0.01f64..1.0) {
        let total = warmup + extra;
        for sched in [
            Schedule::LinearWarmupLinearDecay { warmup_steps: warmup, total_steps: total, peak_lr: peak },
            Schedule::LinearWarmupCosine { warmup_steps: warmup, total_steps: total, peak_lr: peak },
        ] {
            let at = lr_at(&sched, warmup).unwrap();
            prop_assert!((at - peak).abs() < 1e-12);
        }
    }

    #[test]
    fn mixup_zero_strength_identity(seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        let x = rng::uniform_tensor::<f32>(&[4, 2, 2, 3], 0.0, 1.0, &mut r);
        let y = data::one_hot(&[0, 1, 2, 3], 5);
        let (x2, y2) = mixup(&x, &y, 0.0, &mut r).unwrap();
        prop_assert!(x2.bit_eq(&x));
        prop_assert!(y2.bit_eq(&y));
    }

    #[test]
    fn permutation_pipelines_preserve_pixel_multiset(seed in 0u64..500) {
        let cfg = MixerConfig::named("toy").unwrap();
        let mut r = rng::seeded(seed);
        let img = rng::uniform_tensor::<f32>(&[8, 8, 3], 0.0, 1.0, &mut r);
        for spec in [
            PermSpec::random_patch(&cfg, &mut r).unwrap(),
            PermSpec::random_global(&cfg, &mut r).unwrap(),
        ] {
            let out = permute_input(&cfg, &img, &spec).unwrap();
            let mut a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = out.data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn permutation_inverse_composes_to_identity(seed in 0u64..500, n in 1usize..64) {
        let mut r = rng::seeded(seed);
        let p = rng::permutation(n, &mut r);
        let inv = invert_permutation(&p);
        for i in 0..n {
            prop_assert_eq!(inv[p[i]], i);
        }
    }

    #[test]
    fn checkpoint_roundtrip_arbitrary_weights(seed in 0u64..200, step in 0u64..1_000_000) {
        let config = MixerConfig::named("toy").unwrap();
        let mut params = mixer_core::model::init_params::<f32>(&config, seed).unwrap();
        let mut r = rng::seeded(seed);
        params.visit_mut(|_, t| {
            for v in t.data_mut() {
                *v = rand::Rng::random_range(&mut r, -10.0..10.0f32);
            }
        });
        let ckpt = mixer_core::checkpoint::Checkpoint { config, params, step };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        mixer_core::checkpoint::save(&ckpt, &path).unwrap();
        let loaded = mixer_core::checkpoint::load(&path).unwrap();
        prop_assert_eq!(loaded.step, step);
        for (a, b) in ckpt.params.flatten().iter().zip(loaded.params.flatten()) {
            prop_assert!(a.bit_eq(b));
        }
    }
}

#[test]
fn dataset_batch_gather_is_exact() {
    let mut r = rng::seeded(5);
    let images = rng::uniform_tensor::<f32>(&[6, 4, 4, 3], 0.0, 1.0, &mut r);
    let ds = Dataset {
        images,
        labels: vec![0, 1, 2, 0, 1, 2],
        num_classes: 3,
        split: Split::Train,
    };
    let b = ds.batch(&[4, 1]);
    assert_eq!(b.shape(), &[2, 4, 4, 3]);
    assert_eq!(&b.data()[..48], &ds.images.data()[4 * 48..5 * 48]);
    assert_eq!(ds.labels_at(&[4, 1]), vec![1, 1]);
}

// Op-level gradient checks across many random draws: the per-op reading of
// the FD invariant, at a step size where truncation is negligible for these
// scalar compositions.
#[test]
fn per_op_gradients_match_fd_over_100_seeds() {
    for seed in 0..100u64 {
        let mut r = rng::seeded(40_000 + seed);
        let x0 = rng::uniform_tensor::<f64>(&[6], -2.0, 2.0, &mut r);
        let loss_of = |x: &Tensor<f64>| -> f64 {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let a = g.gelu(xi);
            let s = g.sum(a);
            g.value(s).item()
        };
        let grad = {
            let mut g = Graph::new();
            let xi = g.param("x", x0.clone());
            let a = g.gelu(xi);
            let s = g.sum(a);
            let grads = g.backward(s).unwrap();
            grads.by_name("x").unwrap().clone()
        };
        let h = 1e-5;
        for e in 0..x0.numel() {
            let mut plus = x0.clone();
            plus.data_mut()[e] += h;
            let mut minus = x0.clone();
            minus.data_mut()[e] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = grad.data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "seed {seed} elem {e}: {a} vs {fd}");
        }
    }
}
