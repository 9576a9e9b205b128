//! End-to-end gradient checks: a micro network plus each training objective,
//! differentiated by the autodiff engine and by central differences in f64.

use std::collections::BTreeMap;

use doalab::autodiff::{Graph, ParamStore, Tensor};
use doalab::labels::LabelTensor;
use doalab::loss::{adoa_loss, mdoa_loss, AdoaPred};
use doalab::model::{canonical_order, encode_angles, Model, ModelConfig, Variant, ANGLE_FEATURES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LABEL_FRAMES: usize = 2;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn micro(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        base_channels: 4,
        tcn_channels: 6,
        tcn_blocks: 1,
        tcn_modules_per_block: 1,
        tcn_kernels: vec![3, 5],
        angle_dim: 4,
        in_planes: 2,
        n_mels: 16,
        frames_per_label: 2,
        ..ModelConfig::default()
    }
}

struct Case {
    features: Tensor<f64>,
    labels: Vec<LabelTensor>,
    angles: Option<Tensor<f64>>,
}

/// Two samples with two speakers each; speaker activity and azimuths drawn
/// at random.
fn case(cfg: &ModelConfig, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let t = LABEL_FRAMES * cfg.frames_per_label;
    let feats = (0..n * cfg.in_planes * t * cfg.n_mels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = Tensor::new(&[n, cfg.in_planes, t, cfg.n_mels], feats).unwrap();
    let labels: Vec<LabelTensor> = (0..n)
        .map(|_| {
            let mut l = LabelTensor::new(0.1, vec![0, 1], LABEL_FRAMES).unwrap();
            for f in 0..LABEL_FRAMES {
                for s in 0..2 {
                    l.set(f, s, f == 0 || rng.gen_bool(0.5), rng.gen_range(10.0..170.0));
                }
            }
            match cfg.variant {
                Variant::Adoa => l,
                Variant::Mdoa => l.reorder(&canonical_order(&l)).unwrap(),
            }
        })
        .collect();
    let angles = (cfg.variant == Variant::Mdoa).then(|| {
        let a: Vec<f64> = labels.iter().flat_map(|l| encode_angles(l, cfg.max_speakers).unwrap()).collect();
        Tensor::new(&[n, LABEL_FRAMES, cfg.max_speakers * ANGLE_FEATURES], a).unwrap()
    });
    Case { features, labels, angles }
}

/// Training objective and its parameter gradients.
fn objective(model: &Model, store: &ParamStore<f64>, c: &Case) -> (f64, BTreeMap<String, Tensor<f64>>) {
    let mut g = Graph::<f64>::new();
    let x = g.input(c.features.clone());
    let a = c.angles.clone().map(|a| g.input(a));
    let out = model.forward(&mut g, store, x, a, true).unwrap();
    let s = model.cfg.max_speakers;
    let per = LABEL_FRAMES * s;
    let y = g.value(out.y_hat).data().to_vec();
    let (node, value) = match out.theta {
        Some(th_var) => {
            let th = g.value(th_var).data().to_vec();
            let preds: Vec<AdoaPred> = (0..c.labels.len())
                .map(|i| AdoaPred { theta: &th[i * per * 2..(i + 1) * per * 2], y_hat: &y[i * per..(i + 1) * per] })
                .collect();
            let r = adoa_loss(&c.labels, &preds).unwrap();
            let gt = Tensor::new(g.shape(th_var), r.grad_theta.concat()).unwrap();
            let gy = Tensor::new(g.shape(out.y_hat), r.grad_y.concat()).unwrap();
            let a = g.external_loss(th_var, 0.0, &gt).unwrap();
            let b = g.external_loss(out.y_hat, r.total, &gy).unwrap();
            (g.add(a, b).unwrap(), r.total)
        }
        None => {
            let ys: Vec<&[f64]> = y.chunks(per).collect();
            let r = mdoa_loss(&c.labels, &ys).unwrap();
            let gy = Tensor::new(g.shape(out.y_hat), r.grad_y.concat()).unwrap();
            (g.external_loss(out.y_hat, r.value, &gy).unwrap(), r.value)
        }
    };
    (value, g.backward(node).unwrap().params(store))
}

/// Worst relative error over a random sample of entries of every parameter.
fn check_model(variant: Variant, per_param: usize) -> f64 {
    let cfg = micro(variant);
    let model = Model::new(cfg.clone()).unwrap();
    let store = model.init::<f64>(21);
    let c = case(&cfg, 4);
    let (_, grads) = objective(&model, &store, &c);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for (name, p) in store.params() {
        let analytic = &grads[name];
        for _ in 0..per_param.min(p.numel()) {
            let i = rng.gen_range(0..p.numel());
            let at = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(name).unwrap().data_mut()[i] += delta;
                objective(&model, &s, &c).0
            };
            let numeric = (at(STEP) - at(-STEP)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8);
            assert!(err < TOL, "{variant:?} {name}[{i}]: analytic {a} numeric {numeric}");
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn audio_only_network_gradients() {
    let err = check_model(Variant::Adoa, 12);
    assert!(err < TOL, "{err}");
}

#[test]
fn angle_conditioned_network_gradients() {
    let err = check_model(Variant::Mdoa, 12);
    assert!(err < TOL, "{err}");
}

#[test]
fn every_parameter_receives_gradient() {
    for variant in [Variant::Adoa, Variant::Mdoa] {
        let cfg = micro(variant);
        let model = Model::new(cfg.clone()).unwrap();
        let store = model.init::<f64>(2);
        let (_, grads) = objective(&model, &store, &case(&cfg, 8));
        assert_eq!(grads.keys().collect::<Vec<_>>(), store.params().keys().collect::<Vec<_>>());
        for (name, gr) in &grads {
            assert!(gr.data().iter().all(|v| v.is_finite()), "{name}");
            assert!(gr.data().iter().any(|v| *v != 0.0), "{variant:?} {name} has an all-zero gradient");
        }
    }
}
