use pact_autodiff::gradcheck::gradcheck;
use pact_autodiff::optim::AdamW;
use pact_autodiff::{Graph, Tensor, Var};
use pact_core::rng;
use pact_train::ifunet::{
    forward, forward_traced, inception_mixer, inceptionformer_block, init_params, predict, Bound, IFUnetConfig,
    IFUnetParams,
};
use pact_train::TrainError;
use proptest::prelude::*;
use rand::Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Parameters of one skip block, with every entry perturbed away from its
/// structured initial value so no gradient vanishes by symmetry.
fn block_params(cfg: &IFUnetConfig, level: usize, seed: u64) -> (Vec<String>, Vec<Tensor<f64>>) {
    let all = init_params::<f64>(cfg, seed).unwrap();
    let prefix = format!("skip{level}.");
    let mut r = rng::seeded(seed ^ 0xb10c);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (n, t) in all.names.iter().zip(&all.tensors) {
        if let Some(rest) = n.strip_prefix(&prefix) {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
            names.push(rest.to_string());
            tensors.push(t);
        }
    }
    (names, tensors)
}

fn six_channel_config() -> IFUnetConfig {
    IFUnetConfig {
        base_channels: 6,
        ..IFUnetConfig::tiny()
    }
}

#[test]
fn block_passes_gradcheck() {
    let cfg = six_channel_config();
    let (names, params) = block_params(&cfg, 0, 3);
    let mut inputs = vec![random(&[1, 6, 8, 8], 11, 1.0)];
    inputs.extend(params);
    let report = gradcheck(&inputs, 1e-5, 1e-4, |g, vars| {
        let full: Vec<String> = names.iter().map(|n| format!("b.{n}")).collect();
        let bound = Bound::from_vars(&full, &vars[1..]);
        Ok(inceptionformer_block(g, &bound, "b", &cfg, vars[0]).map_err(|e| match e {
            TrainError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?)
    })
    .unwrap();
    assert!(report.passed(), "worst relative error {}", report.worst());
}

fn bind_prefixed(g: &mut Graph<f64>, names: &[String], tensors: &[Tensor<f64>], prefix: &str) -> (Bound, Vec<Var>) {
    let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
    let full: Vec<String> = names.iter().map(|n| format!("{prefix}{n}")).collect();
    (Bound::from_vars(&full, &vars), vars)
}

#[test]
fn mixer_preserves_shape() {
    let cfg = IFUnetConfig {
        base_channels: 12,
        split: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        heads: 2,
        ..IFUnetConfig::tiny()
    };
    let (names, params) = block_params(&cfg, 0, 1);
    let mut g = Graph::new();
    let (bound, _) = bind_prefixed(&mut g, &names, &params, "b.");
    let x = g.input(random(&[1, 12, 16, 16], 2, 1.0));
    let y = inception_mixer(&mut g, &bound, "b.mixer", &cfg, x).unwrap();
    assert_eq!(g.shape(y), &[1, 12, 16, 16]);
    let z = inceptionformer_block(&mut g, &bound, "b", &cfg, x).unwrap();
    assert_eq!(g.shape(z), &[1, 12, 16, 16]);
}

#[test]
fn every_block_parameter_gets_a_gradient() {
    let cfg = IFUnetConfig::tiny();
    for seed in 0..3 {
        let (names, params) = block_params(&cfg, 0, seed);
        let mut g = Graph::new();
        let (bound, vars) = bind_prefixed(&mut g, &names, &params, "b.");
        let x = g.input(random(&[2, 8, 8, 8], 100 + seed, 1.0));
        let y = inceptionformer_block(&mut g, &bound, "b", &cfg, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        for (n, v) in names.iter().zip(&vars) {
            let grad = g.grad(*v).unwrap_or_else(|| panic!("{n}: no gradient"));
            assert!(grad.data().iter().any(|&d| d != 0.0), "seed {seed}: {n} has a zero gradient");
        }
    }
}

#[test]
fn every_network_parameter_gets_a_gradient() {
    let cfg = IFUnetConfig::tiny();
    for seed in 0..3 {
        let p = init_params::<f64>(&cfg, seed).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let vars = bound.ordered(&p);
        let x = g.input(random(&[2, 1, 16, 16], 200 + seed, 1.0));
        let y = forward(&mut g, &bound, &cfg, x).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        for (n, v) in p.names.iter().zip(&vars) {
            let nonzero = g.grad(*v).is_some_and(|t| t.data().iter().any(|&d| d != 0.0));
            assert!(nonzero, "seed {seed}: {n} has a zero gradient");
        }
    }
}

#[test]
fn zeroed_output_projections_give_identity() {
    let cfg = IFUnetConfig::tiny();
    let (names, mut params) = block_params(&cfg, 0, 4);
    for (n, t) in names.iter().zip(params.iter_mut()) {
        if n.starts_with("mixer.fuse1.") || n.starts_with("ffn.fc2.") {
            t.data_mut().fill(0.0);
        }
    }
    let mut g = Graph::new();
    let (bound, _) = bind_prefixed(&mut g, &names, &params, "b.");
    let xt = random(&[1, 8, 16, 16], 5, 2.0);
    let x = g.input(xt.clone());
    let y = inceptionformer_block(&mut g, &bound, "b", &cfg, x).unwrap();
    assert_eq!(g.value(y).data(), xt.data());
}

#[test]
fn desk_network_output_shape_and_determinism() {
    let cfg = IFUnetConfig::desk();
    let p = init_params::<f32>(&cfg, 9).unwrap();
    let x = random(&[1, 1, 64, 64], 6, 1.0).cast::<f32>();
    let a = predict(&p, &cfg, x.clone()).unwrap();
    let b = predict(&p, &cfg, x).unwrap();
    assert_eq!(a.shape(), &[1, 1, 64, 64]);
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|v| v.is_finite()));
}

#[test]
fn rejects_sizes_not_divisible_by_the_depth() {
    let cfg = IFUnetConfig::desk();
    let p = init_params::<f32>(&cfg, 9).unwrap();
    let err = predict(&p, &cfg, Tensor::zeros(&[1, 1, 36, 36])).unwrap_err();
    assert!(matches!(err, TrainError::BadShape(_)));
}

#[test]
fn indivisible_heads_are_rejected() {
    let cfg = IFUnetConfig {
        heads: 3,
        ..IFUnetConfig::tiny()
    };
    assert!(matches!(cfg.validate(), Err(TrainError::IndivisibleHeads { channels: 4, heads: 3 })));
}

#[test]
fn overfits_one_sample() {
    let cfg = IFUnetConfig::tiny();
    let mut params = init_params::<f32>(&cfg, 1).unwrap();
    let x = random(&[1, 1, 16, 16], 7, 1.0).cast::<f32>();
    let target = random(&[1, 1, 16, 16], 8, 1.0).cast::<f32>();
    let mut opt = AdamW::new(1e-3, 0.0);
    let mut losses = Vec::new();
    for _ in 0..10 {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let vars = bound.ordered(&params);
        let xv = g.input(x.clone());
        let tv = g.input(target.clone());
        let y = forward(&mut g, &bound, &cfg, xv).unwrap();
        let d = g.sub(y, tv).unwrap();
        let l = g.l1(d);
        losses.push(g.scalar(l));
        g.backward(l).unwrap();
        let grads: Vec<Tensor<f32>> = vars.iter().map(|v| g.grad(*v).unwrap().clone()).collect();
        opt.step(&mut params.tensors, &grads).unwrap();
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn activations_at_init_are_well_scaled() {
    let cfg = IFUnetConfig::desk();
    let p = init_params::<f64>(&cfg, 0).unwrap();
    let mut x = random(&[1, 1, 64, 64], 10, 1.0);
    let rms = (x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    x.data_mut().iter_mut().for_each(|v| *v /= rms);
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let xv = g.input(x);
    let mut trace = Vec::new();
    forward_traced(&mut g, &bound, &cfg, xv, Some(&mut trace)).unwrap();
    assert_eq!(trace.len(), 3 * cfg.depth + 2);
    for (name, v) in trace {
        let t = g.value(v);
        let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        assert!((0.1..=10.0).contains(&rms), "{name}: rms {rms}");
    }
}

/// Parameter count from first principles.
fn expected_params(depth: usize, base: usize, split: [f64; 3], ffn: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let ch = |l: usize| base * (1 << l);
    let mut n = 0;
    let mut cin = 1;
    for l in 0..depth {
        n += conv(cin, ch(l), 3) + conv(ch(l), ch(l), 3);
        cin = ch(l);
    }
    let cb = ch(depth);
    n += conv(cin, cb, 3) + conv(cb, cb, 3);
    for l in 0..depth {
        let c = ch(l);
        n += conv(2 * c, c, 3) + conv(c, c, 3) + conv(ch(l + 1), c, 3);
    }
    n += conv(base, 1, 1);
    for l in 0..depth {
        let c = ch(l);
        let a = (split[0] * c as f64).floor() as usize;
        let b = (split[1] * c as f64).floor() as usize;
        let r = c - a - b;
        n += conv(a, a, 3) + conv(b, b, 1) + conv(b, b, 3) + 4 * conv(r, r, 1);
        n += conv(c, c, 3) + conv(c, c, 1) + conv(c, ffn * c, 1) + conv(ffn * c, c, 1) + 4 * c;
    }
    n
}

#[test]
fn golden_parameter_counts() {
    let desk = IFUnetConfig::desk();
    let tiny = IFUnetConfig::tiny();
    assert_eq!(desk.param_count(), expected_params(3, 16, desk.split, 4));
    assert_eq!(tiny.param_count(), expected_params(2, 8, tiny.split, 4));
    assert_eq!(desk.param_count(), 645_573);
    assert_eq!(tiny.param_count(), 39_311);
}

#[test]
fn checkpoint_cast_round_trip() {
    let cfg = IFUnetConfig::tiny();
    let p: IFUnetParams<f32> = init_params(&cfg, 2).unwrap();
    let back: IFUnetParams<f32> = p.cast::<f64>().cast();
    assert_eq!(p, back);
    back.check(&cfg).unwrap();
    assert!(back.check(&IFUnetConfig::desk()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn output_shape_matches_input(depth in 2usize..4, base in 1usize..3, batch in 1usize..3, mult in 1usize..3) {
        let cfg = IFUnetConfig { depth, base_channels: 4 * base, heads: 2, ..IFUnetConfig::tiny() };
        prop_assume!(cfg.validate().is_ok());
        let n = (1 << depth) * 2 * mult;
        let p = init_params::<f32>(&cfg, 0).unwrap();
        let y = predict(&p, &cfg, Tensor::full(&[batch, 1, n, n], 0.5)).unwrap();
        prop_assert_eq!(y.shape(), &[batch, 1, n, n]);
    }
}
