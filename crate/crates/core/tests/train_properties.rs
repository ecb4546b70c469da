use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stainbench_core::backbone::{NetInput, SmallUNet, UNetConfig};
use stainbench_core::diffusion::{cm_training_step, standard_normal, AlphaSchedule, BridgeSchedule, ConsistencyConfig};
use stainbench_core::losses::ContrastiveConfig;
use stainbench_core::train::*;
use stainbench_core::{Shape, Tensor};

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

/// Largest relative gap between `grad` and central differences of `f`, with a floor of 1e-3.
fn fd_gap(params: &[f64], grad: &[f64], f: impl Fn(Vec<f64>) -> f64) -> f64 {
    assert_eq!(params.len(), grad.len());
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.to_vec();
        p[i] = params[i] + H;
        let up = f(p.clone());
        p[i] = params[i] - H;
        let down = f(p);
        let fd = (up - down) / (2.0 * H);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3));
    }
    worst
}

fn with_params(net: &SmallUNet, p: Vec<f64>) -> SmallUNet {
    SmallUNet::from_params(net.config().clone(), p).unwrap()
}

fn tiny(arch: Architecture) -> TrainConfig {
    TrainConfig {
        framework: arch,
        width: 2,
        levels: 2,
        time_dim: 4,
        contrastive: ContrastiveConfig { temperature: 0.5, patches_per_image: 16, ..Default::default() },
        ..Default::default()
    }
}

fn randomize(net: &mut SmallUNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal(Shape::new(1, 1, 1, net.param_count()), &mut rng);
    for (p, z) in net.params_mut().iter_mut().zip(noise.data()) {
        *p += 0.1 * z;
    }
}

/// Networks of a GAN framework, with targets shifted one unit away from the initial
/// generator output so that no L1 term sits near its kink.
fn gan_setup(arch: Architecture, size: usize, width: usize) -> (TrainConfig, Vec<SmallUNet>, Batch) {
    let cfg = TrainConfig { width, ..tiny(arch) };
    let mut nets: Vec<SmallUNet> = cfg.networks(3).into_iter().map(|(_, c)| SmallUNet::new(c).unwrap()).collect();
    for (k, n) in nets.iter_mut().enumerate() {
        randomize(n, 50 + k as u64);
    }
    let data = paired_toy(2, 3, size, 4);
    let mut batch = data.batch(&[0, 1]);
    let fake = nets[0].predict(&batch.source, &NetInput::default()).unwrap();
    batch.target = fake.map(|v| v + 1.0);
    (cfg, nets, batch)
}

#[test]
fn pyramid_generator_gradient() {
    let (cfg, nets, batch) = gan_setup(Architecture::Ppx2px, 16, 2);
    let (_, g) = gan_generator_objective(&cfg, &nets[0], &nets[1], None, &batch).unwrap();
    let gap = fd_gap(nets[0].params(), &g, |p| {
        gan_generator_objective(&cfg, &with_params(&nets[0], p), &nets[1], None, &batch).unwrap().0
    });
    assert!(gap < TOL, "gap {gap}");
}

#[test]
fn asp_generator_gradient() {
    let (cfg, nets, batch) = gan_setup(Architecture::Asp, 8, 4);
    let w = asp_anchor_weights(&cfg, &nets[0], &batch).unwrap();
    let (l, g) = gan_generator_objective(&cfg, &nets[0], &nets[1], None, &batch).unwrap();
    let (lf, gf) = asp_objective_frozen(&cfg, &nets[0], &nets[1], &batch, &w).unwrap();
    assert_eq!(l, lf);
    assert_eq!(g, gf);
    let gap = fd_gap(nets[0].params(), &g, |p| {
        asp_objective_frozen(&cfg, &with_params(&nets[0], p), &nets[1], &batch, &w).unwrap().0
    });
    assert!(gap < TOL, "gap {gap}");
}

#[test]
fn bcistainer_generator_and_classifier_gradient() {
    let (cfg, nets, batch) = gan_setup(Architecture::Bcistainer, 12, 2);
    let (_, g) = gan_generator_objective(&cfg, &nets[0], &nets[1], Some(&nets[2]), &batch).unwrap();
    let split = nets[0].param_count();
    let mut all = nets[0].params().to_vec();
    all.extend_from_slice(nets[2].params());
    let gap = fd_gap(&all, &g, |p| {
        let (gp, cp) = p.split_at(split);
        let (gn, cn) = (with_params(&nets[0], gp.to_vec()), with_params(&nets[2], cp.to_vec()));
        gan_generator_objective(&cfg, &gn, &nets[1], Some(&cn), &batch).unwrap().0
    });
    assert!(gap < TOL, "gap {gap}");
}

#[test]
fn discriminator_gradient() {
    let (_, nets, batch) = gan_setup(Architecture::Ppx2px, 8, 2);
    let (_, g) = discriminator_objective(&nets[0], &nets[1], &batch).unwrap();
    let gap = fd_gap(nets[1].params(), &g, |p| {
        discriminator_objective(&nets[0], &with_params(&nets[1], p), &batch).unwrap().0
    });
    assert!(gap < TOL, "gap {gap}");
}

fn diffusion_net(cond: usize, seed: u64) -> SmallUNet {
    let cfg = UNetConfig {
        in_channels: 3,
        cond_channels: cond,
        out_channels: 3,
        levels: 2,
        width: 2,
        time_dim: 4,
        seed,
        ..Default::default()
    };
    let mut net = SmallUNet::new(cfg).unwrap();
    randomize(&mut net, seed + 1);
    net
}

#[test]
fn ddpm_target_gradient() {
    let net = diffusion_net(0, 3);
    let data = paired_toy(2, 3, 4, 1).batch(&[0, 1]);
    let sched = AlphaSchedule::linear(20, 1e-4, 0.2).unwrap();
    let noise = standard_normal(data.target.shape(), &mut ChaCha8Rng::seed_from_u64(2));
    let steps = [3, 17];
    let (_, g) = ddpm_objective(&net, &data.target, &steps, &noise, &sched).unwrap();
    let gap = fd_gap(net.params(), &g, |p| {
        ddpm_objective(&with_params(&net, p), &data.target, &steps, &noise, &sched).unwrap().0
    });
    assert!(gap < TOL, "gap {gap}");
}

#[test]
fn bbdm_target_gradient() {
    let net = diffusion_net(3, 5);
    let data = paired_toy(2, 3, 4, 2).batch(&[0, 1]);
    let sched = BridgeSchedule::new(10, 1.0).unwrap();
    let noise = standard_normal(data.target.shape(), &mut ChaCha8Rng::seed_from_u64(3));
    let steps = [4, 10];
    let (_, g) = bbdm_objective(&net, &data.target, &data.source, &steps, &noise, &sched).unwrap();
    let gap = fd_gap(net.params(), &g, |p| {
        bbdm_objective(&with_params(&net, p), &data.target, &data.source, &steps, &noise, &sched).unwrap().0
    });
    assert!(gap < TOL, "gap {gap}");
}

#[test]
fn consistency_target_gradient_and_value() {
    let net = diffusion_net(3, 7);
    let ema = diffusion_net(3, 9);
    let data = paired_toy(2, 3, 4, 3).batch(&[0, 1]);
    let cfg = ConsistencyConfig::default();
    let noise = standard_normal(data.target.shape(), &mut ChaCha8Rng::seed_from_u64(4));
    let lower = [2, 11];
    let (_, g) = cm_objective(&net, &ema, &data.target, Some(&data.source), &lower, &noise, &cfg).unwrap();
    let gap = fd_gap(net.params(), &g, |p| {
        cm_objective(&with_params(&net, p), &ema, &data.target, Some(&data.source), &lower, &noise, &cfg).unwrap().0
    });
    assert!(gap < TOL, "gap {gap}");

    let sig = cfg.schedule().unwrap().sigmas().to_vec();
    let (x0, c, z) = (data.target.item(1), data.source.item(1), noise.item(1));
    let (l, _) = cm_objective(&net, &ema, &x0, Some(&c), &[11], &z, &cfg).unwrap();
    let reference = cm_training_step(&x0, Some(&c), (sig[12], sig[11]), &z, &net, &ema, &cfg).unwrap();
    assert!((l - reference).abs() < 1e-12);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn every_objective_decreases_on_sixteen_pairs() {
    for arch in Architecture::ALL {
        let drops: Vec<f64> = (0..5)
            .map(|seed| {
                let data = paired_toy(16, 3, 16, 100 + seed);
                let cfg = TrainConfig {
                    framework: arch,
                    steps: 200,
                    batch_size: 2,
                    seed,
                    contrastive: ContrastiveConfig { patches_per_image: 64, ..Default::default() },
                    ..Default::default()
                };
                let sm = smoothed(&train(&data, &cfg).unwrap().losses, 20);
                sm[sm.len() - 1] - sm[0]
            })
            .collect();
        assert!(median(drops.clone()) < 0.0, "{arch}: {drops:?}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = paired_toy(4, 3, 8, 1);
    let cfg = TrainConfig { framework: Architecture::Ddib, steps: 5, ..Default::default() };
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a, b);
    let other = train(&data, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.losses, other.losses);
}

fn toy_config(arch: Architecture, seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        framework: arch,
        steps,
        batch_size: 8,
        learning_rate: 5e-3,
        seed,
        width: 8,
        levels: 1,
        ..Default::default()
    }
}

#[test]
fn bbdm_toy_reaches_target_domain() {
    let dists: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = toy_config(Architecture::Bbdm, seed, 500);
            let out = train(&two_pixel_toy(16, 0.05, seed), &cfg).unwrap();
            let y = out.model.translate(&cfg, &Tensor::zeros(Shape::new(32, 1, 1, 2)), seed).unwrap();
            median(y.data().iter().map(|v| (v - 1.0).abs()).collect())
        })
        .collect();
    assert!(median(dists.clone()) < 0.1, "{dists:?}");
}

#[test]
#[ignore = "unconditional consistency training collapses between the two points; see notes"]
fn unconditional_cm_two_point_toy() {
    let s = Shape::new(1, 1, 1, 2);
    let pts = [Tensor::from_vec(s, vec![-0.5, -0.5]), Tensor::from_vec(s, vec![0.5, 0.5])];
    let data =
        PairSet::new(vec![Tensor::zeros(s); 2], pts.to_vec(), vec![stainbench_core::Her2Score::Zero; 2]).unwrap();
    let cfg = TrainConfig { cm_conditional: false, ..toy_config(Architecture::Cm, 0, 500) };
    let out = train(&data, &cfg).unwrap();
    let y = out.model.translate(&cfg, &Tensor::zeros(s), 1).unwrap();
    let d = pts
        .iter()
        .map(|p| p.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);
    assert!(d < 0.1, "distance {d}");
}

#[test]
fn config_validation_and_names() {
    assert!(train(&paired_toy(2, 3, 8, 0), &TrainConfig { batch_size: 0, ..Default::default() }).is_err());
    for a in Architecture::ALL {
        assert_eq!(a.as_str().parse::<Architecture>().unwrap(), a);
    }
    assert!("cyclegan".parse::<Architecture>().is_err());
    let cfg = TrainConfig { framework: Architecture::Bcistainer, ..Default::default() };
    let names: Vec<_> = cfg.networks(3).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["generator", "discriminator", "classifier"]);
}
