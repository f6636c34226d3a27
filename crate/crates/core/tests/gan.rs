use combinet_core::data::{synth_dataset, SynthSpec};
use combinet_core::gan::{
    build_gan_mapping, combigan, driver_name, generate, to_tanh_range, train_gan_from_scratch, CombiGanConfig,
    GanPair, GeneratorDriver,
};
use combinet_core::mapping::apply_mapping_full;
use combinet_core::model::{build_dense_discriminator, build_dense_generator};
use combinet_core::search::SearchConfig;
use combinet_core::trainer::{init_parameters, TrainConfig};
use combinet_core::{Model, Tensor};

fn two_mode_data(seed: u64) -> Vec<Tensor> {
    let spec = SynthSpec::ShapeTemplates {
        classes: 2,
        per_class: 100,
        shape: vec![1, 4, 4],
        noise: 0.05,
        template_seed: 3,
        max_shift: 0,
    };
    synth_dataset(&spec, seed).unwrap().images.iter().map(to_tanh_range).collect()
}

fn toy_pair() -> GanPair {
    GanPair::new(
        build_dense_generator(4, 16, &[1, 4, 4]).unwrap(),
        build_dense_discriminator(&[1, 4, 4], 16).unwrap(),
    )
    .unwrap()
}

fn gan_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        momentum: 0.5,
        batch_size: 16,
        epochs: 20,
        seed,
        early_stop_patience: None,
        ..Default::default()
    }
}

fn mean_score(d: &Model, xs: &[Tensor]) -> f32 {
    xs.iter().map(|x| d.forward(x).unwrap().data()[0]).sum::<f32>() / xs.len() as f32
}

#[test]
fn training_separates_real_from_noise() {
    let real = two_mode_data(1);
    let (trained, curve) = train_gan_from_scratch(&toy_pair(), &real, &gan_config(4)).unwrap();
    assert_eq!(curve.epochs.len(), 20);
    let held_out = two_mode_data(2);
    let mut r = combinet_core::rng::rng(9);
    let noise: Vec<Tensor> = (0..100)
        .map(|_| {
            use rand::Rng;
            Tensor::new(vec![1, 4, 4], (0..16).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
        })
        .collect();
    let (on_real, on_noise) = (mean_score(&trained.discriminator, &held_out), mean_score(&trained.discriminator, &noise));
    assert!(on_real > on_noise, "real {on_real} vs noise {on_noise}");
    for x in generate(&trained.generator, 50, 3).unwrap() {
        assert_eq!(x.shape(), [1, 4, 4]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    for x in generate(&trained.generator, 50, 3)
        .unwrap()
        .iter()
        .map(|x| trained.discriminator.forward(x).unwrap())
    {
        assert!((0.0..=1.0).contains(&x.data()[0]));
    }
}

#[test]
fn training_is_deterministic() {
    let real = two_mode_data(1);
    let cfg = TrainConfig {
        epochs: 3,
        ..gan_config(5)
    };
    let (a, ca) = train_gan_from_scratch(&toy_pair(), &real, &cfg).unwrap();
    let (b, cb) = train_gan_from_scratch(&toy_pair(), &real, &cfg).unwrap();
    assert!(a.generator.bits_eq(&b.generator) && a.discriminator.bits_eq(&b.discriminator));
    assert_eq!(ca, cb);
    let (c, _) = train_gan_from_scratch(&toy_pair(), &real, &gan_config(6)).unwrap();
    assert!(!a.generator.bits_eq(&c.generator));
}

/// Discriminator that calls an image real exactly when pixel `k` exceeds 0.5.
fn pixel_judge(k: usize, id: &str) -> GanPair {
    let mut g = build_dense_generator(2, 4, &[1, 2, 2]).unwrap();
    init_parameters(&mut g, Default::default(), k as u64);
    let mut d = build_dense_discriminator(&[1, 2, 2], 1).unwrap();
    let mut w = Tensor::zeros(&[1, 4]);
    w.data_mut()[k] = 1.0;
    d.set_param("d_fc1.weight", w).unwrap();
    d.set_param("d_fc2.weight", Tensor::new(vec![1, 1], vec![40.0]).unwrap()).unwrap();
    d.set_param("d_fc2.bias", Tensor::from_slice(&[-20.0])).unwrap();
    g.metadata.id = format!("{id}-g");
    d.metadata.id = format!("{id}-d");
    GanPair::new(g, d).unwrap()
}

fn samples(fire0: usize, fire1: usize, n: usize) -> Vec<Tensor> {
    (0..n)
        .map(|i| Tensor::new(vec![1, 2, 2], vec![f32::from(i < fire0), f32::from(i < fire1), 0.0, 0.0]).unwrap())
        .collect()
}

#[test]
fn mapping_normalizes_acceptance_rates() {
    let sources = [pixel_judge(0, "a"), pixel_judge(1, "b")];
    let m = build_gan_mapping(&sources, &samples(8, 2, 10)).unwrap();
    assert!((m.ratio(0).unwrap() - 0.8).abs() < 1e-12 && (m.ratio(1).unwrap() - 0.2).abs() < 1e-12);
    let m = build_gan_mapping(&sources, &samples(6, 6, 10)).unwrap();
    assert_eq!((m.ratio(0), m.ratio(1)), (Some(0.5), Some(0.5)));
    let m = build_gan_mapping(&sources, &samples(0, 0, 10)).unwrap();
    assert_eq!((m.ratio(0), m.ratio(1)), (Some(0.5), Some(0.5)));
    let m = build_gan_mapping(&sources, &samples(4, 0, 10)).unwrap();
    assert_eq!((m.ratio(0), m.ratio(1)), (Some(1.0), None));
}

fn quick_config(seed: u64) -> CombiGanConfig {
    CombiGanConfig {
        search: SearchConfig {
            seed,
            restarts: 2,
            patience: 4,
            ..Default::default()
        },
        fakes_per_source: 8,
        latent_batch: 16,
    }
}

fn trained_sources() -> Vec<GanPair> {
    let real = two_mode_data(1);
    let cfg = TrainConfig {
        epochs: 2,
        ..gan_config(2)
    };
    let (a, _) = train_gan_from_scratch(&toy_pair(), &real[..100], &cfg).unwrap();
    let (b, _) = train_gan_from_scratch(&toy_pair(), &real[100..], &cfg).unwrap();
    vec![a, b]
}

#[test]
fn combigan_searches_are_monotone_and_seeded() {
    let sources = trained_sources();
    let novel = two_mode_data(7)[..20].to_vec();
    let cfg = quick_config(11);
    let r = combigan(&sources, &novel, GeneratorDriver::Combined, None, &cfg, "novel").unwrap();
    let disc = r.discriminator.as_ref().unwrap();
    for res in [disc, &r.generator] {
        assert!(res.best_score >= res.initial_score);
        assert_eq!(res.run_scores.len(), 2);
    }
    assert_eq!(driver_name(r.driver), "combigan");
    let again = combigan(&sources, &novel, GeneratorDriver::Combined, None, &cfg, "novel").unwrap();
    assert_eq!(r.generator.best.fingerprint(), again.generator.best.fingerprint());
    assert_eq!(r.mapping, again.mapping);

    let external = sources[0].discriminator.clone();
    let n = combigan(&sources, &novel, GeneratorDriver::Naive, Some(&external), &cfg, "novel").unwrap();
    assert!(n.discriminator.is_none());
    assert_eq!(driver_name(n.driver), "combi+n");
    assert_eq!(driver_name(GeneratorDriver::Transfer), "combi+t");
}

#[test]
fn single_source_starts_from_that_source() {
    let sources = trained_sources();
    let novel = two_mode_data(7)[..20].to_vec();
    let only = vec![sources[0].clone()];
    let cfg = CombiGanConfig {
        search: SearchConfig {
            patience: 1,
            restarts: 1,
            ..Default::default()
        },
        ..quick_config(3)
    };
    let r = combigan(&only, &novel, GeneratorDriver::Combined, None, &cfg, "novel").unwrap();
    assert_eq!(r.mapping.entries().len(), 1);
    let z = combinet_core::gan::latent_batch(4, 10, 1);
    let start = apply_mapping_full(&[only[0].generator.clone()], &r.mapping, "novel")
        .unwrap()
        .materialize()
        .unwrap();
    for x in &z {
        assert_eq!(start.forward(x).unwrap(), only[0].generator.forward(x).unwrap());
    }
}
