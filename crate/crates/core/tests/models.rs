use esmm::feature::{Dataset, Feature, FieldSchema, SparseSample};
use esmm::models::{
    esmm_loss, train_base_cvr, train_esmm, train_esmm_with, train_independent, CvrPredictor,
    ModelOutput, Role, TrainConfig,
};
use esmm::nn::graph::{Label, Objective};
use esmm::nn::{cross_entropy, ParamStore};
use esmm::synth::{build_world, gen_dataset, GroundTruthModel, Popularity, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_world(rho: f64, seed: u64) -> (GroundTruthModel, Dataset) {
    let cfg = WorldConfig {
        field_count: 4,
        vocab_size: 12,
        embedding_dim: 4,
        target_ctr: 0.2,
        target_cvr: 0.2,
        rho,
        probe_n: 20_000,
        ..WorldConfig::default()
    };
    let gt = build_world(&cfg, seed).unwrap();
    let (d, _) = gen_dataset(&gt, 4_000, seed + 1).unwrap();
    (gt, d)
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: vec![8, 4],
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    }
}

fn initial_store(d: &Dataset, cfg: &TrainConfig, towers: usize, shared: bool) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ParamStore::init(d.schema(), &cfg.hidden, towers, shared, cfg.adam, &mut rng).unwrap()
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let (_, d) = small_world(0.5, 1);
    let mut cfg = small_cfg(3);
    cfg.adam.lr = 0.0;
    for shared in [true, false] {
        let m = train_esmm(&d, shared, &cfg).unwrap();
        assert_eq!(m.store.flat_params(), initial_store(&d, &cfg, 2, shared).flat_params());
    }
    let b = train_independent(&d, Role::CtrOnAll, &cfg).unwrap();
    assert_eq!(b.store.flat_params(), initial_store(&d, &cfg, 1, true).flat_params());
}

#[test]
fn same_seed_same_parameters() {
    let (_, d) = small_world(0.5, 2);
    let cfg = small_cfg(4);
    let a = train_esmm(&d, true, &cfg).unwrap();
    let b = train_esmm(&d, true, &cfg).unwrap();
    assert_eq!(a.store.flat_params(), b.store.flat_params());
    let c = train_esmm(&d, true, &cfg.with_seed(5)).unwrap();
    assert_ne!(a.store.flat_params(), c.store.flat_params());
    let x = train_base_cvr(&d, &cfg).unwrap();
    let y = train_base_cvr(&d, &cfg).unwrap();
    assert_eq!(x, y);
}

#[test]
fn training_moves_parameters() {
    let (_, d) = small_world(0.5, 2);
    let cfg = small_cfg(4);
    let m = train_esmm(&d, true, &cfg).unwrap();
    assert_ne!(m.store.flat_params(), initial_store(&d, &cfg, 2, true).flat_params());
}

#[test]
fn without_ctcvr_term_cvr_tower_is_frozen() {
    let (_, d) = small_world(0.8, 3);
    let cfg = TrainConfig {
        batch_size: 40,
        ..small_cfg(6)
    };
    // 4000 / 40 = 100 steps.
    let frozen = Objective::Entire { ctcvr_term: false };
    for shared in [true, false] {
        let m = train_esmm_with(&d, shared, frozen, &cfg).unwrap();
        let init = initial_store(&d, &cfg, 2, shared);
        assert_eq!(m.store.adam().steps(), 100);
        assert_eq!(m.store.tower(1), init.tower(1));
        assert_ne!(m.store.tower(0), init.tower(0));
    }
}

fn probe_cvr(m: &impl CvrPredictor, probe: &[SparseSample]) -> Vec<f64> {
    m.predict_cvr(probe).unwrap()
}

#[test]
fn shared_embeddings_carry_click_signal_into_cvr_tower() {
    let (_, d) = small_world(0.8, 4);
    let clicks_only: Vec<SparseSample> = d
        .samples()
        .iter()
        .take(64)
        .map(|s| SparseSample { z: false, ..s.clone() })
        .collect();
    let batch = Dataset::new(d.schema().clone(), clicks_only.clone()).unwrap();
    let mut cfg = small_cfg(7);
    cfg.adam.lr = 0.0;
    let frozen = Objective::Entire { ctcvr_term: false };
    let before_shared = train_esmm_with(&batch, true, frozen, &cfg).unwrap();
    let before_ns = train_esmm_with(&batch, false, frozen, &cfg).unwrap();
    cfg.adam.lr = 1e-2;
    let after_shared = train_esmm_with(&batch, true, frozen, &cfg).unwrap();
    let after_ns = train_esmm_with(&batch, false, frozen, &cfg).unwrap();

    let moved = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let shared = moved(&probe_cvr(&before_shared, &clicks_only), &probe_cvr(&after_shared, &clicks_only));
    let ns = moved(&probe_cvr(&before_ns, &clicks_only), &probe_cvr(&after_ns, &clicks_only));
    assert!(shared > 1e-6, "shared move {shared}");
    assert_eq!(ns, 0.0);
}

#[test]
fn no_conversions_collapse_ctcvr_and_base_predictions() {
    let (_, d) = small_world(0.5, 5);
    let none: Vec<SparseSample> = d
        .samples()
        .iter()
        .map(|s| SparseSample { z: false, ..s.clone() })
        .collect();
    let d0 = Dataset::new(d.schema().clone(), none).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..small_cfg(8)
    };
    let ctcvr = train_independent(&d0, Role::CtcvrOnAll, &cfg).unwrap();
    let p = ctcvr.predict(d0.samples()).unwrap();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!(mean < 1e-2, "mean ctcvr {mean}");
    // The clicked subset is a fifth of the log; give it the same step count.
    let base = train_base_cvr(&d0, &TrainConfig { epochs: 25, ..cfg }).unwrap();
    let p = base.predict(d0.samples()).unwrap();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    assert!(mean < 1e-2, "mean base {mean}");
}

#[test]
fn base_without_clicks_is_an_error() {
    let schema = FieldSchema::uniform(1, 3, 2).unwrap();
    let d = Dataset::new(
        schema,
        vec![SparseSample::new(0, vec![Feature::new(0, 1)], false, false)],
    )
    .unwrap();
    assert!(matches!(
        train_base_cvr(&d, &small_cfg(0)),
        Err(esmm::Error::NoClickedSamples)
    ));
    assert!(train_independent(&d, Role::CvrOnClicked, &small_cfg(0)).is_err());
}

#[test]
fn outputs_compose_exactly() {
    let (_, d) = small_world(0.8, 6);
    let m = train_esmm(&d, true, &small_cfg(9)).unwrap();
    let out = m.predict(d.samples()).unwrap();
    for o in &out {
        assert_eq!(o.pctcvr, o.pctr * o.pcvr);
        assert!((0.0..=1.0).contains(&o.pcvr));
        assert!((0.0..=1.0).contains(&o.pctr));
    }
    assert_eq!(m.forward(&d.samples()[3]).unwrap(), out[3]);
}

#[test]
fn esmm_loss_is_sum_of_two_ce_means() {
    let outs = [
        ModelOutput::from_factors(0.3, 0.7),
        ModelOutput::from_factors(0.9, 0.1),
        ModelOutput::from_factors(0.05, 0.5),
    ];
    let labels = [(true, true), (true, false), (false, false)];
    let ctr: f64 = outs.iter().zip(&labels).map(|(o, l)| cross_entropy(l.0, o.pctr)).sum::<f64>() / 3.0;
    let ctcvr: f64 = outs
        .iter()
        .zip(&labels)
        .map(|(o, l)| cross_entropy(l.0 && l.1, o.pctr * o.pcvr))
        .sum::<f64>()
        / 3.0;
    assert!((esmm_loss(&outs, &labels) - (ctr + ctcvr)).abs() < 1e-15);
}

#[test]
fn y_one_z_zero_is_a_ctcvr_negative() {
    let s = SparseSample::new(0, vec![], true, false);
    assert!(!s.ctcvr_label());
    assert!(!Label::Conversion.of(&s));
    assert!(Label::Click.of(&s));
}

#[test]
fn constant_true_cvr_is_recovered_over_the_entire_space() {
    let schema = FieldSchema::uniform(4, 12, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 0.6).unwrap();
    let click: Vec<Vec<f64>> = (0..4).map(|_| (0..12).map(|_| normal.sample(&mut rng)).collect()).collect();
    let zero = vec![vec![0.0; 12]; 4];
    let gt = GroundTruthModel::from_weights(schema, click, zero, 0.0, Popularity::Uniform).unwrap();
    let gt = esmm::synth::calibrate_offsets(gt, 0.2, 0.2, 20_000, 1).unwrap();
    let (d, truths) = gen_dataset(&gt, 20_000, 2).unwrap();
    let c = truths[0].pcvr;
    assert!(truths.iter().all(|t| (t.pcvr - c).abs() < 1e-12));

    let cfg = TrainConfig {
        epochs: 3,
        ..small_cfg(12)
    };
    let m = train_esmm(&d, true, &cfg).unwrap();
    let pcvr = m.predict_cvr(d.samples()).unwrap();
    let mean = pcvr.iter().sum::<f64>() / pcvr.len() as f64;
    assert!(((mean - c) / c).abs() < 0.2, "mean pcvr {mean} vs {c}");
}
