use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::complexity::{analyze, AnalyzeOptions, DEFAULT_INPUT_HW};
use crate::graph::Eager;

fn image(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
}

fn tiny() -> NetConfig {
    NetConfig::tiny(1, 2, 8, 2)
}

#[test]
fn same_seed_same_weights() {
    let a = Model::<f32>::build(&tiny(), 7).unwrap();
    let b = Model::<f32>::build(&tiny(), 7).unwrap();
    let c = Model::<f32>::build(&tiny(), 8).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn f64_build_is_upcast_of_f32() {
    let a = Model::<f32>::build(&tiny(), 3).unwrap();
    let b = Model::<f64>::build(&tiny(), 3).unwrap();
    assert_eq!(a.params.cast::<f64>(), b.params);
}

#[test]
fn minimal_config_runs() {
    let m = Model::<f32>::build(&NetConfig::tiny(1, 1, 8, 2), 0).unwrap();
    let y = m.infer(&image([1, 3, 8, 8], 0)).unwrap();
    assert_eq!(y.shape(), [1, 3, 16, 16]);
    assert!(y.is_finite());
}

#[test]
fn output_dims_are_scaled() {
    for (scale, stages) in [(2, vec![2]), (3, vec![3]), (4, vec![2, 2]), (8, vec![2, 2, 2])] {
        let cfg = NetConfig::tiny(1, 1, 8, scale);
        assert_eq!(cfg.upscale_stages().unwrap(), stages);
        let m = Model::<f32>::build(&cfg, 1).unwrap();
        let y = m.infer(&image([1, 3, 24, 24], 1)).unwrap();
        assert_eq!(y.shape(), [1, 3, 24 * scale, 24 * scale], "scale {scale}");
    }
}

#[test]
fn bad_configs_rejected() {
    assert!(Model::<f32>::build(&NetConfig::tiny(1, 1, 8, 5), 0).is_err());
    assert!(Model::<f32>::build(&NetConfig::tiny(0, 1, 8, 2), 0).is_err());
    let m = Model::<f32>::build(&tiny(), 0).unwrap();
    assert!(m.infer(&image([1, 1, 8, 8], 0)).is_err());
}

#[test]
fn zero_body_reduces_to_extractor_and_upscaler() {
    let mut m = Model::<f32>::build(&NetConfig::tiny(2, 2, 8, 3), 4).unwrap();
    m.params.zero_prefix("groups.");
    m.params.zero_prefix("body_tail.");
    let x = image([1, 3, 10, 9], 5);
    let mut g = Eager;
    let f0 = m.extract(&mut g, &x).unwrap();
    let direct = m.reconstruct(&mut g, &f0).unwrap();
    let y = m.infer(&x).unwrap();
    assert_eq!(y, direct);
    assert!(y.is_finite());
}

#[test]
fn census_matches_analyzer_for_default_config() {
    let cfg = NetConfig::default();
    let m = Model::<f32>::build(&cfg, 0).unwrap();
    let report = analyze(&cfg, DEFAULT_INPUT_HW, AnalyzeOptions::default()).unwrap();
    assert_eq!(m.param_count(), report.total_params());
}

/// Sums census entries under each analyzer row (a ghost row covers `.primary` and `.cheapN`).
fn check_census(cfg: &NetConfig) {
    let m = Model::<f32>::build(cfg, 0).unwrap();
    let census = m.census();
    let report = analyze(cfg, (16, 16), AnalyzeOptions::default()).unwrap();
    let mut covered = 0;
    for row in &report.rows {
        let prefix = format!("{}.", row.name);
        let live: u64 = census
            .iter()
            .filter(|(layer, _)| **layer == row.name || layer.starts_with(&prefix))
            .map(|(_, n)| *n)
            .sum();
        covered += census.keys().filter(|l| **l == row.name || l.starts_with(&prefix)).count();
        assert_eq!(live, row.params, "{}", row.name);
    }
    assert_eq!(covered, census.len());
    assert_eq!(m.param_count(), report.total_params());
}

#[test]
fn census_matches_analyzer_per_layer() {
    for v in Variant::ALL {
        check_census(&NetConfig::tiny(2, 2, 16, 4).with_variant(v));
    }
}

#[test]
fn config_kv_round_trip() {
    let mut cfg = NetConfig::tiny(3, 4, 24, 3).with_variant(Variant::Ab4);
    cfg.ghost_kernels = vec![1, 3];
    cfg.attention.dual_pool = true;
    let mut kv = KeyValues::parse(&cfg.to_kv().render()).unwrap();
    assert_eq!(NetConfig::from_kv(&mut kv).unwrap(), cfg);
    assert!(kv.is_empty());
}

#[test]
fn config_rejects_unknown_and_bad_values() {
    let mut kv = KeyValues::parse("net.chanels = 3").unwrap();
    assert!(NetConfig::from_kv(&mut kv).is_err());
    let mut kv = KeyValues::parse("net.body = dense").unwrap();
    assert!(NetConfig::from_kv(&mut kv).is_err());
    let mut kv = KeyValues::parse("net.variant = ab9").unwrap();
    assert!(NetConfig::from_kv(&mut kv).is_err());
    let mut kv = KeyValues::parse("net.variant = ab1\nnet.scale = 4").unwrap();
    let c = NetConfig::from_kv(&mut kv).unwrap();
    assert_eq!((c.body, c.attention.spatial, c.scale), (ConvKind::Standard, false, 4));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = Model::<f32>::build(&tiny(), 9).unwrap();
    let bytes = Checkpoint::from_model(&m, None).to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let m2 = back.into_model().unwrap();
    let x = image([1, 3, 12, 12], 10);
    assert_eq!(m.infer(&x).unwrap(), m2.infer(&x).unwrap());
    assert!(bytes.len() < 1 << 20);
    assert!(bytes.len() as u64 >= 4 * m.param_count());
}

#[test]
fn checkpoint_file_round_trip_with_optimizer() {
    let m = Model::<f32>::build(&tiny(), 11).unwrap();
    let moments = |v: f32| m.params.iter().map(|(_, t)| t.map(|x| x * v)).collect::<Vec<_>>();
    let opt = OptimizerState { step: 42, first: moments(0.5), second: moments(0.25) };
    let ck = Checkpoint::from_model(&m, Some(opt));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gran");
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    loaded.save(dir.path().join("again.gran")).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("again.gran")).unwrap());
}

#[test]
fn checkpoint_errors_are_distinct() {
    let m = Model::<f32>::build(&tiny(), 12).unwrap();
    let bytes = Checkpoint::from_model(&m, None).to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { found: 9, expected: 1 })));

    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..2]), Err(Error::Truncated(_))));

    let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
    ck.tensors[0].1 = Tensor::zeros([1, 1, 1, 1]);
    assert!(matches!(ck.into_model(), Err(Error::Shape { .. })));

    let mut trailing = bytes.clone();
    trailing.extend_from_slice(b"junk");
    assert!(Checkpoint::from_bytes(&trailing).is_err());
}

#[test]
fn missing_checkpoint_reports_path() {
    let err = Checkpoint::load("/definitely/not/here.gran").unwrap_err().to_string();
    assert!(err.contains("/definitely/not/here.gran"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn census_equals_analyzer_for_random_configs(
        groups in 1usize..4, blocks in 1usize..4, channels in 1usize..40,
        scale in prop::sample::select(SUPPORTED_SCALES.to_vec()),
        variant in prop::sample::select(Variant::ALL.to_vec()),
        bias in any::<bool>(), dual in any::<bool>(), reduction in 1usize..20,
    ) {
        let mut cfg = NetConfig::tiny(groups, blocks, channels, scale).with_variant(variant);
        cfg.bias = bias;
        cfg.attention.dual_pool = dual;
        cfg.attention.reduction = reduction;
        check_census(&cfg);
    }

    #[test]
    fn output_is_scale_times_input(h in 1usize..12, w in 1usize..12,
                                   scale in prop::sample::select(SUPPORTED_SCALES.to_vec())) {
        let m = Model::<f32>::build(&NetConfig::tiny(1, 1, 4, scale), 0).unwrap();
        let y = m.infer(&image([1, 3, h, w], 0)).unwrap();
        prop_assert_eq!(y.shape(), [1, 3, h * scale, w * scale]);
    }
}
