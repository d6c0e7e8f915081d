use fastsfp_core::config::{self, KvConfig};
use fastsfp_core::container::decode_volume;
use fastsfp_core::data::{export_dataset, gen_dataset};
use fastsfp_core::metrics::{evaluate, Split};
use fastsfp_core::sfp::{svd_init, SfpConfig, SfpLayer};
use fastsfp_core::tensor::Tensor;
use fastsfp_core::train::{
    contrastive_data, default_encoder, embedding_records, run_contrastive, run_distillation,
    ContrastiveConfig, RunConfig, Strategy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.txt");
    let cfg = RunConfig {
        strategy: Strategy::FastNoDaf,
        seed: 17,
        epochs: 3,
        ..RunConfig::default()
    };
    std::fs::write(&path, config::run_entries(&cfg).unwrap().to_text()).unwrap();
    let kv = KvConfig::from_file(&path).unwrap();
    let back = config::run_config(&kv, RunConfig::default()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn exported_volumes_decode_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = gen_dataset(4, 3, [8, 8, 8], 4).unwrap();
    export_dataset(dir.path(), &pairs).unwrap();
    for (i, p) in pairs.iter().enumerate() {
        let bytes = std::fs::read(dir.path().join(format!("pair_{i:04}_degraded.vol"))).unwrap();
        assert_eq!(decode_volume(&bytes).unwrap(), p.degraded);
    }
    let labels: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("labels.json")).unwrap())
            .unwrap();
    assert_eq!(labels.as_array().unwrap().len(), 3);
}

#[test]
fn svd_init_survives_serialization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::random_normal(&[16, 2], 1.0, &mut rng);
    let b = Tensor::random_normal(&[2, 64], 1.0, &mut rng);
    let w = a.matmul(&b).unwrap();
    let layer = svd_init(&w, &SfpConfig::new(64, 16, 2).unwrap()).unwrap();
    let back = SfpLayer::decode(&layer.encode()).unwrap();
    assert!(back.contract_to_dense().max_abs_diff(&w).unwrap() < 1e-10);
}

#[test]
fn short_distillation_reduces_end_mse() {
    let cfg = RunConfig {
        epochs: 3,
        n_volumes: 8,
        ..RunConfig::default()
    };
    let out = run_distillation(&cfg).unwrap();
    let (first, last) = (&out.history[0], out.history.last().unwrap());
    assert_eq!(last.epoch, 3);
    assert!(last.end_mse < first.end_mse);
}

#[test]
fn contrastive_embeddings_feed_metrics() {
    let cfg = ContrastiveConfig {
        epochs: 2,
        ..ContrastiveConfig::default()
    };
    let enc = default_encoder(cfg.encoder, cfg.seed).unwrap();
    let (train, eval) = contrastive_data(&cfg).unwrap();
    let out = run_contrastive(&cfg, &enc, &train).unwrap();
    let records = embedding_records(&out, &enc, &eval).unwrap();
    assert_eq!(records.len(), eval.len() * cfg.n_labels);
    let rows = evaluate(&records, Split::Validation).unwrap();
    assert_eq!(rows.len(), cfg.n_labels);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.auroc), "{r:?}");
    }
}
