//! Serialization round-trips through files and structured text.

use entrywise::eval::{ew_roc, true_posterior};
use entrywise::experiments::{BenchConfig, CompareConfig};
use entrywise::io;
use entrywise::simgen::{generate, EnsembleRanges};
use entrywise::{
    BandMode, CompletionMethod, DetectorConfig, EstimatorMethod, GenerationSpec, ModelId, TheoreticalConstants,
};

fn spec(model: ModelId) -> GenerationSpec {
    GenerationSpec {
        n: 14,
        m: 11,
        rank: 2,
        mean_level: 5.5,
        p_obs: 0.7,
        p_anom: 0.1,
        alpha: if model == ModelId::Zero { vec![] } else { vec![0.35] },
        model,
        seed: 99,
    }
}

#[test]
fn instance_directory_round_trips_exactly() {
    for model in [ModelId::PoissonThinned, ModelId::ExpOnset, ModelId::Zero] {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(model);
        let instance = generate(&s).unwrap();
        io::write_instance(dir.path(), &instance, Some(&s)).unwrap();
        let back = io::read_instance(dir.path()).unwrap();
        assert_eq!(back, instance, "{model}");
        // The manifest path and the directory are interchangeable.
        let via_manifest = io::read_instance(&io::manifest_path(dir.path())).unwrap();
        assert_eq!(via_manifest, instance);
    }
}

#[test]
fn observations_without_truth_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut instance = generate(&spec(ModelId::Zero)).unwrap();
    instance.truth = None;
    io::write_instance(dir.path(), &instance, None).unwrap();
    let back = io::read_instance(dir.path()).unwrap();
    assert_eq!(back, instance);
    assert!(back.truth().is_err());
}

#[test]
fn configs_round_trip_through_toml_and_json() {
    let mut det = DetectorConfig::new(3, ModelId::ExpOnset);
    det.band = BandMode::Fixed { half_width: 0.125 };
    det.completion = CompletionMethod::SoftImpute;
    det.estimator = EstimatorMethod::Likelihood;
    det.seed = u64::MAX - 7;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("detector.toml");
    io::write_toml(&path, &det).unwrap();
    let back: DetectorConfig = io::read_toml(&path).unwrap();
    assert_eq!(back, det);
    let json: DetectorConfig = serde_json::from_str(&serde_json::to_string(&det).unwrap()).unwrap();
    assert_eq!(json, det);

    let bench = BenchConfig {
        count: 7,
        master_seed: 5,
        ranges: EnsembleRanges::default(),
        compare: CompareConfig::default(),
    };
    let path = dir.path().join("bench.toml");
    io::write_toml(&path, &bench).unwrap();
    let back: BenchConfig = io::read_toml(&path).unwrap();
    assert_eq!(back, bench);

    let s = spec(ModelId::PoissonThinned);
    let back: GenerationSpec = toml::from_str(&toml::to_string(&s).unwrap()).unwrap();
    assert_eq!(back, s);
}

#[test]
fn partial_bench_config_fills_defaults() {
    let back: BenchConfig = toml::from_str("count = 3\n[compare]\nestimator = \"moments\"\n").unwrap();
    assert_eq!(back.count, 3);
    assert_eq!(back.compare.estimator, EstimatorMethod::Moments);
    assert_eq!(back.compare.completion, CompareConfig::default().completion);
    assert_eq!(back.ranges, EnsembleRanges::default());
}

#[test]
fn roc_csv_round_trips() {
    let instance = generate(&spec(ModelId::PoissonThinned)).unwrap();
    let f_star = true_posterior(&instance).unwrap();
    let cfg = DetectorConfig::new(2, ModelId::PoissonThinned);
    let pipeline =
        entrywise::detector::EwPipeline::prepare(&instance.obs, &cfg, &TheoreticalConstants::default()).unwrap();
    let roc = ew_roc(&pipeline, &f_star, &entrywise::eval::default_gamma_grid()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("roc.csv");
    io::write_roc(&path, &roc).unwrap();
    assert_eq!(io::read_roc(&path).unwrap(), roc.points);
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let instance = generate(&spec(ModelId::Zero)).unwrap();
    io::write_instance(dir.path(), &instance, None).unwrap();

    let obs = dir.path().join("observations.csv");
    std::fs::write(&obs, "row,col,count\n0,0,1\n0,0,2\n").unwrap();
    assert_eq!(io::read_instance(dir.path()).unwrap_err().kind(), "duplicate-entry");

    std::fs::write(&obs, "row,col,count\n0,99,1\n").unwrap();
    assert_eq!(io::read_instance(dir.path()).unwrap_err().kind(), "index-out-of-range");

    std::fs::write(&obs, "row,col,count\n0,0,x\n").unwrap();
    assert_eq!(io::read_instance(dir.path()).unwrap_err().kind(), "malformed-file");
}
