//! Library-level integration: trainer on a real manifest, ensemble
//! inference against batch predictions, and the ablation harness against a
//! direct train-and-evaluate run.

use std::sync::Arc;

use paramface::adapt::IdentityAdapter;
use paramface::ensemble::{fit_ensemble, EnsembleModel, Member, MemberMatrices};
use paramface::eval::{
    baseline_predictor, inaccuracy_vs_baseline, run_ablation, AblationConfig, CellFactors, InputFactor, LossFactor,
    ModelKey,
};
use paramface::synth::{generate_dataset, DatasetManifest, GenerationOptions};
use paramface::trainer::{
    predict_matrix, prepare_input, target_matrix, train, Architecture, HeadKind, InputSpec, Schedule, TargetSpec,
    TrainConfig, TrainedModel, TransferMode,
};
use tempfile::TempDir;

fn dataset(n: usize, seed: u64) -> (TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(n, seed, &GenerationOptions::default(), dir.path(), 2, None).unwrap();
    (dir, m)
}

fn small_config(mode: TransferMode, input: InputSpec, target: TargetSpec) -> TrainConfig {
    let mut c = TrainConfig::new(mode, input, target, HeadKind::Joint);
    c.architecture = Architecture {
        widths: vec![4, 8],
        pool_grid: 1,
    };
    c.schedule.max_epochs = 3;
    c.batch_size = 8;
    c
}

#[test]
fn trainer_on_manifest_matches_per_sample_prediction() {
    let (_d, data) = dataset(40, 1);
    let cfg = small_config(
        TransferMode::FeatureExtraction,
        InputSpec::Crop("mouth".into()),
        TargetSpec::Local("mouth".into()),
    );
    let model = train(&data, &cfg, None).unwrap();
    assert_eq!(model.provenance.dataset_sha256, data.digest());
    assert_eq!(model.digest(), train(&data, &cfg, None).unwrap().digest());

    let matrix = predict_matrix(&model, &data, None).unwrap();
    assert_eq!(matrix.shape(), (40, model.slice.len()));
    assert_eq!(matrix.names, model.slice.names);
    for (i, row) in matrix.rows.iter().enumerate() {
        let s = data.load_sample(i).unwrap();
        let input = prepare_input(&s.image, s.landmarks, &cfg.input, &cfg.frame).unwrap();
        assert_eq!(&model.predict(&input).unwrap(), row);
    }

    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), "m").unwrap();
    let back = TrainedModel::load(dir.path(), "m").unwrap();
    assert_eq!(back.digest(), model.digest());
    assert_eq!(predict_matrix(&back, &data, None).unwrap(), matrix);
}

#[test]
fn ensemble_inference_matches_blended_matrices() {
    let (_d, data) = dataset(30, 2);
    let agg_cfg = small_config(TransferMode::FeatureExtraction, InputSpec::FullFrame, TargetSpec::Complete);
    let nose_cfg = small_config(
        TransferMode::FeatureExtraction,
        InputSpec::Crop("nose".into()),
        TargetSpec::Local("nose".into()),
    );
    let aggregate = Member {
        id: "agg".into(),
        model: train(&data, &agg_cfg, None).unwrap(),
    };
    let nose = Member {
        id: "nose".into(),
        model: train(&data, &nose_cfg, None).unwrap(),
    };
    let matrices = MemberMatrices {
        models: vec![
            ("agg".into(), predict_matrix(&aggregate.model, &data, None).unwrap()),
            ("nose".into(), predict_matrix(&nose.model, &data, None).unwrap()),
        ],
        target: target_matrix(&data).unwrap(),
    };
    let weights = fit_ensemble(&matrices).unwrap();
    let blended = matrices.blend(&weights).unwrap();
    let ens = EnsembleModel::new(data.schema.clone(), aggregate, vec![nose], weights, Arc::new(IdentityAdapter)).unwrap();
    for (i, row) in blended.rows.iter().enumerate() {
        let s = data.load_sample(i).unwrap();
        let v = ens.predict_vector(&s.image, Some(s.landmarks)).unwrap();
        for (a, b) in v.iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    ens.save(dir.path()).unwrap();
    let back = EnsembleModel::load(dir.path()).unwrap();
    assert_eq!(back.digest(), ens.digest());
}

#[test]
fn single_cell_ablation_equals_direct_run() {
    let (_d, data) = dataset(50, 3);
    let cell = CellFactors::new(LossFactor::Local, InputFactor::Crop, TransferMode::FeatureExtraction);
    let config = AblationConfig {
        regions: vec!["eyes".into()],
        cells: vec![cell],
        architecture: Architecture {
            widths: vec![4, 8],
            pool_grid: 1,
        },
        feature_extraction: Schedule {
            max_epochs: 3,
            ..Schedule::default()
        },
        batch_size: 8,
        ..AblationConfig::default()
    };
    let outcome = run_ablation(&data, &config, 1).unwrap();
    assert_eq!(outcome.table.cells.len(), 1);
    let got = outcome.table.cells[0].inaccuracy.unwrap();

    let key = ModelKey::for_cell("eyes", cell, 0);
    let train_set = data.subset(&outcome.train_indices);
    let eval_set = data.subset(&outcome.eval_indices);
    let model = train(&train_set, &config.train_config(&key), None).unwrap();
    assert_eq!(model.digest(), outcome.models[&key].digest());

    let preds = predict_matrix(&model, &eval_set, None).unwrap();
    let targets = target_matrix(&eval_set).unwrap();
    let layout = data.schema.layout();
    let full: Vec<Vec<f64>> = preds
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![0.0; layout.len];
            for (&i, x) in model.slice.indices.iter().zip(r) {
                v[i] = *x;
            }
            v
        })
        .collect();
    let coords: Vec<usize> = layout.region("eyes").unwrap().span().collect();
    let baseline = baseline_predictor(&targets.rows).unwrap();
    let direct = inaccuracy_vs_baseline(&full, &targets.rows, &baseline, &coords).unwrap();
    assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");

    let parallel = run_ablation(&data, &config, 3).unwrap();
    assert_eq!(parallel.table, outcome.table);
}
