use bno_core::dataset::{darcy_dataset, DarcyDataSpec, OperatorDataset};
use bno_core::laplace::{LastLayerFeatures, LaplacePosterior};
use bno_core::operator::{Architecture, NeuralOperatorParams};
use nalgebra::DMatrix;

#[test]
fn darcy_dataset_survives_save_and_load() {
    let spec = DarcyDataSpec {
        n_samples: 3,
        seed: 5,
        grid_size: 6,
        solve_size: 11,
        coefficient: Default::default(),
    };
    let ds = darcy_dataset(&spec).unwrap().with_random_masks(4, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = OperatorDataset::load(dir.path()).unwrap();
    assert_eq!(ds, back);
    assert!(back.samples().iter().all(|s| s.observed_count() == 4));
}

#[test]
fn checkpoint_survives_save_and_load() {
    let arch = Architecture::darcy(vec![4, 3], 2, 2, (3.0, 12.0));
    let p = NeuralOperatorParams::init(arch, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    p.save_checkpoint(dir.path(), &serde_json::json!({"note": "x"})).unwrap();
    let (q, meta) = NeuralOperatorParams::load_checkpoint(dir.path()).unwrap();
    assert_eq!(p, q);
    assert_eq!(meta["note"], "x");
    assert_eq!(q.architecture().kernel_input_dim(), 6);
}

#[test]
fn laplace_posterior_survives_save_and_load() {
    let phi = DMatrix::from_fn(6, 3, |i, j| ((i + 2 * j) as f64 * 0.9).cos());
    let f = LastLayerFeatures::new(phi).unwrap();
    let y = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1];
    let post = LaplacePosterior::fit(&f, &y, &[0.2, -0.1, 0.05], 2.0, 0.03).unwrap();
    let dir = tempfile::tempdir().unwrap();
    post.save(dir.path()).unwrap();
    let back = LaplacePosterior::load(dir.path()).unwrap();
    let (m0, v0, _) = post.predict_features(&f, false).unwrap();
    let (m1, v1, _) = back.predict_features(&f, false).unwrap();
    assert_eq!(m0, m1);
    for (a, b) in v0.iter().zip(&v1) {
        assert!((a - b).abs() <= 1e-14 * a.abs());
    }
    assert_eq!(post.tau(), back.tau());
    assert_eq!(post.sigma2(), back.sigma2());
}
