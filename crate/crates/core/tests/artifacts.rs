use ldp_core::artifact::Artifact;
use ldp_core::autoencoder::{AEConfig, AEParams};
use ldp_core::corpus::natural_images;
use ldp_core::detector::{generate_synthetic_dataset, DetectorParams, GridConfig, PersonDetector};
use ldp_core::RandomSource;

// Trained weights are f32-exact, so models reloaded from disk must behave
// exactly like the ones that were saved.

#[test]
fn autoencoder_survives_a_file_round_trip() {
    let cfg = AEConfig { image_size: 32, ..AEConfig::default() };
    let mut rng = RandomSource::new(1);
    let mut ae = AEParams::init(&cfg, &mut rng).unwrap();
    ae.params.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ldp");
    ae.to_artifact(1).save(&path).unwrap();
    let back = AEParams::from_artifact(&Artifact::load(&path).unwrap()).unwrap();
    for x in natural_images(3, 32, &RandomSource::new(2)) {
        let (a, b) = (ae.encode(&x).unwrap(), back.encode(&x).unwrap());
        assert_eq!(a.data(), b.data());
        assert_eq!(ae.decode(&a).unwrap().data(), back.decode(&b).unwrap().data());
    }
}

#[test]
fn detector_survives_a_file_round_trip() {
    let cfg = GridConfig { image_size: 32, grid_size: 4, base_width: 4, ..GridConfig::default() };
    let mut det = DetectorParams::init(&cfg, &mut RandomSource::new(3)).unwrap();
    det.params.round_to_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("det.ldp");
    det.to_artifact(3).save(&path).unwrap();
    let back = DetectorParams::from_artifact(&Artifact::load(&path).unwrap()).unwrap();
    for s in generate_synthetic_dataset(3, &cfg, &RandomSource::new(4)).unwrap() {
        assert_eq!(det.max_person_confidence(&s.image).unwrap(), back.max_person_confidence(&s.image).unwrap());
    }
}

#[test]
fn truncated_or_foreign_files_are_rejected() {
    let cfg = AEConfig { image_size: 32, ..AEConfig::default() };
    let ae = AEParams::init(&cfg, &mut RandomSource::new(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ae.ldp");
    ae.to_artifact(5).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Artifact::load(&path).is_err());
    std::fs::write(&path, b"not an artifact at all").unwrap();
    assert!(Artifact::load(&path).is_err());
    let art = ae.to_artifact(5);
    assert!(DetectorParams::from_artifact(&art).is_err());
}
