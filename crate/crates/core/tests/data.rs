use samcd::data::{scan_dataset, synth_generate, write_synthetic, NuisanceSpec, Split, SynthMeta};

#[test]
fn synthetic_samples_survive_the_png_layout() {
    let dir = tempfile::tempdir().unwrap();
    let nuisance = NuisanceSpec::default();
    let samples = synth_generate(4, 64, 0.1, &nuisance, 21).unwrap();
    let meta = SynthMeta { n: 4, size: 64, change_density: 0.1, nuisance, seed: 21 };
    write_synthetic(dir.path(), Split::Train, &samples, &meta).unwrap();

    let manifest = scan_dataset(dir.path(), Split::Train).unwrap();
    assert_eq!(manifest.len(), 4);
    let loaded = manifest.load_all().unwrap();
    assert_eq!(loaded, samples);

    let sidecar = std::fs::read_to_string(dir.path().join("train").join("meta.json")).unwrap();
    let back: SynthMeta = serde_json::from_str(&sidecar).unwrap();
    assert_eq!(back, meta);
}

#[test]
fn tiled_manifest_yields_all_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_generate(2, 128, 0.1, &NuisanceSpec::default(), 3).unwrap();
    samcd::data::write_dataset(dir.path(), Split::Val, &samples).unwrap();
    let manifest = scan_dataset(dir.path(), Split::Val).unwrap().with_tiling(64, 64).unwrap();
    let tiles = manifest.load_all().unwrap();
    assert_eq!(tiles.len(), 8);
    assert!(tiles.iter().all(|t| t.size() == (64, 64)));
}
