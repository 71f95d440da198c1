use expdate_core::synth::{
    generate_dataset, make_sample, Bitmap, DateKind, Dataset, DatasetManifest, GenerateOptions, GlyphAtlas, Which,
};

fn options(count: usize, threads: usize) -> GenerateOptions {
    GenerateOptions {
        count,
        kind: DateKind::Realistic,
        seed: 42,
        canvas: (32, 128),
        threads,
    }
}

#[test]
fn written_dataset_matches_in_memory_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&options(20, 2), tmp.path()).unwrap();
    assert_eq!(manifest, DatasetManifest::load(tmp.path()).unwrap());

    let atlas = GlyphAtlas::for_canvas(32, 128).unwrap();
    let pairs: Vec<_> = (0..20)
        .map(|i| make_sample(DateKind::Realistic, 42, i, &atlas, (32, 128)).unwrap())
        .collect();
    for (rec, pair) in manifest.records.iter().zip(&pairs) {
        assert_eq!(rec.label, pair.label.as_str());
        assert_eq!(rec.offset, [pair.offset.0, pair.offset.1]);
        let input = Bitmap::load_png(&tmp.path().join(&rec.input)).unwrap();
        assert_eq!(input, pair.input);
    }

    let disk = Dataset::load(tmp.path()).unwrap();
    let mem = Dataset::from_pairs(&pairs).unwrap();
    let idx: Vec<usize> = (0..20).collect();
    for which in [Which::Input, Which::Target] {
        let a = disk.batch::<f32>(which, &idx);
        assert_eq!(a, mem.batch::<f32>(which, &idx));
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn thread_count_does_not_change_the_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = generate_dataset(&options(9, 1), &a).unwrap();
    generate_dataset(&options(9, 3), &b).unwrap();
    for rec in &ma.records {
        for file in [&rec.input, &rec.target] {
            assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap());
        }
    }
    assert_eq!(std::fs::read(a.join("manifest.jsonl")).unwrap(), std::fs::read(b.join("manifest.jsonl")).unwrap());
}

#[test]
fn missing_image_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let m = generate_dataset(&options(3, 1), tmp.path()).unwrap();
    std::fs::remove_file(tmp.path().join(&m.records[1].target)).unwrap();
    assert!(Dataset::load(tmp.path()).is_err());
}
