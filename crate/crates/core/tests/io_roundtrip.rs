use std::fs;

use crfrnn_core::crf_rnn::{crf_rnn_infer, ParamSchedule};
use crfrnn_core::io::{
    labels_from_marginals, load_dataset, load_image, load_labels, load_params, load_tensor,
    load_unary, overlay, read_manifest, read_unary, save_image, save_labels, save_marginal,
    save_params, save_unary, write_dataset,
};
use crfrnn_core::meanfield::init_softmax;
use crfrnn_core::synth::synth_dataset_with_labels;
use crfrnn_core::training::init_params;
use crfrnn_core::{
    CrfError, CrfParams, KernelBank, LabelMap, MarginalField, Matrix, RgbImage, UnaryField,
};

#[test]
fn single_red_pixel_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("red.ppm");
    fs::write(&path, b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
    let img = load_image(&path).unwrap();
    assert_eq!((img.width(), img.height()), (1, 1));
    assert_eq!(img.pixel(0), [255, 0, 0]);
}

#[test]
fn image_round_trip_and_pgm_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let img = RgbImage::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
    let path = dir.path().join("img.ppm");
    save_image(&img, &path).unwrap();
    assert_eq!(load_image(&path).unwrap(), img);

    let labels = LabelMap::new(3, 2, vec![0, 1, 2, 255, 1, 0]).unwrap();
    let gray = dir.path().join("gray.pgm");
    save_labels(&labels, &gray).unwrap();
    assert_eq!(load_labels(&gray).unwrap(), labels);
    let err = load_image(&gray).unwrap_err();
    assert!(matches!(err, CrfError::Format(_)), "{err}");
    assert!(err.to_string().contains("gray.pgm"));

    assert!(matches!(
        load_image(dir.path().join("missing.ppm")),
        Err(CrfError::Io { .. })
    ));
    fs::write(dir.path().join("cut.ppm"), b"P6\n4 4\n255\n\x01\x02").unwrap();
    assert!(load_image(dir.path().join("cut.ppm")).is_err());
}

#[cfg(feature = "png")]
#[test]
fn png_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let img = RgbImage::new(4, 3, (0..36).map(|v| v * 7).collect()).unwrap();
    save_image(&img, dir.path().join("a.png")).unwrap();
    assert_eq!(load_image(dir.path().join("a.png")).unwrap(), img);
    let labels = LabelMap::new(4, 3, vec![0, 1, 2, 3, 255, 0, 1, 2, 3, 4, 5, 6]).unwrap();
    save_labels(&labels, dir.path().join("l.png")).unwrap();
    assert_eq!(load_labels(dir.path().join("l.png")).unwrap(), labels);
    assert!(load_image(dir.path().join("l.png")).is_err());
}

#[cfg(not(feature = "png"))]
#[test]
fn png_needs_the_feature() {
    let dir = tempfile::tempdir().unwrap();
    let img = RgbImage::filled(2, 2, [1, 2, 3]).unwrap();
    assert!(matches!(
        save_image(&img, dir.path().join("a.png")),
        Err(CrfError::Format(_))
    ));
}

#[test]
fn unary_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.crft");
    let values = Matrix::from_fn(4, 3, |i, l| (i as f64 - 1.5) * 0.1 + l as f64 / 3.0);
    let u = UnaryField::new(2, 2, values).unwrap();
    save_unary(&u, &path).unwrap();

    // bit-identical file after load and save
    let bytes = fs::read(&path).unwrap();
    let loaded = load_unary(&path, 2, 2, 3).unwrap();
    let again = dir.path().join("u2.crft");
    save_unary(&loaded, &again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);
    assert_eq!(read_unary(&path).unwrap().values(), loaded.values());
    assert_eq!(load_tensor(&path).unwrap()[0].dims(), &[2, 2, 3]);

    let err = load_unary(&path, 2, 2, 4).unwrap_err();
    assert!(matches!(err, CrfError::Shape(_)), "{err}");
    assert!(load_unary(&path, 2, 1, 3).is_err());
}

#[test]
fn argmax_ties_pick_the_lowest_label() {
    let q = MarginalField::new(
        1,
        2,
        Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap(),
    )
    .unwrap();
    assert_eq!(labels_from_marginals(&q).unwrap().labels(), &[0, 1]);
    let u = UnaryField::new(1, 1, Matrix::from_vec(1, 2, vec![0.1, 0.1]).unwrap()).unwrap();
    assert_eq!(u.argmax(), vec![0]);
    assert_eq!(
        labels_from_marginals(&init_softmax(&u)).unwrap().labels(),
        &[0]
    );
}

#[test]
fn marginals_and_labels_from_inference() {
    let dir = tempfile::tempdir().unwrap();
    let s = &synth_dataset_with_labels(3, 1, 12, 10, 0.2, 3).unwrap()[0];
    let bank = KernelBank::build(
        &s.image,
        &crfrnn_core::meanfield::default_kernels()
            .into_iter()
            .map(|(k, _)| k)
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let params = ParamSchedule::Shared(init_params(3, &[3.0, 5.0]).unwrap());
    let q = crf_rnn_infer(&s.unary, &bank, &params, 5)
        .unwrap()
        .marginals;
    save_marginal(&q, dir.path().join("q.crft")).unwrap();
    let rec = &load_tensor(dir.path().join("q.crft")).unwrap()[0];
    assert_eq!(rec.dims(), &[12, 10, 3]);
    for (a, b) in rec.data().iter().zip(q.values().as_slice()) {
        assert_eq!(*a, *b as f32);
    }
    let labels = labels_from_marginals(&q).unwrap();
    save_labels(&labels, dir.path().join("l.pgm")).unwrap();
    assert_eq!(load_labels(dir.path().join("l.pgm")).unwrap(), labels);
}

#[test]
fn parameter_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.crft");
    let p = CrfParams::new(
        Matrix::from_vec(2, 2, vec![3.0, 5.0, 2.5, 4.25]).unwrap(),
        Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.5, -0.125]).unwrap(),
    )
    .unwrap();
    let shared = ParamSchedule::Shared(p.clone());
    save_params(&shared, &path).unwrap();
    let recs = load_tensor(&path).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!((recs[0].dims(), recs[1].dims()), (&[2, 2][..], &[2, 2][..]));
    assert_eq!(load_params(&path, 2, 2).unwrap(), shared);
    assert!(load_params(&path, 2, 3).is_err());
    assert!(load_params(&path, 3, 2).is_err());

    let per = ParamSchedule::PerIteration(vec![p.clone(), CrfParams::zeros(2, 2), p]);
    save_params(&per, &path).unwrap();
    assert_eq!(load_params(&path, 2, 2).unwrap(), per);

    save_unary(
        &UnaryField::new(1, 1, Matrix::filled(1, 2, 0.0)).unwrap(),
        &path,
    )
    .unwrap();
    assert!(load_params(&path, 2, 2).is_err());
}

#[test]
fn overlay_blends_labels() {
    let img = RgbImage::filled(2, 1, [100, 100, 100]).unwrap();
    let labels = LabelMap::new(2, 1, vec![0, 255]).unwrap();
    let out = overlay(&img, &labels, 0.5, 255).unwrap();
    // label 0 is black in the palette; ignored pixels keep their color
    assert_eq!(out.pixel(0), [50, 50, 50]);
    assert_eq!(out.pixel(1), [100, 100, 100]);
    let labels = LabelMap::new(2, 1, vec![1, 2]).unwrap();
    let out = overlay(&img, &labels, 1.0, 255).unwrap();
    assert_eq!(out.pixel(0), [128, 0, 0]);
    assert_eq!(out.pixel(1), [0, 128, 0]);
    assert!(overlay(&img, &LabelMap::new(1, 1, vec![0]).unwrap(), 0.5, 255).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_dataset_with_labels(5, 3, 9, 11, 0.2, 3).unwrap();
    let manifest = write_dataset(&samples, dir.path().join("data")).unwrap();
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 3);
    assert!(entries[1].unary.ends_with("sample_001.crft"));
    let loaded = load_dataset(&manifest, 3, 255).unwrap();
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.ground_truth, b.ground_truth);
        for (x, y) in a
            .unary
            .values()
            .as_slice()
            .iter()
            .zip(b.unary.values().as_slice())
        {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    assert!(load_dataset(&manifest, 2, 255).is_err());

    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "a.ppm\tb.crft\n").unwrap();
    assert!(read_manifest(&bad).is_err());
    fs::write(&bad, "# nothing\n\n").unwrap();
    assert!(read_manifest(&bad).is_err());
}
