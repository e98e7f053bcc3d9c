mod common;

use std::path::Path;

use common::synthetic_config;
use ndarray::{Array2, Array3};
use zsad::app::{Session, Split};
use zsad::data::{classes_of, export_mvtec_layout, load_dataset, write_gray, write_rgb, Layout, MaskData};
use zsad::eval::{EvalRecord, PixelPooling, Report};

fn pixels(v: f64) -> Array3<f64> {
    Array3::from_elem((12, 12, 3), v)
}

fn blob() -> Array2<f64> {
    Array2::from_shape_fn((12, 12), |(r, c)| f64::from(u8::from((3..6).contains(&r) && (4..9).contains(&c))))
}

fn mvtec_fixture(root: &Path, with_masks: bool) {
    for class in ["bottle", "cable"] {
        let dir = root.join(class);
        write_rgb(&dir.join("test/good/000.png"), &pixels(0.2)).unwrap();
        write_rgb(&dir.join("test/crack/000.png"), &pixels(0.8)).unwrap();
        write_rgb(&dir.join("train/good/000.png"), &pixels(0.2)).unwrap();
        if with_masks {
            write_gray(&dir.join("ground_truth/crack/000_mask.png"), &blob()).unwrap();
        }
    }
    // stray files are ignored
    std::fs::write(root.join("bottle/test/good/notes.txt"), "x").unwrap();
}

#[test]
fn mvtec_layout_is_read_in_order() {
    let dir = tempfile::tempdir().unwrap();
    mvtec_fixture(dir.path(), true);
    let samples = load_dataset(dir.path(), Layout::Mvtec).unwrap();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    assert_eq!(labels, vec![0, 1, 0, 1]);
    assert_eq!(classes_of(&samples), vec!["bottle", "cable"]);
    assert_eq!(samples[1].id, "bottle/test/crack/000");
    assert!(matches!(samples[1].mask, Some(MaskData::File(_))));
    assert!(samples[0].mask.is_none() && samples[0].has_pixel_truth());
    let mask = samples[1].load_mask((12, 12)).unwrap().unwrap();
    assert_eq!(mask, blob());
    let normal = samples[0].load_mask((6, 6)).unwrap().unwrap();
    assert_eq!(normal, Array2::<f64>::zeros((6, 6)));
}

#[test]
fn visa_layout_is_read_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("candle/Data/Images");
    write_rgb(&images.join("Normal/0001.png"), &pixels(0.3)).unwrap();
    write_rgb(&images.join("Normal/0000.png"), &pixels(0.3)).unwrap();
    write_rgb(&images.join("Anomaly/0005.png"), &pixels(0.7)).unwrap();
    write_gray(&dir.path().join("candle/Data/Masks/Anomaly/0005.png"), &blob()).unwrap();
    let samples = load_dataset(dir.path(), Layout::Visa).unwrap();
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(
        ids,
        vec![
            "candle/Data/Images/Normal/0000",
            "candle/Data/Images/Normal/0001",
            "candle/Data/Images/Anomaly/0005"
        ]
    );
    assert_eq!(samples[2].label, 1);
    assert_eq!(samples[2].load_mask((12, 12)).unwrap().unwrap(), blob());
}

#[test]
fn missing_masks_drop_out_of_pixel_metrics() {
    let dir = tempfile::tempdir().unwrap();
    mvtec_fixture(dir.path(), false);
    let samples = load_dataset(dir.path(), Layout::Mvtec).unwrap();
    assert_eq!(samples.len(), 4);
    let abnormal = &samples[1];
    assert!(abnormal.mask.is_none() && !abnormal.has_pixel_truth());
    assert_eq!(abnormal.load_mask((4, 4)).unwrap(), None);
}

#[test]
fn empty_and_missing_roots() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path(), Layout::Mvtec).unwrap().is_empty());
    assert!(load_dataset(dir.path(), Layout::Visa).unwrap().is_empty());
    let err = load_dataset(&dir.path().join("absent"), Layout::Mvtec).unwrap_err();
    assert!(err.is_user_error());
    assert!(load_dataset(dir.path(), Layout::Synthetic).is_err());
}

#[test]
fn synthetic_export_reloads_identically() {
    let session = Session::new(synthetic_config()).unwrap();
    let generated = session.samples(Split::Test, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_mvtec_layout(&generated, dir.path()).unwrap();
    let loaded = load_dataset(dir.path(), Layout::Mvtec).unwrap();
    assert_eq!(loaded.len(), generated.len());
    let mut classes = classes_of(&generated);
    classes.sort();
    assert_eq!(classes_of(&loaded), classes);
    let key = |s: &zsad::data::Sample| (s.class_name.clone(), s.label);
    let mut a: Vec<_> = generated.iter().map(key).collect();
    let mut b: Vec<_> = loaded.iter().map(key).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    for s in &loaded {
        let orig = generated
            .iter()
            .find(|g| {
                g.class_name == s.class_name
                    && g.label == s.label
                    && (g.load_pixels().unwrap() - s.load_pixels().unwrap()).iter().all(|d| d.abs() <= 0.5 / 255.0 + 1e-12)
            })
            .unwrap_or_else(|| panic!("{} has no source", s.id));
        let size = orig.load_pixels().unwrap().dim();
        assert_eq!(orig.load_mask((size.0, size.1)).unwrap(), s.load_mask((size.0, size.1)).unwrap());
    }
}

fn rec(class: &str, label: u8, s: f64) -> EvalRecord {
    EvalRecord {
        image_id: format!("{class}/{label}/{s}"),
        class_name: class.into(),
        label,
        s_global: s,
        text_term: s / 2.0,
        map_term: s / 2.0,
        map: None,
        mask: None,
    }
}

#[test]
fn report_has_a_row_per_class_and_a_mean() {
    let records = vec![
        rec("b", 0, 0.1),
        rec("b", 1, 0.9),
        rec("a", 0, 0.6),
        rec("a", 1, 0.4),
        rec("a", 1, 0.8),
        rec("c", 0, 0.2),
    ];
    let report = Report::build(&records, PixelPooling::Pooled).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.class_name.as_str()).collect();
    assert_eq!(names, vec!["b", "a", "c"]);
    assert_eq!(report.rows[0].image_auroc, Some(1.0));
    assert_eq!(report.rows[1].image_auroc, Some(0.5));
    // a class with one label has no image metric and is left out of the mean
    assert_eq!(report.rows[2].image_auroc, None);
    assert_eq!(report.mean.image_auroc, Some(0.75));
    assert!(report.rows.iter().all(|r| r.pixel_auroc.is_none()));
    assert_eq!(report.to_table().lines().count(), 1 + 3 + 1);
    let back: Report = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}
