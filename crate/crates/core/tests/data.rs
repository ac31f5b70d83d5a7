use std::fs;
use std::path::Path;

use fsad_core::data::{list_categories, sample_k_shot, scan_category, Label};
use fsad_core::Error;
use proptest::prelude::*;

fn touch(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, b"").unwrap();
}

/// `bottle`: 6 train images, 2 good + 3 broken_large test images, masks for
/// two of the broken ones. `notes` has no train/good and is not a category.
fn tree(root: &Path) {
    let c = root.join("bottle");
    for i in [5, 0, 3, 1, 4, 2] {
        touch(&c.join(format!("train/good/{i:03}.png")));
    }
    for i in 0..2 {
        touch(&c.join(format!("test/good/{i:03}.png")));
    }
    for i in 0..3 {
        touch(&c.join(format!("test/broken_large/{i:03}.png")));
    }
    touch(&c.join("ground_truth/broken_large/000_mask.png"));
    touch(&c.join("ground_truth/broken_large/001_mask.png"));
    touch(&c.join("readme.txt"));
    fs::create_dir_all(root.join("notes")).unwrap();
}

#[test]
fn scan_lists_sorted_and_labels_tests() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path());
    assert_eq!(list_categories(dir.path()).unwrap(), vec!["bottle"]);
    let spec = scan_category(dir.path(), "bottle").unwrap();
    let names: Vec<_> = spec
        .train_normals
        .iter()
        .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
        .collect();
    assert_eq!(names, ["000.png", "001.png", "002.png", "003.png", "004.png", "005.png"]);
    assert_eq!(spec.anomaly_labels, vec!["broken_large"]);
    assert_eq!(spec.test_items.len(), 5);
    let anomalous: Vec<_> = spec.test_items.iter().filter(|t| t.label == Label::Anomaly).collect();
    assert_eq!(anomalous.len(), 3);
    assert_eq!(anomalous.iter().filter(|t| t.mask.is_some()).count(), 2);
    assert!(spec.has_masks && !spec.pixel_ready());
    assert_eq!(spec, scan_category(dir.path(), "bottle").unwrap());
}

#[test]
fn missing_category_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path());
    assert!(matches!(scan_category(dir.path(), "zipper"), Err(Error::Input(_))));
    assert!(matches!(scan_category(dir.path(), "notes"), Err(Error::Input(_))));
}

#[test]
fn k_shot_bounds() {
    let dir = tempfile::tempdir().unwrap();
    tree(dir.path());
    let spec = scan_category(dir.path(), "bottle").unwrap();
    assert_eq!(sample_k_shot(&spec, 6, 3).unwrap(), spec.train_normals);
    assert!(matches!(sample_k_shot(&spec, 7, 3), Err(Error::Input(_))));
    assert!(matches!(sample_k_shot(&spec, 0, 3), Err(Error::Input(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn k_shot_is_deterministic_distinct_and_sorted(k in 1usize..=6, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        tree(dir.path());
        let spec = scan_category(dir.path(), "bottle").unwrap();
        let a = sample_k_shot(&spec, k, seed).unwrap();
        prop_assert_eq!(&a, &sample_k_shot(&spec, k, seed).unwrap());
        prop_assert_eq!(a.len(), k);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.iter().all(|p| spec.train_normals.contains(p)));
    }
}
