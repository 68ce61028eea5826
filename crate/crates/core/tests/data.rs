use std::fs;
use std::path::Path;

use basisconv::data::{
    cifar_files, load_cifar10, load_mnist, mnist_files, split_off, stratified_indices, subset, write_cifar_batch,
    write_idx_images, write_idx_labels, LabeledImageSet, Split,
};
use basisconv::Error;
use basisconv_tensor::Tensor;
use proptest::prelude::*;

fn write_mnist(dir: &Path, pixels: &[u8], labels: &[u8]) {
    let [img, lab] = mnist_files(Split::Train);
    write_idx_images(&dir.join(img), labels.len(), 2, 3, pixels).unwrap();
    write_idx_labels(&dir.join(lab), labels).unwrap();
}

#[test]
fn idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..12).map(|i| (i * 21) as u8).collect();
    write_mnist(dir.path(), &pixels, &[7, 2]);
    let set = load_mnist(dir.path(), Split::Train, None).unwrap();
    assert_eq!(set.images.shape(), [2, 1, 2, 3]);
    assert_eq!(set.labels, vec![7, 2]);
    assert_eq!(set.split, "train");
    for (v, p) in set.images.data().iter().zip(&pixels) {
        assert_eq!(*v, *p as f32 / 255.0);
    }
    assert!(set.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn idx_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_mnist(dir.path(), Split::Test, None), Err(Error::MissingFile(_))));

    write_mnist(dir.path(), &[0; 12], &[1, 2]);
    let img = dir.path().join(mnist_files(Split::Train)[0]);
    let bytes = fs::read(&img).unwrap();
    fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_mnist(dir.path(), Split::Train, None), Err(Error::Truncated { .. })));

    let mut bad = bytes.clone();
    bad[3] = 0x01;
    fs::write(&img, &bad).unwrap();
    assert!(matches!(load_mnist(dir.path(), Split::Train, None), Err(Error::BadMagic { .. })));

    fs::write(&img, &bytes).unwrap();
    write_idx_labels(&dir.path().join(mnist_files(Split::Train)[1]), &[1, 12]).unwrap();
    assert!(matches!(load_mnist(dir.path(), Split::Train, None), Err(Error::Format { .. })));
}

fn cifar_record(label: u8, seed: u8) -> (u8, Vec<u8>) {
    (label, (0..3072).map(|i| (i as u8).wrapping_mul(seed)).collect())
}

#[test]
fn cifar_layout_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![cifar_record(3, 1), cifar_record(9, 7)];
    write_cifar_batch(&dir.path().join(&cifar_files(Split::Test)[0]), &recs).unwrap();
    let set = load_cifar10(dir.path(), Split::Test, None).unwrap();
    assert_eq!(set.images.shape(), [2, 3, 32, 32]);
    assert_eq!(set.labels, vec![3, 9]);
    assert_eq!(set.images.at(&[1, 2, 31, 31]), recs[1].1[2 * 1024 + 31 * 32 + 31] as f32 / 255.0);
    assert_eq!(set.images.at(&[0, 1, 0, 5]), recs[0].1[1024 + 5] as f32 / 255.0);

    let path = dir.path().join(&cifar_files(Split::Test)[0]);
    let b = fs::read(&path).unwrap();
    fs::write(&path, &b[..3073 + 100]).unwrap();
    assert!(matches!(load_cifar10(dir.path(), Split::Test, None), Err(Error::Truncated { .. })));
    assert!(matches!(load_cifar10(dir.path(), Split::Train, None), Err(Error::MissingFile(_))));
}

#[test]
fn cache_returns_identical_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let pixels: Vec<u8> = (0..18).map(|i| (i * 13) as u8).collect();
    write_mnist(dir.path(), &pixels, &[1, 2, 3]);
    let plain = load_mnist(dir.path(), Split::Train, None).unwrap();
    let first = load_mnist(dir.path(), Split::Train, Some(&cache)).unwrap();
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
    let second = load_mnist(dir.path(), Split::Train, Some(&cache)).unwrap();
    assert_eq!(plain, first);
    assert_eq!(first, second);
}

fn labelled(labels: Vec<usize>) -> LabeledImageSet {
    let n = labels.len();
    LabeledImageSet {
        images: Tensor::from_fn([n, 1, 2, 2], |i| (i / 4) as f32),
        labels,
        classes: 10,
        split: "train".into(),
    }
}

#[test]
fn subset_contracts() {
    let labels: Vec<usize> = (0..103).map(|i| (i * 7) % 10).collect();
    let set = labelled(labels.clone());
    assert_eq!(stratified_indices(&labels, 103, 1).unwrap(), (0..103).collect::<Vec<_>>());
    assert_eq!(subset(&set, 103, 1).unwrap(), set);
    assert_eq!(subset(&set, 37, 4).unwrap(), subset(&set, 37, 4).unwrap());
    assert!(matches!(subset(&set, 104, 0), Err(Error::SubsetTooLarge { requested: 104, available: 103 })));
    let (a, b) = split_off(&set, 40, 2).unwrap();
    assert_eq!(a.len() + b.len(), 103);
    let ca = a.class_counts();
    assert!(ca.iter().max().unwrap() - ca.iter().min().unwrap() <= 1);
}

proptest! {
    #[test]
    fn stratified_counts_differ_by_at_most_one(n in 1usize..200, seed in 0u64..1000) {
        let labels: Vec<usize> = (0..200).map(|i| (i * 7) % 10).collect();
        let idx = stratified_indices(&labels, n, seed).unwrap();
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        let mut counts = [0usize; 10];
        for &i in &idx {
            counts[labels[i]] += 1;
        }
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }
}
