use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;

use super::*;
use crate::net::{build_architecture, Architecture, InitMode};

fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IMAGE_MAGIC, n, h, w] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(magic: u32, labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).unwrap();
    enc.finish().unwrap()
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn loads_raw_and_gzip_identically() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as u8).collect();
    let img = idx_images(3, 4, 5, &pixels);
    let lab = idx_labels(LABEL_MAGIC, &[1, 9, 0]);
    let raw = load_mnist_idx(&write(dir.path(), "i", &img), &write(dir.path(), "l", &lab)).unwrap();
    let gz = load_mnist_idx(&write(dir.path(), "i.gz", &gzip(&img)), &write(dir.path(), "l.gz", &gzip(&lab))).unwrap();
    assert_eq!(raw, gz);
    assert_eq!(raw.images.shape(), &[3, 1, 4, 5]);
    assert_eq!(raw.labels, vec![1, 9, 0]);
    assert_eq!(raw.images.data()[1], 7.0 / 255.0);
    assert!(raw.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "i", &idx_images(2, 2, 2, &[0; 8]));
    let bad_magic = write(dir.path(), "l1", &idx_labels(IMAGE_MAGIC, &[0, 1]));
    let err = load_mnist_idx(&img, &bad_magic).unwrap_err().to_string();
    assert!(err.contains("expected label magic"), "{err}");
    let mismatch = write(dir.path(), "l2", &idx_labels(LABEL_MAGIC, &[0, 1, 2]));
    assert!(load_mnist_idx(&img, &mismatch).is_err());
    let short = write(dir.path(), "i2", &idx_images(2, 2, 2, &[0; 5]));
    let labels = write(dir.path(), "l3", &idx_labels(LABEL_MAGIC, &[0, 1]));
    assert!(load_mnist_idx(&short, &labels).unwrap_err().to_string().contains("truncated"));
    assert!(load_mnist_idx(&dir.path().join("missing"), &labels).is_err());
}

#[test]
fn finds_mnist_files_in_root() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "t10k-images-idx3-ubyte.gz", &gzip(&idx_images(2, 2, 2, &[255; 8])));
    write(dir.path(), "t10k-labels-idx1-ubyte", &idx_labels(LABEL_MAGIC, &[3, 4]));
    let ds = load_mnist(dir.path(), false).unwrap();
    assert_eq!(ds.labels, vec![3, 4]);
    assert!(load_mnist(dir.path(), true).is_err());
}

#[test]
fn moons_without_noise_lie_on_arcs() {
    let ds = synthetic_moons(200, 0.0, 1).unwrap();
    for (s, &y) in ds.labels.iter().enumerate() {
        let (px, py) = (ds.images.at2(s, 0), ds.images.at2(s, 1));
        let (x, y2) = (px * 3.0 - 1.0, py * 1.5 - 0.5);
        let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
        let r = ((x - cx).powi(2) + (y2 - cy).powi(2)).sqrt();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(if y == 0 { y2 >= -1e-12 } else { y2 <= 0.5 + 1e-12 });
    }
    assert_eq!(ds, synthetic_moons(200, 0.0, 1).unwrap());
    assert_eq!(synthetic_moons(50, 0.1, 3).unwrap(), synthetic_moons(50, 0.1, 3).unwrap());
    assert_ne!(synthetic_moons(50, 0.1, 3).unwrap(), synthetic_moons(50, 0.1, 4).unwrap());
    assert!(synthetic_moons(1, 0.0, 0).is_err());
}

#[test]
fn batching() {
    let sizes: Vec<usize> = batch_indices(10, 4, 0, 0).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![4, 4, 2]);
    assert_eq!(batch_indices(100, 7, 5, 3).unwrap(), batch_indices(100, 7, 5, 3).unwrap());
    let mut distinct = 0;
    for e in 0..20 {
        if batch_indices(100, 100, 5, e).unwrap() != batch_indices(100, 100, 5, e + 1).unwrap() {
            distinct += 1;
        }
    }
    assert_eq!(distinct, 20);
    let mut all: Vec<usize> = batch_indices(37, 5, 1, 2).unwrap().concat();
    all.sort_unstable();
    assert_eq!(all, (0..37).collect::<Vec<_>>());
    assert!(batch_indices(10, 0, 0, 0).is_err());
    let ds = synthetic_moons(10, 0.0, 0).unwrap();
    let got: Vec<usize> = batches(&ds, 4, 0, 0).unwrap().map(|(x, y)| {
        assert_eq!(x.rows(), y.len());
        y.len()
    }).collect();
    assert_eq!(got, vec![4, 4, 2]);
}

#[test]
fn subset_and_split() {
    let ds = synthetic_moons(100, 0.05, 2).unwrap();
    let sub = ds.subset(30, 7);
    assert_eq!(sub.len(), 30);
    assert_eq!(sub, ds.subset(30, 7));
    let (train, val) = sub.split_tail(0.1);
    assert_eq!((train.len(), val.len()), (27, 3));
    assert_eq!(val.labels, sub.labels[27..].to_vec());
}

#[test]
fn folded_normalization_matches_explicit() {
    let mut ds = synthetic_moons(20, 0.1, 9).unwrap();
    ds.images = ds.images.reshape(&[20, 1, 2, 1]).unwrap();
    ds.mean = vec![0.1307];
    ds.std = vec![0.3081];
    let mut net = build_architecture(&Architecture::Mlp(vec![8]), &[1, 2, 1], 2, 0).unwrap();
    net.init_params(3, InitMode::Kaiming);
    let folded = net.clone().with_normalization(ds.mean.clone(), ds.std.clone()).unwrap();
    let a = folded.forward(&ds.images).unwrap();
    let b = net.forward(&ds.normalized_images()).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn idx_pixels_are_scaled_into_unit_range(pixels in prop::collection::vec(any::<u8>(), 12)) {
            let dir = tempfile::tempdir().unwrap();
            let img = write(dir.path(), "i", &idx_images(3, 2, 2, &pixels));
            let lab = write(dir.path(), "l", &idx_labels(LABEL_MAGIC, &[0, 5, 9]));
            let ds = load_mnist_idx(&img, &lab).unwrap();
            for (v, &p) in ds.images.data().iter().zip(&pixels) {
                prop_assert!((0.0..=1.0).contains(v));
                prop_assert_eq!(*v, p as f64 / 255.0);
            }
        }

        #[test]
        fn folded_normalization_is_exact(seed in 0u64..10_000, mean in 0.0f64..1.0, std in 0.05f64..1.0) {
            let mut ds = synthetic_moons(10, 0.1, seed).unwrap();
            ds.images = ds.images.reshape(&[10, 1, 2, 1]).unwrap();
            ds.mean = vec![mean];
            ds.std = vec![std];
            let mut net = build_architecture(&Architecture::Mlp(vec![6]), &[1, 2, 1], 2, 0).unwrap();
            net.init_params(seed, InitMode::Kaiming);
            let folded = net.clone().with_normalization(ds.mean.clone(), ds.std.clone()).unwrap();
            let a = folded.forward(&ds.images).unwrap();
            let b = net.forward(&ds.normalized_images()).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}
