//! Shared fixtures for the integration suites: a deterministic synthetic
//! digit corpus at MNIST geometry (28x28, 10 classes) and IDX fixture
//! helpers.

use larp::data::{write_idx_images, write_idx_labels};
use larp::rng::{child_rng, unit_f64, uniform_index, Rng};
use larp::{FeatureMap, LabeledDataset};
use std::path::Path;

/// 7x7 glyph stamps for the ten classes.
const GLYPHS: [[&str; 7]; 10] = [
    [
        ".#####.", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", ".#####.",
    ],
    [
        "...#...", "..##...", "...#...", "...#...", "...#...", "...#...", "..###..",
    ],
    [
        ".#####.", "#.....#", "......#", "....##.", "..##...", ".#.....", "#######",
    ],
    [
        ".#####.", "......#", "......#", "..####.", "......#", "......#", ".#####.",
    ],
    [
        "....##.", "...#.#.", "..#..#.", ".#...#.", "#######", ".....#.", ".....#.",
    ],
    [
        "#######", "#......", "#......", "######.", "......#", "......#", "######.",
    ],
    [
        ".#####.", "#......", "#......", "######.", "#.....#", "#.....#", ".#####.",
    ],
    [
        "#######", "......#", ".....#.", "....#..", "...#...", "..#....", "..#....",
    ],
    [
        ".#####.", "#.....#", "#.....#", ".#####.", "#.....#", "#.....#", ".#####.",
    ],
    [
        ".#####.", "#.....#", "#.....#", ".######", "......#", "......#", ".#####.",
    ],
];

const SIDE: usize = 28;
const SCALE: usize = 3; // glyphs render at 21x21

fn gaussian(rng: &mut Rng) -> f64 {
    let u1 = unit_f64(rng).max(1e-12);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Renders one sample of `class`: the glyph at a random offset with
/// per-pixel intensity jitter and background noise.
pub fn synthetic_digit(class: usize, rng: &mut Rng) -> FeatureMap {
    let glyph = &GLYPHS[class];
    let stamp = 7 * SCALE;
    let max_offset = SIDE - stamp; // 7
    let oy = uniform_index(rng, max_offset + 1);
    let ox = uniform_index(rng, max_offset + 1);
    let base_intensity = 0.85 + 0.15 * unit_f64(rng);

    let mut values = vec![0.0f64; SIDE * SIDE];
    for gy in 0..7 {
        let row = glyph[gy].as_bytes();
        for gx in 0..7 {
            if row[gx] != b'#' {
                continue;
            }
            for sy in 0..SCALE {
                for sx in 0..SCALE {
                    let y = oy + gy * SCALE + sy;
                    let x = ox + gx * SCALE + sx;
                    values[y * SIDE + x] = base_intensity * (0.9 + 0.1 * unit_f64(rng));
                }
            }
        }
    }
    for v in &mut values {
        *v = (*v + 0.025 * gaussian(rng)).clamp(0.0, 1.0);
    }
    FeatureMap::new(SIDE, SIDE, values).unwrap()
}

/// A balanced corpus of `count` samples (class = index mod 10), fully
/// determined by `seed`.
pub fn synthetic_digit_corpus(count: usize, seed: u64) -> LabeledDataset {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 10;
        let mut rng = child_rng(seed, class, i);
        images.push(synthetic_digit(class, &mut rng));
        labels.push(class);
    }
    LabeledDataset::new(images, labels, None, 10).unwrap()
}

/// Writes a dataset as an IDX image/label file pair (pixels quantized to
/// bytes).
pub fn write_dataset_as_idx(
    dataset: &LabeledDataset,
    images_path: &Path,
    labels_path: &Path,
) {
    let rows = dataset.image(0).height();
    let cols = dataset.image(0).width();
    let mut pixels = Vec::with_capacity(dataset.len() * rows * cols);
    for image in dataset.images() {
        pixels.extend(image.values().iter().map(|&v| (v * 255.0).round() as u8));
    }
    write_idx_images(images_path, dataset.len(), rows, cols, &pixels).unwrap();
    let labels: Vec<u8> = dataset.labels().iter().map(|&l| l as u8).collect();
    write_idx_labels(labels_path, &labels).unwrap();
}

/// Loads real MNIST IDX files when `LARP_MNIST_DIR` points at them
/// (train-images-idx3-ubyte etc.); otherwise `None`.
pub fn mnist_if_available() -> Option<(LabeledDataset, LabeledDataset)> {
    let dir = std::env::var_os("LARP_MNIST_DIR")?;
    let dir = std::path::PathBuf::from(dir);
    let load = |images: &str, labels: &str| -> Option<LabeledDataset> {
        let images = larp::data::load_idx_images(dir.join(images)).ok()?;
        let labels = larp::data::load_idx_labels(dir.join(labels)).ok()?;
        LabeledDataset::new(images, labels, None, 10).ok()
    };
    let train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Some((train, test))
}
