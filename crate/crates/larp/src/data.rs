//! Dataset ingestion: the IDX binary image/label format, a labeled
//! image-directory loader for binary PGM files, and deterministic
//! stratified splits and subsamples.
//!
//! All loaders scale pixels into `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::map::FeatureMap;
use crate::rng::{shuffle, split_rng, subsample_rng};

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Images, labels, and optional class names.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    images: Vec<FeatureMap>,
    labels: Vec<usize>,
    class_names: Option<Vec<String>>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<FeatureMap>,
        labels: Vec<usize>,
        class_names: Option<Vec<String>>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::Input(format!(
                    "{} class names for {num_classes} classes",
                    names.len()
                )));
            }
        }
        if let Some(first) = images.first() {
            if images.iter().any(|img| !img.same_shape(first)) {
                return Err(Error::Format(
                    "images have mixed dimensions".to_string(),
                ));
            }
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names,
            num_classes,
        })
    }

    /// Assembles a dataset, inferring the class count from the labels.
    pub fn from_parts(images: Vec<FeatureMap>, labels: Vec<usize>) -> Result<Self> {
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        LabeledDataset::new(images, labels, None, num_classes)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &FeatureMap {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn images(&self) -> &[FeatureMap] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            num_classes: self.num_classes,
        }
    }

    fn per_class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &label) in self.labels.iter().enumerate() {
            by_class[label].push(i);
        }
        by_class
    }
}

struct BigEndianReader<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'a str,
}

impl<'a> BigEndianReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.at + 4 > self.bytes.len() {
            return Err(Error::Format(format!("{}: truncated header", self.what)));
        }
        let v = u32::from_be_bytes(self.bytes[self.at..self.at + 4].try_into().unwrap());
        self.at += 4;
        Ok(v)
    }

    fn body(&self, expected_len: usize) -> Result<&'a [u8]> {
        let body = &self.bytes[self.at..];
        if body.len() < expected_len {
            return Err(Error::Format(format!(
                "{}: truncated, expected {} data bytes, found {}",
                self.what,
                expected_len,
                body.len()
            )));
        }
        if body.len() > expected_len {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after data",
                self.what,
                body.len() - expected_len
            )));
        }
        Ok(body)
    }
}

/// Reads a big-endian IDX image file (magic 0x00000803); pixels map to
/// `byte / 255`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let what = path.display().to_string();
    let mut reader = BigEndianReader {
        bytes: &bytes,
        at: 0,
        what: &what,
    };
    let magic = reader.u32()?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{what}: bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = reader.u32()? as usize;
    let rows = reader.u32()? as usize;
    let cols = reader.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("{what}: zero image dimensions")));
    }
    let body = reader.body(count * rows * cols)?;
    let mut images = Vec::with_capacity(count);
    for chunk in body.chunks_exact(rows * cols) {
        let values = chunk.iter().map(|&b| f64::from(b) / 255.0).collect();
        images.push(FeatureMap::new(rows, cols, values)?);
    }
    Ok(images)
}

/// Reads a big-endian IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let what = path.display().to_string();
    let mut reader = BigEndianReader {
        bytes: &bytes,
        at: 0,
        what: &what,
    };
    let magic = reader.u32()?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{what}: bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let count = reader.u32()? as usize;
    let body = reader.body(count)?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Writes raw image bytes as an IDX image file; the fixture-side inverse of
/// `load_idx_images`.
pub fn write_idx_images(
    path: impl AsRef<Path>,
    count: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
) -> Result<()> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Input(format!(
            "expected {} pixel bytes, got {}",
            count * rows * cols,
            pixels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes labels as an IDX label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_pgm(bytes: &[u8], what: &str) -> Result<FeatureMap> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format(format!("{what}: not a binary PGM (P5) file")));
    }
    // header tokens: width, height, maxval; '#' comments run to end of line
    let mut at = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while at < bytes.len() {
            match bytes[at] {
                b' ' | b'\t' | b'\r' | b'\n' => at += 1,
                b'#' => {
                    while at < bytes.len() && bytes[at] != b'\n' {
                        at += 1;
                    }
                }
                _ => break,
            }
        }
        let start = at;
        while at < bytes.len() && bytes[at].is_ascii_digit() {
            at += 1;
        }
        if start == at {
            return Err(Error::Format(format!("{what}: malformed PGM header")));
        }
        *field = std::str::from_utf8(&bytes[start..at])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format(format!("{what}: malformed PGM header")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("{what}: zero PGM dimensions")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "{what}: unsupported PGM maxval {maxval} (single-byte samples only)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if at >= bytes.len() || !bytes[at].is_ascii_whitespace() {
        return Err(Error::Format(format!("{what}: malformed PGM header")));
    }
    at += 1;
    let raster = &bytes[at..];
    if raster.len() != width * height {
        return Err(Error::Format(format!(
            "{what}: PGM raster has {} bytes, expected {}",
            raster.len(),
            width * height
        )));
    }
    if let Some(&bad) = raster.iter().find(|&&b| b as usize > maxval) {
        return Err(Error::Format(format!(
            "{what}: PGM sample {bad} exceeds maxval {maxval}"
        )));
    }
    let scale = maxval as f64;
    let values = raster.iter().map(|&b| f64::from(b) / scale).collect();
    FeatureMap::new(height, width, values)
}

/// Loads a directory with one subdirectory per class, each holding binary
/// PGM images of one uniform size. Class index follows sorted subdirectory
/// order.
pub fn load_image_dir(root: impl AsRef<Path>, extension: &str) -> Result<LabeledDataset> {
    let root = root.as_ref();
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|entry| entry.path().is_dir())
        .map(|entry| entry.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no class subdirectories",
            root.display()
        )));
    }

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|entry| entry.path())
            .filter(|path| {
                path.is_file()
                    && path
                        .extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case(extension))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "{}: no .{extension} images",
                dir.display()
            )));
        }
        for file in files {
            let bytes = fs::read(&file)?;
            let map = parse_pgm(&bytes, &file.display().to_string())?;
            if let Some(first) = images.first() {
                if !map.same_shape(first) {
                    return Err(Error::Format(format!(
                        "{}: image dimensions {}x{} differ from {}x{}",
                        file.display(),
                        map.height(),
                        map.width(),
                        first.height(),
                        first.width()
                    )));
                }
            }
            images.push(map);
            labels.push(class);
        }
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    let num_classes = class_names.len();
    LabeledDataset::new(images, labels, Some(class_names), num_classes)
}

/// Seeded, stratified train/test split. `fraction` is the train share; each
/// class is shuffled and split at the same fraction with the remainder
/// going to train.
pub fn deterministic_split(
    dataset: &LabeledDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Input(format!(
            "split fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Input("cannot split an empty dataset".to_string()));
    }
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for (class, mut indices) in dataset.per_class_indices().into_iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        if indices.len() < 2 {
            return Err(Error::Input(format!(
                "class {class} has fewer than 2 samples; cannot stratify"
            )));
        }
        shuffle(&mut split_rng(seed, class), &mut indices);
        let take = (indices.len() as f64 * fraction).ceil() as usize;
        let take = take.min(indices.len());
        train_indices.extend_from_slice(&indices[..take]);
        test_indices.extend_from_slice(&indices[take..]);
    }
    Ok((dataset.select(&train_indices), dataset.select(&test_indices)))
}

/// Seeded stratified subsample of `count` items, allocated to classes
/// proportionally (largest remainders first, ties to the lower class).
pub fn stratified_subsample(
    dataset: &LabeledDataset,
    count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if count == 0 || count > dataset.len() {
        return Err(Error::Input(format!(
            "subsample size {count} out of range for {} samples",
            dataset.len()
        )));
    }
    let by_class = dataset.per_class_indices();
    let total = dataset.len() as f64;
    let mut take: Vec<usize> = Vec::with_capacity(by_class.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(by_class.len());
    let mut allocated = 0;
    for (class, indices) in by_class.iter().enumerate() {
        let ideal = count as f64 * indices.len() as f64 / total;
        let base = (ideal.floor() as usize).min(indices.len());
        take.push(base);
        allocated += base;
        remainders.push((class, ideal - base as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut leftover = count - allocated;
    for &(class, _) in remainders.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if take[class] < by_class[class].len() {
            take[class] += 1;
            leftover -= 1;
        }
    }

    let mut chosen = Vec::with_capacity(count);
    for (class, mut indices) in by_class.into_iter().enumerate() {
        shuffle(&mut subsample_rng(seed, class), &mut indices);
        chosen.extend_from_slice(&indices[..take[class]]);
    }
    Ok(dataset.select(&chosen))
}
