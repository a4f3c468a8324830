//! In-memory labelled datasets, the synthetic Gaussian-mixture generator and
//! CSV ingestion.
//!
//! CSV layout: a header `f0,f1,...,f{d-1},label`, then one row per sample with
//! `d` real features followed by a non-negative integer label.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::input("dataset must hold at least one sample"));
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::input(format!(
                "label {} of sample {i} is outside [0, {num_classes})",
                labels[i]
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("dataset features must be finite"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows selected by `indices`, in that order, keeping `num_classes`.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::input(format!(
                "index {i} out of range for {} samples",
                self.len()
            )));
        }
        Dataset::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Batch view of the given rows. Indices must be in range.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.features.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.labels.clone()).expect("dataset is a valid batch")
    }

    /// Per-class counts over `indices`.
    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }

    /// Indices of each class, in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Parameters of the synthetic Gaussian-mixture task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_center_scale: f64,
    pub noise_sigma: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::config(
                "num_classes, dim and samples_per_class must all be positive",
            ));
        }
        if !(self.class_center_scale > 0.0 && self.class_center_scale.is_finite()) {
            return Err(Error::config(format!(
                "class_center_scale must be positive, got {}",
                self.class_center_scale
            )));
        }
        // zero noise is allowed: every sample then sits on its class center
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Class centers drawn uniformly from `[-scale, scale]^d`.
pub fn draw_centers<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Array2<f64>> {
    spec.validate()?;
    let scale = spec.class_center_scale;
    Ok(Array2::from_shape_simple_fn((spec.num_classes, spec.dim), || {
        rng.random_range(-scale..=scale)
    }))
}

/// `per_class` samples around each center, class-major order.
pub fn sample_around<R: Rng + ?Sized>(
    centers: ArrayView2<'_, f64>,
    per_class: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Dataset> {
    let (classes, dim) = centers.dim();
    let mut features = Array2::zeros((classes * per_class, dim));
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, center) in centers.outer_iter().enumerate() {
        for i in 0..per_class {
            let mut row = features.row_mut(class * per_class + i);
            for (v, &c) in row.iter_mut().zip(center) {
                let z: f64 = rng.sample(StandardNormal);
                *v = c + noise_sigma * z;
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, classes)
}

pub fn gen_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    let centers = draw_centers(spec, rng)?;
    sample_around(centers.view(), spec.samples_per_class, spec.noise_sigma, rng)
}

/// Training set plus a held-out test set drawn around the same centers.
pub fn gen_synthetic_with_holdout<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    test_per_class: usize,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if test_per_class == 0 {
        return Err(Error::config("test_per_class must be positive"));
    }
    let centers = draw_centers(spec, rng)?;
    let train = sample_around(centers.view(), spec.samples_per_class, spec.noise_sigma, rng)?;
    let test = sample_around(centers.view(), test_per_class, spec.noise_sigma, rng)?;
    Ok((train, test))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a dataset; `num_classes` is the largest label plus one.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut records = reader.records();

    let header = match records.next() {
        None => return Err(Error::input(format!("{} is empty", path.display()))),
        Some(r) => r.map_err(|e| parse_err(path, 1, e.to_string()))?,
    };
    let width = header.len();
    if width < 2 {
        return Err(parse_err(
            path,
            1,
            "header needs at least one feature column and a label",
        ));
    }
    for (j, name) in header.iter().enumerate() {
        let expected = if j + 1 == width {
            "label".to_string()
        } else {
            format!("f{j}")
        };
        if name != expected {
            return Err(parse_err(
                path,
                1,
                format!("header column {j} is `{name}`, expected `{expected}`"),
            ));
        }
    }
    let dim = width - 1;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(parse_err(
                path,
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        for (j, field) in record.iter().take(dim).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("feature f{j} `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("feature f{j} is not finite")));
            }
            values.push(v);
        }
        let raw = &record[dim];
        let label: usize = raw
            .parse()
            .map_err(|_| parse_err(path, line, format!("label `{raw}` is not a non-negative integer")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::input(format!(
            "{} has a header but no samples",
            path.display()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let features = Array2::from_shape_vec((labels.len(), dim), values).expect("row widths were checked");
    Dataset::new(features, labels, classes)
}

/// Writes the CSV layout read by [`load_csv`]. Reals use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    writeln!(out, "{},label", header.join(",")).map_err(io)?;
    for (row, &y) in dataset.features.outer_iter().zip(&dataset.labels) {
        for v in row {
            write!(out, "{v:?},").map_err(io)?;
        }
        writeln!(out, "{y}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::fs;

    fn spec(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            dim: 3,
            samples_per_class: 5,
            class_center_scale: 2.0,
            noise_sigma: sigma,
        }
    }

    #[test]
    fn zero_noise_collapses_onto_centers() {
        let s = spec(0.0);
        let centers = draw_centers(&s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let data = gen_synthetic(&s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (row, &y) in data.features().outer_iter().zip(data.labels()) {
            assert_eq!(row, centers.row(y));
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = gen_synthetic(&spec(0.5), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = gen_synthetic(&spec(0.5), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let c = gen_synthetic(&spec(0.5), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 20);
        assert_eq!(a.label_histogram(&(0..20).collect::<Vec<_>>()), vec![5; 4]);
    }

    #[test]
    fn load_two_row_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "f0,f1,label\n0.0,1.0,0\n1.0,0.0,1").unwrap();
        let d = load_csv(&path).unwrap();
        assert_eq!((d.len(), d.dim(), d.num_classes()), (2, 2, 2));
        assert_eq!(d.labels(), &[0, 1]);
    }

    #[test]
    fn malformed_feature_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "f0,f1,label\n0.0,abc,0\n").unwrap();
        match load_csv(&path).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("f1"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
        fs::write(&path, "f0,label\n1.0,0\n2.0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 3, .. })));
        fs::write(&path, "f0,label\n1.0,-1\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "x,label\n1.0,0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Input(_))));
        fs::write(&path, "f0,label\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Input(_))));
        assert!(matches!(
            load_csv(dir.path().join("missing.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let data = gen_synthetic(&spec(0.7), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&data, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.labels(), data.labels());
        assert_eq!(back.num_classes(), data.num_classes());
        for (a, b) in back.features().iter().zip(data.features().iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(Dataset::new(Array2::zeros((2, 1)), vec![0, 2], 2).is_err());
        assert!(Dataset::new(Array2::zeros((0, 1)), vec![], 2).is_err());
    }
}
