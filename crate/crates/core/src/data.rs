//! Desk-scale datasets: seeded Gaussian-blob images or a CSV file.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    /// One image per row: `label, p_0, …, p_{side²-1}`. A header row is
    /// skipped when its first field is not an integer.
    Csv {
        path: PathBuf,
        num_classes: usize,
        image_side: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(s) => generate_synthetic(s),
            DatasetSpec::Csv {
                path,
                num_classes,
                image_side,
                seed,
            } => load_csv(path, *num_classes, *image_side, *seed),
        }
    }
}

/// Images stored row-major as `f64` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let px = self.pixels.len() / self.labels.len().max(1);
        &self.pixels[i * px..(i + 1) * px]
    }

    /// Batches over `order` (all indices in order when `None`).
    pub fn batches<T: Scalar>(&self, batch_size: usize, order: Option<&[usize]>) -> Vec<Batch<T>> {
        let all: Vec<usize>;
        let order = match order {
            Some(o) => o,
            None => {
                all = (0..self.len()).collect();
                &all
            }
        };
        order
            .chunks(batch_size.max(1))
            .map(|idx| Batch {
                images: idx
                    .iter()
                    .flat_map(|&i| self.image(i).iter().map(|&p| T::of(p)))
                    .collect(),
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub images: Vec<T>,
    pub labels: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_side: usize,
    pub num_classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Per-class split sizes: 80% train, 10% validation, the rest test.
fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

/// Stratified 80/10/10 split; each split is shuffled with `rng`.
fn stratify(
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
    image_side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for idx in &mut by_class {
        idx.shuffle(rng);
        let (tr, va, _) = split_sizes(idx.len());
        parts[0].extend_from_slice(&idx[..tr]);
        parts[1].extend_from_slice(&idx[tr..tr + va]);
        parts[2].extend_from_slice(&idx[tr + va..]);
    }
    let mut build = |mut idx: Vec<usize>| {
        idx.shuffle(rng);
        Split {
            pixels: idx.iter().flat_map(|&i| images[i].iter().copied()).collect(),
            labels: idx.iter().map(|&i| labels[i]).collect(),
        }
    };
    let [tr, va, te] = parts;
    let ds = Dataset {
        image_side,
        num_classes,
        train: build(tr),
        val: build(va),
        test: build(te),
    };
    if ds.train.is_empty() {
        return Err(Error::EmptyDataset("training split has no samples".into()));
    }
    Ok(ds)
}

/// Class prototypes are Gaussian blobs at distinct grid positions; each
/// sample adds i.i.d. pixel noise and clamps to `[0, 1]`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.samples_per_class == 0 || spec.image_side == 0 {
        return Err(Error::EmptyDataset(
            "synthetic dataset needs classes, samples and a positive side".into(),
        ));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_std {} must be >= 0", spec.noise_std)));
    }
    let side = spec.image_side;
    if spec.num_classes > side * side {
        return Err(Error::InvalidArgument(format!(
            "{} classes do not fit distinct centers in a {side}x{side} image",
            spec.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(&mut rng);
    let width = (side as f64 / 4.0).max(0.75);
    let prototypes: Vec<Vec<f64>> = cells[..spec.num_classes]
        .iter()
        .map(|&cell| {
            let (cy, cx) = ((cell / side) as f64, (cell % side) as f64);
            (0..side * side)
                .map(|p| {
                    let (y, x) = ((p / side) as f64, (p % side) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    (-d2 / (2.0 * width * width)).exp()
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (c, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let img = proto
                .iter()
                .map(|&v| {
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (v + n).clamp(0.0, 1.0)
                })
                .collect();
            images.push(img);
            labels.push(c);
        }
    }
    stratify(images, labels, spec.num_classes, side, &mut rng)
}

pub fn load_csv(path: &Path, num_classes: usize, image_side: usize, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let pixels = image_side * image_side;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let Ok(label) = rec.get(0).unwrap_or("").parse::<usize>() else {
            if row == 0 {
                continue;
            }
            return Err(Error::InvalidArgument(format!("row {row}: bad label")));
        };
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "row {row}: label {label} >= {num_classes} classes"
            )));
        }
        if rec.len() != pixels + 1 {
            return Err(Error::Shape(format!(
                "row {row}: expected {} pixel values, found {}",
                pixels,
                rec.len() - 1
            )));
        }
        let img = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("row {row}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        images.push(img);
        labels.push(label);
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no rows", path.display())));
    }
    let max = images.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = images.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() || min < 0.0 || max > 255.0 {
        return Err(Error::InvalidArgument(format!(
            "pixel values must lie in [0, 1] or [0, 255], found [{min}, {max}]"
        )));
    }
    if max > 1.0 {
        images.iter_mut().flatten().for_each(|p| *p /= 255.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stratify(images, labels, num_classes, image_side, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            samples_per_class: 100,
            image_side: 8,
            noise_std: noise,
            seed: 11,
        }
    }

    #[test]
    fn split_sizes_are_80_10_10() {
        let ds = generate_synthetic(&spec(0.1)).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (240, 30, 30));
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate_synthetic(&spec(0.3)).unwrap(), generate_synthetic(&spec(0.3)).unwrap());
        assert_ne!(
            generate_synthetic(&spec(0.3)).unwrap(),
            generate_synthetic(&SyntheticSpec { seed: 12, ..spec(0.3) }).unwrap()
        );
    }

    #[test]
    fn pixels_are_normalized() {
        let ds = generate_synthetic(&spec(2.0)).unwrap();
        assert!(ds.train.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(ds.train.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let ds = generate_synthetic(&spec(0.0)).unwrap();
        for c in 0..3 {
            let imgs: Vec<&[f64]> = (0..ds.train.len())
                .filter(|&i| ds.train.labels[i] == c)
                .map(|i| ds.train.image(i))
                .collect();
            assert!(imgs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "label,p0,p1,p2,p3").unwrap();
        for i in 0..20 {
            writeln!(f, "{},{},0,255,{}", i % 2, i * 10, 100).unwrap();
        }
        let ds = load_csv(f.path(), 2, 2, 0).unwrap();
        assert_eq!(ds.train.len() + ds.val.len() + ds.test.len(), 20);
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (16, 2, 2));
        assert!(ds.train.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "0,0.1,0.2").unwrap();
        assert!(load_csv(f.path(), 2, 2, 0).is_err());
        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "5,0.1,0.2,0.3,0.4").unwrap();
        assert!(load_csv(g.path(), 2, 2, 0).is_err());
    }
}
