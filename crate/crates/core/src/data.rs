//! Multi-view dataset container, on-disk format, preprocessing and batching.
//!
//! A dataset directory holds `manifest.json`, one `view_{m}.f32` file per
//! view (1-based, `N·D_m` little-endian `f32`, row-major) and optionally
//! `labels.i64` (`N` little-endian `i64`).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.i64";

pub fn view_file_name(view: usize) -> String {
    format!("view_{}.f32", view + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_samples: usize,
    pub view_dims: Vec<usize>,
    pub has_labels: bool,
    pub dtype: String,
}

/// `N` instances observed through `M` feature views.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<Tensor>,
    labels: Option<Vec<usize>>,
}

impl MultiViewDataset {
    /// Validates that every view is `N × D_m` with a shared `N`.
    pub fn new(views: Vec<Tensor>, labels: Option<Vec<usize>>) -> Result<Self> {
        let Some(first) = views.first() else {
            return Err(Error::data("dataset", "at least one view is required"));
        };
        let n = first.shape()[0];
        for (m, v) in views.iter().enumerate() {
            if v.rank() != 2 || v.shape()[0] != n {
                return Err(Error::data(
                    format!("view {}", m + 1),
                    format!("expected {n} rows, got shape {:?}", v.shape()),
                ));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::data(
                    "labels",
                    format!("expected {n} labels, got {}", l.len()),
                ));
            }
        }
        Ok(MultiViewDataset { views, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].shape()[0]
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.shape()[1]).collect()
    }

    pub fn view(&self, m: usize) -> &Tensor {
        &self.views[m]
    }

    pub fn views(&self) -> &[Tensor] {
        &self.views
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of distinct classes, if labelled.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    /// Rows `indices` of every view.
    pub fn batch(&self, indices: &[usize]) -> Vec<Tensor> {
        self.views.iter().map(|v| v.select_rows(indices)).collect()
    }

    /// All views concatenated column-wise, `N × ΣD_m`.
    pub fn concatenated(&self) -> Tensor {
        let n = self.n_samples();
        let width: usize = self.view_dims().iter().sum();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for v in &self.views {
                data.extend_from_slice(v.row(i));
            }
        }
        Tensor::from_parts(vec![n, width], data)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a dataset directory, validating it against its manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<MultiViewDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?).map_err(|e| {
        Error::Json {
            path: manifest_path.clone(),
            source: e,
        }
    })?;
    if manifest.dtype != "f32" {
        return Err(Error::data(
            "manifest",
            format!("unsupported dtype {:?}", manifest.dtype),
        ));
    }
    let n = manifest.n_samples;
    if n == 0 || manifest.view_dims.is_empty() || manifest.view_dims.contains(&0) {
        return Err(Error::data("manifest", "empty sample count or view width"));
    }
    let mut views = Vec::with_capacity(manifest.view_dims.len());
    for (m, &d) in manifest.view_dims.iter().enumerate() {
        let name = view_file_name(m);
        let bytes = read_file(&dir.join(&name))?;
        if bytes.len() != n * d * 4 {
            return Err(Error::data(
                name,
                format!(
                    "holds {} bytes ({} floats), manifest expects {n}x{d} = {} floats",
                    bytes.len(),
                    bytes.len() as f64 / 4.0,
                    n * d
                ),
            ));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(
                name,
                format!("non-finite value at row {} column {}", pos / d, pos % d),
            ));
        }
        views.push(Tensor::from_parts(vec![n, d], data));
    }
    let labels = if manifest.has_labels {
        let bytes = read_file(&dir.join(LABELS_FILE))?;
        if bytes.len() != n * 8 {
            return Err(Error::data(
                LABELS_FILE,
                format!("holds {} bytes, expected {}", bytes.len(), n * 8),
            ));
        }
        let mut labels = Vec::with_capacity(n);
        for c in bytes.chunks_exact(8) {
            let v = i64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            if v < 0 {
                return Err(Error::data(LABELS_FILE, format!("negative label {v}")));
            }
            labels.push(v as usize);
        }
        Some(labels)
    } else {
        None
    };
    MultiViewDataset::new(views, labels)
}

/// Writes `ds` in the directory format read by [`load_dataset`].
pub fn save_dataset(ds: &MultiViewDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        n_samples: ds.n_samples(),
        view_dims: ds.view_dims(),
        has_labels: ds.labels.is_some(),
        dtype: "f32".into(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for (m, v) in ds.views.iter().enumerate() {
        let path = dir.join(view_file_name(m));
        let bytes: Vec<u8> = v
            .data()
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(labels) = &ds.labels {
        let path = dir.join(LABELS_FILE);
        let bytes: Vec<u8> = labels
            .iter()
            .flat_map(|&l| (l as i64).to_le_bytes())
            .collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Scales every column of every view to `[0, 1]`; constant columns become 0.
pub fn min_max_normalize(ds: &MultiViewDataset) -> MultiViewDataset {
    let views = ds
        .views
        .iter()
        .map(|v| {
            let (n, d) = (v.shape()[0], v.shape()[1]);
            let mut data = v.data().to_vec();
            for c in 0..d {
                let col = (0..n).map(|r| v.data()[r * d + c]);
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                    (lo.min(x), hi.max(x))
                });
                let range = hi - lo;
                for r in 0..n {
                    let x = &mut data[r * d + c];
                    *x = if range > 0.0 { (*x - lo) / range } else { 0.0 };
                }
            }
            Tensor::from_parts(vec![n, d], data)
        })
        .collect();
    MultiViewDataset {
        views,
        labels: ds.labels.clone(),
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_clusters: usize,
    pub view_dims: Vec<usize>,
    /// Per-view standard deviation of the noise around each cluster mean.
    pub noise_sigmas: Vec<f64>,
    /// Cluster means are drawn from `N(0, mean_spread²)` per coordinate.
    pub mean_spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(
        n_samples: usize,
        n_clusters: usize,
        view_dims: Vec<usize>,
        noise_sigmas: Vec<f64>,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            n_samples,
            n_clusters,
            view_dims,
            noise_sigmas,
            mean_spread: 1.0,
            seed,
        }
    }
}

/// Draws balanced Gaussian clusters; sample `i` belongs to cluster
/// `i mod n_clusters` and every view shares that label.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    if spec.n_clusters < 2 {
        return Err(Error::Config("synthetic data needs at least 2 clusters".into()));
    }
    if spec.view_dims.is_empty() || spec.view_dims.iter().any(|&d| d < 2) {
        return Err(Error::Config("every synthetic view needs dimension >= 2".into()));
    }
    if spec.noise_sigmas.len() != spec.view_dims.len() {
        return Err(Error::Config(format!(
            "{} noise levels for {} views",
            spec.noise_sigmas.len(),
            spec.view_dims.len()
        )));
    }
    if spec.n_samples < spec.n_clusters {
        return Err(Error::Config("fewer samples than clusters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let labels: Vec<usize> = (0..spec.n_samples).map(|i| i % spec.n_clusters).collect();
    let mut views = Vec::with_capacity(spec.view_dims.len());
    for (&d, &sigma) in spec.view_dims.iter().zip(&spec.noise_sigmas) {
        let means: Vec<f64> = (0..spec.n_clusters * d)
            .map(|_| spec.mean_spread * unit.sample(&mut rng))
            .collect();
        let mut data = Vec::with_capacity(spec.n_samples * d);
        for &c in &labels {
            for j in 0..d {
                let noise = if sigma > 0.0 {
                    sigma * unit.sample(&mut rng)
                } else {
                    0.0
                };
                data.push(means[c * d + j] + noise);
            }
        }
        views.push(Tensor::from_parts(vec![spec.n_samples, d], data));
    }
    MultiViewDataset::new(views, Some(labels))
}

/// Shuffled partition of `0..N` into mini-batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub order: Vec<usize>,
}

impl BatchPlan {
    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }

    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Shuffles `0..n` with `seed` and cuts it into batches of `batch_size`;
/// the final batch keeps the remainder.
pub fn plan_batches(n: usize, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchPlan {
        seed,
        batch_size,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> MultiViewDataset {
        let v1 = Tensor::from_rows(&[vec![2.0, 1.0], vec![4.0, 1.0], vec![6.0, 1.0]]).unwrap();
        let v2 = Tensor::from_rows(&[vec![0.5], vec![-0.5], vec![0.0]]).unwrap();
        MultiViewDataset::new(vec![v1, v2], Some(vec![0, 1, 1])).unwrap()
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.n_views(), 2);
        assert_eq!(back, ds);
    }

    #[test]
    fn load_rejects_size_mismatch_naming_view() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), dir.path()).unwrap();
        let manifest = Manifest {
            n_samples: 3,
            view_dims: vec![2, 2],
            has_labels: true,
            dtype: "f32".into(),
        };
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("view_2.f32"), "{err}");
    }

    #[test]
    fn load_rejects_nan_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy();
        ds.views[0].data_mut()[3] = f64::NAN;
        save_dataset(&ds, dir.path()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("view_1.f32") && err.contains("non-finite"), "{err}");

        save_dataset(&toy(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn view_files_are_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&toy(), dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("view_1.f32")).unwrap();
        assert_eq!(bytes.len(), 3 * 2 * 4);
        assert_eq!(&bytes[..4], &2.0f32.to_le_bytes());
        let labels = fs::read(dir.path().join(LABELS_FILE)).unwrap();
        assert_eq!(&labels[8..16], &1i64.to_le_bytes());
    }

    #[test]
    fn normalize_examples() {
        let ds = min_max_normalize(&toy());
        let v = ds.view(0);
        assert_eq!((0..3).map(|r| v.data()[r * 2]).collect::<Vec<_>>(), [0.0, 0.5, 1.0]);
        assert_eq!((0..3).map(|r| v.data()[r * 2 + 1]).collect::<Vec<_>>(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn synthetic_shapes_and_noiseless_case() {
        let spec = SyntheticSpec::new(600, 3, vec![3, 3, 3], vec![0.1; 3], 7);
        let ds = make_synthetic(&spec).unwrap();
        assert_eq!(ds.n_samples(), 600);
        assert_eq!(ds.n_views(), 3);
        assert_eq!(ds.view_dims(), vec![3, 3, 3]);
        assert_eq!(ds.n_classes(), Some(3));

        let spec = SyntheticSpec::new(30, 3, vec![2, 4], vec![0.0, 0.0], 1);
        let ds = make_synthetic(&spec).unwrap();
        let labels = ds.labels().unwrap();
        for m in 0..2 {
            for i in 0..30 {
                for j in 0..30 {
                    if labels[i] == labels[j] {
                        assert_eq!(ds.view(m).row(i), ds.view(m).row(j));
                    }
                }
            }
        }
        assert_eq!(make_synthetic(&spec).unwrap(), ds);
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        assert!(make_synthetic(&SyntheticSpec::new(10, 1, vec![3], vec![0.1], 0)).is_err());
        assert!(make_synthetic(&SyntheticSpec::new(10, 2, vec![1], vec![0.1], 0)).is_err());
    }

    #[test]
    fn batch_plan_examples() {
        let plan = plan_batches(5, 2, 3).unwrap();
        let sizes: Vec<usize> = plan.batches().map(<[usize]>::len).collect();
        assert_eq!(sizes, [2, 2, 1]);
        assert_eq!(plan.len(), 3);
        assert_eq!(plan_batches(5, 2, 3).unwrap(), plan);
        assert!(plan_batches(5, 1, 3).is_err());
    }
}
