//! Dataset construction, IDX ingestion, labeled/unlabeled splitting, and
//! the weak/strong augmentation pipeline.
//!
//! Datasets are immutable after construction. Splitting strips the
//! unlabeled pool's ground truth into an [`EvalLabels`] side table so
//! training code, which only ever sees [`Dataset`], cannot reach it; only
//! an explicit call to [`EvalLabels::for_evaluation_only`] hands the labels
//! back for accuracy reporting.
//!
//! Augmentation is a pure function of (kind, inputs, strength, seed): row i
//! draws from its own seeded stream, so a sample's views do not depend on
//! the rows around it.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use crate::error::{Error, Result};
use crate::particles::ViewSampler;

/// Input geometry tag; augmentation pipelines are chosen by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Rows are 2-D points.
    Synthetic2d,
    /// Rows are 28×28 grayscale images flattened row-major to 784 values
    /// in [0, 1].
    Image28x28,
}

impl DatasetKind {
    pub fn feature_count(self) -> usize {
        match self {
            DatasetKind::Synthetic2d => 2,
            DatasetKind::Image28x28 => 784,
        }
    }
}

/// An immutable sample matrix with optional labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Option<Vec<usize>>,
    class_count: usize,
    kind: DatasetKind,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        labels: Option<Vec<usize>>,
        class_count: usize,
        kind: DatasetKind,
    ) -> Result<Self> {
        if class_count < 1 {
            return Err(Error::Usage("a dataset needs at least one class".into()));
        }
        if inputs.ncols() != kind.feature_count() {
            return Err(Error::Usage(format!(
                "{} features per row expected for this dataset kind, got {}",
                kind.feature_count(),
                inputs.ncols()
            )));
        }
        if let Some(ref ys) = labels {
            if ys.len() != inputs.nrows() {
                return Err(Error::Usage(format!(
                    "{} labels for {} rows",
                    ys.len(),
                    inputs.nrows()
                )));
            }
            if let Some(&bad) = ys.iter().find(|&&y| y >= class_count) {
                return Err(Error::Usage(format!(
                    "label {bad} out of range for {class_count} classes"
                )));
            }
        }
        Ok(Self { inputs, labels, class_count, kind })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How many labeled samples to keep per class, and the shuffle seed.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub per_class: usize,
    pub seed: u64,
}

/// Ground truth for an unlabeled pool, quarantined behind an explicitly
/// named accessor so no training path picks it up by accident.
#[derive(Debug, Clone)]
pub struct EvalLabels {
    labels: Vec<usize>,
}

impl EvalLabels {
    /// The unlabeled pool's true labels, row-aligned with it. For accuracy
    /// reporting only.
    pub fn for_evaluation_only(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A labeled/unlabeled partition of one dataset.
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub labeled: Dataset,
    /// The remainder with labels stripped.
    pub unlabeled: Dataset,
    /// The stripped labels, row-aligned with `unlabeled`.
    pub eval: EvalLabels,
    /// Original row indices of `labeled`, ascending.
    pub labeled_indices: Vec<usize>,
    /// Original row indices of `unlabeled`, ascending.
    pub unlabeled_indices: Vec<usize>,
}

/// Two interleaved unit half-circles with additive Gaussian noise: class 0
/// on the upper half of the circle centered at (0, 0), class 1 on the
/// lower half of the circle centered at (1, 0.5). An odd count puts the
/// extra point in class 0.
pub fn two_moons(n_samples: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n_samples < 4 {
        return Err(Error::Usage(format!("{n_samples} samples cannot form two moons")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Usage(format!("noise sigma {noise_sigma} must be non-negative")));
    }
    let n0 = n_samples - n_samples / 2;
    let n1 = n_samples / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::Usage(format!("noise sigma: {e}")))?;
    let mut inputs = Array2::zeros((n_samples, 2));
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n0 {
        let t = std::f64::consts::PI * i as f64 / (n0 - 1) as f64;
        inputs[[i, 0]] = t.cos() + noise.sample(&mut rng);
        inputs[[i, 1]] = t.sin() + noise.sample(&mut rng);
        labels.push(0);
    }
    for i in 0..n1 {
        let t = std::f64::consts::PI * i as f64 / (n1 - 1) as f64;
        inputs[[n0 + i, 0]] = 1.0 - t.cos() + noise.sample(&mut rng);
        inputs[[n0 + i, 1]] = 0.5 - t.sin() + noise.sample(&mut rng);
        labels.push(1);
    }
    Dataset::new(inputs, Some(labels), 2, DatasetKind::Synthetic2d)
}

/// Isotropic Gaussian clusters, one class per center, `n_per_class` samples
/// each, in center order.
pub fn gaussian_blobs(
    centers: &[[f64; 2]],
    sigma: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if centers.is_empty() {
        return Err(Error::Usage("at least one center required".into()));
    }
    if n_per_class < 1 {
        return Err(Error::Usage("at least one sample per class required".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Usage(format!("sigma {sigma} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise =
        Normal::new(0.0, sigma).map_err(|e| Error::Usage(format!("sigma: {e}")))?;
    let rows = centers.len() * n_per_class;
    let mut inputs = Array2::zeros((rows, 2));
    let mut labels = Vec::with_capacity(rows);
    for (c, center) in centers.iter().enumerate() {
        for i in 0..n_per_class {
            let r = c * n_per_class + i;
            inputs[[r, 0]] = center[0] + noise.sample(&mut rng);
            inputs[[r, 1]] = center[1] + noise.sample(&mut rng);
            labels.push(c);
        }
    }
    Dataset::new(inputs, Some(labels), centers.len(), DatasetKind::Synthetic2d)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parses the classic IDX pair: big-endian magic 0x803 with count/rows/cols
/// headers for images, 0x801 with a count header for labels. Pixels are
/// scaled from bytes to [0, 1]; images must be 28×28.
pub fn mnist_load(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;

    let magic = read_u32_be(&images, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(&images, 4, "image count")? as usize;
    let rows = read_u32_be(&images, 8, "image rows")? as usize;
    let cols = read_u32_be(&images, 12, "image cols")? as usize;
    if rows != 28 || cols != 28 {
        return Err(Error::Format {
            offset: 8,
            message: format!("{rows}×{cols} images, expected 28×28"),
        });
    }
    let pixel_bytes = count * 784;
    if images.len() < 16 + pixel_bytes {
        return Err(Error::Format {
            offset: images.len() as u64,
            message: format!("truncated pixels: {count} images need {} bytes", 16 + pixel_bytes),
        });
    }

    let magic = read_u32_be(&labels, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = read_u32_be(&labels, 4, "label count")? as usize;
    if label_count != count {
        return Err(Error::Format {
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    if labels.len() < 8 + count {
        return Err(Error::Format {
            offset: labels.len() as u64,
            message: format!("truncated labels: {count} labels need {} bytes", 8 + count),
        });
    }

    let mut inputs = Array2::zeros((count, 784));
    for i in 0..count {
        for j in 0..784 {
            inputs[[i, j]] = images[16 + i * 784 + j] as f64 / 255.0;
        }
    }
    let mut ys = Vec::with_capacity(count);
    for i in 0..count {
        let y = labels[8 + i] as usize;
        if y > 9 {
            return Err(Error::Format {
                offset: (8 + i) as u64,
                message: format!("label byte {y} exceeds 9"),
            });
        }
        ys.push(y);
    }
    Dataset::new(inputs, Some(ys), 10, DatasetKind::Image28x28)
}

/// Keeps only the listed classes and relabels them 0..len−1 in list order;
/// sample order is preserved.
pub fn select_classes(dataset: &Dataset, class_list: &[usize]) -> Result<Dataset> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Usage("class selection needs labels".into()))?;
    if class_list.is_empty() {
        return Err(Error::Usage("class list is empty".into()));
    }
    let mut relabel = vec![None; dataset.class_count()];
    for (new, &old) in class_list.iter().enumerate() {
        if old >= dataset.class_count() {
            return Err(Error::Usage(format!(
                "class {old} does not exist in a {}-class dataset",
                dataset.class_count()
            )));
        }
        if relabel[old].is_some() {
            return Err(Error::Usage(format!("class {old} listed twice")));
        }
        relabel[old] = Some(new);
    }
    let keep: Vec<usize> =
        (0..dataset.len()).filter(|&i| relabel[labels[i]].is_some()).collect();
    let mut inputs = Array2::zeros((keep.len(), dataset.inputs.ncols()));
    let mut new_labels = Vec::with_capacity(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        inputs.row_mut(r).assign(&dataset.inputs.row(i));
        new_labels.push(relabel[labels[i]].unwrap());
    }
    Dataset::new(inputs, Some(new_labels), class_list.len(), dataset.kind)
}

/// Draws exactly `per_class` labeled samples per class by seeded shuffle;
/// the rest become the unlabeled pool, ground truth quarantined in
/// [`EvalLabels`]. Both halves keep the original row order.
pub fn split_labeled(dataset: &Dataset, spec: &SplitSpec) -> Result<LabeledSplit> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Usage("splitting needs labels".into()))?;
    if spec.per_class < 1 {
        return Err(Error::Usage("at least one labeled sample per class required".into()));
    }
    let mut by_class = vec![Vec::new(); dataset.class_count()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some((c, pool)) =
        by_class.iter().enumerate().find(|(_, pool)| pool.len() < spec.per_class)
    {
        return Err(Error::Usage(format!(
            "class {c} has {} samples, fewer than per_class {}",
            pool.len(),
            spec.per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labeled_indices = Vec::with_capacity(spec.per_class * dataset.class_count());
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
        labeled_indices.extend_from_slice(&pool[..spec.per_class]);
    }
    labeled_indices.sort_unstable();
    let chosen: std::collections::HashSet<usize> = labeled_indices.iter().copied().collect();
    let unlabeled_indices: Vec<usize> =
        (0..dataset.len()).filter(|i| !chosen.contains(i)).collect();

    let gather = |idx: &[usize]| {
        let mut inputs = Array2::zeros((idx.len(), dataset.inputs.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            inputs.row_mut(r).assign(&dataset.inputs.row(i));
        }
        inputs
    };
    let labeled = Dataset::new(
        gather(&labeled_indices),
        Some(labeled_indices.iter().map(|&i| labels[i]).collect()),
        dataset.class_count(),
        dataset.kind,
    )?;
    let unlabeled = Dataset::new(
        gather(&unlabeled_indices),
        None,
        dataset.class_count(),
        dataset.kind,
    )?;
    let eval = EvalLabels {
        labels: unlabeled_indices.iter().map(|&i| labels[i]).collect(),
    };
    Ok(LabeledSplit { labeled, unlabeled, eval, labeled_indices, unlabeled_indices })
}

/// Augmentation intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentStrength {
    Weak,
    Strong,
}

/// Applies one random augmentation to every row. Row i draws from stream i
/// of the seeded generator, in a fixed order per kind and strength:
///
/// - 2-D weak: Gaussian jitter σ = 0.02 on both coordinates.
/// - 2-D strong: jitter σ = 0.15 on both coordinates, then each coordinate
///   independently dropped to 0 with probability 0.15.
/// - image weak: integer pixel shift, both axes drawn from [−2, +2],
///   vacated pixels 0.
/// - image strong: shift from [−4, +4], then per-pixel jitter σ = 0.05
///   clamped to [0, 1], then a 6×6 patch at a uniform in-bounds corner
///   erased to 0.
pub fn augment(
    kind: DatasetKind,
    inputs: ArrayView2<'_, f64>,
    strength: AugmentStrength,
    seed: u64,
) -> Result<Array2<f64>> {
    if inputs.ncols() != kind.feature_count() {
        return Err(Error::Usage(format!(
            "{} features per row expected for this dataset kind, got {}",
            kind.feature_count(),
            inputs.ncols()
        )));
    }
    let mut out = inputs.to_owned();
    for i in 0..inputs.nrows() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        match (kind, strength) {
            (DatasetKind::Synthetic2d, AugmentStrength::Weak) => {
                let jitter = Normal::new(0.0, 0.02).unwrap();
                out[[i, 0]] += jitter.sample(&mut rng);
                out[[i, 1]] += jitter.sample(&mut rng);
            }
            (DatasetKind::Synthetic2d, AugmentStrength::Strong) => {
                let jitter = Normal::new(0.0, 0.15).unwrap();
                out[[i, 0]] += jitter.sample(&mut rng);
                out[[i, 1]] += jitter.sample(&mut rng);
                for j in 0..2 {
                    if rng.gen::<f64>() < 0.15 {
                        out[[i, j]] = 0.0;
                    }
                }
            }
            (DatasetKind::Image28x28, AugmentStrength::Weak) => {
                let dy = rng.gen_range(-2i64..=2);
                let dx = rng.gen_range(-2i64..=2);
                shift_image(&mut out, i, inputs, dy, dx);
            }
            (DatasetKind::Image28x28, AugmentStrength::Strong) => {
                let dy = rng.gen_range(-4i64..=4);
                let dx = rng.gen_range(-4i64..=4);
                shift_image(&mut out, i, inputs, dy, dx);
                let jitter = Normal::new(0.0, 0.05).unwrap();
                for j in 0..784 {
                    out[[i, j]] = (out[[i, j]] + jitter.sample(&mut rng)).clamp(0.0, 1.0);
                }
                let r0 = rng.gen_range(0usize..=22);
                let c0 = rng.gen_range(0usize..=22);
                for r in r0..r0 + 6 {
                    for c in c0..c0 + 6 {
                        out[[i, r * 28 + c]] = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn shift_image(out: &mut Array2<f64>, row: usize, inputs: ArrayView2<'_, f64>, dy: i64, dx: i64) {
    for r in 0..28i64 {
        for c in 0..28i64 {
            let (sr, sc) = (r - dy, c - dx);
            out[[row, (r * 28 + c) as usize]] = if (0..28).contains(&sr) && (0..28).contains(&sc)
            {
                inputs[[row, (sr * 28 + sc) as usize]]
            } else {
                0.0
            };
        }
    }
}

/// [`ViewSampler`] drawing one weak and one strong augmentation per batch,
/// each under a fresh seed from the training stream. The batch width must
/// match the kind.
pub struct AugmentViews {
    pub kind: DatasetKind,
}

impl ViewSampler for AugmentViews {
    fn views(
        &self,
        batch: ArrayView2<'_, f64>,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<f64>, Array2<f64>) {
        let weak = augment(self.kind, batch, AugmentStrength::Weak, rng.gen())
            .expect("batch width matches the sampler kind");
        let strong = augment(self.kind, batch, AugmentStrength::Strong, rng.gen())
            .expect("batch width matches the sampler kind");
        (weak, strong)
    }
}

/// Writes the dataset as CSV: feature columns `x0..`, then `label` when
/// labels are present. Features use full round-trip precision.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut text = String::new();
    let d = dataset.inputs.ncols();
    for j in 0..d {
        if j > 0 {
            text.push(',');
        }
        let _ = write!(text, "x{j}");
    }
    if dataset.labels.is_some() {
        text.push_str(",label");
    }
    text.push('\n');
    for i in 0..dataset.len() {
        for j in 0..d {
            if j > 0 {
                text.push(',');
            }
            let _ = write!(text, "{:.16e}", dataset.inputs[[i, j]]);
        }
        if let Some(ref ys) = dataset.labels {
            let _ = write!(text, ",{}", ys[i]);
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_moons_noiseless_points_lie_on_unit_half_circles() {
        let ds = two_moons(40, 0.0, 3).unwrap();
        let labels = ds.labels().unwrap();
        for i in 0..ds.len() {
            let (x, y) = (ds.inputs()[[i, 0]], ds.inputs()[[i, 1]]);
            let r2 = match labels[i] {
                0 => {
                    assert!(y >= -1e-12, "class 0 stays in the upper half");
                    x * x + y * y
                }
                _ => {
                    assert!(y <= 0.5 + 1e-12, "class 1 stays in the lower half");
                    (x - 1.0) * (x - 1.0) + (y - 0.5) * (y - 0.5)
                }
            };
            assert!((r2 - 1.0).abs() < 1e-12, "row {i} has radius² {r2}");
        }
    }

    #[test]
    fn two_moons_is_deterministic_and_balanced() {
        let a = two_moons(1000, 0.1, 9).unwrap();
        let b = two_moons(1000, 0.1, 9).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        assert_eq!(a.labels(), b.labels());
        let ones = a.labels().unwrap().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 500);
        assert_eq!(a.len(), 1000);
        let c = two_moons(1000, 0.1, 10).unwrap();
        assert_ne!(a.inputs(), c.inputs(), "a different seed moves the noise");
    }

    #[test]
    fn two_moons_rejects_degenerate_requests() {
        assert!(two_moons(3, 0.1, 0).is_err());
        assert!(two_moons(100, -0.1, 0).is_err());
    }

    #[test]
    fn gaussian_blobs_land_on_centers_without_noise() {
        let centers = [[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]];
        let ds = gaussian_blobs(&centers, 0.0, 5, 1).unwrap();
        assert_eq!(ds.len(), 15);
        assert_eq!(ds.class_count(), 3);
        let labels = ds.labels().unwrap();
        for i in 0..ds.len() {
            let c = labels[i];
            assert_eq!(ds.inputs()[[i, 0]], centers[c][0]);
            assert_eq!(ds.inputs()[[i, 1]], centers[c][1]);
        }
        let again = gaussian_blobs(&centers, 0.0, 5, 1).unwrap();
        assert_eq!(ds.inputs(), again.inputs());
    }

    // A 2-image IDX pair with recognizable pixel values.
    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..2 * 784 {
            images.push(match i % 3 {
                0 => 0,
                1 => 128,
                _ => 255,
            });
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.push(3);
        labels.push(7);
        (images, labels)
    }

    #[test]
    fn mnist_fixture_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let ds = mnist_load(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class_count(), 10);
        assert_eq!(ds.kind(), DatasetKind::Image28x28);
        assert_eq!(ds.labels().unwrap(), &[3, 7]);
        for i in 0..2 * 784 {
            let expect = match i % 3 {
                0 => 0.0,
                1 => 128.0 / 255.0,
                _ => 1.0,
            };
            assert_eq!(ds.inputs()[[i / 784, i % 784]], expect);
        }
        let again = mnist_load(&ip, &lp).unwrap();
        assert_eq!(ds.inputs(), again.inputs());
        assert_eq!(ds.labels(), again.labels());
    }

    #[test]
    fn mnist_rejects_swapped_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = idx_fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, &images).unwrap();
        // Labels file carrying the image magic.
        let mut bad = labels.clone();
        bad[3] = 0x03;
        let bp = dir.path().join("badmagic");
        std::fs::write(&bp, &bad).unwrap();
        match mnist_load(&ip, &bp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected a format error, got {other:?}"),
        }
        // Pixel section cut short.
        let tp = dir.path().join("trunc");
        std::fs::write(&tp, &images[..200]).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        match mnist_load(&tp, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 200),
            other => panic!("expected a format error, got {other:?}"),
        }
        // Counts that disagree.
        let mut fewer = labels.clone();
        fewer[7] = 1;
        let fp = dir.path().join("fewer");
        std::fs::write(&fp, &fewer).unwrap();
        assert!(matches!(mnist_load(&ip, &fp), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn mnist_official_train_set_when_present() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        let ip = root.join("train-images-idx3-ubyte");
        let lp = root.join("train-labels-idx1-ubyte");
        if !ip.exists() || !lp.exists() {
            eprintln!("skipping: no MNIST files under data/mnist");
            return;
        }
        let ds = mnist_load(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 60000);
        assert_eq!(ds.inputs().ncols(), 784);
        assert!(ds.labels().unwrap().iter().all(|&y| y < 10));
    }

    #[test]
    fn select_classes_filters_and_relabels_in_order() {
        let mut inputs = Array2::zeros((6, 2));
        for i in 0..6 {
            inputs[[i, 0]] = i as f64;
        }
        let ds = Dataset::new(
            inputs,
            Some(vec![0, 3, 1, 3, 2, 1]),
            4,
            DatasetKind::Synthetic2d,
        )
        .unwrap();
        let picked = select_classes(&ds, &[3, 1]).unwrap();
        assert_eq!(picked.class_count(), 2);
        assert_eq!(picked.labels().unwrap(), &[0, 1, 0, 1]);
        let xs: Vec<f64> = (0..4).map(|i| picked.inputs()[[i, 0]]).collect();
        assert_eq!(xs, vec![1.0, 2.0, 3.0, 5.0], "sample order is preserved");
        let identity = select_classes(&ds, &[0, 1, 2, 3]).unwrap();
        assert_eq!(identity.labels().unwrap(), ds.labels().unwrap());
        let single = select_classes(&ds, &[2]).unwrap();
        assert_eq!(single.class_count(), 1);
        assert_eq!(single.len(), 1);
        assert!(select_classes(&ds, &[4]).is_err());
        assert!(select_classes(&ds, &[1, 1]).is_err());
    }

    #[test]
    fn split_labeled_partitions_and_counts() {
        let ds = two_moons(1000, 0.1, 2).unwrap();
        let split = split_labeled(&ds, &SplitSpec { per_class: 2, seed: 5 }).unwrap();
        assert_eq!(split.labeled.len(), 4);
        assert_eq!(split.unlabeled.len(), 996);
        assert!(split.unlabeled.labels().is_none());
        assert_eq!(split.eval.len(), 996);
        let labels = split.labeled.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&y| y == 0).count(), 2);
        assert_eq!(labels.iter().filter(|&&y| y == 1).count(), 2);
        // Partition: indices are disjoint and jointly exhaustive.
        let mut all: Vec<usize> = split
            .labeled_indices
            .iter()
            .chain(&split.unlabeled_indices)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        // Rows and quarantined labels line up with the original.
        let truth = ds.labels().unwrap();
        for (r, &i) in split.unlabeled_indices.iter().enumerate() {
            assert_eq!(split.unlabeled.inputs().row(r), ds.inputs().row(i));
            assert_eq!(split.eval.for_evaluation_only()[r], truth[i]);
        }
        let again = split_labeled(&ds, &SplitSpec { per_class: 2, seed: 5 }).unwrap();
        assert_eq!(again.labeled_indices, split.labeled_indices);
        let other = split_labeled(&ds, &SplitSpec { per_class: 2, seed: 6 }).unwrap();
        assert_ne!(other.labeled_indices, split.labeled_indices);
    }

    #[test]
    fn split_labeled_can_consume_a_whole_class() {
        let ds = two_moons(8, 0.0, 0).unwrap();
        let split = split_labeled(&ds, &SplitSpec { per_class: 4, seed: 0 }).unwrap();
        assert_eq!(split.labeled.len(), 8);
        assert!(split.unlabeled.is_empty());
        assert!(split_labeled(&ds, &SplitSpec { per_class: 5, seed: 0 }).is_err());
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let ds = two_moons(50, 0.1, 4).unwrap();
        for strength in [AugmentStrength::Weak, AugmentStrength::Strong] {
            let a = augment(DatasetKind::Synthetic2d, ds.inputs(), strength, 11).unwrap();
            let b = augment(DatasetKind::Synthetic2d, ds.inputs(), strength, 11).unwrap();
            assert_eq!(a, b);
            let c = augment(DatasetKind::Synthetic2d, ds.inputs(), strength, 12).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn augment_rows_are_independent_of_the_batch_around_them() {
        let ds = two_moons(10, 0.1, 4).unwrap();
        let full = augment(DatasetKind::Synthetic2d, ds.inputs(), AugmentStrength::Weak, 7)
            .unwrap();
        let head =
            augment(DatasetKind::Synthetic2d, ds.inputs().slice(ndarray::s![..3, ..]), AugmentStrength::Weak, 7)
                .unwrap();
        for i in 0..3 {
            assert_eq!(full.row(i), head.row(i), "row {i} must only depend on its own stream");
        }
    }

    #[test]
    fn weak_image_shift_can_be_the_identity() {
        let mut image = Array2::zeros((1, 784));
        for j in 0..784 {
            image[[0, j]] = (j as f64 * 0.37).sin().abs();
        }
        let mut identity_seen = false;
        let mut moved_seen = false;
        for seed in 0..200 {
            let out =
                augment(DatasetKind::Image28x28, image.view(), AugmentStrength::Weak, seed)
                    .unwrap();
            if out == image {
                identity_seen = true;
            } else {
                moved_seen = true;
            }
            if identity_seen && moved_seen {
                return;
            }
        }
        panic!("zero and nonzero shifts must both occur (identity {identity_seen}, moved {moved_seen})");
    }

    #[test]
    fn strong_image_erase_zeroes_exactly_one_patch_under_zero_shift() {
        let image = Array2::from_elem((1, 784), 1.0);
        for seed in 0..2000 {
            let out =
                augment(DatasetKind::Image28x28, image.view(), AugmentStrength::Strong, seed)
                    .unwrap();
            let zeros: Vec<usize> =
                (0..784).filter(|&j| out[[0, j]] == 0.0).collect();
            if zeros.len() != 36 {
                continue; // a nonzero shift blanks border pixels too
            }
            // Exactly 36 zeros must form one 6×6 block.
            let r0 = zeros[0] / 28;
            let c0 = zeros[0] % 28;
            let mut expect = Vec::new();
            for r in r0..r0 + 6 {
                for c in c0..c0 + 6 {
                    expect.push(r * 28 + c);
                }
            }
            assert_eq!(zeros, expect, "seed {seed}: zeros are not one 6×6 patch");
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            return;
        }
        panic!("no zero-shift draw in 2000 seeds");
    }

    #[test]
    fn augment_checks_the_feature_width() {
        let x = Array2::zeros((3, 5));
        assert!(augment(DatasetKind::Synthetic2d, x.view(), AugmentStrength::Weak, 0).is_err());
        assert!(augment(DatasetKind::Image28x28, x.view(), AugmentStrength::Weak, 0).is_err());
    }

    #[test]
    fn csv_export_writes_full_precision_features() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = ndarray::array![[0.1, -2.5], [1.0 / 3.0, 4.0]];
        let ds =
            Dataset::new(inputs, Some(vec![0, 1]), 2, DatasetKind::Synthetic2d).unwrap();
        let path = dir.path().join("out.csv");
        write_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x0,x1,label"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0].parse::<f64>().unwrap(), 0.1, "features must round-trip");
        assert_eq!(row[2], "0");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0].parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    proptest! {
        #[test]
        fn splits_partition_every_dataset(
            n in 8usize..60,
            per_class in 1usize..4,
            seed in 0u64..1000
        ) {
            let ds = two_moons(n, 0.05, seed).unwrap();
            if let Ok(split) = split_labeled(&ds, &SplitSpec { per_class, seed }) {
                let mut all: Vec<usize> = split
                    .labeled_indices
                    .iter()
                    .chain(&split.unlabeled_indices)
                    .copied()
                    .collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(split.labeled.len(), 2 * per_class);
            }
        }

        #[test]
        fn image_augmentations_stay_in_range(seed in 0u64..200) {
            let mut image = Array2::zeros((2, 784));
            for j in 0..784 {
                image[[0, j]] = (j % 2) as f64;
                image[[1, j]] = ((j as f64) * 0.013).fract();
            }
            for strength in [AugmentStrength::Weak, AugmentStrength::Strong] {
                let out =
                    augment(DatasetKind::Image28x28, image.view(), strength, seed).unwrap();
                prop_assert_eq!(out.dim(), (2, 784));
                for &v in out.iter() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }
}
