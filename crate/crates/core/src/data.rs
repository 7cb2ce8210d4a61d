//! Image datasets and task-sequence construction.
//!
//! Reads the big-endian IDX container used by MNIST, builds split tasks
//! (disjoint class subsets, labels remapped per task) and permuted tasks (a
//! fixed pixel shuffle per task), and subsamples deterministically.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Permutation seed that leaves images untouched.
pub const IDENTITY_PERMUTATION_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per image, pixels in `[0, 1]`.
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<usize>, class_count: usize, split: SplitTag) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::config(format!(
                "label {bad} not below class count {class_count}"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images.ncols()
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            msg: msg.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        let chunk = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| self.fail("truncated header"))?;
        let v = u32::from_be_bytes(chunk.try_into().expect("4 bytes"));
        self.offset = end;
        Ok(v)
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.offset;
        if available < len {
            return Err(self.fail(format!(
                "truncated payload: need {len} bytes, {available} available"
            )));
        }
        let out = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(out)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `n × (rows·cols)` pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path,
    };
    let magic = cur.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        cur.offset = 0;
        return Err(cur.fail(format!("bad image magic {magic:#010x}")));
    }
    let n = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let width = rows * cols;
    let pixels = cur.payload(n * width)?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(Array2::from_shape_vec((n, width), data).expect("sized payload"))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let mut cur = Cursor {
        bytes,
        offset: 0,
        path,
    };
    let magic = cur.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        cur.offset = 0;
        return Err(cur.fail(format!("bad label magic {magic:#010x}")));
    }
    let n = cur.u32_be()? as usize;
    Ok(cur.payload(n)?.iter().map(|&l| l as usize).collect())
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: SplitTag) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if images.nrows() != labels.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            msg: format!(
                "label count {} does not match image count {} in {}",
                labels.len(),
                images.nrows(),
                images_path.display()
            ),
        });
    }
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(images, labels, class_count, split)
}

/// Standard MNIST file names inside `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        SplitTag::Train,
    )?;
    let test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        SplitTag::Test,
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Rows of `classes`; label `classes[i]` becomes `i`.
    Split { classes: Vec<usize> },
    /// Every image's pixels shuffled by the permutation drawn from `seed`.
    Permuted { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    pub class_count: usize,
}

fn check_disjoint(subsets: &[Vec<usize>]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (t, subset) in subsets.iter().enumerate() {
        if subset.is_empty() {
            return Err(Error::config(format!("class subset {t} is empty")));
        }
        for &c in subset {
            if !seen.insert(c) {
                return Err(Error::config(format!(
                    "class {c} appears in more than one subset (again in subset {t})"
                )));
            }
        }
    }
    Ok(())
}

/// One task per class subset; subsets must be disjoint and nonempty.
pub fn make_split_tasks(dataset: &Dataset, subsets: &[Vec<usize>]) -> Result<Vec<(TaskSpec, Dataset)>> {
    check_disjoint(subsets)?;
    subsets
        .iter()
        .enumerate()
        .map(|(t, subset)| {
            let spec = TaskSpec {
                task_id: t,
                kind: TaskKind::Split {
                    classes: subset.clone(),
                },
                class_count: subset.len(),
            };
            Ok((spec.clone(), apply_task(dataset, &spec)?))
        })
        .collect()
}

/// Fisher–Yates permutation of `0..len` from `seed`; the reserved seed
/// gives the identity.
pub fn permutation(seed: u64, len: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    if seed != IDENTITY_PERMUTATION_SEED {
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Pixel `j` of the output is pixel `perm[j]` of the input.
pub fn permute_pixels(images: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    images.select(Axis(1), perm)
}

pub fn make_permuted_task(dataset: &Dataset, task_id: usize, seed: u64) -> Result<(TaskSpec, Dataset)> {
    let spec = TaskSpec {
        task_id,
        kind: TaskKind::Permuted { seed },
        class_count: dataset.class_count,
    };
    let data = apply_task(dataset, &spec)?;
    Ok((spec, data))
}

/// Materializes a task from a source split; the same spec applied to the
/// train and test sources yields consistent tasks.
pub fn apply_task(dataset: &Dataset, spec: &TaskSpec) -> Result<Dataset> {
    match &spec.kind {
        TaskKind::Split { classes } => {
            let mut remap = vec![None; dataset.class_count.max(1 + classes.iter().max().copied().unwrap_or(0))];
            for (i, &c) in classes.iter().enumerate() {
                remap[c] = Some(i);
            }
            let rows: Vec<usize> = (0..dataset.len())
                .filter(|&r| remap[dataset.labels[r]].is_some())
                .collect();
            let mut out = dataset.select(&rows);
            for l in &mut out.labels {
                *l = remap[*l].expect("filtered");
            }
            out.class_count = classes.len();
            Ok(out)
        }
        TaskKind::Permuted { seed } => {
            let perm = permutation(*seed, dataset.width());
            Ok(Dataset {
                images: permute_pixels(&dataset.images, &perm),
                labels: dataset.labels.clone(),
                class_count: dataset.class_count,
                split: dataset.split,
            })
        }
    }
}

/// Class-stratified sample of `n` rows without replacement, kept in
/// ascending original-index order. Each class receives its proportional share
/// rounded by largest remainder, and rows within a class are drawn uniformly.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(Error::config(format!(
            "cannot subsample {n} rows from a dataset of {}",
            dataset.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (row, &label) in dataset.labels.iter().enumerate() {
        by_class[label].push(row);
    }
    let total = dataset.len();
    let mut quotas: Vec<usize> = by_class.iter().map(|rows| rows.len() * n / total.max(1)).collect();
    let mut remainders: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(c, rows)| (rows.len() * n % total.max(1), c))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - quotas.iter().sum::<usize>();
    for &(_, c) in remainders.iter().take(short) {
        quotas[c] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for (class_rows, &quota) in by_class.iter().zip(&quotas) {
        let picked = index::sample(&mut rng, class_rows.len(), quota);
        rows.extend(picked.into_iter().map(|i| class_rows[i]));
    }
    rows.sort_unstable();
    Ok(dataset.select(&rows))
}

/// Splits off a validation set of `round(fraction · n)` rows.
pub fn split_validation(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "validation fraction {fraction} outside [0, 1)"
        )));
    }
    let n_val = (fraction * dataset.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_rows = index::sample(&mut rng, dataset.len(), n_val).into_vec();
    val_rows.sort_unstable();
    let mut is_val = vec![false; dataset.len()];
    for &r in &val_rows {
        is_val[r] = true;
    }
    let train_rows: Vec<usize> = (0..dataset.len()).filter(|&r| !is_val[r]).collect();
    let train = dataset.select(&train_rows);
    let mut val = dataset.select(&val_rows);
    val.split = SplitTag::Validation;
    Ok((train, val))
}

/// Gaussian class blobs for environments without IDX files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub width: usize,
    pub noise: f64,
    /// Seed of the class prototypes; shared by train and test draws.
    pub prototype_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            width: 784,
            noise: 0.35,
            prototype_seed: 17,
        }
    }
}

/// `n` samples, classes assigned round-robin, pixels clipped to `[0, 1]`.
pub fn synthetic_dataset(spec: &SyntheticSpec, n: usize, seed: u64, split: SplitTag) -> Result<Dataset> {
    if spec.classes == 0 || spec.width == 0 {
        return Err(Error::config("synthetic data needs classes and width"));
    }
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let prototypes = Array2::from_shape_simple_fn((spec.classes, spec.width), || {
        unit.sample(&mut proto_rng)
    });
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let mut images = Array2::zeros((n, spec.width));
    for (mut row, &l) in images.rows_mut().into_iter().zip(&labels) {
        for (px, &mean) in row.iter_mut().zip(prototypes.row(l)) {
            *px = (mean + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Dataset::new(images, labels, spec.classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        v.extend(n.to_be_bytes());
        v.extend(rows.to_be_bytes());
        v.extend(cols.to_be_bytes());
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_hand_built_images() {
        let mut pixels: Vec<u8> = (0..32).map(|i| (i * 8) as u8).collect();
        pixels[31] = 255;
        let bytes = idx_images(2, 4, 4, &pixels);
        let img = parse_idx_images(&bytes, Path::new("fixture")).unwrap();
        assert_eq!(img.dim(), (2, 16));
        assert_eq!(img[[0, 0]], 0.0);
        assert_eq!(img[[0, 1]], 8.0 / 255.0);
        assert_eq!(img[[1, 0]], 128.0 / 255.0);
        assert_eq!(img[[1, 15]], 1.0);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = idx_images(2, 4, 4, &[0; 32]);
        bytes[3] = 0x01;
        match parse_idx_images(&bytes, Path::new("x")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let bytes = idx_images(2, 4, 4, &[0; 31]);
        match parse_idx_images(&bytes, Path::new("x")) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 16);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let bytes = idx_labels(&[1, 2]);
        assert!(parse_idx_labels(&bytes[..9], Path::new("x")).is_err());
        assert!(parse_idx_labels(&bytes[..6], Path::new("x")).is_err());
    }

    #[test]
    fn load_idx_checks_counts() {
        let dir = std::env::temp_dir().join(format!("spp-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img: PathBuf = dir.join("img");
        let lab: PathBuf = dir.join("lab");
        std::fs::write(&img, idx_images(2, 2, 2, &[0, 255, 0, 0, 1, 2, 3, 4])).unwrap();
        std::fs::write(&lab, idx_labels(&[3, 1])).unwrap();
        let ds = load_idx(&img, &lab, SplitTag::Train).unwrap();
        assert_eq!(ds.labels, vec![3, 1]);
        assert_eq!(ds.class_count, 4);
        assert_eq!(ds.images[[0, 1]], 1.0);

        std::fs::write(&lab, idx_labels(&[3, 1, 2])).unwrap();
        assert!(matches!(
            load_idx(&img, &lab, SplitTag::Train),
            Err(Error::Format { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    fn balanced(n_per_class: usize, classes: usize) -> Dataset {
        let n = n_per_class * classes;
        let images = Array2::from_shape_fn((n, 6), |(r, c)| ((r * 7 + c) % 11) as f64 / 10.0);
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(images, labels, classes, SplitTag::Train).unwrap()
    }

    #[test]
    fn split_tasks_partition_the_source() {
        let ds = balanced(5, 10);
        let subsets: Vec<Vec<usize>> = (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect();
        let tasks = make_split_tasks(&ds, &subsets).unwrap();
        assert_eq!(tasks.len(), 5);
        let total: usize = tasks.iter().map(|(_, d)| d.len()).sum();
        assert_eq!(total, ds.len());
        for (spec, d) in &tasks {
            assert_eq!(spec.class_count, 2);
            assert_eq!(d.class_count, 2);
            assert!(d.labels.iter().all(|&l| l < 2));
        }

        let all: Vec<usize> = (0..10).collect();
        let single = make_split_tasks(&ds, &[all]).unwrap();
        assert_eq!(single[0].1, ds);

        assert!(matches!(
            make_split_tasks(&ds, &[vec![0, 1], vec![1, 2]]),
            Err(Error::Config(_))
        ));
        assert!(make_split_tasks(&ds, &[vec![]]).is_err());
    }

    #[test]
    fn permutation_properties() {
        let ds = balanced(2, 3);
        let (_, same) = make_permuted_task(&ds, 0, IDENTITY_PERMUTATION_SEED).unwrap();
        assert_eq!(same, ds);

        let perm = permutation(42, ds.width());
        let inv = invert_permutation(&perm);
        let there = permute_pixels(&ds.images, &perm);
        assert_eq!(permute_pixels(&there, &inv), ds.images);

        assert_ne!(permutation(1, 784), permutation(2, 784));
    }

    #[test]
    fn subsample_behaviour() {
        let ds = balanced(10, 3);
        let all = subsample(&ds, ds.len(), 9).unwrap();
        assert_eq!(all, ds);
        assert_eq!(subsample(&ds, 7, 3).unwrap(), subsample(&ds, 7, 3).unwrap());
        assert!(matches!(subsample(&ds, 31, 0), Err(Error::Config(_))));
        assert_eq!(subsample(&ds, 20, 4).unwrap().class_counts(), vec![7, 7, 6]);
        assert_eq!(subsample(&ds, 0, 4).unwrap().len(), 0);
    }

    #[test]
    fn validation_split_is_disjoint_and_complete() {
        let ds = balanced(10, 2);
        let (train, val) = split_validation(&ds, 0.1, 5).unwrap();
        assert_eq!(val.len(), 2);
        assert_eq!(train.len() + val.len(), ds.len());
        assert_eq!(val.split, SplitTag::Validation);
    }

    #[test]
    fn synthetic_is_bounded_and_deterministic() {
        let spec = SyntheticSpec {
            classes: 3,
            width: 8,
            ..SyntheticSpec::default()
        };
        let a = synthetic_dataset(&spec, 30, 1, SplitTag::Train).unwrap();
        assert_eq!(a, synthetic_dataset(&spec, 30, 1, SplitTag::Train).unwrap());
        assert!(a.images.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
    }
}
