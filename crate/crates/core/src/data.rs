//! Data ingestion and synthesis: MNIST IDX files (with optional HTTP
//! fetch), synthetic Gaussian-blob datasets with a planted concept
//! hierarchy, class prototypes and prototype similarity matrices.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hierarchy::Hierarchy;
use crate::tensor::Tensor2;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled example collection. Features are row-per-example with all
/// entries in [0,1]; labels index into `concept_names`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub concept_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concept_count(&self) -> usize {
        self.concept_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return Err(Error::Pairing(format!(
                "{} feature rows vs {} labels",
                self.features.rows(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.concept_count()) {
            return Err(Error::Label(format!(
                "label {bad} >= {} concepts",
                self.concept_count()
            )));
        }
        if !self.features.values().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Domain("features outside [0,1]".into()));
        }
        Ok(())
    }

    /// Indices of every example of the given concept.
    pub fn indices_of(&self, concept: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == concept)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            concept_names: self.concept_names.clone(),
            split: self.split,
        })
    }

    /// Seeded class-stratified subsample of size n. Per class the
    /// example order is a seeded shuffle and classes are drained
    /// round-robin, so the subsample for a smaller n is a prefix of the
    /// one for any larger n (nested learning curves).
    pub fn stratified_prefix(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::Config(format!(
                "requested {n} examples from a set of {}",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.concept_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            per_class[l].push(i);
        }
        for class in per_class.iter_mut() {
            // Fisher-Yates with the shared seeded stream
            for i in (1..class.len()).rev() {
                class.swap(i, rng.gen_range(0..=i));
            }
        }
        let mut order = Vec::with_capacity(self.len());
        let mut cursors = vec![0usize; per_class.len()];
        while order.len() < n {
            let mut advanced = false;
            for (c, class) in per_class.iter().enumerate() {
                if cursors[c] < class.len() && order.len() < n {
                    order.push(class[cursors[c]]);
                    cursors[c] += 1;
                    advanced = true;
                }
            }
            if !advanced {
                break;
            }
        }
        self.subset(&order)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Truncated(format!("{what}: file ends inside header")))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let magic = read_u32_be(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let count = read_u32_be(bytes, 4, "images")? as usize;
    let rows = read_u32_be(bytes, 8, "images")? as usize;
    let cols = read_u32_be(bytes, 12, "images")? as usize;
    let payload = &bytes[16..];
    if payload.len() != count * rows * cols {
        return Err(Error::Truncated(format!(
            "{}: {} payload bytes for {}x{}x{}",
            path.display(),
            payload.len(),
            count,
            rows,
            cols
        )));
    }
    Ok((vec![count, rows, cols], payload))
}

fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = read_u32_be(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let count = read_u32_be(bytes, 4, "labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::Truncated(format!(
            "{}: {} payload bytes for {} labels",
            path.display(),
            payload.len(),
            count
        )));
    }
    Ok(payload)
}

/// Loads a big-endian IDX image/label file pair; pixels are scaled to
/// [0,1] by /255.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;
    let (dims, pixels) = parse_idx_images(&image_bytes, images_path)?;
    let labels_raw = parse_idx_labels(&label_bytes, labels_path)?;
    if dims[0] != labels_raw.len() {
        return Err(Error::Pairing(format!(
            "{} images vs {} labels",
            dims[0],
            labels_raw.len()
        )));
    }
    let feature_dim = dims[1] * dims[2];
    let features = Tensor2::from_vec(
        dims[0],
        feature_dim,
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let dataset = Dataset {
        features,
        labels,
        concept_names: (0..classes.max(1)).map(|c| c.to_string()).collect(),
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Re-encodes a dataset as IDX image bytes (square images assumed when
/// the feature dim is a perfect square, otherwise 1 x dim).
pub fn encode_idx_images(data: &Dataset) -> Vec<u8> {
    let dim = data.features.cols();
    let side = (dim as f64).sqrt() as usize;
    let (h, w) = if side * side == dim { (side, side) } else { (1, dim) };
    let mut out = Vec::with_capacity(16 + data.len() * dim);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    out.extend(
        data.features
            .values()
            .iter()
            .map(|&v| (v * 255.0).round() as u8),
    );
    out
}

pub fn encode_idx_labels(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + data.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend(data.labels.iter().map(|&l| l as u8));
    out
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn idx_magic_ok(path: &Path) -> bool {
    let Ok(mut f) = fs::File::open(path) else {
        return false;
    };
    let mut head = [0u8; 4];
    if f.read_exact(&mut head).is_err() {
        return false;
    }
    matches!(
        u32::from_be_bytes(head),
        IDX_IMAGES_MAGIC | IDX_LABELS_MAGIC
    )
}

/// Downloads and gunzips the four MNIST IDX files from
/// `<base_url>/<name>.gz` into `dest_dir`. Files already present with a
/// valid magic are kept without touching the network; a failed download
/// leaves no partial file behind.
pub fn fetch_mnist(base_url: &str, dest_dir: &Path) -> Result<[PathBuf; 4]> {
    fs::create_dir_all(dest_dir)?;
    let mut paths = Vec::with_capacity(4);
    for name in MNIST_FILES {
        let dest = dest_dir.join(name);
        if !idx_magic_ok(&dest) {
            let url = format!("{}/{}.gz", base_url.trim_end_matches('/'), name);
            let response = ureq::get(&url)
                .call()
                .map_err(|e| Error::Fetch(format!("GET {url}: {e}")))?;
            let mut gz_bytes = Vec::new();
            response
                .into_reader()
                .read_to_end(&mut gz_bytes)
                .map_err(|e| Error::Fetch(format!("reading {url}: {e}")))?;
            let mut decoded = Vec::new();
            flate2::read::GzDecoder::new(&gz_bytes[..])
                .read_to_end(&mut decoded)
                .map_err(|e| Error::Fetch(format!("gunzip {name}: {e}")))?;
            let magic = read_u32_be(&decoded, 0, name)
                .map_err(|e| Error::Fetch(format!("{name}: {e}")))?;
            if magic != IDX_IMAGES_MAGIC && magic != IDX_LABELS_MAGIC {
                return Err(Error::Fetch(format!("{name}: bad magic {magic:#010x}")));
            }
            let tmp = dest_dir.join(format!("{name}.partial"));
            let write = fs::write(&tmp, &decoded).and_then(|_| fs::rename(&tmp, &dest));
            if let Err(e) = write {
                let _ = fs::remove_file(&tmp);
                return Err(e.into());
            }
        }
        paths.push(dest);
    }
    Ok(paths.try_into().unwrap())
}

/// Loads the MNIST train or test split from a directory holding the
/// four uncompressed IDX files.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = match split {
        Split::Train => (MNIST_FILES[0], MNIST_FILES[1]),
        Split::Test => (MNIST_FILES[2], MNIST_FILES[3]),
    };
    load_idx(&dir.join(images), &dir.join(labels), split)
}

/// Synthetic dataset spec: one Gaussian blob per concept, blob centers
/// placed so that the planted hierarchy is recoverable from geometry
/// alone (concepts sharing a deeper common ancestor sit strictly closer
/// than concepts splitting higher up).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobSpec {
    pub concept_count: usize,
    pub dims: usize,
    pub planted_hierarchy: Hierarchy,
    pub super_cluster_separation: f64,
    pub within_spread: f64,
    pub examples_per_concept: usize,
}

/// Sibling offsets shrink by this factor per hierarchy level, which
/// keeps the planted center distances strictly ultrametric-ordered.
const LEVEL_SHRINK: f64 = 4.0;

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.concept_count == 0 || self.examples_per_concept == 0 || self.dims == 0 {
            return Err(Error::Spec("counts must be positive".into()));
        }
        if !(self.super_cluster_separation > 0.0) || !(self.within_spread > 0.0) {
            return Err(Error::Spec("separation and spread must be > 0".into()));
        }
        let concepts = (0..self.concept_count).collect();
        self.planted_hierarchy
            .validate(&concepts)
            .map_err(|e| Error::Spec(format!("planted hierarchy: {e}")))?;
        if self.dims < axis_demand(&self.planted_hierarchy) {
            return Err(Error::Spec(format!(
                "dims {} < {} child slots in the planted hierarchy",
                self.dims,
                axis_demand(&self.planted_hierarchy)
            )));
        }
        Ok(())
    }

    /// Deterministic blob center per concept (before the [0,1] rescale
    /// applied by `make_blobs`).
    pub fn centers(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut centers = vec![vec![0.0; self.dims]; self.concept_count];
        let mut next_axis = 0;
        place_centers(
            &self.planted_hierarchy,
            &vec![0.0; self.dims],
            self.super_cluster_separation,
            &mut next_axis,
            &mut centers,
        );
        Ok(centers)
    }
}

/// Axes consumed by `place_centers`: one fresh axis per internal child
/// of each node, plus one shared axis for that node's leaf children.
fn axis_demand(h: &Hierarchy) -> usize {
    match h {
        Hierarchy::Leaf(_) => 0,
        Hierarchy::Internal(c) => {
            let internal = c.iter().filter(|x| !x.is_leaf()).count();
            let leaf_axis = usize::from(internal < c.len());
            internal + leaf_axis + c.iter().map(axis_demand).sum::<usize>()
        }
    }
}

/// Internal children sit on mutually fresh orthogonal axes at the
/// node's scale; leaf children share one fresh axis at magnitudes
/// scale, 2*scale, ... so that all but the outermost sibling are
/// interior points of the axis — no single hyperplane isolates them,
/// which keeps one-vs-rest tasks from collapsing to a lone threshold
/// feature.
fn place_centers(
    node: &Hierarchy,
    center: &[f64],
    scale: f64,
    next_axis: &mut usize,
    centers: &mut [Vec<f64>],
) {
    let Hierarchy::Internal(children) = node else {
        if let Hierarchy::Leaf(id) = node {
            centers[*id].copy_from_slice(center);
        }
        return;
    };
    let leaf_axis = if children.iter().any(|c| c.is_leaf()) {
        let a = *next_axis;
        *next_axis += 1;
        Some(a)
    } else {
        None
    };
    let mut leaf_rank = 0;
    for child in children {
        let mut child_center = center.to_vec();
        if child.is_leaf() {
            leaf_rank += 1;
            child_center[leaf_axis.unwrap()] += scale * leaf_rank as f64;
            place_centers(child, &child_center, scale / LEVEL_SHRINK, next_axis, centers);
        } else {
            let a = *next_axis;
            *next_axis += 1;
            child_center[a] += scale;
            place_centers(child, &child_center, scale / LEVEL_SHRINK, next_axis, centers);
        }
    }
}

/// Standard normal via Box-Muller on the seeded stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Samples the blob dataset. All features are affinely mapped into
/// [0,1] by a single global scale, which preserves the planted distance
/// ordering exactly.
pub fn make_blobs(spec: &BlobSpec, seed: u64) -> Result<Dataset> {
    let centers = spec.centers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(spec.concept_count * spec.examples_per_concept);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (concept, center) in centers.iter().enumerate() {
        for _ in 0..spec.examples_per_concept {
            rows.push(
                center
                    .iter()
                    .map(|&c| c + spec.within_spread * normal(&mut rng))
                    .collect::<Vec<f64>>(),
            );
            labels.push(concept);
        }
    }
    let lo = rows
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    for row in &mut rows {
        for v in row.iter_mut() {
            *v = (*v - lo) / span;
        }
    }
    let dataset = Dataset {
        features: Tensor2::from_rows(&rows)?,
        labels,
        concept_names: (0..spec.concept_count).map(|c| format!("c{c}")).collect(),
        split: Split::Train,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Arithmetic mean of the concept's feature rows.
pub fn class_prototype(data: &Dataset, concept: usize) -> Result<Vec<f64>> {
    let indices = data.indices_of(concept);
    if indices.is_empty() {
        return Err(Error::EmptyClass(format!("concept {concept} has no examples")));
    }
    let mut mean = vec![0.0; data.features.cols()];
    for &i in &indices {
        for (m, v) in mean.iter_mut().zip(data.features.row(i)) {
            *m += v;
        }
    }
    let n = indices.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Prototypes of all concepts, in concept order.
pub fn class_prototypes(data: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..data.concept_count())
        .map(|c| class_prototype(data, c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    NegEuclidean,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetric pairwise similarity between prototypes. Cosine has unit
/// diagonal; `neg_euclidean` is minus the euclidean distance.
pub fn similarity_matrix(prototypes: &[Vec<f64>], metric: Metric) -> Result<Tensor2> {
    if prototypes.len() < 2 {
        return Err(Error::Domain("need >=2 prototypes".into()));
    }
    let dim = prototypes[0].len();
    if prototypes.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("prototype lengths differ".into()));
    }
    if metric == Metric::Cosine {
        if let Some(z) = prototypes.iter().position(|p| p.iter().all(|&v| v == 0.0)) {
            return Err(Error::UndefinedSimilarity(format!(
                "prototype {z} is the zero vector"
            )));
        }
    }
    let n = prototypes.len();
    let mut out = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = match metric {
                Metric::Cosine => {
                    let dot: f64 = prototypes[i].iter().zip(&prototypes[j]).map(|(a, b)| a * b).sum();
                    let ni: f64 = prototypes[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nj: f64 = prototypes[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                    dot / (ni * nj)
                }
                Metric::NegEuclidean => -euclidean(&prototypes[i], &prototypes[j]),
            };
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}
