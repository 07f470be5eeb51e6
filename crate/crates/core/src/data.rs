//! Datasets and federated partitioning.
//!
//! Two sources feed the simulator: a seeded synthetic generator (one
//! smoothed random template per class plus Gaussian noise) and IDX files in
//! the MNIST layout. Either pool is split into a centralized test set and
//! label-pure shards dealt out to clients, which gives every client a
//! skewed label distribution.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Position in the ingested pool; used to check disjointness.
    pub index: usize,
    /// `C·H·W` values, row-major.
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub id: usize,
    pub samples: Vec<Sample>,
}

impl ClientData {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    pub test: Vec<Sample>,
    pub classes: usize,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
}

impl FederatedDataset {
    pub fn train_len(&self) -> usize {
        self.clients.iter().map(ClientData::len).sum()
    }
}

/// Stacks samples into a `[B, C, H, W]` batch and its labels.
pub fn make_batch(samples: &[&Sample], image_shape: [usize; 3]) -> (Tensor, Vec<usize>) {
    let per: usize = image_shape.iter().product();
    let mut data = Vec::with_capacity(samples.len() * per);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        debug_assert_eq!(s.pixels.len(), per);
        data.extend_from_slice(&s.pixels);
        labels.push(s.label);
    }
    let [c, h, w] = image_shape;
    (
        Tensor::from_parts(vec![samples.len(), c, h, w], data),
        labels,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub shards_per_client: usize,
    pub test_samples: usize,
    pub seed: u64,
}

/// Hamilton apportionment of `seats` over `counts`, every label getting at
/// least one seat and never more seats than samples.
fn apportion(counts: &[usize], seats: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let quota: Vec<f64> = counts
        .iter()
        .map(|&n| seats as f64 * n as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = quota
        .iter()
        .zip(counts)
        .map(|(&q, &n)| (q.floor() as usize).clamp(1, n))
        .collect();
    loop {
        let sum: usize = alloc.iter().sum();
        if sum == seats {
            break;
        }
        let pick = if sum < seats {
            (0..counts.len())
                .filter(|&i| alloc[i] < counts[i])
                .max_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(b.cmp(&a)))
        } else {
            (0..counts.len())
                .filter(|&i| alloc[i] > 1)
                .min_by(|&a, &b| (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(a.cmp(&b)))
        };
        let i = pick.expect("feasibility checked by caller");
        if sum < seats {
            alloc[i] += 1;
        } else {
            alloc[i] -= 1;
        }
    }
    alloc
}

/// Holds out `test_samples`, sorts the rest by label and deals label-pure
/// shards to clients, `shards_per_client` each.
pub fn partition_label_shards(
    samples: Vec<Sample>,
    classes: usize,
    image_shape: [usize; 3],
    spec: &PartitionSpec,
) -> Result<FederatedDataset> {
    if spec.clients == 0 || spec.shards_per_client == 0 {
        return Err(Error::Config("clients and shards_per_client must be positive".into()));
    }
    if spec.test_samples == 0 || spec.test_samples >= samples.len() {
        return Err(Error::Config(format!(
            "test split of {} leaves no usable data out of {} samples",
            spec.test_samples,
            samples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool = samples;
    pool.shuffle(&mut rng);
    let train = pool.split_off(spec.test_samples);
    let test = pool;

    let mut by_label: Vec<Vec<Sample>> = vec![Vec::new(); classes];
    for s in train {
        if s.label >= classes {
            return Err(Error::Config(format!(
                "label {} out of range for {classes} classes",
                s.label
            )));
        }
        by_label[s.label].push(s);
    }
    by_label.retain(|v| !v.is_empty());
    let counts: Vec<usize> = by_label.iter().map(Vec::len).collect();
    let shards = spec.clients * spec.shards_per_client;
    let available: usize = counts.iter().sum();
    if shards < counts.len() {
        return Err(Error::Config(format!(
            "{shards} shards cannot cover {} distinct labels",
            counts.len()
        )));
    }
    if shards > available {
        return Err(Error::Config(format!(
            "{shards} shards need at least {shards} training samples, have {available}"
        )));
    }

    let alloc = apportion(&counts, shards);
    let mut pieces: Vec<Vec<Sample>> = Vec::with_capacity(shards);
    for (run, parts) in by_label.into_iter().zip(alloc) {
        let n = run.len();
        let mut it = run.into_iter();
        for p in 0..parts {
            let size = n / parts + usize::from(p < n % parts);
            pieces.push(it.by_ref().take(size).collect());
        }
    }
    pieces.shuffle(&mut rng);

    let mut clients: Vec<ClientData> = (0..spec.clients)
        .map(|id| ClientData {
            id,
            samples: Vec::new(),
        })
        .collect();
    for (i, piece) in pieces.into_iter().enumerate() {
        clients[i / spec.shards_per_client].samples.extend(piece);
    }
    Ok(FederatedDataset {
        clients,
        test,
        classes,
        image_shape,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    pub test_samples: usize,
    pub image_shape: [usize; 3],
    /// Standard deviation of per-pixel noise relative to unit-variance templates.
    pub noise: f64,
    pub shards_per_client: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            clients: 50,
            samples_per_client: 20,
            test_samples: 500,
            image_shape: [1, 8, 8],
            noise: 1.0,
            shards_per_client: 2,
            seed: 0,
        }
    }
}

fn box_blur(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        acc += img[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

fn class_template(rng: &mut ChaCha8Rng, [c, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let mut plane: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
        plane = box_blur(&box_blur(&plane, h, w), h, w);
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let sd = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        out.extend(plane.iter().map(|v| (v - mean) / sd));
    }
    out
}

/// Seeded synthetic classification data, partitioned into label shards.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FederatedDataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.clients < 1 || spec.samples_per_client < 1 {
        return Err(Error::Config("need at least one client with one sample".into()));
    }
    if spec.image_shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("invalid image shape {:?}", spec.image_shape)));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and >= 0, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| class_template(&mut rng, spec.image_shape))
        .collect();
    let total = spec.clients * spec.samples_per_client + spec.test_samples;
    let samples = (0..total)
        .map(|index| {
            let label = index % spec.classes;
            let pixels = templates[label]
                .iter()
                .map(|&t| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (t + spec.noise * z) as f32 as f64
                })
                .collect();
            Sample { index, pixels, label }
        })
        .collect();
    partition_label_shards(
        samples,
        spec.classes,
        spec.image_shape,
        &PartitionSpec {
            clients: spec.clients,
            shards_per_client: spec.shards_per_client,
            test_samples: spec.test_samples,
            seed: spec.seed.wrapping_add(1),
        },
    )
}

fn ingest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ingest_err(path, e.to_string()))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| ingest_err(path, "truncated header"))
}

/// Reads an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<Sample>> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ingest_err(images, format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(ingest_err(labels, format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let nl = be_u32(&lab, 4, labels)? as usize;
    if n != nl {
        return Err(ingest_err(labels, format!("{nl} labels for {n} images")));
    }
    let per = rows * cols;
    if per == 0 {
        return Err(ingest_err(images, "zero-sized images"));
    }
    let body = &img[16..];
    if body.len() != n * per {
        return Err(ingest_err(
            images,
            format!("expected {} pixel bytes, found {}", n * per, body.len()),
        ));
    }
    let lbody = &lab[8..];
    if lbody.len() != n {
        return Err(ingest_err(labels, format!("expected {n} label bytes, found {}", lbody.len())));
    }
    Ok(body
        .chunks_exact(per)
        .zip(lbody)
        .enumerate()
        .map(|(index, (px, &label))| Sample {
            index,
            pixels: px.iter().map(|&b| b as f64 / 255.0).collect(),
            label: label as usize,
        })
        .collect())
}

/// Extents `[rows, cols]` declared in an IDX image header.
pub fn idx_image_dims(images: &Path) -> Result<[usize; 2]> {
    let img = read_file(images)?;
    Ok([be_u32(&img, 8, images)? as usize, be_u32(&img, 12, images)? as usize])
}

/// Rejects labels at or above `classes`.
pub fn check_labels(samples: &[Sample], classes: usize, source: &Path) -> Result<()> {
    match samples.iter().find(|s| s.label >= classes) {
        Some(s) => Err(ingest_err(
            source,
            format!("label {} at sample {} is outside [0, {classes})", s.label, s.index),
        )),
        None => Ok(()),
    }
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

/// IDX-backed dataset settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdxSpec {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub classes: usize,
    pub clients: usize,
    pub shards_per_client: usize,
    pub test_samples: usize,
    pub seed: u64,
}

pub fn load_idx_federated(spec: &IdxSpec) -> Result<FederatedDataset> {
    let samples = load_idx(&spec.images, &spec.labels)?;
    check_labels(&samples, spec.classes, &spec.labels)?;
    let [rows, cols] = idx_image_dims(&spec.images)?;
    partition_label_shards(
        samples,
        spec.classes,
        [1, rows, cols],
        &PartitionSpec {
            clients: spec.clients,
            shards_per_client: spec.shards_per_client,
            test_samples: spec.test_samples,
            seed: spec.seed,
        },
    )
}
