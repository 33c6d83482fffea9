//! Datasets, client partitioning and data augmentation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Position of the sample in the generated or loaded collection.
    pub id: usize,
    pub features: Vec<f64>,
    /// Present only for samples on the labeled side (server or test set).
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub owner: usize,
    /// Unlabeled samples.
    pub samples: Vec<Sample>,
    /// True class of each sample, kept for evaluation only. Training code
    /// never reads this.
    pub provenance: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn distinct_classes(&self) -> usize {
        let mut classes = self.provenance.clone();
        classes.sort_unstable();
        classes.dedup();
        classes.len()
    }
}

/// How features should be perturbed by augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayout {
    /// Flat synthetic coordinates: jitter / dropout augmentation.
    Flat,
    /// Row-major grayscale image: flip / shift / crop augmentation.
    Image { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataDistribution {
    Iid,
    NonIid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub server_set: Vec<Sample>,
    pub shards: Vec<Shard>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub layout: FeatureLayout,
}

impl Dataset {
    pub fn total_samples(&self) -> usize {
        self.server_set.len() + self.shards.iter().map(Shard::len).sum::<usize>()
    }

    pub fn is_partitioned(&self) -> bool {
        !self.shards.is_empty()
    }
}

/// Distance between neighbouring class means before normalization, in units
/// of the per-class standard deviation.
pub const DEFAULT_SEPARATION: f64 = 4.0;

/// Parameters for the Gaussian-blob generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub seed: u64,
}

/// Gaussian blobs with the default class separation.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Dataset> {
    generate_blobs(&BlobSpec {
        num_classes,
        per_class,
        feature_dim,
        separation: DEFAULT_SEPARATION,
        seed,
    })
}

/// Lattice coordinates of each class mean, all on the unit hypercube.
///
/// When the classes fit, class `k` takes the Walsh code of index `k + 1`:
/// coordinate `j` is the parity of `(k + 1) & j`. Distinct codes differ in
/// about half of the coordinates, so every class is spread over many
/// features. Otherwise class `k` is written in base `b` across the
/// coordinates, with `b` the smallest base giving enough lattice points.
fn class_lattice(num_classes: usize, feature_dim: usize) -> (Vec<Vec<f64>>, f64) {
    let codes = feature_dim.next_power_of_two();
    if num_classes < codes {
        let means = (0..num_classes)
            .map(|k| {
                (0..feature_dim)
                    .map(|j| f64::from(((k + 1) & j).count_ones() % 2))
                    .collect()
            })
            .collect();
        return (means, 1.0);
    }
    let mut base = 2usize;
    while (base as f64).powi(feature_dim.min(64) as i32) < num_classes as f64 {
        base += 1;
    }
    let means = (0..num_classes)
        .map(|k| {
            let mut rest = k;
            (0..feature_dim)
                .map(|_| {
                    let digit = rest % base;
                    rest /= base;
                    digit as f64
                })
                .collect()
        })
        .collect();
    (means, (base - 1) as f64)
}

pub fn generate_blobs(spec: &BlobSpec) -> Result<Dataset> {
    let BlobSpec {
        num_classes,
        per_class,
        feature_dim,
        separation,
        seed,
    } = *spec;
    if num_classes < 2 {
        return Err(Error::config("num_classes must be at least 2"));
    }
    if per_class < 10 {
        return Err(Error::config("per_class must be at least 10"));
    }
    if feature_dim < 2 {
        return Err(Error::config("feature_dim must be at least 2"));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::config("separation must be positive"));
    }

    let (lattice, extent) = class_lattice(num_classes, feature_dim);
    // Fixed affine map: the lattice origin goes to 0 (background features sit
    // near zero as image pixels do) with 3 standard deviations of headroom.
    let lo = 0.0;
    let hi = separation * extent + 3.0;
    let scale = 1.0 / (hi - lo);

    let mut rng = rng::stream(seed, &[tag::DATA]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (class, mean) in lattice.iter().enumerate() {
        for _ in 0..per_class {
            let features = mean
                .iter()
                .map(|&m| {
                    let raw = separation * m + normal.sample(&mut rng);
                    ((raw - lo) * scale).clamp(0.0, 1.0)
                })
                .collect();
            samples.push(Sample {
                id: samples.len(),
                features,
                label: Some(class),
            });
        }
    }

    Ok(Dataset {
        server_set: samples,
        shards: Vec::new(),
        num_classes,
        feature_dim,
        layout: FeatureLayout::Flat,
    })
}

/// Splits a labeled, unpartitioned dataset into `(rest, held_out)`, holding
/// out `fraction` of every class.
pub fn holdout(ds: Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<Sample>)> {
    if ds.is_partitioned() {
        return Err(Error::config("holdout expects an unpartitioned dataset"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config("holdout fraction must lie in [0, 1)"));
    }
    let mut rng = rng::stream(seed, &[tag::SPLIT]);
    let mut by_class = group_by_class(ds.server_set)?;
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for samples in by_class.values_mut() {
        samples.shuffle(&mut rng);
        let n_held = (samples.len() as f64 * fraction).round() as usize;
        held.extend(samples.drain(..n_held));
        kept.append(samples);
    }
    kept.sort_by_key(|s| s.id);
    held.sort_by_key(|s| s.id);
    Ok((
        Dataset {
            server_set: kept,
            ..ds
        },
        held,
    ))
}

fn group_by_class(samples: Vec<Sample>) -> Result<BTreeMap<usize, Vec<Sample>>> {
    let mut by_class: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        let label = s
            .label
            .ok_or_else(|| Error::config(format!("sample {} has no label", s.id)))?;
        by_class.entry(label).or_default().push(s);
    }
    Ok(by_class)
}

/// Interleaves shuffled per-class lists: one sample of each class in turn.
fn interleave(by_class: BTreeMap<usize, Vec<Sample>>) -> Vec<Sample> {
    let mut iters: Vec<_> = by_class.into_values().map(Vec::into_iter).collect();
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for it in iters.iter_mut() {
            if let Some(s) = it.next() {
                out.push(s);
            }
        }
        if out.len() == before {
            return out;
        }
    }
}

fn strip(sample: Sample) -> (Sample, usize) {
    let class = sample.label.expect("labeled pool");
    (
        Sample {
            label: None,
            ..sample
        },
        class,
    )
}

/// Gives the server `server_samples` labeled samples and spreads the rest,
/// labels stripped, over `clients` shards.
pub fn partition(
    ds: Dataset,
    clients: usize,
    server_samples: usize,
    dist: DataDistribution,
    seed: u64,
) -> Result<Dataset> {
    if ds.is_partitioned() {
        return Err(Error::config("dataset is already partitioned"));
    }
    if clients == 0 {
        return Err(Error::config("clients must be at least 1"));
    }
    let total = ds.server_set.len();
    if server_samples >= total {
        return Err(Error::config(format!(
            "server_samples ({server_samples}) must be below the dataset size ({total})"
        )));
    }
    if total - server_samples < clients {
        return Err(Error::config(format!(
            "{} unlabeled samples cannot fill {clients} shards",
            total - server_samples
        )));
    }

    let mut rng = rng::stream(seed, &[tag::PARTITION]);
    let mut by_class = group_by_class(ds.server_set)?;
    for samples in by_class.values_mut() {
        samples.shuffle(&mut rng);
    }
    let mut pool = interleave(by_class);
    let rest = pool.split_off(server_samples);
    let mut server_set = pool;
    server_set.sort_by_key(|s| s.id);

    let mut shards: Vec<Shard> = (0..clients)
        .map(|owner| Shard {
            owner,
            samples: Vec::new(),
            provenance: Vec::new(),
        })
        .collect();

    match dist {
        DataDistribution::Iid => {
            // Dealing class-sorted samples round-robin gives every shard an
            // equal share of every class, up to one sample.
            let sorted = group_by_class(rest)?.into_values().flatten();
            for (i, s) in sorted.enumerate() {
                let (s, class) = strip(s);
                let shard = &mut shards[i % clients];
                shard.samples.push(s);
                shard.provenance.push(class);
            }
        }
        DataDistribution::NonIid => {
            let mut remaining = group_by_class(rest)?;
            let classes: Vec<usize> = remaining.keys().copied().collect();
            let pairs = assign_class_pairs(&classes, clients, &mut rng)?;
            let mut holders: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (client, pair) in pairs.iter().enumerate() {
                for &c in pair {
                    holders.entry(c).or_default().push(client);
                }
            }
            for (class, owners) in holders {
                let samples = remaining.remove(&class).unwrap_or_default();
                if samples.len() < owners.len() {
                    return Err(Error::config(format!(
                        "class {class} has {} unlabeled samples but {} clients need it",
                        samples.len(),
                        owners.len()
                    )));
                }
                let n = samples.len();
                let k = owners.len();
                let mut it = samples.into_iter();
                for (j, &owner) in owners.iter().enumerate() {
                    let take = n / k + usize::from(j < n % k);
                    for s in it.by_ref().take(take) {
                        let (s, c) = strip(s);
                        shards[owner].samples.push(s);
                        shards[owner].provenance.push(c);
                    }
                }
            }
        }
    }

    Ok(Dataset {
        server_set,
        shards,
        ..ds
    })
}

/// Draws two distinct classes per client, using every class as evenly as
/// possible so that all unlabeled samples find an owner.
fn assign_class_pairs(
    classes: &[usize],
    clients: usize,
    rng: &mut impl Rng,
) -> Result<Vec<[usize; 2]>> {
    if classes.len() < 2 {
        return Err(Error::config(
            "non-iid partition needs at least two classes among unlabeled samples",
        ));
    }
    if 2 * clients < classes.len() {
        return Err(Error::config(format!(
            "{clients} clients holding two classes each cannot cover {} classes",
            classes.len()
        )));
    }
    let mut slots: Vec<usize> = classes.iter().copied().cycle().take(2 * clients).collect();
    slots.shuffle(rng);
    let mut pairs: Vec<[usize; 2]> = slots.chunks(2).map(|c| [c[0], c[1]]).collect();
    for i in 0..pairs.len() {
        if pairs[i][0] != pairs[i][1] {
            continue;
        }
        let dup = pairs[i][0];
        let swap = (0..pairs.len())
            .find(|&j| j != i && pairs[j][0] != dup && pairs[j][1] != dup)
            .ok_or_else(|| {
                Error::config(format!(
                    "{clients} clients cannot each hold two distinct classes"
                ))
            })?;
        let other = pairs[swap][0];
        pairs[swap][0] = dup;
        pairs[i][1] = other;
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Augmentation

pub const WEAK_JITTER: f64 = 0.01;
pub const STRONG_JITTER: f64 = 0.05;
pub const STRONG_DROPOUT: f64 = 0.1;
pub const MAX_SHIFT: i64 = 2;
pub const CROP_MARGIN: usize = 4;

/// Translates an image by `(dy, dx)` cells; uncovered cells become zero.
pub fn shift_image(x: &[f64], rows: usize, cols: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows as i64 {
        for j in 0..cols as i64 {
            let (ti, tj) = (i + dy, j + dx);
            if (0..rows as i64).contains(&ti) && (0..cols as i64).contains(&tj) {
                out[ti as usize * cols + tj as usize] = x[i as usize * cols + j as usize];
            }
        }
    }
    out
}

pub fn flip_horizontal(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + (cols - 1 - j)] = x[i * cols + j];
        }
    }
    out
}

/// Keeps the `(rows - 2m) x (cols - 2m)` window at `(top, left)` and pads the
/// remainder with zeros.
pub fn crop_and_pad(x: &[f64], rows: usize, cols: usize, top: usize, left: usize) -> Vec<f64> {
    let h = rows.saturating_sub(2 * CROP_MARGIN);
    let w = cols.saturating_sub(2 * CROP_MARGIN);
    let mut out = vec![0.0; x.len()];
    for i in top..(top + h).min(rows) {
        for j in left..(left + w).min(cols) {
            out[i * cols + j] = x[i * cols + j];
        }
    }
    out
}

fn random_shift(rng: &mut impl Rng) -> (i64, i64) {
    (
        rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
    )
}

fn clamp_unit(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
    v
}

fn jitter(x: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    x.iter().map(|&v| v + noise.sample(rng)).collect()
}

/// Weak view: flip-and-shift for images, small jitter otherwise.
pub fn augment_weak(x: &[f64], layout: FeatureLayout, rng: &mut impl Rng) -> Vec<f64> {
    match layout {
        FeatureLayout::Image { rows, cols } => {
            let flip = rng.random_bool(0.5);
            let (dy, dx) = random_shift(rng);
            let base = if flip {
                flip_horizontal(x, rows, cols)
            } else {
                x.to_vec()
            };
            clamp_unit(shift_image(&base, rows, cols, dy, dx))
        }
        FeatureLayout::Flat => clamp_unit(jitter(x, WEAK_JITTER, rng)),
    }
}

/// Strong view: shift plus crop-and-pad for images, larger jitter with
/// feature dropout otherwise.
pub fn augment_strong(x: &[f64], layout: FeatureLayout, rng: &mut impl Rng) -> Vec<f64> {
    match layout {
        FeatureLayout::Image { rows, cols } => {
            let (dy, dx) = random_shift(rng);
            let top = rng.random_range(0..=2 * CROP_MARGIN);
            let left = rng.random_range(0..=2 * CROP_MARGIN);
            let shifted = shift_image(x, rows, cols, dy, dx);
            clamp_unit(crop_and_pad(&shifted, rows, cols, top, left))
        }
        FeatureLayout::Flat => {
            let mut v = jitter(x, STRONG_JITTER, rng);
            for f in v.iter_mut() {
                if rng.random_bool(STRONG_DROPOUT) {
                    *f = 0.0;
                }
            }
            clamp_unit(v)
        }
    }
}

// ---------------------------------------------------------------------------
// IDX files

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            reason: format!("truncated header: file has {} bytes", bytes.len()),
        })
}

/// Raw IDX image tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: 16 + body.len(),
            reason: format!("truncated pixel data: expected {need} bytes, found {}", body.len()),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Parse {
            offset: 8 + body.len(),
            reason: format!("truncated labels: expected {count}, found {}", body.len()),
        });
    }
    if let Some(pos) = body[..count].iter().position(|&l| l > 9) {
        return Err(Error::Parse {
            offset: 8 + pos,
            reason: format!("label code {} outside 0-9", body[pos]),
        });
    }
    Ok(body[..count].to_vec())
}

/// Builds an unpartitioned labeled dataset from raw IDX bytes.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let imgs = parse_idx_images(images)?;
    let lbls = parse_idx_labels(labels)?;
    if lbls.len() != imgs.count {
        return Err(Error::Parse {
            offset: 4,
            reason: format!(
                "label count {} does not match image count {}",
                lbls.len(),
                imgs.count
            ),
        });
    }
    let dim = imgs.rows * imgs.cols;
    let samples = lbls
        .iter()
        .enumerate()
        .map(|(i, &label)| Sample {
            id: i,
            features: imgs.pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            label: Some(usize::from(label)),
        })
        .collect();
    Ok(Dataset {
        server_set: samples,
        shards: Vec::new(),
        num_classes: 10,
        feature_dim: dim,
        layout: FeatureLayout::Image {
            rows: imgs.rows,
            cols: imgs.cols,
        },
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    dataset_from_idx(&images, &labels)
}
