//! Synthetic covariate-shift benchmarks, deterministic augmentation, and
//! dataset serialization.
//!
//! The classification benchmark draws K Gaussian clusters whose means sit on
//! a ring, one angle per class. The target domain re-runs the same pipeline
//! and then applies a fixed feature-space shift (rotation, translation,
//! scaling, or a composite), so the label semantics are unchanged while the
//! inputs move. Per-class ring radii grow geometrically (`radius_growth`)
//! by default: with equally spaced angles and a single shared radius, a
//! rotation by half the angular spacing makes cluster identity genuinely
//! ambiguous, and no adaptation method could recover it. The radial ladder
//! keeps rotation a hard but solvable shift. Set `radius_growth = 1.0` for
//! the pure single-radius ring.
//!
//! Augmentations are keyed by `(policy seed, sample index, slot, epoch)`:
//! the same key always yields the same view, with no shared RNG state
//! between samples, so any batch order produces identical views.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"CSDT";
/// Stored in place of a label for samples whose label is withheld.
pub const NO_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable identity used for augmentation keying; survives splits and
    /// serialization.
    pub index: u64,
    /// `None` for unlabeled samples. Target labels exist only for
    /// evaluation and must never steer training.
    pub label: Option<u32>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: u32,
    pub input_dim: u32,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature rows for the given sample positions as an `[n, d]` tensor.
    pub fn features_matrix(&self, positions: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = positions
            .iter()
            .map(|&p| self.samples[p].features.clone())
            .collect();
        Tensor::from_rows(&rows)
    }

    /// A copy with every label withheld.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    index: s.index,
                    label: None,
                    features: s.features.clone(),
                })
                .collect(),
        }
    }
}

/// A fixed transformation of the feature space applied to the target domain.
#[derive(Debug, Clone, PartialEq)]
pub enum Shift {
    /// Rotation by the given angle in the plane of the first two features.
    Rotation { degrees: f64 },
    /// Adds a constant offset; its length must equal the input dimension.
    Translation { offset: Vec<f64> },
    /// Multiplies every feature by a constant factor.
    Scale { factor: f64 },
    Composite(Vec<Shift>),
}

impl Shift {
    fn apply(&self, features: &mut [f64]) {
        match self {
            Shift::Rotation { degrees } => {
                let rad = degrees.to_radians();
                let (sin, cos) = rad.sin_cos();
                let (x, y) = (features[0], features[1]);
                features[0] = cos * x - sin * y;
                features[1] = sin * x + cos * y;
            }
            Shift::Translation { offset } => {
                for (f, o) in features.iter_mut().zip(offset) {
                    *f += o;
                }
            }
            Shift::Scale { factor } => {
                for f in features.iter_mut() {
                    *f *= factor;
                }
            }
            Shift::Composite(parts) => {
                for p in parts {
                    p.apply(features);
                }
            }
        }
    }

    fn validate(&self, input_dim: u32) -> Result<()> {
        match self {
            Shift::Rotation { degrees } => {
                if input_dim < 2 {
                    return Err(Error::DegenerateSpec(
                        "rotation needs at least 2 feature dimensions".into(),
                    ));
                }
                if !degrees.is_finite() {
                    return Err(Error::DegenerateSpec("rotation angle must be finite".into()));
                }
            }
            Shift::Translation { offset } => {
                if offset.len() != input_dim as usize {
                    return Err(Error::DegenerateSpec(format!(
                        "translation offset has length {}, input_dim is {input_dim}",
                        offset.len()
                    )));
                }
            }
            Shift::Scale { factor } => {
                if !factor.is_finite() || *factor == 0.0 {
                    return Err(Error::DegenerateSpec("scale factor must be finite and nonzero".into()));
                }
            }
            Shift::Composite(parts) => {
                for p in parts {
                    p.validate(input_dim)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub num_classes: u32,
    pub input_dim: u32,
    pub source_count: usize,
    pub target_count: usize,
    pub radius: f64,
    pub radius_growth: f64,
    pub noise_sigma: f64,
    pub shift: Shift,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "ring".into(),
            num_classes: 4,
            input_dim: 8,
            source_count: 2000,
            target_count: 1024,
            radius: 4.0,
            radius_growth: 1.4,
            noise_sigma: 1.0,
            shift: Shift::Rotation { degrees: 45.0 },
            seed: 0,
        }
    }
}

/// Cluster means: class k sits at angle `2*pi*k / K` and radius
/// `radius * growth^k`, embedded in the first two feature dimensions.
pub fn class_means(num_classes: u32, input_dim: u32, radius: f64, growth: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / num_classes as f64;
            let r = radius * growth.powi(k as i32);
            let mut mean = vec![0.0; input_dim as usize];
            mean[0] = r * angle.cos();
            mean[1] = r * angle.sin();
            mean
        })
        .collect()
}

/// Label counts summing to `total`, balanced to within one sample: the
/// first `total % K` classes get the extra one.
fn balanced_counts(total: usize, num_classes: u32) -> Vec<usize> {
    let k = num_classes as usize;
    let base = total / k;
    let extra = total % k;
    (0..k).map(|c| base + usize::from(c < extra)).collect()
}

fn draw_domain(
    spec: &DatasetSpec,
    count: usize,
    means: &[Vec<f64>],
    shift: Option<&Shift>,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let d = spec.input_dim as usize;
    let counts = balanced_counts(count, spec.num_classes);
    let mut samples = Vec::with_capacity(count);
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let mut features: Vec<f64> = means[class].clone();
            for f in features.iter_mut().take(d) {
                let z: f64 = rng.sample(StandardNormal);
                *f += spec.noise_sigma * z;
            }
            if let Some(s) = shift {
                s.apply(&mut features);
            }
            samples.push(Sample {
                index: 0,
                label: Some(class as u32),
                features,
            });
        }
    }
    // shuffle so neither file order nor batches follow class order
    for i in (1..samples.len()).rev() {
        let j = rng.gen_range(0..=i);
        samples.swap(i, j);
    }
    for (i, s) in samples.iter_mut().enumerate() {
        s.index = i as u64;
    }
    Dataset {
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
        samples,
    }
}

/// Draws the source and target domains. Both use the same cluster geometry
/// and label balance; the target additionally gets `spec.shift` applied to
/// every feature vector. Target labels are included (they are needed to
/// score adaptation) but are evaluation-only.
pub fn generate(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 {
        return Err(Error::DegenerateSpec(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.input_dim < 2 {
        return Err(Error::DegenerateSpec(format!(
            "need at least 2 feature dimensions, got {}",
            spec.input_dim
        )));
    }
    let min = 10 * spec.num_classes as usize;
    if spec.source_count < min || spec.target_count < min {
        return Err(Error::DegenerateSpec(format!(
            "need at least {min} samples per domain for {} classes, got {}/{}",
            spec.num_classes, spec.source_count, spec.target_count
        )));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::DegenerateSpec(format!(
            "noise_sigma must be finite and non-negative, got {}",
            spec.noise_sigma
        )));
    }
    if spec.radius <= 0.0 || spec.radius_growth <= 0.0 {
        return Err(Error::DegenerateSpec(
            "radius and radius_growth must be positive".into(),
        ));
    }
    spec.shift.validate(spec.input_dim)?;

    let means = class_means(spec.num_classes, spec.input_dim, spec.radius, spec.radius_growth);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let source = draw_domain(spec, spec.source_count, &means, None, &mut rng);
    let target = draw_domain(spec, spec.target_count, &means, Some(&spec.shift), &mut rng);
    Ok((source, target))
}

// ── Dense map benchmark for the segmentation variant ────────────────────────

/// Spec for grids of per-pixel feature vectors with checkerboard class
/// layout. Serialized maps are flattened row-major, one sample per pixel,
/// `map_height * map_width` consecutive samples per map.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    pub num_classes: u32,
    pub input_dim: u32,
    pub map_height: usize,
    pub map_width: usize,
    pub source_maps: usize,
    pub target_maps: usize,
    /// Checkerboard cell edge length in pixels.
    pub cell: usize,
    pub radius: f64,
    pub noise_sigma: f64,
    pub shift: Shift,
    pub seed: u64,
}

impl Default for MapSpec {
    fn default() -> Self {
        MapSpec {
            num_classes: 2,
            input_dim: 2,
            map_height: 16,
            map_width: 16,
            source_maps: 24,
            target_maps: 24,
            cell: 4,
            radius: 3.0,
            noise_sigma: 1.0,
            shift: Shift::Translation { offset: vec![2.0, 1.0] },
            seed: 0,
        }
    }
}

fn draw_maps(spec: &MapSpec, maps: usize, means: &[Vec<f64>], shift: Option<&Shift>, rng: &mut ChaCha8Rng) -> Dataset {
    let d = spec.input_dim as usize;
    let (h, w) = (spec.map_height, spec.map_width);
    let mut samples = Vec::with_capacity(maps * h * w);
    for m in 0..maps {
        for row in 0..h {
            for col in 0..w {
                let class = ((row / spec.cell) + (col / spec.cell)) % spec.num_classes as usize;
                let mut features = means[class].clone();
                for f in features.iter_mut().take(d) {
                    let z: f64 = rng.sample(StandardNormal);
                    *f += spec.noise_sigma * z;
                }
                if let Some(s) = shift {
                    s.apply(&mut features);
                }
                samples.push(Sample {
                    index: (m * h * w + row * w + col) as u64,
                    label: Some(class as u32),
                    features,
                });
            }
        }
    }
    Dataset {
        num_classes: spec.num_classes,
        input_dim: spec.input_dim,
        samples,
    }
}

/// Draws source and target map datasets (pixels flattened, see [`MapSpec`]).
pub fn generate_maps(spec: &MapSpec) -> Result<(Dataset, Dataset)> {
    if spec.num_classes < 2 {
        return Err(Error::DegenerateSpec("need at least 2 classes".into()));
    }
    if spec.input_dim < 2 {
        return Err(Error::DegenerateSpec("need at least 2 feature dimensions".into()));
    }
    if spec.map_height == 0 || spec.map_width == 0 || spec.source_maps == 0 || spec.target_maps == 0 {
        return Err(Error::DegenerateSpec("map geometry and counts must be positive".into()));
    }
    if spec.cell == 0 || spec.cell > spec.map_height.max(spec.map_width) {
        return Err(Error::DegenerateSpec(format!("bad checkerboard cell {}", spec.cell)));
    }
    spec.shift.validate(spec.input_dim)?;
    // single shared radius here; class identity under rotation stays
    // recoverable as long as the rotation is under half the angular spacing
    let means = class_means(spec.num_classes, spec.input_dim, spec.radius, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d61_7073);
    let source = draw_maps(spec, spec.source_maps, &means, None, &mut rng);
    let target = draw_maps(spec, spec.target_maps, &means, Some(&spec.shift), &mut rng);
    Ok((source, target))
}

// ── Augmentation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    GaussianNoise { sigma: f64 },
    RandomScale { lo: f64, hi: f64 },
    FeatureJitter { range: f64 },
    /// Rotation by a uniform angle in `[-max_degrees, +max_degrees]` in a
    /// random coordinate plane.
    RandomRotation { max_degrees: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub transforms: Vec<Transform>,
    /// Number of teacher views per sample.
    pub count: u32,
    pub seed: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl AugmentationPolicy {
    /// The standard stochastic policy: Gaussian noise, a global scale
    /// wobble, and per-feature jitter, applied in that order.
    pub fn standard(count: u32, seed: u64) -> AugmentationPolicy {
        AugmentationPolicy {
            transforms: vec![
                Transform::GaussianNoise { sigma: 0.15 },
                Transform::RandomScale { lo: 0.9, hi: 1.1 },
                Transform::FeatureJitter { range: 0.1 },
            ],
            count,
            seed,
        }
    }

    /// No-op policy: every view equals the input. Useful for isolating the
    /// rest of the pipeline.
    pub fn identity(count: u32, seed: u64) -> AugmentationPolicy {
        AugmentationPolicy {
            transforms: Vec::new(),
            count,
            seed,
        }
    }

    /// One augmented view of `features`. The `(seed, index, slot, epoch)`
    /// key fully determines the randomness; transforms draw from the keyed
    /// stream in declaration order.
    pub fn augment(&self, features: &[f64], index: u64, slot: u32, epoch: u32) -> Vec<f64> {
        let mut key = self.seed;
        key = splitmix64(key ^ index.wrapping_mul(0xff51_afd7_ed55_8ccd));
        key = splitmix64(key ^ (slot as u64).wrapping_mul(0xc4ce_b9fe_1a85_ec53));
        key = splitmix64(key ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut out = features.to_vec();
        for t in &self.transforms {
            match t {
                Transform::GaussianNoise { sigma } => {
                    for f in out.iter_mut() {
                        let z: f64 = rng.sample(StandardNormal);
                        *f += sigma * z;
                    }
                }
                Transform::RandomScale { lo, hi } => {
                    let s: f64 = rng.gen_range(*lo..=*hi);
                    for f in out.iter_mut() {
                        *f *= s;
                    }
                }
                Transform::FeatureJitter { range } => {
                    for f in out.iter_mut() {
                        *f += rng.gen_range(-range..=*range);
                    }
                }
                Transform::RandomRotation { max_degrees } => {
                    if out.len() >= 2 {
                        let i = rng.gen_range(0..out.len());
                        let mut j = rng.gen_range(0..out.len() - 1);
                        if j >= i {
                            j += 1;
                        }
                        let angle = rng.gen_range(-max_degrees..=*max_degrees).to_radians();
                        let (sin, cos) = angle.sin_cos();
                        let (a, b) = (out[i], out[j]);
                        out[i] = cos * a - sin * b;
                        out[j] = sin * a + cos * b;
                    }
                }
            }
        }
        out
    }
}

// ── Source split ────────────────────────────────────────────────────────────

/// Stratified train/validation split. The train side gets
/// `round(ratio * n)` samples overall, and every class contributes within
/// one sample of `ratio * n_class`. Order within each side follows the
/// seeded shuffle, and sample indices are preserved.
pub fn split_source(dataset: &Dataset, train_ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < train_ratio && train_ratio < 1.0) {
        return Err(Error::Config(format!(
            "train_ratio must lie strictly between 0 and 1, got {train_ratio}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch("split_source"));
    }
    let k = dataset.num_classes as usize;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, s) in dataset.samples.iter().enumerate() {
        let label = s.label.ok_or_else(|| {
            Error::DegenerateSpec("split_source requires a fully labeled dataset".into())
        })? as usize;
        if label >= k {
            return Err(Error::Format(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        per_class[label].push(pos);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73706c_69);
    for members in per_class.iter_mut() {
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
    }
    let total_train = (train_ratio * dataset.len() as f64).round() as usize;
    let mut take: Vec<usize> = per_class
        .iter()
        .map(|m| ((train_ratio * m.len() as f64).floor() as usize).min(m.len()))
        .collect();
    let mut assigned: usize = take.iter().sum();
    // distribute the remainder by largest fractional part, lowest class first
    let mut fracs: Vec<(usize, f64)> = per_class
        .iter()
        .enumerate()
        .map(|(c, m)| (c, train_ratio * m.len() as f64 - take[c] as f64))
        .collect();
    fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (c, _) in fracs {
        if assigned >= total_train {
            break;
        }
        if take[c] < per_class[c].len() {
            take[c] += 1;
            assigned += 1;
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, members) in per_class.iter().enumerate() {
        for (i, &pos) in members.iter().enumerate() {
            if i < take[c] {
                train.push(dataset.samples[pos].clone());
            } else {
                val.push(dataset.samples[pos].clone());
            }
        }
    }
    let wrap = |samples: Vec<Sample>| Dataset {
        num_classes: dataset.num_classes,
        input_dim: dataset.input_dim,
        samples,
    };
    Ok((wrap(train), wrap(val)))
}

// ── Serialization ───────────────────────────────────────────────────────────

/// Writes the little-endian binary dataset format:
/// magic `CSDT`, `K` u32, `input_dim` u32, `count` u64, then per sample
/// `index` u64, `label` u32 (`u32::MAX` when withheld), `input_dim` f64
/// feature values.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut out = |bytes: &[u8]| -> Result<()> {
        w.write_all(bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    out(&DATASET_MAGIC)?;
    out(&dataset.num_classes.to_le_bytes())?;
    out(&dataset.input_dim.to_le_bytes())?;
    out(&(dataset.samples.len() as u64).to_le_bytes())?;
    for s in &dataset.samples {
        if s.features.len() != dataset.input_dim as usize {
            return Err(Error::Format(format!(
                "sample {} has {} features, header says {}",
                s.index,
                s.features.len(),
                dataset.input_dim
            )));
        }
        out(&s.index.to_le_bytes())?;
        out(&s.label.unwrap_or(NO_LABEL).to_le_bytes())?;
        for &f in &s.features {
            out(&f.to_le_bytes())?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let fail = |msg: String| Error::Format(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fail("truncated header".into()))?;
    if magic != DATASET_MAGIC {
        return Err(fail(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(|_| fail("truncated header".into()))?;
    let num_classes = u32::from_le_bytes(u32buf);
    r.read_exact(&mut u32buf).map_err(|_| fail("truncated header".into()))?;
    let input_dim = u32::from_le_bytes(u32buf);
    r.read_exact(&mut u64buf).map_err(|_| fail("truncated header".into()))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    if num_classes < 2 {
        return Err(fail(format!("header claims {num_classes} classes")));
    }

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut u64buf)
            .map_err(|_| fail(format!("truncated at sample {i}")))?;
        let index = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u32buf)
            .map_err(|_| fail(format!("truncated at sample {i}")))?;
        let raw_label = u32::from_le_bytes(u32buf);
        let label = if raw_label == NO_LABEL {
            None
        } else if raw_label < num_classes {
            Some(raw_label)
        } else {
            return Err(fail(format!(
                "sample {i} labeled {raw_label}, header allows {num_classes} classes"
            )));
        };
        let mut features = Vec::with_capacity(input_dim as usize);
        for _ in 0..input_dim {
            r.read_exact(&mut u64buf)
                .map_err(|_| fail(format!("truncated at sample {i}")))?;
            let v = f64::from_le_bytes(u64buf);
            if !v.is_finite() {
                return Err(fail(format!("sample {i} holds a non-finite feature")));
            }
            features.push(v);
        }
        samples.push(Sample {
            index,
            label,
            features,
        });
    }
    Ok(Dataset {
        num_classes,
        input_dim,
        samples,
    })
}
