//! Datasets, the CIFAR-10 binary format, a synthetic pattern generator,
//! normalization, stratified splitting and lot sampling.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channels, height and width of one CIFAR-10 image.
pub const CIFAR_GEOMETRY: (usize, usize, usize) = (3, 32, 32);
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labelled images `N×C×H×W`. `ids` identify each sample within its source
/// so that splits can be audited for overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = images.shape()[0];
        if images.rank() != 4 || n != labels.len() {
            return Err(Error::Data(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            images,
            labels,
            ids: (0..n).collect(),
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = self.images.gather_batch(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// The samples at `indices`, keeping their ids.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
            split,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parses a file of `1 + C·H·W`-byte records (label byte, then channel-major
/// pixels). Pixels map to `byte / 255`.
pub fn read_records(
    path: &Path,
    geometry: (usize, usize, usize),
    num_classes: usize,
    split: Split,
) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_records(&bytes, geometry, num_classes, split)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_records(
    bytes: &[u8],
    (c, h, w): (usize, usize, usize),
    num_classes: usize,
    split: Split,
) -> Result<Dataset> {
    let pixels = c * h * w;
    let record = pixels + 1;
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::Data(format!(
            "size {} is not a positive multiple of the {record}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / record;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * pixels);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[0] as usize;
        if label >= num_classes {
            return Err(Error::Data(format!("record {i} has label {label}")));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, num_classes, split)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut parts = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        parts.push(read_records(
            &dir.join(name),
            CIFAR_GEOMETRY,
            CIFAR_CLASSES,
            Split::Train,
        )?);
    }
    let train = concat(&parts, Split::Train)?;
    let test = read_records(
        &dir.join(CIFAR_TEST_FILE),
        CIFAR_GEOMETRY,
        CIFAR_CLASSES,
        Split::Test,
    )?;
    Ok((train, test))
}

fn concat(parts: &[Dataset], split: Split) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::Data("no datasets to join".into()))?;
    let (c, h, w) = first.geometry();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        if p.geometry() != (c, h, w) {
            return Err(Error::Data("mismatched image geometry".into()));
        }
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, first.num_classes, split)
}

/// Writes `ds` in the record format read by [`read_records`]. Pixels must lie
/// in `[0, 1]`; they are stored as `round(255·x)`.
pub fn write_records(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.num_classes > 256 {
        return Err(Error::Data("labels do not fit in one byte".into()));
    }
    let (c, h, w) = ds.geometry();
    let pixels = c * h * w;
    let mut out = Vec::with_capacity(ds.len() * (pixels + 1));
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push(label as u8);
        for &v in &ds.images.data()[i * pixels..(i + 1) * pixels] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("pixel {v} outside [0, 1]")));
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Class-conditioned oriented bars on a noisy background. Class `k` draws a
/// bar at angle `k·π/num_classes` with random position, length, width and
/// colour, plus a distractor blob; pixels are clipped to `[0, 1]`.
pub fn make_synthetic(
    num_classes: usize,
    n_per_class: usize,
    hw: usize,
    seed: u64,
) -> Result<Dataset> {
    if hw < 8 {
        return Err(Error::Data(format!("synthetic images need hw >= 8, got {hw}")));
    }
    if num_classes < 2 || n_per_class == 0 {
        return Err(Error::Data("need at least two classes and one sample each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * n_per_class;
    let plane = hw * hw;
    let mut data = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    let s = hw as f64;
    for i in 0..n {
        let class = i % num_classes;
        labels.push(class);
        let angle = class as f64 * std::f64::consts::PI / num_classes as f64
            + rng.gen_range(-0.12..0.12);
        let (dx, dy) = (angle.cos(), angle.sin());
        let (cx, cy) = (
            s / 2.0 + rng.gen_range(-0.2..0.2) * s,
            s / 2.0 + rng.gen_range(-0.2..0.2) * s,
        );
        let half_len = rng.gen_range(0.3..0.45) * s;
        let half_width = rng.gen_range(0.06..0.11) * s;
        let colour: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
        let background: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.3));
        let (bx, by, br) = (
            rng.gen_range(0.0..s),
            rng.gen_range(0.0..s),
            rng.gen_range(0.08..0.18) * s,
        );
        let blob = rng.gen_range(0.2..0.6);
        let img = &mut data[i * 3 * plane..(i + 1) * 3 * plane];
        for y in 0..hw {
            for x in 0..hw {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                let bar = ((half_width - across.abs()).clamp(0.0, 1.0))
                    * ((half_len - along.abs()).clamp(0.0, 1.0));
                let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                let spot = blob * (-d2 / (2.0 * br * br)).exp();
                for ch in 0..3 {
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.08;
                    let v = background[ch] + bar * (colour[ch] - background[ch]) + spot + noise;
                    img[ch * plane + y * hw + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![n, 3, hw, hw], data)?,
        labels,
        num_classes,
        Split::Train,
    )
}

/// Per-channel affine normalization, `x ← (x − mean)/std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population mean and standard deviation of each channel.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let (c, h, w) = ds.geometry();
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, chunk) in ds.images.data().chunks_exact(plane).enumerate() {
            let ch = i % c;
            for &v in chunk {
                sum[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let count = (ds.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt())
            .collect();
        let norm = Self { mean, std };
        norm.validate()?;
        Ok(norm)
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::Data("mean and std lengths differ".into()));
        }
        if let Some(s) = self.std.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Data(format!("channel std {s} must be positive")));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        self.validate()?;
        let (c, h, w) = ds.geometry();
        if c != self.mean.len() {
            return Err(Error::Data(format!(
                "{} normalization channels for {c}-channel images",
                self.mean.len()
            )));
        }
        let plane = h * w;
        let mut out = ds.clone();
        for (i, chunk) in out.images.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        Ok(out)
    }
}

/// Convenience wrapper: `Normalization { mean, std }.apply(ds)`.
pub fn normalize(ds: &Dataset, mean: &[f64], std: &[f64]) -> Result<Dataset> {
    Normalization {
        mean: mean.to_vec(),
        std: std.to_vec(),
    }
    .apply(ds)
}

/// Seeded, label-stratified split with `|val| = round(fraction·N)`. Each
/// class contributes `floor(fraction·n_c)` samples, and the remaining
/// validation slots go to the classes with the largest fractional parts.
/// A split that would leave the validation set empty is an error.
pub fn split_train_val(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(Error::Data(format!("val fraction {fraction} outside (0, 0.5)")));
    }
    let counts = ds.class_counts();
    if let Some((class, &n)) = counts.iter().enumerate().find(|&(_, &n)| n == 1) {
        return Err(Error::Data(format!(
            "class {class} has {n} sample, too few to stratify"
        )));
    }
    let target = (fraction * ds.len() as f64).round() as usize;
    if target == 0 {
        return Err(Error::Data(format!(
            "val fraction {fraction} of {} samples leaves no validation set",
            ds.len()
        )));
    }
    let ideal: Vec<f64> = counts.iter().map(|&n| fraction * n as f64).collect();
    let mut alloc: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(alloc.iter().sum());
    for &class in order.iter().cycle().take(counts.len() * 2) {
        if missing == 0 {
            break;
        }
        if alloc[class] + 1 < counts[class] {
            alloc[class] += 1;
            missing -= 1;
        }
    }
    if missing > 0 {
        return Err(Error::Data("classes too small for the requested split".into()));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        members.shuffle(&mut rng);
        val.extend_from_slice(&members[..alloc[class]]);
        train.extend_from_slice(&members[alloc[class]..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train, Split::Train)?, ds.subset(&val, Split::Val)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    /// Each index joins a lot independently with probability `q = L/N`.
    Poisson,
    /// A fresh permutation per epoch, cut into lots of `L` (the last lot may
    /// be shorter).
    ShuffleFixed,
}

/// Lot sampler. Lots depend only on `(seed, epoch)`, so any epoch can be
/// regenerated without replaying earlier ones.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub mode: SamplingMode,
    pub lot_size: usize,
    pub population: usize,
    pub seed: u64,
}

impl Sampler {
    pub fn new(mode: SamplingMode, lot_size: usize, population: usize, seed: u64) -> Result<Self> {
        if lot_size == 0 || population == 0 {
            return Err(Error::Data(format!(
                "sampler needs positive lot size and population, got {lot_size} and {population}"
            )));
        }
        Ok(Self {
            mode,
            lot_size,
            population,
            seed,
        })
    }

    /// `q = min(1, L/N)`.
    pub fn sampling_rate(&self) -> f64 {
        (self.lot_size as f64 / self.population as f64).min(1.0)
    }

    /// `ceil(N/L)` lots make one epoch.
    pub fn lots_per_epoch(&self) -> usize {
        self.population.div_ceil(self.lot_size)
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// All lots of `epoch`, in order.
    pub fn epoch_lots(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = self.epoch_rng(epoch);
        match self.mode {
            SamplingMode::ShuffleFixed => {
                let mut perm: Vec<usize> = (0..self.population).collect();
                perm.shuffle(&mut rng);
                perm.chunks(self.lot_size).map(<[usize]>::to_vec).collect()
            }
            SamplingMode::Poisson => {
                let q = self.sampling_rate();
                let gaps = Geometric::new(q).expect("q in (0, 1]");
                (0..self.lots_per_epoch())
                    .map(|_| {
                        // Gaps between successive Bernoulli(q) successes.
                        let mut lot = Vec::new();
                        let mut next = gaps.sample(&mut rng);
                        while next < self.population as u64 {
                            lot.push(next as usize);
                            next += 1 + gaps.sample(&mut rng);
                        }
                        lot
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_parsing() {
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        let ds = parse_records(&bytes, CIFAR_GEOMETRY, 10, Split::Train).unwrap();
        assert_eq!(ds.labels, [7]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
        assert!(parse_records(&bytes[..3000], CIFAR_GEOMETRY, 10, Split::Train).is_err());
        bytes[0] = 10;
        assert!(parse_records(&bytes, CIFAR_GEOMETRY, 10, Split::Train).is_err());
    }

    #[test]
    fn sampler_rejects_empty() {
        assert!(Sampler::new(SamplingMode::Poisson, 0, 10, 0).is_err());
        assert!(Sampler::new(SamplingMode::Poisson, 4, 0, 0).is_err());
    }
}
