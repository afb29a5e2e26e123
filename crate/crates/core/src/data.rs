//! Datasets: CIFAR-style binary records and a synthetic generator whose
//! classes come in pairs related by a dihedral transformation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dihedral::DihedralElement;
use crate::error::{format_err, input_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub metadata: BTreeMap<String, String>,
}

impl Dataset {
    /// `images` is `N×C×H×W` with `H = W`.
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(shape_err!("dataset images must be N×C×H×H, got {:?}", s));
        }
        if s[0] != labels.len() {
            return Err(shape_err!("{} images but {} labels", s[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(input_err!("label {} out of range for {} classes", bad, num_classes));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            num_classes,
            metadata: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn image_data(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Sample `i` as a `C×H×W` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.images.shape()[1..].to_vec(), self.image_data(i).to_vec())
            .expect("image shape is valid")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(input_err!("empty subset"));
        }
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(input_err!("index {} out of range", i));
            }
            data.extend_from_slice(self.image_data(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut out = Dataset::new(self.name.clone(), Tensor::new(shape, data)?, labels, self.num_classes)?;
        out.metadata = self.metadata.clone();
        Ok(out)
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(input_err!("split point {} outside 1..{}", n, self.len()));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// `n` samples drawn with equal counts per class (the first `n mod K`
    /// classes get one extra).
    pub fn stratified_subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let k = self.num_classes;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = Vec::with_capacity(n);
        for (c, idx) in by_class.iter_mut().enumerate() {
            let want = n / k + usize::from(c < n % k);
            if idx.len() < want {
                return Err(input_err!("class {} has {} samples, {} requested", c, idx.len(), want));
            }
            idx.shuffle(&mut rng);
            picked.extend_from_slice(&idx[..want]);
        }
        picked.sort_unstable();
        self.subset(&picked)
    }

    /// Per-channel mean and standard deviation over all pixels of all samples.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let plane = self.image_size() * self.image_size();
        let count = (self.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..self.len() {
            for (ch, p) in self.image_data(i).chunks(plane).enumerate() {
                mean[ch] += p.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..self.len() {
            for (ch, p) in self.image_data(i).chunks(plane).enumerate() {
                sq[ch] += p.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        (mean, std)
    }

    pub fn normalize_with(&mut self, mean: &[f64], std: &[f64]) {
        let c = self.channels();
        let plane = self.image_size() * self.image_size();
        for (j, chunk) in self.images.data_mut().chunks_mut(plane).enumerate() {
            let ch = j % c;
            let s = if std[ch] > 0.0 { std[ch] } else { 1.0 };
            chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) / s);
        }
    }
}

/// Borrowed run of samples: `images` holds `len` images of `image_shape`.
#[derive(Clone, Copy, Debug)]
pub struct SampleView<'a> {
    images: &'a [f64],
    labels: &'a [usize],
    image_shape: [usize; 3],
}

impl<'a> SampleView<'a> {
    pub fn new(images: &'a [f64], labels: &'a [usize], image_shape: [usize; 3]) -> Result<Self> {
        let n: usize = image_shape.iter().product();
        if images.len() != n * labels.len() {
            return Err(shape_err!("{} values for {} images of {:?}", images.len(), labels.len(), image_shape));
        }
        Ok(Self { images, labels, image_shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image(&self, i: usize) -> Tensor {
        let n: usize = self.image_shape.iter().product();
        Tensor::new(self.image_shape.to_vec(), self.images[i * n..(i + 1) * n].to_vec())
            .expect("view shape is valid")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    /// Samples `start..end`.
    pub fn range(&self, start: usize, end: usize) -> SampleView<'a> {
        let n: usize = self.image_shape.iter().product();
        SampleView {
            images: &self.images[start * n..end * n],
            labels: &self.labels[start..end],
            image_shape: self.image_shape,
        }
    }
}

impl Dataset {
    pub fn view(&self) -> SampleView<'_> {
        let s = self.images.shape();
        SampleView {
            images: self.images.data(),
            labels: &self.labels,
            image_shape: [s[1], s[2], s[3]],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplit {
    /// Standardizes both splits with per-channel statistics of the training split.
    pub fn normalize(&mut self) -> (Vec<f64>, Vec<f64>) {
        let (mean, std) = self.train.channel_stats();
        self.train.normalize_with(&mean, &std);
        self.test.normalize_with(&mean, &std);
        (mean, std)
    }
}

/// Record layout of a CIFAR-style binary file: one label byte followed by
/// channel-major, row-major pixel bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarLayout {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
}

impl CifarLayout {
    pub const CIFAR10: Self = Self {
        channels: 3,
        size: 32,
        num_classes: 10,
    };

    pub fn record_len(&self) -> usize {
        1 + self.channels * self.size * self.size
    }
}

impl Default for CifarLayout {
    fn default() -> Self {
        Self::CIFAR10
    }
}

pub fn parse_cifar_records(name: &str, bytes: &[u8], layout: CifarLayout) -> Result<Dataset> {
    let rec = layout.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(format_err!(
            "{}: {} bytes is not a whole number of {}-byte records",
            name,
            bytes.len(),
            rec
        ));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (rec - 1));
    for r in bytes.chunks_exact(rec) {
        let label = r[0] as usize;
        if label >= layout.num_classes {
            return Err(format_err!("{}: label {} ≥ {} classes", name, label, layout.num_classes));
        }
        labels.push(label);
        data.extend(r[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, layout.channels, layout.size, layout.size], data)?;
    Dataset::new(name, images, labels, layout.num_classes)
}

/// Loads one binary batch file. Pixels are scaled to `[0, 1]`.
pub fn load_cifar_binary(path: &Path, layout: CifarLayout) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("cifar");
    parse_cifar_records(name, &bytes, layout)
}

fn concat(name: &str, parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| format_err!("no batch files found"))?;
    let k = first.num_classes;
    let mut shape = first.images.shape().to_vec();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in &parts {
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    shape[0] = labels.len();
    Dataset::new(name, Tensor::new(shape, data)?, labels, k)
}

/// Loads `data_batch_*.bin` as the training split and `test_batch.bin` as the
/// test split from a directory laid out like the CIFAR-10 binary release.
pub fn load_cifar_dir(dir: &Path, layout: CifarLayout) -> Result<DataSplit> {
    let mut train_files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch") && n.ends_with(".bin"))
        })
        .collect();
    train_files.sort();
    if train_files.is_empty() {
        return Err(format_err!("no data_batch_*.bin files in {}", dir.display()));
    }
    let train = train_files
        .iter()
        .map(|p| load_cifar_binary(p, layout))
        .collect::<Result<Vec<_>>>()?;
    let test = load_cifar_binary(&dir.join("test_batch.bin"), layout)?;
    Ok(DataSplit {
        train: concat("train", train)?,
        test: Dataset { name: "test".into(), ..test },
    })
}

/// Writes samples as CIFAR-style records, quantizing `[0, 1]` pixels to bytes.
pub fn write_cifar_binary(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.num_classes > 256 {
        return Err(input_err!("CIFAR records hold at most 256 classes"));
    }
    let mut out = Vec::with_capacity(ds.len() * (1 + ds.image_len()));
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(
            ds.image_data(i)
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Synthetic dataset: `num_pairs` pairs of classes. Each sample of the second
/// class of a pair is the pair's transformation applied to a partner sample
/// of the first class (plus independent noise).
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub size: usize,
    pub channels: usize,
    pub num_pairs: usize,
    /// Per-sample variation around the class prototype.
    pub jitter: f64,
    /// Independent noise added after the transformation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            size: 16,
            channels: 3,
            num_pairs: 2,
            jitter: 0.15,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Transformation relating the two classes of pair `p`.
pub fn pair_transform(p: usize) -> DihedralElement {
    const CYCLE: [DihedralElement; 4] = [
        DihedralElement::new(2, true),
        DihedralElement::new(2, false),
        DihedralElement::new(1, false),
        DihedralElement::new(3, false),
    ];
    CYCLE[p % CYCLE.len()]
}

/// Samples are ordered so that every prefix of length `2·num_pairs·j` is balanced;
/// partners sit next to each other.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.size < 3 {
        return Err(input_err!("synthetic images need size ≥ 3"));
    }
    if cfg.num_pairs == 0 || cfg.channels == 0 {
        return Err(input_err!("need at least one pair and one channel"));
    }
    let k = 2 * cfg.num_pairs;
    let per_pair = cfg.n / k;
    if per_pair == 0 {
        return Err(input_err!("n = {} too small for {} classes", cfg.n, k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = [cfg.channels, cfg.size, cfg.size];
    let protos: Vec<Tensor> = (0..cfg.num_pairs)
        .map(|_| Tensor::uniform(&shape, 0.5, &mut rng).map(|v| v + 0.5))
        .collect();
    let mut data = Vec::with_capacity(per_pair * k * protos[0].len());
    let mut labels = Vec::with_capacity(per_pair * k);
    let clamp = |t: Tensor| t.map(|v| v.clamp(0.0, 1.0));
    for _ in 0..per_pair {
        for (p, proto) in protos.iter().enumerate() {
            let base = clamp(proto.add(&Tensor::uniform(&shape, cfg.jitter, &mut rng)));
            let partner = pair_transform(p).apply_spatial(&base)?;
            let a = clamp(base.add(&Tensor::uniform(&shape, cfg.noise, &mut rng)));
            let b = clamp(partner.add(&Tensor::uniform(&shape, cfg.noise, &mut rng)));
            data.extend_from_slice(a.data());
            labels.push(2 * p);
            data.extend_from_slice(b.data());
            labels.push(2 * p + 1);
        }
    }
    let images = Tensor::new(vec![labels.len(), cfg.channels, cfg.size, cfg.size], data)?;
    let mut ds = Dataset::new("synthetic", images, labels, k)?;
    for p in 0..cfg.num_pairs {
        ds.metadata
            .insert(format!("pair{}_transform", p), pair_transform(p).name().to_string());
    }
    ds.metadata.insert("seed".into(), cfg.seed.to_string());
    Ok(ds)
}

/// Synthetic train/test split drawn from the same prototypes.
pub fn synthetic_split(cfg: &SyntheticConfig, n_test: usize) -> Result<DataSplit> {
    let full = generate_synthetic(&SyntheticConfig {
        n: cfg.n + n_test,
        ..cfg.clone()
    })?;
    let k = full.num_classes();
    let n_train = (cfg.n / k) * k;
    let (train, test) = full.split_at(n_train.min(full.len() - 1))?;
    Ok(DataSplit { train, test })
}

/// Index permutation for one epoch.
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, layout: CifarLayout, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..layout.record_len() - 1).map(fill));
        r
    }

    #[test]
    fn cifar_records_load() {
        let layout = CifarLayout::CIFAR10;
        let mut bytes = Vec::new();
        for i in 0..4u8 {
            bytes.extend(record(i, layout, |j| ((j * 7 + i as usize) % 256) as u8));
        }
        assert_eq!(bytes.len(), 3073 * 4);
        let ds = parse_cifar_records("t", &bytes, layout).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels(), &[0, 1, 2, 3]);
        let img = ds.image(2);
        assert_eq!(img.shape(), &[3, 32, 32]);
        // R plane row 0 col 5, then G plane start
        assert_eq!(img.data()[5], (5 * 7 + 2) as f64 / 255.0);
        assert_eq!(img.data()[1024], ((1024 * 7 + 2) % 256) as f64 / 255.0);
    }

    #[test]
    fn cifar_format_errors() {
        let layout = CifarLayout::CIFAR10;
        let mut bytes = record(1, layout, |_| 0);
        bytes.pop();
        assert!(matches!(parse_cifar_records("t", &bytes, layout), Err(crate::Error::Format(_))));
        let bytes = record(10, layout, |_| 0);
        assert!(matches!(parse_cifar_records("t", &bytes, layout), Err(crate::Error::Format(_))));
        assert!(parse_cifar_records("t", &[], layout).is_err());
    }

    #[test]
    fn cifar_write_read_round_trip() {
        let layout = CifarLayout { channels: 3, size: 4, num_classes: 10 };
        let mut bytes = Vec::new();
        for i in 0..3u8 {
            bytes.extend(record(i * 3, layout, |j| (j * 13 % 256) as u8));
        }
        let ds = parse_cifar_records("t", &bytes, layout).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_cifar_binary(&p, &ds).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);
        assert_eq!(load_cifar_binary(&p, layout).unwrap().images(), ds.images());
    }

    #[test]
    fn stratified_counts() {
        let layout = CifarLayout { channels: 1, size: 2, num_classes: 10 };
        let mut bytes = Vec::new();
        for i in 0..12_000usize {
            bytes.extend(record((i % 10) as u8, layout, |_| 0));
        }
        let ds = parse_cifar_records("t", &bytes, layout).unwrap();
        let sub = ds.stratified_subsample(5000, 1).unwrap();
        let mut counts = [0; 10];
        sub.labels().iter().for_each(|&l| counts[l] += 1);
        assert_eq!(counts, [500; 10]);
        assert!(ds.stratified_subsample(20_000, 1).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_planted() {
        let cfg = SyntheticConfig {
            n: 40,
            size: 5,
            noise: 0.0,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metadata["pair0_transform"], "mr2");
        for i in (0..a.len()).step_by(2) {
            let p = a.label(i) / 2;
            let t = pair_transform(p);
            assert_eq!(t.apply_spatial(&a.image(i)).unwrap(), a.image(i + 1));
        }
        let mut counts = vec![0; a.num_classes()];
        a.labels().iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c == 10));
        assert!(generate_synthetic(&SyntheticConfig { size: 2, ..cfg }).is_err());
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let cfg = SyntheticConfig { n: 40, size: 4, ..Default::default() };
        let mut split = synthetic_split(&cfg, 20).unwrap();
        let test_before = split.test.clone();
        let (mean, std) = split.normalize();
        let (m2, s2) = split.train.channel_stats();
        assert!(m2.iter().all(|m| m.abs() < 1e-12));
        assert!(s2.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let mut manual = test_before;
        manual.normalize_with(&mean, &std);
        assert_eq!(manual, split.test);
    }
}
