//! Synthetic heterogeneous clients.
//!
//! Every client draws from the same three unit-variance class-conditional
//! Gaussians, then pushes the draws through its own feature transform: a
//! per-dimension scale, a rotation by a client angle applied to each
//! consecutive coordinate pair, and a mean shift. The class means sit on a
//! wheel in every coordinate pair, a third of a turn apart, with a random
//! per-pair offset drawn from the global seed, so a client rotation moves
//! each class part of the way toward its neighbour. Label skew comes from per-client class proportions. The default
//! profiles follow the four-client dermoscopy benchmark layout (client sizes
//! and class ratios), scaled down.
//!
//! Datasets serialize to the flat `FSD1` format, one file per client:
//!
//! ```text
//! magic  "FSD1"
//! u32    feature dimension D
//! u32    class count
//! u32    train count, u32 val count, u32 test count
//! f64[]  features, (train, val, test) sample order, D values per sample
//! u32[]  labels, same order
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Exec;

pub const CLASSES: usize = 3;
pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_SCALE: f64 = 0.1;
pub const MIN_CLIENT_SAMPLES: usize = 30;

/// Per-class counts (nevus, benign keratosis, melanoma) of the four
/// benchmark clients.
pub const BENCHMARK_COUNTS: [[usize; 3]; 4] = [
    [1832, 475, 680],
    [3720, 124, 24],
    [803, 490, 342],
    [1372, 254, 374],
];

/// Size of the unseen evaluation cohort.
pub const OOD_COUNT: usize = 427;

/// Train/val/test ratio.
pub const SPLIT_RATIO: [f64; 3] = [0.7, 0.1, 0.2];

/// Radius of the class wheel in every coordinate pair.
const PROTOTYPE_RADIUS: f64 = 0.6;

const PROTOTYPE_STREAM: u64 = 0x5eed_c1a5_5000_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub rotation_deg: f64,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl FeatureTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation_deg: 0.0,
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }

    /// The documented transform family, indexed by a real "distance" `k`
    /// (0 for the reference client): rotation `angle`, odd dimensions scaled
    /// by `1 + 0.1 k`, shift `0.25 k` with sign pattern `+ + - -` over
    /// dimensions.
    pub fn family(dim: usize, k: f64, angle_deg: f64) -> Self {
        Self {
            rotation_deg: angle_deg,
            scale: (0..dim).map(|j| if j % 2 == 1 { 1.0 + 0.1 * k } else { 1.0 }).collect(),
            shift: (0..dim)
                .map(|j| if j % 4 < 2 { 0.25 * k } else { -0.25 * k })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// `x = R(theta) (scale * z) + shift`, rotating each pair `(2i, 2i + 1)`.
    pub fn apply(&self, z: &mut [f64]) {
        for (v, s) in z.iter_mut().zip(&self.scale) {
            *v *= s;
        }
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        for pair in z.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = cos * a - sin * b;
            pair[1] = sin * a + cos * b;
        }
        for (v, s) in z.iter_mut().zip(&self.shift) {
            *v += s;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub name: String,
    pub samples: usize,
    pub proportions: [f64; CLASSES],
    pub transform: FeatureTransform,
    pub seed: u64,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.samples < MIN_CLIENT_SAMPLES {
            return Err(Error::InvalidScale(format!(
                "client {} has {} samples, fewer than {MIN_CLIENT_SAMPLES}",
                self.name, self.samples
            )));
        }
        let sum: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDataset(format!(
                "client {} proportions {:?} do not form a distribution",
                self.name, self.proportions
            )));
        }
        if self.transform.shift.len() != self.transform.dim() {
            return Err(Error::InvalidDataset(format!(
                "client {} transform has mismatched scale/shift lengths",
                self.name
            )));
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        largest_remainder(self.samples, &self.proportions)
    }
}

/// Distributes `total` over `weights` (summing to 1) by largest remainder;
/// ties go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut out: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

fn proportions_of(counts: &[usize; 3]) -> [f64; 3] {
    let total: usize = counts.iter().sum();
    counts.map(|c| c as f64 / total as f64)
}

/// The four benchmark-shaped clients at `scale` of the original sizes, with
/// rotations 0, 25, 50, 75 degrees and the [`FeatureTransform::family`]
/// scales and shifts.
pub fn default_profiles(scale: f64) -> Result<Vec<ClientProfile>> {
    default_profiles_with_dim(scale, DEFAULT_DIM)
}

pub fn default_profiles_with_dim(scale: f64, dim: usize) -> Result<Vec<ClientProfile>> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidScale(format!("scale {scale} outside (0, 1]")));
    }
    let names = ["A", "B", "C", "D"];
    let profiles: Vec<ClientProfile> = BENCHMARK_COUNTS
        .iter()
        .enumerate()
        .map(|(k, counts)| {
            let total: usize = counts.iter().sum();
            ClientProfile {
                name: names[k].into(),
                samples: round_half_up(scale * total as f64),
                proportions: proportions_of(counts),
                transform: FeatureTransform::family(dim, k as f64, 25.0 * k as f64),
                seed: 1000 + k as u64,
            }
        })
        .collect();
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

/// Held-out client outside the training clients' transform range (110
/// degrees), with the pooled benchmark class mix.
pub fn ood_profile(scale: f64, dim: usize) -> Result<ClientProfile> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidScale(format!("scale {scale} outside (0, 1]")));
    }
    let mut pooled = [0usize; 3];
    for counts in &BENCHMARK_COUNTS {
        for (p, c) in pooled.iter_mut().zip(counts) {
            *p += c;
        }
    }
    let p = ClientProfile {
        name: "OOD".into(),
        samples: round_half_up(scale * OOD_COUNT as f64).max(MIN_CLIENT_SAMPLES),
        proportions: proportions_of(&pooled),
        transform: FeatureTransform::family(dim, 4.4, 110.0),
        seed: 9000,
    };
    p.validate()?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    /// `None` when loaded from a file.
    pub profile: Option<ClientProfile>,
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientDataset {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn samples(&self, split: Split) -> Samples {
        self.gather(self.indices(split))
    }

    pub fn all(&self) -> Samples {
        Samples {
            dim: self.dim,
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    fn gather(&self, idx: &[usize]) -> Samples {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(&self.features[i * self.dim..(i + 1) * self.dim]);
        }
        Samples {
            dim: self.dim,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederatedDataset {
    pub dim: usize,
    pub classes: usize,
    pub clients: Vec<ClientDataset>,
}

/// SplitMix64 finalizer over the combined words; derives independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shared class prototypes for a global seed.
pub fn class_prototypes(global_seed: u64, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(global_seed, PROTOTYPE_STREAM));
    let phases: Vec<f64> = (0..dim.div_ceil(2))
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    (0..CLASSES)
        .map(|c| {
            let turn = std::f64::consts::TAU * c as f64 / CLASSES as f64;
            (0..dim)
                .map(|j| {
                    let a = phases[j / 2] + turn;
                    PROTOTYPE_RADIUS * if j % 2 == 0 { a.cos() } else { a.sin() }
                })
                .collect()
        })
        .collect()
}

/// Allocates per-class counts to train/val/test so that each split total is
/// the largest-remainder share of the client total and every cell is within
/// one of its proportional ideal. Returns `alloc[class][split]`.
pub fn stratified_allocation(class_counts: &[usize]) -> Vec<[usize; 3]> {
    let total: usize = class_counts.iter().sum();
    let split_totals = largest_remainder(total, &SPLIT_RATIO);
    let mut alloc: Vec<[usize; 3]> = class_counts
        .iter()
        .map(|&n| SPLIT_RATIO.map(|w| (w * n as f64).floor() as usize))
        .collect();
    let mut row_left: Vec<usize> = class_counts
        .iter()
        .zip(&alloc)
        .map(|(&n, a)| n - a.iter().sum::<usize>())
        .collect();
    let mut col_left: Vec<usize> = (0..3)
        .map(|s| split_totals[s] - alloc.iter().map(|a| a[s]).sum::<usize>())
        .collect();

    // Gale–Ryser style greedy: classes with the most leftover units first,
    // each unit to the distinct split with the largest remaining demand.
    let mut classes: Vec<usize> = (0..class_counts.len()).collect();
    classes.sort_by(|&a, &b| row_left[b].cmp(&row_left[a]).then(a.cmp(&b)));
    for c in classes {
        let mut splits: Vec<usize> = (0..3).collect();
        splits.sort_by(|&a, &b| {
            col_left[b].cmp(&col_left[a]).then_with(|| {
                let fa = SPLIT_RATIO[a] * class_counts[c] as f64;
                let fb = SPLIT_RATIO[b] * class_counts[c] as f64;
                (fb - fb.floor()).total_cmp(&(fa - fa.floor())).then(a.cmp(&b))
            })
        });
        for &s in splits.iter().take(row_left[c]) {
            if col_left[s] > 0 {
                alloc[c][s] += 1;
                col_left[s] -= 1;
            }
        }
        row_left[c] = 0;
    }
    alloc
}

fn synth_client(profile: &ClientProfile, prototypes: &[Vec<f64>], global_seed: u64) -> ClientDataset {
    let dim = profile.transform.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(global_seed, profile.seed));
    let counts = profile.class_counts();
    let mut features = Vec::with_capacity(profile.samples * dim);
    let mut labels = Vec::with_capacity(profile.samples);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let mut z: Vec<f64> = prototypes[c]
                .iter()
                .map(|mu| mu + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            profile.transform.apply(&mut z);
            by_class[c].push(labels.len());
            features.extend_from_slice(&z);
            labels.push(c);
        }
    }

    let alloc = stratified_allocation(&counts);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let [a, b, _] = alloc[c];
        train.extend_from_slice(&idx[..a]);
        val.extend_from_slice(&idx[a..a + b]);
        test.extend_from_slice(&idx[a + b..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    ClientDataset {
        profile: Some(profile.clone()),
        dim,
        classes: CLASSES,
        features,
        labels,
        train,
        val,
        test,
    }
}

/// Deterministic in `(profiles, global_seed)`. A client's samples depend
/// only on its own profile and the shared prototypes.
pub fn synth(profiles: &[ClientProfile], global_seed: u64) -> Result<FederatedDataset> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::InvalidDataset("no client profiles".into()))?;
    let dim = first.transform.dim();
    for p in profiles {
        p.validate()?;
        if p.transform.dim() != dim {
            return Err(Error::InvalidDataset("profiles disagree on feature dimension".into()));
        }
    }
    let prototypes = class_prototypes(global_seed, dim);
    let clients = Exec::Parallel.map(profiles, |_, p| synth_client(p, &prototypes, global_seed));
    Ok(FederatedDataset {
        dim,
        classes: CLASSES,
        clients,
    })
}

/// Held-out evaluation client for the same prototypes as
/// [`synth`]`(profiles, global_seed)`.
pub fn ood_client(profiles: &[ClientProfile], global_seed: u64) -> Result<ClientDataset> {
    let dim = profiles.first().map_or(DEFAULT_DIM, |p| p.transform.dim());
    let scale = profiles
        .iter()
        .zip(&BENCHMARK_COUNTS)
        .map(|(p, c)| p.samples as f64 / c.iter().sum::<usize>() as f64)
        .next()
        .unwrap_or(DEFAULT_SCALE)
        .clamp(f64::MIN_POSITIVE, 1.0);
    let profile = ood_profile(scale, dim)?;
    Ok(synth_client(&profile, &class_prototypes(global_seed, dim), global_seed))
}

const MAGIC: &[u8; 4] = b"FSD1";

pub fn encode_fsd(client: &ClientDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + client.len() * (client.dim * 8 + 4));
    out.extend_from_slice(MAGIC);
    for v in [client.dim, client.classes, client.train.len(), client.val.len(), client.test.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let order: Vec<usize> = [&client.train, &client.val, &client.test]
        .into_iter()
        .flatten()
        .copied()
        .collect();
    for &i in &order {
        for v in &client.features[i * client.dim..(i + 1) * client.dim] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &i in &order {
        out.extend_from_slice(&(client.labels[i] as u32).to_le_bytes());
    }
    out
}

pub fn decode_fsd(bytes: &[u8]) -> Result<ClientDataset> {
    let bad = |msg: &str| Error::InvalidDataset(format!("FSD1: {msg}"));
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (dim, classes, n_train, n_val, n_test) = (word(0), word(1), word(2), word(3), word(4));
    let n = n_train + n_val + n_test;
    if dim == 0 || classes == 0 || bytes.len() != 24 + n * (dim * 8 + 4) {
        return Err(bad("body length does not match header"));
    }
    let feat_end = 24 + n * dim * 8;
    let features = bytes[24..feat_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels: Vec<usize> = bytes[feat_end..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if labels.iter().any(|&y| y >= classes) {
        return Err(bad("label out of range"));
    }
    Ok(ClientDataset {
        profile: None,
        dim,
        classes,
        features,
        labels,
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
    })
}

pub fn write_fsd(path: &Path, client: &ClientDataset) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_fsd(client)).map_err(|e| Error::io(path, e))
}

pub fn read_fsd(path: &Path) -> Result<ClientDataset> {
    decode_fsd(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
