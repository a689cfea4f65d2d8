//! Multimodal samples, availability masking, nested-region hierarchies and
//! synthetic phantom generation.
//!
//! A phantom is a stack of concentric, jittered ellipsoid shells: label `l`
//! occupies the voxels inside shell `l` but outside shell `l+1`, so labels
//! `1..C-1` form strictly nested regions. Each modality renders only the
//! labels in its visibility set at a distinct intensity level, plus Gaussian
//! noise; modalities differ in which boundaries they can actually see, which
//! is what makes gating and missing-modality evaluation informative.

pub mod container;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, CloeError, Result};
use crate::real::Real;
use crate::rng::{stream, STREAM_PHANTOM};
use crate::tensor::{LabelVolume, Tensor};

// ── availability ────────────────────────────────────────────────────────

/// Per-sample modality availability. At least one modality must be present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AvailabilityMask {
    bits: Vec<bool>,
}

impl AvailabilityMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(CloeError::EmptyMask);
        }
        Ok(AvailabilityMask { bits })
    }

    pub fn full(m: usize) -> Self {
        AvailabilityMask { bits: vec![true; m] }
    }

    /// Mask from the low `m` bits of `value` (bit `i` = modality `i`).
    pub fn from_bits(value: u32, m: usize) -> Result<Self> {
        Self::new((0..m).map(|i| value >> i & 1 == 1).collect())
    }

    /// All 2^m - 1 nonempty masks, ordered by subset size then bit value.
    pub fn enumerate_nonempty(m: usize) -> Vec<AvailabilityMask> {
        let mut all: Vec<u32> = (1..(1u32 << m)).collect();
        all.sort_by_key(|v| (v.count_ones(), *v));
        all.into_iter().map(|v| Self::from_bits(v, m).expect("nonzero")).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one modality
    }

    pub fn is_available(&self, m: usize) -> bool {
        self.bits[m]
    }

    pub fn available(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// String form, modality 0 first: `[t,f,t,t]` renders as `"1011"`.
    pub fn as_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

// ── samples ─────────────────────────────────────────────────────────────

/// Co-registered multimodal volumes plus a label volume.
#[derive(Clone, Debug)]
pub struct MultimodalSample<T = f32> {
    pub id: String,
    volumes: Vec<Tensor<T>>,
    labels: LabelVolume,
}

impl<T: Real> MultimodalSample<T> {
    pub fn new(id: String, volumes: Vec<Tensor<T>>, labels: LabelVolume) -> Result<Self> {
        let [d, h, w] = labels.shape();
        if volumes.is_empty() {
            return Err(shape_err("sample needs at least one modality"));
        }
        for (m, v) in volumes.iter().enumerate() {
            if v.shape() != [1, d, h, w] {
                return Err(shape_err(format!(
                    "modality {m}: volume shape {:?} does not match labels [1,{d},{h},{w}]",
                    v.shape()
                )));
            }
        }
        Ok(MultimodalSample { id, volumes, labels })
    }

    pub fn modalities(&self) -> usize {
        self.volumes.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.shape()
    }

    pub fn volume(&self, m: usize) -> &Tensor<T> {
        &self.volumes[m]
    }

    pub fn volumes(&self) -> &[Tensor<T>] {
        &self.volumes
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    /// Zero-fill the volumes of unavailable modalities; available ones are
    /// returned unchanged. Idempotent.
    pub fn apply_mask(&self, mask: &AvailabilityMask) -> Result<MultimodalSample<T>> {
        if mask.len() != self.volumes.len() {
            return Err(shape_err(format!(
                "mask covers {} modalities, sample has {}",
                mask.len(),
                self.volumes.len()
            )));
        }
        let volumes = self
            .volumes
            .iter()
            .enumerate()
            .map(|(m, v)| if mask.is_available(m) { v.clone() } else { Tensor::zeros(v.shape()) })
            .collect();
        Ok(MultimodalSample { id: self.id.clone(), volumes, labels: self.labels.clone() })
    }

    pub fn cast<U: Real>(&self) -> MultimodalSample<U> {
        MultimodalSample {
            id: self.id.clone(),
            volumes: self.volumes.iter().map(|v| v.cast()).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Mirror the sample along the chosen spatial axes (labels included).
    pub fn flipped(&self, flip: [bool; 3]) -> MultimodalSample<T> {
        let [d, h, w] = self.labels.shape();
        let map = |z: usize, y: usize, x: usize| -> (usize, usize, usize) {
            (
                if flip[0] { d - 1 - z } else { z },
                if flip[1] { h - 1 - y } else { y },
                if flip[2] { w - 1 - x } else { x },
            )
        };
        let volumes = self
            .volumes
            .iter()
            .map(|v| {
                let src = v.data();
                let mut out = vec![T::ZERO; src.len()];
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let (sz, sy, sx) = map(z, y, x);
                            out[(z * h + y) * w + x] = src[(sz * h + sy) * w + sx];
                        }
                    }
                }
                Tensor::new(v.shape(), out).expect("same shape")
            })
            .collect();
        let mut lab = vec![0u8; self.labels.numel()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (sz, sy, sx) = map(z, y, x);
                    lab[(z * h + y) * w + x] = self.labels.data()[(sz * h + sy) * w + sx];
                }
            }
        }
        MultimodalSample {
            id: self.id.clone(),
            volumes,
            labels: LabelVolume::new([d, h, w], lab).expect("same shape"),
        }
    }
}

// ── nested region hierarchy ─────────────────────────────────────────────

/// Ordered nested evaluation regions, each a set of label values. Region
/// `k+1`'s label set must be a subset of region `k`'s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionHierarchy {
    regions: Vec<(String, Vec<u8>)>,
}

impl RegionHierarchy {
    pub fn new(regions: Vec<(String, Vec<u8>)>) -> Result<Self> {
        if regions.is_empty() {
            return Err(CloeError::Config("hierarchy needs at least one region".into()));
        }
        for win in regions.windows(2) {
            let (outer, inner) = (&win[0].1, &win[1].1);
            if !inner.iter().all(|l| outer.contains(l)) {
                return Err(CloeError::Config(format!(
                    "region '{}' is not nested inside region '{}'",
                    win[1].0, win[0].0
                )));
            }
        }
        Ok(RegionHierarchy { regions })
    }

    /// Nested shells for `classes` labels: all foreground, then successively
    /// inner label sets, down to the innermost label alone.
    pub fn nested_shells(classes: usize) -> Self {
        let mut regions = Vec::new();
        let names = ["whole", "core", "inner"];
        for k in 1..classes {
            let labels: Vec<u8> = (k..classes).map(|l| l as u8).collect();
            let name = names
                .get(k - 1)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("region{k}"));
            regions.push((name, labels));
        }
        RegionHierarchy::new(regions).expect("construction is nested")
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.regions.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn labels(&self, k: usize) -> &[u8] {
        &self.regions[k].1
    }

    /// One binary volume per region: true where the voxel's label belongs to
    /// the region's label set.
    pub fn region_masks(&self, labels: &LabelVolume, classes: usize) -> Result<Vec<Vec<bool>>> {
        if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= classes) {
            return Err(shape_err(format!("label {bad} outside 0..{classes}")));
        }
        Ok(self
            .regions
            .iter()
            .map(|(_, set)| labels.data().iter().map(|l| set.contains(l)).collect())
            .collect())
    }
}

// ── phantom generation ──────────────────────────────────────────────────

/// Geometry and rendering parameters for the synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub modalities: usize,
    pub classes: usize,
    /// Per modality: which labels render with contrast.
    pub visibility: Vec<Vec<u8>>,
    pub noise_sd: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let modalities = 4;
        let classes = 4;
        PhantomConfig {
            dims: [32, 32, 32],
            modalities,
            classes,
            visibility: default_visibility(modalities, classes),
            noise_sd: 0.05,
            count: 16,
            seed: 7,
        }
    }
}

/// Asymmetric visibility in the style of multi-contrast MRI: modality 0 sees
/// every region, modality 1 the inner ones, modality 2 only the outermost,
/// modality 3 only the innermost; further modalities see everything.
pub fn default_visibility(modalities: usize, classes: usize) -> Vec<Vec<u8>> {
    let all: Vec<u8> = (1..classes).map(|l| l as u8).collect();
    let inner: Vec<u8> = (2..classes).map(|l| l as u8).collect();
    (0..modalities)
        .map(|m| match m {
            0 => all.clone(),
            1 if !inner.is_empty() => inner.clone(),
            2 => vec![1],
            3 => vec![(classes - 1) as u8],
            _ => all.clone(),
        })
        .collect()
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(CloeError::Config(format!("dims {:?} must be >= 16", self.dims)));
        }
        if self.modalities < 2 {
            return Err(CloeError::Config("need at least 2 modalities".into()));
        }
        if self.classes < 2 {
            return Err(CloeError::Config("need at least 2 classes".into()));
        }
        if self.visibility.len() != self.modalities {
            return Err(CloeError::Config(format!(
                "visibility has {} entries for {} modalities",
                self.visibility.len(),
                self.modalities
            )));
        }
        for (m, set) in self.visibility.iter().enumerate() {
            if set.is_empty() {
                return Err(CloeError::Config(format!("modality {m} sees no region")));
            }
            if set.iter().any(|&l| l == 0 || l as usize >= self.classes) {
                return Err(CloeError::Config(format!(
                    "modality {m}: visibility labels must be in 1..{}",
                    self.classes
                )));
            }
        }
        if self.count == 0 {
            return Err(CloeError::Config("count must be positive".into()));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        let mut q = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.semi[a];
            q += t * t;
        }
        q <= 1.0
    }
}

const BACKGROUND_LEVEL: f64 = 0.15;

fn label_level(label: u8, classes: usize) -> f64 {
    0.3 + 0.6 * label as f64 / (classes - 1) as f64
}

/// Deterministic synthetic dataset. Per-sample RNG seed is `cfg.seed ^ i`, so
/// samples can be generated independently and in any order.
pub fn gen_phantoms(cfg: &PhantomConfig) -> Result<Vec<MultimodalSample<f32>>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| gen_one(cfg, i)).collect()
}

fn gen_one(cfg: &PhantomConfig, index: usize) -> Result<MultimodalSample<f32>> {
    let mut rng = stream(cfg.seed ^ index as u64, STREAM_PHANTOM);
    let [d, h, w] = cfg.dims;
    let shells = cfg.classes - 1;
    let voxels = d * h * w;

    // Geometry: retry with fresh jitter until every shell is populated and
    // the foreground fraction lands in [0.02, 0.15].
    let mut labels = None;
    for _attempt in 0..100 {
        let dims_f = [d as f64, h as f64, w as f64];
        let center: Vec<f64> =
            dims_f.iter().map(|&n| n / 2.0 + rng.gen_range(-n / 10.0..n / 10.0)).collect();
        let outer: Vec<f64> = dims_f.iter().map(|&n| n * rng.gen_range(0.22..0.30)).collect();

        let mut ellipsoids = Vec::with_capacity(shells);
        for s in 0..shells {
            let base = if shells == 1 { 1.0 } else { 1.0 - 0.6 * s as f64 / (shells - 1) as f64 };
            let semi: Vec<f64> = outer
                .iter()
                .map(|&a| {
                    let frac = if s == 0 { 1.0 } else { (base + rng.gen_range(-0.06..0.06)).max(0.15) };
                    (a * frac).max(1.2)
                })
                .collect();
            ellipsoids.push(Ellipsoid {
                center: [center[0], center[1], center[2]],
                semi: [semi[0], semi[1], semi[2]],
            });
        }
        // Monotone semi-axes keep the shells strictly nested.
        for s in 1..shells {
            for a in 0..3 {
                let cap = ellipsoids[s - 1].semi[a] * 0.88;
                if ellipsoids[s].semi[a] > cap {
                    ellipsoids[s].semi[a] = cap;
                }
            }
        }

        let mut lab = vec![0u8; voxels];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    // innermost containing shell wins
                    for s in (0..shells).rev() {
                        if ellipsoids[s].contains(z, y, x) {
                            lab[(z * h + y) * w + x] = (s + 1) as u8;
                            break;
                        }
                    }
                }
            }
        }
        let mut counts = vec![0usize; cfg.classes];
        for &l in &lab {
            counts[l as usize] += 1;
        }
        let foreground: usize = counts[1..].iter().sum();
        let frac = foreground as f64 / voxels as f64;
        let every_shell_populated = counts[1..].iter().all(|&c| c >= 8);
        if every_shell_populated && (0.02..=0.15).contains(&frac) {
            labels = Some(lab);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        CloeError::Numerical(format!(
            "phantom {index}: no valid geometry after 100 attempts (seed {})",
            cfg.seed
        ))
    })?;

    // Rendering: visible labels at distinct levels, then noise, then
    // per-volume min-max normalization to [0, 1].
    let noise = if cfg.noise_sd > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sd).map_err(|e| CloeError::Config(e.to_string()))?)
    } else {
        None
    };
    let mut volumes = Vec::with_capacity(cfg.modalities);
    for m in 0..cfg.modalities {
        let visible = &cfg.visibility[m];
        let mut vol = vec![0f32; voxels];
        for (v, &l) in vol.iter_mut().zip(&labels) {
            let level = if l > 0 && visible.contains(&l) {
                label_level(l, cfg.classes)
            } else {
                BACKGROUND_LEVEL
            };
            let n = noise.map_or(0.0, |dist| dist.sample(&mut rng));
            *v = (level + n) as f32;
        }
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in &vol {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range > 1e-12 {
            for v in &mut vol {
                *v = (*v - lo) / range;
            }
        } else {
            vol.fill(0.5);
        }
        volumes.push(Tensor::new(&[1, d, h, w], vol)?);
    }

    MultimodalSample::new(
        format!("phantom_{index:04}"),
        volumes,
        LabelVolume::new([d, h, w], labels)?,
    )
}

// ── split and augmentation ──────────────────────────────────────────────

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic 80/20 split on the id hash. Guarantees both sides nonempty
/// for datasets of at least two samples.
pub fn split_train_test<T: Real>(
    samples: &[MultimodalSample<T>],
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if fnv1a(s.id.as_bytes()) % 5 == 0 {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    if test.is_empty() && train.len() > 1 {
        test.push(train.pop().expect("nonempty"));
    }
    if train.is_empty() && test.len() > 1 {
        train.push(test.pop().expect("nonempty"));
    }
    (train, test)
}

/// Training augmentation: independent mirror of each spatial axis.
pub fn random_flip<T: Real>(
    sample: &MultimodalSample<T>,
    rng: &mut impl Rng,
) -> MultimodalSample<T> {
    let flip = [rng.gen::<bool>(), rng.gen::<bool>(), rng.gen::<bool>()];
    if flip.iter().any(|&f| f) {
        sample.flipped(flip)
    } else {
        sample.clone()
    }
}

#[cfg(test)]
mod tests;
