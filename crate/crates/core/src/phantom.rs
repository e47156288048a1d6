//! Synthetic pre/post-contrast phantoms.
//!
//! Each case holds non-overlapping ellipsoids of three tissue types on a
//! uniform background:
//!
//! | tissue | pre  | enhancement | post |
//! |--------|------|-------------|------|
//! | lesion | 0.30 | ×2.2        | 0.66 |
//! | gland  | 0.55 | ×1.2        | 0.66 |
//! | cyst   | 0.10 | ×1.0        | 0.10 |
//!
//! Lesion and gland are indistinguishable in the post-contrast volume alone
//! but separate cleanly once the pre-contrast volume is available.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const LESION: u8 = 1;
pub const CYST: u8 = 2;
pub const GLAND: u8 = 3;

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// `(D, H, W)`.
    pub size: [usize; 3],
    pub lesion_count: CountRange,
    pub cyst_count: CountRange,
    pub gland_count: CountRange,
    /// Base ellipsoid radius in voxels, `[min, max)`.
    pub radius_range: [f64; 2],
    /// Per-axis multiplier applied to the base radius, `[min, max)`.
    pub axis_ratio_range: [f64; 2],
    pub background: f64,
    pub lesion_pre: f64,
    pub gland_pre: f64,
    pub cyst_pre: f64,
    pub lesion_enhancement: f64,
    pub gland_enhancement: f64,
    pub cyst_enhancement: f64,
    pub background_enhancement: f64,
    pub noise_sigma: f64,
    /// Passes of 3×3×3 box blur applied before noise.
    pub smoothing_passes: usize,
    pub max_attempts: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [32, 32, 32],
            lesion_count: CountRange::new(1, 3),
            cyst_count: CountRange::new(1, 3),
            gland_count: CountRange::new(1, 3),
            radius_range: [3.0, 6.0],
            axis_ratio_range: [0.6, 1.4],
            background: 0.20,
            lesion_pre: 0.30,
            gland_pre: 0.55,
            cyst_pre: 0.10,
            lesion_enhancement: 2.2,
            gland_enhancement: 1.2,
            cyst_enhancement: 1.0,
            background_enhancement: 1.0,
            noise_sigma: 0.03,
            smoothing_passes: 1,
            max_attempts: 1000,
        }
    }
}

impl PhantomSpec {
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) {
            return Err(Error::Config("phantom size must be positive".into()));
        }
        for (name, r) in [
            ("lesion_count", self.lesion_count),
            ("cyst_count", self.cyst_count),
            ("gland_count", self.gland_count),
        ] {
            if r.min > r.max {
                return Err(Error::Config(format!("{name}: min exceeds max")));
            }
        }
        let [rmin, rmax] = self.radius_range;
        let [amin, amax] = self.axis_ratio_range;
        if !(rmin > 0.0 && rmin <= rmax && amin > 0.0 && amin <= amax) {
            return Err(Error::Config(
                "radius and axis-ratio ranges must be positive and ordered".into(),
            ));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    fn tissue(&self, label: u8) -> (f64, f64) {
        match label {
            LESION => (self.lesion_pre, self.lesion_enhancement),
            CYST => (self.cyst_pre, self.cyst_enhancement),
            GLAND => (self.gland_pre, self.gland_enhancement),
            _ => (self.background, self.background_enhancement),
        }
    }

    fn voxels(&self) -> usize {
        self.size.iter().product()
    }
}

/// Integer label volume `[D, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn mask(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == label).collect()
    }

    /// Lesion-vs-rest training target.
    pub fn lesion_target(&self) -> Vec<u8> {
        self.data.iter().map(|&l| u8::from(l == LESION)).collect()
    }
}

/// One phantom case. `pre` and `post` are `[1, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pre: Tensor<f32>,
    pub post: Tensor<f32>,
    pub labels: LabelVolume,
}

#[derive(Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3], grow: f64) -> bool {
        let acc: f64 = (0..3)
            .map(|a| {
                let d = (p[a] as f64 - self.center[a]) / (self.radii[a] + grow);
                d * d
            })
            .sum();
        acc <= 1.0
    }

    /// Inclusive voxel bounding box, clamped to the volume.
    fn bounds(&self, size: [usize; 3], grow: f64) -> [(usize, usize); 3] {
        let mut b = [(0, 0); 3];
        for a in 0..3 {
            let r = self.radii[a] + grow;
            let lo = (self.center[a] - r).floor().max(0.0) as usize;
            let hi = ((self.center[a] + r).ceil() as usize).min(size[a] - 1);
            b[a] = (lo, hi);
        }
        b
    }
}

fn idx(size: [usize; 3], p: [usize; 3]) -> usize {
    (p[0] * size[1] + p[1]) * size[2] + p[2]
}

/// Visits every voxel inside `e` (grown by `grow`).
fn for_each_voxel(
    e: &Ellipsoid,
    size: [usize; 3],
    grow: f64,
    mut f: impl FnMut(usize) -> bool,
) -> bool {
    let [(z0, z1), (y0, y1), (x0, x1)] = e.bounds(size, grow);
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains([z, y, x], grow) && !f(idx(size, [z, y, x])) {
                    return false;
                }
            }
        }
    }
    true
}

fn place(
    spec: &PhantomSpec,
    labels: &mut [u8],
    label: u8,
    kind: &'static str,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let size = spec.size;
    for _ in 0..spec.max_attempts {
        let base = rng.random_range(spec.radius_range[0]..=spec.radius_range[1]);
        let mut radii = [0.0; 3];
        for r in &mut radii {
            *r = base * rng.random_range(spec.axis_ratio_range[0]..=spec.axis_ratio_range[1]);
        }
        // Keep one voxel of margin to the border.
        let mut center = [0.0; 3];
        let mut fits = true;
        for a in 0..3 {
            let lo = radii[a] + 1.0;
            let hi = size[a] as f64 - 2.0 - radii[a];
            if hi < lo {
                fits = false;
                break;
            }
            center[a] = rng.random_range(lo..=hi);
        }
        if !fits {
            continue;
        }
        let e = Ellipsoid { center, radii };
        // Objects stay at least one voxel apart.
        let free = for_each_voxel(&e, size, 1.0, |i| labels[i] == BACKGROUND);
        if !free {
            continue;
        }
        let mut painted = 0;
        for_each_voxel(&e, size, 0.0, |i| {
            labels[i] = label;
            painted += 1;
            true
        });
        if painted > 0 {
            return Ok(());
        }
    }
    Err(Error::Placement {
        kind,
        attempts: spec.max_attempts,
    })
}

/// One pass of 3×3×3 mean filtering over in-bounds neighbours.
pub fn box_blur(data: &[f64], size: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = size;
    let mut out = vec![0.0; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0usize;
                for zz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            sum += data[idx(size, [zz, yy, xx])];
                            n += 1;
                        }
                    }
                }
                out[idx(size, [z, y, x])] = sum / n as f64;
            }
        }
    }
    out
}

/// Generates one case. Deterministic in `(spec, seed)`.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.size;
    let mut labels = vec![BACKGROUND; spec.voxels()];

    let lesions = spec.lesion_count.sample(&mut rng);
    let cysts = spec.cyst_count.sample(&mut rng);
    let glands = spec.gland_count.sample(&mut rng);
    for _ in 0..lesions {
        place(spec, &mut labels, LESION, "lesion", &mut rng)?;
    }
    for _ in 0..cysts {
        place(spec, &mut labels, CYST, "cyst", &mut rng)?;
    }
    for _ in 0..glands {
        place(spec, &mut labels, GLAND, "gland", &mut rng)?;
    }

    let mut pre: Vec<f64> = labels.iter().map(|&l| spec.tissue(l).0).collect();
    let mut post: Vec<f64> = labels
        .iter()
        .map(|&l| {
            let (band, factor) = spec.tissue(l);
            band * factor
        })
        .collect();
    for _ in 0..spec.smoothing_passes {
        pre = box_blur(&pre, size);
        post = box_blur(&post, size);
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in pre.iter_mut().chain(post.iter_mut()) {
            *v += noise.sample(&mut rng);
        }
    }
    let to_tensor = |v: Vec<f64>| {
        let data = v.into_iter().map(|x| x.clamp(0.0, 2.0) as f32).collect();
        Tensor::new(vec![1, size[0], size[1], size[2]], data)
    };
    Ok(Sample {
        pre: to_tensor(pre)?,
        post: to_tensor(post)?,
        labels: LabelVolume {
            dims: size,
            data: labels,
        },
    })
}

/// Voxelwise `post - pre`, unclipped.
pub fn subtraction(pre: &Tensor<f32>, post: &Tensor<f32>) -> Result<Tensor<f32>> {
    if pre.shape() != post.shape() {
        return Err(Error::shape("subtraction", "volume", post.len(), pre.len()));
    }
    let data = post
        .data()
        .iter()
        .zip(pre.data())
        .map(|(a, b)| a - b)
        .collect();
    Tensor::new(post.shape().to_vec(), data)
}

/// Seed of case `index` within a dataset generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    crate::seed::derive(seed, index as u64)
}

/// Mean of `values` over voxels where `mask` holds.
pub fn masked_mean(values: &[f32], mask: &[bool]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&v, &m) in values.iter().zip(mask) {
        if m {
            sum += v as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let spec = PhantomSpec::default();
        assert_eq!(generate(&spec, 11).unwrap(), generate(&spec, 11).unwrap());
        assert_ne!(generate(&spec, 11).unwrap(), generate(&spec, 12).unwrap());
    }

    #[test]
    fn zero_lesions_gives_empty_target() {
        let spec = PhantomSpec {
            lesion_count: CountRange::new(0, 0),
            ..PhantomSpec::default()
        };
        for seed in 0..5 {
            let s = generate(&spec, seed).unwrap();
            assert!(s.labels.lesion_target().iter().all(|&t| t == 0));
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let spec = PhantomSpec {
            size: [8, 8, 8],
            lesion_count: CountRange::new(3, 3),
            radius_range: [3.0, 3.0],
            axis_ratio_range: [1.0, 1.0],
            max_attempts: 50,
            ..PhantomSpec::default()
        };
        assert!(matches!(
            generate(&spec, 0),
            Err(Error::Placement { kind: "lesion", .. })
        ));
    }

    #[test]
    fn values_stay_in_range_and_regions_present() {
        let spec = PhantomSpec::default();
        for seed in 0..10 {
            let s = generate(&spec, seed).unwrap();
            assert!(s
                .pre
                .data()
                .iter()
                .chain(s.post.data())
                .all(|&v| (0.0..=2.0).contains(&v)));
            for label in [LESION, CYST, GLAND] {
                assert!(
                    s.labels.data.contains(&label),
                    "seed {seed} missing label {label}"
                );
            }
            assert!(s.labels.data.iter().all(|&l| l <= GLAND));
        }
    }

    #[test]
    fn subtraction_antisymmetric_and_zero_on_equal() {
        let s = generate(&PhantomSpec::default(), 3).unwrap();
        let ab = subtraction(&s.pre, &s.post).unwrap();
        let ba = subtraction(&s.post, &s.pre).unwrap();
        assert_eq!(ab, ba.map(|v| -v));
        assert!(subtraction(&s.pre, &s.pre)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let other = Tensor::zeros(vec![1, 4, 4, 4]);
        assert!(subtraction(&s.pre, &other).is_err());
    }

    #[test]
    fn noiseless_subtraction_signs() {
        let spec = PhantomSpec::default().noiseless();
        let s = generate(&spec, 5).unwrap();
        let sub = subtraction(&s.pre, &s.post).unwrap();
        let mean = |label| masked_mean(sub.data(), &s.labels.mask(label)).unwrap();
        assert!(mean(LESION) > 0.2);
        assert!(mean(GLAND) > 0.05);
        // Blur lets enhancing neighbours leak into cyst and background edges,
        // so these are near zero rather than exactly zero.
        assert!(mean(CYST).abs() < 0.05);
        assert!(mean(BACKGROUND).abs() < 0.05);
    }

    #[test]
    fn case_seeds_differ() {
        let seeds: std::collections::BTreeSet<u64> = (0..1000).map(|i| case_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
