//! Synthetic multi-phase contrast-enhanced phantoms and the perturbations
//! used to probe robustness.
//!
//! Each sample is a dark background, an elliptical organ, and up to three
//! elliptical lesions whose contrast depends on the phase: nearly iso in NC,
//! hyper-intense in ART, hypo-intense in PV, and iso with a bright capsule
//! rim in DE.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::tensor_io::{read_tensor_file, write_tensor_file};

pub const GENERATOR_VERSION: u32 = 1;
pub const MIN_SIZE: usize = 16;
/// Consecutive samples grouped into one synthetic case.
pub const SLICES_PER_CASE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "ART")]
    Art,
    #[serde(rename = "PV")]
    Pv,
    #[serde(rename = "DE")]
    De,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Nc, Phase::Art, Phase::Pv, Phase::De];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Nc => "NC",
            Phase::Art => "ART",
            Phase::Pv => "PV",
            Phase::De => "DE",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse(format!("unknown phase {s:?}")))
    }
}

/// One sample: co-registered phase images in `[0, 1]` plus a binary lesion
/// mask, all row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStack {
    pub id: usize,
    pub case_id: usize,
    pub height: usize,
    pub width: usize,
    pub images: BTreeMap<Phase, Vec<f64>>,
    pub mask: Vec<u8>,
}

impl PhaseStack {
    pub fn new(
        id: usize,
        case_id: usize,
        height: usize,
        width: usize,
        images: BTreeMap<Phase, Vec<f64>>,
        mask: Vec<u8>,
    ) -> Result<Self> {
        let px = height * width;
        if images.is_empty() {
            return Err(Error::EmptyFusion);
        }
        if mask.len() != px || images.values().any(|im| im.len() != px) {
            return Err(shape_err(format!("sample {id}: images and mask must be {height}x{width}")));
        }
        if images.values().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("sample {id}: intensities outside [0, 1]")));
        }
        Ok(Self {
            id,
            case_id,
            height,
            width,
            images,
            mask,
        })
    }

    pub fn present(&self) -> Vec<Phase> {
        self.images.keys().copied().collect()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn lesion_pixels(&self) -> usize {
        self.mask.iter().filter(|m| **m != 0).count()
    }
}

/// SplitMix64 finalizer, used to derive per-sample seeds from a run seed.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius; `<= 1` inside.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

const BACKGROUND: f64 = 0.08;
const TEXTURE_SIGMA: f64 = 0.03;
const RIM_OUTER: f64 = 1.35;

/// (organ level, lesion offset from organ) per phase.
fn phase_contrast(phase: Phase) -> (f64, f64) {
    match phase {
        Phase::Nc => (0.45, -0.03),
        Phase::Art => (0.50, 0.35),
        Phase::Pv => (0.60, -0.25),
        Phase::De => (0.50, -0.01),
    }
}
const CAPSULE_OFFSET: f64 = 0.30;

pub fn generate_phantom(count: usize, size: usize, seed: u64) -> Result<Vec<PhaseStack>> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!("phantom size {size} below minimum {MIN_SIZE}")));
    }
    if count == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    (0..count)
        .map(|i| generate_sample(i, size, mix_seed(seed, i as u64)))
        .collect()
}

fn generate_sample(id: usize, size: usize, seed: u64) -> Result<PhaseStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let organ = Ellipse {
        cy: n * rng.random_range(0.45..0.55),
        cx: n * rng.random_range(0.45..0.55),
        ry: n * rng.random_range(0.30..0.40),
        rx: n * rng.random_range(0.32..0.42),
        angle: rng.random_range(-0.5..0.5),
    };
    let n_lesions = rng.random_range(0..=3usize);
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let r = n * rng.random_range(0.08..0.15);
        // keep the lesion centre well inside the organ
        let (cy, cx) = loop {
            let cy = n * rng.random_range(0.2..0.8);
            let cx = n * rng.random_range(0.2..0.8);
            if organ.radius(cy, cx) < 0.6 {
                break (cy, cx);
            }
        };
        lesions.push(Ellipse {
            cy,
            cx,
            ry: r * rng.random_range(0.8..1.2),
            rx: r * rng.random_range(0.8..1.2),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        });
    }
    let jitter: Vec<f64> = Phase::ALL
        .iter()
        .map(|_| 1.0 + rng.random_range(-0.1..0.1))
        .collect();
    let capsule_jitter = 1.0 + rng.random_range(-0.1..0.1);

    let px = size * size;
    let mut mask = vec![0u8; px];
    let mut organ_in = vec![false; px];
    let mut rim = vec![false; px];
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let p = i * size + j;
            organ_in[p] = organ.radius(y, x) <= 1.0;
            let r_min = lesions
                .iter()
                .map(|l| l.radius(y, x))
                .fold(f64::INFINITY, f64::min);
            if r_min <= 1.0 {
                mask[p] = 1;
            } else if r_min <= RIM_OUTER {
                rim[p] = true;
            }
        }
    }

    let noise = Normal::new(0.0, TEXTURE_SIGMA).expect("valid sigma");
    let mut images = BTreeMap::new();
    for phase in Phase::ALL {
        let (organ_level, offset) = phase_contrast(phase);
        let lesion_level = organ_level + offset * jitter[phase.index()];
        let mut img = vec![0.0; px];
        for p in 0..px {
            let base = if mask[p] == 1 {
                lesion_level
            } else if phase == Phase::De && rim[p] {
                organ_level + CAPSULE_OFFSET * capsule_jitter
            } else if organ_in[p] {
                organ_level
            } else {
                BACKGROUND
            };
            img[p] = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        images.insert(phase, img);
    }
    PhaseStack::new(id, id / SLICES_PER_CASE, size, size, images, mask)
}

// ---------------------------------------------------------------------------
// perturbations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Perturbation {
    None,
    /// Additive zero-mean Gaussian noise of the given variance.
    Noise { variance: f64 },
    /// Gaussian blur with kernel variance (pixel²) and odd kernel size.
    Blur { variance: f64, kernel: usize },
    /// Drop this many phases.
    Missing { count: usize },
}

impl Perturbation {
    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::None => "none",
            Perturbation::Noise { .. } => "noise",
            Perturbation::Blur { .. } => "blur",
            Perturbation::Missing { .. } => "missing",
        }
    }

    /// Magnitude used as the x-axis of robustness plots.
    pub fn magnitude(&self) -> f64 {
        match *self {
            Perturbation::None => 0.0,
            Perturbation::Noise { variance } => variance,
            Perturbation::Blur { variance, .. } => variance,
            Perturbation::Missing { count } => count as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::Noise { variance } if !(variance >= 0.0) || !variance.is_finite() => {
                Err(Error::Config(format!("noise variance {variance} must be >= 0")))
            }
            Perturbation::Blur { variance, kernel } => {
                if kernel == 0 || kernel % 2 == 0 {
                    Err(Error::Config(format!("blur kernel {kernel} must be odd and >= 1")))
                } else if !(variance > 0.0) || !variance.is_finite() {
                    Err(Error::Config(format!("blur variance {variance} must be > 0")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::None => write!(f, "none"),
            Perturbation::Noise { variance } => write!(f, "noise:{variance}"),
            Perturbation::Blur { variance, kernel } => write!(f, "blur:{variance},{kernel}"),
            Perturbation::Missing { count } => write!(f, "missing:{count}"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// `none`, `noise:<var>`, `blur:<var>,<k>` or `missing:<count>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed perturbation {s:?}"));
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let p = match kind.trim() {
            "none" if arg.is_empty() => Perturbation::None,
            "noise" => Perturbation::Noise {
                variance: arg.trim().parse().map_err(|_| bad())?,
            },
            "blur" => {
                let (v, k) = arg.split_once(',').ok_or_else(bad)?;
                Perturbation::Blur {
                    variance: v.trim().parse().map_err(|_| bad())?,
                    kernel: k.trim().parse().map_err(|_| bad())?,
                }
            }
            "missing" => Perturbation::Missing {
                count: arg.trim().parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub perturbation: Perturbation,
    pub seed: u64,
}

/// Applies a perturbation; randomness is drawn from `mix_seed(spec.seed, sample.id)`.
pub fn perturb(sample: &PhaseStack, spec: &PerturbSpec) -> Result<PhaseStack> {
    spec.perturbation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, sample.id as u64));
    let mut out = sample.clone();
    match spec.perturbation {
        Perturbation::None => {}
        Perturbation::Noise { variance } => {
            if variance > 0.0 {
                let noise = Normal::new(0.0, variance.sqrt()).expect("valid sigma");
                for img in out.images.values_mut() {
                    for v in img.iter_mut() {
                        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Perturbation::Blur { variance, kernel } => {
            let k = gaussian_kernel(kernel, variance)?;
            for img in out.images.values_mut() {
                *img = blur_separable(img, sample.height, sample.width, &k);
            }
        }
        Perturbation::Missing { count } => {
            let present = sample.present();
            if count >= present.len() {
                return Err(Error::Config(format!(
                    "cannot drop {count} of {} present phases",
                    present.len()
                )));
            }
            for i in index::sample(&mut rng, present.len(), count) {
                out.images.remove(&present[i]);
            }
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian of odd size `k` and variance `variance`.
pub fn gaussian_kernel(k: usize, variance: f64) -> Result<Vec<f64>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("kernel size {k} must be odd and >= 1")));
    }
    if !(variance > 0.0) {
        return Err(Error::Config(format!("kernel variance {variance} must be > 0")));
    }
    let half = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * variance)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn blur_separable(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let half = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * img[i * w + reflect(j as isize + t as isize - half, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect(i as isize + t as isize - half, h) * w + j])
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
    }
    out
}

/// Intensity window: `clamp((x - (level - width/2)) / width, 0, 1)`.
pub fn hu_window(raw: &[f64], level: f64, width: f64) -> Result<Vec<f64>> {
    if !(width > 0.0) {
        return Err(Error::Config(format!("window width {width} must be > 0")));
    }
    let lo = level - width / 2.0;
    Ok(raw.iter().map(|x| ((x - lo) / width).clamp(0.0, 1.0)).collect())
}

/// Nearest-neighbour rotation about the image centre; pixels sampled from
/// outside the image take the nearest edge value.
pub fn rotate_nearest(img: &[f64], h: usize, w: usize, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (i as f64 - cy, j as f64 - cx);
            let sy = (c * y + s * x + cy).round().clamp(0.0, h as f64 - 1.0) as usize;
            let sx = (-s * y + c * x + cx).round().clamp(0.0, w as f64 - 1.0) as usize;
            out[i * w + j] = img[sy * w + sx];
        }
    }
    out
}

/// Rotates every image and the mask of a sample by the same angle.
pub fn rotate_sample(sample: &PhaseStack, degrees: f64) -> PhaseStack {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for img in out.images.values_mut() {
        *img = rotate_nearest(img, h, w, degrees);
    }
    let mask: Vec<f64> = sample.mask.iter().map(|m| *m as f64).collect();
    out.mask = rotate_nearest(&mask, h, w, degrees)
        .into_iter()
        .map(|v| v as u8)
        .collect();
    out
}

// ---------------------------------------------------------------------------
// on-disk dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    pub case_id: usize,
    pub phases: Vec<Phase>,
    pub seed: u64,
    pub generator_version: u32,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub config_hash: String,
    pub samples: Vec<String>,
}

pub fn sample_dir_name(id: usize) -> String {
    format!("sample_{id:05}")
}

/// Writes one sample directory (`mask.tns`, `<phase>.tns`, `meta.json`).
pub fn write_sample(dir: &Path, sample: &PhaseStack, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let shape = vec![sample.height, sample.width];
    let mask = Tensor::new(shape.clone(), sample.mask.iter().map(|m| *m as f64).collect())?;
    write_tensor_file(&dir.join("mask.tns"), &mask)?;
    for (phase, img) in &sample.images {
        let t = Tensor::new(shape.clone(), img.clone())?;
        write_tensor_file(&dir.join(format!("{}.tns", phase.name())), &t)?;
    }
    let meta = SampleMeta {
        id: sample.id,
        case_id: sample.case_id,
        phases: sample.present(),
        seed,
        generator_version: GENERATOR_VERSION,
        height: sample.height,
        width: sample.width,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<PhaseStack> {
    let meta: SampleMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)
        .map_err(|e| Error::Parse(format!("{}: {e}", dir.join("meta.json").display())))?;
    let expect = [meta.height, meta.width];
    let mask_t = read_tensor_file(&dir.join("mask.tns"))?;
    if mask_t.shape() != expect {
        return Err(shape_err(format!("{}: mask shape {:?}", dir.display(), mask_t.shape())));
    }
    let mask = mask_t.data().iter().map(|v| u8::from(*v >= 0.5)).collect();
    let mut images = BTreeMap::new();
    for phase in &meta.phases {
        let t = read_tensor_file(&dir.join(format!("{}.tns", phase.name())))?;
        if t.shape() != expect {
            return Err(shape_err(format!("{}: {} shape {:?}", dir.display(), phase, t.shape())));
        }
        images.insert(*phase, t.into_data());
    }
    PhaseStack::new(meta.id, meta.case_id, meta.height, meta.width, images, mask)
}

pub fn write_dataset(dir: &Path, samples: &[PhaseStack], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in samples {
        write_sample(&dir.join(sample_dir_name(s.id)), s, manifest.seed)?;
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)? + "\n",
    )?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<PhaseStack>)> {
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let samples = manifest
        .samples
        .iter()
        .map(|name| read_sample(&PathBuf::from(dir).join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_where(img: &[f64], mask: &[u8]) -> f64 {
        let (s, n) = img
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m == 1)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        s / n as f64
    }

    #[test]
    fn shape_contract() {
        let s = generate_phantom(1, 32, 7).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].present(), Phase::ALL.to_vec());
        assert!(s[0].images.values().all(|im| im.len() == 32 * 32));
        assert!(s[0].mask.iter().all(|m| *m <= 1));
        assert!(matches!(generate_phantom(1, 8, 7), Err(Error::Config(_))));
        assert!(matches!(generate_phantom(0, 32, 7), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_phantom(5, 24, 11).unwrap(), generate_phantom(5, 24, 11).unwrap());
        assert_ne!(generate_phantom(2, 24, 11).unwrap(), generate_phantom(2, 24, 12).unwrap());
    }

    #[test]
    fn contrast_ordering_holds() {
        let samples = generate_phantom(60, 32, 3).unwrap();
        let with_lesion: Vec<_> = samples.iter().filter(|s| s.lesion_pixels() > 0).collect();
        assert!(with_lesion.len() > 30);
        for s in with_lesion {
            let art = mean_where(&s.images[&Phase::Art], &s.mask);
            let nc = mean_where(&s.images[&Phase::Nc], &s.mask);
            let pv = mean_where(&s.images[&Phase::Pv], &s.mask);
            assert!(art > nc && nc > pv, "sample {}: {art} {nc} {pv}", s.id);
        }
    }

    #[test]
    fn intensities_in_unit_range() {
        for s in generate_phantom(10, 20, 1).unwrap() {
            assert!(s.images.values().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn perturbation_identities() {
        let s = &generate_phantom(1, 24, 5).unwrap()[0];
        let noop = PerturbSpec {
            perturbation: Perturbation::Noise { variance: 0.0 },
            seed: 1,
        };
        assert_eq!(&perturb(s, &noop).unwrap(), s);
        let k1 = PerturbSpec {
            perturbation: Perturbation::Blur {
                variance: 10.0,
                kernel: 1,
            },
            seed: 1,
        };
        assert_eq!(&perturb(s, &k1).unwrap(), s);
    }

    #[test]
    fn noise_changes_pixels_but_not_mask() {
        let s = &generate_phantom(1, 24, 5).unwrap()[0];
        let spec = PerturbSpec {
            perturbation: Perturbation::Noise { variance: 0.03 },
            seed: 9,
        };
        let out = perturb(s, &spec).unwrap();
        assert_eq!(out.mask, s.mask);
        assert_ne!(out.images, s.images);
        assert!(out.images.values().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out, perturb(s, &spec).unwrap());
    }

    #[test]
    fn missing_phase_removal() {
        let s = &generate_phantom(1, 24, 5).unwrap()[0];
        let spec = PerturbSpec {
            perturbation: Perturbation::Missing { count: 1 },
            seed: 2,
        };
        let out = perturb(s, &spec).unwrap();
        assert_eq!(out.present().len(), 3);
        for (p, img) in &out.images {
            assert_eq!(img, &s.images[p]);
        }
        assert_eq!(out.mask, s.mask);
        let too_many = PerturbSpec {
            perturbation: Perturbation::Missing { count: 4 },
            seed: 2,
        };
        assert!(matches!(perturb(s, &too_many), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_normalized_and_blur_preserves_constant() {
        for (v, k) in [(10.0, 9), (20.0, 9), (10.0, 13), (20.0, 23)] {
            let kern = gaussian_kernel(k, v).unwrap();
            assert!((kern.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let img = vec![0.37; 16 * 16];
            let out = blur_separable(&img, 16, 16, &kern);
            assert!(out.iter().all(|x| (x - 0.37).abs() < 1e-12));
        }
        assert!(gaussian_kernel(4, 1.0).is_err());
    }

    #[test]
    fn reflect_indexing() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn window_examples() {
        let out = hu_window(&[-30.0, 110.0, 40.0, -500.0, 900.0], 40.0, 140.0).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.5, 0.0, 1.0]);
        assert!(hu_window(&[0.0], 40.0, 0.0).is_err());
    }

    #[test]
    fn perturbation_parsing() {
        assert_eq!("noise:0.1".parse::<Perturbation>().unwrap(), Perturbation::Noise { variance: 0.1 });
        assert_eq!(
            "blur:10,13".parse::<Perturbation>().unwrap(),
            Perturbation::Blur {
                variance: 10.0,
                kernel: 13
            }
        );
        assert_eq!("missing:2".parse::<Perturbation>().unwrap(), Perturbation::Missing { count: 2 });
        assert_eq!("none".parse::<Perturbation>().unwrap(), Perturbation::None);
        for bad in ["noise", "blur:10", "blur:10,4", "noise:-1", "missing:x", "jitter:1"] {
            assert!(bad.parse::<Perturbation>().is_err(), "{bad}");
        }
        let p = Perturbation::Blur {
            variance: 20.0,
            kernel: 23,
        };
        assert_eq!(p.to_string().parse::<Perturbation>().unwrap(), p);
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let s = &generate_phantom(1, 16, 2).unwrap()[0];
        assert_eq!(&rotate_sample(s, 0.0), s);
        let r = rotate_sample(s, 5.0);
        assert!(r.mask.iter().all(|m| *m <= 1));
    }

    #[test]
    fn dataset_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_phantom(3, 16, 4).unwrap();
        let manifest = Manifest {
            generator_version: GENERATOR_VERSION,
            seed: 4,
            count: 3,
            size: 16,
            config_hash: "test".into(),
            samples: samples.iter().map(|s| sample_dir_name(s.id)).collect(),
        };
        write_dataset(dir.path(), &samples, &manifest).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, manifest);
        assert_eq!(back, samples);
    }
}
