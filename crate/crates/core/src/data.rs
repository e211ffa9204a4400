//! Synthetic multi-patient, multi-modality, nested-region dataset.
//!
//! Each patient carries three concentric elliptical regions (whole, core,
//! inner — mirroring WT/TC/ET). Every modality renders the same anatomy with
//! its own contrast profile, so no single channel exposes every region well:
//! the flair-analog has the strongest whole-region contrast, the t2-analog
//! the strongest core contrast, and the t1ce-analog the strongest inner
//! contrast, while the t1-analog is a weak generalist.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::rng_from;
use crate::tensor::TensorError;
use crate::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(String),
    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: String },
    #[error("unknown sample '{0}'")]
    UnknownSample(String),
    #[error("invalid generation spec: {0}")]
    BadSpec(String),
    #[error("modality subset is empty")]
    EmptySubset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub const NUM_MODALITIES: usize = 4;
pub const NUM_REGIONS: usize = 3;
pub const MODALITY_NAMES: [&str; NUM_MODALITIES] = ["t1", "t2", "flair", "t1ce"];
pub const REGION_NAMES: [&str; NUM_REGIONS] = ["wt", "tc", "et"];

/// Zone intensities per modality: background, whole-only, core-only, inner.
/// A pixel takes the value of the innermost region containing it.
const INTENSITY: [[f64; 4]; NUM_MODALITIES] = [
    [0.30, 0.45, 0.40, 0.38], // t1: weak generalist
    [0.30, 0.42, 0.68, 0.48], // t2: core stands out
    [0.30, 0.75, 0.60, 0.55], // flair: whole region stands out
    [0.30, 0.36, 0.42, 0.85], // t1ce: inner region stands out
];

/// Region each modality is designed to expose (strongest mean contrast).
pub fn designed_region(modality: usize) -> usize {
    match modality {
        0 => 0, // t1 leans whole, weakly
        1 => 1, // t2 -> core
        2 => 0, // flair -> whole
        3 => 2, // t1ce -> inner
        other => panic!("modality {other} out of range"),
    }
}

/// Modality expected to win each region among single-modality inputs.
pub fn region_champion(region: usize) -> usize {
    match region {
        0 => 2, // whole -> flair
        1 => 1, // core -> t2
        2 => 3, // inner -> t1ce
        other => panic!("region {other} out of range"),
    }
}

/// Bit set over the four modality channels; bit i = channel i available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySubset(pub u8);

impl ModalitySubset {
    pub fn all() -> Self {
        Self((1 << NUM_MODALITIES) - 1)
    }

    pub fn single(modality: usize) -> Self {
        Self(1 << modality)
    }

    pub fn contains(&self, modality: usize) -> bool {
        self.0 & (1 << modality) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn count(&self) -> usize {
        self.0.count_ones() as usize
    }

    /// Every nonempty subset, ascending bit pattern (15 of them).
    pub fn enumerate_nonempty() -> Vec<Self> {
        (1..(1u8 << NUM_MODALITIES)).map(Self).collect()
    }

    /// Short name like `t1+flair`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = (0..NUM_MODALITIES)
            .filter(|&m| self.contains(m))
            .map(|m| MODALITY_NAMES[m])
            .collect();
        names.join("+")
    }
}

/// Zero the channels outside `available`; the image keeps its shape.
pub fn zero_modalities(image: &Tensor, available: ModalitySubset) -> Result<Tensor> {
    if available.is_empty() {
        return Err(DataError::EmptySubset);
    }
    let shape = image.shape().to_vec();
    if shape.len() != 3 {
        return Err(DataError::Tensor(TensorError::InvalidShape {
            op: "zero_modalities",
            shape,
            msg: "expected (M, H, W)".into(),
        }));
    }
    let channels = shape[0];
    let plane = shape[1] * shape[2];
    let mut out = image.clone();
    for m in 0..channels {
        if !available.contains(m) {
            for v in &mut out.data_mut()[m * plane..(m + 1) * plane] {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub patient: u32,
    pub slice: u32,
    pub modality: u32,
    pub split: Split,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
    /// Mask pixel counts per region, recorded at generation time.
    pub voxels: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub num_modalities: usize,
    pub num_classes: usize,
    pub num_patients: usize,
    pub slices_per_patient: usize,
    pub noise_sigma: f64,
    pub modalities: Vec<String>,
    pub regions: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub seed: u64,
    pub num_patients: usize,
    pub slices_per_patient: usize,
    pub image_size: usize,
    pub split_ratios: (f64, f64, f64),
    pub noise_sigma: f64,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            num_patients: 40,
            slices_per_patient: 16,
            image_size: 32,
            split_ratios: (0.8, 0.1, 0.1),
            noise_sigma: 0.05,
        }
    }
}

/// Latent anatomy of one patient: three concentric ellipses.
struct PatientShape {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    core_scale: f64,
    inner_scale: f64,
}

fn patient_shape(seed: u64, patient: u32, size: usize) -> PatientShape {
    let mut rng = rng_from(seed, &[0xA0A0, patient as u64]);
    let s = size as f64;
    PatientShape {
        cx: rng.gen_range(0.38..0.62) * s,
        cy: rng.gen_range(0.38..0.62) * s,
        rx: rng.gen_range(0.22..0.32) * s,
        ry: rng.gen_range(0.22..0.32) * s,
        rot: rng.gen_range(0.0..std::f64::consts::PI),
        core_scale: rng.gen_range(0.55..0.70),
        inner_scale: rng.gen_range(0.45..0.65),
    }
}

/// Region masks for one slice: `(3, H, W)`, nested by construction.
fn slice_masks(seed: u64, shape: &PatientShape, patient: u32, slice: u32, size: usize) -> Tensor {
    let mut rng = rng_from(seed, &[0xB1B1, patient as u64, slice as u64]);
    let scale: f64 = rng.gen_range(0.85..1.10);
    let jx: f64 = rng.gen_range(-1.5..1.5);
    let jy: f64 = rng.gen_range(-1.5..1.5);
    let (cx, cy) = (shape.cx + jx, shape.cy + jy);
    let (sin, cos) = shape.rot.sin_cos();
    // Radii per region, strictly shrinking => containment.
    let radii = [
        (shape.rx * scale, shape.ry * scale),
        (
            shape.rx * scale * shape.core_scale,
            shape.ry * scale * shape.core_scale,
        ),
        (
            shape.rx * scale * shape.core_scale * shape.inner_scale,
            shape.ry * scale * shape.core_scale * shape.inner_scale,
        ),
    ];
    let mut out = Tensor::zeros(&[NUM_REGIONS, size, size]);
    for (r, &(rx, ry)) in radii.iter().enumerate() {
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                if u * u + v * v <= 1.0 {
                    out.set(&[r, y, x], 1.0).unwrap();
                }
            }
        }
    }
    out
}

/// Render one modality of one slice from its masks: `(1, H, W)` in [0, 1].
fn render_modality(
    seed: u64,
    masks: &Tensor,
    patient: u32,
    slice: u32,
    modality: u32,
    size: usize,
    sigma: f64,
) -> Tensor {
    let mut rng = rng_from(seed, &[0xC2C2, patient as u64, slice as u64, modality as u64]);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let profile = &INTENSITY[modality as usize];
    let mut out = Tensor::zeros(&[1, size, size]);
    for y in 0..size {
        for x in 0..size {
            let zone = if masks.get(&[2, y, x]).unwrap() > 0.5 {
                3
            } else if masks.get(&[1, y, x]).unwrap() > 0.5 {
                2
            } else if masks.get(&[0, y, x]).unwrap() > 0.5 {
                1
            } else {
                0
            };
            let noisy = profile[zone] + normal.sample(&mut rng);
            out.set(&[0, y, x], noisy.clamp(0.0, 1.0)).unwrap();
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Patient split assignment: shuffled patients cut at the ratio boundaries.
fn assign_splits(spec: &GenerateSpec) -> Vec<Split> {
    let mut order: Vec<usize> = (0..spec.num_patients).collect();
    let mut rng = rng_from(spec.seed, &[0xD3D3]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (spec.num_patients as f64 * spec.split_ratios.0).floor() as usize;
    let n_val = (spec.num_patients as f64 * spec.split_ratios.1).floor() as usize;
    let mut splits = vec![Split::Test; spec.num_patients];
    for (rank, &p) in order.iter().enumerate() {
        splits[p] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub fn sample_id(patient: u32, slice: u32, modality: u32) -> String {
    format!("p{patient:03}_s{slice:02}_m{modality}")
}

/// Generate the dataset directory: per-sample image files, per-slice mask
/// files, and a manifest with checksums. Same spec and seed produce
/// byte-identical output.
pub fn generate_dataset(spec: &GenerateSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let ratio_sum = spec.split_ratios.0 + spec.split_ratios.1 + spec.split_ratios.2;
    if (ratio_sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadSpec(format!(
            "split ratios sum to {ratio_sum}, expected 1"
        )));
    }
    if spec.num_patients == 0 || spec.slices_per_patient == 0 || spec.image_size == 0 {
        return Err(DataError::BadSpec("empty dataset requested".into()));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;

    let splits = assign_splits(spec);
    let mut samples = Vec::new();
    for patient in 0..spec.num_patients as u32 {
        let shape = patient_shape(spec.seed, patient, spec.image_size);
        for slice in 0..spec.slices_per_patient as u32 {
            let masks = slice_masks(spec.seed, &shape, patient, slice, spec.image_size);
            let mask_rel = format!("masks/p{patient:03}_s{slice:02}.tsr");
            let mask_bytes = masks.to_bytes()?;
            fs::write(out_dir.join(&mask_rel), &mask_bytes)?;
            let mask_sha256 = sha256_hex(&mask_bytes);
            let voxels: Vec<u64> = (0..NUM_REGIONS)
                .map(|r| {
                    let plane = spec.image_size * spec.image_size;
                    masks.data()[r * plane..(r + 1) * plane]
                        .iter()
                        .filter(|&&v| v > 0.5)
                        .count() as u64
                })
                .collect();
            for modality in 0..NUM_MODALITIES as u32 {
                let image = render_modality(
                    spec.seed,
                    &masks,
                    patient,
                    slice,
                    modality,
                    spec.image_size,
                    spec.noise_sigma,
                );
                let image_rel = format!("images/{}.tsr", sample_id(patient, slice, modality));
                let image_bytes = image.to_bytes()?;
                fs::write(out_dir.join(&image_rel), &image_bytes)?;
                samples.push(SampleRecord {
                    id: sample_id(patient, slice, modality),
                    patient,
                    slice,
                    modality,
                    split: splits[patient as usize],
                    image: image_rel,
                    mask: mask_rel.clone(),
                    image_sha256: sha256_hex(&image_bytes),
                    mask_sha256: mask_sha256.clone(),
                    voxels: voxels.clone(),
                });
            }
        }
    }

    let manifest = DatasetManifest {
        version: 1,
        seed: spec.seed,
        image_size: spec.image_size,
        num_modalities: NUM_MODALITIES,
        num_classes: NUM_REGIONS,
        num_patients: spec.num_patients,
        slices_per_patient: spec.slices_per_patient,
        noise_sigma: spec.noise_sigma,
        modalities: MODALITY_NAMES.iter().map(|s| s.to_string()).collect(),
        regions: REGION_NAMES.iter().map(|s| s.to_string()).collect(),
        samples,
    };
    let text = toml::to_string(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    let mut f = fs::File::create(out_dir.join("manifest.toml"))?;
    f.write_all(text.as_bytes())?;
    Ok(manifest)
}

/// Handle to a dataset directory.
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

/// Fully loaded sample.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    /// `(M, H, W)` with only the sample's own modality channel populated.
    pub image: Tensor,
    /// `(3, H, W)` binary region masks.
    pub masks: Tensor,
    pub patient: u32,
    pub modality: u32,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join("manifest.toml"))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn read_checked(&self, rel: &str, expected_sha: &str) -> Result<Tensor> {
        let bytes = fs::read(self.root.join(rel))?;
        if sha256_hex(&bytes) != expected_sha {
            return Err(DataError::ChecksumMismatch { path: rel.into() });
        }
        Ok(Tensor::from_bytes(&bytes)?)
    }

    fn record(&self, id: &str) -> Result<&SampleRecord> {
        self.manifest
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| DataError::UnknownSample(id.into()))
    }

    /// Load one sample, verifying checksums. The image lands in its
    /// modality's channel of an otherwise zero `(M, H, W)` tensor.
    pub fn load_sample(&self, id: &str) -> Result<LoadedSample> {
        let record = self.record(id)?.clone();
        let raw = self.read_checked(&record.image, &record.image_sha256)?;
        let masks = self.read_checked(&record.mask, &record.mask_sha256)?;
        let size = self.manifest.image_size;
        let mut image = Tensor::zeros(&[self.manifest.num_modalities, size, size]);
        let plane = size * size;
        let channel = record.modality as usize;
        image.data_mut()[channel * plane..(channel + 1) * plane]
            .copy_from_slice(&raw.data()[..plane]);
        Ok(LoadedSample {
            image,
            masks,
            patient: record.patient,
            modality: record.modality,
        })
    }

    /// Load everything into memory for training and evaluation.
    pub fn load_all(&self) -> Result<MemDataset> {
        let mut images = Vec::with_capacity(self.manifest.samples.len());
        let mut masks = std::collections::BTreeMap::new();
        for record in &self.manifest.samples {
            let raw = self.read_checked(&record.image, &record.image_sha256)?;
            images.push(raw);
            let key = (record.patient, record.slice);
            if !masks.contains_key(&key) {
                let m = self.read_checked(&record.mask, &record.mask_sha256)?;
                masks.insert(key, m);
            }
        }
        Ok(MemDataset {
            manifest: self.manifest.clone(),
            images,
            masks,
        })
    }
}

/// Dataset resident in memory; indices follow the manifest sample order.
pub struct MemDataset {
    pub manifest: DatasetManifest,
    /// Raw `(1, H, W)` modality images, aligned with `manifest.samples`.
    images: Vec<Tensor>,
    masks: std::collections::BTreeMap<(u32, u32), Tensor>,
}

impl MemDataset {
    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn record(&self, index: usize) -> &SampleRecord {
        &self.manifest.samples[index]
    }

    /// Indices of samples for one split and modality, manifest order.
    pub fn indices(&self, split: Split, modality: Option<u32>) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split && modality.map_or(true, |m| s.modality == m))
            .map(|(i, _)| i)
            .collect()
    }

    /// `(M, H, W)` input with only the sample's own channel populated.
    pub fn input(&self, index: usize) -> Tensor {
        let record = &self.manifest.samples[index];
        let size = self.manifest.image_size;
        let plane = size * size;
        let mut image = Tensor::zeros(&[self.manifest.num_modalities, size, size]);
        let channel = record.modality as usize;
        image.data_mut()[channel * plane..(channel + 1) * plane]
            .copy_from_slice(&self.images[index].data()[..plane]);
        image
    }

    pub fn masks_for(&self, patient: u32, slice: u32) -> &Tensor {
        &self.masks[&(patient, slice)]
    }

    pub fn masks_of(&self, index: usize) -> &Tensor {
        let r = &self.manifest.samples[index];
        self.masks_for(r.patient, r.slice)
    }

    /// Combined `(M, H, W)` input for one (patient, slice) with every
    /// available channel populated, missing ones zeroed.
    pub fn combined_input(
        &self,
        patient: u32,
        slice: u32,
        available: ModalitySubset,
    ) -> Result<Tensor> {
        if available.is_empty() {
            return Err(DataError::EmptySubset);
        }
        let size = self.manifest.image_size;
        let plane = size * size;
        let mut image = Tensor::zeros(&[self.manifest.num_modalities, size, size]);
        for (i, record) in self.manifest.samples.iter().enumerate() {
            if record.patient == patient && record.slice == slice {
                let m = record.modality as usize;
                if available.contains(m) {
                    image.data_mut()[m * plane..(m + 1) * plane]
                        .copy_from_slice(&self.images[i].data()[..plane]);
                }
            }
        }
        Ok(image)
    }

    /// Distinct patients present in a split.
    pub fn patients(&self, split: Split) -> Vec<u32> {
        let mut v: Vec<u32> = self
            .manifest
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.patient)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn slices(&self) -> u32 {
        self.manifest.slices_per_patient as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GenerateSpec {
        GenerateSpec {
            seed: 9,
            num_patients: 6,
            slices_per_patient: 3,
            image_size: 16,
            split_ratios: (0.5, 0.25, 0.25),
            noise_sigma: 0.05,
        }
    }

    #[test]
    fn default_split_is_32_4_4() {
        let spec = GenerateSpec::default();
        let splits = assign_splits(&spec);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 32);
        assert_eq!(count(Split::Val), 4);
        assert_eq!(count(Split::Test), 4);
    }

    #[test]
    fn generation_is_byte_identical_for_same_seed() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let ma = generate_dataset(&spec, dir_a.path()).unwrap();
        let mb = generate_dataset(&spec, dir_b.path()).unwrap();
        assert_eq!(toml::to_string(&ma).unwrap(), toml::to_string(&mb).unwrap());
        for s in &ma.samples {
            let a = fs::read(dir_a.path().join(&s.image)).unwrap();
            let b = fs::read(dir_b.path().join(&s.image)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn masks_are_nested_and_voxels_match_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_spec(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        for record in &manifest.samples {
            let sample = ds.load_sample(&record.id).unwrap();
            let size = manifest.image_size;
            let plane = size * size;
            let m = sample.masks.data();
            let mut counts = [0u64; 3];
            for p in 0..plane {
                let wt = m[p] > 0.5;
                let tc = m[plane + p] > 0.5;
                let et = m[2 * plane + p] > 0.5;
                if et {
                    assert!(tc, "inner region outside core at {}", record.id);
                }
                if tc {
                    assert!(wt, "core outside whole at {}", record.id);
                }
                counts[0] += wt as u64;
                counts[1] += tc as u64;
                counts[2] += et as u64;
            }
            assert_eq!(counts.to_vec(), record.voxels, "voxels for {}", record.id);
            assert!(counts[2] > 0, "inner region empty for {}", record.id);
        }
    }

    #[test]
    fn load_round_trips_and_populates_the_right_channel() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_spec(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let record = &manifest.samples[5];
        let sample = ds.load_sample(&record.id).unwrap();
        assert_eq!(sample.modality, record.modality);
        let size = manifest.image_size;
        let plane = size * size;
        for m in 0..NUM_MODALITIES {
            let chan = &sample.image.data()[m * plane..(m + 1) * plane];
            if m == record.modality as usize {
                assert!(chan.iter().any(|&v| v != 0.0));
                // Against the raw stored payload, bit for bit.
                let raw = fs::read(dir.path().join(&record.image)).unwrap();
                let raw_t = Tensor::from_bytes(&raw).unwrap();
                assert!(chan
                    .iter()
                    .zip(raw_t.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            } else {
                assert!(chan.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn checksum_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_spec(), dir.path()).unwrap();
        let record = &manifest.samples[0];
        let path = dir.path().join(&record.image);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(matches!(
            ds.load_sample(&record.id),
            Err(DataError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn zero_modalities_contract() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_spec(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap().load_all().unwrap();
        let img = ds
            .combined_input(manifest.samples[0].patient, 0, ModalitySubset::all())
            .unwrap();

        let identity = zero_modalities(&img, ModalitySubset::all()).unwrap();
        assert_eq!(identity, img);

        let only_flair = zero_modalities(&img, ModalitySubset::single(2)).unwrap();
        let plane = manifest.image_size * manifest.image_size;
        for m in 0..NUM_MODALITIES {
            let chan = &only_flair.data()[m * plane..(m + 1) * plane];
            if m == 2 {
                assert!(chan.iter().any(|&v| v != 0.0));
            } else {
                assert!(chan.iter().all(|&v| v == 0.0));
            }
        }

        let twice = zero_modalities(&only_flair, ModalitySubset::single(2)).unwrap();
        assert_eq!(twice, only_flair);

        assert!(matches!(
            zero_modalities(&img, ModalitySubset(0)),
            Err(DataError::EmptySubset)
        ));
    }

    #[test]
    fn splits_are_patient_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_spec(), dir.path()).unwrap();
        let mut seen: std::collections::BTreeMap<u32, Split> = Default::default();
        for s in &manifest.samples {
            if let Some(prev) = seen.insert(s.patient, s.split) {
                assert_eq!(prev, s.split, "patient {} in two splits", s.patient);
            }
        }
    }

    #[test]
    fn contrast_signature_matches_design() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_spec(), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap().load_all().unwrap();
        let plane = manifest.image_size * manifest.image_size;
        for modality in 0..NUM_MODALITIES as u32 {
            // Pool intensities over all samples of this modality.
            let mut region_sum = [0.0f64; NUM_REGIONS];
            let mut region_count = [0usize; NUM_REGIONS];
            let mut bg_sum = 0.0;
            let mut bg_count = 0usize;
            for i in 0..ds.len() {
                if ds.record(i).modality != modality {
                    continue;
                }
                let img = ds.input(i);
                let masks = ds.masks_of(i);
                let chan = &img.data()[modality as usize * plane..(modality as usize + 1) * plane];
                for p in 0..plane {
                    let mut in_any = false;
                    for r in 0..NUM_REGIONS {
                        if masks.data()[r * plane + p] > 0.5 {
                            region_sum[r] += chan[p];
                            region_count[r] += 1;
                            in_any = true;
                        }
                    }
                    if !in_any {
                        bg_sum += chan[p];
                        bg_count += 1;
                    }
                }
            }
            let bg = bg_sum / bg_count as f64;
            let gaps: Vec<f64> = (0..NUM_REGIONS)
                .map(|r| (region_sum[r] / region_count[r] as f64 - bg).abs())
                .collect();
            let designed = designed_region(modality as usize);
            for r in 0..NUM_REGIONS {
                if r != designed {
                    assert!(
                        gaps[designed] > gaps[r],
                        "modality {modality}: designed gap {} not above region {r} gap {}",
                        gaps[designed],
                        gaps[r]
                    );
                }
            }
        }
    }
}
