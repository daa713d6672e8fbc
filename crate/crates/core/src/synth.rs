//! Cardiac-like phantoms with known ground truth, a closed-form thickness
//! classifier and an intensity-band segmenter.
//!
//! Each phantom has a left-ventricle cavity disk, a myocardium annulus around
//! it, a right-ventricle disk to its right and a chest-wall ring around the
//! whole heart (labelled background). Frame 0 is end-diastole; later frames
//! contract the cavities while preserving myocardial area.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    label_for, DemographicValue, Dims, ModelError, SegmentMap, SegmentSchema, Subject,
    SubjectRecord, Volume,
};
use crate::raster;

pub const LV_CAVITY: u8 = 1;
pub const LV_MYOCARDIUM: u8 = 2;
pub const RV_CAVITY: u8 = 3;

/// Cavity radius range in pixels.
pub const CAVITY_RADIUS: (f64, f64) = (11.0, 14.0);
/// Myocardium thickness: mean, standard deviation, clamp range.
pub const THICKNESS_MEAN: f64 = 5.0;
pub const THICKNESS_SD: f64 = 1.2;
pub const THICKNESS_RANGE: (f64, f64) = (2.0, 9.0);
pub const RV_RADIUS: (f64, f64) = (9.0, 13.0);
/// Gap between the myocardium's outer edge and the RV, plus the RV radius.
/// Constant, so any RV transplanted onto another phantom's RV centroid stays
/// clear of that phantom's myocardium.
pub const RV_CLEARANCE: f64 = RV_RADIUS.1 + 2.0;
pub const CHEST_WALL: (f64, f64) = (50.0, 55.0);
/// Default additive Gaussian noise.
pub const NOISE_SIGMA: f64 = 10.0;
pub const MIN_SIZE: usize = 120;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("phantom size must be at least {MIN_SIZE}, got {0}")]
    SizeTooSmall(usize),
    #[error("frames must be >= 1")]
    NoFrames,
    #[error("phantom does not fit the frame with a 2-pixel margin")]
    DoesNotFit,
    #[error("segment map lacks label {0} in frame 0")]
    MissingFeature(u8),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Band centers per structure. Centers are 55 apart so that nearest-center
/// classification survives noise of sigma 10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityBands {
    pub background: u8,
    pub lv_myocardium: u8,
    pub chest_wall: u8,
    pub rv_cavity: u8,
    pub lv_cavity: u8,
}

impl Default for IntensityBands {
    fn default() -> Self {
        Self {
            background: 20,
            lv_myocardium: 75,
            chest_wall: 130,
            rv_cavity: 185,
            lv_cavity: 240,
        }
    }
}

impl IntensityBands {
    /// (band center, label) pairs.
    fn centers(&self) -> [(u8, u8); 5] {
        [
            (self.background, 0),
            (self.lv_myocardium, LV_MYOCARDIUM),
            (self.chest_wall, 0),
            (self.rv_cavity, RV_CAVITY),
            (self.lv_cavity, LV_CAVITY),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    /// (row, col) of the LV center.
    pub lv_center: (f64, f64),
    pub lv_cavity_radius: f64,
    pub myocardium_thickness: f64,
    /// Column distance from LV center to RV center.
    pub rv_offset: f64,
    pub rv_radius: f64,
    pub bands: IntensityBands,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl PhantomParams {
    pub fn outer_radius(&self) -> f64 {
        self.lv_cavity_radius + self.myocardium_thickness
    }

    /// Structures (including the chest wall) fit inside a `size` frame with a
    /// 2-pixel margin.
    pub fn fits(&self, height: usize, width: usize) -> bool {
        let (r, c) = self.lv_center;
        let outer = self.outer_radius();
        let (cr, cc) = (height as f64 / 2.0, width as f64 / 2.0);
        let lv_ok = r - outer >= 2.0
            && c - outer >= 2.0
            && r + outer <= height as f64 - 3.0
            && c + outer <= width as f64 - 3.0;
        let rv_c = c + self.rv_offset;
        let rv_ok = rv_c + self.rv_radius <= width as f64 - 3.0
            && r - self.rv_radius >= 2.0
            && r + self.rv_radius <= height as f64 - 3.0;
        let wall_ok = cr - CHEST_WALL.1 >= 2.0 && cc - CHEST_WALL.1 >= 2.0;
        lv_ok && rv_ok && wall_ok
    }
}

/// Cavity contraction per frame; 1.0 at frame 0.
fn contraction(frame: usize, frames: usize) -> f64 {
    if frames <= 1 {
        return 1.0;
    }
    1.0 - 0.2 * (PI * frame as f64 / frames as f64).sin().powi(2)
}

/// Renders a phantom volume and its exact segment map.
pub fn render_phantom(
    id: &str,
    params: &PhantomParams,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Subject, SynthError> {
    if frames == 0 {
        return Err(SynthError::NoFrames);
    }
    if !params.fits(height, width) {
        return Err(SynthError::DoesNotFit);
    }
    let dims = Dims::new(frames, height, width)?;
    let mut pixels = Vec::with_capacity(dims.len());
    let mut labels = Vec::with_capacity(dims.len());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
    let noise = (params.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, params.noise_sigma).expect("valid sigma"));
    let b = params.bands;
    let (lr, lc) = params.lv_center;
    let (rv_r, rv_c) = (lr, lc + params.rv_offset);
    let (wr, wc) = (height as f64 / 2.0, width as f64 / 2.0);
    let myo_area = params.outer_radius().powi(2) - params.lv_cavity_radius.powi(2);
    for f in 0..frames {
        let k = contraction(f, frames);
        let cav = params.lv_cavity_radius * k;
        let outer = (cav * cav + myo_area).sqrt();
        let rv = params.rv_radius * (1.0 - 0.75 * (1.0 - k));
        for r in 0..height {
            for c in 0..width {
                let (y, x) = (r as f64, c as f64);
                let d_lv = (y - lr).hypot(x - lc);
                let d_rv = (y - rv_r).hypot(x - rv_c);
                let d_wall = (y - wr).hypot(x - wc);
                let (base, label) = if d_lv <= cav {
                    (b.lv_cavity, LV_CAVITY)
                } else if d_lv <= outer {
                    (b.lv_myocardium, LV_MYOCARDIUM)
                } else if d_rv <= rv {
                    (b.rv_cavity, RV_CAVITY)
                } else if (CHEST_WALL.0..=CHEST_WALL.1).contains(&d_wall) {
                    (b.chest_wall, 0)
                } else {
                    (b.background, 0)
                };
                let v = match &noise {
                    Some(n) => (base as f64 + n.sample(&mut noise_rng)).round().clamp(0.0, 255.0) as u8,
                    None => base,
                };
                pixels.push(v);
                labels.push(label);
            }
        }
    }
    Ok(Subject::new(
        Volume::new(id, dims, pixels)?,
        SegmentMap::new(dims, labels)?,
    )?)
}

/// Constants of the synthetic generative process and classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConstants {
    /// Classifier logistic slope per pixel of thickness.
    pub alpha: f64,
    /// Classifier thickness threshold (pixels).
    pub tau_c: f64,
    /// Generative thickness threshold (pixels).
    pub tau_g: f64,
    /// Standard deviation of the generative label noise (pixels).
    pub label_noise_sd: f64,
    pub bands: IntensityBands,
    pub noise_sigma: f64,
}

impl Default for SyntheticConstants {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            tau_c: 5.0,
            tau_g: 5.0,
            label_noise_sd: 0.4,
            bands: IntensityBands::default(),
            noise_sigma: NOISE_SIGMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub true_label: u8,
    pub thickness: f64,
    pub label_noise: f64,
    pub tau_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub subjects: usize,
    pub seed: u64,
    pub frames: usize,
    pub size: usize,
    pub constants: SyntheticConstants,
    /// Fraction of subjects with a missing BMI value.
    pub bmi_missing_rate: f64,
}

impl SyntheticConfig {
    pub fn new(subjects: usize, seed: u64) -> Self {
        Self {
            subjects,
            seed,
            frames: 1,
            size: 128,
            constants: SyntheticConstants::default(),
            bmi_missing_rate: 0.03,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.constants.noise_sigma = 0.0;
        self
    }

    pub fn with_frames(mut self, frames: usize) -> Self {
        self.frames = frames;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub schema: SegmentSchema,
    pub subjects: Vec<Subject>,
    pub params: Vec<PhantomParams>,
    pub records: Vec<SubjectRecord>,
    pub truths: Vec<GroundTruth>,
    pub constants: SyntheticConstants,
}

/// Zero-padded subject id, e.g. `s007` for index 6 of 100.
pub fn subject_id(index: usize, total: usize) -> String {
    let width = total.to_string().len().max(2);
    format!("s{:0width$}", index + 1)
}

/// Samples phantom geometry for one subject from its own RNG stream.
pub fn sample_params(
    rng: &mut ChaCha8Rng,
    size: usize,
    constants: &SyntheticConstants,
) -> PhantomParams {
    let mid = size as f64 / 2.0;
    let row = mid + rng.random_range(-4.0..=4.0);
    let col = mid - 16.0 + rng.random_range(-4.0..=4.0);
    let cavity = rng.random_range(CAVITY_RADIUS.0..=CAVITY_RADIUS.1);
    let thickness = Normal::new(THICKNESS_MEAN, THICKNESS_SD)
        .expect("valid")
        .sample(rng)
        .clamp(THICKNESS_RANGE.0, THICKNESS_RANGE.1);
    let rv_radius = rng.random_range(RV_RADIUS.0..=RV_RADIUS.1);
    PhantomParams {
        lv_center: (row, col),
        lv_cavity_radius: cavity,
        myocardium_thickness: thickness,
        rv_offset: cavity + thickness + RV_CLEARANCE,
        rv_radius,
        bands: constants.bands,
        noise_sigma: constants.noise_sigma,
        noise_seed: rng.random(),
    }
}

/// Generates the whole synthetic dataset in memory; deterministic in the seed.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset, SynthError> {
    if config.subjects < 2 {
        return Err(SynthError::TooFewSubjects(config.subjects));
    }
    if config.size < MIN_SIZE {
        return Err(SynthError::SizeTooSmall(config.size));
    }
    if config.frames == 0 {
        return Err(SynthError::NoFrames);
    }
    let c = &config.constants;
    let label_noise = Normal::new(0.0, c.label_noise_sd).expect("valid sd");
    let mut out = SyntheticDataset {
        schema: SegmentSchema::cardiac(),
        subjects: Vec::with_capacity(config.subjects),
        params: Vec::with_capacity(config.subjects),
        records: Vec::with_capacity(config.subjects),
        truths: Vec::with_capacity(config.subjects),
        constants: c.clone(),
    };
    for i in 0..config.subjects {
        let id = subject_id(i, config.subjects);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let params = sample_params(&mut rng, config.size, c);
        let subject = render_phantom(&id, &params, config.frames, config.size, config.size)?;

        let noise = label_noise.sample(&mut rng);
        let truth = GroundTruth {
            id: id.clone(),
            true_label: u8::from(params.myocardium_thickness + noise > c.tau_g),
            thickness: params.myocardium_thickness,
            label_noise: noise,
            tau_g: c.tau_g,
        };

        let demographics = sample_demographics(&mut rng, config.bmi_missing_rate);

        let (_, probability) = classify(&subject, c)?;
        out.records
            .push(SubjectRecord::new(id.clone(), demographics, probability)?);
        out.subjects.push(subject);
        out.params.push(params);
        out.truths.push(truth);
    }
    Ok(out)
}

/// Age in years (N(60, 10), rounded, clamped to [30, 90]), sex (even odds)
/// and BMI (N(27, 4), clamped to [16, 45], one decimal; absent with
/// probability `bmi_missing_rate`).
pub fn sample_demographics<R: Rng>(rng: &mut R, bmi_missing_rate: f64) -> BTreeMap<String, DemographicValue> {
    let age = Normal::new(60.0, 10.0).expect("valid");
    let bmi = Normal::new(27.0, 4.0).expect("valid");
    let mut demographics = BTreeMap::new();
    let a: f64 = age.sample(rng);
    demographics.insert(
        "age".to_string(),
        DemographicValue::Numeric(a.round().clamp(30.0, 90.0)),
    );
    let sex = if rng.random_bool(0.5) { "female" } else { "male" };
    demographics.insert("sex".to_string(), DemographicValue::Categorical(sex.into()));
    let b: f64 = bmi.sample(rng);
    if !rng.random_bool(bmi_missing_rate) {
        let b = (b.clamp(16.0, 45.0) * 10.0).round() / 10.0;
        demographics.insert("bmi".to_string(), DemographicValue::Numeric(b));
    }
    demographics
}

/// Thickness estimate from frame-0 label areas:
/// `sqrt((A_cav + A_myo) / pi) - sqrt(A_cav / pi)`.
pub fn thickness_estimate(segmap: &SegmentMap) -> Result<f64, SynthError> {
    let cav = segmap.count(0, LV_CAVITY);
    let myo = segmap.count(0, LV_MYOCARDIUM);
    if cav == 0 {
        return Err(SynthError::MissingFeature(LV_CAVITY));
    }
    if myo == 0 {
        return Err(SynthError::MissingFeature(LV_MYOCARDIUM));
    }
    Ok(((cav + myo) as f64 / PI).sqrt() - (cav as f64 / PI).sqrt())
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Closed-form classifier over the LV areas of `segmap`. Pixels and the RV
/// label never influence the result.
pub fn synthetic_classifier(
    _volume: &Volume,
    segmap: &SegmentMap,
    constants: &SyntheticConstants,
) -> Result<(u8, f64), SynthError> {
    let t = thickness_estimate(segmap)?;
    let p = logistic(constants.alpha * (t - constants.tau_c));
    Ok((label_for(p), p))
}

fn classify(subject: &Subject, c: &SyntheticConstants) -> Result<(u8, f64), SynthError> {
    synthetic_classifier(subject.volume(), subject.segmap(), c)
}

/// Nearest-band labelling, then the largest 4-connected component per label,
/// then single-pixel hole filling, frame by frame.
pub fn synthetic_segmenter(volume: &Volume, bands: &IntensityBands) -> SegmentMap {
    let dims = volume.dims();
    let centers = bands.centers();
    let mut lut = [0u8; 256];
    for (v, slot) in lut.iter_mut().enumerate() {
        *slot = centers
            .iter()
            .min_by_key(|(center, _)| (v as i32 - *center as i32).abs())
            .map(|&(_, l)| l)
            .unwrap_or(0);
    }
    let mut labels = Vec::with_capacity(dims.len());
    for f in 0..dims.frames {
        let mut frame: Vec<u8> = volume.frame(f).iter().map(|&v| lut[v as usize]).collect();
        for label in [LV_CAVITY, LV_MYOCARDIUM, RV_CAVITY] {
            raster::keep_largest_component(&mut frame, dims.height, dims.width, label);
        }
        for label in [LV_CAVITY, LV_MYOCARDIUM, RV_CAVITY] {
            raster::fill_single_holes(&mut frame, dims.height, dims.width, label);
        }
        labels.extend(frame);
    }
    SegmentMap::new(dims, labels).expect("dims preserved")
}
