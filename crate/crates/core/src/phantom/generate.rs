//! Deterministic synthetic patients.
//!
//! Generation runs in two phases with separate random streams: a cheap
//! planning phase that fixes all labels and lesion geometry, and a
//! rendering phase that rasterises each segment into a noisy volume. Labels
//! can therefore be recovered without rendering.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use super::labels::{
    calc_grade_of, stenosis_class_of, CadRadsClass, CalcGrade, SegmentId, StenosisClass, SEGMENT_COUNT,
};
use super::preprocess::{HuWindow, MprStack, CENTER, MPR_LENGTH, MPR_SIZE, MPR_VOXELS};
use super::profile::PhantomProfile;
use crate::error::Result;

/// Lower degree bound per stenosis class.
const CLASS_FLOOR: [f64; 6] = [0.0, 0.01, 0.25, 0.50, 0.70, 1.0];
/// Agatston density weight of a ≥ 400 HU lesion.
const DENSITY_WEIGHT: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LesionPlan {
    pub degree: f64,
    /// Longitudinal centre, in voxels.
    pub center: f64,
    /// Longitudinal length, in voxels.
    pub extent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobPlan {
    pub z: f64,
    pub angle: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPlan {
    pub segment: SegmentId,
    pub base_radius: f64,
    /// Distal-to-proximal radius ratio.
    pub taper: f64,
    pub lesion: Option<LesionPlan>,
    pub blobs: Vec<BlobPlan>,
}

impl SegmentPlan {
    pub fn degree(&self) -> f64 {
        self.lesion.as_ref().map_or(0.0, |l| l.degree)
    }

    fn healthy_radius(&self, z: f64) -> f64 {
        self.base_radius * (1.0 - (1.0 - self.taper) * z / (MPR_LENGTH as f64 - 1.0))
    }

    /// Lumen radius at longitudinal position `z`.
    pub fn radius_at(&self, z: f64) -> f64 {
        let r = self.healthy_radius(z);
        match &self.lesion {
            Some(l) => r * (1.0 - l.degree * narrowing_profile(z, l)),
            None => r,
        }
    }
}

/// Flat-topped raised cosine: 1 over the middle third, 0 outside the extent.
fn narrowing_profile(z: f64, lesion: &LesionPlan) -> f64 {
    let half = lesion.extent / 2.0;
    let plateau = lesion.extent / 6.0;
    let d = (z - lesion.center).abs();
    if d <= plateau {
        1.0
    } else if d >= half {
        0.0
    } else {
        0.5 * (1.0 + (PI * (d - plateau) / (half - plateau)).cos())
    }
}

/// Everything about a patient except the rendered voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientPlan {
    pub seed: u64,
    pub segments: Vec<SegmentPlan>,
    pub segment_labels: [StenosisClass; SEGMENT_COUNT],
    pub severest: StenosisClass,
    pub severest_degree: f64,
    pub cad_rads: CadRadsClass,
    pub calc_burden: f64,
    pub calc_grade: CalcGrade,
    /// CAD-RADS deliberately differs from the severest stenosis.
    pub edge_case: bool,
}

/// A generated or loaded patient: one stack per segment plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientSample {
    pub seed: u64,
    pub segments: Vec<MprStack>,
    pub segment_labels: [StenosisClass; SEGMENT_COUNT],
    pub cad_rads: CadRadsClass,
    pub calc_grade: CalcGrade,
    pub severest: StenosisClass,
}

impl PatientSample {
    pub fn labels(&self) -> PatientLabels {
        PatientLabels {
            seed: self.seed,
            segment_labels: self.segment_labels,
            cad_rads: self.cad_rads,
            calc_grade: self.calc_grade,
        }
    }
}

/// Label part of a patient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatientLabels {
    pub seed: u64,
    pub segment_labels: [StenosisClass; SEGMENT_COUNT],
    pub cad_rads: CadRadsClass,
    pub calc_grade: CalcGrade,
}

impl PatientLabels {
    pub fn severest(&self) -> StenosisClass {
        self.segment_labels.iter().copied().max().unwrap_or_default()
    }

    /// Index of the only diseased segment, if exactly one has a lesion.
    pub fn single_lesion_segment(&self) -> Option<usize> {
        let mut diseased = self
            .segment_labels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.value() > 0)
            .map(|(i, _)| i);
        match (diseased.next(), diseased.next()) {
            (Some(i), None) => Some(i),
            _ => None,
        }
    }
}

impl From<&PatientPlan> for PatientLabels {
    fn from(p: &PatientPlan) -> Self {
        PatientLabels {
            seed: p.seed,
            segment_labels: p.segment_labels,
            cad_rads: p.cad_rads,
            calc_grade: p.calc_grade,
        }
    }
}

fn categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last class with non-zero mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Continuous degree drawn uniformly inside a stenosis class.
fn degree_in_class(rng: &mut impl Rng, class: usize) -> f64 {
    match class {
        0 => 0.0,
        5 => 1.0,
        c => rng.gen_range(CLASS_FLOOR[c]..CLASS_FLOOR[c + 1]),
    }
}

/// Severest class and degree for a CAD-RADS `k` edge case: one class away,
/// within `band` of the shared boundary. Reading severest-minimal patients
/// as CAD-RADS 0 is the common direction at the low end.
fn edge_case_severity(rng: &mut impl Rng, k: usize, band: f64) -> (usize, f64) {
    let down = match k {
        0 => false,
        5 => true,
        1 => rng.gen_bool(0.25),
        _ => rng.gen_bool(0.5),
    };
    if down {
        let s = k - 1;
        let degree = if s == 0 {
            0.0
        } else {
            rng.gen_range(CLASS_FLOOR[k] - band..CLASS_FLOOR[k])
        };
        (s, degree)
    } else {
        let s = k + 1;
        let degree = match s {
            1 => band * (1.0 - rng.gen::<f64>()),
            5 => 1.0,
            _ => rng.gen_range(CLASS_FLOOR[s]..CLASS_FLOOR[s] + band),
        };
        (s, degree)
    }
}

fn lesion_at(rng: &mut impl Rng, degree: f64) -> LesionPlan {
    let extent = rng.gen_range(12.0..32.0);
    let margin = extent / 2.0 + 4.0;
    LesionPlan {
        degree,
        center: rng.gen_range(margin..MPR_LENGTH as f64 - margin),
        extent,
    }
}

/// Label-and-geometry phase of [`generate_patient`].
pub fn plan_patient(seed: u64, profile: &PhantomProfile) -> Result<PatientPlan> {
    let priors = profile.normalized_priors()?;
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let cad_rads = categorical(&mut rng, &priors);
    let edge_case = rng.gen_bool(profile.boundary_noise);
    let (severest, severest_degree) = if edge_case {
        edge_case_severity(&mut rng, cad_rads, profile.boundary_band)
    } else {
        (cad_rads, degree_in_class(&mut rng, cad_rads))
    };

    let scale = rng.gen_range(0.9..1.1);
    let mut segments: Vec<SegmentPlan> = SegmentId::ALL
        .iter()
        .map(|&segment| SegmentPlan {
            segment,
            base_radius: segment.nominal_radius() * scale,
            taper: rng.gen_range(0.85..1.0),
            lesion: None,
            blobs: Vec::new(),
        })
        .collect();

    if severest_degree > 0.0 {
        let culprit = rng.gen_range(0..SEGMENT_COUNT);
        segments[culprit].lesion = Some(lesion_at(&mut rng, severest_degree));
        let extra = if rng.gen_bool(profile.single_lesion_fraction) || profile.max_extra_lesions == 0 {
            0
        } else {
            rng.gen_range(1..=profile.max_extra_lesions)
        };
        let upper = severest_degree.min(0.99);
        if extra > 0 && upper > CLASS_FLOOR[1] {
            let others: Vec<usize> = (0..SEGMENT_COUNT).filter(|&i| i != culprit).collect();
            for pick in sample_indices(&mut rng, others.len(), extra.min(others.len())) {
                let degree = rng.gen_range(CLASS_FLOOR[1]..upper);
                segments[others[pick]].lesion = Some(lesion_at(&mut rng, degree));
            }
        }
    }

    let rate = profile.calc_rates[severest];
    let blob_count = if rate > 0.0 {
        Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize
    } else {
        0
    };
    let diseased: Vec<usize> = (0..SEGMENT_COUNT).filter(|&i| segments[i].lesion.is_some()).collect();
    let mut calc_burden = 0.0;
    for _ in 0..blob_count {
        let near_lesion = !diseased.is_empty() && rng.gen_bool(0.7);
        let seg = if near_lesion {
            diseased[rng.gen_range(0..diseased.len())]
        } else {
            rng.gen_range(0..SEGMENT_COUNT)
        };
        let z = match (&segments[seg].lesion, near_lesion) {
            (Some(l), true) => (l.center + rng.gen_range(-0.5..0.5) * l.extent).clamp(4.0, 123.0),
            _ => rng.gen_range(8.0..120.0),
        };
        let radius = rng.gen_range(0.8..2.6);
        calc_burden += DENSITY_WEIGHT * 4.0 / 3.0 * PI * radius * radius * radius;
        segments[seg].blobs.push(BlobPlan {
            z,
            angle: rng.gen_range(0.0..2.0 * PI),
            radius,
        });
    }
    let calc_grade = calc_grade_of(calc_burden, &profile.calc_thresholds)?;

    let mut segment_labels = [StenosisClass::default(); SEGMENT_COUNT];
    for (label, plan) in segment_labels.iter_mut().zip(&segments) {
        *label = stenosis_class_of(plan.degree())?;
    }
    let severest_class = stenosis_class_of(severest_degree)?;
    debug_assert_eq!(severest_class.value() as usize, severest);

    Ok(PatientPlan {
        seed,
        segments,
        segment_labels,
        severest: severest_class,
        severest_degree,
        cad_rads: CadRadsClass::new(cad_rads as u8)?,
        calc_burden,
        calc_grade,
        edge_case,
    })
}

/// Partial-volume coverage of a boundary at signed distance `inside`.
fn coverage(inside: f64) -> f64 {
    (inside + 0.5).clamp(0.0, 1.0)
}

/// Rasterises one segment in HU, noise-free.
pub fn render_segment_hu(plan: &SegmentPlan, profile: &PhantomProfile) -> Vec<f64> {
    let n = MPR_SIZE;
    let radial: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - CENTER, (i % n) as f64 - CENTER);
            (x * x + y * y).sqrt()
        })
        .collect();
    let (bg, lumen, ca) = (profile.background_hu, profile.lumen_hu, profile.calcium_hu);
    let mut hu = vec![0.0; MPR_VOXELS];
    for z in 0..MPR_LENGTH {
        let r = plan.radius_at(z as f64);
        let slice = &mut hu[z * n * n..(z + 1) * n * n];
        for (v, d) in slice.iter_mut().zip(&radial) {
            *v = bg + (lumen - bg) * coverage(r - d);
        }
    }
    for blob in &plan.blobs {
        let wall = plan.radius_at(blob.z) + 0.6 * blob.radius;
        let (cx, cy) = (CENTER + wall * blob.angle.cos(), CENTER + wall * blob.angle.sin());
        let reach = blob.radius + 1.0;
        let span = |c: f64, hi: usize| {
            let lo = (c - reach).floor().max(0.0) as usize;
            let top = ((c + reach).ceil() as usize).min(hi - 1);
            lo..=top
        };
        for z in span(blob.z, MPR_LENGTH) {
            for y in span(cy, n) {
                for x in span(cx, n) {
                    let (dz, dy, dx) = (z as f64 - blob.z, y as f64 - cy, x as f64 - cx);
                    let dist = (dz * dz + dy * dy + dx * dx).sqrt();
                    let c = coverage(blob.radius - dist);
                    if c > 0.0 {
                        let v = &mut hu[(z * n + y) * n + x];
                        *v = v.max(bg + (ca - bg) * c);
                    }
                }
            }
        }
    }
    hu
}

/// Rendering phase of [`generate_patient`].
pub fn render_patient(plan: &PatientPlan, profile: &PhantomProfile) -> Result<PatientSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(1);
    let window = HuWindow {
        min: profile.hu_min,
        max: profile.hu_max,
    };
    let sigma = profile.noise_sigma_hu;
    let mut segments = Vec::with_capacity(SEGMENT_COUNT);
    for seg in &plan.segments {
        let hu = render_segment_hu(seg, profile);
        let voxels = hu
            .into_iter()
            .map(|v| {
                let noise: f64 = rng.sample(StandardNormal);
                window.normalize(v + sigma * noise) as f32
            })
            .collect();
        segments.push(MprStack::new(seg.segment, voxels)?);
    }
    Ok(PatientSample {
        seed: plan.seed,
        segments,
        segment_labels: plan.segment_labels,
        cad_rads: plan.cad_rads,
        calc_grade: plan.calc_grade,
        severest: plan.severest,
    })
}

/// Pure function of `(seed, profile)`.
pub fn generate_patient(seed: u64, profile: &PhantomProfile) -> Result<PatientSample> {
    render_patient(&plan_patient(seed, profile)?, profile)
}
