//! Intensity windowing, 2.5D plane extraction and augmentation.

use std::f64::consts::PI;

use rand::Rng;

use super::generate::{PatientLabels, PatientSample};
use super::labels::{SegmentId, SEGMENT_COUNT};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Longitudinal extent of every segment stack.
pub const MPR_LENGTH: usize = 128;
/// Cross-section edge length.
pub const MPR_SIZE: usize = 32;
pub const MPR_VOXELS: usize = MPR_LENGTH * MPR_SIZE * MPR_SIZE;

/// Centerline position inside each cross-section.
pub const CENTER: f64 = (MPR_SIZE as f64 - 1.0) / 2.0;

pub const HU_MIN: f64 = -324.0;
pub const HU_MAX: f64 = 1176.0;

/// Clip-and-rescale HU window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HuWindow {
    pub min: f64,
    pub max: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        HuWindow {
            min: HU_MIN,
            max: HU_MAX,
        }
    }
}

impl HuWindow {
    pub fn normalize(&self, hu: f64) -> f64 {
        (hu.clamp(self.min, self.max) - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, unit: f64) -> f64 {
        unit * (self.max - self.min) + self.min
    }
}

/// Clips to [-324, 1176] HU and maps affinely onto [0, 1].
pub fn hu_normalize(raw: &Tensor) -> Tensor {
    let w = HuWindow::default();
    Tensor::new(
        raw.shape().to_vec(),
        raw.data().iter().map(|&v| w.normalize(v)).collect(),
    )
    .expect("same shape")
}

/// One segment's straightened volume, indexed `[z][y][x]`, normalised to
/// [0, 1] and stored at container precision.
#[derive(Clone, Debug, PartialEq)]
pub struct MprStack {
    pub segment: SegmentId,
    voxels: Vec<f32>,
}

impl MprStack {
    pub fn new(segment: SegmentId, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != MPR_VOXELS {
            return Err(Error::dim(format!(
                "stack needs {MPR_VOXELS} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(v) = voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("voxel value {v} outside [0, 1]")));
        }
        Ok(MprStack { segment, voxels })
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[(z * MPR_SIZE + y) * MPR_SIZE + x]
    }

    /// Volume as a `128×32×32` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![MPR_LENGTH, MPR_SIZE, MPR_SIZE],
            self.voxels.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("fixed extent")
    }
}

/// `P×128×32` longitudinal planes through the centerline.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneView {
    pub planes: Tensor,
    pub angle_offset: f64,
}

impl PlaneView {
    pub fn plane_count(&self) -> usize {
        self.planes.shape()[0]
    }
}

/// Cross-section translation applied before slicing, in whole voxels.
pub type Shift = (i32, i32);

/// Sample of the stack translated by `shift` (zero-filled) at a
/// fractional in-plane position, bilinear, zero outside the volume.
fn sample(stack: &MprStack, z: usize, y: f64, x: f64, shift: Shift) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wy * wx;
            if w == 0.0 {
                continue;
            }
            let (iy, ix) = (y0 as i64 + dy, x0 as i64 + dx);
            let (sy, sx) = (iy - i64::from(shift.1), ix - i64::from(shift.0));
            let inside = |v: i64| (0..MPR_SIZE as i64).contains(&v);
            if inside(iy) && inside(ix) && inside(sy) && inside(sx) {
                acc += w * f64::from(stack.at(z, sy as usize, sx as usize));
            }
        }
    }
    acc
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Extracts `planes` longitudinal slices; plane `p` passes through the
/// centerline at angle `angle_offset + p·π/planes` measured from the x axis.
pub fn slice_planes(stack: &MprStack, angle_offset: f64, planes: usize) -> Result<PlaneView> {
    slice_planes_shifted(stack, angle_offset, planes, (0, 0))
}

/// [`slice_planes`] on the stack translated by `shift`, without
/// materialising the translated volume.
pub fn slice_planes_shifted(stack: &MprStack, angle_offset: f64, planes: usize, shift: Shift) -> Result<PlaneView> {
    let mut data = vec![0.0; planes * MPR_LENGTH * MPR_SIZE];
    write_planes(stack, angle_offset, planes, shift, &mut data)?;
    Ok(PlaneView {
        planes: Tensor::new(vec![planes, MPR_LENGTH, MPR_SIZE], data)?,
        angle_offset,
    })
}

/// Writes `planes×128×32` values into `out`.
pub(crate) fn write_planes(
    stack: &MprStack,
    angle_offset: f64,
    planes: usize,
    shift: Shift,
    out: &mut [f64],
) -> Result<()> {
    if planes == 0 {
        return Err(Error::contract("at least one plane is required"));
    }
    if !angle_offset.is_finite() {
        return Err(Error::contract("plane angle must be finite"));
    }
    debug_assert_eq!(out.len(), planes * MPR_LENGTH * MPR_SIZE);
    for p in 0..planes {
        let theta = angle_offset + p as f64 * PI / planes as f64;
        let (c, s) = (snap(theta.cos()), snap(theta.sin()));
        let coords: Vec<(f64, f64)> = (0..MPR_SIZE)
            .map(|j| {
                let u = j as f64 - CENTER;
                (CENTER + u * s, CENTER + u * c)
            })
            .collect();
        let plane = &mut out[p * MPR_LENGTH * MPR_SIZE..(p + 1) * MPR_LENGTH * MPR_SIZE];
        for z in 0..MPR_LENGTH {
            for (j, &(y, x)) in coords.iter().enumerate() {
                plane[z * MPR_SIZE + j] = sample(stack, z, y, x, shift);
            }
        }
    }
    Ok(())
}

/// Translates every cross-section by `shift = (dx, dy)` voxels, filling
/// uncovered voxels with 0.
pub fn shift_cross_section(stack: &MprStack, shift: Shift) -> MprStack {
    let mut voxels = vec![0.0f32; MPR_VOXELS];
    let n = MPR_SIZE as i64;
    for z in 0..MPR_LENGTH {
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = (y - i64::from(shift.1), x - i64::from(shift.0));
                if (0..n).contains(&sy) && (0..n).contains(&sx) {
                    voxels[(z * MPR_SIZE + y as usize) * MPR_SIZE + x as usize] = stack.at(z, sy as usize, sx as usize);
                }
            }
        }
    }
    MprStack {
        segment: stack.segment,
        voxels,
    }
}

/// Per-segment augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub angle_offset: f64,
    pub shift: Shift,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        angle_offset: 0.0,
        shift: (0, 0),
    };

    /// Rotation about the centerline in [0, π) and a shift in {-2..2}².
    pub fn random(rng: &mut impl Rng) -> Self {
        AugmentDraw {
            angle_offset: rng.gen_range(0.0..PI),
            shift: (rng.gen_range(-2..=2), rng.gen_range(-2..=2)),
        }
    }
}

/// Independent draws for all segments of one patient.
pub fn augment_draws(rng: &mut impl Rng) -> [AugmentDraw; SEGMENT_COUNT] {
    std::array::from_fn(|_| AugmentDraw::random(rng))
}

/// Model-facing input of one patient: one plane view per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientView {
    pub labels: PatientLabels,
    pub views: Vec<PlaneView>,
}

/// Slices every segment with its own draw.
pub fn patient_view(
    sample: &PatientSample,
    draws: &[AugmentDraw; SEGMENT_COUNT],
    planes: usize,
) -> Result<PatientView> {
    let views = sample
        .segments
        .iter()
        .zip(draws)
        .map(|(stack, d)| slice_planes_shifted(stack, d.angle_offset, planes, d.shift))
        .collect::<Result<_>>()?;
    Ok(PatientView {
        labels: sample.labels(),
        views,
    })
}

/// Random rotation and shift per segment; labels pass through untouched.
pub fn augment(sample: &PatientSample, rng: &mut impl Rng, planes: usize) -> Result<PatientView> {
    patient_view(sample, &augment_draws(rng), planes)
}
