//! Synthetic coronary phantoms: label vocabulary, generator, slicing and
//! dataset storage.

pub mod dataset;
pub mod generate;
pub mod labels;
pub mod preprocess;
pub mod profile;

pub use dataset::{Dataset, DatasetFile, PatientSource, SyntheticCohort};
pub use generate::{generate_patient, plan_patient, PatientLabels, PatientPlan, PatientSample};
pub use labels::{calc_grade_of, stenosis_class_of, CadRadsClass, CalcGrade, SegmentId, StenosisClass, SEGMENT_COUNT};
pub use preprocess::{
    augment, hu_normalize, patient_view, slice_planes, AugmentDraw, MprStack, PatientView, PlaneView,
};
pub use profile::PhantomProfile;
