//! Binary dataset container and the patient sources training reads from.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header   magic "VGD1" | version u16 | count u64 | planes u16 | profile digest [32]
//! record   seed u64
//!          11 × (segment index u8, 128·32·32 × f32)
//!          11 × stenosis class u8 | cad_rads u8 | calc_grade u8
//! ```
//!
//! Records have a fixed size, so any patient can be read without scanning.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::generate::{plan_patient, render_patient, PatientLabels, PatientSample};
use super::labels::{CadRadsClass, CalcGrade, SegmentId, StenosisClass, SEGMENT_COUNT};
use super::preprocess::{MprStack, MPR_VOXELS};
use super::profile::PhantomProfile;
use crate::error::{Error, Result};
use crate::io::tmp_path;

pub const MAGIC: [u8; 4] = *b"VGD1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: u64 = 4 + 2 + 8 + 2 + 32;
pub const RECORD_BYTES: u64 = 8 + SEGMENT_COUNT as u64 * (1 + 4 * MPR_VOXELS as u64) + SEGMENT_COUNT as u64 + 2;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub count: u64,
    pub planes: u16,
    pub profile_digest: [u8; 32],
}

/// A fully materialised dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<PatientSample>,
}

fn write_header(w: &mut impl Write, h: &DatasetHeader) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&h.count.to_le_bytes())?;
    w.write_all(&h.planes.to_le_bytes())?;
    w.write_all(&h.profile_digest)?;
    Ok(())
}

fn write_record(w: &mut impl Write, s: &PatientSample) -> Result<()> {
    if s.segments.len() != SEGMENT_COUNT {
        return Err(Error::contract(format!(
            "patient {} has {} segments",
            s.seed,
            s.segments.len()
        )));
    }
    w.write_all(&s.seed.to_le_bytes())?;
    let mut buf = Vec::with_capacity(4 * MPR_VOXELS);
    for stack in &s.segments {
        w.write_all(&[stack.segment.index() as u8])?;
        buf.clear();
        for v in stack.voxels() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    for c in s.segment_labels {
        w.write_all(&[c.value()])?;
    }
    w.write_all(&[s.cad_rads.value(), s.calc_grade.value()])?;
    Ok(())
}

/// Streams samples to `path` through a temporary file renamed into place.
pub fn write_dataset<'a>(
    path: &Path,
    planes: u16,
    profile_digest: [u8; 32],
    samples: impl ExactSizeIterator<Item = Result<Cow<'a, PatientSample>>>,
) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_header(
            &mut w,
            &DatasetHeader {
                count: samples.len() as u64,
                planes,
                profile_digest,
            },
        )?;
        for s in samples {
            write_record(&mut w, &*s?)?;
        }
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_dataset_file(path: &Path, dataset: &Dataset) -> Result<()> {
    write_dataset(
        path,
        dataset.header.planes,
        dataset.header.profile_digest,
        dataset.samples.iter().map(|s| Ok(Cow::Borrowed(s))),
    )
}

/// Reader that tracks its byte offset for error reporting.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + done as u64,
                        format!("unexpected end of file while reading {what}"),
                    ))
                }
                Ok(n) => done += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

fn read_header<R: Read>(c: &mut Cursor<R>) -> Result<DatasetHeader> {
    let mut magic = [0u8; 4];
    c.fill(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"VGD1\"")));
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = c.u64("sample count")?;
    let planes = c.u16("plane count")?;
    let mut profile_digest = [0u8; 32];
    c.fill(&mut profile_digest, "profile digest")?;
    Ok(DatasetHeader {
        count,
        planes,
        profile_digest,
    })
}

fn read_record<R: Read>(c: &mut Cursor<R>, index: u64, labels_only: bool) -> Result<RecordParts> {
    let what = |part: &str| format!("{part} of record {index}");
    let start = c.offset;
    let seed = c.u64(&what("seed"))?;
    let mut segments = Vec::with_capacity(SEGMENT_COUNT);
    let mut raw = vec![0u8; 4 * MPR_VOXELS];
    for expected in SegmentId::ALL {
        let at = c.offset;
        let idx = c.u8(&what("segment index"))?;
        if idx as usize != expected.index() {
            return Err(Error::format(
                at,
                format!("record {index}: segment index {idx}, expected {}", expected.index()),
            ));
        }
        c.fill(&mut raw, &what("voxels"))?;
        if !labels_only {
            let voxels: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let stack =
                MprStack::new(expected, voxels).map_err(|e| Error::format(at + 1, format!("record {index}: {e}")))?;
            segments.push(stack);
        }
    }
    let mut labels = [StenosisClass::default(); SEGMENT_COUNT];
    for l in labels.iter_mut() {
        let at = c.offset;
        *l = StenosisClass::new(c.u8(&what("stenosis label"))?)
            .map_err(|e| Error::format(at, format!("record {index}: {e}")))?;
    }
    let at = c.offset;
    let cad = CadRadsClass::new(c.u8(&what("CAD-RADS label"))?)
        .map_err(|e| Error::format(at, format!("record {index}: {e}")))?;
    let calc = CalcGrade::new(c.u8(&what("calcification grade"))?)
        .map_err(|e| Error::format(at + 1, format!("record {index}: {e}")))?;
    debug_assert_eq!(c.offset - start, RECORD_BYTES);
    Ok(RecordParts {
        labels: PatientLabels {
            seed,
            segment_labels: labels,
            cad_rads: cad,
            calc_grade: calc,
        },
        segments,
    })
}

struct RecordParts {
    labels: PatientLabels,
    segments: Vec<MprStack>,
}

impl RecordParts {
    fn into_sample(self) -> PatientSample {
        let l = self.labels;
        PatientSample {
            seed: l.seed,
            segments: self.segments,
            segment_labels: l.segment_labels,
            cad_rads: l.cad_rads,
            calc_grade: l.calc_grade,
            severest: l.severest(),
        }
    }
}

/// Reads a whole dataset into memory.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut c = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let header = read_header(&mut c)?;
    let mut samples = Vec::with_capacity(header.count.min(1 << 16) as usize);
    for i in 0..header.count {
        samples.push(read_record(&mut c, i, false)?.into_sample());
    }
    let mut extra = [0u8; 1];
    if c.inner.read(&mut extra)? != 0 {
        return Err(Error::format(c.offset, "trailing bytes after last record"));
    }
    Ok(Dataset { header, samples })
}

/// Random access to patients without materialising the whole cohort.
pub trait PatientSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self, index: usize) -> Result<PatientLabels>;

    fn load(&self, index: usize) -> Result<Cow<'_, PatientSample>>;
}

impl PatientSource for [PatientSample] {
    fn len(&self) -> usize {
        <[PatientSample]>::len(self)
    }

    fn labels(&self, index: usize) -> Result<PatientLabels> {
        Ok(self[index].labels())
    }

    fn load(&self, index: usize) -> Result<Cow<'_, PatientSample>> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl PatientSource for Vec<PatientSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn labels(&self, index: usize) -> Result<PatientLabels> {
        self.as_slice().labels(index)
    }

    fn load(&self, index: usize) -> Result<Cow<'_, PatientSample>> {
        self.as_slice().load(index)
    }
}

/// Dataset file opened for random access; labels are indexed on open.
pub struct DatasetFile {
    pub header: DatasetHeader,
    labels: Vec<PatientLabels>,
    file: Mutex<File>,
    digest: [u8; 32],
}

impl DatasetFile {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        let header = {
            let mut c = Cursor {
                inner: BufReader::new(&mut file),
                offset: 0,
            };
            read_header(&mut c)?
        };
        let expected = HEADER_BYTES + header.count * RECORD_BYTES;
        if len < expected {
            let record = (len.saturating_sub(HEADER_BYTES)) / RECORD_BYTES;
            return Err(Error::format(
                len,
                format!("file truncated inside record {record} of {}", header.count),
            ));
        }
        if len > expected {
            return Err(Error::format(expected, "trailing bytes after last record"));
        }
        file.seek(SeekFrom::Start(0))?;
        let mut hasher = Sha256::new();
        let mut labels = Vec::with_capacity(header.count as usize);
        {
            let mut c = Cursor {
                inner: HashingReader {
                    inner: BufReader::with_capacity(1 << 20, &mut file),
                    hasher: &mut hasher,
                },
                offset: 0,
            };
            read_header(&mut c)?;
            for i in 0..header.count {
                labels.push(read_record(&mut c, i, true)?.labels);
            }
        }
        Ok(DatasetFile {
            header,
            labels,
            file: Mutex::new(file),
            digest: hasher.finalize().into(),
        })
    }

    /// SHA-256 of the file contents.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }
}

struct HashingReader<'h, R> {
    inner: R,
    hasher: &'h mut Sha256,
}

impl<R: Read> Read for HashingReader<'_, R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

impl PatientSource for DatasetFile {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn labels(&self, index: usize) -> Result<PatientLabels> {
        self.labels
            .get(index)
            .copied()
            .ok_or_else(|| Error::contract(format!("patient {index} out of range")))
    }

    fn load(&self, index: usize) -> Result<Cow<'_, PatientSample>> {
        if index >= self.labels.len() {
            return Err(Error::contract(format!("patient {index} out of range")));
        }
        let offset = HEADER_BYTES + index as u64 * RECORD_BYTES;
        let mut buf = vec![0u8; RECORD_BYTES as usize];
        {
            let mut f = self.file.lock().expect("dataset file lock");
            f.seek(SeekFrom::Start(offset))?;
            f.read_exact(&mut buf)?;
        }
        let mut c = Cursor {
            inner: buf.as_slice(),
            offset,
        };
        Ok(Cow::Owned(read_record(&mut c, index as u64, false)?.into_sample()))
    }
}

/// Patients regenerated from their seeds on every load.
pub struct SyntheticCohort {
    pub profile: PhantomProfile,
    seeds: Vec<u64>,
    labels: Vec<PatientLabels>,
}

impl SyntheticCohort {
    pub fn new(profile: PhantomProfile, seeds: Vec<u64>) -> Result<Self> {
        profile.validate()?;
        let labels = seeds
            .iter()
            .map(|&s| plan_patient(s, &profile).map(|p| PatientLabels::from(&p)))
            .collect::<Result<_>>()?;
        Ok(SyntheticCohort { profile, seeds, labels })
    }

    /// `count` consecutive seeds starting at `first_seed`.
    pub fn sequential(profile: PhantomProfile, first_seed: u64, count: usize) -> Result<Self> {
        Self::new(profile, (0..count as u64).map(|i| first_seed + i).collect())
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// Identifies the cohort: profile digest plus the seed list.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.profile.digest());
        for s in &self.seeds {
            h.update(s.to_le_bytes());
        }
        h.finalize().into()
    }
}

impl PatientSource for SyntheticCohort {
    fn len(&self) -> usize {
        self.seeds.len()
    }

    fn labels(&self, index: usize) -> Result<PatientLabels> {
        self.labels
            .get(index)
            .copied()
            .ok_or_else(|| Error::contract(format!("patient {index} out of range")))
    }

    fn load(&self, index: usize) -> Result<Cow<'_, PatientSample>> {
        let seed = *self
            .seeds
            .get(index)
            .ok_or_else(|| Error::contract(format!("patient {index} out of range")))?;
        let plan = plan_patient(seed, &self.profile)?;
        Ok(Cow::Owned(render_patient(&plan, &self.profile)?))
    }
}
