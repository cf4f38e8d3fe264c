//! Metadata ingest, cleaning and integrity audit.
//!
//! Cleaning drops patients without a recorded sex and keeps only the first
//! row (in file order) of every lesion id. The audit never mutates data: it
//! reports findings and can render them as a correction manifest which
//! ingest applies before cleaning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::image_dimensions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Female, Sex::Male];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Sex::Female => "f",
            Sex::Male => "m",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sex {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            other => Err(Error::Invalid(format!("unknown sex `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    BCC,
    SCC,
    MEL,
    ACK,
    NEV,
    SEK,
}

impl Diagnosis {
    pub fn as_str(self) -> &'static str {
        match self {
            Diagnosis::BCC => "BCC",
            Diagnosis::SCC => "SCC",
            Diagnosis::MEL => "MEL",
            Diagnosis::ACK => "ACK",
            Diagnosis::NEV => "NEV",
            Diagnosis::SEK => "SEK",
        }
    }
}

impl FromStr for Diagnosis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BCC" => Ok(Diagnosis::BCC),
            "SCC" => Ok(Diagnosis::SCC),
            "MEL" => Ok(Diagnosis::MEL),
            "ACK" => Ok(Diagnosis::ACK),
            "NEV" => Ok(Diagnosis::NEV),
            "SEK" => Ok(Diagnosis::SEK),
            _ => Err(Error::UnknownDiagnosis(s.trim().to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonCancer,
    Cancer,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Cancer => "cancer",
            Label::NonCancer => "non_cancer",
        }
    }

    pub fn as_binary(self) -> u8 {
        match self {
            Label::Cancer => 1,
            Label::NonCancer => 0,
        }
    }
}

impl FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cancer" | "1" => Ok(Label::Cancer),
            "non_cancer" | "0" => Ok(Label::NonCancer),
            other => Err(Error::Invalid(format!("unknown label `{other}`"))),
        }
    }
}

/// Diagnosis to binary label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiagnosisGrouping(BTreeMap<Diagnosis, Label>);

impl Default for DiagnosisGrouping {
    fn default() -> Self {
        use Diagnosis::*;
        Self(
            [
                (BCC, Label::Cancer),
                (SCC, Label::Cancer),
                (MEL, Label::Cancer),
                (ACK, Label::NonCancer),
                (NEV, Label::NonCancer),
                (SEK, Label::NonCancer),
            ]
            .into_iter()
            .collect(),
        )
    }
}

impl DiagnosisGrouping {
    pub fn new(map: BTreeMap<Diagnosis, Label>) -> Self {
        Self(map)
    }

    /// Builds a grouping from the diagnoses counted as cancer; all others
    /// are non-cancer.
    pub fn from_cancer_codes(codes: &[Diagnosis]) -> Self {
        use Diagnosis::*;
        Self(
            [BCC, SCC, MEL, ACK, NEV, SEK]
                .into_iter()
                .map(|d| (d, if codes.contains(&d) { Label::Cancer } else { Label::NonCancer }))
                .collect(),
        )
    }

    pub fn label(&self, d: Diagnosis) -> Result<Label> {
        self.0
            .get(&d)
            .copied()
            .ok_or_else(|| Error::UnknownDiagnosis(d.as_str().to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LesionRecord {
    pub image_id: String,
    pub lesion_id: String,
    pub patient_id: String,
    pub sex: Sex,
    pub diagnosis: Diagnosis,
    pub label: Label,
    pub is_augmented: bool,
    pub augment_parent: Option<String>,
}

/// One metadata row as read from disk, before cleaning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataRow {
    pub img_id: String,
    pub lesion_id: String,
    pub patient_id: String,
    pub gender: Option<String>,
    pub diagnostic: String,
}

const REQUIRED_COLUMNS: [&str; 5] = ["img_id", "lesion_id", "patient_id", "gender", "diagnostic"];

fn is_missing(value: &str) -> bool {
    matches!(
        value.trim().to_ascii_lowercase().as_str(),
        "" | "nan" | "na" | "n/a" | "none" | "null"
    )
}

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Metadata(format!("{} lacks column `{name}`", path.display())))
    };
    let idx: Vec<usize> = REQUIRED_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("").trim().to_string();
        let gender = field(3);
        rows.push(MetadataRow {
            img_id: field(0),
            lesion_id: field(1),
            patient_id: field(2),
            gender: (!is_missing(&gender)).then_some(gender),
            diagnostic: field(4),
        });
    }
    Ok(rows)
}

/// Writes clean records back in the metadata format.
pub fn write_metadata(path: &Path, records: &[LesionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REQUIRED_COLUMNS)?;
    for r in records {
        w.write_record([
            r.image_id.as_str(),
            r.lesion_id.as_str(),
            r.patient_id.as_str(),
            if r.sex == Sex::Female { "FEMALE" } else { "MALE" },
            r.diagnosis.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingSexPolicy {
    /// Drop every row of a patient with any row lacking sex.
    #[default]
    Patient,
    /// Drop only the rows lacking sex.
    Lesion,
}

impl FromStr for MissingSexPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "patient" => Ok(Self::Patient),
            "lesion" => Ok(Self::Lesion),
            other => Err(Error::Config(format!("unknown missing-sex policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionKind {
    Drop,
    ReassignLesionId,
    KeepFirst,
}

impl CorrectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionKind::Drop => "drop",
            CorrectionKind::ReassignLesionId => "reassign_lesion_id",
            CorrectionKind::KeepFirst => "keep_first",
        }
    }
}

impl FromStr for CorrectionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "drop" => Ok(Self::Drop),
            "reassign_lesion_id" => Ok(Self::ReassignLesionId),
            "keep_first" => Ok(Self::KeepFirst),
            other => Err(Error::Invalid(format!("unknown correction kind `{other}`"))),
        }
    }
}

/// One correction line: `kind, old_id, new_id`. `old_id` is the image id of
/// the affected row; `new_id` is only meaningful for lesion-id reassignment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Correction {
    pub kind: CorrectionKind,
    pub old_id: String,
    pub new_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrectionManifest {
    pub corrections: Vec<Correction>,
}

impl CorrectionManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut corrections = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Invalid(format!(
                    "correction line {} needs `kind, old_id, new_id`",
                    n + 1
                )));
            }
            corrections.push(Correction {
                kind: parts[0].parse()?,
                old_id: parts[1].to_string(),
                new_id: parts[2].to_string(),
            });
        }
        Ok(Self { corrections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# kind, old_id, new_id\n");
        for c in &self.corrections {
            s.push_str(&format!("{}, {}, {}\n", c.kind.as_str(), c.old_id, c.new_id));
        }
        s
    }

    /// Applies the manifest to metadata rows, matching rows by image id.
    pub fn apply(&self, rows: Vec<MetadataRow>) -> Vec<MetadataRow> {
        let mut drop = BTreeSet::new();
        let mut reassign = HashMap::new();
        for c in &self.corrections {
            match c.kind {
                CorrectionKind::Drop | CorrectionKind::KeepFirst => {
                    drop.insert(c.old_id.as_str());
                }
                CorrectionKind::ReassignLesionId => {
                    reassign.insert(c.old_id.as_str(), c.new_id.as_str());
                }
            }
        }
        rows.into_iter()
            .filter(|r| !drop.contains(r.img_id.as_str()))
            .map(|mut r| {
                if let Some(new) = reassign.get(r.img_id.as_str()) {
                    r.lesion_id = (*new).to_string();
                }
                r
            })
            .collect()
    }
}

/// File-name patterns tried, in order, to locate a mask. `{id}` is the
/// image id and `{stem}` the image id without extension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskNaming(pub Vec<String>);

impl Default for MaskNaming {
    fn default() -> Self {
        Self(vec![
            "{id}".to_string(),
            "{stem}_mask.png".to_string(),
            "{stem}.png".to_string(),
        ])
    }
}

impl MaskNaming {
    pub fn resolve(&self, mask_dir: &Path, image_id: &str) -> Option<PathBuf> {
        let stem = Path::new(image_id)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| image_id.to_string());
        self.0
            .iter()
            .map(|p| mask_dir.join(p.replace("{id}", image_id).replace("{stem}", &stem)))
            .find(|p| p.is_file())
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub grouping: DiagnosisGrouping,
    pub missing_sex: MissingSexPolicy,
    pub corrections: Option<CorrectionManifest>,
    pub mask_naming: MaskNaming,
}

/// Applies the cleaning rules to parsed rows without touching the disk.
pub fn clean_rows(rows: Vec<MetadataRow>, options: &IngestOptions) -> Result<Vec<LesionRecord>> {
    let rows = match &options.corrections {
        Some(m) => m.apply(rows),
        None => rows,
    };
    let missing_patients: BTreeSet<&str> = match options.missing_sex {
        MissingSexPolicy::Patient => rows
            .iter()
            .filter(|r| r.gender.is_none())
            .map(|r| r.patient_id.as_str())
            .collect(),
        MissingSexPolicy::Lesion => BTreeSet::new(),
    };
    let mut seen_lesions = BTreeSet::new();
    let mut out = Vec::new();
    for r in &rows {
        let Some(gender) = &r.gender else { continue };
        if missing_patients.contains(r.patient_id.as_str()) {
            continue;
        }
        if !seen_lesions.insert(r.lesion_id.clone()) {
            continue;
        }
        let sex: Sex = gender.parse()?;
        let diagnosis: Diagnosis = r.diagnostic.parse()?;
        out.push(LesionRecord {
            image_id: r.img_id.clone(),
            lesion_id: r.lesion_id.clone(),
            patient_id: r.patient_id.clone(),
            sex,
            diagnosis,
            label: options.grouping.label(diagnosis)?,
            is_augmented: false,
            augment_parent: None,
        });
    }
    Ok(out)
}

/// Reads metadata, checks files and returns cleaned records in file order.
pub fn ingest(metadata: &Path, image_dir: &Path, mask_dir: &Path, options: &IngestOptions) -> Result<Vec<LesionRecord>> {
    let rows = read_metadata(metadata)?;
    if !image_dir.is_dir() {
        return Err(Error::MissingFile(image_dir.to_path_buf()));
    }
    if !mask_dir.is_dir() {
        return Err(Error::MissingFile(mask_dir.to_path_buf()));
    }
    for r in &rows {
        let p = image_dir.join(&r.img_id);
        if !p.is_file() {
            return Err(Error::MissingFile(p));
        }
    }
    let records = clean_rows(rows, options)?;
    records
        .par_iter()
        .map(|r| {
            let mask = options
                .mask_naming
                .resolve(mask_dir, &r.image_id)
                .ok_or_else(|| Error::MissingFile(mask_dir.join(&r.image_id)))?;
            let image = image_dimensions(&image_dir.join(&r.image_id))?;
            let mask_dims = image_dimensions(&mask)?;
            if image != mask_dims {
                return Err(Error::DimensionMismatch {
                    image_id: r.image_id.clone(),
                    image,
                    mask: mask_dims,
                });
            }
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    DuplicateLesionIdAcrossPatients,
    IdenticalImageDistinctLesionIds,
    MissingSex,
    DuplicateLesionIdSamePatient,
    UnreadableImage,
}

impl FindingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DuplicateLesionIdAcrossPatients => "duplicate_lesion_id_across_patients",
            Self::IdenticalImageDistinctLesionIds => "identical_image_distinct_lesion_ids",
            Self::MissingSex => "missing_sex",
            Self::DuplicateLesionIdSamePatient => "duplicate_lesion_id_same_patient",
            Self::UnreadableImage => "unreadable_image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub kind: FindingKind,
    pub offending_ids: Vec<String>,
    pub suggested_fix: CorrectionKind,
    /// Image ids of the rows the suggested fix applies to.
    pub rows: Vec<String>,
}

/// Hash of decoded pixel values, so re-encoded copies still collide.
pub fn pixel_hash(path: &Path) -> Result<[u8; 32]> {
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let mut h = Sha256::new();
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    Ok(h.finalize().into())
}

/// Detects metadata and image-level inconsistencies.
pub fn audit(metadata: &Path, image_dir: &Path) -> Result<Vec<AuditFinding>> {
    let rows = read_metadata(metadata)?;
    let hashes: Vec<Result<[u8; 32]>> = rows
        .par_iter()
        .map(|r| pixel_hash(&image_dir.join(&r.img_id)))
        .collect();
    Ok(audit_rows(&rows, &hashes))
}

/// Audit over parsed rows and per-row pixel hashes (or decode errors).
pub fn audit_rows(rows: &[MetadataRow], hashes: &[Result<[u8; 32]>]) -> Vec<AuditFinding> {
    let mut findings = Vec::new();

    // missing sex, one finding per patient
    let mut missing: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.gender.is_none()) {
        missing.entry(r.patient_id.as_str()).or_default().push(r.img_id.clone());
    }
    for (patient, imgs) in missing {
        let mut ids = vec![patient.to_string()];
        ids.extend(imgs.iter().cloned());
        findings.push(AuditFinding {
            kind: FindingKind::MissingSex,
            offending_ids: ids,
            suggested_fix: CorrectionKind::Drop,
            rows: imgs,
        });
    }

    // lesion ids: group rows by lesion, in first-appearance order
    let mut by_lesion: BTreeMap<&str, Vec<&MetadataRow>> = BTreeMap::new();
    for r in rows {
        by_lesion.entry(r.lesion_id.as_str()).or_default().push(r);
    }
    for (lesion, group) in &by_lesion {
        let mut patients: Vec<&str> = Vec::new();
        for r in group {
            if !patients.contains(&r.patient_id.as_str()) {
                patients.push(&r.patient_id);
            }
        }
        if patients.len() > 1 {
            let mut ids = vec![lesion.to_string()];
            ids.extend(patients.iter().map(|p| p.to_string()));
            findings.push(AuditFinding {
                kind: FindingKind::DuplicateLesionIdAcrossPatients,
                offending_ids: ids,
                suggested_fix: CorrectionKind::ReassignLesionId,
                rows: group
                    .iter()
                    .filter(|r| r.patient_id != patients[0])
                    .map(|r| r.img_id.clone())
                    .collect(),
            });
        }
        for p in &patients {
            let imgs: Vec<String> = group
                .iter()
                .filter(|r| r.patient_id == *p)
                .map(|r| r.img_id.clone())
                .collect();
            if imgs.len() > 1 {
                let mut ids = vec![lesion.to_string()];
                ids.extend(imgs.iter().cloned());
                findings.push(AuditFinding {
                    kind: FindingKind::DuplicateLesionIdSamePatient,
                    offending_ids: ids,
                    suggested_fix: CorrectionKind::KeepFirst,
                    rows: imgs[1..].to_vec(),
                });
            }
        }
    }

    // identical decoded pixels under different lesion ids
    let mut by_hash: BTreeMap<[u8; 32], Vec<&MetadataRow>> = BTreeMap::new();
    for (r, h) in rows.iter().zip(hashes) {
        match h {
            Ok(h) => by_hash.entry(*h).or_default().push(r),
            Err(_) => findings.push(AuditFinding {
                kind: FindingKind::UnreadableImage,
                offending_ids: vec![r.img_id.clone()],
                suggested_fix: CorrectionKind::Drop,
                rows: vec![r.img_id.clone()],
            }),
        }
    }
    for group in by_hash.values() {
        let mut lesions: Vec<&str> = Vec::new();
        for r in group {
            if !lesions.contains(&r.lesion_id.as_str()) {
                lesions.push(&r.lesion_id);
            }
        }
        if lesions.len() > 1 {
            findings.push(AuditFinding {
                kind: FindingKind::IdenticalImageDistinctLesionIds,
                offending_ids: lesions.iter().map(|l| l.to_string()).collect(),
                suggested_fix: CorrectionKind::ReassignLesionId,
                rows: group
                    .iter()
                    .filter(|r| r.lesion_id != lesions[0])
                    .map(|r| r.img_id.clone())
                    .collect(),
            });
        }
    }

    findings.sort_by(|a, b| (a.kind, &a.offending_ids[0]).cmp(&(b.kind, &b.offending_ids[0])));
    findings
}

/// Renders findings as a correction manifest.
pub fn correction_manifest(findings: &[AuditFinding], rows: &[MetadataRow]) -> CorrectionManifest {
    let by_img: HashMap<&str, &MetadataRow> = rows.iter().map(|r| (r.img_id.as_str(), r)).collect();
    let mut corrections = Vec::new();
    for f in findings {
        for img in &f.rows {
            let new_id = match (f.kind, f.suggested_fix) {
                (FindingKind::DuplicateLesionIdAcrossPatients, _) => by_img
                    .get(img.as_str())
                    .map(|r| format!("{}_{}", r.lesion_id, r.patient_id))
                    .unwrap_or_default(),
                (FindingKind::IdenticalImageDistinctLesionIds, _) => f.offending_ids[0].clone(),
                _ => String::new(),
            };
            corrections.push(Correction {
                kind: f.suggested_fix,
                old_id: img.clone(),
                new_id,
            });
        }
    }
    CorrectionManifest { corrections }
}

pub fn format_audit_table(findings: &[AuditFinding]) -> String {
    let mut s = format!("{:<38} {:<20} {}\n", "kind", "suggested_fix", "offending_ids");
    for f in findings {
        s.push_str(&format!(
            "{:<38} {:<20} {}\n",
            f.kind.as_str(),
            f.suggested_fix.as_str(),
            f.offending_ids.join(";")
        ));
    }
    s.push_str(&format!("{} finding(s)\n", findings.len()));
    s
}

/// Lesion counts per (label, sex).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub non_cancer_female: usize,
    pub non_cancer_male: usize,
    pub cancer_female: usize,
    pub cancer_male: usize,
    pub total: usize,
}

pub fn summarize(records: &[LesionRecord]) -> DatasetSummary {
    let mut s = DatasetSummary::default();
    for r in records {
        match (r.label, r.sex) {
            (Label::NonCancer, Sex::Female) => s.non_cancer_female += 1,
            (Label::NonCancer, Sex::Male) => s.non_cancer_male += 1,
            (Label::Cancer, Sex::Female) => s.cancer_female += 1,
            (Label::Cancer, Sex::Male) => s.cancer_male += 1,
        }
    }
    s.total = s.non_cancer_female + s.non_cancer_male + s.cancer_female + s.cancer_male;
    s
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |n: usize| {
            if self.total == 0 {
                0.0
            } else {
                100.0 * n as f64 / self.total as f64
            }
        };
        let nc = self.non_cancer_female + self.non_cancer_male;
        let c = self.cancer_female + self.cancer_male;
        writeln!(f, "{:<22} {:>8} {:>8} {:>14}", "lesion type", "female", "male", "total (%)")?;
        writeln!(
            f,
            "{:<22} {:>8} {:>8} {:>7} ({:.1})",
            "non-cancerous", self.non_cancer_female, self.non_cancer_male, nc, pct(nc)
        )?;
        writeln!(
            f,
            "{:<22} {:>8} {:>8} {:>7} ({:.1})",
            "cancerous", self.cancer_female, self.cancer_male, c, pct(c)
        )?;
        writeln!(
            f,
            "{:<22} {:>8} {:>8} {:>7} (100)",
            "total",
            self.non_cancer_female + self.cancer_female,
            self.non_cancer_male + self.cancer_male,
            self.total
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(img: &str, lesion: &str, patient: &str, gender: Option<&str>, dx: &str) -> MetadataRow {
        MetadataRow {
            img_id: img.into(),
            lesion_id: lesion.into(),
            patient_id: patient.into(),
            gender: gender.map(Into::into),
            diagnostic: dx.into(),
        }
    }

    #[test]
    fn missing_sex_rows_are_dropped() {
        let rows = vec![
            row("a.png", "1", "P1", Some("FEMALE"), "BCC"),
            row("b.png", "2", "P2", None, "NEV"),
            row("c.png", "3", "P3", Some("MALE"), "SEK"),
        ];
        let out = clean_rows(rows, &IngestOptions::default()).unwrap();
        assert_eq!(out.iter().map(|r| r.image_id.as_str()).collect::<Vec<_>>(), ["a.png", "c.png"]);
    }

    #[test]
    fn missing_sex_policy_patient_vs_lesion() {
        let rows = vec![
            row("a.png", "1", "P1", Some("FEMALE"), "BCC"),
            row("b.png", "2", "P1", None, "NEV"),
        ];
        assert!(clean_rows(rows.clone(), &IngestOptions::default()).unwrap().is_empty());
        let lesion = IngestOptions {
            missing_sex: MissingSexPolicy::Lesion,
            ..Default::default()
        };
        assert_eq!(clean_rows(rows, &lesion).unwrap().len(), 1);
    }

    #[test]
    fn duplicate_lesion_keeps_first() {
        let rows = vec![
            row("a.png", "L1", "P1", Some("FEMALE"), "BCC"),
            row("b.png", "L1", "P1", Some("FEMALE"), "BCC"),
            row("c.png", "L2", "P1", Some("FEMALE"), "MEL"),
        ];
        let out = clean_rows(rows, &IngestOptions::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].image_id, "a.png");
    }

    #[test]
    fn grouping_assigns_labels() {
        let rows = ["BCC", "SCC", "MEL", "ACK", "NEV", "SEK"]
            .iter()
            .enumerate()
            .map(|(i, d)| row(&format!("{i}.png"), &i.to_string(), "P", Some("MALE"), d))
            .collect();
        let out = clean_rows(rows, &IngestOptions::default()).unwrap();
        let labels: Vec<Label> = out.iter().map(|r| r.label).collect();
        use Label::*;
        assert_eq!(labels, [Cancer, Cancer, Cancer, NonCancer, NonCancer, NonCancer]);
    }

    #[test]
    fn unknown_diagnosis_is_named() {
        let rows = vec![row("a.png", "1", "P1", Some("MALE"), "XYZ")];
        match clean_rows(rows, &IngestOptions::default()) {
            Err(Error::UnknownDiagnosis(code)) => assert_eq!(code, "XYZ"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn summary_counts() {
        assert_eq!(summarize(&[]), DatasetSummary::default());
        let mk = |sex, label| LesionRecord {
            image_id: String::new(),
            lesion_id: String::new(),
            patient_id: String::new(),
            sex,
            diagnosis: Diagnosis::BCC,
            label,
            is_augmented: false,
            augment_parent: None,
        };
        let s = summarize(&[
            mk(Sex::Female, Label::Cancer),
            mk(Sex::Female, Label::Cancer),
            mk(Sex::Male, Label::NonCancer),
        ]);
        assert_eq!(
            (s.non_cancer_female, s.non_cancer_male, s.cancer_female, s.cancer_male, s.total),
            (0, 1, 2, 0, 3)
        );
    }

    #[test]
    fn audit_flags_lesion_shared_across_patients() {
        let rows = vec![
            row("a.png", "L7", "P1", Some("FEMALE"), "BCC"),
            row("b.png", "L7", "P2", Some("MALE"), "BCC"),
        ];
        let hashes = vec![Ok([1; 32]), Ok([2; 32])];
        let f = audit_rows(&rows, &hashes);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::DuplicateLesionIdAcrossPatients);
        assert_eq!(f[0].offending_ids, ["L7", "P1", "P2"]);
    }

    #[test]
    fn audit_flags_identical_pixels() {
        let rows = vec![
            row("a.png", "L3", "P1", Some("FEMALE"), "BCC"),
            row("b.png", "L4", "P1", Some("FEMALE"), "BCC"),
        ];
        let f = audit_rows(&rows, &[Ok([9; 32]), Ok([9; 32])]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::IdenticalImageDistinctLesionIds);
        assert_eq!(f[0].offending_ids, ["L3", "L4"]);
    }

    #[test]
    fn audit_of_clean_rows_is_empty() {
        let rows: Vec<_> = (0..10)
            .map(|i| row(&format!("{i}.png"), &format!("L{i}"), &format!("P{i}"), Some("MALE"), "NEV"))
            .collect();
        let hashes: Vec<_> = (0..10u8).map(|i| Ok([i; 32])).collect();
        assert!(audit_rows(&rows, &hashes).is_empty());
    }

    #[test]
    fn undecodable_image_is_a_finding() {
        let rows = vec![row("a.png", "L1", "P1", Some("MALE"), "NEV")];
        let f = audit_rows(
            &rows,
            &[Err(Error::Decode {
                path: "a.png".into(),
                reason: "bad".into(),
            })],
        );
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FindingKind::UnreadableImage);
    }

    #[test]
    fn manifest_round_trip_and_apply() {
        let rows = vec![
            row("a.png", "L7", "P1", Some("FEMALE"), "BCC"),
            row("b.png", "L7", "P2", Some("MALE"), "BCC"),
        ];
        let findings = audit_rows(&rows, &[Ok([1; 32]), Ok([2; 32])]);
        let m = correction_manifest(&findings, &rows);
        let parsed = CorrectionManifest::parse(&m.render()).unwrap();
        assert_eq!(parsed, m);
        let fixed = m.apply(rows.clone());
        assert_eq!(fixed[1].lesion_id, "L7_P2");
        let opts = IngestOptions {
            corrections: Some(m),
            ..Default::default()
        };
        assert_eq!(clean_rows(rows, &opts).unwrap().len(), 2);
    }

    #[test]
    fn manifest_rejects_malformed_line() {
        assert!(CorrectionManifest::parse("drop, a.png").is_err());
        assert!(CorrectionManifest::parse("explode, a, b").is_err());
    }
}
