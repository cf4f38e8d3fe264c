//! Held-out test sets, sex-ratio-controlled training-validation samples and
//! leakage checks.
//!
//! Lesions are identified by their image id throughout (cleaning keeps one
//! image per lesion). Augmented copies are named `{parent}__aug{j}` and
//! carry a recipe derived from `(master_seed, parent, j)`, so the same copy
//! is byte-identical wherever it appears in the plan.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Label, LesionRecord, Sex};
use crate::error::{Error, Result};
use crate::imaging::AugmentRecipe;

const AUG_MARKER: &str = "__aug";

/// Id of the `j`-th augmented copy of `parent`.
pub fn augmented_id(parent: &str, j: usize) -> String {
    format!("{parent}{AUG_MARKER}{j}")
}

/// Parent id of an augmented copy, or `None` for an original id.
pub fn augmented_parent(id: &str) -> Option<&str> {
    let (parent, j) = id.rsplit_once(AUG_MARKER)?;
    (!parent.is_empty() && !j.is_empty() && j.bytes().all(|b| b.is_ascii_digit())).then_some(parent)
}

/// First eight bytes (little endian) of SHA-256 over the `|`-joined parts.
pub fn stable_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update(b"|");
        }
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub fn sample_seed(master_seed: u64, testset: usize, ratio: f64, rep: usize) -> u64 {
    stable_seed(&[&master_seed.to_string(), &testset.to_string(), &format!("{ratio:.2}"), &rep.to_string()])
}

pub fn augment_seed(master_seed: u64, parent: &str, j: usize) -> u64 {
    stable_seed(&[&master_seed.to_string(), "augment", parent, &j.to_string()])
}

/// Patient category used for test-set quotas; a patient with any cancerous
/// lesion counts as cancer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Category {
    pub sex: Sex,
    pub label: Label,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category { sex: Sex::Female, label: Label::NonCancer },
        Category { sex: Sex::Female, label: Label::Cancer },
        Category { sex: Sex::Male, label: Label::NonCancer },
        Category { sex: Sex::Male, label: Label::Cancer },
    ];

    pub fn name(self) -> String {
        format!("{}_{}", self.label.as_str(), self.sex.as_str())
    }
}

#[derive(Debug, Clone)]
struct Patient<'a> {
    id: &'a str,
    category: Category,
    lesions: Vec<&'a LesionRecord>,
}

/// Original (non-augmented) records grouped by patient, sorted by id.
fn patients(records: &[LesionRecord]) -> BTreeMap<&str, Patient<'_>> {
    let mut out: BTreeMap<&str, Patient> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.is_augmented) {
        let p = out.entry(r.patient_id.as_str()).or_insert_with(|| Patient {
            id: &r.patient_id,
            category: Category { sex: r.sex, label: Label::NonCancer },
            lesions: Vec::new(),
        });
        if r.label == Label::Cancer {
            p.category.label = Label::Cancer;
        }
        p.lesions.push(r);
    }
    out
}

/// Patients per category over the whole cohort.
pub fn category_counts(records: &[LesionRecord]) -> BTreeMap<Category, usize> {
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for p in patients(records).values() {
        *counts.get_mut(&p.category).expect("all categories present") += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSet {
    pub id: usize,
    pub patient_ids: Vec<String>,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedLesion {
    pub image_id: String,
    pub parent_image_id: String,
    pub patient_id: String,
    pub seed: u64,
    pub recipe: AugmentRecipe,
}

impl AugmentedLesion {
    pub fn new(parent: &LesionRecord, j: usize, master_seed: u64) -> Self {
        let seed = augment_seed(master_seed, &parent.image_id, j);
        Self {
            image_id: augmented_id(&parent.image_id, j),
            parent_image_id: parent.image_id.clone(),
            patient_id: parent.patient_id.clone(),
            seed,
            recipe: AugmentRecipe::from_seed(seed),
        }
    }

    /// Record for the copy: the parent's metadata under the copy's ids.
    pub fn record(&self, parent: &LesionRecord) -> LesionRecord {
        LesionRecord {
            image_id: self.image_id.clone(),
            lesion_id: augmented_id(&parent.lesion_id, self.copy_index()),
            is_augmented: true,
            augment_parent: Some(parent.image_id.clone()),
            ..parent.clone()
        }
    }

    pub fn copy_index(&self) -> usize {
        self.image_id
            .rsplit_once(AUG_MARKER)
            .and_then(|(_, j)| j.parse().ok())
            .expect("augmented ids are built by augmented_id")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainvalSample {
    pub testset: usize,
    pub ratio: f64,
    pub rep: usize,
    pub seed: u64,
    pub patient_ids: Vec<String>,
    pub n_female: usize,
    pub n_male: usize,
    /// Original lesions of the sampled patients.
    pub image_ids: Vec<String>,
    pub augmented: Vec<AugmentedLesion>,
}

impl TrainvalSample {
    /// All image ids, originals first.
    pub fn all_image_ids(&self) -> impl Iterator<Item = &str> {
        self.image_ids
            .iter()
            .map(String::as_str)
            .chain(self.augmented.iter().map(|a| a.image_id.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub n_testsets: usize,
    pub per_category: usize,
    pub ratios: Vec<f64>,
    pub reps: usize,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            n_testsets: 5,
            per_category: 26,
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            reps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub master_seed: u64,
    pub params: SplitParams,
    /// Patients per training-validation sample, shared by every ratio.
    pub sample_size: usize,
    pub test_sets: Vec<TestSet>,
    /// Sorted by (testset, ratio, rep).
    pub samples: Vec<TrainvalSample>,
}

impl SplitPlan {
    pub fn sample(&self, testset: usize, ratio: f64, rep: usize) -> Option<&TrainvalSample> {
        self.samples
            .iter()
            .find(|s| s.testset == testset && s.ratio == ratio && s.rep == rep)
    }

    pub fn test_set(&self, id: usize) -> Option<&TestSet> {
        self.test_sets.iter().find(|t| t.id == id)
    }

    /// Every distinct augmented copy in the plan, sorted by id.
    pub fn augmented_lesions(&self) -> Vec<&AugmentedLesion> {
        let mut seen = BTreeMap::new();
        for a in self.samples.iter().flat_map(|s| &s.augmented) {
            seen.entry(a.image_id.as_str()).or_insert(a);
        }
        seen.into_values().collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::metrics::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn lesion_ids_of(patients: &[&Patient]) -> Vec<String> {
    patients
        .iter()
        .flat_map(|p| p.lesions.iter().map(|r| r.image_id.clone()))
        .collect()
}

/// `n_testsets` disjoint test sets with `per_category` patients from each
/// category.
pub fn build_test_sets(records: &[LesionRecord], master_seed: u64, params: &SplitParams) -> Result<Vec<TestSet>> {
    let by_id = patients(records);
    let need = params.n_testsets * params.per_category;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_seed(&[&master_seed.to_string(), "test_sets"]));
    let mut sets: Vec<Vec<&Patient>> = vec![Vec::new(); params.n_testsets];
    for cat in Category::ALL {
        let mut pool: Vec<&Patient> = by_id.values().filter(|p| p.category == cat).collect();
        if pool.len() < need {
            return Err(Error::InsufficientPatients(format!(
                "{} has {} patients, {} test sets of {} need {need}",
                cat.name(),
                pool.len(),
                params.n_testsets,
                params.per_category
            )));
        }
        pool.shuffle(&mut rng);
        for (i, set) in sets.iter_mut().enumerate() {
            set.extend_from_slice(&pool[i * params.per_category..(i + 1) * params.per_category]);
        }
    }
    Ok(sets
        .into_iter()
        .enumerate()
        .map(|(id, mut ps)| {
            ps.sort_by_key(|p| p.id);
            TestSet {
                id,
                patient_ids: ps.iter().map(|p| p.id.to_string()).collect(),
                image_ids: lesion_ids_of(&ps),
            }
        })
        .collect())
}

/// Largest patient count every ratio can reach for every test set.
pub fn feasible_sample_size(records: &[LesionRecord], test_sets: &[TestSet]) -> usize {
    let by_id = patients(records);
    test_sets
        .iter()
        .map(|t| {
            let excluded: BTreeSet<&str> = t.patient_ids.iter().map(String::as_str).collect();
            let count = |sex| {
                by_id
                    .values()
                    .filter(|p| p.category.sex == sex && !excluded.contains(p.id))
                    .count()
            };
            count(Sex::Female).min(count(Sex::Male))
        })
        .min()
        .unwrap_or(0)
}

/// Number of female patients in a sample of `size` at `ratio`.
pub fn female_count(ratio: f64, size: usize) -> usize {
    (ratio * size as f64).round() as usize
}

/// Draws `n` patients of one sex, keeping the pool's cancer share as
/// closely as rounding allows.
fn draw_stratified<'a>(pool: &[&'a Patient<'a>], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<&'a Patient<'a>>> {
    let (mut cancer, mut benign): (Vec<&Patient>, Vec<&Patient>) =
        pool.iter().partition(|p| p.category.label == Label::Cancer);
    if n > pool.len() {
        return Err(Error::Unsatisfiable(format!("need {n} patients, only {} available", pool.len())));
    }
    let want = if pool.is_empty() {
        0
    } else {
        (n as f64 * cancer.len() as f64 / pool.len() as f64).round() as usize
    };
    let n_cancer = want.clamp(n.saturating_sub(benign.len()), cancer.len().min(n));
    cancer.shuffle(rng);
    benign.shuffle(rng);
    let mut out: Vec<&Patient> = cancer[..n_cancer].to_vec();
    out.extend_from_slice(&benign[..n - n_cancer]);
    Ok(out)
}

/// One training-validation sample for `test_set` at `ratio`, balanced to
/// 1:1 lesion classes by augmenting non-cancerous lesions.
pub fn build_trainval(
    records: &[LesionRecord],
    test_set: &TestSet,
    ratio: f64,
    rep: usize,
    sample_size: usize,
    master_seed: u64,
) -> Result<TrainvalSample> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("ratio {ratio} outside [0, 1]")));
    }
    let seed = sample_seed(master_seed, test_set.id, ratio, rep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_id = patients(records);
    let excluded: BTreeSet<&str> = test_set.patient_ids.iter().map(String::as_str).collect();
    let pool = |sex| -> Vec<&Patient> {
        by_id
            .values()
            .filter(|p| p.category.sex == sex && !excluded.contains(p.id))
            .collect()
    };
    let n_female = female_count(ratio, sample_size);
    let n_male = sample_size - n_female;
    let (females, males) = (pool(Sex::Female), pool(Sex::Male));
    if n_female > females.len() || n_male > males.len() {
        return Err(Error::Unsatisfiable(format!(
            "test set {} ratio {ratio}: need {n_female} female / {n_male} male patients, have {} / {}",
            test_set.id,
            females.len(),
            males.len()
        )));
    }
    let mut chosen = draw_stratified(&females, n_female, &mut rng)?;
    chosen.extend(draw_stratified(&males, n_male, &mut rng)?);
    chosen.sort_by_key(|p| p.id);

    let lesions: Vec<&LesionRecord> = chosen.iter().flat_map(|p| p.lesions.iter().copied()).collect();
    let n_cancer = lesions.iter().filter(|r| r.label == Label::Cancer).count();
    let mut benign: Vec<&LesionRecord> = lesions.iter().copied().filter(|r| r.label == Label::NonCancer).collect();
    let deficit = n_cancer.saturating_sub(benign.len());
    if deficit > 0 && benign.is_empty() {
        return Err(Error::Unsatisfiable(format!(
            "test set {} ratio {ratio} rep {rep}: no non-cancerous lesions to augment",
            test_set.id
        )));
    }
    benign.shuffle(&mut rng);
    let augmented = (0..deficit)
        .map(|i| AugmentedLesion::new(benign[i % benign.len()], i / benign.len() + 1, master_seed))
        .collect();

    Ok(TrainvalSample {
        testset: test_set.id,
        ratio,
        rep,
        seed,
        patient_ids: chosen.iter().map(|p| p.id.to_string()).collect(),
        n_female,
        n_male,
        image_ids: lesions.iter().map(|r| r.image_id.clone()).collect(),
        augmented,
    })
}

/// Test sets plus every (testset, ratio, rep) sample; reps run from 1.
pub fn build_plan(records: &[LesionRecord], master_seed: u64, params: &SplitParams) -> Result<SplitPlan> {
    let test_sets = build_test_sets(records, master_seed, params)?;
    let sample_size = feasible_sample_size(records, &test_sets);
    if sample_size == 0 {
        return Err(Error::InsufficientPatients("no patients left outside the test sets".into()));
    }
    let mut samples = Vec::with_capacity(test_sets.len() * params.ratios.len() * params.reps);
    let mut ratios = params.ratios.clone();
    ratios.sort_by(f64::total_cmp);
    for t in &test_sets {
        for &ratio in &ratios {
            for rep in 1..=params.reps {
                samples.push(build_trainval(records, t, ratio, rep, sample_size, master_seed)?);
            }
        }
    }
    Ok(SplitPlan {
        master_seed,
        params: params.clone(),
        sample_size,
        test_sets,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A training lesion belongs to a patient in the sample's test set.
    PatientInTest,
    /// An augmented lesion's parent is not in the same sample.
    OrphanAugmented,
    /// A test set contains an augmented lesion.
    AugmentedInTest,
    /// A test lesion belongs to a patient outside the test set.
    TestLesionOutsidePatients,
    /// An id that matches no record.
    UnknownLesion,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub testset: usize,
    /// `(ratio formatted to 2 dp, rep)` for sample violations.
    pub sample: Option<(String, usize)>,
    pub image_id: String,
}

fn check_sample(
    s: &TrainvalSample,
    test_patients: &BTreeSet<&str>,
    by_image: &BTreeMap<&str, &LesionRecord>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |kind, image_id: &str| Violation {
        kind,
        testset: s.testset,
        sample: Some((format!("{:.2}", s.ratio), s.rep)),
        image_id: image_id.to_string(),
    };
    let originals: BTreeSet<&str> = s.image_ids.iter().map(String::as_str).collect();
    for id in &s.image_ids {
        match by_image.get(id.as_str()) {
            Some(r) if test_patients.contains(r.patient_id.as_str()) => out.push(v(ViolationKind::PatientInTest, id)),
            Some(_) => {}
            None => match augmented_parent(id) {
                Some(parent) if !originals.contains(parent) => out.push(v(ViolationKind::OrphanAugmented, id)),
                Some(_) => {}
                None => out.push(v(ViolationKind::UnknownLesion, id)),
            },
        }
    }
    for a in &s.augmented {
        if !originals.contains(a.parent_image_id.as_str()) {
            out.push(v(ViolationKind::OrphanAugmented, &a.image_id));
        } else if test_patients.contains(a.patient_id.as_str()) {
            out.push(v(ViolationKind::PatientInTest, &a.image_id));
        }
    }
    out
}

/// All leakage violations in `plan`; empty for a sound plan.
pub fn verify_no_leakage(plan: &SplitPlan, records: &[LesionRecord]) -> Vec<Violation> {
    let by_image: BTreeMap<&str, &LesionRecord> = records
        .iter()
        .filter(|r| !r.is_augmented)
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let test_patients: BTreeMap<usize, BTreeSet<&str>> = plan
        .test_sets
        .iter()
        .map(|t| (t.id, t.patient_ids.iter().map(String::as_str).collect()))
        .collect();

    let mut out = Vec::new();
    for t in &plan.test_sets {
        let patients = &test_patients[&t.id];
        for id in &t.image_ids {
            let v = |kind| Violation {
                kind,
                testset: t.id,
                sample: None,
                image_id: id.clone(),
            };
            if augmented_parent(id).is_some() || by_image.get(id.as_str()).is_some_and(|r| r.is_augmented) {
                out.push(v(ViolationKind::AugmentedInTest));
            } else {
                match by_image.get(id.as_str()) {
                    Some(r) if !patients.contains(r.patient_id.as_str()) => {
                        out.push(v(ViolationKind::TestLesionOutsidePatients))
                    }
                    Some(_) => {}
                    None => out.push(v(ViolationKind::UnknownLesion)),
                }
            }
        }
    }
    let empty = BTreeSet::new();
    let per_sample: Vec<Vec<Violation>> = plan
        .samples
        .par_iter()
        .map(|s| check_sample(s, test_patients.get(&s.testset).unwrap_or(&empty), &by_image))
        .collect();
    out.extend(per_sample.into_iter().flatten());
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Diagnosis;

    fn record(image: &str, patient: &str, sex: Sex, cancer: bool) -> LesionRecord {
        LesionRecord {
            image_id: image.into(),
            lesion_id: format!("L{image}"),
            patient_id: patient.into(),
            sex,
            diagnosis: if cancer { Diagnosis::BCC } else { Diagnosis::NEV },
            label: if cancer { Label::Cancer } else { Label::NonCancer },
            is_augmented: false,
            augment_parent: None,
        }
    }

    /// `per_cat` patients in each category, each with one lesion; every
    /// third cancer patient also has a benign lesion.
    fn cohort(per_cat: usize) -> Vec<LesionRecord> {
        let mut out = Vec::new();
        for (ci, cat) in Category::ALL.iter().enumerate() {
            for i in 0..per_cat {
                let p = format!("P{ci}_{i:03}");
                let cancer = cat.label == Label::Cancer;
                out.push(record(&format!("{p}_a.png"), &p, cat.sex, cancer));
                if cancer && i % 3 == 0 {
                    out.push(record(&format!("{p}_b.png"), &p, cat.sex, false));
                }
            }
        }
        out
    }

    /// Cancer lesions outnumber benign ones, so class balancing adds copies.
    fn cancer_heavy(per_cat: usize) -> Vec<LesionRecord> {
        let mut out = cohort(per_cat);
        out.retain(|r| !r.image_id.ends_with("_b.png"));
        for (ci, cat) in Category::ALL.iter().enumerate() {
            if cat.label == Label::Cancer {
                for i in (0..per_cat).step_by(2) {
                    let p = format!("P{ci}_{i:03}");
                    out.push(record(&format!("{p}_c.png"), &p, cat.sex, true));
                }
            }
        }
        out
    }

    fn small_params() -> SplitParams {
        SplitParams {
            n_testsets: 2,
            per_category: 3,
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            reps: 2,
        }
    }

    #[test]
    fn augmented_ids_round_trip() {
        assert_eq!(augmented_parent(&augmented_id("PAT_1_2_3.png", 4)), Some("PAT_1_2_3.png"));
        assert_eq!(augmented_parent("PAT_1_2_3.png"), None);
        assert_eq!(augmented_parent("x__augY"), None);
        assert_eq!(augmented_parent("__aug1"), None);
    }

    #[test]
    fn stable_seed_is_fixed() {
        assert_eq!(stable_seed(&["a", "b"]), stable_seed(&["a", "b"]));
        assert_ne!(stable_seed(&["a", "b"]), stable_seed(&["ab"]));
        assert_ne!(sample_seed(1, 0, 0.25, 1), sample_seed(1, 0, 0.25, 2));
    }

    #[test]
    fn female_count_rounds_half_up() {
        assert_eq!(female_count(0.25, 10), 3);
        assert_eq!(female_count(0.75, 10), 8);
        assert_eq!(female_count(0.5, 7), 4);
        assert_eq!(female_count(1.0, 7), 7);
    }

    #[test]
    fn test_sets_have_quotas_and_are_disjoint() {
        let recs = cohort(10);
        let sets = build_test_sets(&recs, 7, &small_params()).unwrap();
        let by_id = patients(&recs);
        let mut seen = BTreeSet::new();
        for t in &sets {
            assert_eq!(t.patient_ids.len(), 12);
            for cat in Category::ALL {
                let n = t.patient_ids.iter().filter(|p| by_id[p.as_str()].category == cat).count();
                assert_eq!(n, 3);
            }
            for p in &t.patient_ids {
                assert!(seen.insert(p.clone()));
            }
        }
    }

    #[test]
    fn too_few_patients_is_an_error() {
        let recs = cohort(5);
        assert!(matches!(
            build_test_sets(&recs, 1, &small_params()),
            Err(Error::InsufficientPatients(_))
        ));
    }

    #[test]
    fn plan_is_sound_and_exact() {
        let recs = cohort(12);
        let plan = build_plan(&recs, 3, &small_params()).unwrap();
        assert_eq!(plan.samples.len(), 2 * 5 * 2);
        // 24 per sex minus 6 in each test set
        assert_eq!(plan.sample_size, 18);
        assert!(verify_no_leakage(&plan, &recs).is_empty());
        let by_image: BTreeMap<&str, &LesionRecord> = recs.iter().map(|r| (r.image_id.as_str(), r)).collect();
        for s in &plan.samples {
            assert_eq!(s.n_female, female_count(s.ratio, 18));
            let females = s
                .patient_ids
                .iter()
                .filter(|p| recs.iter().any(|r| &r.patient_id == *p && r.sex == Sex::Female))
                .count();
            assert_eq!(females, s.n_female);
            let cancer = s.image_ids.iter().filter(|i| by_image[i.as_str()].label == Label::Cancer).count();
            let benign = s.image_ids.len() - cancer + s.augmented.len();
            assert_eq!(cancer.max(benign), benign);
            if !s.augmented.is_empty() {
                assert_eq!(cancer, benign);
            }
        }
    }

    #[test]
    fn plan_is_deterministic_and_seed_sensitive() {
        let recs = cohort(12);
        let a = build_plan(&recs, 3, &small_params()).unwrap();
        let b = build_plan(&recs, 3, &small_params()).unwrap();
        assert_eq!(a, b);
        let c = build_plan(&recs, 4, &small_params()).unwrap();
        assert_ne!(a.test_sets, c.test_sets);
    }

    #[test]
    fn json_round_trip() {
        let recs = cohort(12);
        let plan = build_plan(&recs, 3, &small_params()).unwrap();
        assert_eq!(SplitPlan::from_json(&plan.to_json().unwrap()).unwrap(), plan);
    }

    #[test]
    fn moved_lesion_is_reported_once() {
        let recs = cohort(12);
        let mut plan = build_plan(&recs, 3, &small_params()).unwrap();
        let moved = plan.test_sets[0].image_ids[0].clone();
        let s = plan.samples.iter_mut().find(|s| s.testset == 0).unwrap();
        s.image_ids.push(moved.clone());
        let v = verify_no_leakage(&plan, &recs);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::PatientInTest);
        assert_eq!(v[0].image_id, moved);
    }

    #[test]
    fn augmented_lesion_in_test_is_reported() {
        let recs = cancer_heavy(12);
        let mut plan = build_plan(&recs, 3, &small_params()).unwrap();
        let s = plan.samples.iter_mut().find(|s| !s.augmented.is_empty()).unwrap();
        let a = s.augmented.pop().unwrap();
        let t = s.testset;
        plan.test_sets[t].image_ids.push(a.image_id.clone());
        let v = verify_no_leakage(&plan, &recs);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::AugmentedInTest);
    }

    #[test]
    fn orphaned_copy_is_reported() {
        let recs = cancer_heavy(12);
        let mut plan = build_plan(&recs, 3, &small_params()).unwrap();
        let s = plan.samples.iter_mut().find(|s| !s.augmented.is_empty()).unwrap();
        let parent = s.augmented[0].parent_image_id.clone();
        s.image_ids.retain(|i| *i != parent);
        let v = verify_no_leakage(&plan, &recs);
        assert!(!v.is_empty());
        assert!(v.iter().all(|x| x.kind == ViolationKind::OrphanAugmented));
    }

    #[test]
    fn copy_records_keep_parent_metadata() {
        let parent = record("IMG_1.png", "P1", Sex::Male, false);
        let a = AugmentedLesion::new(&parent, 2, 9);
        assert_eq!(a.copy_index(), 2);
        let r = a.record(&parent);
        assert_eq!(r.image_id, "IMG_1.png__aug2");
        assert_eq!(r.lesion_id, "LIMG_1.png__aug2");
        assert!(r.is_augmented);
        assert_eq!(r.augment_parent.as_deref(), Some("IMG_1.png"));
        assert_eq!(a, AugmentedLesion::new(&parent, 2, 9));
    }
}
