//! Accuracy and AUROC per run and sex, plus the prediction-file format
//! shared by every model that feeds the evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::Sex;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fraction of rows where `prob >= threshold` agrees with the label.
pub fn accuracy<T: Scalar>(probs: &[T], labels: &[u8], threshold: T) -> T {
    assert_eq!(probs.len(), labels.len());
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= threshold) == (l == 1))
        .count();
    T::from_usize_lossy(hits) / T::from_usize_lossy(probs.len())
}

/// Midranks (1-based) of `values`, ties sharing their average rank.
pub fn midranks<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged
        let r = T::from_usize_lossy(i + j + 2) / T::lit(2.0);
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// AUROC as P(score_pos > score_neg) + P(tie)/2 via midranks. `None` when
/// either class is absent.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[u8]) -> Option<T> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: T = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&r, _)| r)
        .sum();
    let np = T::from_usize_lossy(n_pos);
    let u = rank_sum - np * (np + T::one()) / T::lit(2.0);
    Some(u / (np * T::from_usize_lossy(n_neg)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelId {
    LR,
    CNN,
}

impl ModelId {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::LR => "LR",
            ModelId::CNN => "CNN",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LR" => Ok(ModelId::LR),
            "CNN" => Ok(ModelId::CNN),
            other => Err(Error::Invalid(format!("unknown model id `{other}`"))),
        }
    }
}

/// Identifies one trained model: (model, test set, sex ratio, repetition).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub model: ModelId,
    pub testset: usize,
    pub ratio: f64,
    pub rep: usize,
}

impl RunKey {
    fn sort_key(&self) -> (ModelId, usize, i64, usize) {
        (self.model, self.testset, (self.ratio * 1e6).round() as i64, self.rep)
    }

    /// `<testset>_<ratio>_<rep>.csv`
    pub fn file_name(&self) -> String {
        format!("{}_{:.2}_{}.csv", self.testset, self.ratio, self.rep)
    }
}

impl Eq for RunKey {}

impl PartialOrd for RunKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RunKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub image_id: String,
    pub patient_id: String,
    pub sex: Sex,
    pub true_label: u8,
    pub prob_cancer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub key: RunKey,
    pub rows: Vec<PredictionRow>,
}

pub const PREDICTION_HEADER: &str = "image_id,patient_id,sex,true_label,prob_cancer,model_id,testset_id,ratio,rep";

impl PredictionSet {
    /// Renders the file contents. Floats use the shortest representation
    /// that reads back to the same value.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(PREDICTION_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.image_id,
                r.patient_id,
                r.sex.as_str(),
                r.true_label,
                r.prob_cancer,
                self.key.model,
                self.key.testset,
                self.key.ratio,
                self.key.rep
            ));
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Prediction {
            path: origin.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end_matches('\r') == PREDICTION_HEADER => {}
            other => return Err(bad(format!("header must be `{PREDICTION_HEADER}`, got {other:?}"))),
        }
        let mut key: Option<RunKey> = None;
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(format!("line {}: expected 9 fields, got {}", n + 2, f.len())));
            }
            let num = |i: usize, what: &str| -> Result<f64> {
                f[i].trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("line {}: bad {what} `{}`", n + 2, f[i])))
            };
            let int = |i: usize, what: &str| -> Result<usize> {
                f[i].trim()
                    .parse::<usize>()
                    .map_err(|_| bad(format!("line {}: bad {what} `{}`", n + 2, f[i])))
            };
            let prob = num(4, "prob_cancer")?;
            if !(0.0..=1.0).contains(&prob) {
                return Err(bad(format!("line {}: probability {prob} outside [0, 1]", n + 2)));
            }
            let true_label = match f[3].trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("line {}: true_label `{other}`", n + 2))),
            };
            let row_key = RunKey {
                model: f[5].parse().map_err(|e: Error| bad(e.to_string()))?,
                testset: int(6, "testset_id")?,
                ratio: num(7, "ratio")?,
                rep: int(8, "rep")?,
            };
            match &key {
                None => key = Some(row_key),
                Some(k) if *k == row_key => {}
                Some(k) => return Err(bad(format!("line {}: run key {row_key:?} differs from {k:?}", n + 2))),
            }
            let image_id = f[0].to_string();
            if !seen.insert(image_id.clone()) {
                return Err(bad(format!("line {}: duplicate image {image_id}", n + 2)));
            }
            rows.push(PredictionRow {
                image_id,
                patient_id: f[1].to_string(),
                sex: f[2].parse().map_err(|e: Error| bad(e.to_string()))?,
                true_label,
                prob_cancer: prob,
            });
        }
        let key = key.ok_or_else(|| bad("no prediction rows".into()))?;
        Ok(Self { key, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Every `*.csv` under `dir` (recursively), sorted by path.
pub fn find_prediction_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let p = entry.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub key: RunKey,
    pub sex: Sex,
    pub acc: f64,
    /// Missing when the subgroup holds a single class.
    pub auroc: Option<f64>,
    pub n: usize,
}

/// Scores one prediction file per sex subgroup at threshold 0.5.
pub fn evaluate(set: &PredictionSet) -> Vec<MetricResult> {
    let mut out = Vec::new();
    for sex in Sex::ALL {
        let rows: Vec<&PredictionRow> = set.rows.iter().filter(|r| r.sex == sex).collect();
        if rows.is_empty() {
            warn!("run {:?} has no {} rows", set.key, sex);
            continue;
        }
        let probs: Vec<f64> = rows.iter().map(|r| r.prob_cancer).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.true_label).collect();
        let auc = auroc(&probs, &labels);
        if auc.is_none() {
            warn!("run {:?}: {} subgroup has a single class; AUROC undefined", set.key, sex);
        }
        out.push(MetricResult {
            key: set.key,
            sex,
            acc: accuracy(&probs, &labels, 0.5),
            auroc: auc,
            n: rows.len(),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Acc,
    Auroc,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Acc, Metric::Auroc];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Acc => "ACC",
            Metric::Auroc => "AUROC",
        }
    }

    pub fn value(self, r: &MetricResult) -> Option<f64> {
        match self {
            Metric::Acc => Some(r.acc),
            Metric::Auroc => r.auroc,
        }
    }
}

/// Sample mean and sample standard deviation.
pub fn mean_std<T: Scalar>(values: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    if values.len() < 2 {
        return (mean, T::nan());
    }
    let ss = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
    (mean, (ss / (n - T::one())).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub model: ModelId,
    pub metric: Metric,
    pub sex: Sex,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean ± std per (model, metric, sex), skipping missing values.
pub fn aggregate(results: &[MetricResult]) -> Vec<AggregateCell> {
    let mut cells: BTreeMap<(ModelId, Metric, Sex), Vec<f64>> = BTreeMap::new();
    for r in results {
        for m in Metric::ALL {
            if let Some(v) = m.value(r) {
                cells.entry((r.key.model, m, r.sex)).or_default().push(v);
            }
        }
    }
    cells
        .into_iter()
        .map(|((model, metric, sex), vals)| {
            if vals.len() < 2 {
                warn!("{model} {} {sex}: fewer than two runs", metric.as_str());
            }
            let (mean, std) = mean_std(&vals);
            AggregateCell {
                model,
                metric,
                sex,
                mean,
                std,
                n: vals.len(),
            }
        })
        .collect()
}

/// Table of mean ± std in the layout metrics × models.
pub fn format_summary_table(cells: &[AggregateCell]) -> String {
    let models: BTreeSet<ModelId> = cells.iter().map(|c| c.model).collect();
    let mut s = format!("{:<12}", "metric");
    for m in &models {
        s.push_str(&format!(" {:>18}", m.as_str()));
    }
    s.push('\n');
    for metric in Metric::ALL {
        for sex in Sex::ALL {
            s.push_str(&format!("{:<12}", format!("{}, {}", metric.as_str(), sex.short())));
            for m in &models {
                let cell = cells.iter().find(|c| c.model == *m && c.metric == metric && c.sex == sex);
                match cell {
                    Some(c) => s.push_str(&format!(" {:>18}", format!("{:.3} ± {:.3}", c.mean, c.std))),
                    None => s.push_str(&format!(" {:>18}", "n/a")),
                }
            }
            s.push('\n');
        }
    }
    s
}

const METRICS_HEADER: [&str; 8] = ["model_id", "testset_id", "ratio", "rep", "sex", "n", "acc", "auroc"];

pub fn render_metrics_csv(results: &[MetricResult]) -> String {
    let mut s = METRICS_HEADER.join(",");
    s.push('\n');
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.key.model,
            r.key.testset,
            r.key.ratio,
            r.key.rep,
            r.sex.as_str(),
            r.n,
            r.acc,
            r.auroc.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    s
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricResult>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let bad = |reason: String| Error::Invalid(format!("{}: {reason}", path.display()));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(format!("bad number `{}`", &rec[i])));
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(format!("bad integer `{}`", &rec[i])));
        out.push(MetricResult {
            key: RunKey {
                model: rec[0].parse()?,
                testset: int(1)?,
                ratio: num(2)?,
                rep: int(3)?,
            },
            sex: rec[4].parse()?,
            n: int(5)?,
            acc: num(6)?,
            auroc: if rec[7].is_empty() { None } else { Some(num(7)?) },
        });
    }
    Ok(out)
}
