//! Slope t-test, Mann-Whitney U and Bonferroni thresholds, plus the report
//! that combines them over a metric grid.
//!
//! The Student-t and normal tails are computed natively: the t CDF through
//! the regularised incomplete beta function, the normal tail through the
//! regularised upper incomplete gamma function.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::Sex;
use crate::error::{Error, Result};
use crate::metrics::{Metric, MetricResult, ModelId};
use crate::scalar::Scalar;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        // reflection
        let pi = T::PI();
        return (pi / (pi * x).sin()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut a = T::lit(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a = a + T::lit(c) / (x + T::from_usize_lossy(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln()) + (x + half) * t.ln() - t + a.ln()
}

fn tiny<T: Scalar>() -> T {
    T::min_positive_value() / T::epsilon()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf<T: Scalar>(a: T, b: T, x: T) -> T {
    let one = T::one();
    let two = T::lit(2.0);
    let eps = T::epsilon();
    let fpmin = tiny::<T>();
    let (qab, qap, qam) = (a + b, a + one, a - one);
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < fpmin {
        d = fpmin;
    }
    d = one / d;
    let mut h = d;
    for m in 1..=300 {
        let m = T::from_usize_lossy(m);
        let m2 = two * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < fpmin {
            d = fpmin;
        }
        c = one + aa / c;
        if c.abs() < fpmin {
            c = fpmin;
        }
        d = one / d;
        h = h * d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < fpmin {
            d = fpmin;
        }
        c = one + aa / c;
        if c.abs() < fpmin {
            c = fpmin;
        }
        d = one / d;
        let del = d * c;
        h = h * del;
        if (del - one).abs() < eps {
            break;
        }
    }
    h
}

/// Regularised incomplete beta I_x(a, b).
pub fn incomplete_beta<T: Scalar>(a: T, b: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if x >= T::one() {
        return T::one();
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (T::one() - x).ln();
    let front = ln_front.exp();
    if x < (a + T::one()) / (a + b + T::lit(2.0)) {
        front * beta_cf(a, b, x) / a
    } else {
        T::one() - front * beta_cf(b, a, T::one() - x) / b
    }
}

/// Two-sided tail probability P(|T| ≥ |t|) for Student's t with `dof`
/// degrees of freedom.
pub fn student_t_two_sided<T: Scalar>(t: T, dof: T) -> T {
    if t.is_nan() {
        return T::nan();
    }
    if t.is_infinite() {
        return T::zero();
    }
    let x = dof / (dof + t * t);
    incomplete_beta(dof / T::lit(2.0), T::lit(0.5), x).max(T::zero()).min(T::one())
}

/// Regularised upper incomplete gamma Q(a, x).
pub fn gamma_q<T: Scalar>(a: T, x: T) -> T {
    let one = T::one();
    if x <= T::zero() {
        return one;
    }
    let eps = T::epsilon();
    let ln_front = -x + a * x.ln() - ln_gamma(a);
    if x < a + one {
        // series for P
        let mut ap = a;
        let mut del = one / a;
        let mut sum = del;
        for _ in 0..1000 {
            ap = ap + one;
            del = del * x / ap;
            sum = sum + del;
            if del.abs() < sum.abs() * eps {
                break;
            }
        }
        one - sum * ln_front.exp()
    } else {
        // continued fraction for Q
        let fpmin = tiny::<T>();
        let mut b = x + one - a;
        let mut c = one / fpmin;
        let mut d = one / b;
        let mut h = d;
        for i in 1..1000 {
            let i = T::from_usize_lossy(i);
            let an = -i * (i - a);
            b = b + T::lit(2.0);
            d = an * d + b;
            if d.abs() < fpmin {
                d = fpmin;
            }
            c = b + an / c;
            if c.abs() < fpmin {
                c = fpmin;
            }
            d = one / d;
            let del = d * c;
            h = h * del;
            if (del - one).abs() < eps {
                break;
            }
        }
        ln_front.exp() * h
    }
}

/// Two-sided standard normal tail P(|Z| ≥ |z|) = erfc(|z|/√2).
pub fn normal_two_sided<T: Scalar>(z: T) -> T {
    let z = z.abs();
    gamma_q(T::lit(0.5), z * z / T::lit(2.0)).max(T::zero()).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeTest<T> {
    pub slope: T,
    pub intercept: T,
    pub t_statistic: T,
    pub p_value: T,
    pub dof: usize,
    /// Residual variance was zero with a nonzero slope; p is reported as 0.
    pub degenerate: bool,
}

/// Ordinary least squares of `y` on `x` with a two-sided t-test of H₀: m = 0.
pub fn slope_t_test<T: Scalar>(x: &[T], y: &[T]) -> Result<SlopeTest<T>> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} x values but {} y values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Dimension(format!("slope test needs at least 3 points, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slope test input".into()));
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(Error::ConstantInput);
    }
    let nf = T::from_usize_lossy(n);
    let mx = x.iter().copied().sum::<T>() / nf;
    let my = y.iter().copied().sum::<T>() / nf;
    let dof = n - 2;
    if y.iter().all(|&v| v == y[0]) {
        return Ok(SlopeTest {
            slope: T::zero(),
            intercept: y[0],
            t_statistic: T::zero(),
            p_value: T::one(),
            dof,
            degenerate: false,
        });
    }
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    let mut syy = T::zero();
    for (&xi, &yi) in x.iter().zip(y) {
        let (dx, dy) = (xi - mx, yi - my);
        sxx = sxx + dx * dx;
        sxy = sxy + dx * dy;
        syy = syy + dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - intercept - slope * xi;
            r * r
        })
        .sum::<T>();
    if sse <= syy * T::epsilon() * T::epsilon() * nf {
        return Ok(SlopeTest {
            slope,
            intercept,
            t_statistic: if slope > T::zero() { T::infinity() } else { T::neg_infinity() },
            p_value: T::zero(),
            dof,
            degenerate: true,
        });
    }
    let se = (sse / T::from_usize_lossy(dof) / sxx).sqrt();
    let t = slope / se;
    Ok(SlopeTest {
        slope,
        intercept,
        t_statistic: t,
        p_value: student_t_two_sided(t, T::from_usize_lossy(dof)),
        dof,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney<T> {
    /// U for the first sample: pairs with a > b plus half the ties.
    pub u: T,
    pub p_value: T,
    pub method: MwuMethod,
}

/// Largest pooled sample size for which the exact branch is used.
pub const EXACT_LIMIT: usize = 16;

/// Doubled midranks of the pooled sample; integral by construction.
fn doubled_ranks<T: Scalar>(pooled: &[T]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].partial_cmp(&pooled[j]).expect("finite values"));
    let mut ranks = vec![0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1, mean (i+j+2)/2
        let r = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn validate_samples<T: Scalar>(a: &[T], b: &[T]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Dimension("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Mann-Whitney input".into()));
    }
    Ok(())
}

/// Returns (U of `a`, doubled ranks of the pooled sample).
fn u_statistic<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<u64>) {
    let pooled: Vec<T> = a.iter().chain(b).copied().collect();
    let ranks = doubled_ranks(&pooled);
    let r_a: u64 = ranks[..a.len()].iter().sum();
    let n1 = a.len() as u64;
    // U = R/2 − n1(n1+1)/2, with R the doubled rank sum
    let u2 = r_a - n1 * (n1 + 1);
    (T::from_u64(u2).unwrap() / T::lit(2.0), ranks)
}

/// Exact two-sided permutation p-value, conditional on the observed ties:
/// the share of all C(n, n1) label assignments whose U lies at least as
/// far from n1·n2/2 as the observed one.
pub fn mann_whitney_exact<T: Scalar>(a: &[T], b: &[T]) -> Result<MannWhitney<T>> {
    validate_samples(a, b)?;
    let (u, ranks) = u_statistic(a, b);
    let n1 = a.len();
    let total: u64 = ranks.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0f64; total as usize + 1]; n1 + 1];
    counts[0][0] = 1.0;
    for &r in &ranks {
        for k in (1..=n1).rev() {
            let (lower, upper) = counts.split_at_mut(k);
            for s in (r as usize..=total as usize).rev() {
                upper[0][s] += lower[k - 1][s - r as usize];
            }
        }
    }
    let n1u = n1 as u64;
    let n2u = b.len() as u64;
    let offset = n1u * (n1u + 1);
    // in doubled-U units, centre is n1·n2
    let centre = (n1u * n2u) as i64;
    let observed = (u_statistic_doubled(a, &ranks) as i64 - centre).abs();
    let mut extreme = 0.0;
    let mut all = 0.0;
    for (s, &c) in counts[n1].iter().enumerate() {
        if c == 0.0 || (s as u64) < offset {
            continue;
        }
        all += c;
        let u2 = s as i64 - offset as i64;
        if (u2 - centre).abs() >= observed {
            extreme += c;
        }
    }
    Ok(MannWhitney {
        u,
        p_value: T::lit(extreme / all).min(T::one()),
        method: MwuMethod::Exact,
    })
}

fn u_statistic_doubled<T>(a: &[T], ranks: &[u64]) -> u64 {
    let n1 = a.len() as u64;
    ranks[..a.len()].iter().sum::<u64>() - n1 * (n1 + 1)
}

/// Normal approximation with tie-corrected variance and a continuity
/// correction of ½.
pub fn mann_whitney_normal<T: Scalar>(a: &[T], b: &[T]) -> Result<MannWhitney<T>> {
    validate_samples(a, b)?;
    let (u, ranks) = u_statistic(a, b);
    let n1 = T::from_usize_lossy(a.len());
    let n2 = T::from_usize_lossy(b.len());
    let n = n1 + n2;
    let mut tie_sizes: BTreeMap<u64, u64> = BTreeMap::new();
    for &r in &ranks {
        *tie_sizes.entry(r).or_default() += 1;
    }
    let tie_term: T = tie_sizes
        .values()
        .map(|&t| {
            let t = T::from_u64(t).unwrap();
            t * t * t - t
        })
        .sum();
    let var = n1 * n2 / T::lit(12.0) * ((n + T::one()) - tie_term / (n * (n - T::one())));
    let mu = n1 * n2 / T::lit(2.0);
    let dev = (u - mu).abs() - T::lit(0.5);
    let p = if var <= T::zero() || dev <= T::zero() {
        T::one()
    } else {
        normal_two_sided(dev / var.sqrt())
    };
    Ok(MannWhitney {
        u,
        p_value: p,
        method: MwuMethod::Normal,
    })
}

/// Exact when `|a| + |b| ≤ 16`, normal approximation otherwise.
pub fn mann_whitney_u<T: Scalar>(a: &[T], b: &[T]) -> Result<MannWhitney<T>> {
    if a.len() + b.len() <= EXACT_LIMIT {
        mann_whitney_exact(a, b)
    } else {
        mann_whitney_normal(a, b)
    }
}

/// Bonferroni-corrected threshold α / m.
pub fn bonferroni<T: Scalar>(alpha: T, m: usize) -> T {
    assert!(m >= 1, "Bonferroni correction needs at least one test");
    alpha / T::from_usize_lossy(m)
}

/// How runs become regression points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlopeMode {
    /// Every (testset, rep) run is one point.
    #[default]
    Pooled,
    /// Runs are averaged over reps within each (testset, ratio) first.
    TestsetMean,
}

impl std::str::FromStr for SlopeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pooled" | "true" => Ok(Self::Pooled),
            "testset_mean" | "per_testset" | "false" => Ok(Self::TestsetMean),
            other => Err(Error::Config(format!("unknown slope mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsParams {
    pub alpha: f64,
    /// Number of slope tests in the correction family.
    pub slope_family: usize,
    /// Number of tests in the Mann-Whitney family.
    pub mwu_family: usize,
    pub mode: SlopeMode,
}

impl Default for StatsParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            slope_family: 8,
            mwu_family: 4,
            mode: SlopeMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeEntry {
    pub model: ModelId,
    pub metric: Metric,
    pub sex: Sex,
    pub points: usize,
    /// `None` when the cell has too few usable runs.
    pub test: Option<SlopeTest<f64>>,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwuEntry {
    pub model: ModelId,
    pub metric: Metric,
    pub n_female: usize,
    pub n_male: usize,
    pub mean_female: Option<f64>,
    pub mean_male: Option<f64>,
    pub test: Option<MannWhitney<f64>>,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub params: StatsParams,
    pub slope_threshold: f64,
    pub mwu_threshold: f64,
    pub slopes: Vec<SlopeEntry>,
    pub mann_whitney: Vec<MwuEntry>,
    /// Distinct test sets seen per model.
    pub coverage: BTreeMap<String, Vec<usize>>,
}

fn regression_points(results: &[&MetricResult], metric: Metric, mode: SlopeMode) -> (Vec<f64>, Vec<f64>) {
    let usable = results.iter().filter_map(|r| metric.value(r).map(|v| (r, v)));
    match mode {
        SlopeMode::Pooled => usable.map(|(r, v)| (r.key.ratio, v)).unzip(),
        SlopeMode::TestsetMean => {
            let mut cells: BTreeMap<(usize, u64), (f64, f64, usize)> = BTreeMap::new();
            for (r, v) in usable {
                let e = cells.entry((r.key.testset, r.key.ratio.to_bits())).or_insert((r.key.ratio, 0.0, 0));
                e.1 += v;
                e.2 += 1;
            }
            cells.values().map(|&(x, s, c)| (x, s / c as f64)).unzip()
        }
    }
}

/// Slope tests for every (model, metric, sex) cell and a female-vs-male
/// Mann-Whitney test on AUROC for every model.
pub fn build_report(results: &[MetricResult], params: &StatsParams) -> StatReport {
    let slope_threshold = bonferroni(params.alpha, params.slope_family);
    let mwu_threshold = bonferroni(params.alpha, params.mwu_family);
    let mut by_cell: BTreeMap<(ModelId, Sex), Vec<&MetricResult>> = BTreeMap::new();
    let mut coverage: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for r in results {
        by_cell.entry((r.key.model, r.sex)).or_default().push(r);
        let sets = coverage.entry(r.key.model.to_string()).or_default();
        if !sets.contains(&r.key.testset) {
            sets.push(r.key.testset);
        }
    }
    for sets in coverage.values_mut() {
        sets.sort_unstable();
    }
    let models: Vec<ModelId> = by_cell.keys().map(|k| k.0).collect::<std::collections::BTreeSet<_>>().into_iter().collect();

    let empty = Vec::new();
    let mut slopes = Vec::new();
    for &model in &models {
        for metric in Metric::ALL {
            for sex in Sex::ALL {
                let rows = by_cell.get(&(model, sex)).unwrap_or(&empty);
                let missing = rows.iter().filter(|r| metric.value(r).is_none()).count();
                if missing > 0 {
                    warn!("{model} {} {sex}: {missing} runs have no value and are excluded", metric.as_str());
                }
                let (x, y) = regression_points(rows, metric, params.mode);
                let test = match slope_t_test(&x, &y) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        warn!("{model} {} {sex}: slope test unavailable: {e}", metric.as_str());
                        None
                    }
                };
                slopes.push(SlopeEntry {
                    model,
                    metric,
                    sex,
                    points: x.len(),
                    reject: test.is_some_and(|t| t.p_value < slope_threshold),
                    test,
                });
            }
        }
    }

    let mut mann_whitney = Vec::new();
    for &model in &models {
        let metric = Metric::Auroc;
        let values = |sex: Sex| -> Vec<f64> {
            by_cell
                .get(&(model, sex))
                .map(|rows| rows.iter().filter_map(|r| metric.value(r)).collect())
                .unwrap_or_default()
        };
        let (f, m) = (values(Sex::Female), values(Sex::Male));
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let test = mann_whitney_u(&f, &m).ok();
        mann_whitney.push(MwuEntry {
            model,
            metric,
            n_female: f.len(),
            n_male: m.len(),
            mean_female: mean(&f),
            mean_male: mean(&m),
            reject: test.is_some_and(|t| t.p_value < mwu_threshold),
            test,
        });
    }

    StatReport {
        params: *params,
        slope_threshold,
        mwu_threshold,
        slopes,
        mann_whitney,
        coverage,
    }
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

impl StatReport {
    /// Human-readable table: one row per test, p-values next to their
    /// corrected thresholds.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mode = match self.params.mode {
            SlopeMode::Pooled => "pooled runs",
            SlopeMode::TestsetMean => "per-testset means",
        };
        let _ = writeln!(
            out,
            "Regression t-test (H0: m = 0, {mode}), threshold {}/{} = {}",
            self.params.alpha, self.params.slope_family, self.slope_threshold
        );
        let _ = writeln!(
            out,
            "{:<6} {:<6} {:<7} {:>7} {:>10} {:>9} {:>10}  reject",
            "model", "metric", "sex", "points", "slope", "t", "p"
        );
        for e in &self.slopes {
            match &e.test {
                Some(t) => {
                    let _ = writeln!(
                        out,
                        "{:<6} {:<6} {:<7} {:>7} {:>10.4} {:>9.3} {:>10}  {}{}",
                        e.model.as_str(),
                        e.metric.as_str(),
                        e.sex.as_str(),
                        e.points,
                        t.slope,
                        t.t_statistic,
                        fmt_p(t.p_value),
                        if e.reject { "yes" } else { "no" },
                        if t.degenerate { " (zero residual)" } else { "" }
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<6} {:<6} {:<7} {:>7} {:>10} {:>9} {:>10}  missing",
                        e.model.as_str(),
                        e.metric.as_str(),
                        e.sex.as_str(),
                        e.points,
                        "-",
                        "-",
                        "-"
                    );
                }
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "Mann-Whitney U test (female vs male), threshold {}/{} = {}",
            self.params.alpha, self.params.mwu_family, self.mwu_threshold
        );
        let _ = writeln!(
            out,
            "{:<6} {:<6} {:>5} {:>5} {:>8} {:>8} {:>9} {:>10} {:<7} reject",
            "model", "metric", "n_f", "n_m", "mean_f", "mean_m", "U", "p", "method"
        );
        for e in &self.mann_whitney {
            let m = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            match &e.test {
                Some(t) => {
                    let _ = writeln!(
                        out,
                        "{:<6} {:<6} {:>5} {:>5} {:>8} {:>8} {:>9} {:>10} {:<7} {}",
                        e.model.as_str(),
                        e.metric.as_str(),
                        e.n_female,
                        e.n_male,
                        m(e.mean_female),
                        m(e.mean_male),
                        t.u,
                        fmt_p(t.p_value),
                        match t.method {
                            MwuMethod::Exact => "exact",
                            MwuMethod::Normal => "normal",
                        },
                        if e.reject { "yes" } else { "no" }
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<6} {:<6} {:>5} {:>5} {:>8} {:>8} {:>9} {:>10} {:<7} missing",
                        e.model.as_str(),
                        e.metric.as_str(),
                        e.n_female,
                        e.n_male,
                        m(e.mean_female),
                        m(e.mean_male),
                        "-",
                        "-",
                        "-"
                    );
                }
            }
        }
        if !self.coverage.is_empty() {
            let _ = writeln!(out);
            for (model, sets) in &self.coverage {
                let list: Vec<String> = sets.iter().map(usize::to_string).collect();
                let _ = writeln!(out, "{model} test sets covered: {}", list.join(", "));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0f64)).abs() < 1e-14);
        assert!((ln_gamma(5.0f64) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5f64) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn t_tail_known_values() {
        // dof 1 is Cauchy: P(|T| > 1) = 1/2
        assert!((student_t_two_sided(1.0f64, 1.0) - 0.5).abs() < 1e-14);
        assert_eq!(student_t_two_sided(0.0f64, 7.0), 1.0);
        // dof 2: P(|T| > t) = 1 − t/sqrt(2 + t²)
        let t = 1.7f64;
        assert!((student_t_two_sided(t, 2.0) - (1.0 - t / (2.0 + t * t).sqrt())).abs() < 1e-14);
    }

    #[test]
    fn normal_tail_known_values() {
        assert!((normal_two_sided(1.959963984540054f64) - 0.05).abs() < 1e-12);
        assert_eq!(normal_two_sided(0.0f64), 1.0);
        assert!((normal_two_sided(1.0f64) - 0.3173105078629141).abs() < 1e-13);
    }

    #[test]
    fn flat_regression() {
        let t = slope_t_test(&[0.0, 0.5, 1.0, 0.25], &[0.3; 4]).unwrap();
        assert_eq!((t.slope, t.t_statistic, t.p_value), (0.0, 0.0, 1.0));
        assert_eq!(t.dof, 2);
    }

    #[test]
    fn exact_line_is_degenerate() {
        let t = slope_t_test(&[0.0f64, 1.0, 2.0, 3.0], &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.p_value, 0.0);
        assert!((t.slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slope_preconditions() {
        assert!(slope_t_test(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(slope_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn affine_rescaling_of_x_keeps_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..25).map(|i| (i % 5) as f64 * 0.25).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.02 * v + 0.05 * rng.gen::<f64>()).collect();
        let a = slope_t_test(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| 3.7 * v - 12.0).collect();
        let b = slope_t_test(&xs, &y).unwrap();
        assert!((a.p_value - b.p_value).abs() < 1e-10);
    }

    #[test]
    fn u_statistics_sum_to_product() {
        let a = [0.3, 0.5, 0.5, 0.9];
        let b = [0.5, 0.1, 0.7];
        let ab = mann_whitney_u(&a, &b).unwrap();
        let ba = mann_whitney_u(&b, &a).unwrap();
        assert_eq!(ab.u + ba.u, 12.0);
        assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn complete_separation() {
        let r = mann_whitney_u(&[1.0f64, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u, 0.0);
        // only the two fully separated arrangements are that extreme
        assert!((r.p_value - 2.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn identical_samples_are_not_different() {
        let a = [0.61, 0.7, 0.74, 0.8, 0.66, 0.71, 0.69, 0.77, 0.72, 0.68];
        assert!(mann_whitney_u(&a, &a).unwrap().p_value >= 0.9);
        assert!(mann_whitney_normal(&a, &a).unwrap().p_value >= 0.9);
    }

    #[test]
    fn exact_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n1 = rng.gen_range(1..=6);
            let n2 = rng.gen_range(1..=6);
            // coarse values to force ties
            let pooled: Vec<f64> = (0..n1 + n2).map(|_| rng.gen_range(0..5) as f64).collect();
            let (a, b) = pooled.split_at(n1);
            let exact = mann_whitney_exact(a, b).unwrap();
            let n = n1 + n2;
            let centre = (n1 * n2) as f64 / 2.0;
            let observed = (exact.u - centre).abs();
            let (mut hits, mut total) = (0u32, 0u32);
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != n1 {
                    continue;
                }
                let sa: Vec<f64> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| pooled[i]).collect();
                let sb: Vec<f64> = (0..n).filter(|i| mask >> i & 1 == 0).map(|i| pooled[i]).collect();
                let mut u = 0.0;
                for x in &sa {
                    for y in &sb {
                        u += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
                    }
                }
                total += 1;
                if (u - centre).abs() >= observed - 1e-12 {
                    hits += 1;
                }
            }
            assert!((exact.p_value - hits as f64 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn bonferroni_thresholds() {
        assert_eq!(bonferroni(0.05f64, 8), 0.00625);
        assert_eq!(bonferroni(0.05f64, 4), 0.0125);
        assert_eq!(bonferroni(0.05f64, 1), 0.05);
    }
}
