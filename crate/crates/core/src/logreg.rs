//! L2-regularised binary logistic regression.
//!
//! Minimises `½‖w‖² + C Σᵢ log(1 + exp(−ỹᵢ (wᵀxᵢ + b)))` with `ỹ ∈ {−1, +1}`
//! and an unregularised bias, using damped Newton steps with an Armijo
//! backtracking line search from `w = 0, b = 0`. Every sum runs in row
//! order, so identical inputs give bit-identical models.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrModel<T> {
    pub weights: Vec<T>,
    pub bias: T,
    pub c: T,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport<T> {
    pub final_loss: T,
    pub gradient_norm: T,
    pub iterations: usize,
    pub converged: bool,
    /// Mean validation AUROC per C, when the model came out of a grid search.
    pub grid_scores: Vec<(T, T)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions<T> {
    pub tolerance: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            tolerance: T::lit(1e-6),
            max_iter: 1000,
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(-t))` without overflow.
fn log1p_exp_neg<T: Scalar>(t: T) -> T {
    if t > T::zero() {
        (-t).exp().ln_1p()
    } else {
        -t + t.exp().ln_1p()
    }
}

fn check_shapes<T: Scalar>(x: &[Vec<T>], y: &[u8], dim: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} rows but {} labels", x.len(), y.len())));
    }
    if let Some(bad) = x.iter().position(|r| r.len() != dim) {
        return Err(Error::Dimension(format!("row {bad} has {} features, expected {dim}", x[bad].len())));
    }
    if let Some(bad) = y.iter().position(|&l| l > 1) {
        return Err(Error::Dimension(format!("label {} at row {bad} is not 0/1", y[bad])));
    }
    Ok(())
}

fn margin<T: Scalar>(w: &[T], b: T, row: &[T]) -> T {
    w.iter().zip(row).fold(b, |acc, (&wi, &xi)| acc + wi * xi)
}

/// Objective value and gradient at `(weights, bias)`. The gradient's last
/// entry is the bias component.
pub fn loss_and_gradient<T: Scalar>(weights: &[T], bias: T, c: T, x: &[Vec<T>], y: &[u8]) -> Result<(T, Vec<T>)> {
    check_shapes(x, y, weights.len())?;
    let d = weights.len();
    let mut loss = weights.iter().map(|&w| w * w).sum::<T>() / T::lit(2.0);
    let mut grad: Vec<T> = weights.to_vec();
    grad.push(T::zero());
    for (row, &label) in x.iter().zip(y) {
        let z = margin(weights, bias, row);
        let signed = if label == 1 { z } else { -z };
        loss = loss + c * log1p_exp_neg(signed);
        let r = c * (sigmoid(z) - T::from_u8(label).unwrap());
        for j in 0..d {
            grad[j] = grad[j] + r * row[j];
        }
        grad[d] = grad[d] + r;
    }
    Ok((loss, grad))
}

impl<T: Scalar> LrModel<T> {
    pub fn loss_and_gradient(&self, x: &[Vec<T>], y: &[u8]) -> Result<(T, Vec<T>)> {
        loss_and_gradient(&self.weights, self.bias, self.c, x, y)
    }

    /// σ(Xw + b) per row; `names` must match the training features.
    pub fn predict_proba(&self, x: &[Vec<T>], names: &[String]) -> Result<Vec<T>> {
        if names != self.feature_names.as_slice() {
            return Err(Error::FeatureMismatch {
                expected: self.feature_names.clone(),
                got: names.to_vec(),
            });
        }
        self.predict_rows(x)
    }

    fn predict_rows(&self, x: &[Vec<T>]) -> Result<Vec<T>> {
        x.iter()
            .map(|row| {
                if row.len() != self.weights.len() {
                    return Err(Error::Dimension(format!(
                        "row has {} features, model has {}",
                        row.len(),
                        self.weights.len()
                    )));
                }
                Ok(sigmoid(margin(&self.weights, self.bias, row)))
            })
            .collect()
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&a| a * a).sum::<T>().sqrt()
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, n×n).
fn cholesky_solve<T: Scalar>(a: &[T], b: &[T], n: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s = s - l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= T::zero() || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut z = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[i * n + k] * z[k];
        }
        z[i] = s / l[i * n + i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s = s - l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

fn hessian<T: Scalar>(w: &[T], b: T, c: T, x: &[Vec<T>]) -> Vec<T> {
    let d = w.len();
    let n = d + 1;
    let mut h = vec![T::zero(); n * n];
    for j in 0..d {
        h[j * n + j] = T::one();
    }
    for row in x {
        let p = sigmoid(margin(w, b, row));
        let s = c * p * (T::one() - p);
        for i in 0..n {
            let xi = if i < d { row[i] } else { T::one() };
            for j in 0..=i {
                let xj = if j < d { row[j] } else { T::one() };
                h[i * n + j] = h[i * n + j] + s * xi * xj;
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            h[i * n + j] = h[j * n + i];
        }
    }
    h
}

/// Newton direction, regularised towards gradient descent if the Hessian
/// is numerically singular.
fn newton_direction<T: Scalar>(h: &[T], g: &[T]) -> Vec<T> {
    let n = g.len();
    let neg_g: Vec<T> = g.iter().map(|&v| -v).collect();
    let mut damping = T::zero();
    for _ in 0..12 {
        let mut hd = h.to_vec();
        for i in 0..n {
            hd[i * n + i] = hd[i * n + i] + damping;
        }
        if let Some(step) = cholesky_solve(&hd, &neg_g, n) {
            if step.iter().all(|v| v.is_finite()) {
                return step;
            }
        }
        damping = if damping == T::zero() { T::lit(1e-8) } else { damping * T::lit(100.0) };
    }
    neg_g
}

/// Fits a model for one value of C.
pub fn fit<T: Scalar>(
    x: &[Vec<T>],
    y: &[u8],
    feature_names: &[String],
    c: T,
    options: &FitOptions<T>,
) -> Result<(LrModel<T>, TrainReport<T>)> {
    let d = feature_names.len();
    check_shapes(x, y, d)?;
    let positives = y.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::SingleClass);
    }
    let mut params = vec![T::zero(); d + 1];
    let (mut loss, mut grad) = loss_and_gradient(&params[..d], params[d], c, x, y)?;
    let mut iterations = 0;
    let mut converged = norm(&grad) < options.tolerance;
    while !converged && iterations < options.max_iter {
        iterations += 1;
        let h = hessian(&params[..d], params[d], c, x);
        let mut dir = newton_direction(&h, &grad);
        let mut slope: T = dir.iter().zip(&grad).map(|(&a, &b)| a * b).sum();
        if slope >= T::zero() {
            dir = grad.iter().map(|&v| -v).collect();
            slope = -grad.iter().map(|&v| v * v).sum::<T>();
        }
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<T> = params.iter().zip(&dir).map(|(&p, &s)| p + t * s).collect();
            let (l, g) = loss_and_gradient(&cand[..d], cand[d], c, x, y)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss {l} at iteration {iterations}")));
            }
            if l <= loss + T::lit(1e-4) * t * slope {
                accepted = Some((cand, l, g));
                break;
            }
            t = t / T::lit(2.0);
        }
        match accepted {
            Some((p, l, g)) => {
                params = p;
                loss = l;
                grad = g;
            }
            // no decrease representable at this precision
            None => break,
        }
        converged = norm(&grad) < options.tolerance;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("final loss {loss}")));
    }
    let bias = params[d];
    params.truncate(d);
    Ok((
        LrModel {
            weights: params,
            bias,
            c,
            feature_names: feature_names.to_vec(),
        },
        TrainReport {
            final_loss: loss,
            gradient_norm: norm(&grad),
            iterations,
            converged,
            grid_scores: Vec::new(),
        },
    ))
}

/// Assigns patient groups to `k` folds so that each fold gets a similar
/// share of both classes. Groups are shuffled with `seed`, then placed
/// largest first into the fold with the fewest rows of the group's
/// majority class.
pub fn stratified_group_folds(y: &[u8], groups: &[String], k: usize, seed: u64) -> Vec<usize> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let gi = *index.entry(g.as_str()).or_insert_with(|| {
            members.push(Vec::new());
            members.len() - 1
        });
        members[gi].push(i);
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|&g| std::cmp::Reverse(members[g].len()));

    let mut fold_of_row = vec![0; y.len()];
    let mut counts = vec![[0usize; 2]; k];
    for g in order {
        let pos = members[g].iter().filter(|&&i| y[i] == 1).count();
        let neg = members[g].len() - pos;
        let major = usize::from(pos >= neg);
        let fold = (0..k)
            .min_by_key(|&f| (counts[f][major], counts[f][0] + counts[f][1], f))
            .expect("k >= 1");
        counts[fold][0] += neg;
        counts[fold][1] += pos;
        for &i in &members[g] {
            fold_of_row[i] = fold;
        }
    }
    fold_of_row
}

fn folds_valid(y: &[u8], fold_of_row: &[usize], k: usize) -> bool {
    (0..k).all(|f| {
        let mut val = [false; 2];
        let mut train = [false; 2];
        for (&l, &fr) in y.iter().zip(fold_of_row) {
            if fr == f {
                val[l as usize] = true;
            } else {
                train[l as usize] = true;
            }
        }
        val[0] && val[1] && train[0] && train[1]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch<T> {
    pub best_c: T,
    pub scores: Vec<(T, T)>,
    pub folds: usize,
}

/// Patient-grouped stratified k-fold search over `c_grid` scored by mean
/// validation AUROC. Ties go to the smaller C.
pub fn grid_search<T: Scalar>(
    x: &[Vec<T>],
    y: &[u8],
    groups: &[String],
    c_grid: &[T],
    folds: usize,
    options: &FitOptions<T>,
    seed: u64,
) -> Result<GridSearch<T>> {
    if c_grid.is_empty() {
        return Err(Error::Invalid("empty C grid".into()));
    }
    if groups.len() != y.len() {
        return Err(Error::Dimension(format!("{} groups for {} rows", groups.len(), y.len())));
    }
    let mut grid: Vec<T> = c_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    if grid.len() == 1 {
        return Ok(GridSearch {
            best_c: grid[0],
            scores: Vec::new(),
            folds: 0,
        });
    }

    let mut k = folds.max(2);
    let assignment = loop {
        let a = stratified_group_folds(y, groups, k, seed);
        if folds_valid(y, &a, k) {
            break a;
        }
        if k == 2 {
            return Err(Error::SingleClass);
        }
        warn!("a {k}-fold split leaves a fold with one class; refolding with {}", k - 1);
        k -= 1;
    };

    let d = x.first().map_or(0, Vec::len);
    let names: Vec<String> = (0..d).map(|i| i.to_string()).collect();
    let mut scores = Vec::with_capacity(grid.len());
    for &c in &grid {
        let mut total = T::zero();
        for f in 0..k {
            let (mut xt, mut yt, mut xv, mut yv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for ((row, &l), &fr) in x.iter().zip(y).zip(&assignment) {
                if fr == f {
                    xv.push(row.clone());
                    yv.push(l);
                } else {
                    xt.push(row.clone());
                    yt.push(l);
                }
            }
            let (model, _) = fit(&xt, &yt, &names, c, options)?;
            let p = model.predict_rows(&xv)?;
            total = total + auroc(&p, &yv).expect("validated folds hold both classes");
        }
        scores.push((c, total / T::from_usize_lossy(k)));
    }
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(GridSearch {
        best_c: best.0,
        scores,
        folds: k,
    })
}

/// Grid search followed by a refit on all rows at the chosen C.
#[allow(clippy::too_many_arguments)]
pub fn fit_with_grid_search<T: Scalar>(
    x: &[Vec<T>],
    y: &[u8],
    groups: &[String],
    feature_names: &[String],
    c_grid: &[T],
    folds: usize,
    options: &FitOptions<T>,
    seed: u64,
) -> Result<(LrModel<T>, TrainReport<T>)> {
    let search = grid_search(x, y, groups, c_grid, folds, options, seed)?;
    let (model, mut report) = fit(x, y, feature_names, search.best_c, options)?;
    report.grid_scores = search.scores;
    Ok((model, report))
}
