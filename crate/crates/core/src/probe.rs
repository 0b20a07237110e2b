//! Linear probing: multinomial logistic regression on frozen embeddings or raw
//! features, and support-weighted precision/recall/F1.

use log::warn;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, Purpose, RngStream, StreamKey};
use crate::model::Encoder;
use crate::silo::SiloView;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Fraction of present training rows whose labels the probe may use.
    pub labeled_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iter: 500,
            tol: 1e-6,
            labeled_fraction: 1.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidParameter(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Softmax regression on standardized inputs. The bias is not regularized.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Objective value after each accepted step, starting at the initial point.
    pub loss_history: Vec<f64>,
}

fn standardize(x: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    let mut z = x.clone();
    for r in 0..z.rows() {
        for ((v, m), s) in z.row_mut(r).iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    z
}

fn logits(z: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut out = z.matmul(w)?;
    for r in 0..out.rows() {
        for (v, bi) in out.row_mut(r).iter_mut().zip(b) {
            *v += bi;
        }
    }
    Ok(out)
}

/// Row-wise softmax in place; returns the summed log-sum-exp terms.
fn softmax_rows(m: &mut Matrix) -> Vec<f64> {
    (0..m.rows())
        .map(|r| {
            let row = m.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
            max + s.ln()
        })
        .collect()
}

struct Objective<'a> {
    z: &'a Matrix,
    y: &'a [usize],
    l2: f64,
}

impl Objective<'_> {
    fn penalty(&self, w: &Matrix) -> f64 {
        0.5 * self.l2 * w.data().iter().map(|v| v * v).sum::<f64>()
    }

    /// Mean cross-entropy, without the penalty.
    fn cross_entropy(&self, w: &Matrix, b: &[f64]) -> Result<f64> {
        let mut l = logits(self.z, w, b)?;
        let raw: Vec<f64> = (0..l.rows()).map(|r| l.get(r, self.y[r])).collect();
        let lse = softmax_rows(&mut l);
        Ok(lse.iter().zip(&raw).map(|(a, b)| a - b).sum::<f64>() / self.z.rows() as f64)
    }

    #[cfg(test)]
    fn value(&self, w: &Matrix, b: &[f64]) -> Result<f64> {
        Ok(self.cross_entropy(w, b)? + self.penalty(w))
    }

    /// Cross-entropy value and its gradient (penalty excluded).
    fn ce_gradient(&self, w: &Matrix, b: &[f64]) -> Result<(f64, Matrix, Vec<f64>)> {
        let mut p = logits(self.z, w, b)?;
        let raw: Vec<f64> = (0..p.rows()).map(|r| p.get(r, self.y[r])).collect();
        let lse = softmax_rows(&mut p);
        let n = self.z.rows() as f64;
        let ce: f64 = lse.iter().zip(&raw).map(|(a, b)| a - b).sum::<f64>() / n;
        for (r, &c) in self.y.iter().enumerate() {
            *p.row_mut(r).get_mut(c).expect("label within classes") -= 1.0;
        }
        let p = p.scale(1.0 / n);
        let gw = self.z.matmul_tn(&p)?;
        let mut gb = vec![0.0; b.len()];
        for r in 0..p.rows() {
            for (g, v) in gb.iter_mut().zip(p.row(r)) {
                *g += v;
            }
        }
        Ok((ce, gw, gb))
    }

    /// Gradient of the full objective.
    fn gradient(&self, w: &Matrix, b: &[f64]) -> Result<(f64, Matrix, Vec<f64>)> {
        let (ce, gw, gb) = self.ce_gradient(w, b)?;
        Ok((ce + self.penalty(w), gw.add(&w.scale(self.l2))?, gb))
    }
}

/// Proximal gradient descent with backtracking: the cross-entropy takes a
/// gradient step and the L2 penalty is applied exactly as a shrink, so large
/// penalties do not force tiny steps on the bias. Deterministic.
pub fn train_probe(x: &Matrix, labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    if labels.len() != x.rows() {
        return Err(Error::Shape {
            op: "train_probe",
            lhs: x.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidParameter(format!("label {bad} outside {n_classes} classes")));
    }
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&l| seen[l] = true);
    let distinct = seen.iter().filter(|&&s| s).count();
    if distinct < 2 {
        return Err(Error::DegenerateLabels(format!(
            "{distinct} distinct label(s) among {} rows; need at least 2",
            x.rows()
        )));
    }

    let n = x.rows() as f64;
    let d = x.cols();
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for c in 0..d {
        let col = x.column(c);
        let m = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        mean[c] = m;
        scale[c] = if var > 1e-24 { var.sqrt() } else { 1.0 };
    }
    let z = standardize(x, &mean, &scale);
    let obj = Objective {
        z: &z,
        y: labels,
        l2: cfg.l2,
    };

    let mut w = Matrix::zeros(d, n_classes);
    let mut b = vec![0.0; n_classes];
    let mut step = 1.0;
    let (mut ce, mut gw, mut gb) = obj.ce_gradient(&w, &b)?;
    let mut f = ce + obj.penalty(&w);
    let mut history = vec![f];
    for _ in 0..cfg.max_iter {
        let mut accepted = None;
        while step > 1e-14 {
            let shrink = 1.0 / (1.0 + step * cfg.l2);
            let w_new = w.sub(&gw.scale(step))?.scale(shrink);
            let b_new: Vec<f64> = b.iter().zip(&gb).map(|(v, g)| v - step * g).collect();
            let dw = w_new.sub(&w)?;
            let db: Vec<f64> = b_new.iter().zip(&b).map(|(a, c)| a - c).collect();
            let lin: f64 = gw.data().iter().zip(dw.data()).map(|(g, v)| g * v).sum::<f64>()
                + gb.iter().zip(&db).map(|(g, v)| g * v).sum::<f64>();
            let sq: f64 =
                dw.data().iter().map(|v| v * v).sum::<f64>() + db.iter().map(|v| v * v).sum::<f64>();
            if sq == 0.0 {
                break;
            }
            let ce_new = obj.cross_entropy(&w_new, &b_new)?;
            if ce_new <= ce + lin + sq / (2.0 * step) {
                accepted = Some((w_new, b_new));
                break;
            }
            step *= 0.5;
        }
        let Some((w_new, b_new)) = accepted else {
            break;
        };
        w = w_new;
        b = b_new;
        (ce, gw, gb) = obj.ce_gradient(&w, &b)?;
        let f_new = ce + obj.penalty(&w);
        let change = f - f_new;
        f = f_new;
        history.push(f);
        step *= 2.0;
        if change < cfg.tol {
            break;
        }
    }
    Ok(Probe {
        mean,
        scale,
        weights: w,
        bias: b,
        loss_history: history,
    })
}

impl Probe {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let z = standardize(x, &self.mean, &self.scale);
        let mut l = logits(&z, &self.weights, &self.bias)?;
        softmax_rows(&mut l);
        Ok(l)
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows())
            .map(|r| {
                p.row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Objective gradient at the fitted point, for diagnostics.
    pub fn gradient_norm(&self, x: &Matrix, labels: &[usize], l2: f64) -> Result<f64> {
        let z = standardize(x, &self.mean, &self.scale);
        let obj = Objective { z: &z, y: labels, l2 };
        let (_, gw, gb) = obj.gradient(&self.weights, &self.bias)?;
        Ok((gw.data().iter().map(|v| v * v).sum::<f64>() + gb.iter().map(|v| v * v).sum::<f64>()).sqrt())
    }
}

/// A trained probe, or a constant prediction when the training labels hold a
/// single class.
#[derive(Clone, Debug, PartialEq)]
pub enum Classifier {
    Softmax(Probe),
    Constant(usize),
}

impl Classifier {
    pub fn fit(x: &Matrix, labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Classifier> {
        match train_probe(x, labels, n_classes, cfg) {
            Ok(p) => Ok(Classifier::Softmax(p)),
            Err(Error::DegenerateLabels(msg)) if !labels.is_empty() => {
                warn!("probe falls back to a constant prediction: {msg}");
                Ok(Classifier::Constant(labels[0]))
            }
            Err(e) => Err(e),
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        match self {
            Classifier::Softmax(p) => p.predict(x),
            Classifier::Constant(c) => Ok(vec![*c; x.rows()]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Support-weighted precision, recall and F1. A class never predicted has
/// precision 0; a class with P + R = 0 has F1 0.
pub fn weighted_metrics(y_true: &[usize], y_pred: &[usize]) -> Result<Scores> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "metrics need equal non-empty label arrays, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let k = y_true.iter().chain(y_pred).max().copied().unwrap_or(0) + 1;
    let mut tp = vec![0usize; k];
    let mut support = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let n = y_true.len() as f64;
    let mut out = Scores {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    for c in 0..k {
        if support[c] == 0 {
            continue;
        }
        let p = if predicted[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / predicted[c] as f64
        };
        let r = tp[c] as f64 / support[c] as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support[c] as f64 / n;
        out.precision += w * p;
        out.recall += w * r;
        out.f1 += w * f;
    }
    Ok(out)
}

/// Present training rows of a silo, thinned to the labeled fraction.
pub fn labeled_rows(view: &SiloView, cfg: &ProbeConfig, seed: u64) -> Vec<usize> {
    let present = view.present_rows();
    if cfg.labeled_fraction >= 1.0 || present.is_empty() {
        return present;
    }
    let keep = ((cfg.labeled_fraction * present.len() as f64).round() as usize).clamp(1, present.len());
    let mut rng = RngStream::new(seed, StreamKey::new(view.silo_id as u32, 0, Purpose::Labels));
    let mut idx: Vec<usize> = sample(&mut rng, present.len(), keep).into_iter().map(|i| present[i]).collect();
    idx.sort_unstable();
    idx
}

fn fit_and_score(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<Scores> {
    let clf = Classifier::fit(train_x, train_y, n_classes, cfg)?;
    weighted_metrics(test_y, &clf.predict(test_x)?)
}

fn select_labels(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// CFL score for one silo: probe on encoder embeddings of its labeled present
/// training rows, evaluated on embeddings of all its test rows.
pub fn evaluate_silo(
    encoder: &Encoder,
    train: &SiloView,
    test: &SiloView,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Scores> {
    if encoder.input_dim() != train.n_features() {
        return Err(Error::Shape {
            op: "evaluate_silo",
            lhs: (train.n_rows(), train.n_features()),
            rhs: (encoder.input_dim(), encoder.output_dim()),
        });
    }
    let rows = labeled_rows(train, cfg, seed);
    let train_x = encoder.encode(&train.features.select_rows(&rows))?;
    let test_x = encoder.encode(&test.features)?;
    fit_and_score(
        &train_x,
        &select_labels(&train.labels, &rows),
        &test_x,
        &test.labels,
        train.n_classes,
        cfg,
    )
}

/// Base 2 for one silo: probe on the silo's raw labeled present rows.
pub fn evaluate_base2(train: &SiloView, test: &SiloView, cfg: &ProbeConfig, seed: u64) -> Result<Scores> {
    let rows = labeled_rows(train, cfg, seed);
    fit_and_score(
        &train.features.select_rows(&rows),
        &select_labels(&train.labels, &rows),
        &test.features,
        &test.labels,
        train.n_classes,
        cfg,
    )
}

/// Base 1: probe on the concatenated columns of every silo, all training rows.
pub fn evaluate_base1(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<Scores> {
    fit_and_score(train_x, train_y, test_x, test_y, n_classes, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    Base1,
    #[serde(rename = "CFL")]
    Cfl,
    Base2,
}

impl ModelTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Base1 => "Base1",
            ModelTag::Cfl => "CFL",
            ModelTag::Base2 => "Base2",
        }
    }
}

/// One CSV row of the metrics report. Base 1 uses silo 0 (all silos jointly).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub setting: String,
    pub silo: usize,
    pub model: ModelTag,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Base 1 and per-silo Base 2 rows. `global_*` hold the undropped
/// concatenation of every silo's columns.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_baselines(
    dataset: &str,
    setting: &str,
    global_train: (&Matrix, &[usize]),
    global_test: (&Matrix, &[usize]),
    train_views: &[SiloView],
    test_views: &[SiloView],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    let n_classes = train_views.first().map_or(0, |v| v.n_classes);
    let row = |silo, model, s: Scores| MetricsRow {
        dataset: dataset.to_string(),
        setting: setting.to_string(),
        silo,
        model,
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
    };
    let b1 = evaluate_base1(global_train.0, global_train.1, global_test.0, global_test.1, n_classes, cfg)?;
    let mut out = vec![row(0, ModelTag::Base1, b1)];
    for (tr, te) in train_views.iter().zip(test_views) {
        out.push(row(tr.silo_id, ModelTag::Base2, evaluate_base2(tr, te, cfg, seed)?));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn f1(&self, model: ModelTag, silo: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && (model == ModelTag::Base1 || r.silo == silo))
            .map(|r| r.f1)
    }

    pub fn mean_f1(&self, model: ModelTag) -> f64 {
        let f: Vec<f64> = self.rows.iter().filter(|r| r.model == model).map(|r| r.f1).collect();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }

    pub fn silos(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .rows
            .iter()
            .filter(|r| r.model != ModelTag::Base1)
            .map(|r| r.silo)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// `F1(model, silo) - F1(Base1)` per silo.
    pub fn deltas(&self, model: ModelTag) -> Vec<(usize, f64)> {
        let base = self.f1(ModelTag::Base1, 0).unwrap_or(f64::NAN);
        self.silos()
            .into_iter()
            .filter_map(|s| self.f1(model, s).map(|f| (s, f - base)))
            .collect()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
