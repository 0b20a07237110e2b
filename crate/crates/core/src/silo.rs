//! Per-silo views of the global table: vertical slicing, local Pearson column
//! reordering, sample-misalignment injection and zero-fill bookkeeping.

use std::collections::BTreeSet;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Table;
use crate::error::{Error, Result};
use crate::math::{covariance, pearson, Matrix, Purpose, RngStream, StreamKey};

/// One silo's column slice over the full global index. Rows the silo does not
/// hold are zero-filled and flagged `present = false`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiloView {
    pub silo_id: usize,
    pub feature_names: Vec<String>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub present: Vec<bool>,
    /// `column_order[k]` is the pre-reorder position of current column `k`.
    pub column_order: Vec<usize>,
    pub retained_classes: Vec<usize>,
}

impl SiloView {
    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn present_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| self.present[r]).collect()
    }

    pub fn n_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    /// Marks a row absent and zero-fills it.
    pub fn drop_row(&mut self, r: usize) {
        self.present[r] = false;
        self.features.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }

    /// Applies a column permutation (as produced by [`pearson_order`]).
    pub fn with_column_order(&self, order: &[usize]) -> Result<SiloView> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.n_features()).collect::<Vec<_>>() {
            return Err(Error::InvalidParameter(format!(
                "column order {order:?} is not a permutation of {} columns",
                self.n_features()
            )));
        }
        Ok(SiloView {
            features: self.features.select_cols(order),
            feature_names: order.iter().map(|&c| self.feature_names[c].clone()).collect(),
            column_order: order.iter().map(|&c| self.column_order[c]).collect(),
            ..self.clone()
        })
    }

    pub fn manifest_entry(&self) -> SiloManifestEntry {
        SiloManifestEntry {
            silo_id: self.silo_id,
            n_features: self.n_features(),
            n_rows: self.n_rows(),
            n_present: self.n_present(),
            retained_classes: self.retained_classes.clone(),
            column_order: self.column_order.clone(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Audit record for one silo, written to the silo manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiloManifestEntry {
    pub silo_id: usize,
    pub n_features: usize,
    pub n_rows: usize,
    pub n_present: usize,
    pub retained_classes: Vec<usize>,
    pub column_order: Vec<usize>,
    pub feature_names: Vec<String>,
}

/// Silo `i` (1-based) receives columns `[(i-1)k, ik)`; trailing columns that do
/// not fill a whole silo are dropped.
pub fn vertical_partition(t: &Table, n_silos: usize, features_per_silo: usize) -> Result<Vec<SiloView>> {
    if n_silos == 0 || features_per_silo == 0 {
        return Err(Error::InvalidParameter(
            "need at least one silo with at least one feature".into(),
        ));
    }
    let needed = n_silos * features_per_silo;
    if needed > t.n_features() {
        return Err(Error::InvalidParameter(format!(
            "{n_silos} silos x {features_per_silo} features needs {needed} columns, table '{}' has {}",
            t.name,
            t.n_features()
        )));
    }
    let all_classes: Vec<usize> = (0..t.n_classes()).collect();
    Ok((0..n_silos)
        .map(|i| {
            let cols: Vec<usize> = (i * features_per_silo..(i + 1) * features_per_silo).collect();
            SiloView {
                silo_id: i + 1,
                feature_names: cols.iter().map(|&c| t.feature_names[c].clone()).collect(),
                features: t.features.select_cols(&cols),
                labels: t.labels.clone(),
                n_classes: t.n_classes(),
                present: vec![true; t.n_rows()],
                column_order: (0..features_per_silo).collect(),
                retained_classes: all_classes.clone(),
            }
        })
        .collect())
}

/// Score of each column: mean `|pearson|` against every other non-constant
/// column, over present rows. Constant columns score 0.
pub fn pearson_scores(v: &SiloView) -> Result<Vec<f64>> {
    let rows = v.present_rows();
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "silo {} has {} present rows; reordering needs 2",
            v.silo_id,
            rows.len()
        )));
    }
    let d = v.n_features();
    let columns: Vec<Vec<f64>> = (0..d)
        .map(|c| rows.iter().map(|&r| v.features.get(r, c)).collect())
        .collect();
    let constant: Vec<bool> = columns
        .iter()
        .map(|col| col.iter().all(|&x| x == col[0]))
        .collect();
    let mut abs_r = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in (i + 1)..d {
            if constant[i] || constant[j] {
                continue;
            }
            let r = match pearson(&columns[i], &columns[j]) {
                Ok(r) => r.abs(),
                Err(Error::DegenerateVariance(_)) => continue,
                Err(e) => return Err(e),
            };
            abs_r[i][j] = r;
            abs_r[j][i] = r;
        }
    }
    Ok((0..d)
        .map(|i| {
            if constant[i] {
                return 0.0;
            }
            let others: Vec<usize> = (0..d).filter(|&j| j != i && !constant[j]).collect();
            if others.is_empty() {
                0.0
            } else {
                others.iter().map(|&j| abs_r[i][j]).sum::<f64>() / others.len() as f64
            }
        })
        .collect())
}

/// Column permutation sorting by descending Pearson score; ties keep the
/// original column position.
pub fn pearson_order(v: &SiloView) -> Result<Vec<usize>> {
    let scores = pearson_scores(v)?;
    if scores.iter().all(|&s| s == 0.0) {
        warn!(
            "silo {}: no informative column pairs, keeping identity order",
            v.silo_id
        );
        return Ok((0..v.n_features()).collect());
    }
    let mut order: Vec<usize> = (0..v.n_features()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

pub fn pearson_reorder(v: &SiloView) -> Result<SiloView> {
    v.with_column_order(&pearson_order(v)?)
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "{name} must lie in [0, 1], got {rate}"
        )));
    }
    Ok(())
}

/// Number of affected silos, `⌊N · rate⌋`.
pub fn affected_silos(n_silos: usize, client_rate: f64) -> usize {
    ((n_silos as f64 * client_rate).floor() as usize).min(n_silos)
}

/// The first `⌊N·c_d⌋` silos keep a uniform random `round((1 - d_d)·|S_i|)`
/// of their present rows; the rest are zero-filled and marked absent.
pub fn inject_data_size_imbalance(
    views: &[SiloView],
    client_rate: f64,
    data_drop_rate: f64,
    rng: &RngStream,
) -> Result<Vec<SiloView>> {
    check_rate("client drop rate", client_rate)?;
    check_rate("data drop rate", data_drop_rate)?;
    let n_affected = affected_silos(views.len(), client_rate);
    let mut out = views.to_vec();
    for v in out.iter_mut().take(n_affected) {
        let mut stream = rng.sibling(StreamKey::new(v.silo_id as u32, 0, Purpose::DataDrop));
        let mut present = v.present_rows();
        let keep = ((1.0 - data_drop_rate) * present.len() as f64).round() as usize;
        present.shuffle(&mut stream);
        for &r in &present[keep..] {
            v.drop_row(r);
        }
    }
    Ok(out)
}

/// The first `⌊N·c⌋` silos keep only rows whose label is in a random subset of
/// `⌊C·(1 - l_i)⌋` classes.
pub fn inject_class_size_imbalance(
    views: &[SiloView],
    client_rate: f64,
    class_drop_rate: f64,
    rng: &RngStream,
) -> Result<Vec<SiloView>> {
    check_rate("client rate", client_rate)?;
    check_rate("class drop rate", class_drop_rate)?;
    let n_affected = affected_silos(views.len(), client_rate);
    let mut out = views.to_vec();
    if n_affected == 0 {
        return Ok(out);
    }
    let labels: BTreeSet<usize> = views[0].labels.iter().copied().collect();
    let labels: Vec<usize> = labels.into_iter().collect();
    let n_keep = (labels.len() as f64 * (1.0 - class_drop_rate)).floor() as usize;
    if n_keep == 0 {
        return Err(Error::InvalidParameter(format!(
            "class drop rate {class_drop_rate} leaves no surviving class out of {}",
            labels.len()
        )));
    }
    for v in out.iter_mut().take(n_affected) {
        let mut stream = rng.sibling(StreamKey::new(v.silo_id as u32, 0, Purpose::ClassDrop));
        let mut keep: Vec<usize> = labels.choose_multiple(&mut stream, n_keep).copied().collect();
        keep.sort_unstable();
        for r in 0..v.n_rows() {
            if v.present[r] && keep.binary_search(&v.labels[r]).is_err() {
                v.drop_row(r);
            }
        }
        v.retained_classes.retain(|c| keep.binary_search(c).is_ok());
    }
    Ok(out)
}

/// Misalignment regime applied to training views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Standard,
    DataSize,
    ClassSize,
    Mixed,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::Standard,
        Setting::DataSize,
        Setting::ClassSize,
        Setting::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Standard => "standard",
            Setting::DataSize => "data_size",
            Setting::ClassSize => "class_size",
            Setting::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub client_drop_rate: f64,
    pub data_drop_rate: f64,
    pub class_drop_rate: f64,
    pub mode: Setting,
}

impl ImbalanceSpec {
    /// Applies the generators `mode` calls for; mixed runs data-size first.
    pub fn apply(&self, views: &[SiloView], rng: &RngStream) -> Result<Vec<SiloView>> {
        let data = |v: &[SiloView]| {
            inject_data_size_imbalance(v, self.client_drop_rate, self.data_drop_rate, rng)
        };
        let class = |v: &[SiloView]| {
            inject_class_size_imbalance(v, self.client_drop_rate, self.class_drop_rate, rng)
        };
        match self.mode {
            Setting::Standard => Ok(views.to_vec()),
            Setting::DataSize => data(views),
            Setting::ClassSize => class(views),
            Setting::Mixed => class(&data(views)?),
        }
    }
}

/// Rows present in every silo.
pub fn common_rows(views: &[SiloView]) -> Vec<usize> {
    let Some(first) = views.first() else {
        return Vec::new();
    };
    (0..first.n_rows())
        .filter(|&r| views.iter().all(|v| v.present[r]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroFillReport {
    pub silo_id: usize,
    pub filled_rows: usize,
    /// Present rows whose values happen to be all zero (e.g. one-hot blocks).
    pub zero_present_rows: usize,
    pub total_rows: usize,
}

impl ZeroFillReport {
    pub fn filled_fraction(&self) -> f64 {
        self.filled_rows as f64 / self.total_rows.max(1) as f64
    }
}

/// Verifies that every absent row is all-zero and counts the filled rows.
pub fn zero_fill_check(v: &SiloView) -> Result<ZeroFillReport> {
    if v.present.len() != v.n_rows() || v.labels.len() != v.n_rows() {
        return Err(Error::Corruption {
            silo: v.silo_id,
            detail: format!(
                "{} rows, {} presence flags, {} labels",
                v.n_rows(),
                v.present.len(),
                v.labels.len()
            ),
        });
    }
    let mut filled = 0;
    let mut zero_present = 0;
    for r in 0..v.n_rows() {
        let zero = v.features.row(r).iter().all(|&x| x == 0.0);
        match (v.present[r], zero) {
            (false, true) => filled += 1,
            (false, false) => {
                return Err(Error::Corruption {
                    silo: v.silo_id,
                    detail: format!("absent row {r} is not zero-filled"),
                })
            }
            (true, true) => zero_present += 1,
            (true, false) => {}
        }
    }
    Ok(ZeroFillReport {
        silo_id: v.silo_id,
        filled_rows: filled,
        zero_present_rows: zero_present,
        total_rows: v.n_rows(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovDevConfig {
    pub rows_per_silo: usize,
    pub features: usize,
    pub drop_rate: f64,
    /// Local deviation cap `Δ`; silos above it are rescaled onto it.
    pub delta_cap: f64,
}

impl Default for CovDevConfig {
    fn default() -> Self {
        Self {
            rows_per_silo: 500,
            features: 8,
            drop_rate: 0.3,
            delta_cap: f64::INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovDevPoint {
    pub silos: usize,
    /// `‖Σ_global^true − Σ_global^imp‖_F`
    pub deviation: f64,
    /// `(1/N) Σ n_i δ_i` over the first `silos` silos.
    pub bound: f64,
    /// Largest local deviation `δ_i` seen so far.
    pub max_local: f64,
}

struct CovSilo {
    n: usize,
    true_cov: Matrix,
    imp_cov: Matrix,
    delta: f64,
}

fn synth_cov_silo(cfg: &CovDevConfig, rng: &mut RngStream) -> Result<CovSilo> {
    let (n, d) = (cfg.rows_per_silo, cfg.features);
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    // Non-IID silos: each draws its own mean and mixing matrix.
    let mean: Vec<f64> = (0..d).map(|_| normal()).collect();
    let mixing = Matrix::from_fn(d, d, |_, _| normal() / (d as f64).sqrt());
    let z = Matrix::from_fn(n, d, |_, _| normal());
    let mut x = z.matmul(&mixing)?;
    for r in 0..n {
        for (v, m) in x.row_mut(r).iter_mut().zip(&mean) {
            *v += m;
        }
    }
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(rng);
    let n_drop = (cfg.drop_rate * n as f64).round() as usize;
    let mut imputed = x.clone();
    for &r in &rows[..n_drop] {
        imputed.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    }
    let mut true_cov = covariance(&x)?;
    let mut imp_cov = covariance(&imputed)?;
    let mut delta = true_cov.sub(&imp_cov)?.frobenius_norm();
    if delta > cfg.delta_cap {
        // Covariances are quadratic in the data, so scaling the silo's values
        // by sqrt(cap/δ) scales δ onto the cap.
        let s = cfg.delta_cap / delta;
        true_cov = true_cov.scale(s);
        imp_cov = imp_cov.scale(s);
        delta = true_cov.sub(&imp_cov)?.frobenius_norm();
    }
    Ok(CovSilo {
        n,
        true_cov,
        imp_cov,
        delta,
    })
}

/// Zero-fill covariance deviation as silos are added one at a time.
///
/// Silo `i` is drawn from its own stream, so the series for `M` silos extends
/// the series for `M - 1`.
pub fn covariance_deviation_experiment(
    m_silos: usize,
    cfg: &CovDevConfig,
    rng: &RngStream,
) -> Result<Vec<CovDevPoint>> {
    if m_silos < 1 {
        return Err(Error::InvalidParameter("need at least one silo".into()));
    }
    check_rate("drop rate", cfg.drop_rate)?;
    if cfg.rows_per_silo < 2 || cfg.features < 1 || !(cfg.delta_cap > 0.0) {
        return Err(Error::InvalidParameter(format!("bad covariance experiment config {cfg:?}")));
    }
    let d = cfg.features;
    let mut true_acc = Matrix::zeros(d, d);
    let mut imp_acc = Matrix::zeros(d, d);
    let mut weighted_delta = 0.0;
    let mut total_n = 0usize;
    let mut max_local: f64 = 0.0;
    let mut out = Vec::with_capacity(m_silos);
    for i in 1..=m_silos {
        let mut stream = rng.sibling(StreamKey::new(i as u32, 0, Purpose::CovDev));
        let silo = synth_cov_silo(cfg, &mut stream)?;
        true_acc.add_assign(&silo.true_cov.scale(silo.n as f64))?;
        imp_acc.add_assign(&silo.imp_cov.scale(silo.n as f64))?;
        weighted_delta += silo.n as f64 * silo.delta;
        total_n += silo.n;
        max_local = max_local.max(silo.delta);
        let scale = 1.0 / total_n as f64;
        let deviation = true_acc.scale(scale).sub(&imp_acc.scale(scale))?.frobenius_norm();
        out.push(CovDevPoint {
            silos: i,
            deviation,
            bound: weighted_delta * scale,
            max_local,
        });
    }
    Ok(out)
}
