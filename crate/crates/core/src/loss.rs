//! Reconstruction, contrastive and distance losses with their gradients.

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, RngStream};
use crate::model::ViewGrads;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl Similarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub contrastive: f64,
    pub distance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            contrastive: 1.0,
            distance: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub similarity: Similarity,
    pub weights: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            similarity: Similarity::Dot,
            weights: LossWeights::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let w = self.weights;
        if [w.recon, w.contrastive, w.distance]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be finite and non-negative, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// A loss value with the gradient for each of its two matrix arguments.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn mse_with_grad(x: &Matrix, target: &Matrix, scale: f64) -> (f64, Matrix) {
    let n = x.data().len().max(1) as f64;
    let mut grad = x.clone();
    let mut sum = 0.0;
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let diff = *g - t;
        sum += diff * diff;
        *g = scale * 2.0 * diff / n;
    }
    (scale * sum / n, grad)
}

/// `½[MSE(xd1, b) + MSE(xd2, b)]`.
pub fn recon_loss(xd1: &Matrix, xd2: &Matrix, b: &Matrix) -> Result<PairLoss> {
    same_shape("recon_loss", xd1, b)?;
    same_shape("recon_loss", xd2, b)?;
    let (v1, g1) = mse_with_grad(xd1, b, 0.5);
    let (v2, g2) = mse_with_grad(xd2, b, 0.5);
    Ok(PairLoss {
        value: v1 + v2,
        grad_a: g1,
        grad_b: g2,
    })
}

/// Mean squared entrywise difference between the two embeddings.
pub fn distance_loss(xe1: &Matrix, xe2: &Matrix) -> Result<PairLoss> {
    same_shape("distance_loss", xe1, xe2)?;
    let (value, grad_a) = mse_with_grad(xe1, xe2, 1.0);
    let grad_b = grad_a.scale(-1.0);
    Ok(PairLoss {
        value,
        grad_a,
        grad_b,
    })
}

/// Softmax arguments are clamped here before `exp`. Terms this small are far
/// below the resolution of a denominator that is at least 1, and letting them
/// underflow fills the gradient with subnormals that slow the next product.
const EXP_FLOOR: f64 = -500.0;

/// NT-Xent over the `2K` stacked rows `[xe1; xe2]`. Row `k` of one view is the
/// positive for row `k` of the other; every other row is a negative.
pub fn contrastive_loss(
    xe1: &Matrix,
    xe2: &Matrix,
    temperature: f64,
    similarity: Similarity,
) -> Result<PairLoss> {
    same_shape("contrastive_loss", xe1, xe2)?;
    let k = xe1.rows();
    if k < 2 {
        return Err(Error::InsufficientData(format!(
            "contrastive loss needs at least 2 rows per view for negatives, got {k}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let n = 2 * k;
    let z = Matrix::vstack(xe1, xe2)?;

    let (u, norms) = match similarity {
        Similarity::Dot => (z, None),
        Similarity::Cosine => {
            let mut u = z;
            let mut norms = Vec::with_capacity(n);
            for r in 0..n {
                let row = u.row_mut(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::DegenerateEmbedding(format!(
                        "row {r} has norm {norm}; cosine similarity undefined"
                    )));
                }
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            (u, Some(norms))
        }
    };

    let mut s = u.matmul_nt(&u)?;
    let inv_t = 1.0 / temperature;
    let mut loss = 0.0;
    // s becomes ∂L/∂S in place, row by row.
    for a in 0..n {
        let pos = (a + k) % n;
        let row = s.row_mut(a);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter_mut().enumerate() {
            *v *= inv_t;
            if j != a && *v > max {
                max = *v;
            }
        }
        let pos_logit = row[pos] - max;
        let mut denom = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j == a {
                *v = 0.0;
            } else {
                *v = (*v - max).max(EXP_FLOOR).exp();
                denom += *v;
            }
        }
        loss += denom.ln() - pos_logit;
        for v in row.iter_mut() {
            *v /= denom;
        }
        row[pos] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n as f64);
    }
    loss /= n as f64;

    let h = s.add(&s.transpose())?.scale(inv_t);
    let mut du = h.matmul(&u)?;
    if let Some(norms) = norms {
        for (r, norm) in norms.iter().enumerate() {
            let ur = u.row(r).to_vec();
            let row = du.row_mut(r);
            let proj: f64 = row.iter().zip(&ur).map(|(g, x)| g * x).sum();
            for (g, x) in row.iter_mut().zip(&ur) {
                *g = (*g - proj * x) / norm;
            }
        }
    }
    let top: Vec<usize> = (0..k).collect();
    let bottom: Vec<usize> = (k..n).collect();
    Ok(PairLoss {
        value: loss,
        grad_a: du.select_rows(&top),
        grad_b: du.select_rows(&bottom),
    })
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub l_total: f64,
    pub l_recon: f64,
    pub l_contrastive: f64,
    pub l_distance: f64,
    pub grad_xd1: Matrix,
    pub grad_xd2: Matrix,
    pub grad_xe1: Matrix,
    pub grad_xe2: Matrix,
}

impl LossBreakdown {
    /// Upstream gradients in the order the views were traced.
    pub fn view_grads(&self) -> [ViewGrads; 2] {
        [
            ViewGrads {
                embedding: self.grad_xe1.clone(),
                reconstruction: self.grad_xd1.clone(),
            },
            ViewGrads {
                embedding: self.grad_xe2.clone(),
                reconstruction: self.grad_xd2.clone(),
            },
        ]
    }
}

/// Weighted sum of the three terms for one batch of paired views against the
/// clean batch `b`.
pub fn total_loss(
    xe1: &Matrix,
    xe2: &Matrix,
    xd1: &Matrix,
    xd2: &Matrix,
    b: &Matrix,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let w = cfg.weights;
    let r = recon_loss(xd1, xd2, b)?;
    let c = contrastive_loss(xe1, xe2, cfg.temperature, cfg.similarity)?;
    let d = distance_loss(xe1, xe2)?;
    let l_total = w.recon * r.value + w.contrastive * c.value + w.distance * d.value;
    if !l_total.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss (recon {}, contrastive {}, distance {})",
            r.value, c.value, d.value
        )));
    }
    let combine = |gc: &Matrix, gd: &Matrix| -> Result<Matrix> {
        gc.scale(w.contrastive).add(&gd.scale(w.distance))
    };
    Ok(LossBreakdown {
        l_total,
        l_recon: r.value,
        l_contrastive: c.value,
        l_distance: d.value,
        grad_xd1: r.grad_a.scale(w.recon),
        grad_xd2: r.grad_b.scale(w.recon),
        grad_xe1: combine(&c.grad_a, &d.grad_a)?,
        grad_xe2: combine(&c.grad_b, &d.grad_b)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub embed_dim: usize,
    pub k: usize,
    pub iters: usize,
    pub t_dot_s: f64,
    pub t_cos_s: f64,
    pub ratio: f64,
}

pub const BENCH_WARMUP: usize = 3;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-batch loss-plus-gradient wall time for both similarities on identical
/// Gaussian embeddings. Iterations alternate between the two kernels so both
/// see the same machine load; the reported times are medians.
pub fn bench_similarity(
    embed_dim: usize,
    k: usize,
    iters: usize,
    temperature: f64,
    rng: &mut RngStream,
) -> Result<BenchResult> {
    if iters == 0 {
        return Err(Error::InvalidParameter("bench needs iters >= 1".into()));
    }
    let draw = |rng: &mut RngStream| Matrix::from_fn(k, embed_dim, |_, _| StandardNormal.sample(rng));
    let xe1 = draw(rng);
    let xe2 = draw(rng);
    let run = |sim: Similarity| -> Result<f64> {
        let start = Instant::now();
        let out = contrastive_loss(&xe1, &xe2, temperature, sim)?;
        std::hint::black_box(&out);
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..BENCH_WARMUP {
        run(Similarity::Dot)?;
        run(Similarity::Cosine)?;
    }
    let mut dot = Vec::with_capacity(iters);
    let mut cos = Vec::with_capacity(iters);
    for i in 0..iters {
        if i % 2 == 0 {
            dot.push(run(Similarity::Dot)?);
            cos.push(run(Similarity::Cosine)?);
        } else {
            cos.push(run(Similarity::Cosine)?);
            dot.push(run(Similarity::Dot)?);
        }
    }
    let t_dot_s = median(&mut dot);
    let t_cos_s = median(&mut cos);
    Ok(BenchResult {
        embed_dim,
        k,
        iters,
        t_dot_s,
        t_cos_s,
        ratio: t_cos_s / t_dot_s,
    })
}
