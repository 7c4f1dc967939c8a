//! Unsupervised edit directions from principal components of sampled
//! intermediate codes.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::generator::{partial_forward, GeneratorBackend};
use crate::latent::{sample_latent, ExpressionVector, IntermediateCode, LayerId};

/// Sample count used when none is given.
pub const DEFAULT_SAMPLES: usize = 10_000;
/// Step size used when none is given.
pub const DEFAULT_ALPHA: f64 = 10.0;

// Components whose variance is below this fraction of the largest are
// flagged as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// `n x width` matrix of tapped codes, row `i` drawn with seed `seed + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSampleMatrix {
    pub rows: usize,
    pub width: usize,
    /// Row-major.
    pub data: Vec<f64>,
    pub tap_layer: LayerId,
    pub seed: u64,
}

impl LatentSampleMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, tap_layer: LayerId, seed: u64) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid("at least two samples are required"));
        }
        let width = rows[0].len();
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("sample rows must share a positive width"));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("sample matrix has non-finite entries"));
        }
        Ok(Self {
            rows: data.len() / width,
            width,
            data,
            tap_layer,
            seed,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.width];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.rows as f64);
        mean
    }
}

/// Taps `n` seeded latents at `tap` with the neutral expression.
pub fn collect_samples(
    gen: &dyn GeneratorBackend,
    n: usize,
    tap: &LayerId,
    seed: u64,
) -> Result<LatentSampleMatrix> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    let neutral = ExpressionVector::neutral();
    let rows = (0..n as u64)
        .map(|i| {
            let z = sample_latent(seed.wrapping_add(i), gen.latent_dim(), gen.latent_sigma())?;
            Ok(partial_forward(gen, &z, &neutral, tap)?.values)
        })
        .collect::<Result<Vec<_>>>()?;
    LatentSampleMatrix::from_rows(rows, tap.clone(), seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalComponentSet {
    /// Unit components, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Sample variance along each component.
    pub explained_variance: Vec<f64>,
    /// Components carrying (numerically) zero variance.
    pub rank_deficient: Vec<bool>,
    pub tap_layer: LayerId,
    pub samples: usize,
    pub seed: u64,
}

impl PrincipalComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Top-`k` principal components of the centered samples via SVD.
///
/// Each component's largest-magnitude entry is made positive.
pub fn fit_pca(m: &LatentSampleMatrix, k: usize) -> Result<PrincipalComponentSet> {
    let max_k = (m.rows - 1).min(m.width);
    if k == 0 || k > max_k {
        return Err(Error::invalid(format!("k must lie in 1..={max_k}, got {k}")));
    }
    let mean = m.column_means();
    let centered = DMatrix::from_fn(m.rows, m.width, |i, j| m.data[i * m.width + j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::data("SVD did not produce right singular vectors"))?;

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let denom = (m.rows - 1) as f64;
    let all_var: Vec<f64> = order
        .iter()
        .map(|&i| svd.singular_values[i].powi(2) / denom)
        .collect();
    let top = all_var.first().copied().unwrap_or(0.0);

    let mut components = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut pc: Vec<f64> = v_t.row(i).iter().copied().collect();
        let pivot = pc
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            pc.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(pc);
    }
    let explained_variance: Vec<f64> = all_var[..k].to_vec();
    let rank_deficient = explained_variance
        .iter()
        .map(|v| *v <= RANK_TOLERANCE * top.max(f64::MIN_POSITIVE))
        .collect();
    Ok(PrincipalComponentSet {
        components,
        mean,
        explained_variance,
        rank_deficient,
        tap_layer: m.tap_layer.clone(),
        samples: m.rows,
        seed: m.seed,
    })
}

/// `c + alpha * n_steps * PC_i`.
pub fn apply_component(
    c: &IntermediateCode,
    pcs: &PrincipalComponentSet,
    i: usize,
    alpha: f64,
    n_steps: i64,
) -> Result<IntermediateCode> {
    let pc = pcs
        .components
        .get(i)
        .ok_or_else(|| Error::invalid(format!("component {i} out of range 0..{}", pcs.len())))?;
    if c.tap_layer != pcs.tap_layer {
        return Err(Error::invalid(format!(
            "components were fitted at layer {} but code is tapped at {}",
            pcs.tap_layer, c.tap_layer
        )));
    }
    if c.dim() != pc.len() {
        return Err(Error::invalid("component width does not match code"));
    }
    let scale = alpha * n_steps as f64;
    IntermediateCode::new(
        c.values.iter().zip(pc).map(|(v, p)| v + scale * p).collect(),
        c.tap_layer.clone(),
    )
}
