//! Masked-motion loss and the contrastive loss with auxiliary reconstruction.
//!
//! Both reconstruction terms are L1 means: per item over the selected frames'
//! 132 components, then averaged over the items that have any selected frame.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::{Error, Result, FRAME_DIM};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 10.0;
/// Allowed deviation from unit norm for similarity inputs.
pub const NORM_TOLERANCE: f64 = 1e-4;
pub const TEMPERATURE_PARAM: &str = "logit_scale";

/// Registers the learnable temperature, stored as `log(1/τ)`.
pub fn add_temperature<T: Real>(store: &mut ParamStore<T>, tau: f64) -> Result<ParamId> {
    if !(TAU_MIN..=TAU_MAX).contains(&tau) {
        return Err(Error::Config(format!(
            "initial temperature {tau} outside [{TAU_MIN}, {TAU_MAX}]"
        )));
    }
    store.add(
        TEMPERATURE_PARAM,
        Tensor::scalar(T::lit((1.0 / tau).ln())).reshape(&[1])?,
    )
}

pub fn temperature<T: Real>(store: &ParamStore<T>, id: ParamId) -> f64 {
    (-store.value(id).data()[0].as_f64()).exp()
}

/// Pulls `log(1/τ)` back so that `τ ∈ [TAU_MIN, TAU_MAX]`.
pub fn clamp_temperature<T: Real>(store: &mut ParamStore<T>, id: ParamId) {
    let v = &mut store.get_mut(id).value.data_mut()[0];
    let (lo, hi) = ((1.0 / TAU_MAX).ln(), (1.0 / TAU_MIN).ln());
    *v = T::lit(v.as_f64().clamp(lo, hi));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive_m2t: f64,
    pub contrastive_t2m: f64,
    pub recon: f64,
    pub alpha: f64,
}

/// Row weights that turn a summed L1 over reconstruction rows into the
/// per-item mean, batch average. `select(b, t)` picks frames.
fn l1_weights(batch: &Batch, select: impl Fn(usize, usize) -> bool) -> Result<Vec<f64>> {
    let mut counts = Vec::with_capacity(batch.len());
    for (b, &len) in batch.lengths().iter().enumerate() {
        counts.push((0..len).filter(|&t| select(b, t)).count());
    }
    let items = counts.iter().filter(|&&c| c > 0).count();
    if items == 0 {
        return Err(Error::InvalidArgument(
            "no frames selected for the reconstruction loss".into(),
        ));
    }
    let mut w = Vec::with_capacity(batch.lengths().iter().sum());
    for (b, &len) in batch.lengths().iter().enumerate() {
        for t in 0..len {
            w.push(if select(b, t) {
                1.0 / (items * counts[b] * FRAME_DIM) as f64
            } else {
                0.0
            });
        }
    }
    Ok(w)
}

fn valid_target<T: Real>(batch: &Batch) -> Result<Tensor<T>> {
    let rows: usize = batch.lengths().iter().sum();
    let mut data = Vec::with_capacity(rows * FRAME_DIM);
    for b in 0..batch.len() {
        data.extend(batch.item_target(b).iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![rows, FRAME_DIM], data)
}

fn weighted_l1<T: Real>(
    g: &mut Graph<'_, T>,
    recon: Var,
    batch: &Batch,
    w: Vec<f64>,
) -> Result<Var> {
    let target = valid_target::<T>(batch)?;
    g.weighted_l1(recon, &target, w.into_iter().map(T::lit).collect())
}

/// L1 on masked frames (or, with `all_valid`, every valid frame).
/// `recon` holds one row per valid frame, item-major.
pub fn mmp_loss<T: Real>(
    g: &mut Graph<'_, T>,
    recon: Var,
    batch: &Batch,
    all_valid: bool,
) -> Result<Var> {
    let spans = batch.spans();
    let w = if all_valid {
        l1_weights(batch, |_, _| true)?
    } else {
        l1_weights(batch, |b, t| spans[b].is_some_and(|s| s.contains(t)))?
    };
    weighted_l1(g, recon, batch, w)
}

/// L1 over all valid frames.
pub fn recon_loss<T: Real>(g: &mut Graph<'_, T>, recon: Var, batch: &Batch) -> Result<Var> {
    let w = l1_weights(batch, |_, _| true)?;
    weighted_l1(g, recon, batch, w)
}

fn check_unit_rows<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = t
            .row(r)
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Contract(format!(
                "{what} row {r} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// `S_ij = (m_i · l_j) / τ` for unit-norm rows.
pub fn similarity_matrix(m: &Tensor<f64>, l: &Tensor<f64>, tau: f64) -> Result<Tensor<f64>> {
    if m.shape().len() != 2 || l.shape().len() != 2 || m.cols() != l.cols() {
        return Err(Error::shape("similarity_matrix", m.shape(), l.shape()));
    }
    check_unit_rows(m, "motion")?;
    check_unit_rows(l, "text")?;
    let (n, k, p) = (m.rows(), l.rows(), m.cols());
    let mut s = Tensor::zeros(&[n, k]);
    crate::nn::gemm(
        false,
        true,
        n,
        k,
        p,
        1.0 / tau,
        m.data(),
        p,
        l.data(),
        p,
        0.0,
        s.data_mut(),
        k,
    );
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct CstarOutput {
    pub total: Var,
    pub m2t: Var,
    pub t2m: Var,
    pub recon: Option<Var>,
    pub logits: Var,
}

/// Symmetric InfoNCE over paired rows plus `alpha` times the valid-frame L1.
/// `recon` may be omitted when `alpha == 0`.
pub fn cstar_loss<T: Real>(
    g: &mut Graph<'_, T>,
    motion: Var,
    text: Var,
    logit_scale: Var,
    recon: Option<(Var, &Batch)>,
    alpha: f64,
) -> Result<CstarOutput> {
    let n = g.shape(motion)[0];
    if n == 0 || g.shape(text)[0] != n {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs N >= 1 pairs, got {} motions and {} texts",
            n,
            g.shape(text)[0]
        )));
    }
    check_unit_rows(g.value(motion), "motion")?;
    check_unit_rows(g.value(text), "text")?;
    let cos = g.matmul_nt(motion, text)?;
    let logits = g.scale_exp(cos, logit_scale)?;
    if !g.value(logits).is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let m2t = g.diag_cross_entropy(logits, false)?;
    let t2m = g.diag_cross_entropy(logits, true)?;
    let recon = match recon {
        Some((r, batch)) => Some(recon_loss(g, r, batch)?),
        None if alpha != 0.0 => {
            return Err(Error::InvalidArgument(
                "alpha > 0 requires a reconstruction".into(),
            ));
        }
        None => None,
    };
    let mut terms = vec![(m2t, T::one()), (t2m, T::one())];
    if let Some(r) = recon {
        terms.push((r, T::lit(alpha)));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(CstarOutput {
        total,
        m2t,
        t2m,
        recon,
        logits,
    })
}

impl CstarOutput {
    pub fn breakdown<T: Real>(&self, g: &Graph<'_, T>, alpha: f64) -> LossBreakdown {
        let s = |v: Var| g.value(v).data()[0].as_f64();
        LossBreakdown {
            total: s(self.total),
            contrastive_m2t: s(self.m2t),
            contrastive_t2m: s(self.t2m),
            recon: self.recon.map(s).unwrap_or(0.0),
            alpha,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::collate;
    use rand::SeedableRng;

    #[test]
    fn temperature_round_trip_and_clamp() {
        let mut store = ParamStore::<f32>::new();
        let id = add_temperature(&mut store, TAU_INIT).unwrap();
        assert!((temperature(&store, id) - 0.07).abs() < 1e-7);
        store.get_mut(id).value.data_mut()[0] = 50.0;
        clamp_temperature(&mut store, id);
        assert!((temperature(&store, id) - TAU_MIN).abs() < 1e-7);
        store.get_mut(id).value.data_mut()[0] = -3.0;
        clamp_temperature(&mut store, id);
        assert_eq!(temperature(&store, id), 1.0);
        assert!(add_temperature(&mut ParamStore::<f32>::new(), 2.0).is_err());
    }

    #[test]
    fn similarity_scales_by_inverse_temperature() {
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let s = similarity_matrix(&m, &m, 1.0).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);
        let s = similarity_matrix(&m, &m, 0.07).unwrap();
        assert!((s.data()[0] - 1.0 / 0.07).abs() < 1e-12);
        let bad = Tensor::new(vec![1, 2], vec![1.0, 0.1]).unwrap();
        assert!(matches!(
            similarity_matrix(&bad, &m, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mmp_constant_offset_is_one() {
        let clip = vec![0.25f32; 4 * FRAME_DIM];
        let mut batch = collate(&[&clip], 10).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        batch.apply_masking(&mut rng).unwrap();
        let span = batch.spans()[0].unwrap();
        assert!(span.len >= 1 && span.end() <= 4);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let r = g.input(Tensor::full(&[4, FRAME_DIM], 1.25));
        let l = mmp_loss(&mut g, r, &batch, false).unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);
        batch.clear_masking();
        assert!(matches!(
            mmp_loss(&mut g, r, &batch, false),
            Err(Error::InvalidArgument(_))
        ));
    }
}
