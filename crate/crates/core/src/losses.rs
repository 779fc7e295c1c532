//! Contrastive and restoration objectives.
//!
//! The value-level functions here operate on plain arrays and double as
//! references for the fused graph ops in [`crate::nn::Graph`]; the
//! `*_on_graph` helpers record the same losses on a tape.

use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::nn::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Default InfoNCE temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Embeddings of originals and of their transformed views.
#[derive(Debug, Clone)]
pub struct PairBatch<S> {
    /// `N x E`, one row per original image.
    pub z: Tensor<S>,
    /// `N x E`, row `n` embeds the view of image `n`.
    pub z_t: Tensor<S>,
    pub tau: S,
}

pub fn cosine_sim<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(TowerError::Data(format!(
            "vector lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot = a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
    let na = a.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
    let nb = b.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt();
    if !(na > S::zero()) || !(nb > S::zero()) {
        return Err(TowerError::Numeric(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    // clamp rounding spill past +-1
    Ok((dot / (na * nb)).max(-S::one()).min(S::one()))
}

/// Single-direction InfoNCE with `2N - 2` negatives per anchor.
pub fn info_nce<S: Scalar>(pb: &PairBatch<S>) -> Result<S> {
    let s = pb.z.shape();
    if s.len() != 2 || pb.z_t.shape() != s {
        return Err(TowerError::Usage(format!(
            "pair batch shapes {s:?} / {:?}",
            pb.z_t.shape()
        )));
    }
    if !(pb.tau > S::zero()) {
        return Err(TowerError::Config(format!(
            "temperature {} must be > 0",
            pb.tau
        )));
    }
    let (n, e) = (s[0], s[1]);
    if n < 2 {
        return Err(TowerError::Contract(format!(
            "contrastive loss needs N >= 2, got {n}"
        )));
    }
    fn row<S: Scalar>(t: &Tensor<S>, i: usize, e: usize) -> &[S] {
        &t.data()[i * e..(i + 1) * e]
    }
    let mut total = S::zero();
    for i in 0..n {
        let anchor = row(&pb.z, i, e);
        let mut logits = Vec::with_capacity(2 * n - 1);
        logits.push(cosine_sim(anchor, row(&pb.z_t, i, e))? / pb.tau);
        for j in (0..n).filter(|&j| j != i) {
            logits.push(cosine_sim(anchor, row(&pb.z, j, e))? / pb.tau);
            logits.push(cosine_sim(anchor, row(&pb.z_t, j, e))? / pb.tau);
        }
        let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max
            + logits
                .iter()
                .fold(S::zero(), |a, &l| a + (l - max).exp())
                .ln();
        total += lse - logits[0];
    }
    Ok(total / S::lit(n as f64))
}

/// Sum over the batch of per-image mean squared error between restorations
/// `y` and originals `x`.
pub fn mse_restoration<S: Scalar>(x: &[Image<S>], y: &[Image<S>]) -> Result<S> {
    if x.len() != y.len() {
        return Err(TowerError::Data(format!(
            "batch sizes {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut total = S::zero();
    for (a, b) in x.iter().zip(y) {
        if a.shape() != b.shape() {
            return Err(TowerError::Data(format!(
                "image shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let sq = a
            .data()
            .iter()
            .zip(b.data())
            .fold(S::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q));
        total += sq / S::lit(a.data().len().max(1) as f64);
    }
    Ok(total)
}

pub fn tower_loss<S: Scalar>(contrastive: S, generative: S, lambda: S) -> S {
    contrastive + lambda * generative
}

/// Normalizes raw head outputs and records InfoNCE on `g`.
pub fn contrastive_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    z: Var,
    z_t: Var,
    tau: S,
    symmetric: bool,
) -> Result<Var> {
    let z = g.l2_normalize(z)?;
    let z_t = g.l2_normalize(z_t)?;
    g.info_nce(z, z_t, tau, symmetric)
}

/// Records `L_con + lambda * L_gen` on `g`; either branch may be absent.
pub fn tower_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    con: Option<Var>,
    gen: Option<Var>,
    lambda: S,
) -> Result<Var> {
    match (con, gen) {
        (Some(c), Some(r)) => {
            let r = g.scale(r, lambda);
            g.add(c, r)
        }
        (Some(c), None) => Ok(c),
        (None, Some(r)) => Ok(g.scale(r, lambda)),
        (None, None) => Err(TowerError::Usage("loss with neither branch enabled".into())),
    }
}
