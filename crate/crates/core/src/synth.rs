//! Seeded synthetic models and calibration data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionWeights, Modality, ModelConfig, TokenSequence};
use crate::numerics::Matrix;
use crate::rope::{assign_positions, RopeKind, Segment};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let n = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

/// Random weights for every layer of `cfg`.
pub fn random_model(cfg: &ModelConfig, seed: u64) -> Vec<AttentionWeights> {
    let mut r = rng(seed);
    (0..cfg.n_layers).map(|_| AttentionWeights::random(cfg, &mut r)).collect()
}

/// Random model where, in every layer and kv group, one subspace of the
/// query and key rows carries `boost`× the scale of the others.
///
/// Returns the weights and the planted subspace per `[layer][group]`.
pub fn planted_model(cfg: &ModelConfig, seed: u64, boost: f64) -> (Vec<AttentionWeights>, Vec<Vec<usize>>) {
    let mut r = rng(seed);
    let n_sub = cfg.n_subspaces();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut planted = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let mut w = AttentionWeights::random(cfg, &mut r);
        let picks: Vec<usize> = (0..cfg.n_kv_heads).map(|_| r.random_range(0..n_sub)).collect();
        for (h, block) in (0..cfg.n_heads).map(|h| (h, h * cfg.d_head)) {
            let k = picks[cfg.kv_head_of(h)];
            scale_rows(&mut w.w_q, block + 2 * k, 2, boost);
        }
        for (g, &k) in picks.iter().enumerate() {
            scale_rows(&mut w.w_k, g * cfg.d_head + 2 * k, 2, boost);
        }
        layers.push(w);
        planted.push(picks);
    }
    (layers, planted)
}

fn scale_rows(m: &mut Matrix, start: usize, len: usize, s: f64) {
    for r in start..start + len {
        for v in m.row_mut(r) {
            *v *= s;
        }
    }
}

/// Shape of generated calibration sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibSpec {
    pub d_model: usize,
    pub rope_kind: RopeKind,
    pub sequences: usize,
    /// Text tokens per sequence, split evenly before and after the images.
    pub text: usize,
    /// Images per sequence.
    pub images: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    /// Visual embeddings are drawn from a low-dimensional subspace with this
    /// scale relative to isotropic text embeddings.
    pub visual_scale: f64,
}

impl CalibSpec {
    pub fn layout(&self) -> Vec<Segment> {
        let head = self.text.div_ceil(2);
        let mut segs = Vec::new();
        if head > 0 {
            segs.push(Segment::text(head));
        }
        for _ in 0..self.images {
            segs.push(Segment::image(self.image_rows, self.image_cols));
        }
        if self.text > head {
            segs.push(Segment::text(self.text - head));
        }
        segs
    }

    pub fn tokens_per_sequence(&self) -> usize {
        self.text + self.images * self.image_rows * self.image_cols
    }
}

/// Calibration batch: text tokens are isotropic Gaussian; visual tokens lie
/// near a random `d_model/4`-dimensional subspace shared across the batch.
pub fn calibration(spec: &CalibSpec, seed: u64) -> Result<Vec<TokenSequence>> {
    if spec.d_model == 0 || spec.sequences == 0 || spec.tokens_per_sequence() == 0 {
        return Err(Error::InvalidArgument("calibration spec describes no tokens".into()));
    }
    let mut r = rng(seed);
    let d = spec.d_model;
    let k = (d / 4).max(1);
    let basis = gaussian(d, k, 1.0 / (k as f64).sqrt(), &mut r);
    let (positions, modality) = assign_positions(spec.rope_kind, &spec.layout())?;
    let n = positions.len();
    let mut out = Vec::with_capacity(spec.sequences);
    for _ in 0..spec.sequences {
        let mut emb = Matrix::zeros(d, n);
        for (j, m) in modality.iter().enumerate() {
            let col: Vec<f64> = match m {
                Modality::Text => (0..d).map(|_| StandardNormal.sample(&mut r)).collect(),
                Modality::Visual => {
                    let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut r)).collect();
                    let mut v = basis.matvec(&z);
                    for x in &mut v {
                        let noise: f64 = StandardNormal.sample(&mut r);
                        *x = spec.visual_scale * (*x + 0.05 * noise);
                    }
                    v
                }
            };
            emb.set_col(j, &col);
        }
        out.push(TokenSequence::new(emb, modality.clone(), positions.clone())?);
    }
    Ok(out)
}

/// Calibration where both modalities see the same activations: each drawn
/// sequence appears once tagged text and once tagged visual, with the same
/// embeddings and positions.
pub fn mirrored_calibration(spec: &CalibSpec, seed: u64) -> Result<Vec<TokenSequence>> {
    let n = spec.tokens_per_sequence();
    if spec.d_model == 0 || spec.sequences == 0 || n == 0 {
        return Err(Error::InvalidArgument("calibration spec describes no tokens".into()));
    }
    let mut r = rng(seed);
    let positions: Vec<_> = (0..n as u64).map(crate::rope::Position::uniform).collect();
    let mut out = Vec::with_capacity(2 * spec.sequences);
    for _ in 0..spec.sequences {
        let emb = gaussian(spec.d_model, n, 1.0, &mut r);
        for m in [Modality::Text, Modality::Visual] {
            out.push(TokenSequence::new(emb.clone(), vec![m; n], positions.clone())?);
        }
    }
    Ok(out)
}
