use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CacheLayer, KvCache, Modality};

/// Asymmetric round-to-nearest group quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantSpec {
    pub bits: u32,
    pub group_size: usize,
}

impl QuantSpec {
    pub fn new(bits: u32, group_size: usize) -> Result<Self> {
        if bits != 4 && bits != 2 {
            return Err(Error::InvalidArgument(format!("quantization bits {bits} not in {{4, 2}}")));
        }
        if group_size == 0 {
            return Err(Error::InvalidArgument("group size must be positive".into()));
        }
        Ok(Self { bits, group_size })
    }

    pub fn int4() -> Self {
        Self { bits: 4, group_size: 64 }
    }

    fn levels(&self) -> u32 {
        (1 << self.bits) - 1
    }
}

/// One quantized vector. Each group keeps its min and max; code `c` decodes
/// to the point `c / (2^bits − 1)` of the way from min to max.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedVec {
    pub codes: Vec<u8>,
    /// `(min, max)` per group.
    pub ranges: Vec<(f64, f64)>,
}

impl QuantizedVec {
    pub fn quantize(values: &[f64], spec: QuantSpec) -> Self {
        let qmax = spec.levels() as f64;
        let mut codes = Vec::with_capacity(values.len());
        let mut ranges = Vec::with_capacity(values.len().div_ceil(spec.group_size));
        for group in values.chunks(spec.group_size) {
            let lo = group.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ranges.push((lo, hi));
            let span = hi - lo;
            for &x in group {
                let c = if span > 0.0 {
                    ((x - lo) / span * qmax).round().clamp(0.0, qmax)
                } else {
                    0.0
                };
                codes.push(c as u8);
            }
        }
        Self { codes, ranges }
    }

    pub fn dequantize(&self, spec: QuantSpec) -> Vec<f64> {
        let qmax = spec.levels() as f64;
        self.codes
            .chunks(spec.group_size)
            .zip(&self.ranges)
            .flat_map(|(group, &(lo, hi))| {
                group.iter().map(move |&c| {
                    let t = c as f64 / qmax;
                    (lo * (1.0 - t) + hi * t).clamp(lo, hi)
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub latents: Vec<QuantizedVec>,
    pub rope_keys: Vec<QuantizedVec>,
}

/// A [`KvCache`] with every latent and rope key stored as group codes.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedKvCache {
    pub spec: QuantSpec,
    pub n_kv_heads: usize,
    pub d_latent: usize,
    pub d_rope: usize,
    pub tags: Vec<Modality>,
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedKvCache {
    /// Decode back to a 16-bit nominal cache.
    pub fn dequantize(&self) -> KvCache {
        let spec = self.spec;
        KvCache {
            n_kv_heads: self.n_kv_heads,
            d_latent: self.d_latent,
            d_rope: self.d_rope,
            storage_bits: 16,
            tags: self.tags.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| CacheLayer {
                    latents: l.latents.par_iter().map(|q| q.dequantize(spec)).collect(),
                    rope_keys: l.rope_keys.par_iter().map(|q| q.dequantize(spec)).collect(),
                })
                .collect(),
        }
    }
}

/// Quantize every cached latent and rope key of a 16-bit cache.
pub fn quantize_cache(cache: &KvCache, spec: QuantSpec) -> Result<QuantizedKvCache> {
    let spec = QuantSpec::new(spec.bits, spec.group_size)?;
    if cache.storage_bits != 16 {
        return Err(Error::InvalidArgument(format!(
            "cache is stored at {} bits, expected 16",
            cache.storage_bits
        )));
    }
    Ok(QuantizedKvCache {
        spec,
        n_kv_heads: cache.n_kv_heads,
        d_latent: cache.d_latent,
        d_rope: cache.d_rope,
        tags: cache.tags.clone(),
        layers: cache
            .layers
            .iter()
            .map(|l| QuantizedLayer {
                latents: l.latents.par_iter().map(|v| QuantizedVec::quantize(v, spec)).collect(),
                rope_keys: l.rope_keys.par_iter().map(|v| QuantizedVec::quantize(v, spec)).collect(),
            })
            .collect(),
    })
}

/// `a·b / (‖a‖‖b‖)`; 1 when both are zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (crate::numerics::norm2(a), crate::numerics::norm2(b));
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    crate::numerics::dot(a, b) / (na * nb)
}
