//! KV-cache memory accounting and group quantization of cached latents.

mod quant;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rope::RopeKind;

pub use quant::{cosine_similarity, quantize_cache, QuantSpec, QuantizedKvCache, QuantizedLayer, QuantizedVec};

/// Full-cache layout the MLA cache is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Keys and values for every query head.
    Mha,
    /// Keys and values for every kv head.
    Gqa,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mha" => Ok(Baseline::Mha),
            "gqa" => Ok(Baseline::Gqa),
            other => Err(Error::InvalidArgument(format!("unknown baseline {other:?}"))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Baseline::Mha => "mha",
            Baseline::Gqa => "gqa",
        })
    }
}

/// Baseline storage width; the MLA cache may be stored narrower.
pub const BASELINE_BITS: u32 = 16;

/// Cached elements per token of the converted model, all layers.
pub fn mla_elements(cfg: &ModelConfig) -> usize {
    cfg.n_layers * cfg.n_kv_heads * (cfg.d_latent + cfg.d_rope)
}

/// Cached elements per token of the full key/value cache, all layers.
pub fn baseline_elements(cfg: &ModelConfig, baseline: Baseline) -> usize {
    let heads = match baseline {
        Baseline::Mha => cfg.n_heads,
        Baseline::Gqa => cfg.n_kv_heads,
    };
    cfg.n_layers * 2 * heads * cfg.d_head
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CacheBudget {
    pub baseline: Baseline,
    pub bits: u32,
    pub per_token_elements: usize,
    pub baseline_elements: usize,
    /// `100·(1 − elements·bits / (baseline_elements·16))`.
    pub reduction_pct: f64,
    /// Reduction in hundredths of a percent, rounded half away from zero.
    pub reduction_centi: i64,
}

impl CacheBudget {
    /// Memory change as printed in tables, e.g. `-84.38%`.
    pub fn display_pct(&self) -> String {
        let c = self.reduction_centi;
        let sign = if c > 0 {
            "-"
        } else if c < 0 {
            "+"
        } else {
            ""
        };
        let a = c.unsigned_abs();
        format!("{sign}{}.{:02}%", a / 100, a % 100)
    }
}

/// Per-token cache size of the converted model against a full cache.
pub fn account(cfg: &ModelConfig, baseline: Baseline, bits: u32) -> Result<CacheBudget> {
    if ![16, 4, 2].contains(&bits) {
        return Err(Error::InvalidArgument(format!("bits {bits} not in {{16, 4, 2}}")));
    }
    let per_token_elements = mla_elements(cfg);
    let baseline_elements = baseline_elements(cfg, baseline);
    let num = (per_token_elements as i128) * bits as i128;
    let den = (baseline_elements as i128) * BASELINE_BITS as i128;
    if den == 0 {
        return Err(Error::Config("baseline cache is empty".into()));
    }
    // 10000·(den − num)/den rounded half away from zero, in exact integers.
    let diff = 10_000 * (den - num);
    let mag = (2 * diff.abs() + den) / (2 * den);
    let reduction_centi = (if diff < 0 { -mag } else { mag }) as i64;
    Ok(CacheBudget {
        baseline,
        bits,
        per_token_elements,
        baseline_elements,
        reduction_pct: 100.0 * (1.0 - num as f64 / den as f64),
        reduction_centi,
    })
}

/// Published attention shapes used in the budget tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub rope_kind: RopeKind,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "llava-1.5",
        n_layers: 32,
        n_heads: 32,
        n_kv_heads: 32,
        d_head: 128,
        rope_kind: RopeKind::Vanilla1d,
    },
    Preset {
        name: "llava-next",
        n_layers: 32,
        n_heads: 32,
        n_kv_heads: 8,
        d_head: 128,
        rope_kind: RopeKind::Vanilla1d,
    },
    Preset {
        name: "qwen2.5-vl",
        n_layers: 28,
        n_heads: 28,
        n_kv_heads: 4,
        d_head: 128,
        rope_kind: RopeKind::Mrope,
    },
];

/// Retained rotary width used with every preset.
pub const PRESET_D_ROPE: usize = 32;

impl Preset {
    pub fn by_name(name: &str) -> Result<Preset> {
        PRESETS.iter().copied().find(|p| p.name == name).ok_or_else(|| {
            let known: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
            Error::InvalidArgument(format!("unknown preset {name:?}; known: {}", known.join(", ")))
        })
    }

    pub fn config(&self, d_rope: usize, d_latent: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            d_model: self.n_heads * self.d_head,
            d_head: self.d_head,
            rope_kind: self.rope_kind,
            rope_base: 10000.0,
            d_rope,
            d_latent,
        }
    }
}

/// Fixed-width table: model, d_kv, baseline, bits, memory change.
pub fn budget_table(rows: &[(String, usize, CacheBudget)]) -> String {
    let mut out = format!("{:<12} {:>6} {:>8} {:>5} {:>9}\n", "model", "d_kv", "baseline", "bits", "kv_mem");
    for (name, d_kv, b) in rows {
        out.push_str(&format!(
            "{:<12} {:>6} {:>8} {:>5} {:>9}\n",
            name,
            d_kv,
            b.baseline,
            b.bits,
            b.display_pct()
        ));
    }
    out
}
