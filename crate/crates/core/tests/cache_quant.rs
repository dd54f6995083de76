//! Cache accounting and group quantization.

use mlaforge::cachekit::{
    account, cosine_similarity, quantize_cache, Baseline, Preset, QuantSpec, QuantizedVec, PRESETS, PRESET_D_ROPE,
};
use mlaforge::convert::{convert, ConvertOptions};
use mlaforge::model::{forward_mla, KvCache, ModelConfig};
use mlaforge::rope::RopeKind;
use mlaforge::synth::{calibration, random_model, CalibSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn error_is_within_half_a_step(values in proptest::collection::vec(-50.0f64..50.0, 1..200),
                                   bits in prop_oneof![Just(2u32), Just(4u32)], group in 1usize..80) {
        let spec = QuantSpec::new(bits, group).unwrap();
        let q = QuantizedVec::quantize(&values, spec);
        prop_assert_eq!(q.codes.len(), values.len());
        prop_assert_eq!(q.ranges.len(), values.len().div_ceil(group));
        prop_assert!(q.codes.iter().all(|&c| u32::from(c) < (1 << bits)));
        let back = q.dequantize(spec);
        for (i, (x, y)) in values.iter().zip(&back).enumerate() {
            let (lo, hi) = q.ranges[i / group];
            let step = (hi - lo) / ((1u32 << bits) - 1) as f64;
            prop_assert!((x - y).abs() <= 0.5 * step + 1e-12 * (1.0 + x.abs()));
            prop_assert!(*y >= lo && *y <= hi);
        }
    }

    #[test]
    fn quantization_is_idempotent(values in proptest::collection::vec(-5.0f64..5.0, 1..150),
                                  bits in prop_oneof![Just(2u32), Just(4u32)], group in 1usize..70) {
        let spec = QuantSpec::new(bits, group).unwrap();
        let q = QuantizedVec::quantize(&values, spec);
        let again = QuantizedVec::quantize(&q.dequantize(spec), spec);
        prop_assert_eq!(&again, &q);
        prop_assert_eq!(again.dequantize(spec), q.dequantize(spec));
    }

    #[test]
    fn narrower_storage_never_grows_the_cache(d_latent in 1usize..256, preset in 0usize..3) {
        let cfg = PRESETS[preset].config(PRESET_D_ROPE, d_latent);
        for baseline in [Baseline::Mha, Baseline::Gqa] {
            let b16 = account(&cfg, baseline, 16).unwrap();
            let b4 = account(&cfg, baseline, 4).unwrap();
            let b2 = account(&cfg, baseline, 2).unwrap();
            prop_assert!(b16.reduction_pct <= b4.reduction_pct && b4.reduction_pct <= b2.reduction_pct);
            // Storage ratio scales linearly with bits.
            let kept = |b: &mlaforge::cachekit::CacheBudget| 1.0 - b.reduction_pct / 100.0;
            prop_assert!((kept(&b4) - kept(&b16) / 4.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn accounting_examples() {
    let pct = |name: &str, d_latent: usize, baseline: Baseline, bits: u32| {
        let cfg = Preset::by_name(name).unwrap().config(PRESET_D_ROPE, d_latent);
        account(&cfg, baseline, bits).unwrap().display_pct()
    };
    assert_eq!(pct("llava-next", 128, Baseline::Mha, 16), "-84.38%");
    assert_eq!(pct("llava-next", 128, Baseline::Gqa, 16), "-37.50%");
    assert_eq!(pct("llava-next", 128, Baseline::Gqa, 4), "-84.38%");
    assert_eq!(pct("qwen2.5-vl", 64, Baseline::Mha, 16), "-94.64%");
    // 8·(512 + 32) cached elements against 2·8·128: 2.125 times the baseline.
    assert_eq!(pct("llava-next", 512, Baseline::Gqa, 16), "+112.50%");
    // 8·(224 + 32) = 2·8·128 exactly.
    assert_eq!(pct("llava-next", 224, Baseline::Gqa, 16), "0.00%");
    assert!(Preset::by_name("llava-2").is_err());
}

fn toy() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 32,
        d_head: 16,
        rope_kind: RopeKind::Mrope,
        rope_base: 10000.0,
        d_rope: 4,
        d_latent: 8,
    }
}

#[test]
fn int4_cache_keeps_outputs_aligned() {
    let cfg = toy();
    let spec = CalibSpec {
        d_model: 32,
        rope_kind: cfg.rope_kind,
        sequences: 8,
        text: 8,
        images: 1,
        image_rows: 3,
        image_cols: 4,
        visual_scale: 1.0,
    };
    let layers = random_model(&cfg, 40);
    let conv = convert(&cfg, &layers, &calibration(&spec, 41).unwrap(), ConvertOptions::default()).unwrap();
    for seq in calibration(&spec, 42).unwrap() {
        let split = seq.len() - 4;
        let prefix = forward_mla(&cfg, &conv.layers, &seq.slice(0..split), KvCache::new(&cfg)).unwrap();
        let quant = quantize_cache(&prefix.cache, QuantSpec::int4()).unwrap();
        assert_eq!(quant.dequantize().storage_bits, 16);
        let tail = seq.slice(split..seq.len());
        let exact = forward_mla(&cfg, &conv.layers, &tail, prefix.cache.clone()).unwrap();
        let approx = forward_mla(&cfg, &conv.layers, &tail, quant.dequantize()).unwrap();
        // Compare the attention contribution only; the residual stream is shared.
        let delta = |out: &mlaforge::numerics::Matrix| out.sub(&tail.embeddings);
        let cos = cosine_similarity(delta(&exact.output).data(), delta(&approx.output).data());
        assert!(cos >= 0.99, "cosine {cos}");
    }
}

#[test]
fn quantizing_requires_a_sixteen_bit_cache() {
    let cfg = toy();
    let mut cache = KvCache::new(&cfg);
    cache.storage_bits = 4;
    assert!(quantize_cache(&cache, QuantSpec::int4()).is_err());
    assert!(QuantSpec::new(3, 64).is_err());
    assert!(QuantSpec::new(4, 0).is_err());
}
