//! MLA forward pass: cache behaviour and agreement with the source model.

use mlaforge::convert::{convert, ConvertOptions};
use mlaforge::model::{
    forward_mha_gqa, forward_mla, AttentionWeights, KvCache, MlaLayerWeights, ModelConfig, PartialRopeModel,
    TokenSequence,
};
use mlaforge::rope::RopeKind;
use mlaforge::selection::{LayerSelection, SubspaceSelection, Strategy};
use mlaforge::synth::{calibration, random_model, CalibSpec};

fn cfg(kind: RopeKind) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 32,
        d_head: 16,
        rope_kind: kind,
        rope_base: 10000.0,
        d_rope: 4,
        d_latent: 6,
    }
}

fn spec(kind: RopeKind, sequences: usize) -> CalibSpec {
    CalibSpec {
        d_model: 32,
        rope_kind: kind,
        sequences,
        text: 6,
        images: 1,
        image_rows: 2,
        image_cols: 3,
        visual_scale: 1.0,
    }
}

fn converted(kind: RopeKind) -> (ModelConfig, Vec<AttentionWeights>, Vec<MlaLayerWeights>, Vec<TokenSequence>) {
    let c = cfg(kind);
    let layers = random_model(&c, 1);
    let calib = calibration(&spec(kind, 6), 2).unwrap();
    let conv = convert(&c, &layers, &calib, ConvertOptions::default()).unwrap();
    (c, layers, conv.layers, calibration(&spec(kind, 3), 3).unwrap())
}

#[test]
fn decode_matches_prefill() {
    for kind in [RopeKind::Vanilla1d, RopeKind::Mrope] {
        let (c, _, mla, seqs) = converted(kind);
        for seq in &seqs {
            let full = forward_mla(&c, &mla, seq, KvCache::new(&c)).unwrap();
            for split in [1, seq.len() / 2, seq.len() - 1] {
                let mut step = forward_mla(&c, &mla, &seq.slice(0..split), KvCache::new(&c)).unwrap();
                let mut cols = vec![step.output.clone()];
                for j in split..seq.len() {
                    step = forward_mla(&c, &mla, &seq.slice(j..j + 1), step.cache).unwrap();
                    cols.push(step.output.clone());
                }
                let refs: Vec<_> = cols.iter().collect();
                let stitched = mlaforge::numerics::Matrix::hstack(&refs).unwrap();
                let scale = full.output.frobenius_norm();
                assert!(stitched.max_abs_diff(&full.output) <= 1e-9 * scale, "{kind:?} split {split}");
                assert_eq!(step.cache, full.cache, "{kind:?} split {split}");
            }
        }
    }
}

#[test]
fn cache_holds_latents_and_rope_keys_only() {
    let (c, _, mla, seqs) = converted(RopeKind::Mrope);
    let out = forward_mla(&c, &mla, &seqs[0], KvCache::new(&c)).unwrap();
    let n = seqs[0].len();
    assert_eq!(out.cache.len(), n);
    assert_eq!(out.cache.tags, seqs[0].modality);
    assert_eq!(out.cache.element_count(), c.n_layers * c.n_kv_heads * (c.d_latent + c.d_rope) * n);
    for layer in &out.cache.layers {
        assert!(layer.latents.iter().all(|v| v.len() == c.n_kv_heads * c.d_latent));
        assert!(layer.rope_keys.iter().all(|v| v.len() == c.n_kv_heads * c.d_rope));
    }
}

#[test]
fn forward_is_deterministic() {
    let (c, _, mla, seqs) = converted(RopeKind::Vanilla1d);
    let a = forward_mla(&c, &mla, &seqs[1], KvCache::new(&c)).unwrap();
    let b = forward_mla(&c, &mla, &seqs[1], KvCache::new(&c)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_cache_is_rejected() {
    let (c, _, mla, seqs) = converted(RopeKind::Vanilla1d);
    let other = KvCache::new(&c.with_targets(c.d_rope, c.d_latent + 1));
    assert!(forward_mla(&c, &mla, &seqs[0], other).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let (c, _, mla, seqs) = converted(RopeKind::Mrope);
    let out = forward_mla(&c, &mla, &seqs[0], KvCache::new(&c)).unwrap();
    for heads in &out.attn {
        for p in heads {
            for i in 0..p.rows() {
                let row = p.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row[i + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn partial_rope_with_every_subspace_is_the_source_model() {
    for kind in [RopeKind::Vanilla1d, RopeKind::Mrope] {
        let c = cfg(kind).with_targets(16, 6);
        let layers = random_model(&c, 4);
        let sel = SubspaceSelection {
            strategy: Strategy::TwoNorm,
            layers: vec![LayerSelection::full(c.n_kv_heads, c.n_subspaces()); c.n_layers],
        };
        let partial = PartialRopeModel::from_original(&c, &layers, sel).unwrap();
        assert_eq!(partial.original_layout(), layers);
        for seq in calibration(&spec(kind, 2), 5).unwrap() {
            let a = partial.forward(&seq).unwrap();
            let b = forward_mha_gqa(&c, &layers, &seq).unwrap();
            assert_eq!(a.output, b.output, "{kind:?}");
        }
    }
}

#[test]
fn original_layout_inverts_the_permutation() {
    let c = cfg(RopeKind::Mrope);
    let layers = random_model(&c, 6);
    let sel = SubspaceSelection {
        strategy: Strategy::Mkl,
        layers: vec![
            LayerSelection {
                groups: vec![vec![1, 6], vec![0, 7]],
            },
            LayerSelection {
                groups: vec![vec![3, 4], vec![2, 5]],
            },
        ],
    };
    let partial = PartialRopeModel::from_original(&c, &layers, sel).unwrap();
    assert_ne!(partial.layers, layers);
    assert_eq!(partial.original_layout(), layers);
}
