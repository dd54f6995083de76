//! Subspace scores against brute-force references.

use mlaforge::model::{forward_mha_gqa, AttentionWeights, ModelConfig, TokenSequence};
use mlaforge::numerics::Matrix;
use mlaforge::rope::RopeKind;
use mlaforge::selection::{score_mkl, score_two_norm, select_top_r, top_r, SensitivityMap};
use mlaforge::synth::{calibration, planted_model, random_model, CalibSpec};

fn small(kind: RopeKind, d_head: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 16,
        d_head,
        rope_kind: kind,
        rope_base: 10000.0,
        d_rope: 2,
        d_latent: 4,
    }
}

fn data(kind: RopeKind, d_model: usize, sequences: usize, seed: u64) -> Vec<TokenSequence> {
    let spec = CalibSpec {
        d_model,
        rope_kind: kind,
        sequences,
        text: 6,
        images: 1,
        image_rows: 2,
        image_cols: 3,
        visual_scale: 1.0,
    };
    calibration(&spec, seed).unwrap()
}

fn zero_rows(m: &mut Matrix, rows: std::ops::Range<usize>) {
    for r in rows {
        m.row_mut(r).fill(0.0);
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

/// Score of `(l, h, k)` by zeroing subspace `k` of head `h`'s query rows and
/// of its group's key rows, then rerunning the whole model.
fn ablation_score(cfg: &ModelConfig, layers: &[AttentionWeights], seqs: &[TokenSequence], l: usize, h: usize, k: usize) -> f64 {
    let mut ablated = layers.to_vec();
    let (qh, kg) = (h * cfg.d_head, cfg.kv_head_of(h) * cfg.d_head);
    zero_rows(&mut ablated[l].w_q, qh + 2 * k..qh + 2 * k + 2);
    zero_rows(&mut ablated[l].w_k, kg + 2 * k..kg + 2 * k + 2);
    let mut total = 0.0;
    for seq in seqs {
        let full = forward_mha_gqa(cfg, layers, seq).unwrap();
        let masked = forward_mha_gqa(cfg, &ablated, seq).unwrap();
        let (p, q) = (&full.attn[l][h], &masked.attn[l][h]);
        let n = seq.len();
        total += (0..n).map(|i| kl(&p.row(i)[..=i], &q.row(i)[..=i])).sum::<f64>() / n as f64;
    }
    total / seqs.len() as f64
}

#[test]
fn mkl_matches_exhaustive_ablation() {
    for kind in [RopeKind::Vanilla1d, RopeKind::Mrope] {
        let cfg = small(kind, 16);
        let layers = random_model(&cfg, 21);
        let seqs = data(kind, 16, 3, 22);
        let map = score_mkl(&cfg, &layers, &seqs).unwrap();
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                for k in 0..cfg.n_subspaces() {
                    let want = ablation_score(&cfg, &layers, &seqs, l, h, k);
                    let got = map.get(l, h, k);
                    assert!((got - want).abs() <= 1e-9 * want.abs() + 1e-15, "{kind:?} ({l},{h},{k}): {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn two_norm_matches_direct_projection() {
    let cfg = small(RopeKind::Mrope, 16);
    let layers = random_model(&cfg, 23);
    let seqs = data(RopeKind::Mrope, 16, 3, 24);
    let map = score_two_norm(&cfg, &layers, &seqs).unwrap();
    let n_tokens: usize = seqs.iter().map(TokenSequence::len).sum();
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            for k in 0..cfg.n_subspaces() {
                let mut sum = 0.0;
                for seq in &seqs {
                    let x = &forward_mha_gqa(&cfg, &layers, seq).unwrap().layer_inputs[l];
                    let qrows = layers[l].w_q.row_block(h * cfg.d_head + 2 * k, 2).matmul(x);
                    let krows = layers[l].w_k.row_block(cfg.kv_head_of(h) * cfg.d_head + 2 * k, 2).matmul(x);
                    for j in 0..x.cols() {
                        sum += qrows.col(j).iter().map(|v| v * v).sum::<f64>().sqrt()
                            * krows.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                    }
                }
                let want = sum / n_tokens as f64;
                assert!((map.get(l, h, k) - want).abs() <= 1e-12 * want, "({l},{h},{k})");
            }
        }
    }
}

#[test]
fn planted_subspace_ranks_first() {
    let cfg = ModelConfig {
        d_model: 32,
        ..small(RopeKind::Vanilla1d, 16)
    };
    let (mut hits, mut ablation_hits, mut total) = ([0, 0], 0, 0);
    for seed in 0..5 {
        let (layers, planted) = planted_model(&cfg, seed, 3.0);
        let seqs = data(cfg.rope_kind, 32, 8, seed + 100);
        let maps = [
            score_two_norm(&cfg, &layers, &seqs).unwrap(),
            score_mkl(&cfg, &layers, &seqs).unwrap(),
        ];
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_heads {
                let want = planted[l][cfg.kv_head_of(h)];
                for (i, map) in maps.iter().enumerate() {
                    hits[i] += usize::from(top_r(map.head(l, h), 1) == [want]);
                }
                let brute: Vec<f64> = (0..cfg.n_subspaces())
                    .map(|k| ablation_score(&cfg, &layers, &seqs, l, h, k))
                    .collect();
                ablation_hits += usize::from(top_r(&brute, 1) == [want]);
                total += 1;
            }
        }
    }
    for (name, h) in ["two_norm", "mkl", "ablation"].iter().zip([hits[0], hits[1], ablation_hits]) {
        assert!(h * 10 >= total * 9, "{name}: {h}/{total}");
    }
}

fn scale_queries(layers: &[AttentionWeights], s: f64) -> Vec<AttentionWeights> {
    layers
        .iter()
        .map(|w| AttentionWeights {
            w_q: w.w_q.scale(s),
            ..w.clone()
        })
        .collect()
}

#[test]
fn two_norm_selection_is_exactly_query_scale_invariant_in_one_layer() {
    let cfg = ModelConfig {
        n_layers: 1,
        d_rope: 6,
        ..small(RopeKind::Mrope, 16)
    };
    for seed in 0..5 {
        let layers = random_model(&cfg, seed);
        let seqs = data(cfg.rope_kind, 16, 4, seed + 50);
        let a = score_two_norm(&cfg, &layers, &seqs).unwrap();
        let b = score_two_norm(&cfg, &scale_queries(&layers, 10.0), &seqs).unwrap();
        assert_eq!(select_top_r(&a, &cfg).unwrap(), select_top_r(&b, &cfg).unwrap());
        for (x, y) in a.scores().iter().zip(b.scores()) {
            assert!((10.0 * x - y).abs() <= 1e-12 * y.abs());
        }
    }
}

#[test]
fn planted_selection_survives_query_scaling() {
    let cfg = ModelConfig {
        d_model: 32,
        ..small(RopeKind::Vanilla1d, 16)
    };
    for seed in 0..5 {
        let (layers, _) = planted_model(&cfg, seed, 3.0);
        let seqs = data(cfg.rope_kind, 32, 8, seed + 100);
        let scaled = scale_queries(&layers, 10.0);
        for score in [score_two_norm, score_mkl] {
            let a = select_top_r(&score(&cfg, &layers, &seqs).unwrap(), &cfg).unwrap();
            let b = select_top_r(&score(&cfg, &scaled, &seqs).unwrap(), &cfg).unwrap();
            assert_eq!(a.layers, b.layers, "seed {seed}");
        }
    }
}

#[test]
fn group_selection_averages_member_heads() {
    let cfg = small(RopeKind::Vanilla1d, 8);
    let cfg = cfg.with_targets(4, 4);
    // Heads 0 and 1 share group 0; their averages favour subspaces 1 and 3.
    let mut scores = vec![0.0; cfg.n_layers * cfg.n_heads * 4];
    let head = |l: usize, h: usize| (l * cfg.n_heads + h) * 4;
    scores[head(0, 0)..head(0, 0) + 4].copy_from_slice(&[5.0, 4.0, 0.0, 0.0]);
    scores[head(0, 1)..head(0, 1) + 4].copy_from_slice(&[0.0, 2.0, 0.0, 6.0]);
    let map = SensitivityMap::new(mlaforge::selection::Strategy::TwoNorm, 2, 4, 4, scores).unwrap();
    let sel = select_top_r(&map, &cfg).unwrap();
    assert_eq!(sel.layers[0].groups[0], vec![1, 3]);
    // All-zero scores fall back to the lowest indices.
    assert_eq!(sel.layers[1].groups[1], vec![0, 1]);
}

#[test]
fn sensitivity_csv_has_one_row_per_score() {
    let cfg = small(RopeKind::Vanilla1d, 8);
    let layers = random_model(&cfg, 30);
    let map = score_two_norm(&cfg, &layers, &data(cfg.rope_kind, 16, 2, 31)).unwrap();
    let mut buf = Vec::new();
    map.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,head,k,score"));
    assert_eq!(lines.count(), 2 * 4 * 4);
}

#[test]
fn mkl_rejects_single_token_sequences() {
    let cfg = small(RopeKind::Vanilla1d, 8);
    let layers = random_model(&cfg, 32);
    let seq = data(cfg.rope_kind, 16, 1, 33)[0].slice(0..1);
    assert!(score_mkl(&cfg, &layers, &[seq]).is_err());
}
