//! End-to-end conversion and on-disk formats.

use mlaforge::checkpoint::{
    decode_calibration, encode_calibration, load_calibration, load_checkpoint, save_calibration, save_checkpoint,
    Checkpoint,
};
use mlaforge::convert::{convert, loss_report, output_residual, ConvertOptions};
use mlaforge::model::{Modality, ModelConfig, TokenSequence};
use mlaforge::rope::RopeKind;
use mlaforge::selection::Strategy;
use mlaforge::synth::{calibration, mirrored_calibration, random_model, CalibSpec};

fn gqa(kind: RopeKind) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 32,
        d_head: if kind == RopeKind::Mrope { 16 } else { 8 },
        rope_kind: kind,
        rope_base: 10000.0,
        d_rope: 8,
        d_latent: 8,
    }
}

fn spec(kind: RopeKind, sequences: usize) -> CalibSpec {
    CalibSpec {
        d_model: 32,
        rope_kind: kind,
        sequences,
        text: 8,
        images: 1,
        image_rows: 2,
        image_cols: 4,
        visual_scale: 1.0,
    }
}

fn opts(strategy: Strategy) -> ConvertOptions {
    ConvertOptions {
        strategy,
        ..ConvertOptions::default()
    }
}

#[test]
fn full_rank_conversion_reproduces_the_source() {
    for kind in [RopeKind::Vanilla1d, RopeKind::Mrope] {
        let cfg = gqa(kind).full_rank();
        let layers = random_model(&cfg, 1);
        for strategy in [Strategy::TwoNorm, Strategy::Mkl] {
            let conv = convert(&cfg, &layers, &calibration(&spec(kind, 16), 2).unwrap(), opts(strategy)).unwrap();
            assert!(conv.report.max_residual() <= 1e-10);
            let held_out = calibration(&spec(kind, 32), 3).unwrap();
            let r = output_residual(&cfg, &layers, &conv.cfg, &conv.layers, &held_out).unwrap();
            assert!(r <= 1e-6, "{kind:?} {strategy}: {r}");
        }
    }
}

#[test]
fn narrower_latent_loses_more() {
    let cfg = gqa(RopeKind::Vanilla1d).with_targets(4, 8);
    let layers = random_model(&cfg, 4);
    let calib = calibration(&spec(cfg.rope_kind, 8), 5).unwrap();
    let wide = convert(&cfg, &layers, &calib, ConvertOptions::default()).unwrap();
    let narrow = convert(&cfg.with_targets(4, 4), &layers, &calib, ConvertOptions::default()).unwrap();
    assert_eq!(wide.selection, narrow.selection);
    for (w, n) in wide.report.layers.iter().zip(&narrow.report.layers) {
        for m in Modality::ALL {
            assert!(n.loss_sq.get(m) > w.loss_sq.get(m), "layer {} {m:?}", w.layer);
        }
        assert!(n.cache_after < w.cache_after);
    }
}

#[test]
fn conversion_does_not_depend_on_thread_count() {
    let cfg = gqa(RopeKind::Mrope).with_targets(4, 6);
    let layers = random_model(&cfg, 6);
    let calib = calibration(&spec(cfg.rope_kind, 6), 7).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| convert(&cfg, &layers, &calib, opts(Strategy::Mkl)).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.layers, four.layers);
    assert_eq!(one.scores, four.scores);
    assert_eq!(one.report, four.report);
}

#[test]
fn single_modality_calibration_needs_opt_in() {
    let cfg = gqa(RopeKind::Vanilla1d).with_targets(4, 6);
    let layers = random_model(&cfg, 8);
    let text_only: Vec<TokenSequence> = calibration(&spec(cfg.rope_kind, 4), 9)
        .unwrap()
        .into_iter()
        .map(|s| {
            let n = s.len();
            TokenSequence::new(s.embeddings, vec![Modality::Text; n], (0..n as u64).map(mlaforge::rope::Position::uniform).collect())
                .unwrap()
        })
        .collect();
    assert!(convert(&cfg, &layers, &text_only, ConvertOptions::default()).is_err());
    let conv = convert(
        &cfg,
        &layers,
        &text_only,
        ConvertOptions {
            allow_fallback: true,
            ..ConvertOptions::default()
        },
    )
    .unwrap();
    for w in &conv.layers {
        assert_eq!(w.fallback, Some(Modality::Visual));
        assert_eq!(w.w_down.visual, w.w_down.text);
    }
}

#[test]
fn invalid_targets_are_rejected() {
    let cfg = gqa(RopeKind::Vanilla1d);
    let layers = random_model(&cfg, 10);
    let calib = calibration(&spec(cfg.rope_kind, 2), 11).unwrap();
    for bad in [cfg.with_targets(3, 4), cfg.with_targets(4, 0), cfg.with_targets(4, 13)] {
        assert!(convert(&bad, &layers, &calib, ConvertOptions::default()).is_err());
    }
    assert!(convert(&cfg, &layers, &[], ConvertOptions::default()).is_err());
}

#[test]
fn mirrored_calibration_gives_unit_ratios() {
    let cfg = gqa(RopeKind::Vanilla1d);
    let layers = random_model(&cfg, 12);
    let mirrored = mirrored_calibration(&spec(cfg.rope_kind, 4), 13).unwrap();
    for (_, e) in loss_report(&cfg, &layers, &mirrored, 6, 1e-6).unwrap().rows {
        assert!((e.ratio - 1.0).abs() <= 1e-9, "{}", e.ratio);
    }
    let mixed = calibration(&spec(cfg.rope_kind, 4), 13).unwrap();
    for (_, e) in loss_report(&cfg, &layers, &mixed, 6, 1e-6).unwrap().rows {
        assert!(e.ratio <= 1.0 + 1e-9, "{}", e.ratio);
    }
}

fn bytes(dir: &std::path::Path, files: &[&str]) -> Vec<Vec<u8>> {
    files.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect()
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = gqa(RopeKind::Mrope).with_targets(4, 6);
    let layers = random_model(&cfg, 14);
    let calib = calibration(&spec(cfg.rope_kind, 4), 15).unwrap();
    let conv = convert(&cfg, &layers, &calib, opts(Strategy::Mkl)).unwrap();
    let ckpts = [
        Checkpoint::Gqa { cfg, layers },
        Checkpoint::Mla {
            cfg: conv.cfg,
            strategy: Strategy::Mkl,
            layers: conv.layers,
        },
    ];
    let files = ["manifest.json", "tensors.bin"];
    for (i, ckpt) in ckpts.iter().enumerate() {
        let a = tmp.path().join(format!("a{i}"));
        let b = tmp.path().join(format!("b{i}"));
        save_checkpoint(&a, ckpt).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&b, &loaded).unwrap();
        assert_eq!(bytes(&a, &files), bytes(&b, &files));
        assert_eq!(load_checkpoint(&b).unwrap(), loaded);
    }
    let c = tmp.path().join("calib");
    save_calibration(&c, &calib).unwrap();
    let back = load_calibration(&c).unwrap();
    assert_eq!(back.len(), calib.len());
    for (x, y) in back.iter().zip(&calib) {
        assert_eq!(x.modality, y.modality);
        assert_eq!(x.positions, y.positions);
        assert!(x.embeddings.max_abs_diff(&y.embeddings) <= 1e-6);
    }
    let (json, blob) = encode_calibration(&back).unwrap();
    assert_eq!(encode_calibration(&decode_calibration(&json, &blob).unwrap()).unwrap(), (json, blob));
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let cfg = gqa(RopeKind::Vanilla1d);
    let (json, blob) = Checkpoint::Gqa {
        cfg,
        layers: random_model(&cfg, 16),
    }
    .encode()
    .unwrap();
    let text = String::from_utf8(json.clone()).unwrap();
    assert!(Checkpoint::decode(&json, &blob).is_ok());
    assert!(Checkpoint::decode(&json, &blob[..blob.len() - 4]).is_err());
    let cases = [
        text.replacen("\"format_version\": 1", "\"format_version\": 9", 1),
        text.replacen("layer.1.w_o", "layer.1.w_x", 1),
        text.replacen("\"offset\": 4096", "\"offset\": 4092", 1),
        text.replacen("\"dtype\": \"f32\"", "\"dtype\": \"f16\"", 1),
        text.replacen("\"paired_even_odd\"", "\"interleaved\"", 1),
    ];
    for bad in cases {
        assert_ne!(bad, text);
        assert!(Checkpoint::decode(bad.as_bytes(), &blob).is_err(), "{bad}");
    }
}

#[test]
fn saving_never_clobbers_foreign_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("out");
    std::fs::create_dir(&target).unwrap();
    std::fs::write(target.join("notes.txt"), b"keep").unwrap();
    let cfg = gqa(RopeKind::Vanilla1d);
    let ckpt = Checkpoint::Gqa {
        cfg,
        layers: random_model(&cfg, 17),
    };
    assert!(save_checkpoint(&target, &ckpt).is_err());
    assert_eq!(std::fs::read(target.join("notes.txt")).unwrap(), b"keep");
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 1);
}
