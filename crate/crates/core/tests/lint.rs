use vitlr_core::lint::{expected_warning_count, lint_graph, Verdict, ALLOWLIST};
use vitlr_core::{ModelConfig, ViTLR};

fn small(encoder_depth: usize, decoder_depth: usize, s: usize) -> ModelConfig {
    ModelConfig {
        n: 2,
        h: 32,
        w: 32,
        m: 4,
        grid_h: 2,
        grid_w: 2,
        widths: [4, 6, 8],
        query_dim: 8,
        s,
        encoder_depth,
        decoder_depth,
        ..ModelConfig::default()
    }
}

#[test]
fn default_config_flags_every_encoder_layernorm() {
    let cfg = ModelConfig::default();
    let report = lint_graph(&ViTLR::new(cfg.clone(), 0).unwrap()).unwrap();
    for j in 0..cfg.encoder_depth {
        let layer = format!("encoder.{j}.ln");
        assert!(
            report
                .warnings()
                .any(|e| e.layer == layer && e.op == "LayerNormalization"),
            "{layer} not flagged"
        );
        let dw = report
            .entries
            .iter()
            .find(|e| e.layer == format!("encoder.{j}.dw"))
            .unwrap();
        assert_eq!(dw.kernel, Some(7));
        assert!(dw
            .message
            .as_deref()
            .unwrap()
            .contains("preference violation"));
    }
}

#[test]
fn three_by_three_without_encoder_has_no_kernel_warnings() {
    let report = lint_graph(&ViTLR::new(small(0, 1, 3), 0).unwrap()).unwrap();
    assert!(report.warnings().all(|e| e.op == "LayerNormalization"));
    assert!(report
        .entries
        .iter()
        .filter_map(|e| e.kernel)
        .all(|k| k == 1 || k == 3));
}

#[test]
fn counts_follow_config_arithmetic() {
    for (e, d, s) in [(0, 1, 3), (1, 1, 3), (2, 2, 3), (1, 3, 5), (3, 1, 1)] {
        let cfg = small(e, d, s);
        let report = lint_graph(&ViTLR::new(cfg.clone(), 0).unwrap()).unwrap();
        // backbone 3×(conv, bn) + split (conv, bn); projection dw, bn, pw;
        // encoder dw, ln, pw1, pw2; decoder sim ×4, cim ×3, ffn ×2; two heads.
        let layers = 6 + 2 + 3 + 4 * e + 9 * d + 2;
        assert_eq!(report.layers().count(), layers, "e={e} d={d}");
        assert_eq!(cfg.layer_count(), layers);
        // LayerNorm per encoder block and decoder layer, 7×7 per encoder block,
        // and the projection when s is not 1 or 3.
        let warnings = e + d + e + usize::from(s == 5);
        assert_eq!(
            report.count(Verdict::Warning),
            warnings,
            "e={e} d={d} s={s}"
        );
        assert_eq!(expected_warning_count(&cfg), warnings);
    }
}

#[test]
fn allowed_entries_are_on_the_allowlist() {
    let report = lint_graph(&ViTLR::new(small(1, 1, 3), 0).unwrap()).unwrap();
    for e in report
        .entries
        .iter()
        .filter(|e| e.verdict == Verdict::Allowed)
    {
        assert!(
            ALLOWLIST.contains(&e.op) || e.op == "DepthwiseConv2D",
            "{}",
            e.op
        );
    }
    assert!(report.count(Verdict::Auxiliary) > 0);
    let text = report.to_text();
    assert!(text.lines().last().unwrap().contains("warnings"));
}
