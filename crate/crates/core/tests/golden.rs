//! Fixed-seed f64 forward pass against a stored fixture.
//!
//! Regenerate with `VITAMIN_WRITE_GOLDEN=1 cargo test -p vitamin-core --test golden`
//! only after the forward pass has been re-verified by the oracle tests.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitamin_core::container::Container;
use vitamin_core::nn::FfnKind;
use vitamin_core::zoo::{build, Arch, ConvBlockKind, ModelGraph, TextSpec, VariantSpec};
use vitamin_core::Tensor;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_forward.vtc")
}

fn outputs() -> Vec<(&'static str, Tensor<f64>)> {
    let v = VariantSpec {
        name: "golden".into(),
        stem_channels: 8,
        stage_depths: [1, 1, 2],
        stage_channels: [8, 16, 24],
        heads: 2,
        embed_dim: 12,
        strides: [2, 2, 2, 2],
        expansion: 4,
        patchify_kernel: 3,
        conv_block: ConvBlockKind::MbconvLn,
        token_block: FfnKind::GeGlu,
    };
    let image: ModelGraph<f64> = build(&Arch::Vitamin(v), 32, 7).unwrap();
    let x = Tensor::<f64>::randn(vec![2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let text: ModelGraph<f64> = build(&Arch::Text(TextSpec::standard(16, 2, 12)), 77, 9).unwrap();
    let mut ids = vec![0usize; 2 * 77];
    ids[..4].copy_from_slice(&[5, 17, 3, TextSpec::standard(16, 2, 12).vocab - 1]);
    ids[77..80].copy_from_slice(&[9, 2, TextSpec::standard(16, 2, 12).vocab - 1]);
    vec![
        ("image_tokens", image.tokens_of(&x).unwrap()),
        ("image_embed", image.embed_images(&x).unwrap()),
        ("text_embed", text.embed_text(&ids).unwrap()),
    ]
}

#[test]
fn forward_matches_golden_fixture() {
    let outs = outputs();
    if std::env::var_os("VITAMIN_WRITE_GOLDEN").is_some() {
        let mut c = Container::new();
        c.set_meta("what", "fixed-seed f64 forward outputs");
        for (n, t) in &outs {
            c.insert(n, t);
        }
        std::fs::create_dir_all(fixture().parent().unwrap()).unwrap();
        c.save(fixture()).unwrap();
    }
    let c = Container::load(fixture()).expect("golden fixture missing; see module docs");
    for (n, t) in outs {
        let want: Tensor<f64> = c.get(n).unwrap();
        assert_eq!(want.shape(), t.shape(), "{n}");
        let d = want.max_abs_diff(&t);
        assert!(d <= 1e-10, "{n}: max abs diff {d:e}");
    }
}
