use maskclip::data::TokenMaskSet;
use maskclip::encoder::EncoderDims;
use maskclip::infer::PreparedSample;
use maskclip::linalg::Matrix;
use maskclip::psm::PsmKind;
use maskclip::train::{grad_check, trainable_set, Model, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(kind: PsmKind) -> TrainConfig {
    TrainConfig {
        encoder: EncoderDims {
            layers: 3,
            extractor_layers: 1,
            width: 16,
            embed_dim: 8,
            heads: 2,
            grid: 4,
            patch: 2,
        },
        psm: kind,
        psm_dim: 32,
        ..TrainConfig::default()
    }
}

fn random_sample(dims: EncoderDims, rng: &mut ChaCha8Rng, k: usize) -> PreparedSample {
    let n = dims.num_tokens();
    let patches = Matrix::from_vec(
        n,
        dims.patch_dim(),
        (0..n * dims.patch_dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    );
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let mut r: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.4) {
                        rng.gen_range(0.2..1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            r[rng.gen_range(0..n)] = 1.0;
            r
        })
        .collect();
    PreparedSample {
        id: "x".into(),
        patches,
        masks: TokenMaskSet::from_rows(&rows).unwrap(),
        labels: (0..3).map(|_| rng.gen_range(0..k)).collect(),
    }
}

/// Perturb every tensor so that the check does not run at a special point
/// (identity head, near-uniform attention).
fn perturbed(kind: PsmKind, seed: u64) -> Model {
    let mut m = Model::init(&config(kind), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in m.params_mut() {
        let s = if p.name.contains("log_") { 0.3 } else { 0.2 };
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-s..s);
        }
    }
    m.encoder.log_alpha = rng.gen_range(-1.0..1.0);
    m
}

#[test]
fn full_pipeline_matches_finite_differences() {
    for kind in PsmKind::ALL {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let model = perturbed(kind, seed);
            let k = 5;
            let text =
                Matrix::from_vec(k, 8, (0..k * 8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let text = maskclip::linalg::l2_normalize_rows(&text).0;
            let samples: Vec<_> = (0..2)
                .map(|_| random_sample(model.encoder.dims, &mut rng, k))
                .collect();
            let batch: Vec<&PreparedSample> = samples.iter().collect();
            let names = trainable_set(&model.encoder, &model.psm);
            let report = grad_check(&model, &batch, &text, &names, 1e-5, 20, seed).unwrap();
            for (n, e) in &report.tensors {
                assert!(*e <= 1e-4, "{kind} seed {seed}: {n} rel err {e:e}");
            }
            assert!(
                report.leaking_frozen.is_empty(),
                "{:?}",
                report.leaking_frozen
            );
            eprintln!("{kind} seed {seed}: max rel err {:e}", report.max_rel_err);
        }
    }
}
