use fsad_core::backbone::{ArchSpec, HashTokenizer};
use fsad_core::prompts::{BankLayout, BankShape, PromptBank};
use fsad_core::training::{loss_and_grad, IdentityTextEncoder};
use fsad_core::ClipModelF64;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal));
    let n = v.dot(&v).sqrt();
    v / n
}

/// Max norm-wise relative error between analytic and central-difference
/// gradients over every learnable block.
fn check_bank<E: fsad_core::backbone::TextEncoder<f64>>(bank: &PromptBank<f64>, enc: &E, feats: &[Array1<f64>], eam: bool) -> f64 {
    let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
    let (tau, lambda) = (0.2, 0.05);
    let (_, grads) = loss_and_grad(bank, enc, &views, tau, lambda, eam).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (b, g) in grads.iter().enumerate() {
        let mut fd = g.clone();
        for idx in 0..g.len() {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let eval = |delta: f64| {
                let mut p = bank.clone();
                p.params_mut()[b][[r, c]] += delta;
                loss_and_grad(&p, enc, &views, tau, lambda, eam).unwrap().0.loss
            };
            fd[[r, c]] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff = (&fd - g).mapv(|v| v * v).sum().sqrt();
        let scale = fd.mapv(|v| v * v).sum().sqrt().max(g.mapv(|v| v * v).sum().sqrt()).max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

#[test]
fn identity_encoder_bank_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc = IdentityTextEncoder::<f64>::random(128, 6, 40, 0.5, 3);
    let tok = HashTokenizer::new(128).unwrap();
    let bank = PromptBank::new("bolt", &["with crack".into(), "with dent".into()], BankLayout::SemanticConcatenation,
        BankShape { n: 2, l: 2, e_n: 3, e_a: 1 }, 4, &tok, &enc).unwrap();
    let feats: Vec<_> = (0..3).map(|_| unit(&mut rng, 6)).collect();
    let e = check_bank(&bank, &enc, &feats, false);
    assert!(e < 1e-5, "rel err {e}");
}

#[test]
fn transformer_bank_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = ClipModelF64::random(&ArchSpec::tiny(), 11).unwrap();
    let tok = HashTokenizer::new(256).unwrap();
    let bank = PromptBank::new("bolt", &["with crack".into()], BankLayout::SemanticConcatenation,
        BankShape { n: 1, l: 2, e_n: 2, e_a: 1 }, 4, &tok, &model.text).unwrap();
    let feats: Vec<_> = (0..2).map(|_| unit(&mut rng, 12)).collect();
    let e = check_bank(&bank, &model.text, &feats, true);
    assert!(e < 1e-4, "rel err {e}");
}
