//! Acceptance gate. Every criterion prints one PASS/FAIL line and then
//! asserts.
//!
//! Criteria 8 and 9 need the pretrained ViT-B/16+ weights and the MVTec
//! data; they are `#[ignore]`d and read their inputs from
//! `FSAD_CHECKPOINT`, `FSAD_VOCAB` and `FSAD_MVTEC_ROOT`.

use std::collections::BTreeMap;
use std::io::Write;

use fsad_core::backbone::{ArchSpec, DualEncoderOutput, FeatureGrid, HashTokenizer};
use fsad_core::eval::{aupr, auroc, pro};
use fsad_core::memory::build_memory;
use fsad_core::prompts::{BankLayout, BankShape, PromptBank, PromptKind};
use fsad_core::scoring::fuse;
use fsad_core::training::{
    align_grad, align_loss, clip_contrastive_grad, clip_contrastive_loss, eam_grad, eam_loss, freeze_bank,
    train, IdentityTextEncoder, Level, TrainConfig,
};
use fsad_core::ClipModelF64;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(id: u32, name: &str, ok: bool, detail: impl std::fmt::Display) {
    let mark = if ok { "PASS" } else { "FAIL" };
    let line = format!("acceptance {id} [{mark}] {name}: {detail}");
    // the harness captures print!; the raw descriptor is not captured
    match std::fs::OpenOptions::new().append(true).open("/dev/stdout") {
        Ok(mut f) => {
            let _ = writeln!(f, "{line}");
        }
        Err(_) => println!("{line}"),
    }
    assert!(ok, "criterion {id} failed: {detail}");
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal));
    let n = v.dot(&v).sqrt();
    v / n
}

/// Norm-wise relative error with a floor for vanishing gradients.
fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = a - b;
    let scale = a.dot(a).sqrt().max(b.dot(b).sqrt()).max(1e-8);
    diff.dot(&diff).sqrt() / scale
}

fn central_diff(x: &Array1<f64>, h: f64, f: impl Fn(&Array1<f64>) -> f64) -> Array1<f64> {
    Array1::from_shape_fn(x.len(), |i| {
        let mut p = x.clone();
        let mut m = x.clone();
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

#[test]
fn criterion_1_loss_gradients_match_finite_differences() {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 3];
    let mut active_eam = 0;
    for _ in 0..100 {
        let dim = rng.gen_range(2..24);
        let tau = rng.gen_range(0.05..1.5);
        let z = unit(&mut rng, dim);
        let w_n = unit(&mut rng, dim);
        let k = rng.gen_range(1..6);
        let anomaly: Vec<Array1<f64>> = (0..k).map(|_| unit(&mut rng, dim)).collect();
        let g = clip_contrastive_grad(z.view(), w_n.view(), &anomaly, tau).unwrap();
        let fd_z = central_diff(&z, H, |v| clip_contrastive_loss(v.view(), w_n.view(), &anomaly, tau).unwrap());
        let fd_n = central_diff(&w_n, H, |v| clip_contrastive_loss(z.view(), v.view(), &anomaly, tau).unwrap());
        let mut e = rel_err(&g.d_z, &fd_z).max(rel_err(&g.d_w_n, &fd_n));
        for j in 0..k {
            let fd = central_diff(&anomaly[j], H, |v| {
                let mut a = anomaly.clone();
                a[j] = v.clone();
                clip_contrastive_loss(z.view(), w_n.view(), &a, tau).unwrap()
            });
            e = e.max(rel_err(&g.d_anomaly[j], &fd));
        }
        worst[0] = worst[0].max(e);
    }
    for _ in 0..100 {
        let dim = rng.gen_range(2..24);
        // keep clear of the hinge kink, where only a subgradient exists
        let (z, w_n, w_a) = loop {
            let z = unit(&mut rng, dim);
            let w_n = unit(&mut rng, dim);
            let w_a = unit(&mut rng, dim);
            let d_n = (&z - &w_n).dot(&(&z - &w_n)).sqrt();
            let d_a = (&z - &w_a).dot(&(&z - &w_a)).sqrt();
            if (d_n - d_a).abs() > 1e-3 {
                break (z, w_n, w_a);
            }
        };
        let g = eam_grad(z.view(), w_n.view(), w_a.view());
        if g.loss > 0.0 {
            active_eam += 1;
        }
        let e = [
            rel_err(&g.d_z, &central_diff(&z, H, |v| eam_loss(v.view(), w_n.view(), w_a.view()))),
            rel_err(&g.d_w_n, &central_diff(&w_n, H, |v| eam_loss(z.view(), v.view(), w_a.view()))),
            rel_err(&g.d_w_a, &central_diff(&w_a, H, |v| eam_loss(z.view(), w_n.view(), v.view()))),
        ];
        worst[1] = worst[1].max(e.into_iter().fold(0.0, f64::max));
    }
    for _ in 0..100 {
        let dim = rng.gen_range(2..24);
        let lambda = rng.gen_range(1e-4..2.0);
        let w_m = unit(&mut rng, dim);
        let w_l = unit(&mut rng, dim);
        let g = align_grad(w_m.view(), w_l.view(), lambda);
        let e = rel_err(&g.d_w_m, &central_diff(&w_m, H, |v| align_loss(v.view(), w_l.view(), lambda)))
            .max(rel_err(&g.d_w_l, &central_diff(&w_l, H, |v| align_loss(w_m.view(), v.view(), lambda))));
        worst[2] = worst[2].max(e);
    }
    let ok = worst.iter().all(|&w| w <= TOL) && active_eam > 10;
    report(
        1,
        "loss gradients vs central differences",
        ok,
        format!(
            "max rel err clip {:.2e}, eam {:.2e} ({active_eam}/100 active), align {:.2e}; tol {TOL:.0e}",
            worst[0], worst[1], worst[2]
        ),
    );
}

#[test]
fn criterion_2_fusion_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut props = true;
    for _ in 0..1000 {
        let a: f64 = rng.gen_range(0.0..1.0);
        let b: f64 = rng.gen_range(0.0..1.0);
        let f = fuse(a, b);
        worst = worst.max((f - a * b / (a + b)).abs());
        props &= f <= a.min(b) + 1e-12;
        props &= (fuse(a, a) - a / 2.0).abs() <= 1e-9;
        props &= fuse(a, 0.0) == 0.0 && fuse(0.0, b) == 0.0;
        props &= fuse(a, b) == fuse(b, a);
    }
    report(
        2,
        "fuse equals ab/(a+b)",
        worst <= 1e-9 && props,
        format!("max abs err {worst:.2e} over 1000 pairs; a/2, min bound, zero limit, symmetry {}", if props { "hold" } else { "violated" }),
    );
}

fn random_output(rng: &mut ChaCha8Rng, h: usize, w: usize, dims: &[(usize, usize)]) -> DualEncoderOutput<f64> {
    let grid = |rng: &mut ChaCha8Rng, d: usize| {
        FeatureGrid::new(h, w, Array2::from_shape_simple_fn((h * w, d), || rng.sample(StandardNormal))).unwrap()
    };
    let taps: BTreeMap<usize, FeatureGrid<f64>> = dims.iter().map(|&(l, d)| (l, grid(rng, d))).collect();
    DualEncoderOutput {
        cls_feature: unit(rng, 4),
        patch_map: grid(rng, 4),
        layer_taps: taps,
    }
}

/// Cell-by-memory double loop in plain scalars.
fn brute_vision_map(query: &DualEncoderOutput<f64>, shots: &[DualEncoderOutput<f64>]) -> Array2<f64> {
    let (h, w) = (query.patch_map.height, query.patch_map.width);
    let layers: Vec<usize> = query.layer_taps.keys().copied().collect();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut total = 0.0;
            for l in &layers {
                let q = query.layer_taps[l].cell(r, c);
                let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut best = f64::INFINITY;
                for s in shots {
                    let g = &s.layer_taps[l];
                    for i in 0..g.len() {
                        let m = g.cells.row(i);
                        let mn = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let cos = q.iter().zip(m.iter()).map(|(a, b)| a * b).sum::<f64>() / (qn * mn);
                        best = best.min(0.5 * (1.0 - cos));
                    }
                }
                total += best;
            }
            out[[r, c]] = total / layers.len() as f64;
        }
    }
    out
}

#[test]
fn criterion_3_memory_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..100 {
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=8);
        let (mh, mw) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let shots_n = rng.gen_range(1..=4);
        let dims = [(3, rng.gen_range(2..12)), (8, rng.gen_range(2..12))];
        let shots: Vec<_> = (0..shots_n).map(|_| random_output(&mut rng, mh, mw, &dims)).collect();
        let query = random_output(&mut rng, h, w, &dims);
        let mem = build_memory(&shots).unwrap();
        let fast = mem.vision_score_map(&query).unwrap();
        let slow = brute_vision_map(&query, &shots);
        worst = worst.max((&fast - &slow).iter().fold(0.0, |m, v| m.max(v.abs())));
        let own = mem.vision_score_map(&shots[0]).unwrap();
        worst_self = worst_self.max(own.iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    report(
        3,
        "vision score map vs brute-force loop",
        worst <= 1e-6 && worst_self <= 1e-6,
        format!("max abs err {worst:.2e} on 100 instances; max training self-score {worst_self:.2e}"),
    );
}

fn brute_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

fn distinct_desc(s: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut t: Vec<f64> = s.collect();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn brute_aupr(s: &[f64], y: &[bool]) -> f64 {
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(s.iter().copied()) {
        let tp = s.iter().zip(y).filter(|(&v, &l)| v >= t && l).count() as f64;
        let pp = s.iter().filter(|&&v| v >= t).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev) * (tp / pp);
        prev = recall;
    }
    ap
}

/// Union-find component labelling with 8-neighbourhood.
fn components(mask: &Array2<u8>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut Vec<usize>, i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < h as i64 && nc >= 0 && nc < w as i64 && mask[[nr as usize, nc as usize]] != 0 {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, nr as usize * w + nc as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] != 0 {
                let root = find(&mut parent, r * w + c);
                groups.entry(root).or_default().push((r, c));
            }
        }
    }
    groups.into_values().collect()
}

fn brute_pro(maps: &[Array2<f64>], masks: &[Array2<u8>], cap: f64) -> f64 {
    let regions: Vec<(usize, Vec<(usize, usize)>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| components(m).into_iter().map(move |c| (i, c)))
        .collect();
    let negatives: f64 = masks.iter().map(|m| m.iter().filter(|&&v| v == 0).count() as f64).sum();
    let mut pts = vec![(0.0, 0.0)];
    for t in distinct_desc(maps.iter().flat_map(|m| m.iter().copied())) {
        let fp: f64 = maps
            .iter()
            .zip(masks)
            .map(|(m, k)| m.iter().zip(k.iter()).filter(|(&s, &l)| s >= t && l == 0).count() as f64)
            .sum();
        let overlap: f64 = regions
            .iter()
            .map(|(i, px)| px.iter().filter(|&&(r, c)| maps[*i][[r, c]] >= t).count() as f64 / px.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        pts.push((fp / negatives, overlap));
    }
    let mut area = 0.0;
    for k in 1..pts.len() {
        let (x0, y0) = pts[k - 1];
        let (x1, y1) = pts[k];
        let lo = x0.min(cap);
        let hi = x1.min(cap);
        if hi <= lo {
            continue;
        }
        let at = |x: f64| if x1 == x0 { y1 } else { y0 + (y1 - y0) * (x - x0) / (x1 - x0) };
        area += (hi - lo) * (at(lo) + at(hi)) / 2.0;
    }
    area / cap
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if rng.gen_bool(0.5) {
        (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect()
    } else {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = [0.0f64; 3];
    let mut invariant = true;
    let bend = |v: f64| (3.0 * v).exp() + v.powi(3);
    for _ in 0..200 {
        let n = rng.gen_range(2..=64);
        let s = random_scores(&mut rng, n);
        let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        y[0] = true;
        y[1] = false;
        worst[0] = worst[0].max((auroc(&s, &y).unwrap() - brute_auroc(&s, &y)).abs());
        worst[1] = worst[1].max((aupr(&s, &y).unwrap() - brute_aupr(&s, &y)).abs());
        let bent: Vec<f64> = s.iter().map(|&v| bend(v)).collect();
        invariant &= auroc(&bent, &y).unwrap() == auroc(&s, &y).unwrap();

        let count = rng.gen_range(1..=3);
        let (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..count {
            let m = Array2::from_shape_vec((h, w), random_scores(&mut rng, h * w)).unwrap();
            let k = Array2::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(0.3)));
            maps.push(m);
            masks.push(k);
        }
        masks[0][[0, 0]] = 1;
        masks[0][[h - 1, w - 1]] = 0;
        let cap = if rng.gen_bool(0.5) { 0.3 } else { rng.gen_range(0.05..1.0) };
        worst[2] = worst[2].max((pro(&maps, &masks, cap).unwrap() - brute_pro(&maps, &masks, cap)).abs());
        let bent_maps: Vec<Array2<f64>> = maps.iter().map(|m| m.mapv(bend)).collect();
        invariant &= (pro(&bent_maps, &masks, cap).unwrap() - pro(&maps, &masks, cap).unwrap()).abs() <= 1e-12;
    }
    let ok = worst.iter().all(|&w| w <= 1e-9) && invariant;
    report(
        4,
        "auroc/aupr/pro vs exhaustive thresholds",
        ok,
        format!(
            "max abs err auroc {:.1e}, aupr {:.1e}, pro {:.1e} on 200 instances; monotone invariance {}",
            worst[0],
            worst[1],
            worst[2],
            if invariant { "holds" } else { "broken" }
        ),
    );
}

#[test]
fn criterion_5_surgery_preserves_original_branch() {
    let mut arch = ArchSpec::tiny();
    arch.image_size = 48;
    let model = ClipModelF64::random(&arch, 505).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut identical = 0;
    for _ in 0..10 {
        let img: Array3<f64> = Array3::from_shape_simple_fn((3, 48, 48), || rng.sample(StandardNormal));
        let plain = model.vision.encode_cls(img.view()).unwrap();
        let dual = model.vision.encode_dual(img.view(), &[3, 8]).unwrap();
        if plain.iter().zip(dual.cls_feature.iter()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            identical += 1;
        }
    }
    report(
        5,
        "original-branch CLS bit-identical under surgery",
        identical == 10,
        format!("{identical}/10 random inputs bit-identical"),
    );
}

#[test]
fn criterion_6_prompt_bank_combinatorics() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let enc = IdentityTextEncoder::<f64>::random(512, 6, 77, 1.0, 1);
    let tok = HashTokenizer::new(512).unwrap();
    let mut failures = Vec::new();
    for case in 0..50 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(0..=5);
        let l = rng.gen_range(if m == 0 { 1 } else { 0 }..=5);
        let e_n = rng.gen_range(1..=6);
        let e_a = rng.gen_range(1..=3);
        let suffixes: Vec<String> = (0..m).map(|i| format!("with flaw{i} kind{}", i % 2)).collect();
        let shape = BankShape { n, l, e_n, e_a };
        let bank = PromptBank::new("gadget", &suffixes, BankLayout::SemanticConcatenation, shape, case, &tok, &enc).unwrap();
        let prompts = bank.assemble_embeddings();
        let count = |k: PromptKind| prompts.iter().filter(|p| p.id.kind == k).count();
        let counts_ok = count(PromptKind::Normal) == n
            && count(PromptKind::Manual) == n * m
            && count(PromptKind::Learnable) == n * l
            && bank.params().len() == n + l;
        // every prompt with prefix p carries exactly parameter block p at rows 1..=e_n
        let sharing_ok = prompts.iter().all(|p| {
            let rows = p.sequence.slice(ndarray::s![1..1 + e_n, ..]);
            rows == bank.params()[p.id.prefix]
        });
        // perturbing one block changes exactly the prompts that read it
        let target = rng.gen_range(0..n + l);
        let mut moved = bank.clone();
        moved.params_mut()[target].mapv_inplace(|v| v + 1.0);
        let after = moved.assemble_embeddings();
        let coupling_ok = prompts.iter().zip(&after).all(|(a, b)| {
            let reads = a.slots.iter().any(|s| s.param == target);
            let expected = if target < n {
                a.id.prefix == target
            } else {
                a.id.kind == PromptKind::Learnable && a.id.suffix == Some(target - n)
            };
            reads == expected && (a.sequence != b.sequence) == expected
        });
        let manual_frozen = bank
            .manual_suffixes()
            .iter()
            .zip(moved.manual_suffixes())
            .all(|(x, y)| x.embeddings == y.embeddings);
        if !(counts_ok && sharing_ok && coupling_ok && manual_frozen) {
            failures.push(format!("case {case} (N={n},M={m},L={l},E_N={e_n},E_A={e_a})"));
        }
    }
    report(
        6,
        "prompt counts and prefix/suffix sharing",
        failures.is_empty(),
        if failures.is_empty() {
            "50/50 random configurations".to_string()
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn criterion_7_closed_system_training() {
    let tok = HashTokenizer::new(256).unwrap();
    let suffixes = vec!["with crack".to_string(), "with stain".to_string()];
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let tau = 0.07;
    let mut passed = 0;
    let mut started_active = 0;
    let mut details = Vec::new();
    for seed in 0..10u64 {
        let enc = IdentityTextEncoder::<f64>::random(256, 16, 77, 0.2, seed);
        let bank = PromptBank::new("part", &suffixes, BankLayout::SemanticConcatenation, BankShape::default(), seed, &tok, &enc)
            .unwrap();
        let init = freeze_bank(bank.clone(), &enc, Level::Image, vec![]).unwrap().prototypes;
        let z = unit(&mut ChaCha8Rng::seed_from_u64(1000 + seed), 16);
        let eam_before = eam_loss(z.view(), init.w_n.view(), init.w_a.view());
        let trained = train(bank, &enc, &[z.view()], tau, Level::Image, &cfg).unwrap();
        let fin = &trained.prototypes;
        let sim_before = z.dot(&init.w_n);
        let sim_after = z.dot(&fin.w_n);
        let eam_after = eam_loss(z.view(), fin.w_n.view(), fin.w_a.view());
        if eam_before > 0.0 {
            started_active += 1;
        }
        if sim_after > sim_before && eam_after == 0.0 {
            passed += 1;
        } else {
            details.push(format!("seed {seed}: <z,w_n> {sim_before:.3}->{sim_after:.3}, eam {eam_before:.3}->{eam_after:.3}"));
        }
    }
    report(
        7,
        "identity-encoder training sanity",
        passed == 10 && started_active > 0,
        format!(
            "{passed}/10 runs raise <z,w_n> and end with zero margin loss ({started_active} started with a positive margin loss){}",
            if details.is_empty() { String::new() } else { format!("; {}", details.join("; ")) }
        ),
    );
}

mod reproduction {
    use super::report;
    use fsad_core::config::RunConfig;
    use fsad_core::pipeline::{ablation_matrix, run_ablation, Pipeline};
    use std::path::PathBuf;

    const CATEGORIES: [&str; 3] = ["bottle", "carpet", "leather"];
    // mean image / pixel AUROC in percent
    const IMAGE_REF: [f64; 3] = [99.8, 100.0, 100.0];
    const PIXEL_REF: [f64; 3] = [99.6, 95.9, 93.3];

    fn env_path(key: &str) -> PathBuf {
        PathBuf::from(std::env::var(key).unwrap_or_else(|_| panic!("set {key}")))
    }

    fn base_config(tag: &str) -> RunConfig {
        let mut c = RunConfig::default();
        c.dataset.root = env_path("FSAD_MVTEC_ROOT");
        c.dataset.categories = CATEGORIES.iter().map(|s| s.to_string()).collect();
        c.backbone.checkpoint = Some(env_path("FSAD_CHECKPOINT"));
        c.backbone.vocab = Some(env_path("FSAD_VOCAB"));
        c.run.k = 1;
        c.run.seeds = (0..5).collect();
        c.run.output = std::env::temp_dir().join(format!("fsad-acceptance-{tag}"));
        c
    }

    #[test]
    #[ignore = "needs the pretrained checkpoint and MVTec (FSAD_CHECKPOINT, FSAD_VOCAB, FSAD_MVTEC_ROOT)"]
    fn criterion_8_one_shot_subset_matches_reference() {
        let p = Pipeline::<f32>::new(base_config("repro")).unwrap();
        p.train_all().unwrap();
        let rep = p.evaluate_all().unwrap();
        let mut lines = Vec::new();
        let mut ok = true;
        for (i, cat) in CATEGORIES.iter().enumerate() {
            let s = rep.categories.iter().find(|s| s.name == *cat).unwrap();
            let img = 100.0 * s.image_auroc.unwrap().mean;
            let pix = 100.0 * s.pixel_auroc.unwrap().mean;
            ok &= (img - IMAGE_REF[i]).abs() <= 3.0 && (pix - PIXEL_REF[i]).abs() <= 3.0;
            lines.push(format!("{cat} image {img:.1} (ref {}) pixel {pix:.1} (ref {})", IMAGE_REF[i], PIXEL_REF[i]));
        }
        report(8, "1-shot bottle/carpet/leather within ±3 points", ok, lines.join("; "));
    }

    #[test]
    #[ignore = "needs the pretrained checkpoint and MVTec (FSAD_CHECKPOINT, FSAD_VOCAB, FSAD_MVTEC_ROOT)"]
    fn criterion_9_ablation_direction() {
        let p = Pipeline::<f32>::new(base_config("ablation")).unwrap();
        let rows: Vec<_> = ablation_matrix()
            .into_iter()
            .filter(|(n, _)| ["baseline", "sc", "vad", "full"].contains(n))
            .collect();
        let res = run_ablation(&p, &rows).unwrap();
        let img = |name: &str| {
            100.0 * res.iter().find(|r| r.name == name).unwrap().report.dataset.image_auroc.unwrap().mean
        };
        let (base, sc, vad, full) = (img("baseline"), img("sc"), img("vad"), img("full"));
        report(
            9,
            "SC beats two-class baseline by ≥3; full beats VAD-only",
            sc - base >= 3.0 && full > vad,
            format!("baseline {base:.1}, sc {sc:.1}, vad {vad:.1}, full {full:.1}"),
        );
    }
}
