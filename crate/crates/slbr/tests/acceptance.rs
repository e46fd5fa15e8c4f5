//! Acceptance gate: one test per shipping criterion, each printing a
//! `criterion N PASS` line (visible under `--nocapture`) after its
//! assertions hold. Tolerances are pinned as consts next to the tests
//! that use them. Tests serialize on a shared gate so the per-criterion
//! runtime budgets measure their own work, not scheduler contention.

use std::sync::{LazyLock, Mutex};
use std::time::Instant;

use autograd::gradcheck::audit_params;
use autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slbr::blocks::{
    masked_average_pool, CffModule, ConvLayer, Ctx, DecoderBlock, EncoderBlock, MbeBlock,
    Scope, SmrBlock,
};
use slbr::evaluation::{
    evaluate_network, mask_f1_iou, psnr, rmse, rmse_w, ssim, MASK_THRESHOLD_EVAL, PSNR_CAP_DB,
};
use slbr::image_data::{Image, Mask};
use slbr::network::{image_to_batch, Checkpoint, SlbrNetwork};
use slbr::objectives::{
    l1_loss, mask_bce, mask_target_pyramid, total_loss, total_loss_t, LossInputs, LossWeights,
    PerceptualExtractor, Reduction,
};
use slbr::synth::{
    generate_dataset, make_sample, procedural_asset, procedural_background, read_dataset,
    stream_rng, write_dataset, BlendSpec, Sample,
};
use slbr::train::{resume, train, AblationToggles, TrainConfig};

/// Serializes the criteria so each one's runtime budget is its own.
static GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn pass(n: u32, what: &str) {
    eprintln!("criterion {n} PASS — {what}");
}

fn fixture_extractor() -> PerceptualExtractor {
    PerceptualExtractor::seeded(2)
}

/// Rebuilds a network and parameter store from a checkpoint.
fn instantiate(ckpt: &Checkpoint) -> (SlbrNetwork, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut scope = Scope { store: &mut store, rng: &mut rng };
    let net = SlbrNetwork::new(&mut scope, &ckpt.network);
    ckpt.apply_to(&mut store).expect("checkpoint matches its architecture");
    (net, store)
}

// ---------------------------------------------------------------------
// criterion 1: compositing inversion
// ---------------------------------------------------------------------

const C1_SAMPLES: usize = 100;
const C1_SEED: u64 = 414;
const C1_SIZE: usize = 64;
const C1_ALPHA: (f64, f64) = (0.3, 0.7);
const C1_PRE_QUANT_TOL: f64 = 1e-6;
/// Bound on the per-sample MEAN reconstruction error inside the mask
/// after an 8-bit round trip. A pointwise bound is unattainable: each
/// stored channel carries up to 0.5/255 rounding and the inversion
/// divides by (1 - alpha), so single-pixel errors legitimately reach
/// (0.5/255)(1 + alpha + |I - W|)/(1 - alpha), several levels at the
/// top of the opacity range. The mean stays well under one level.
const C1_POST_QUANT_TOL: f64 = 1.0 / 255.0;
const C1_BUDGET_SECS: f64 = 30.0;

#[test]
fn criterion_1_blend_inversion_round_trip() {
    let _g = gate();
    let t0 = Instant::now();
    let samples = generate_dataset(C1_SAMPLES, C1_SIZE, C1_ALPHA, C1_SEED);

    // Exact inversion before storage: (J - alpha*W)/(1 - alpha) == I
    // wherever the mask is on.
    let mut pre_max: f64 = 0.0;
    for s in &samples {
        let area = s.mask.coverage();
        assert!(area > 0.0 && area < 1.0, "mask area fraction {area} not in (0, 1)");
        for c in 0..3 {
            for i in 0..C1_SIZE {
                for j in 0..C1_SIZE {
                    if s.mask.data()[[i, j]] == 1.0 {
                        let a = s.alpha.data()[[i, j]];
                        let rec = (s.watermarked.data()[[c, i, j]]
                            - a * s.watermark_layer.data()[[c, i, j]])
                            / (1.0 - a);
                        pre_max = pre_max.max((rec - s.background.data()[[c, i, j]]).abs());
                    }
                }
            }
        }
    }
    assert!(pre_max <= C1_PRE_QUANT_TOL, "pre-quantization inversion error {pre_max:.3e}");

    // Same inversion after writing and re-reading the 8-bit dataset.
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&samples, dir.path(), C1_SEED).unwrap();
    let (stored, _) = read_dataset(dir.path()).unwrap();
    let mut worst_mean: f64 = 0.0;
    for s in &stored {
        let mut acc = 0.0;
        let mut n = 0u64;
        for c in 0..3 {
            for i in 0..C1_SIZE {
                for j in 0..C1_SIZE {
                    if s.mask.data()[[i, j]] == 1.0 {
                        let a = s.alpha.data()[[i, j]];
                        // The clean image lives in [0, 1]; the estimate
                        // is clamped there before comparison.
                        let rec = ((s.watermarked.data()[[c, i, j]]
                            - a * s.watermark_layer.data()[[c, i, j]])
                            / (1.0 - a))
                            .clamp(0.0, 1.0);
                        acc += (rec - s.background.data()[[c, i, j]]).abs();
                        n += 1;
                    }
                }
            }
        }
        assert!(n > 0, "stored sample lost its mask");
        worst_mean = worst_mean.max(acc / n as f64);
    }
    assert!(
        worst_mean <= C1_POST_QUANT_TOL,
        "post-quantization mean inversion error {:.4}/255 exceeds 1/255",
        worst_mean * 255.0
    );

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < C1_BUDGET_SECS, "took {secs:.1}s, budget {C1_BUDGET_SECS}s");
    pass(1, &format!(
        "inversion over {C1_SAMPLES} samples: pre-quantization max {pre_max:.2e}, \
         stored worst per-sample mean {:.3}/255, {secs:.1}s",
        worst_mean * 255.0
    ));
}

// ---------------------------------------------------------------------
// criterion 2: objective oracles
// ---------------------------------------------------------------------

const C2_TOL: f64 = 1e-6;

#[test]
fn criterion_2_objective_value_oracles() {
    let _g = gate();

    // Cross-entropy at p = 0.5 is ln 2 per element regardless of the
    // target; summed over two elements: 2 ln 2.
    let half = Mask::from_fn(1, 2, |_, _| 0.5);
    let target = Mask::from_fn(1, 2, |_, j| j as f64);
    let bce_sum = mask_bce(&half, &target, Reduction::Sum);
    assert!((bce_sum - 2.0 * 2.0_f64.ln()).abs() <= C2_TOL, "got {bce_sum}");

    // A confident correct prediction: p = 0.9 against target 1.
    let p9 = Mask::from_fn(1, 1, |_, _| 0.9);
    let one = Mask::from_fn(1, 1, |_, _| 1.0);
    let bce_single = mask_bce(&p9, &one, Reduction::Mean);
    assert!((bce_single - -(0.9_f64.ln())).abs() <= C2_TOL, "got {bce_single}");

    // Mean reduction is exactly sum / n, same accumulation order.
    let soft = Mask::from_fn(8, 8, |i, j| ((i * 13 + j * 7) % 10) as f64 / 10.0 * 0.8 + 0.1);
    let bin = Mask::from_fn(8, 8, |i, j| ((i + j) % 2) as f64);
    let sum = mask_bce(&soft, &bin, Reduction::Sum);
    let mean = mask_bce(&soft, &bin, Reduction::Mean);
    assert_eq!(mean, sum / 64.0, "mean must be sum/n bitwise");

    // Constant-offset images give their offset as the l1 value.
    let a = Image::from_fn(8, 8, |_, _, _| 0.5);
    let b = Image::from_fn(8, 8, |_, _, _| 0.2);
    let l1 = l1_loss(&a, &b);
    assert!((l1 - 0.3).abs() <= C2_TOL, "got {l1}");

    // The combined objective equals the weighted sum of its reported
    // parts on real network outputs.
    let weights = LossWeights { lambda_vgg: 0.25, lambda_mask: 3.0 };
    let sample = &generate_dataset(1, 32, (0.4, 0.8), 77)[0];
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut scope = Scope { store: &mut store, rng: &mut rng };
    let net = SlbrNetwork::new(&mut scope, &slbr::network::NetworkConfig::toy());
    let (coarse, refined) = net.slbr_forward(&store, &sample.watermarked);
    let extractor = fixture_extractor();
    let (total, parts) = total_loss(&coarse, &refined, sample, &extractor, &weights);
    let recombined = parts.l1_coarse
        + parts.l1_refined
        + weights.lambda_vgg * parts.vgg
        + weights.lambda_mask * (parts.mask + parts.mask_refined);
    assert!(
        (total - recombined).abs() <= C2_TOL,
        "total {total} vs recombined {recombined}"
    );
    assert_eq!(total, parts.total, "breakdown total mirrors the returned value");

    pass(2, &format!(
        "cross-entropy 2ln2/−ln0.9, l1 offset, mean=sum/n bitwise, \
         accounting gap {:.1e}", (total - recombined).abs()
    ));
}

// ---------------------------------------------------------------------
// criterion 3: gradient audit of the combined objective
// ---------------------------------------------------------------------

const C3_MAX_PARAMS: usize = 500;
/// Central differences need a small step here: the loss curvature
/// through stacked normalizations over 16-element windows is large
/// enough that h = 1e-5 leaves visible truncation error, while f64
/// roundoff at h = 1e-6 stays orders of magnitude below the gradients.
const C3_FD_STEP: f64 = 1e-6;
const C3_REL_TOL: f64 = 1e-3;
/// Differences below this count as matching: keeps genuinely zero
/// gradients from failing on finite-difference noise.
const C3_ABS_FLOOR: f64 = 1e-8;
const C3_PASS_FRACTION: f64 = 0.99;
const C3_BUDGET_SECS: f64 = 120.0;

/// Deliberately tiny two-scale assembly of the real building blocks:
/// encoder pair, calibrated mask block, background block, then a
/// two-level re-encode fused across scales — every op family the full
/// model trains through, few enough weights to finite-difference.
struct MicroNet {
    enc0: EncoderBlock,
    enc1: EncoderBlock,
    smr: SmrBlock,
    mbe: MbeBlock,
    head_c: ConvLayer,
    renc0: EncoderBlock,
    renc1: EncoderBlock,
    cff: CffModule,
    head_r: ConvLayer,
}

impl MicroNet {
    fn new(scope: &mut Scope) -> Self {
        MicroNet {
            enc0: EncoderBlock::new(scope, "micro.enc0", 3, 1, false),
            enc1: EncoderBlock::new(scope, "micro.enc1", 1, 1, true),
            smr: SmrBlock::new(scope, "micro.smr", 1, 1, 1, 1),
            mbe: MbeBlock::new(scope, "micro.mbe", 1, 1, 1, 1),
            head_c: ConvLayer::new(scope, "micro.head_c", 1, 3, 1, 1, 0.0),
            renc0: EncoderBlock::new(scope, "micro.renc0", 4, 1, false),
            renc1: EncoderBlock::new(scope, "micro.renc1", 1, 1, true),
            cff: CffModule::new(scope, "micro.cff", &[1, 1], 1),
            head_r: ConvLayer::new(scope, "micro.head_r", 2, 3, 1, 1, 0.0),
        }
    }

    fn graph(&self, store: &ParamStore, io: &MicroIo) -> (Tape, Var) {
        let t = Tape::new();
        let ctx = Ctx { tape: &t, store };
        let x = t.input(io.j.clone());
        let e0 = self.enc0.forward(ctx, x);
        let e1 = self.enc1.forward(ctx, e0);
        let (_, pair) = self.smr.forward(ctx, e1, e0);
        let bg = self.mbe.forward(ctx, e1, e0, pair.m_hat_prime);
        let i_coarse = t.sigmoid(self.head_c.forward(ctx, bg));
        let r0 = self.renc0.forward(ctx, t.concat_chan(&[i_coarse, pair.m_hat_prime]));
        let r1 = self.renc1.forward(ctx, r0);
        let fused = self.cff.forward(ctx, &[r0, r1]);
        let up = t.bilinear(fused[1], 8, 8);
        let i_refined = t.sigmoid(self.head_r.forward(ctx, t.concat_chan(&[fused[0], up])));
        let inputs = LossInputs {
            i_coarse,
            i_refined,
            target: t.input(io.target.clone()),
            mask_pairs: vec![pair],
            mask_targets: vec![t.input(io.m_gt.clone())],
        };
        let loss = total_loss_t(&t, &inputs, &io.extractor, &io.weights);
        (t, loss.total)
    }
}

struct MicroIo {
    j: Tensor,
    target: Tensor,
    m_gt: Tensor,
    extractor: PerceptualExtractor,
    weights: LossWeights,
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let _g = gate();
    let t0 = Instant::now();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut scope = Scope { store: &mut store, rng: &mut rng };
    let net = MicroNet::new(&mut scope);
    let n_params = store.element_count();
    assert!(n_params <= C3_MAX_PARAMS, "{n_params} parameters exceed {C3_MAX_PARAMS}");

    let io = MicroIo {
        j: Tensor::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |d| {
            ((d[1] * 64 + d[2] * 8 + d[3]) as f64 * 0.13).sin() * 0.4 + 0.5
        }),
        target: Tensor::from_shape_fn(IxDyn(&[1, 3, 8, 8]), |d| {
            ((d[1] * 64 + d[2] * 8 + d[3]) as f64 * 0.29 + 1.0).cos() * 0.4 + 0.5
        }),
        m_gt: Tensor::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |d| ((d[2] + d[3]) % 2) as f64),
        extractor: fixture_extractor(),
        weights: LossWeights { lambda_vgg: 0.5, lambda_mask: 1.0 },
    };

    let (tape, total) = net.graph(&store, &io);
    tape.backward(total);
    let analytic = tape.param_grads(&store);
    drop(tape);

    let report = audit_params(&mut store, &analytic, C3_FD_STEP, C3_REL_TOL, C3_ABS_FLOOR, |s| {
        let (t, v) = net.graph(s, &io);
        t.scalar(v)
    });
    let frac = report.pass_fraction();
    assert!(
        frac >= C3_PASS_FRACTION,
        "only {}/{} gradients within tolerance; worst: {}",
        report.within, report.checked, report.worst
    );

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < C3_BUDGET_SECS, "took {secs:.1}s, budget {C3_BUDGET_SECS}s");
    pass(3, &format!(
        "{}/{} gradient elements within {C3_REL_TOL} of central differences \
         ({n_params} parameters, max rel {:.1e}, {secs:.1}s)",
        report.within, report.checked, report.max_rel
    ));
}

// ---------------------------------------------------------------------
// criterion 4: output shapes, ranges, and variant construction
// ---------------------------------------------------------------------

const C4_BUDGET_SECS: f64 = 60.0;
/// Canonical ablation grid rows exercised end to end (1-based).
const C4_ROWS: [usize; 5] = [1, 5, 9, 12, 13];

#[test]
fn criterion_4_shapes_ranges_and_variants() {
    let _g = gate();
    let t0 = Instant::now();
    let samples = generate_dataset(2, 64, (0.4, 0.8), 23);
    let toy = slbr::network::NetworkConfig::toy();

    // Batched forward pass: every output at its declared scale, every
    // sigmoid output inside [0, 1].
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut scope = Scope { store: &mut store, rng: &mut rng };
    let net = SlbrNetwork::new(&mut scope, &toy);
    let tape = Tape::new();
    let ctx = Ctx { tape: &tape, store: &store };
    let j = tape.input(image_to_batch(&[&samples[0].watermarked, &samples[1].watermarked]));
    let vars = net.forward_t(ctx, j);

    assert_eq!(tape.shape(vars.coarse.image), vec![2, 3, 64, 64]);
    assert_eq!(tape.shape(vars.refined), vec![2, 3, 64, 64]);
    assert_eq!(vars.coarse.mask_pairs.len(), 3, "mask pairs at H/4, H/2, H");
    assert_eq!(vars.coarse.bg_feats.len(), 3, "background features at H/4, H/2, H");
    // Mask pairs run coarse to fine; background features fine to coarse
    // (the refinement consumes them in encoder order).
    for (idx, side) in [(0usize, 16usize), (1, 32), (2, 64)] {
        let pair = &vars.coarse.mask_pairs[idx];
        assert_eq!(tape.shape(pair.m_hat), vec![2, 1, side, side]);
        assert_eq!(tape.shape(pair.m_hat_prime), vec![2, 1, side, side]);
        let bg = tape.shape(vars.coarse.bg_feats[2 - idx]);
        assert_eq!((bg[0], bg[2], bg[3]), (2, side, side));
        for v in [pair.m_hat, pair.m_hat_prime] {
            let vals = tape.value(v);
            assert!(vals.iter().all(|x| (0.0..=1.0).contains(x)), "mask outside [0,1]");
        }
    }
    for v in [vars.coarse.image, vars.refined] {
        let vals = tape.value(v);
        assert!(vals.iter().all(|x| (0.0..=1.0).contains(x)), "image outside [0,1]");
    }
    drop(tape);

    // Each canonical variant row constructs and completes a training
    // step's worth of graph work: forward, loss, backward.
    let grid = AblationToggles::staged_rows();
    let extractor = fixture_extractor();
    for row in C4_ROWS {
        let config = grid[row - 1].apply(&toy);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scope = Scope { store: &mut store, rng: &mut rng };
        let net = SlbrNetwork::new(&mut scope, &config);
        let tape = Tape::new();
        let ctx = Ctx { tape: &tape, store: &store };
        let j = tape.input(image_to_batch(&[&samples[0].watermarked]));
        let vars = net.forward_t(ctx, j);
        let inputs = LossInputs {
            i_coarse: vars.coarse.image,
            i_refined: vars.refined,
            target: tape.input(image_to_batch(&[&samples[0].background])),
            mask_pairs: vars.coarse.mask_pairs.clone(),
            mask_targets: mask_target_pyramid(&samples[0].mask)
                .into_iter()
                .map(|t| tape.input(t))
                .collect(),
        };
        let loss = total_loss_t(&tape, &inputs, &extractor, &LossWeights::default());
        assert!(tape.scalar(loss.total).is_finite(), "row {row} loss not finite");
        tape.backward(loss.total);
        let grads = tape.param_grads(&store);
        let live = grads.iter().flatten().count();
        assert!(live > 0, "row {row} produced no gradients");
        assert!(
            grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite())),
            "row {row} produced non-finite gradients"
        );
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < C4_BUDGET_SECS, "took {secs:.1}s, budget {C4_BUDGET_SECS}s");
    pass(4, &format!(
        "batched shapes at 16/32/64, outputs in [0,1], rows {C4_ROWS:?} \
         forward+backward finite ({secs:.1}s)"
    ));
}

// ---------------------------------------------------------------------
// criterion 5: module micro-properties
// ---------------------------------------------------------------------

const C5_POOL_TOL: f64 = 1e-12;

/// Zeroes every parameter whose name contains `needle`.
fn zero_matching(store: &mut ParamStore, needle: &str) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, name, _)| name.contains(needle))
        .map(|(id, _, _)| id)
        .collect();
    assert!(!ids.is_empty(), "no parameter matches {needle}");
    for id in ids {
        let z = Tensor::zeros(store.value(id).raw_dim());
        store.set(id, z);
    }
}

fn param_named(store: &ParamStore, needle: &str) -> ParamId {
    store
        .iter()
        .find(|(_, name, _)| name.contains(needle))
        .map(|(id, _, _)| id)
        .unwrap_or_else(|| panic!("no parameter matches {needle}"))
}

#[test]
fn criterion_5_module_micro_properties() {
    let _g = gate();

    // Masked pooling against a hand-computed oracle.
    let x = Tensor::from_shape_fn(IxDyn(&[1, 2, 2, 2]), |d| {
        (d[1] * 4 + d[2] * 2 + d[3]) as f64 * 0.1 + 0.1
    });
    let m = Tensor::from_shape_fn(IxDyn(&[1, 1, 2, 2]), |d| ((d[2] + d[3]) % 2) as f64);
    let tape = Tape::new();
    let pooled = masked_average_pool(&tape, tape.input(x.clone()), tape.input(m.clone()));
    let got = tape.value(pooled);
    assert_eq!(got.shape(), &[1, 2]);
    for c in 0..2 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                num += x[[0, c, i, j]] * m[[0, 0, i, j]];
                den += m[[0, 0, i, j]];
            }
        }
        let want = num / (den + slbr::blocks::POOL_EPS);
        assert!((got[[0, c]] - want).abs() <= C5_POOL_TOL, "channel {c}: {} vs {want}", got[[0, c]]);
    }
    // All-zero weights pool to exactly zero instead of dividing by zero.
    let zeroed = masked_average_pool(
        &tape,
        tape.input(x.clone()),
        tape.input(Tensor::zeros(IxDyn(&[1, 1, 2, 2]))),
    );
    assert!(tape.value(zeroed).iter().all(|v| *v == 0.0));
    drop(tape);

    // Background block with zeroed residue convolutions reduces to its
    // fusion decoder. A standalone decoder built from the same seed
    // draws identical initial weights, giving a bitwise oracle.
    let prev = Tensor::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |d| {
        ((d[1] * 16 + d[2] * 4 + d[3]) as f64 * 0.17).sin() * 0.4
    });
    let skip = Tensor::from_shape_fn(IxDyn(&[1, 2, 8, 8]), |d| {
        ((d[1] * 64 + d[2] * 8 + d[3]) as f64 * 0.07).cos() * 0.4
    });
    let mask8 = Tensor::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |d| ((d[2] / 4 + d[3] / 4) % 2) as f64);
    let mut store_a = ParamStore::new();
    let mut rng_a = ChaCha8Rng::seed_from_u64(31);
    let mbe = {
        let mut scope = Scope { store: &mut store_a, rng: &mut rng_a };
        MbeBlock::new(&mut scope, "bg", 2, 2, 2, 1)
    };
    zero_matching(&mut store_a, "residue");
    let mut store_b = ParamStore::new();
    let mut rng_b = ChaCha8Rng::seed_from_u64(31);
    let dec = {
        let mut scope = Scope { store: &mut store_b, rng: &mut rng_b };
        DecoderBlock::new(&mut scope, "bg.fuse", 2, 2, 2, 1)
    };
    let ta = Tape::new();
    let out_a = mbe.forward(
        Ctx { tape: &ta, store: &store_a },
        ta.input(prev.clone()),
        ta.input(skip.clone()),
        ta.input(mask8.clone()),
    );
    let tb = Tape::new();
    let out_b = dec.forward(
        Ctx { tape: &tb, store: &store_b },
        tb.input(prev.clone()),
        tb.input(skip.clone()),
    );
    assert_eq!(ta.value(out_a), tb.value(out_b), "zero residue must be an identity");
    drop((ta, tb));

    // Cross-level fusion's only inter-level edge points downward: the
    // top level's output ignores perturbations of the lower levels.
    let mut store_c = ParamStore::new();
    let mut rng_c = ChaCha8Rng::seed_from_u64(13);
    let cff = {
        let mut scope = Scope { store: &mut store_c, rng: &mut rng_c };
        CffModule::new(&mut scope, "fuse", &[2, 2, 2], 1)
    };
    let levels: Vec<Tensor> = [8usize, 4, 2]
        .iter()
        .map(|&side| {
            Tensor::from_shape_fn(IxDyn(&[1, 2, side, side]), |d| {
                ((d[1] * side * side + d[2] * side + d[3]) as f64 * 0.23).sin() * 0.3
            })
        })
        .collect();
    let tc = Tape::new();
    let ctx = Ctx { tape: &tc, store: &store_c };
    let base: Vec<Var> = levels.iter().map(|l| tc.input(l.clone())).collect();
    let out_base = cff.forward(ctx, &base);
    let perturbed: Vec<Var> = levels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if i < 2 {
                tc.input(l.mapv(|v| v + 0.25))
            } else {
                tc.input(l.clone())
            }
        })
        .collect();
    let out_pert = cff.forward(ctx, &perturbed);
    assert_eq!(
        tc.value(out_base[2]),
        tc.value(out_pert[2]),
        "top-level output must not depend on lower levels"
    );
    assert_ne!(
        tc.value(out_base[0]),
        tc.value(out_pert[0]),
        "lower-level output should see its own perturbation"
    );
    drop(tc);

    // Calibrated mask block survives a rough mask that underflows to
    // exactly zero everywhere: the pooling epsilon keeps it finite.
    let mut store_d = ParamStore::new();
    let mut rng_d = ChaCha8Rng::seed_from_u64(29);
    let smr = {
        let mut scope = Scope { store: &mut store_d, rng: &mut rng_d };
        SmrBlock::new(&mut scope, "smr", 1, 1, 1, 1)
    };
    zero_matching(&mut store_d, "rough_head");
    let bias = param_named(&store_d, "rough_head.bias");
    store_d.set(bias, Tensor::from_elem(IxDyn(&[1]), -800.0));
    let td = Tape::new();
    let (xm, pair) = smr.forward(
        Ctx { tape: &td, store: &store_d },
        td.input(Tensor::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |d| (d[2] as f64 - 1.5) * 0.2)),
        td.input(Tensor::from_shape_fn(IxDyn(&[1, 1, 8, 8]), |d| (d[3] as f64 - 3.5) * 0.1)),
    );
    assert!(
        td.value(pair.m_hat).iter().all(|v| *v == 0.0),
        "rough mask did not underflow to zero"
    );
    for v in [xm, pair.m_hat_prime] {
        assert!(td.value(v).iter().all(|x| x.is_finite()), "all-zero rough mask broke the block");
    }

    pass(5, "masked pooling oracle, zero-residue identity, top-level fusion isolation, zero-mask guard");
}

// ---------------------------------------------------------------------
// criteria 6 and 7: shared overfit fixture
// ---------------------------------------------------------------------

const C6_SAMPLES: usize = 4;
const C6_SIZE: usize = 64;
/// Near-opaque blending endpoints for the hand-built corpus below: the
/// PSNR-gain target compares against the corrupted input, so the corpus
/// must carry enough corruption that +5 dB is a restoration bar rather
/// than a noise-floor race.
const C6_ALPHA: (f64, f64) = (0.85, 0.98);
const C6_DATA_SEED: u64 = 909;
const C6_TRAIN_SEED: u64 = 17;
const C6_LR: f64 = 0.002;
const C6_FIRST_CHUNK: u64 = 120;
const C6_CHUNK: u64 = 60;
const C6_MAX_STEPS: u64 = 480;
const C6_PSNR_GAIN_DB: f64 = 5.0;
const C6_F1_MIN: f64 = 0.8;
const C6_BUDGET_SECS: f64 = 2400.0;
const C7_F1_SLACK: f64 = 0.02;

struct Overfit {
    steps: u64,
    baseline_psnr: f64,
    refined_psnr: f64,
    f1_calibrated: f64,
    f1_rough: f64,
    train_secs: f64,
}

/// Hand-built heavy corpus: each watermark is scaled to cover most of the
/// canvas at near-opaque blending, so the corrupted input sits at a low
/// PSNR and the gain bar measures genuine restoration, not touch-ups.
fn overfit_corpus() -> Vec<Sample> {
    (0..C6_SAMPLES)
        .map(|i| {
            let mut rng = stream_rng(C6_DATA_SEED, i as u64);
            let background = procedural_background(&mut rng, C6_SIZE, C6_SIZE);
            let asset = procedural_asset(&mut rng, 24, 24);
            let t = i as f64 / (C6_SAMPLES - 1) as f64;
            let spec = BlendSpec {
                scale: 2.2,
                rotation_deg: (354.0 + 4.0 * i as f64) % 360.0,
                position: (3, 3),
                global_alpha: C6_ALPHA.0 + (C6_ALPHA.1 - C6_ALPHA.0) * t,
                seed: C6_DATA_SEED,
            };
            make_sample(&background, &asset, &spec).expect("fixture corpus sample")
        })
        .collect()
}

fn overfit_metrics(ckpt: &Checkpoint, samples: &[Sample]) -> (f64, f64, f64, f64) {
    let (net, store) = instantiate(ckpt);
    let (mut base, mut refined, mut f1p, mut f1r) = (0.0, 0.0, 0.0, 0.0);
    for s in samples {
        let (coarse, refine) = net.slbr_forward(&store, &s.watermarked);
        base += psnr(&s.watermarked, &s.background);
        refined += psnr(&refine.i_refined, &s.background);
        let pair = coarse.mask_pairs.last().expect("finest scale");
        f1p += mask_f1_iou(&pair.m_hat_prime, &s.mask, MASK_THRESHOLD_EVAL).0;
        f1r += mask_f1_iou(&pair.m_hat, &s.mask, MASK_THRESHOLD_EVAL).0;
    }
    let n = samples.len() as f64;
    (base / n, refined / n, f1p / n, f1r / n)
}

/// Trains the toy configuration on 4 samples in resumable chunks,
/// stopping at the first checkpoint that meets every fixture target
/// (resuming is bitwise-identical to training straight through, so the
/// chunking only decides where to stop).
static OVERFIT: LazyLock<Overfit> = LazyLock::new(|| {
    let t0 = Instant::now();
    let samples = overfit_corpus();
    let extractor = fixture_extractor();
    let mut config = TrainConfig::toy();
    config.seed = C6_TRAIN_SEED;
    config.lr = C6_LR;
    config.max_steps = C6_FIRST_CHUNK;
    let mut outcome = train(&config, &samples, &extractor, None).expect("fixture training");
    loop {
        let (baseline, refined, f1p, f1r) = overfit_metrics(&outcome.checkpoint, &samples);
        let step = outcome.checkpoint.step;
        eprintln!(
            "overfit fixture @ step {step}: baseline {baseline:.2} dB, refined {refined:.2} dB, \
             calibrated f1 {f1p:.3}, rough f1 {f1r:.3}"
        );
        let met = refined >= baseline + C6_PSNR_GAIN_DB
            && f1p >= C6_F1_MIN
            && f1p >= f1r - C7_F1_SLACK;
        if met || step >= C6_MAX_STEPS {
            return Overfit {
                steps: step,
                baseline_psnr: baseline,
                refined_psnr: refined,
                f1_calibrated: f1p,
                f1_rough: f1r,
                train_secs: t0.elapsed().as_secs_f64(),
            };
        }
        config.max_steps = (step + C6_CHUNK).min(C6_MAX_STEPS);
        outcome = resume(&outcome.checkpoint, &config, &samples, &extractor, None)
            .expect("fixture resume");
    }
});

#[test]
fn criterion_6_toy_overfit_restores_and_localizes() {
    let _g = gate();
    let fx = &*OVERFIT;
    assert!(fx.steps <= 500, "used {} steps", fx.steps);
    assert!(
        fx.refined_psnr >= fx.baseline_psnr + C6_PSNR_GAIN_DB,
        "refined {:.2} dB vs baseline {:.2} dB: gain under {C6_PSNR_GAIN_DB} dB",
        fx.refined_psnr, fx.baseline_psnr
    );
    assert!(
        fx.f1_calibrated >= C6_F1_MIN,
        "calibrated mask f1 {:.3} under {C6_F1_MIN}",
        fx.f1_calibrated
    );
    assert!(
        fx.train_secs < C6_BUDGET_SECS,
        "took {:.0}s, budget {C6_BUDGET_SECS}s",
        fx.train_secs
    );
    pass(6, &format!(
        "{} steps: {:.2} dB over the {:.2} dB baseline (gain {:.2}), f1 {:.3}, {:.0}s",
        fx.steps, fx.refined_psnr, fx.baseline_psnr,
        fx.refined_psnr - fx.baseline_psnr, fx.f1_calibrated, fx.train_secs
    ));
}

#[test]
fn criterion_7_calibration_does_not_regress_localization() {
    let _g = gate();
    let fx = &*OVERFIT;
    assert!(
        fx.f1_calibrated >= fx.f1_rough - C7_F1_SLACK,
        "calibrated f1 {:.3} regressed more than {C7_F1_SLACK} below rough f1 {:.3}",
        fx.f1_calibrated, fx.f1_rough
    );
    pass(7, &format!(
        "calibrated f1 {:.3} vs rough f1 {:.3} (slack {C7_F1_SLACK})",
        fx.f1_calibrated, fx.f1_rough
    ));
}

// ---------------------------------------------------------------------
// criterion 8: metric oracles
// ---------------------------------------------------------------------

const C8_EXACT_TOL: f64 = 1e-9;
const C8_SSIM_IDENTITY_TOL: f64 = 1e-6;

#[test]
fn criterion_8_metric_oracles() {
    let _g = gate();
    let wave = Image::from_fn(16, 16, |c, i, j| {
        (((c * 256 + i * 16 + j) as f64) * 0.11).sin() * 0.35 + 0.5
    });

    // Identical images hit the capped score exactly.
    assert_eq!(psnr(&wave, &wave), PSNR_CAP_DB);

    // A uniform 0.1 offset means MSE 0.01, i.e. 20 dB.
    let base = Image::from_fn(16, 16, |_, _, _| 0.4);
    let off = Image::from_fn(16, 16, |_, _, _| 0.5);
    let p = psnr(&off, &base);
    assert!((p - 20.0).abs() <= C8_EXACT_TOL, "got {p}");

    // Structural similarity of an image with itself is 1.
    let s = ssim(&wave, &wave);
    assert!((s - 1.0).abs() <= C8_SSIM_IDENTITY_TOL, "got {s}");

    // Restricting the weighted error to a full mask changes nothing.
    let other = Image::from_fn(16, 16, |c, i, j| {
        (((c * 256 + i * 16 + j) as f64) * 0.07 + 2.0).cos() * 0.3 + 0.5
    });
    let full = Mask::from_fn(16, 16, |_, _| 1.0);
    let rw = rmse_w(&wave, &other, &full).expect("mask is nonempty");
    assert!((rw - rmse(&wave, &other)).abs() <= C8_EXACT_TOL);

    // Counted overlap oracle: tp=12 fp=3 fn=5 gives f1 0.75, iou 60%,
    // and the two are one-to-one: f1 = 2u/(1+u) with u = iou/100.
    let gt = Mask::from_fn(8, 8, |i, j| if i * 8 + j < 17 { 1.0 } else { 0.0 });
    let pred = Mask::from_fn(8, 8, |i, j| {
        let p = i * 8 + j;
        if p < 12 || (17..20).contains(&p) { 0.9 } else { 0.1 }
    });
    let (f1, iou) = mask_f1_iou(&pred, &gt, MASK_THRESHOLD_EVAL);
    assert!((f1 - 0.75).abs() <= C8_EXACT_TOL, "f1 {f1}");
    assert!((iou - 60.0).abs() <= C8_EXACT_TOL, "iou {iou}");
    let u = iou / 100.0;
    assert!((f1 - 2.0 * u / (1.0 + u)).abs() <= C8_EXACT_TOL, "f1/iou inconsistent");

    // Two empty masks score perfect by convention.
    let empty = Mask::zeros(8, 8);
    assert_eq!(mask_f1_iou(&empty, &empty, MASK_THRESHOLD_EVAL), (1.0, 100.0));

    pass(8, "capped and 20 dB psnr, ssim identity, full-mask rmse equivalence, f1/iou consistency");
}

// ---------------------------------------------------------------------
// criterion 9: end-to-end determinism
// ---------------------------------------------------------------------

/// Relative paths of every regular file under `root`, sorted.
fn file_listing(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_9_everything_is_deterministic() {
    let _g = gate();

    // Same seed, same dataset, byte for byte.
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let samples = generate_dataset(6, 32, (0.4, 0.9), 5);
        write_dataset(&samples, dir.path(), 5).unwrap();
    }
    let files = file_listing(dir_a.path());
    assert_eq!(files, file_listing(dir_b.path()), "file sets differ");
    assert!(files.iter().any(|f| f.extension().is_some_and(|e| e == "png")));
    for f in &files {
        let a = std::fs::read(dir_a.path().join(f)).unwrap();
        let b = std::fs::read(dir_b.path().join(f)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", f.display());
    }

    // Same config, same training trajectory and final weights.
    let samples = generate_dataset(4, 32, (0.4, 0.9), 11);
    let mut config = TrainConfig::toy();
    config.image_size = 32;
    config.batch_size = 2;
    config.seed = 11;
    config.max_steps = 3;
    let run = || train(&config, &samples, &fixture_extractor(), None).unwrap();
    let (one, two) = (run(), run());
    assert_eq!(one.history, two.history, "loss histories diverged");
    let ckpt_a = dir_a.path().join("a.ckpt");
    let ckpt_b = dir_a.path().join("b.ckpt");
    one.checkpoint.save(&ckpt_a).unwrap();
    two.checkpoint.save(&ckpt_b).unwrap();
    assert_eq!(
        std::fs::read(&ckpt_a).unwrap(),
        std::fs::read(&ckpt_b).unwrap(),
        "checkpoints differ bitwise"
    );

    // Same model, same corpus, same report.
    let (net, store) = instantiate(&one.checkpoint);
    let report_a = evaluate_network(&net, &store, &samples).unwrap();
    let report_b = evaluate_network(&net, &store, &samples).unwrap();
    assert_eq!(report_a, report_b, "evaluation reports diverged");
    assert_eq!(report_a.to_json(), report_b.to_json());

    pass(9, &format!(
        "datasets ({} files), {}-step training, and evaluation all reproduce bitwise",
        files.len(),
        config.max_steps
    ));
}
