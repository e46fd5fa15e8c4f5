//! Training losses and the pluggable perceptual feature extractor.
//!
//! The objective is
//! `total = l1_coarse + l1_refined + lambda_vgg * vgg + lambda_mask * (mask + mask_refined)`
//! where `l1_*` are mean-absolute image losses, `vgg` is a three-tap
//! deep-feature distance, and the two mask terms are binary
//! cross-entropies of the rough and calibrated side masks, each averaged
//! over the three prediction scales against max-pooled ground truth.
//!
//! Every loss exists in two forms: a tape-level builder (`*_t`) used in
//! training so gradients flow, and an array-level wrapper that builds a
//! throwaway tape. The wrappers are thin so both forms are the same code.

use std::io::{Read, Write as IoWrite};
use std::path::Path;

use autograd::{init, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::MaskPairVars;
use crate::error::{Error, Result};
use crate::image_data::{downsample_mask_max, Image, Mask};
use crate::network::{
    image_to_batch, mask_to_batch, read_tensor, write_tensor, CoarseOutput, RefineOutput,
};
use crate::synth::Sample;

/// Predictions are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before
/// logarithms so saturated sigmoids cannot produce non-finite losses.
pub const CLAMP_EPS: f64 = 1e-7;

/// Term weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_vgg: f64,
    pub lambda_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_vgg: 0.001,
            lambda_mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_vgg < 0.0 || self.lambda_mask < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Binary cross-entropy on the tape. `pred` and `target` share shapes;
/// `target` is expected in `[0,1]`.
pub fn mask_bce_t(tape: &Tape, pred: Var, target: Var, reduction: Reduction) -> Var {
    assert_eq!(
        tape.shape(pred),
        tape.shape(target),
        "cross-entropy inputs must share shapes"
    );
    let p = tape.clamp(pred, CLAMP_EPS, 1.0 - CLAMP_EPS);
    let one_minus_p = tape.add_scalar(tape.scale(p, -1.0), 1.0);
    let one_minus_t = tape.add_scalar(tape.scale(target, -1.0), 1.0);
    let ll = tape.add(
        tape.mul(target, tape.ln(p)),
        tape.mul(one_minus_t, tape.ln(one_minus_p)),
    );
    let reduced = match reduction {
        Reduction::Sum => tape.sum_all(ll),
        Reduction::Mean => tape.mean_all(ll),
    };
    tape.scale(reduced, -1.0)
}

/// Mean absolute difference on the tape.
pub fn l1_loss_t(tape: &Tape, pred: Var, target: Var) -> Var {
    assert_eq!(
        tape.shape(pred),
        tape.shape(target),
        "l1 inputs must share shapes"
    );
    tape.mean_all(tape.abs(tape.sub(pred, target)))
}

/// Binary cross-entropy between mask arrays.
pub fn mask_bce(pred: &Mask, target: &Mask, reduction: Reduction) -> f64 {
    let tape = Tape::new();
    let p = tape.input(mask_to_batch(&[pred]));
    let t = tape.input(mask_to_batch(&[target]));
    tape.scalar(mask_bce_t(&tape, p, t, reduction))
}

/// Mean absolute difference between images.
pub fn l1_loss(pred: &Image, target: &Image) -> f64 {
    let tape = Tape::new();
    let p = tape.input(image_to_batch(&[pred]));
    let t = tape.input(image_to_batch(&[target]));
    tape.scalar(l1_loss_t(&tape, p, t))
}

const FEAT_MAGIC: &[u8; 8] = b"SLBRFEAT";
const FEAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FeatHeader {
    version: u32,
    stages: Vec<Vec<FeatConv>>,
}

#[derive(Serialize, Deserialize)]
struct FeatConv {
    c_in: usize,
    c_out: usize,
}

/// Frozen three-stage convolutional feature extractor for the
/// perceptual loss. Each stage is a chain of 3x3 conv + rectifier;
/// stages are separated by 2x average pooling and each stage's final
/// activation is one feature tap. Weights are constants (never
/// trained): by default they are seeded-random, and a pretrained set
/// can be loaded from a weight file.
pub struct PerceptualExtractor {
    stages: Vec<Vec<(Tensor, Tensor)>>,
    provenance: &'static str,
}

/// Seeded-random extractor widths per stage.
const SEEDED_WIDTHS: [usize; 3] = [8, 16, 32];
/// Convolutions per stage (mirrors the 2-2-3 layout of the classic
/// 16-layer feature network's first three stages).
const STAGE_CONVS: [usize; 3] = [2, 2, 3];

impl PerceptualExtractor {
    /// Deterministic random extractor; any fixed seed defines a fixed
    /// feature space, which is all the perceptual loss needs offline.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(3);
        let mut c_prev = 3;
        for (width, n_convs) in SEEDED_WIDTHS.into_iter().zip(STAGE_CONVS) {
            let mut convs = Vec::with_capacity(n_convs);
            for _ in 0..n_convs {
                let w = init::conv_weight(&mut rng, width, c_prev, 3, 0.0);
                let b = init::zeros(&[width]);
                convs.push((w, b));
                c_prev = width;
            }
            stages.push(convs);
        }
        PerceptualExtractor {
            stages,
            provenance: "seeded-random",
        }
    }

    /// Loads pretrained weights from the extractor's own container
    /// format (`SLBRFEAT`). Widths are taken from the file; the stage
    /// count must be 3 and kernel sizes 3x3.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 20 || &buf[..8] != FEAT_MAGIC {
            return Err(Error::Incompatible(format!(
                "{} is not an extractor weight file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != FEAT_VERSION {
            return Err(Error::Incompatible(format!(
                "extractor weight version {version}, expected {FEAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
        if 20 + hlen > buf.len() {
            return Err(Error::Incompatible("extractor weight file truncated".into()));
        }
        let header: FeatHeader = serde_json::from_slice(&buf[20..20 + hlen])
            .map_err(|e| Error::Incompatible(format!("extractor weight header: {e}")))?;
        if header.stages.len() != 3 {
            return Err(Error::Incompatible(format!(
                "extractor must have 3 stages, file has {}",
                header.stages.len()
            )));
        }
        let mut off = 20 + hlen;
        let mut stages = Vec::with_capacity(3);
        let mut c_prev = 3;
        for (si, convs) in header.stages.iter().enumerate() {
            if convs.is_empty() {
                return Err(Error::Incompatible(format!("stage {si} has no convolutions")));
            }
            let mut stage = Vec::with_capacity(convs.len());
            for conv in convs {
                if conv.c_in != c_prev {
                    return Err(Error::Incompatible(format!(
                        "stage {si} expects {c_prev} input channels, file says {}",
                        conv.c_in
                    )));
                }
                let w = read_tensor(&buf, &mut off, &[conv.c_out, conv.c_in, 3, 3])?;
                let b = read_tensor(&buf, &mut off, &[conv.c_out])?;
                stage.push((w, b));
                c_prev = conv.c_out;
            }
            stages.push(stage);
        }
        Ok(PerceptualExtractor {
            stages,
            provenance: "pretrained",
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = FeatHeader {
            version: FEAT_VERSION,
            stages: self
                .stages
                .iter()
                .map(|convs| {
                    convs
                        .iter()
                        .map(|(w, _)| FeatConv {
                            c_in: w.shape()[1],
                            c_out: w.shape()[0],
                        })
                        .collect()
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(FEAT_MAGIC);
        out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (w, b) in self.stages.iter().flatten() {
            write_tensor(&mut out, w);
            write_tensor(&mut out, b);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn provenance(&self) -> &'static str {
        self.provenance
    }

    /// The three feature taps of `x [n,3,h,w]`, shallow to deep. `h`
    /// and `w` must be divisible by 4 for the two inter-stage poolings.
    pub fn features_t(&self, tape: &Tape, x: Var) -> Vec<Var> {
        let mut taps = Vec::with_capacity(3);
        let mut h = x;
        for (si, stage) in self.stages.iter().enumerate() {
            if si > 0 {
                h = tape.avgpool2(h);
            }
            for (w, b) in stage {
                let wv = tape.input(w.clone());
                let bv = tape.input(b.clone());
                h = tape.relu(tape.conv2d(h, wv, Some(bv), 1, 1));
            }
            taps.push(h);
        }
        taps
    }
}

/// Sum over the three taps of mean absolute feature differences, on the
/// tape.
pub fn perceptual_loss_t(tape: &Tape, pred: Var, target: Var, extractor: &PerceptualExtractor) -> Var {
    let fp = extractor.features_t(tape, pred);
    let ft = extractor.features_t(tape, target);
    let mut acc: Option<Var> = None;
    for (a, b) in fp.into_iter().zip(ft) {
        let d = tape.mean_all(tape.abs(tape.sub(a, b)));
        acc = Some(match acc {
            None => d,
            Some(s) => tape.add(s, d),
        });
    }
    acc.expect("extractor has taps")
}

/// Sum over the three taps of mean absolute feature differences.
pub fn perceptual_loss(pred: &Image, target: &Image, extractor: &PerceptualExtractor) -> f64 {
    let tape = Tape::new();
    let p = tape.input(image_to_batch(&[pred]));
    let t = tape.input(image_to_batch(&[target]));
    tape.scalar(perceptual_loss_t(&tape, p, t, extractor))
}

/// Per-term values of one combined-objective evaluation. `vgg`, `mask`
/// and `mask_refined` are stored unweighted; `total` applies the
/// lambdas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1_coarse: f64,
    pub l1_refined: f64,
    pub vgg: f64,
    pub mask: f64,
    pub mask_refined: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.l1_coarse,
            self.l1_refined,
            self.vgg,
            self.mask,
            self.mask_refined,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Tape-level handles to every objective term.
pub struct LossVars {
    pub total: Var,
    pub l1_coarse: Var,
    pub l1_refined: Var,
    pub vgg: Var,
    pub mask: Var,
    pub mask_refined: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            l1_coarse: tape.scalar(self.l1_coarse),
            l1_refined: tape.scalar(self.l1_refined),
            vgg: tape.scalar(self.vgg),
            mask: tape.scalar(self.mask),
            mask_refined: tape.scalar(self.mask_refined),
        }
    }
}

/// Predictions and targets the combined objective consumes, already on
/// the tape. Mask entries run coarse to fine (H/4, H/2, H) and
/// `mask_targets[i]` must share `mask_pairs[i]`'s resolution.
pub struct LossInputs {
    pub i_coarse: Var,
    pub i_refined: Var,
    pub target: Var,
    pub mask_pairs: Vec<MaskPairVars>,
    pub mask_targets: Vec<Var>,
}

/// Builds the combined objective on the tape:
/// `l1(coarse) + l1(refined) + lambda_vgg * perceptual(refined) +
/// lambda_mask * (bce(rough) + bce(calibrated))`, the two mask terms
/// averaged over their prediction scales.
pub fn total_loss_t(
    tape: &Tape,
    inputs: &LossInputs,
    extractor: &PerceptualExtractor,
    weights: &LossWeights,
) -> LossVars {
    assert_eq!(
        inputs.mask_pairs.len(),
        inputs.mask_targets.len(),
        "one mask target per prediction scale"
    );
    assert!(!inputs.mask_pairs.is_empty(), "no mask scales");
    let l1_coarse = l1_loss_t(tape, inputs.i_coarse, inputs.target);
    let l1_refined = l1_loss_t(tape, inputs.i_refined, inputs.target);
    let vgg = perceptual_loss_t(tape, inputs.i_refined, inputs.target, extractor);

    let n_scales = inputs.mask_pairs.len() as f64;
    let mut rough: Option<Var> = None;
    let mut calib: Option<Var> = None;
    for (pair, gt) in inputs.mask_pairs.iter().zip(&inputs.mask_targets) {
        let r = mask_bce_t(tape, pair.m_hat, *gt, Reduction::Mean);
        let c = mask_bce_t(tape, pair.m_hat_prime, *gt, Reduction::Mean);
        rough = Some(match rough {
            None => r,
            Some(s) => tape.add(s, r),
        });
        calib = Some(match calib {
            None => c,
            Some(s) => tape.add(s, c),
        });
    }
    let mask = tape.scale(rough.expect("scales"), 1.0 / n_scales);
    let mask_refined = tape.scale(calib.expect("scales"), 1.0 / n_scales);

    let weighted = tape.add(
        tape.scale(vgg, weights.lambda_vgg),
        tape.scale(tape.add(mask, mask_refined), weights.lambda_mask),
    );
    let total = tape.add(tape.add(l1_coarse, l1_refined), weighted);
    LossVars {
        total,
        l1_coarse,
        l1_refined,
        vgg,
        mask,
        mask_refined,
    }
}

/// Max-pooled ground-truth masks for the three prediction scales,
/// coarse to fine, as `[1,1,s,s]` tensors.
pub fn mask_target_pyramid(mask: &Mask) -> Vec<Tensor> {
    [4, 2, 1]
        .into_iter()
        .map(|factor| mask_to_batch(&[&downsample_mask_max(mask, factor)]))
        .collect()
}

/// Combined objective over one sample's network outputs.
pub fn total_loss(
    coarse: &CoarseOutput,
    refined: &RefineOutput,
    sample: &Sample,
    extractor: &PerceptualExtractor,
    weights: &LossWeights,
) -> (f64, LossBreakdown) {
    weights.validate().expect("invalid loss weights");
    let tape = Tape::new();
    let mask_pairs = coarse
        .mask_pairs
        .iter()
        .map(|p| MaskPairVars {
            m_hat: tape.input(mask_to_batch(&[&p.m_hat])),
            m_hat_prime: tape.input(mask_to_batch(&[&p.m_hat_prime])),
        })
        .collect();
    let inputs = LossInputs {
        i_coarse: tape.input(image_to_batch(&[&coarse.i_coarse])),
        i_refined: tape.input(image_to_batch(&[&refined.i_refined])),
        target: tape.input(image_to_batch(&[&sample.background])),
        mask_pairs,
        mask_targets: mask_target_pyramid(&sample.mask)
            .into_iter()
            .map(|t| tape.input(t))
            .collect(),
    };
    let vars = total_loss_t(&tape, &inputs, extractor, weights);
    let breakdown = vars.breakdown(&tape);
    (breakdown.total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::gradcheck::audit_params;
    use autograd::ParamStore;
    use ndarray::IxDyn;

    fn mask_from(values: &[f64], h: usize, w: usize) -> Mask {
        assert_eq!(values.len(), h * w);
        Mask::from_fn(h, w, |i, j| values[i * w + j])
    }

    #[test]
    fn bce_hand_oracles() {
        // Perfect binary prediction: only the clamp keeps logs finite;
        // per-pixel loss is ln(1 - eps) ~ eps.
        let gt = mask_from(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let perfect = mask_bce(&gt, &gt, Reduction::Mean);
        assert!(perfect >= 0.0 && perfect <= 1e-5, "perfect bce {perfect}");

        // gt [1,0] vs pred [0.5,0.5]: -ln(1/2) - ln(1/2) = 2 ln 2.
        let gt2 = mask_from(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 2, 4);
        let pred2 = mask_from(&[0.5; 8], 2, 4);
        let sum = mask_bce(&pred2, &gt2, Reduction::Sum);
        assert!((sum - 8.0 * 0.5_f64.ln().abs()).abs() < 1e-9, "sum {sum}");
        let two = mask_bce(
            &mask_from(&[1.0, 0.0], 1, 2),
            &mask_from(&[1.0, 0.0], 1, 2),
            Reduction::Sum,
        );
        assert!(two < 1e-5);
        let pair = mask_bce(&mask_from(&[0.5, 0.5], 1, 2), &mask_from(&[1.0, 0.0], 1, 2), Reduction::Sum);
        assert!((pair - 2.0 * std::f64::consts::LN_2).abs() < 1e-9, "pair {pair}");

        // gt [1] vs pred [0.9]: -ln 0.9. Masks need both cells; pad with
        // a perfectly predicted zero cell (contributes ~1e-7).
        let single = mask_bce(
            &mask_from(&[0.9, 0.0], 1, 2),
            &mask_from(&[1.0, 0.0], 1, 2),
            Reduction::Sum,
        );
        assert!((single - (-0.9_f64.ln())).abs() < 1e-6, "single {single}");
    }

    #[test]
    fn bce_mean_is_sum_over_count_exactly() {
        let gt = mask_from(&[1.0, 0.0, 1.0, 1.0, 0.0, 0.0], 2, 3);
        let pred = mask_from(&[0.8, 0.3, 0.6, 0.9, 0.2, 0.5], 2, 3);
        let sum = mask_bce(&pred, &gt, Reduction::Sum);
        let mean = mask_bce(&pred, &gt, Reduction::Mean);
        assert_eq!(mean, sum / 6.0);
    }

    #[test]
    fn l1_hand_oracle_and_symmetry() {
        let a = Image::from_fn(8, 8, |_, _, _| 0.2);
        let b = Image::from_fn(8, 8, |_, _, _| 0.5);
        assert!((l1_loss(&a, &b) - 0.3).abs() < 1e-12);
        assert_eq!(l1_loss(&a, &b), l1_loss(&b, &a));
        assert_eq!(l1_loss(&a, &a), 0.0);
    }

    fn wavy_image(phase: f64) -> Image {
        Image::from_fn(8, 8, |c, i, j| {
            ((c as f64) * 0.31 + (i as f64) * 0.57 + (j as f64) * 0.23 + phase).sin() * 0.35 + 0.5
        })
    }

    #[test]
    fn perceptual_zero_on_identity_and_deterministic() {
        let ex = PerceptualExtractor::seeded(5);
        let img = wavy_image(0.4);
        assert_eq!(perceptual_loss(&img, &img, &ex), 0.0);
        let other = wavy_image(1.9);
        let d1 = perceptual_loss(&img, &other, &ex);
        let d2 = perceptual_loss(&img, &other, &PerceptualExtractor::seeded(5));
        assert!(d1 > 0.0);
        assert_eq!(d1, d2);
    }

    #[test]
    fn perceptual_decreases_along_interpolation() {
        let ex = PerceptualExtractor::seeded(5);
        let start = wavy_image(2.6);
        let target = wavy_image(0.1);
        let mut prev = f64::INFINITY;
        for k in 0..5 {
            let t = k as f64 / 4.0;
            let interp = Image::from_fn(8, 8, |c, i, j| {
                (1.0 - t) * start.data()[[c, i, j]] + t * target.data()[[c, i, j]]
            });
            let d = perceptual_loss(&interp, &target, &ex);
            assert!(d < prev, "distance rose at t={t}: {d} >= {prev}");
            prev = d;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn extractor_file_round_trip_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let ex = PerceptualExtractor::seeded(11);
        ex.save(&path).unwrap();
        let back = PerceptualExtractor::from_file(&path).unwrap();
        assert_eq!(back.provenance(), "pretrained");
        let a = wavy_image(0.3);
        let b = wavy_image(1.2);
        assert_eq!(perceptual_loss(&a, &b, &ex), perceptual_loss(&a, &b, &back));

        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"not a weight file at all").unwrap();
        assert!(matches!(
            PerceptualExtractor::from_file(&junk),
            Err(Error::Incompatible(_))
        ));
    }

    /// Synthetic coarse/refine outputs for objective tests.
    fn fake_outputs(side: usize) -> (CoarseOutput, RefineOutput) {
        let mk = |phase: f64, s: usize| {
            Mask::from_fn(s, s, |i, j| {
                (((i * 3 + j * 7) as f64 * 0.11 + phase).sin() * 0.3 + 0.5).clamp(0.05, 0.95)
            })
        };
        let coarse = CoarseOutput {
            i_coarse: wavy_image(0.7),
            mask_pairs: vec![
                crate::network::MaskPair { m_hat: mk(0.1, side / 4), m_hat_prime: mk(0.2, side / 4) },
                crate::network::MaskPair { m_hat: mk(0.3, side / 2), m_hat_prime: mk(0.4, side / 2) },
                crate::network::MaskPair { m_hat: mk(0.5, side), m_hat_prime: mk(0.6, side) },
            ],
        };
        let refined = RefineOutput { i_refined: wavy_image(1.3) };
        (coarse, refined)
    }

    fn fake_sample() -> Sample {
        let background = wavy_image(0.0);
        let watermarked = wavy_image(0.9);
        let mask = Mask::from_fn(8, 8, |i, j| f64::from(i >= 2 && i < 6 && j >= 3 && j < 7));
        let alpha = Mask::from_fn(8, 8, |i, j| mask.data()[[i, j]] * 0.5);
        let watermark_layer = Image::zeros(8, 8);
        Sample {
            watermarked,
            background,
            mask,
            watermark_layer,
            alpha,
        }
    }

    #[test]
    fn total_loss_accounting_holds() {
        let (coarse, refined) = fake_outputs(8);
        let sample = fake_sample();
        let ex = PerceptualExtractor::seeded(3);
        let weights = LossWeights::default();
        let (total, b) = total_loss(&coarse, &refined, &sample, &ex, &weights);
        assert_eq!(total, b.total);
        let recomposed = b.l1_coarse
            + b.l1_refined
            + weights.lambda_vgg * b.vgg
            + weights.lambda_mask * (b.mask + b.mask_refined);
        assert!((total - recomposed).abs() < 1e-9, "{total} vs {recomposed}");
        assert!(b.is_finite());
        for term in [b.l1_coarse, b.l1_refined, b.vgg, b.mask, b.mask_refined] {
            assert!(term >= 0.0);
        }
    }

    #[test]
    fn total_loss_zero_lambdas_reduce_to_l1_terms() {
        let (coarse, refined) = fake_outputs(8);
        let sample = fake_sample();
        let ex = PerceptualExtractor::seeded(3);
        let weights = LossWeights { lambda_vgg: 0.0, lambda_mask: 0.0 };
        let (total, b) = total_loss(&coarse, &refined, &sample, &ex, &weights);
        assert_eq!(total, b.l1_coarse + b.l1_refined);
    }

    #[test]
    fn total_loss_affine_in_each_lambda() {
        let (coarse, refined) = fake_outputs(8);
        let sample = fake_sample();
        let ex = PerceptualExtractor::seeded(3);
        let base = LossWeights { lambda_vgg: 0.5, lambda_mask: 0.25 };
        let (t0, b) = total_loss(&coarse, &refined, &sample, &ex, &base);
        let bumped_vgg = LossWeights { lambda_vgg: 0.7, ..base };
        let (t1, _) = total_loss(&coarse, &refined, &sample, &ex, &bumped_vgg);
        assert!((t1 - t0 - 0.2 * b.vgg).abs() < 1e-12);
        let bumped_mask = LossWeights { lambda_mask: 0.75, ..base };
        let (t2, _) = total_loss(&coarse, &refined, &sample, &ex, &bumped_mask);
        assert!((t2 - t0 - 0.5 * (b.mask + b.mask_refined)).abs() < 1e-12);
    }

    #[test]
    fn mask_target_pyramid_scales_and_max_semantics() {
        let mask = Mask::from_fn(8, 8, |i, j| f64::from(i == 5 && j == 2));
        let pyr = mask_target_pyramid(&mask);
        assert_eq!(pyr[0].shape(), &[1, 1, 2, 2]);
        assert_eq!(pyr[1].shape(), &[1, 1, 4, 4]);
        assert_eq!(pyr[2].shape(), &[1, 1, 8, 8]);
        // A single set pixel survives max-pooling at every scale.
        assert_eq!(pyr[0][[0, 0, 1, 0]], 1.0);
        assert_eq!(pyr[0].sum(), 1.0);
        assert_eq!(pyr[1][[0, 0, 2, 1]], 1.0);
        assert_eq!(pyr[1].sum(), 1.0);
    }

    /// Finite differences vs analytic gradients, loss evaluated through
    /// a parameterized prediction so the audit machinery applies.
    fn audit_loss(build: impl Fn(&Tape, Var) -> Var, init_val: Tensor) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("pred", init_val);
        let tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = build(&tape, p);
        tape.backward(loss);
        let analytic = tape.param_grads(&store);
        let report = audit_params(&mut store, &analytic, 1e-5, 1e-3, 1e-9, |s| {
            let t = Tape::new();
            let p = t.param(s, id);
            t.scalar(build(&t, p))
        });
        report.pass_fraction()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let pred8 = Tensor::from_shape_vec(
            IxDyn(&[1, 1, 8, 8]),
            (0..64).map(|i| 0.2 + 0.6 * ((i as f64 * 0.37).sin() * 0.5 + 0.5)).collect(),
        )
        .unwrap();
        let gt8 = Tensor::from_shape_vec(
            IxDyn(&[1, 1, 8, 8]),
            (0..64).map(|i| f64::from(i % 3 == 0)).collect(),
        )
        .unwrap();
        let bce_pass = audit_loss(
            |t, p| mask_bce_t(t, p, t.input(gt8.clone()), Reduction::Mean),
            pred8.clone(),
        );
        assert_eq!(bce_pass, 1.0, "bce gradcheck");

        let target = Tensor::from_shape_vec(
            IxDyn(&[1, 3, 8, 8]),
            (0..192).map(|i| ((i as f64) * 0.29).sin() * 0.4 + 0.5).collect(),
        )
        .unwrap();
        // Offset keeps pred - target away from the |.| kink everywhere.
        let pred_img = target.mapv(|v| (v + 0.07).min(1.0));
        let l1_pass = audit_loss(
            |t, p| l1_loss_t(t, p, t.input(target.clone())),
            pred_img.clone(),
        );
        assert_eq!(l1_pass, 1.0, "l1 gradcheck");

        let ex = PerceptualExtractor::seeded(5);
        let vgg_pass = audit_loss(
            |t, p| perceptual_loss_t(t, p, t.input(target.clone()), &ex),
            pred_img,
        );
        assert!(vgg_pass >= 0.99, "perceptual gradcheck pass {vgg_pass}");
    }
}
