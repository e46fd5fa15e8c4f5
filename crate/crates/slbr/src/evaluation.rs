//! Restoration metrics (PSNR, SSIM, RMSE, masked RMSE) and mask
//! localization metrics (F1, IoU), per image and corpus-aggregated.
//!
//! RMSE values are reported on the 0-255 scale. PSNR is capped at
//! 100 dB so identical images aggregate finitely. Masked RMSE is
//! undefined for an empty mask; such images are skipped in the corpus
//! aggregate and counted in `excluded_empty_mask`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_data::{Image, Mask};
use crate::synth::Sample;

/// PSNR ceiling substituted for infinite values at zero error.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mask binarization threshold for localization metrics.
pub const MASK_THRESHOLD_EVAL: f64 = 0.5;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn assert_same_dims(pred: &Image, target: &Image) {
    assert_eq!(
        (pred.h(), pred.w()),
        (target.h(), target.w()),
        "metric inputs must share dimensions"
    );
}

fn assert_binary(mask: &Mask, what: &str) {
    assert!(
        mask.data().iter().all(|v| *v == 0.0 || *v == 1.0),
        "{what} must be binary"
    );
}

/// Peak signal-to-noise ratio in dB against a unit dynamic range,
/// capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Image, target: &Image) -> f64 {
    assert_same_dims(pred, target);
    let n = pred.data().len() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-region separable filter: rows then columns, no padding.
fn valid_filter(x: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut rows = Array2::<f64>::zeros((h, w - SSIM_WINDOW + 1));
    for i in 0..h {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * x[[i, j + t]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for i in 0..h - SSIM_WINDOW + 1 {
        for j in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * rows[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean local structural similarity over valid 11x11 Gaussian windows
/// (sigma 1.5, stabilizers (0.01)^2 and (0.03)^2 on unit range),
/// averaged over channels. Panics when either side is below the window.
pub fn ssim(pred: &Image, target: &Image) -> f64 {
    assert_same_dims(pred, target);
    assert!(
        pred.h() >= SSIM_WINDOW && pred.w() >= SSIM_WINDOW,
        "image {}x{} smaller than the {SSIM_WINDOW}-pixel window",
        pred.h(),
        pred.w()
    );
    let k = gaussian_kernel();
    let mut channel_sum = 0.0;
    for c in 0..3 {
        let x = pred.data().index_axis(ndarray::Axis(0), c).to_owned();
        let y = target.data().index_axis(ndarray::Axis(0), c).to_owned();
        let mu_x = valid_filter(&x, &k);
        let mu_y = valid_filter(&y, &k);
        let e_xx = valid_filter(&(&x * &x), &k);
        let e_yy = valid_filter(&(&y * &y), &k);
        let e_xy = valid_filter(&(&x * &y), &k);
        let mut acc = 0.0;
        for (i, j) in ndarray::indices(mu_x.dim()) {
            let (mx, my) = (mu_x[[i, j]], mu_y[[i, j]]);
            let var_x = e_xx[[i, j]] - mx * mx;
            let var_y = e_yy[[i, j]] - my * my;
            let cov = e_xy[[i, j]] - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
            acc += num / den;
        }
        channel_sum += acc / mu_x.len() as f64;
    }
    channel_sum / 3.0
}

/// Root-mean-square error over the weighted pixel set, on the 0-255
/// scale. Shared by [`rmse`] (full weight) and [`rmse_w`] so the
/// full-mask case is bit-identical between them.
fn rmse_weighted(pred: &Image, target: &Image, weight: impl Fn(usize, usize) -> f64) -> Option<f64> {
    let (h, w) = (pred.h(), pred.w());
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..h {
        for j in 0..w {
            let wt = weight(i, j);
            if wt == 0.0 {
                continue;
            }
            for c in 0..3 {
                let d = pred.data()[[c, i, j]] - target.data()[[c, i, j]];
                sum += d * d;
                count += 1.0;
            }
        }
    }
    (count > 0.0).then(|| (sum / count).sqrt() * 255.0)
}

/// Root-mean-square error on the 0-255 scale.
pub fn rmse(pred: &Image, target: &Image) -> f64 {
    assert_same_dims(pred, target);
    rmse_weighted(pred, target, |_, _| 1.0).expect("image is nonempty")
}

/// [`rmse`] restricted to pixels where the binary mask is 1. `None`
/// for an empty mask (the value is undefined there).
pub fn rmse_w(pred: &Image, target: &Image, mask: &Mask) -> Option<f64> {
    assert_same_dims(pred, target);
    assert_eq!(
        (mask.h(), mask.w()),
        (pred.h(), pred.w()),
        "mask must match image dimensions"
    );
    assert_binary(mask, "rmse_w mask");
    rmse_weighted(pred, target, |i, j| mask.data()[[i, j]])
}

/// Localization quality of a soft mask against binary ground truth:
/// binarize at `threshold`, then F1 = 2TP/(2TP+FP+FN) and
/// IoU% = 100*TP/(TP+FP+FN). Two empty masks score perfect (1, 100).
pub fn mask_f1_iou(pred: &Mask, gt: &Mask, threshold: f64) -> (f64, f64) {
    assert_eq!(
        (pred.h(), pred.w()),
        (gt.h(), gt.w()),
        "masks must share dimensions"
    );
    assert_binary(gt, "ground-truth mask");
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, g) in pred.data().iter().zip(gt.data().iter()) {
        let p_on = *p > threshold;
        let g_on = *g == 1.0;
        match (p_on, g_on) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return (1.0, 100.0);
    }
    let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
    let iou = 100.0 * tp as f64 / (tp + fp + fn_) as f64;
    (f1, iou)
}

/// Corpus-level metric aggregate. All fields are arithmetic means over
/// images except the two counters; `rmsew` averages only images with a
/// nonempty ground-truth mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub rmsew: f64,
    pub f1: f64,
    pub iou: f64,
    pub n_images: usize,
    pub excluded_empty_mask: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("metrics report: {e}")))
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "psnr {:.2} dB | ssim {:.4} | rmse {:.3} | rmsew {:.3} | f1 {:.4} | iou {:.2} ({} images, {} without mask)",
            self.psnr, self.ssim, self.rmse, self.rmsew, self.f1, self.iou, self.n_images,
            self.excluded_empty_mask
        )
    }
}

/// Evaluates `infer` over a corpus: restoration metrics compare the
/// predicted restoration against each sample's clean background, and
/// localization metrics compare the predicted mask against ground
/// truth at threshold 0.5.
pub fn evaluate_corpus<F>(mut infer: F, samples: &[Sample]) -> Result<MetricsReport>
where
    F: FnMut(&Sample) -> (Image, Mask),
{
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let n = samples.len() as f64;
    let (mut s_psnr, mut s_ssim, mut s_rmse, mut s_f1, mut s_iou) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut s_rmsew = 0.0;
    let mut rmsew_n = 0usize;
    let mut excluded = 0usize;
    for sample in samples {
        let (restored, mask_pred) = infer(sample);
        s_psnr += psnr(&restored, &sample.background);
        s_ssim += ssim(&restored, &sample.background);
        s_rmse += rmse(&restored, &sample.background);
        match rmse_w(&restored, &sample.background, &sample.mask) {
            Some(v) => {
                s_rmsew += v;
                rmsew_n += 1;
            }
            None => excluded += 1,
        }
        let (f1, iou) = mask_f1_iou(&mask_pred, &sample.mask, MASK_THRESHOLD_EVAL);
        s_f1 += f1;
        s_iou += iou;
    }
    Ok(MetricsReport {
        psnr: s_psnr / n,
        ssim: s_ssim / n,
        rmse: s_rmse / n,
        rmsew: if rmsew_n > 0 { s_rmsew / rmsew_n as f64 } else { 0.0 },
        f1: s_f1 / n,
        iou: s_iou / n,
        n_images: samples.len(),
        excluded_empty_mask: excluded,
    })
}

/// [`evaluate_corpus`] over a network: restoration = final refined
/// image, localization = the finest-scale calibrated mask.
pub fn evaluate_network(
    net: &crate::network::SlbrNetwork,
    store: &autograd::ParamStore,
    samples: &[Sample],
) -> Result<MetricsReport> {
    evaluate_corpus(
        |sample| {
            let (coarse, refined) = net.slbr_forward(store, &sample.watermarked);
            let mask = coarse.mask_pairs.last().expect("mask scales").m_hat_prime.clone();
            (refined.i_refined, mask)
        },
        samples,
    )
}
