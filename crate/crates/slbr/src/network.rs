//! Full two-stage network assembly and checkpoint serialization.
//!
//! Stage one (coarse): five shared encoder blocks and one shared decoder
//! block, then two three-block decoder branches. The mask branch emits a
//! (rough, calibrated) mask pair at each scale; the background branch
//! consumes the calibrated mask of its own scale. Stage two (refinement)
//! re-encodes `concat(coarse image, finest calibrated mask)` at three
//! scales, optionally fuses in equal-resolution coarse background
//! features (skip-stage connections), applies a stack of cross-level
//! fusion modules, and aggregates all levels into the final image.
//!
//! Ablation toggles count enabled modules from the shallowest
//! (finest-resolution) level: `n_smr = 1` upgrades only the full-
//! resolution mask block, and so on.

use std::io::{Read, Write as IoWrite};
use std::path::Path;

use autograd::{ParamStore, Tape, Tensor, Var};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    ConvLayer, CffModule, Ctx, DecoderBlock, EncoderBlock, MaskPairVars, MbeBlock, Scope, SmrBlock,
};
use crate::error::{Error, Result};
use crate::image_data::{Image, Mask};

/// Channel widths and module toggles for one network variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Coarse-encoder widths: stem then four downsampling blocks.
    pub encoder_channels: [usize; 5],
    /// Refinement-encoder widths at scales H, H/2, H/4.
    pub refine_channels: [usize; 3],
    /// Number of stacked cross-level fusion modules in the refinement.
    pub n_cff: usize,
    /// Mask-branch decoder blocks upgraded to self-calibrated blocks
    /// (0..=3, counted from the finest level).
    pub n_smr: usize,
    /// Background-branch decoder blocks upgraded to mask-guided blocks
    /// (0..=3, counted from the finest level).
    pub n_mbe: usize,
    /// Skip-stage connections from coarse background decoder features to
    /// refinement encoder features (0..=3, counted from the finest level).
    pub n_skip_stage: usize,
    /// Residual blocks per fusion site.
    pub residual_depth: usize,
    /// When false, the network stops after the coarse stage and the
    /// final prediction is the coarse image.
    pub use_refinement: bool,
    /// When true, the refinement body is a plain U-Net decoder instead
    /// of cross-level fusion plus aggregation.
    pub refine_unet: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            encoder_channels: [32, 64, 128, 256, 512],
            refine_channels: [32, 64, 128],
            n_cff: 3,
            n_smr: 3,
            n_mbe: 3,
            n_skip_stage: 3,
            residual_depth: 2,
            use_refinement: true,
            refine_unet: false,
        }
    }
}

impl NetworkConfig {
    /// Desk-scale preset for 64x64 experiments.
    pub fn toy() -> Self {
        NetworkConfig {
            encoder_channels: [8, 16, 32, 32, 32],
            refine_channels: [8, 16, 16],
            ..NetworkConfig::default()
        }
    }

    pub fn with_toggles(mut self, n_smr: usize, n_mbe: usize, n_cff: usize, n_skip_stage: usize) -> Self {
        self.n_smr = n_smr;
        self.n_mbe = n_mbe;
        self.n_cff = n_cff;
        self.n_skip_stage = n_skip_stage;
        self
    }

    /// Coarse stage only; the refinement stage is not constructed.
    pub fn coarse_only(mut self) -> Self {
        self.use_refinement = false;
        self.n_cff = 0;
        self.n_skip_stage = 0;
        self
    }

    /// Replaces the fusion refinement body with a plain U-Net decoder.
    pub fn unet_refinement(mut self) -> Self {
        self.use_refinement = true;
        self.refine_unet = true;
        self.n_cff = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.iter().any(|c| *c == 0)
            || self.refine_channels.iter().any(|c| *c == 0)
        {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        for (name, v) in [
            ("n_smr", self.n_smr),
            ("n_mbe", self.n_mbe),
            ("n_skip_stage", self.n_skip_stage),
        ] {
            if v > 3 {
                return Err(Error::Config(format!("{name} must be in 0..=3, got {v}")));
            }
        }
        if self.residual_depth == 0 {
            return Err(Error::Config("residual_depth must be at least 1".into()));
        }
        if self.refine_unet && !self.use_refinement {
            return Err(Error::Config(
                "refine_unet requires use_refinement".into(),
            ));
        }
        Ok(())
    }
}

/// Rough and calibrated mask estimates at one scale.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub m_hat: Mask,
    pub m_hat_prime: Mask,
}

/// Coarse-stage result: background estimate plus mask pairs ordered
/// coarse to fine (H/4, H/2, H).
#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub i_coarse: Image,
    pub mask_pairs: Vec<MaskPair>,
}

/// Refinement-stage result.
#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub i_refined: Image,
}

enum MaskLevel {
    Calibrated(SmrBlock),
    Plain { block: DecoderBlock, head: ConvLayer },
}

impl MaskLevel {
    fn forward(&self, ctx: Ctx, prev: Var, skip: Var) -> (Var, MaskPairVars) {
        match self {
            MaskLevel::Calibrated(smr) => smr.forward(ctx, prev, skip),
            MaskLevel::Plain { block, head } => {
                let feat = block.forward(ctx, prev, skip);
                let m = ctx.tape.sigmoid(head.forward(ctx, feat));
                (feat, MaskPairVars { m_hat: m, m_hat_prime: m })
            }
        }
    }
}

enum BgLevel {
    Guided(MbeBlock),
    Plain(DecoderBlock),
}

impl BgLevel {
    fn forward(&self, ctx: Ctx, prev: Var, skip: Var, m_hat_prime: Var) -> Var {
        match self {
            BgLevel::Guided(mbe) => mbe.forward(ctx, prev, skip, m_hat_prime),
            BgLevel::Plain(block) => block.forward(ctx, prev, skip),
        }
    }
}

enum RefineBody {
    Fusion {
        modules: Vec<CffModule>,
        agg_proj: Vec<ConvLayer>,
        head: ConvLayer,
    },
    Unet {
        decoders: Vec<DecoderBlock>,
        head: ConvLayer,
    },
}

struct RefineStage {
    encoders: Vec<EncoderBlock>,
    skip_fuse: Vec<Option<ConvLayer>>,
    body: RefineBody,
}

/// The assembled two-stage network. Holds parameter ids only; values
/// live in the [`ParamStore`] used at construction.
pub struct SlbrNetwork {
    config: NetworkConfig,
    encoders: Vec<EncoderBlock>,
    shared_decoder: DecoderBlock,
    mask_levels: Vec<MaskLevel>,
    bg_levels: Vec<BgLevel>,
    coarse_head: ConvLayer,
    refine: Option<RefineStage>,
}

/// Tape-level coarse outputs. `bg_feats` are the background branch
/// features ordered fine to coarse (H, H/2, H/4) for the refinement
/// stage's skip-stage connections.
pub struct CoarseVars {
    pub image: Var,
    pub mask_pairs: Vec<MaskPairVars>,
    pub bg_feats: Vec<Var>,
}

/// Tape-level end-to-end outputs.
pub struct ForwardVars {
    pub coarse: CoarseVars,
    pub refined: Var,
}

impl SlbrNetwork {
    pub fn new(scope: &mut Scope, config: &NetworkConfig) -> Self {
        config.validate().expect("invalid network config");
        let ec = &config.encoder_channels;
        let depth = config.residual_depth;

        let mut encoders = Vec::with_capacity(5);
        encoders.push(EncoderBlock::new(scope, "coarse.enc0", 3, ec[0], false));
        for i in 1..5 {
            encoders.push(EncoderBlock::new(
                scope,
                &format!("coarse.enc{i}"),
                ec[i - 1],
                ec[i],
                true,
            ));
        }
        let shared_decoder =
            DecoderBlock::new(scope, "coarse.shared_dec", ec[4], ec[3], ec[3], depth);

        // Branch levels run coarse to fine: level 0 outputs H/4, level 2
        // outputs H. Toggles count from the finest level, so level i is
        // upgraded when (3 - i) <= n_toggle.
        let level_dims = [(ec[3], ec[2]), (ec[2], ec[1]), (ec[1], ec[0])];
        let mask_levels = level_dims
            .iter()
            .enumerate()
            .map(|(i, &(c_prev, c_out))| {
                let name = format!("coarse.mask{i}");
                if 3 - i <= config.n_smr {
                    MaskLevel::Calibrated(SmrBlock::new(scope, &name, c_prev, c_out, c_out, depth))
                } else {
                    MaskLevel::Plain {
                        block: DecoderBlock::new(scope, &name, c_prev, c_out, c_out, depth),
                        head: ConvLayer::new(scope, &format!("{name}.mask_head"), c_out, 1, 1, 1, 1.0),
                    }
                }
            })
            .collect();
        let bg_levels = level_dims
            .iter()
            .enumerate()
            .map(|(i, &(c_prev, c_out))| {
                let name = format!("coarse.bg{i}");
                if 3 - i <= config.n_mbe {
                    BgLevel::Guided(MbeBlock::new(scope, &name, c_prev, c_out, c_out, depth))
                } else {
                    BgLevel::Plain(DecoderBlock::new(scope, &name, c_prev, c_out, c_out, depth))
                }
            })
            .collect();
        let coarse_head = ConvLayer::new(scope, "coarse.head", ec[0], 3, 1, 1, 1.0);

        let refine = config.use_refinement.then(|| {
            let rc = &config.refine_channels;
            let mut enc = Vec::with_capacity(3);
            enc.push(EncoderBlock::new(scope, "refine.enc0", 4, rc[0], false));
            enc.push(EncoderBlock::new(scope, "refine.enc1", rc[0], rc[1], true));
            enc.push(EncoderBlock::new(scope, "refine.enc2", rc[1], rc[2], true));
            // Skip-stage fusion pairs refinement level i with the coarse
            // background feature of equal resolution (channels ec[i]).
            let skip_fuse = (0..3)
                .map(|i| {
                    (i < config.n_skip_stage).then(|| {
                        ConvLayer::new(
                            scope,
                            &format!("refine.skip{i}"),
                            rc[i] + ec[i],
                            rc[i],
                            1,
                            1,
                            0.0,
                        )
                    })
                })
                .collect();
            let body = if config.refine_unet {
                RefineBody::Unet {
                    decoders: vec![
                        DecoderBlock::new(scope, "refine.dec0", rc[2], rc[1], rc[1], depth),
                        DecoderBlock::new(scope, "refine.dec1", rc[1], rc[0], rc[0], depth),
                    ],
                    head: ConvLayer::new(scope, "refine.head", rc[0], 3, 1, 1, 1.0),
                }
            } else {
                RefineBody::Fusion {
                    modules: (0..config.n_cff)
                        .map(|i| CffModule::new(scope, &format!("refine.cff{i}"), rc, depth))
                        .collect(),
                    agg_proj: (0..3)
                        .map(|i| {
                            ConvLayer::new(scope, &format!("refine.agg{i}"), rc[i], rc[0], 1, 1, 0.0)
                        })
                        .collect(),
                    head: ConvLayer::new(scope, "refine.head", rc[0], 3, 1, 1, 1.0),
                }
            };
            RefineStage {
                encoders: enc,
                skip_fuse,
                body,
            }
        });

        SlbrNetwork {
            config: config.clone(),
            encoders,
            shared_decoder,
            mask_levels,
            bg_levels,
            coarse_head,
            refine,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Coarse stage on a `[n, 3, h, w]` batch. The input must be square
    /// with side at least 32 and divisible by 16.
    pub fn coarse_forward_t(&self, ctx: Ctx, j: Var) -> CoarseVars {
        let shape = ctx.tape.shape(j);
        assert!(shape.len() == 4 && shape[1] == 3, "input must be [n,3,h,w]");
        let (h, w) = (shape[2], shape[3]);
        assert!(h == w, "input must be square, got {h}x{w}");
        assert!(h >= 32, "input side must be at least 32, got {h}");
        assert!(h % 16 == 0, "input side must be divisible by 16, got {h}");

        let mut skips = Vec::with_capacity(5);
        let mut x = j;
        for enc in &self.encoders {
            x = enc.forward(ctx, x);
            skips.push(x);
        }
        // skips: [H, H/2, H/4, H/8, H/16]; bottleneck is the last.
        let shared = self.shared_decoder.forward(ctx, skips[4], skips[3]);

        let mut mask_pairs = Vec::with_capacity(3);
        let mut m = shared;
        for (i, level) in self.mask_levels.iter().enumerate() {
            let (feat, pair) = level.forward(ctx, m, skips[2 - i]);
            mask_pairs.push(pair);
            m = feat;
        }
        let mut bg_feats_coarse_to_fine = Vec::with_capacity(3);
        let mut b = shared;
        for (i, level) in self.bg_levels.iter().enumerate() {
            b = level.forward(ctx, b, skips[2 - i], mask_pairs[i].m_hat_prime);
            bg_feats_coarse_to_fine.push(b);
        }
        let image = ctx.tape.sigmoid(self.coarse_head.forward(ctx, b));
        let bg_feats = bg_feats_coarse_to_fine.into_iter().rev().collect();
        CoarseVars {
            image,
            mask_pairs,
            bg_feats,
        }
    }

    /// Refinement stage. `bg_feats` are ordered fine to coarse
    /// (H, H/2, H/4); `m_hat_prime` is the finest calibrated mask.
    pub fn refine_forward_t(&self, ctx: Ctx, i_coarse: Var, m_hat_prime: Var, bg_feats: &[Var]) -> Var {
        let stage = self
            .refine
            .as_ref()
            .expect("refinement stage not constructed");
        let t = ctx.tape;
        assert_eq!(bg_feats.len(), 3, "need 3 background features");

        let mut levels = Vec::with_capacity(3);
        let mut x = t.concat_chan(&[i_coarse, m_hat_prime]);
        for (i, enc) in stage.encoders.iter().enumerate() {
            x = enc.forward(ctx, x);
            if let Some(fuse) = &stage.skip_fuse[i] {
                let xs = t.shape(x);
                let bs = t.shape(bg_feats[i]);
                assert!(
                    xs[2] == bs[2] && xs[3] == bs[3],
                    "skip-stage pair at level {i} has mismatched scales {}x{} vs {}x{}",
                    xs[2],
                    xs[3],
                    bs[2],
                    bs[3]
                );
                x = fuse.forward(ctx, t.concat_chan(&[x, bg_feats[i]]));
            }
            levels.push(x);
        }

        match &stage.body {
            RefineBody::Fusion {
                modules,
                agg_proj,
                head,
            } => {
                for module in modules {
                    levels = module.forward(ctx, &levels);
                }
                let full = t.shape(levels[0]);
                let (h, w) = (full[2], full[3]);
                let mut acc: Option<Var> = None;
                for (level, proj) in levels.iter().zip(agg_proj) {
                    let p = proj.forward(ctx, *level);
                    let ps = t.shape(p);
                    let r = if ps[2] == h && ps[3] == w {
                        p
                    } else {
                        t.bilinear(p, h, w)
                    };
                    acc = Some(match acc {
                        None => r,
                        Some(a) => t.add(a, r),
                    });
                }
                t.sigmoid(head.forward(ctx, acc.expect("at least one level")))
            }
            RefineBody::Unet { decoders, head } => {
                let mut y = levels[2];
                y = decoders[0].forward(ctx, y, levels[1]);
                y = decoders[1].forward(ctx, y, levels[0]);
                t.sigmoid(head.forward(ctx, y))
            }
        }
    }

    /// End-to-end forward. Without a refinement stage the final
    /// prediction is the coarse image.
    pub fn forward_t(&self, ctx: Ctx, j: Var) -> ForwardVars {
        let coarse = self.coarse_forward_t(ctx, j);
        let refined = if self.refine.is_some() {
            let m_prime = coarse.mask_pairs[2].m_hat_prime;
            self.refine_forward_t(ctx, coarse.image, m_prime, &coarse.bg_feats)
        } else {
            coarse.image
        };
        ForwardVars { coarse, refined }
    }

    /// Single-image inference wrapper over [`Self::forward_t`].
    pub fn slbr_forward(&self, store: &ParamStore, j: &Image) -> (CoarseOutput, RefineOutput) {
        let tape = Tape::new();
        let ctx = Ctx { tape: &tape, store };
        let jv = tape.input(image_to_batch(&[j]));
        let vars = self.forward_t(ctx, jv);
        let coarse = CoarseOutput {
            i_coarse: batch_to_image(&tape.value(vars.coarse.image), 0),
            mask_pairs: vars
                .coarse
                .mask_pairs
                .iter()
                .map(|p| MaskPair {
                    m_hat: batch_to_mask(&tape.value(p.m_hat), 0),
                    m_hat_prime: batch_to_mask(&tape.value(p.m_hat_prime), 0),
                })
                .collect(),
        };
        let refined = RefineOutput {
            i_refined: batch_to_image(&tape.value(vars.refined), 0),
        };
        (coarse, refined)
    }

    pub fn coarse_forward(&self, store: &ParamStore, j: &Image) -> CoarseOutput {
        let tape = Tape::new();
        let ctx = Ctx { tape: &tape, store };
        let jv = tape.input(image_to_batch(&[j]));
        let vars = self.coarse_forward_t(ctx, jv);
        CoarseOutput {
            i_coarse: batch_to_image(&tape.value(vars.image), 0),
            mask_pairs: vars
                .mask_pairs
                .iter()
                .map(|p| MaskPair {
                    m_hat: batch_to_mask(&tape.value(p.m_hat), 0),
                    m_hat_prime: batch_to_mask(&tape.value(p.m_hat_prime), 0),
                })
                .collect(),
        }
    }
}

/// Stacks images into a `[n, 3, h, w]` tensor.
pub fn image_to_batch(images: &[&Image]) -> Tensor {
    assert!(!images.is_empty(), "empty batch");
    let (h, w) = (images[0].h(), images[0].w());
    let mut out = Tensor::zeros(IxDyn(&[images.len(), 3, h, w]));
    for (n, img) in images.iter().enumerate() {
        assert_eq!((img.h(), img.w()), (h, w), "batch images must share dims");
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out[[n, c, i, j]] = img.data()[[c, i, j]];
                }
            }
        }
    }
    out
}

/// Stacks masks into a `[n, 1, h, w]` tensor.
pub fn mask_to_batch(masks: &[&Mask]) -> Tensor {
    assert!(!masks.is_empty(), "empty batch");
    let (h, w) = (masks[0].h(), masks[0].w());
    let mut out = Tensor::zeros(IxDyn(&[masks.len(), 1, h, w]));
    for (n, m) in masks.iter().enumerate() {
        assert_eq!((m.h(), m.w()), (h, w), "batch masks must share dims");
        for i in 0..h {
            for j in 0..w {
                out[[n, 0, i, j]] = m.data()[[i, j]];
            }
        }
    }
    out
}

/// Extracts batch entry `n` of a `[n, 3, h, w]` tensor as an image,
/// clamping away float dust outside `[0,1]`.
pub fn batch_to_image(t: &Tensor, n: usize) -> Image {
    let s = t.shape();
    assert!(s.len() == 4 && s[1] == 3, "expected [n,3,h,w]");
    Image::from_fn(s[2], s[3], |c, i, j| t[[n, c, i, j]].clamp(0.0, 1.0))
}

/// Extracts batch entry `n` of a `[n, 1, h, w]` tensor as a mask.
pub fn batch_to_mask(t: &Tensor, n: usize) -> Mask {
    let s = t.shape();
    assert!(s.len() == 4 && s[1] == 1, "expected [n,1,h,w]");
    Mask::from_fn(s[2], s[3], |i, j| t[[n, 0, i, j]].clamp(0.0, 1.0))
}

const CKPT_MAGIC: &[u8; 8] = b"SLBRCKPT";
const CKPT_VERSION: u32 = 1;

/// Optimizer first/second moment tensors, aligned with the parameter
/// list order.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

/// RNG stream position for exact resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// On-disk training/inference state: network weights by name plus
/// optional optimizer and RNG state for resumption.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub moments: Option<MomentState>,
    pub rng: Option<RngState>,
    /// Trainer configuration snapshot (opaque here; the trainer compares
    /// it field by field on resume).
    pub train_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    network: NetworkConfig,
    step: u64,
    rng: Option<RngState>,
    train_config: Option<serde_json::Value>,
    params: Vec<CkptParam>,
    moment_t: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_tensor(buf: &[u8], off: &mut usize, shape: &[usize]) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    let bytes = len * 8;
    if *off + bytes > buf.len() {
        return Err(Error::Incompatible("checkpoint truncated".into()));
    }
    let mut data = Vec::with_capacity(len);
    for k in 0..len {
        let start = *off + k * 8;
        let arr: [u8; 8] = buf[start..start + 8].try_into().expect("8 bytes");
        data.push(f64::from_le_bytes(arr));
    }
    *off += bytes;
    Tensor::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| Error::Incompatible(format!("checkpoint tensor shape: {e}")))
}

impl Checkpoint {
    /// Snapshots the current parameter values of `store`.
    pub fn capture(network: &NetworkConfig, store: &ParamStore, step: u64) -> Self {
        Checkpoint {
            network: network.clone(),
            step,
            params: store
                .iter()
                .map(|(_, name, value)| (name.to_string(), value.clone()))
                .collect(),
            moments: None,
            rng: None,
            train_config: None,
        }
    }

    /// Writes parameter values into `store`, requiring an exact
    /// name-set and shape match.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store.find(name).ok_or_else(|| {
                Error::Incompatible(format!("parameter {name} missing from model"))
            })?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?} in checkpoint, {:?} in model",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            store.set(id, value.clone());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CkptHeader {
            version: CKPT_VERSION,
            network: self.network.clone(),
            step: self.step,
            rng: self.rng,
            train_config: self.train_config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| CkptParam {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            moment_t: self.moments.as_ref().map(|m| m.t),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, t) in &self.params {
            write_tensor(&mut out, t);
        }
        if let Some(m) = &self.moments {
            for t in m.m.iter().chain(m.v.iter()) {
                write_tensor(&mut out, t);
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 20 || &buf[..8] != CKPT_MAGIC {
            return Err(Error::Incompatible(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint format version {version}, expected {CKPT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
        if 20 + hlen > buf.len() {
            return Err(Error::Incompatible("checkpoint truncated".into()));
        }
        let header: CkptHeader = serde_json::from_slice(&buf[20..20 + hlen])
            .map_err(|e| Error::Incompatible(format!("checkpoint header: {e}")))?;
        let mut off = 20 + hlen;
        let mut params = Vec::with_capacity(header.params.len());
        for p in &header.params {
            params.push((p.name.clone(), read_tensor(&buf, &mut off, &p.shape)?));
        }
        let moments = match header.moment_t {
            Some(t) => {
                let mut m = Vec::with_capacity(params.len());
                for p in &header.params {
                    m.push(read_tensor(&buf, &mut off, &p.shape)?);
                }
                let mut v = Vec::with_capacity(params.len());
                for p in &header.params {
                    v.push(read_tensor(&buf, &mut off, &p.shape)?);
                }
                Some(MomentState { m, v, t })
            }
            None => None,
        };
        Ok(Checkpoint {
            network: header.network,
            step: header.step,
            params,
            moments,
            rng: header.rng,
            train_config: header.train_config,
        })
    }
}

/// Recursively lists fields that differ between two JSON-encoded
/// configurations, as `path: left vs right` lines.
pub fn config_diff(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Vec<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let mut out = Vec::new();
            let keys: std::collections::BTreeSet<_> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (ma.get(k), mb.get(k)) {
                    (Some(x), Some(y)) => out.extend(config_diff(x, y, &sub)),
                    (Some(x), None) => out.push(format!("{sub}: {x} vs <absent>")),
                    (None, Some(y)) => out.push(format!("{sub}: <absent> vs {y}")),
                    (None, None) => unreachable!(),
                }
            }
            out
        }
        _ if a == b => Vec::new(),
        _ => vec![format!("{path}: {a} vs {b}")],
    }
}
