//! Reusable network building blocks.
//!
//! Every block registers its parameters in a [`ParamStore`] under a
//! dotted path at construction time and performs its forward pass on a
//! caller-supplied [`Tape`]. Construction order is the initialization
//! RNG order, so a fixed seed fully determines the weights.
//!
//! Conventions: activations are `[n, c, h, w]`; single-channel maps
//! (masks) are `[n, 1, h, w]`; encoders use leaky rectifiers (slope
//! 0.2), decoders plain rectifiers; normalization is per-sample
//! instance norm, so statistics never leak across batch entries.

use autograd::{init, ParamId, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

/// Spatial-statistics stabilizer inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Negative slope of encoder rectifiers.
pub const ENCODER_SLOPE: f64 = 0.2;

/// Guard added to the mask mass in masked average pooling so an
/// all-zero mask divides by epsilon instead of zero.
pub const POOL_EPS: f64 = 1e-6;

/// Construction context: parameter registry plus the init RNG.
pub struct Scope<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

/// Forward-pass context: the tape being built and the frozen registry.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
}

/// Convolution with bias; kernel size 1 or 3, padding `k/2`.
pub struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        neg_slope: f64,
    ) -> Self {
        let w = scope.store.add(
            format!("{name}.weight"),
            init::conv_weight(scope.rng, c_out, c_in, k, neg_slope),
        );
        let b = scope.store.add(format!("{name}.bias"), init::zeros(&[c_out]));
        ConvLayer {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, ctx: Ctx, x: Var) -> Var {
        let w = ctx.tape.param(ctx.store, self.w);
        let b = ctx.tape.param(ctx.store, self.b);
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Instance normalization with learned per-channel affine.
pub struct NormLayer {
    gamma: ParamId,
    beta: ParamId,
}

impl NormLayer {
    pub fn new(scope: &mut Scope, name: &str, c: usize) -> Self {
        NormLayer {
            gamma: scope.store.add(format!("{name}.gamma"), init::ones(&[c])),
            beta: scope.store.add(format!("{name}.beta"), init::zeros(&[c])),
        }
    }

    pub fn forward(&self, ctx: Ctx, x: Var) -> Var {
        let g = ctx.tape.param(ctx.store, self.gamma);
        let b = ctx.tape.param(ctx.store, self.beta);
        ctx.tape.instance_norm(x, g, b, NORM_EPS)
    }
}

/// Fully connected layer with bias.
pub struct LinearLayer {
    w: ParamId,
    b: ParamId,
}

impl LinearLayer {
    pub fn new(scope: &mut Scope, name: &str, c_in: usize, c_out: usize) -> Self {
        LinearLayer {
            w: scope.store.add(
                format!("{name}.weight"),
                init::linear_weight(scope.rng, c_out, c_in, 1.0),
            ),
            b: scope.store.add(format!("{name}.bias"), init::zeros(&[c_out])),
        }
    }

    pub fn forward(&self, ctx: Ctx, x: Var) -> Var {
        let w = ctx.tape.param(ctx.store, self.w);
        let b = ctx.tape.param(ctx.store, self.b);
        ctx.tape.linear(x, w, Some(b))
    }
}

/// conv -> instance norm -> leaky rectifier.
pub struct ConvNormAct {
    conv: ConvLayer,
    norm: NormLayer,
    slope: f64,
}

impl ConvNormAct {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        slope: f64,
    ) -> Self {
        ConvNormAct {
            conv: ConvLayer::new(scope, &format!("{name}.conv"), c_in, c_out, 3, stride, slope),
            norm: NormLayer::new(scope, &format!("{name}.norm"), c_out),
            slope,
        }
    }

    pub fn forward(&self, ctx: Ctx, x: Var) -> Var {
        let y = self.norm.forward(ctx, self.conv.forward(ctx, x));
        ctx.tape.leaky_relu(y, self.slope)
    }
}

/// conv3x3 -> norm -> rectifier -> conv3x3 -> norm, plus identity
/// shortcut. Channels are preserved so the shortcut needs no projection.
pub struct ResidualBlock {
    conv1: ConvLayer,
    norm1: NormLayer,
    conv2: ConvLayer,
    norm2: NormLayer,
}

impl ResidualBlock {
    pub fn new(scope: &mut Scope, name: &str, c: usize) -> Self {
        ResidualBlock {
            conv1: ConvLayer::new(scope, &format!("{name}.conv1"), c, c, 3, 1, 0.0),
            norm1: NormLayer::new(scope, &format!("{name}.norm1"), c),
            conv2: ConvLayer::new(scope, &format!("{name}.conv2"), c, c, 3, 1, 0.0),
            norm2: NormLayer::new(scope, &format!("{name}.norm2"), c),
        }
    }

    pub fn forward(&self, ctx: Ctx, x: Var) -> Var {
        let y = self.norm1.forward(ctx, self.conv1.forward(ctx, x));
        let y = ctx.tape.relu(y);
        let y = self.norm2.forward(ctx, self.conv2.forward(ctx, y));
        ctx.tape.add(x, y)
    }
}

fn residual_stack(scope: &mut Scope, name: &str, c: usize, depth: usize) -> Vec<ResidualBlock> {
    (0..depth)
        .map(|i| ResidualBlock::new(scope, &format!("{name}.res{i}"), c))
        .collect()
}

fn run_stack(ctx: Ctx, stack: &[ResidualBlock], mut x: Var) -> Var {
    for r in stack {
        x = r.forward(ctx, x);
    }
    x
}

/// Two conv stages; the first optionally downsamples by stride 2. The
/// stem (stride 1) preserves resolution.
pub struct EncoderBlock {
    stage1: ConvNormAct,
    stage2: ConvNormAct,
    downsample: bool,
}

impl EncoderBlock {
    pub fn new(scope: &mut Scope, name: &str, c_in: usize, c_out: usize, downsample: bool) -> Self {
        let stride = if downsample { 2 } else { 1 };
        EncoderBlock {
            stage1: ConvNormAct::new(scope, &format!("{name}.stage1"), c_in, c_out, stride, ENCODER_SLOPE),
            stage2: ConvNormAct::new(scope, &format!("{name}.stage2"), c_out, c_out, 1, ENCODER_SLOPE),
            downsample,
        }
    }

    pub fn forward(&self, ctx: Ctx, x: Var) -> Var {
        let shape = ctx.tape.shape(x);
        if self.downsample {
            assert!(
                shape[2] % 2 == 0 && shape[3] % 2 == 0,
                "downsampling encoder block fed odd dims {}x{}",
                shape[2],
                shape[3]
            );
        }
        self.stage2.forward(ctx, self.stage1.forward(ctx, x))
    }
}

/// Upsample `prev` to `skip`'s resolution (bilinear + conv), concatenate
/// with `skip`, fuse, then run the residual stack.
pub struct DecoderBlock {
    up: ConvNormAct,
    fuse: ConvNormAct,
    res: Vec<ResidualBlock>,
}

impl DecoderBlock {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        c_prev: usize,
        c_skip: usize,
        c_out: usize,
        residual_depth: usize,
    ) -> Self {
        DecoderBlock {
            up: ConvNormAct::new(scope, &format!("{name}.up"), c_prev, c_out, 1, 0.0),
            fuse: ConvNormAct::new(scope, &format!("{name}.fuse"), c_out + c_skip, c_out, 1, 0.0),
            res: residual_stack(scope, name, c_out, residual_depth),
        }
    }

    pub fn forward(&self, ctx: Ctx, prev: Var, skip: Var) -> Var {
        let ps = ctx.tape.shape(prev);
        let ss = ctx.tape.shape(skip);
        assert!(
            ss[2] == ps[2] * 2 && ss[3] == ps[3] * 2,
            "decoder block: skip {}x{} must be twice prev {}x{}",
            ss[2],
            ss[3],
            ps[2],
            ps[3]
        );
        let up = self.up.forward(ctx, ctx.tape.bilinear(prev, ss[2], ss[3]));
        let cat = ctx.tape.concat_chan(&[up, skip]);
        run_stack(ctx, &self.res, self.fuse.forward(ctx, cat))
    }
}

/// Weighted spatial mean of `x [n,c,h,w]` under weights `m [n,1,h,w]`:
/// `sum(x*m) / (sum(m) + eps)` per sample and channel. The epsilon keeps
/// an all-zero weight map finite (result 0).
pub fn masked_average_pool(tape: &Tape, x: Var, m: Var) -> Var {
    let num = tape.sum_spatial(tape.mul_chan(x, m));
    let den = tape.add_scalar(tape.sum_spatial(m), POOL_EPS);
    tape.div_row(num, den)
}

/// Mask-branch decoder block that calibrates its own rough prediction.
///
/// The fused feature yields a rough mask; pooling the feature under that
/// mask gives a global watermark descriptor, which is projected and
/// broadcast back so a second head can compare every position against
/// it and emit the calibrated mask.
pub struct SmrBlock {
    fuse: DecoderBlock,
    rough_head: ConvLayer,
    proj_map: ConvLayer,
    proj_vec: LinearLayer,
    calib_head: ConvLayer,
}

/// Rough and calibrated mask predictions at one scale.
#[derive(Clone, Copy)]
pub struct MaskPairVars {
    pub m_hat: Var,
    pub m_hat_prime: Var,
}

impl SmrBlock {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        c_prev: usize,
        c_skip: usize,
        c_out: usize,
        residual_depth: usize,
    ) -> Self {
        SmrBlock {
            fuse: DecoderBlock::new(scope, &format!("{name}.fuse"), c_prev, c_skip, c_out, residual_depth),
            rough_head: ConvLayer::new(scope, &format!("{name}.rough_head"), c_out, 1, 1, 1, 1.0),
            proj_map: ConvLayer::new(scope, &format!("{name}.proj_map"), c_out, c_out, 1, 1, 1.0),
            proj_vec: LinearLayer::new(scope, &format!("{name}.proj_vec"), c_out, c_out),
            calib_head: ConvLayer::new(scope, &format!("{name}.calib_head"), 2 * c_out, 1, 1, 1, 1.0),
        }
    }

    pub fn forward(&self, ctx: Ctx, prev: Var, skip: Var) -> (Var, MaskPairVars) {
        let t = ctx.tape;
        let xm = self.fuse.forward(ctx, prev, skip);
        let m_hat = t.sigmoid(self.rough_head.forward(ctx, xm));
        let pooled = masked_average_pool(t, xm, m_hat);
        let shape = t.shape(xm);
        let replicated = t.broadcast_spatial(self.proj_vec.forward(ctx, pooled), shape[2], shape[3]);
        let projected = self.proj_map.forward(ctx, xm);
        let cat = t.concat_chan(&[projected, replicated]);
        let m_hat_prime = t.sigmoid(self.calib_head.forward(ctx, cat));
        (xm, MaskPairVars { m_hat, m_hat_prime })
    }
}

/// Background-branch decoder block guided by the calibrated mask: the
/// fused feature is repeatedly augmented with a conv residue computed
/// from (feature, mask).
pub struct MbeBlock {
    fuse: DecoderBlock,
    residues: Vec<ConvLayer>,
}

/// Number of residue refinement rounds in [`MbeBlock`].
pub const MBE_ROUNDS: usize = 3;

impl MbeBlock {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        c_prev: usize,
        c_skip: usize,
        c_out: usize,
        residual_depth: usize,
    ) -> Self {
        MbeBlock {
            fuse: DecoderBlock::new(scope, &format!("{name}.fuse"), c_prev, c_skip, c_out, residual_depth),
            residues: (0..MBE_ROUNDS)
                .map(|t| ConvLayer::new(scope, &format!("{name}.residue{t}"), c_out + 1, c_out, 3, 1, 0.0))
                .collect(),
        }
    }

    pub fn forward(&self, ctx: Ctx, prev: Var, skip: Var, m_hat_prime: Var) -> Var {
        let t = ctx.tape;
        let ss = ctx.tape.shape(skip);
        let ms = ctx.tape.shape(m_hat_prime);
        assert!(
            ms[1] == 1 && ms[2] == ss[2] && ms[3] == ss[3],
            "mask {}x{} does not match block resolution {}x{}",
            ms[2],
            ms[3],
            ss[2],
            ss[3]
        );
        let mut f = self.fuse.forward(ctx, prev, skip);
        for residue in &self.residues {
            let r = residue.forward(ctx, t.concat_chan(&[f, m_hat_prime]));
            f = t.add(f, r);
        }
        f
    }
}

/// Cross-level fusion: the sole inter-level edge broadcasts the highest
/// (smallest-resolution) level down to every lower level.
pub struct CffModule {
    top_stack: Vec<ResidualBlock>,
    lower: Vec<(ConvLayer, Vec<ResidualBlock>)>,
}

impl CffModule {
    /// `channels` ordered low to high level (large to small resolution).
    pub fn new(scope: &mut Scope, name: &str, channels: &[usize], residual_depth: usize) -> Self {
        assert!(channels.len() >= 2, "fusion needs at least 2 levels");
        let c_top = *channels.last().expect("non-empty");
        let lower = channels[..channels.len() - 1]
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let proj = ConvLayer::new(
                    scope,
                    &format!("{name}.level{i}.proj"),
                    c + c_top,
                    c,
                    1,
                    1,
                    0.0,
                );
                let stack = residual_stack(scope, &format!("{name}.level{i}"), c, residual_depth);
                (proj, stack)
            })
            .collect();
        CffModule {
            top_stack: residual_stack(scope, &format!("{name}.top"), c_top, residual_depth),
            lower,
        }
    }

    pub fn forward(&self, ctx: Ctx, levels: &[Var]) -> Vec<Var> {
        let t = ctx.tape;
        assert_eq!(levels.len(), self.lower.len() + 1, "level count mismatch");
        for pair in levels.windows(2) {
            let a = t.shape(pair[0]);
            let b = t.shape(pair[1]);
            assert!(
                a[2] == b[2] * 2 && a[3] == b[3] * 2,
                "fusion levels must halve in resolution: {}x{} then {}x{}",
                a[2],
                a[3],
                b[2],
                b[3]
            );
        }
        let top = *levels.last().expect("non-empty");
        let mut out = Vec::with_capacity(levels.len());
        for (level, (proj, stack)) in levels[..levels.len() - 1].iter().zip(&self.lower) {
            let shape = t.shape(*level);
            let up = t.bilinear(top, shape[2], shape[3]);
            let fused = proj.forward(ctx, t.concat_chan(&[*level, up]));
            out.push(run_stack(ctx, stack, fused));
        }
        out.push(run_stack(ctx, &self.top_stack, top));
        out
    }
}
