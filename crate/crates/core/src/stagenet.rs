//! Staged fully convolutional networks.
//!
//! A staged model is an ordered list of stages; stage `k` maps the previous
//! stage's features (or the frame, for `k == 0`) to new features and a score
//! map at `1 / downsample_factor(k)` of the frame resolution. The network
//! output is the sum of all score maps upsampled to frame resolution.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Palette, FRAME_CHANNELS};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{add, conv2d, maxpool2d, relu, upsample_bilinear, ConvKernels, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub features: Tensor,
    pub score: Tensor,
}

/// Cached output of one stage, tagged with the frame that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCache {
    pub features: Tensor,
    pub score: Tensor,
    pub last_update: usize,
}

/// Anything that runs as an ordered list of stages with per-stage score maps.
pub trait StageModel: Send + Sync {
    fn stage_count(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn input_channels(&self) -> usize;
    /// Total pooling factor of stage `k`'s score map relative to the frame.
    fn downsample_factor(&self, k: usize) -> usize;
    fn stage_features(&self, k: usize, input: &Tensor) -> Result<Tensor>;
    fn stage_score(&self, k: usize, features: &Tensor) -> Result<Tensor>;

    fn forward_stage(&self, k: usize, input: &Tensor) -> Result<StageOutput> {
        if k >= self.stage_count() {
            return Err(invalid!(
                "stage {k} out of range for {} stages",
                self.stage_count()
            ));
        }
        let features = self.stage_features(k, input)?;
        let score = self.stage_score(k, &features)?;
        Ok(StageOutput { features, score })
    }
}

/// Upsamples each listed stage score to `frame_dims` and sums them in the
/// order given.
pub fn fuse_partial<M: StageModel + ?Sized>(
    model: &M,
    scores: &[(usize, &Tensor)],
    frame_dims: (usize, usize),
) -> Result<Tensor> {
    let mut fused: Option<Tensor> = None;
    for &(k, score) in scores {
        if k >= model.stage_count() {
            return Err(invalid!(
                "stage {k} out of range for {} stages",
                model.stage_count()
            ));
        }
        if score.channels() != model.n_classes() {
            return Err(shape_err!(
                "stage {k} score has {} channels, expected {}",
                score.channels(),
                model.n_classes()
            ));
        }
        let up = upsample_bilinear(score, model.downsample_factor(k))?;
        if (up.height(), up.width()) != frame_dims {
            return Err(shape_err!(
                "stage {k} score {}x{} does not upsample to the {}x{} frame",
                score.height(),
                score.width(),
                frame_dims.0,
                frame_dims.1
            ));
        }
        fused = Some(match fused {
            None => up,
            Some(acc) => add(&acc, &up)?,
        });
    }
    fused.ok_or_else(|| invalid!("nothing to fuse"))
}

/// Skip fusion over every stage; `scores[k]` may come from any frame.
pub fn fuse_scores<M: StageModel + ?Sized>(
    model: &M,
    scores: &[&Tensor],
    frame_dims: (usize, usize),
) -> Result<Tensor> {
    if scores.len() != model.stage_count() {
        return Err(invalid!(
            "fusion needs {} stage scores, got {}",
            model.stage_count(),
            scores.len()
        ));
    }
    let indexed: Vec<(usize, &Tensor)> = scores.iter().copied().enumerate().collect();
    fuse_partial(model, &indexed, frame_dims)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub stages: Vec<StageOutput>,
    pub fused: Tensor,
}

/// Runs every stage on one frame, then fuses.
pub fn full_forward<M: StageModel + ?Sized>(model: &M, frame: &Tensor) -> Result<ForwardPass> {
    let mut stages: Vec<StageOutput> = Vec::with_capacity(model.stage_count());
    for k in 0..model.stage_count() {
        let out = match stages.last() {
            None => model.forward_stage(k, frame)?,
            Some(prev) => model.forward_stage(k, &prev.features)?,
        };
        stages.push(out);
    }
    let scores: Vec<&Tensor> = stages.iter().map(|s| &s.score).collect();
    let fused = fuse_scores(model, &scores, (frame.height(), frame.width()))?;
    Ok(ForwardPass { stages, fused })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: ConvKernels,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.kernels, &self.bias, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv(ConvLayer),
    Relu,
    MaxPool { window: usize, stride: usize },
}

impl LayerOp {
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            LayerOp::Conv(c) => c.apply(input),
            LayerOp::Relu => Ok(relu(input)),
            LayerOp::MaxPool { window, stride } => maxpool2d(input, *window, *stride),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub ops: Vec<LayerOp>,
    /// 1x1 convolution to class scores.
    pub score_head: ConvLayer,
    pub downsample_factor: usize,
}

/// A convolutional staged network with explicit weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedNetwork {
    input_channels: usize,
    n_classes: usize,
    stages: Vec<StageSpec>,
    seed: Option<u64>,
}

impl StagedNetwork {
    /// Checks stage count, channel chaining, score heads and that each
    /// stage's declared factor matches the strides of its ops.
    pub fn new(
        input_channels: usize,
        n_classes: usize,
        stages: Vec<StageSpec>,
        seed: Option<u64>,
    ) -> Result<Self> {
        if !(2..=3).contains(&stages.len()) {
            return Err(invalid!(
                "a staged network has 2 or 3 stages, got {}",
                stages.len()
            ));
        }
        if !(1..=crate::tensor::MAX_CLASSES).contains(&n_classes) {
            return Err(invalid!("n_classes must be in 1..=255, got {n_classes}"));
        }
        let mut channels = input_channels;
        let mut factor = 1;
        for (k, stage) in stages.iter().enumerate() {
            for op in &stage.ops {
                match op {
                    LayerOp::Conv(c) => {
                        check_conv(c, channels, k)?;
                        channels = c.kernels.out_channels();
                        factor *= c.stride;
                    }
                    LayerOp::Relu => {}
                    LayerOp::MaxPool { window, stride } => {
                        if *window == 0 || *stride == 0 {
                            return Err(invalid!("stage {k}: pool window and stride must be >= 1"));
                        }
                        factor *= stride;
                    }
                }
            }
            check_conv(&stage.score_head, channels, k)?;
            let head = &stage.score_head;
            if head.kernels.out_channels() != n_classes
                || head.kernels.kernel_h() != 1
                || head.kernels.kernel_w() != 1
                || head.stride != 1
                || head.pad != 0
            {
                return Err(invalid!(
                    "stage {k}: score head must be a 1x1 conv to {n_classes} classes"
                ));
            }
            if stage.downsample_factor != factor {
                return Err(invalid!(
                    "stage {k}: declared downsample factor {} but ops give {factor}",
                    stage.downsample_factor
                ));
            }
            if k > 0 && stage.downsample_factor <= stages[k - 1].downsample_factor {
                return Err(invalid!(
                    "downsample factors must strictly increase with depth"
                ));
            }
        }
        Ok(Self {
            input_channels,
            n_classes,
            stages,
            seed,
        })
    }

    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

fn check_conv(c: &ConvLayer, in_channels: usize, k: usize) -> Result<()> {
    if c.kernels.in_channels() != in_channels {
        return Err(shape_err!(
            "stage {k}: conv expects {} input channels, previous op gives {in_channels}",
            c.kernels.in_channels()
        ));
    }
    if c.bias.len() != c.kernels.out_channels() {
        return Err(shape_err!(
            "stage {k}: {} biases for {} output channels",
            c.bias.len(),
            c.kernels.out_channels()
        ));
    }
    if c.stride == 0 {
        return Err(invalid!("stage {k}: conv stride must be >= 1"));
    }
    Ok(())
}

impl StageModel for StagedNetwork {
    fn stage_count(&self) -> usize {
        self.stages.len()
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn input_channels(&self) -> usize {
        self.input_channels
    }

    fn downsample_factor(&self, k: usize) -> usize {
        self.stages[k].downsample_factor
    }

    fn stage_features(&self, k: usize, input: &Tensor) -> Result<Tensor> {
        let stage = self.stages.get(k).ok_or_else(|| invalid!("no stage {k}"))?;
        let mut x = input.clone();
        for op in &stage.ops {
            x = op.apply(&x)?;
        }
        Ok(x)
    }

    fn stage_score(&self, k: usize, features: &Tensor) -> Result<Tensor> {
        let stage = self.stages.get(k).ok_or_else(|| invalid!("no stage {k}"))?;
        stage.score_head.apply(features)
    }
}

/// Shifts each score-head bias so that every class score has zero mean over
/// `frames` (means accumulated in f64, stage by stage from the frames).
///
/// Random heads on non-negative features otherwise let a single class win
/// nearly everywhere, which says more about the draw than about the features.
pub fn center_score_heads(net: &StagedNetwork, frames: &[Tensor]) -> Result<StagedNetwork> {
    if frames.is_empty() {
        return Err(invalid!("calibration needs at least one frame"));
    }
    let n = net.n_classes;
    let mut sums = vec![vec![0.0f64; n]; net.stages.len()];
    let mut counts = vec![0usize; net.stages.len()];
    for frame in frames {
        let pass = full_forward(net, frame)?;
        for (k, stage) in pass.stages.iter().enumerate() {
            for (c, sum) in sums[k].iter_mut().enumerate() {
                *sum += stage.score.plane(c).iter().map(|&v| v as f64).sum::<f64>();
            }
            counts[k] += stage.score.height() * stage.score.width();
        }
    }
    let mut stages = net.stages.clone();
    for (k, stage) in stages.iter_mut().enumerate() {
        for (c, b) in stage.score_head.bias.iter_mut().enumerate() {
            *b -= (sums[k][c] / counts[k] as f64) as f32;
        }
    }
    StagedNetwork::new(net.input_channels, n, stages, net.seed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageArch {
    /// Output channels of each 3x3 conv (each followed by ReLU).
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Max-pool window and stride closing the stage.
    pub pool: usize,
}

/// Architecture without weights, input to [`init_weights`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub n_classes: usize,
    pub stages: Vec<StageArch>,
}

impl ArchSpec {
    /// Three stages of conv-relu-conv-relu-pool with 8, 16 and 32 channels,
    /// giving score maps at 1/2, 1/4 and 1/8 of the frame.
    pub fn toy(n_classes: usize) -> Self {
        let stage = |c: usize| StageArch {
            conv_channels: vec![c, c],
            kernel: 3,
            pool: 2,
        };
        Self {
            input_channels: FRAME_CHANNELS,
            n_classes,
            stages: vec![stage(8), stage(16), stage(32)],
        }
    }
}

/// Glorot-uniform weights from ChaCha8 seeded with `seed`, zero biases.
///
/// Each tensor is drawn in order (stage by stage, convs then score head),
/// uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))` and
/// `fan = channels * kernel_h * kernel_w`.
pub fn init_weights(spec: &ArchSpec, seed: u64) -> Result<StagedNetwork> {
    if spec.input_channels == 0 {
        return Err(invalid!("input_channels must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |out_c: usize, in_c: usize, k: usize| -> Result<ConvLayer> {
        if out_c == 0 {
            return Err(invalid!("conv layers need at least one output channel"));
        }
        let fan = ((in_c + out_c) * k * k) as f64;
        let a = libm::sqrt(6.0 / fan) as f32;
        let weights = (0..out_c * in_c * k * k)
            .map(|_| rng.gen_range(-a..=a))
            .collect();
        Ok(ConvLayer {
            kernels: ConvKernels::new(out_c, in_c, k, k, weights)?,
            bias: vec![0.0; out_c],
            stride: 1,
            pad: k / 2,
        })
    };
    let mut channels = spec.input_channels;
    let mut factor = 1;
    let mut stages = Vec::with_capacity(spec.stages.len());
    for arch in &spec.stages {
        if arch.kernel % 2 == 0 || arch.pool == 0 {
            return Err(invalid!("stage kernels must be odd and pools >= 1"));
        }
        let mut ops = Vec::new();
        for &c in &arch.conv_channels {
            ops.push(LayerOp::Conv(draw(c, channels, arch.kernel)?));
            ops.push(LayerOp::Relu);
            channels = c;
        }
        if arch.pool > 1 {
            ops.push(LayerOp::MaxPool {
                window: arch.pool,
                stride: arch.pool,
            });
        }
        factor *= arch.pool;
        let score_head = draw(spec.n_classes, channels, 1)?;
        stages.push(StageSpec {
            ops,
            score_head,
            downsample_factor: factor,
        });
    }
    StagedNetwork::new(spec.input_channels, spec.n_classes, stages, Some(seed))
}

/// Background offset carried by the deepest procedural stage.
pub const PROCEDURAL_BACKGROUND_PRIOR: f32 = 0.4;

/// Exact-semantics stand-in for a trained network.
///
/// Stage 0 decodes each pixel to its nearest palette class and emits the
/// one-hot evidence at full resolution; later stages pass it through.
/// Stage 0 scores single pixels (one per output cell), so it is sharp but
/// noise-sensitive. Each deeper stage `k` scores the mean evidence over a
/// `(2 f_k + 1)`-wide window around each cell, which is coarse but robust.
/// Cells sit where align-corners upsampling places them in the frame, so
/// every stage's map stays registered with the frame after fusion.
///
/// Deeper stages add a background offset growing with their factor; stage 0
/// carries the negated total, so the fused sum is offset-free while shallow
/// stages alone are biased away from background.
#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralSegmenter {
    palette: Palette,
    factors: Vec<usize>,
    offsets: Vec<f32>,
}

impl ProceduralSegmenter {
    pub fn new(n_classes: usize, factors: &[usize]) -> Result<Self> {
        if factors.is_empty() {
            return Err(invalid!("at least one stage factor required"));
        }
        if factors[0] == 0 || factors.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid!(
                "stage factors must be positive and strictly increasing, got {factors:?}"
            ));
        }
        let deepest = *factors.last().expect("non-empty") as f32;
        let mut offsets: Vec<f32> = factors
            .iter()
            .map(|&f| PROCEDURAL_BACKGROUND_PRIOR * f as f32 / deepest)
            .collect();
        offsets[0] = -offsets[1..].iter().sum::<f32>();
        Ok(Self {
            palette: Palette::new(n_classes)?,
            factors: factors.to_vec(),
            offsets,
        })
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    fn reach(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.factors[k]
        }
    }
}

/// Frame coordinate that align-corners upsampling assigns to grid index `i`.
fn aligned_center(i: usize, grid: usize, len: usize) -> usize {
    if grid <= 1 {
        len / 2
    } else {
        (2 * i * (len - 1) + (grid - 1)) / (2 * (grid - 1))
    }
}

/// Per-channel mean over the `(2 * reach + 1)`-wide square window around the
/// frame position of each output cell, clipped to the frame.
fn window_mean(input: &Tensor, factor: usize, reach: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(shape_err!(
            "frame {h}x{w} is not divisible by stage factor {factor}"
        ));
    }
    let (gh, gw) = (h / factor, w / factor);
    let span =
        |center: usize, len: usize| (center.saturating_sub(reach), (center + reach + 1).min(len));
    Tensor::from_fn(c, gh, gw, |ch, cy, cx| {
        let plane = input.plane(ch);
        let (y0, y1) = span(aligned_center(cy, gh, h), h);
        let (x0, x1) = span(aligned_center(cx, gw, w), w);
        let mut acc = 0.0f32;
        for y in y0..y1 {
            for x in x0..x1 {
                acc += plane[y * w + x];
            }
        }
        acc / ((y1 - y0) * (x1 - x0)) as f32
    })
}

impl StageModel for ProceduralSegmenter {
    fn stage_count(&self) -> usize {
        self.factors.len()
    }

    fn n_classes(&self) -> usize {
        self.palette.n_classes()
    }

    fn input_channels(&self) -> usize {
        FRAME_CHANNELS
    }

    fn downsample_factor(&self, k: usize) -> usize {
        self.factors[k]
    }

    fn stage_features(&self, k: usize, input: &Tensor) -> Result<Tensor> {
        if k >= self.factors.len() {
            return Err(invalid!("no stage {k}"));
        }
        if k > 0 {
            if input.channels() != self.n_classes() {
                return Err(shape_err!(
                    "stage {k} expects {}-channel evidence",
                    self.n_classes()
                ));
            }
            return Ok(input.clone());
        }
        let labels = self.palette.decode(input)?;
        Tensor::from_fn(
            self.n_classes(),
            labels.height(),
            labels.width(),
            |c, y, x| f32::from(labels.get(y, x) as usize == c),
        )
    }

    fn stage_score(&self, k: usize, features: &Tensor) -> Result<Tensor> {
        if k >= self.factors.len() {
            return Err(invalid!("no stage {k}"));
        }
        if features.channels() != self.n_classes() {
            return Err(shape_err!(
                "procedural scores need {}-channel evidence",
                self.n_classes()
            ));
        }
        let mean = window_mean(features, self.factors[k], self.reach(k))?;
        let (c, h, w) = mean.dims();
        let offset = self.offsets[k];
        let mut data = mean.into_data();
        data[..h * w].iter_mut().for_each(|v| *v += offset);
        Tensor::new(c, h, w, data)
    }
}

/// Procedural segmenter over `n_classes` palette classes.
pub fn make_procedural_segmenter(
    n_classes: usize,
    factors: &[usize],
) -> Result<ProceduralSegmenter> {
    ProceduralSegmenter::new(n_classes, factors)
}
