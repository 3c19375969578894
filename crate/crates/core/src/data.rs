//! Synthetic labeled sequences.
//!
//! Two generators: translated crops of a fixed source image (a crop window
//! slides a fixed number of pixels per frame, so consecutive frames overlap
//! exactly), and procedural scenes of moving rectangles and disks rendered
//! with per-class palette colours plus seeded noise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Label, LabelMap, Tensor, MAX_CLASSES};

/// Colour channels of rendered frames.
pub const FRAME_CHANNELS: usize = 3;

/// Fixed class colours on an RGB lattice; class 0 is black.
///
/// With `L` levels per channel (the smallest `L >= 2` with `L^3 >= n`),
/// class `i` has digits `(i % L, i / L % L, i / L^2)` scaled by `1 / (L - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    colors: Vec<[f32; FRAME_CHANNELS]>,
    levels: usize,
}

impl Palette {
    pub fn new(n_classes: usize) -> Result<Self> {
        if !(1..=MAX_CLASSES).contains(&n_classes) {
            return Err(invalid!(
                "palette needs 1..={MAX_CLASSES} classes, got {n_classes}"
            ));
        }
        let mut levels = 2;
        while levels * levels * levels < n_classes {
            levels += 1;
        }
        let scale = 1.0 / (levels - 1) as f32;
        let colors = (0..n_classes)
            .map(|i| {
                [
                    (i % levels) as f32 * scale,
                    (i / levels % levels) as f32 * scale,
                    (i / (levels * levels)) as f32 * scale,
                ]
            })
            .collect();
        Ok(Self { colors, levels })
    }

    pub fn n_classes(&self) -> usize {
        self.colors.len()
    }

    pub fn color(&self, class: Label) -> [f32; FRAME_CHANNELS] {
        self.colors[class as usize]
    }

    /// Distance between neighbouring lattice colours along one channel.
    /// Noise below half of this never changes the decoded class.
    pub fn spacing(&self) -> f32 {
        1.0 / (self.levels - 1) as f32
    }

    /// Nearest palette class per pixel, ties to the lowest class.
    pub fn decode(&self, frame: &Tensor) -> Result<LabelMap> {
        if frame.channels() != FRAME_CHANNELS {
            return Err(shape_err!(
                "palette decoding needs {FRAME_CHANNELS} channels, got {}",
                frame.channels()
            ));
        }
        let (h, w) = (frame.height(), frame.width());
        let planes = [frame.plane(0), frame.plane(1), frame.plane(2)];
        let labels = (0..h * w)
            .map(|p| {
                let px = [planes[0][p], planes[1][p], planes[2][p]];
                let mut best = (0usize, f32::INFINITY);
                for (i, c) in self.colors.iter().enumerate() {
                    let d: f32 = px.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best.0 as Label
            })
            .collect();
        LabelMap::new(h, w, labels)
    }

    /// Noise-free frame for a label map. Ignore labels render as black.
    pub fn render(&self, labels: &LabelMap) -> Result<Tensor> {
        let w = labels.width();
        Tensor::from_fn(FRAME_CHANNELS, labels.height(), w, |c, y, x| {
            let l = labels.get(y, x);
            if (l as usize) < self.colors.len() {
                self.colors[l as usize][c]
            } else {
                0.0
            }
        })
    }
}

/// Where a generated sequence came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub generator: String,
    pub seed: Option<u64>,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub frames: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
    pub n_classes: usize,
    pub provenance: Provenance,
}

impl LabeledSequence {
    pub fn new(
        frames: Vec<Tensor>,
        labels: Vec<LabelMap>,
        n_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if frames.len() != labels.len() {
            return Err(shape_err!(
                "{} frames but {} label maps",
                frames.len(),
                labels.len()
            ));
        }
        for (i, (f, l)) in frames.iter().zip(&labels).enumerate() {
            if (f.height(), f.width()) != l.dims() {
                return Err(shape_err!(
                    "frame {i} is {}x{} but its labels are {:?}",
                    f.height(),
                    f.width(),
                    l.dims()
                ));
            }
            if f.dims() != frames[0].dims() {
                return Err(shape_err!(
                    "frame {i} shape {:?} differs from frame 0",
                    f.dims()
                ));
            }
            l.validate(n_classes)?;
        }
        Ok(Self {
            frames,
            labels,
            n_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Horizontal,
    Vertical,
    /// Horizontal for landscape or square sources, vertical for portrait.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceSpec {
    pub crop_height: usize,
    pub crop_width: usize,
    /// Pixels per frame along the motion axis.
    pub displacement: usize,
    pub n_frames: usize,
    pub orientation: Orientation,
}

impl SequenceSpec {
    /// Toy-scale default: six 32x32 frames, 4 px per frame.
    pub fn toy(displacement: usize) -> Self {
        Self {
            crop_height: 32,
            crop_width: 32,
            displacement,
            n_frames: 6,
            orientation: Orientation::Auto,
        }
    }
}

/// Crops frame `t` at offset `t * displacement` along the motion axis; the
/// other axis is centred.
pub fn generate_translated_sequence(
    image: &Tensor,
    labels: &LabelMap,
    n_classes: usize,
    spec: &SequenceSpec,
) -> Result<LabeledSequence> {
    if (image.height(), image.width()) != labels.dims() {
        return Err(shape_err!(
            "source image {}x{} vs labels {:?}",
            image.height(),
            image.width(),
            labels.dims()
        ));
    }
    if spec.n_frames == 0 || spec.crop_height == 0 || spec.crop_width == 0 {
        return Err(invalid!(
            "sequence needs at least one frame and a non-empty crop"
        ));
    }
    let (src_h, src_w) = labels.dims();
    let horizontal = match spec.orientation {
        Orientation::Horizontal => true,
        Orientation::Vertical => false,
        Orientation::Auto => src_w >= src_h,
    };
    let (axis_len, crop_len, cross_len, cross_crop) = if horizontal {
        (src_w, spec.crop_width, src_h, spec.crop_height)
    } else {
        (src_h, spec.crop_height, src_w, spec.crop_width)
    };
    if cross_crop > cross_len || crop_len > axis_len {
        return Err(invalid!(
            "crop {}x{} does not fit the {src_h}x{src_w} source",
            spec.crop_height,
            spec.crop_width
        ));
    }
    let travel = (spec.n_frames - 1) * spec.displacement;
    if travel + crop_len > axis_len {
        let max_frames = (axis_len - crop_len) / spec.displacement + 1;
        return Err(invalid!(
            "crop window leaves the source: (n_frames - 1) * displacement + crop = {} > {axis_len}; at most {max_frames} frames fit at displacement {}",
            travel + crop_len,
            spec.displacement
        ));
    }
    let cross = (cross_len - cross_crop) / 2;
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut maps = Vec::with_capacity(spec.n_frames);
    for t in 0..spec.n_frames {
        let along = t * spec.displacement;
        let (top, left) = if horizontal {
            (cross, along)
        } else {
            (along, cross)
        };
        frames.push(image.crop(top, left, spec.crop_height, spec.crop_width)?);
        maps.push(labels.crop(top, left, spec.crop_height, spec.crop_width)?);
    }
    let mut params = BTreeMap::new();
    params.insert("displacement".to_string(), format!("{}", spec.displacement));
    params.insert(
        "crop".to_string(),
        format!("{}x{}", spec.crop_height, spec.crop_width),
    );
    params.insert(
        "axis".to_string(),
        (if horizontal { "horizontal" } else { "vertical" }).to_string(),
    );
    let provenance = Provenance {
        generator: "translated".to_string(),
        seed: None,
        params,
    };
    LabeledSequence::new(frames, maps, n_classes, provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    /// Shape half-extent (rectangles) or radius (disks) range, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Per-axis speed magnitude range in pixels per frame, inclusive.
    pub min_speed: usize,
    pub max_speed: usize,
    pub n_frames: usize,
    /// Uniform per-channel noise amplitude; rendered values are clamped to [0, 1].
    pub noise: f32,
}

/// Default per-channel noise amplitude of toy frames. Heavy enough that no
/// frame is flat and single-pixel decoding is unreliable, while colours
/// remain separable after local averaging.
pub const TOY_NOISE: f32 = 0.7;

impl SceneParams {
    pub fn toy(n_frames: usize) -> Self {
        Self {
            n_classes: 5,
            height: 32,
            width: 32,
            n_shapes: 3,
            min_size: 3,
            max_size: 8,
            min_speed: 3,
            max_speed: 6,
            n_frames,
            noise: TOY_NOISE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > MAX_CLASSES {
            return Err(invalid!(
                "scene needs 2..={MAX_CLASSES} classes, got {}",
                self.n_classes
            ));
        }
        if self.height == 0 || self.width == 0 || self.n_frames == 0 {
            return Err(invalid!("scene dims and frame count must be positive"));
        }
        if self.n_shapes == 0 {
            return Err(invalid!("scene needs at least one shape"));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(invalid!(
                "shape size range {}..={} is invalid",
                self.min_size,
                self.max_size
            ));
        }
        if self.min_speed > self.max_speed {
            return Err(invalid!(
                "speed range {}..={} is invalid",
                self.min_speed,
                self.max_speed
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid!("noise amplitude must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One moving shape. Positions follow `start + velocity * t`, reflected at
/// the frame borders.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: Label,
    pub size: usize,
    pub start: (i64, i64),
    pub velocity: (i64, i64),
}

impl Shape {
    pub fn center_at(&self, t: usize, height: usize, width: usize) -> (i64, i64) {
        (
            reflect(self.start.0 + self.velocity.0 * t as i64, height),
            reflect(self.start.1 + self.velocity.1 * t as i64, width),
        )
    }

    pub fn covers(&self, center: (i64, i64), y: i64, x: i64) -> bool {
        let (dy, dx) = (y - center.0, x - center.1);
        let s = self.size as i64;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= s && dx.abs() <= s,
            ShapeKind::Disk => dy * dy + dx * dx <= s * s,
        }
    }
}

/// Triangle-wave reflection of an unbounded coordinate into `0..len`.
fn reflect(pos: i64, len: usize) -> i64 {
    let span = len as i64 - 1;
    if span <= 0 {
        return 0;
    }
    let m = pos.rem_euclid(2 * span);
    if m <= span {
        m
    } else {
        2 * span - m
    }
}

/// Draws the shapes of a scene from `seed` (stream 0 of ChaCha8).
pub fn sample_shapes(seed: u64, params: &SceneParams) -> Result<Vec<Shape>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = (0..params.n_shapes)
        .map(|_| {
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Disk
            };
            let class = rng.gen_range(1..params.n_classes) as Label;
            let size = rng.gen_range(params.min_size..=params.max_size);
            let start = (
                rng.gen_range(0..params.height as i64),
                rng.gen_range(0..params.width as i64),
            );
            let mut speed = || {
                let mag = rng.gen_range(params.min_speed..=params.max_speed) as i64;
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            };
            let velocity = (speed(), speed());
            Shape {
                kind,
                class,
                size,
                start,
                velocity,
            }
        })
        .collect();
    Ok(shapes)
}

/// Exact labels of the scene at frame `t`; later shapes occlude earlier ones.
pub fn render_labels(shapes: &[Shape], t: usize, height: usize, width: usize) -> LabelMap {
    let mut labels = LabelMap::filled(height, width, 0);
    for shape in shapes {
        let c = shape.center_at(t, height, width);
        let s = shape.size as i64;
        let y0 = (c.0 - s).max(0);
        let y1 = (c.0 + s).min(height as i64 - 1);
        let x0 = (c.1 - s).max(0);
        let x1 = (c.1 + s).min(width as i64 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if shape.covers(c, y, x) {
                    labels.set(y as usize, x as usize, shape.class);
                }
            }
        }
    }
    labels
}

/// Palette colours plus uniform noise drawn from stream `t + 1` of the seed.
pub fn render_frame(
    palette: &Palette,
    labels: &LabelMap,
    seed: u64,
    t: usize,
    noise: f32,
) -> Result<Tensor> {
    let clean = palette.render(labels)?;
    if noise == 0.0 {
        return Ok(clean);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    let data = clean
        .data()
        .iter()
        .map(|&v| (v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(clean.channels(), clean.height(), clean.width(), data)
}

/// Moving-shape scene with exact labels, a pure function of `(seed, params)`.
pub fn generate_procedural_scene(seed: u64, params: &SceneParams) -> Result<LabeledSequence> {
    let shapes = sample_shapes(seed, params)?;
    let palette = Palette::new(params.n_classes)?;
    let mut frames = Vec::with_capacity(params.n_frames);
    let mut labels = Vec::with_capacity(params.n_frames);
    for t in 0..params.n_frames {
        let l = render_labels(&shapes, t, params.height, params.width);
        frames.push(render_frame(&palette, &l, seed, t, params.noise)?);
        labels.push(l);
    }
    let mut p = BTreeMap::new();
    p.insert(
        "dims".to_string(),
        format!("{}x{}", params.height, params.width),
    );
    p.insert("shapes".to_string(), format!("{}", params.n_shapes));
    p.insert(
        "size".to_string(),
        format!("{}..={}", params.min_size, params.max_size),
    );
    p.insert(
        "speed".to_string(),
        format!("{}..={}", params.min_speed, params.max_speed),
    );
    p.insert("noise".to_string(), format!("{}", params.noise));
    let provenance = Provenance {
        generator: "procedural".to_string(),
        seed: Some(seed),
        params: p,
    };
    LabeledSequence::new(frames, labels, params.n_classes, provenance)
}

/// A static source image for translated sequences: the first frame of a
/// procedural scene at the requested size.
pub fn procedural_source(seed: u64, params: &SceneParams) -> Result<(Tensor, LabelMap)> {
    let single = SceneParams {
        n_frames: 1,
        ..params.clone()
    };
    let mut seq = generate_procedural_scene(seed, &single)?;
    Ok((seq.frames.remove(0), seq.labels.remove(0)))
}

/// Toy-scale source defaults: 64x96 with eight shapes of mixed sizes.
pub fn toy_source_params(n_classes: usize) -> SceneParams {
    SceneParams {
        n_classes,
        height: 64,
        width: 96,
        n_shapes: 8,
        min_size: 2,
        max_size: 12,
        min_speed: 0,
        max_speed: 0,
        n_frames: 1,
        noise: TOY_NOISE,
    }
}

/// Labels per class, used by tests and summaries.
pub fn class_histogram(labels: &LabelMap, n_classes: usize) -> Vec<usize> {
    let mut hist = vec![0; n_classes];
    for &l in labels.labels() {
        if (l as usize) < n_classes {
            hist[l as usize] += 1;
        }
    }
    hist
}
