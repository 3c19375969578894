//! Clocks and the generalized clockwork state machine.
//!
//! Every module `m` holds hidden state and owns three clocks. One step is
//!
//! ```text
//! y_H[m] <- f_T( C_H[m] ? f_H(y_H)[m] : -  (+)  C_I[m] ? f_I(x)[m] : - )
//! y_O[m] <- C_O[m] ? f_O(f_H(y_H)[m]) : blocked
//! ```
//!
//! where absent terms are left out rather than multiplied by zero. A module
//! for which neither term is present keeps its previous state bit for bit.
//! Staged (clock FCN) modules select: the input clock computes from the
//! current frame and the hidden clock persists the cache. Both firing at
//! once is a configuration error.
//!
//! Step 0 computes every module from the input regardless of its clocks, so
//! no output ever reads an uninitialized cache.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{config_err, invalid, shape_err, Result};
use crate::metrics::score_map_distance;
use crate::stagenet::{fuse_partial, StageCache, StageModel};
use crate::tensor::{argmax_channels, relu, LabelMap, Tensor};

/// Largest hidden size accepted by the recurrent presets.
pub const MAX_RECURRENT_DIM: usize = 64;

/// A boolean gate over timesteps.
#[derive(Debug, Clone, PartialEq)]
pub enum Clock {
    Always,
    /// Fires iff `(t - phase) mod rate == 0`.
    Modulo {
        rate: usize,
        phase: usize,
    },
    /// Fires iff the difference signal of `source_stage` strictly exceeds
    /// `theta`.
    Threshold {
        theta: f64,
        source_stage: usize,
    },
    /// Fires at the listed timesteps.
    External(Vec<bool>),
    /// Complement of the inner clock.
    Counter(Box<Clock>),
}

impl Clock {
    pub fn every(rate: usize) -> Self {
        Clock::Modulo { rate, phase: 0 }
    }

    pub fn counter(&self) -> Self {
        Clock::Counter(Box::new(self.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Clock::Always | Clock::External(_) => Ok(()),
            Clock::Modulo { rate, .. } if *rate == 0 => Err(invalid!("clock rate must be >= 1")),
            Clock::Modulo { .. } => Ok(()),
            Clock::Threshold { theta, .. } if !(0.0..=1.0).contains(theta) => {
                Err(invalid!("threshold {theta} outside [0, 1]"))
            }
            Clock::Threshold { .. } => Ok(()),
            Clock::Counter(inner) => inner.validate(),
        }
    }

    /// Stage whose difference signal drives this clock, if any.
    pub fn source_stage(&self) -> Option<usize> {
        match self {
            Clock::Threshold { source_stage, .. } => Some(*source_stage),
            Clock::Counter(inner) => inner.source_stage(),
            _ => None,
        }
    }
}

/// Evaluates `clock` at timestep `t`. Threshold clocks need a signal in
/// `[0, 1]`; other clocks ignore it.
pub fn clock_fires(clock: &Clock, t: usize, signal: Option<f64>) -> Result<bool> {
    match clock {
        Clock::Always => Ok(true),
        Clock::Modulo { rate, phase } => {
            if *rate == 0 {
                return Err(invalid!("clock rate must be >= 1"));
            }
            Ok((t as i128 - *phase as i128).rem_euclid(*rate as i128) == 0)
        }
        Clock::Threshold { theta, .. } => {
            let s = signal.ok_or_else(|| invalid!("threshold clock queried without a signal"))?;
            if !(0.0..=1.0).contains(&s) {
                return Err(invalid!("difference signal {s} outside [0, 1]"));
            }
            Ok(s > *theta)
        }
        Clock::External(mask) => mask
            .get(t)
            .copied()
            .ok_or_else(|| invalid!("external clock has {} steps, queried at {t}", mask.len())),
        Clock::Counter(inner) => clock_fires(inner, t, signal).map(|fires| !fires),
    }
}

/// Row-major dense matrix for the recurrent presets.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| f32::from(i == j))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rows `rows` of `self * v`.
    fn mul_rows(&self, rows: Range<usize>, v: &[f32]) -> Vec<f32> {
        rows.map(|i| {
            self.data[i * self.cols..(i + 1) * self.cols]
                .iter()
                .zip(v)
                .fold(0.0f32, |acc, (w, x)| acc + w * x)
        })
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply_scalar(self, v: f32) -> f32 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => libm::tanhf(v),
            Activation::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
        }
    }

    fn apply_tensor(self, t: &Tensor) -> Tensor {
        match self {
            Activation::Identity => t.clone(),
            Activation::Relu => relu(t),
            Activation::Tanh => {
                let data = t.data().iter().map(|&v| libm::tanhf(v)).collect();
                Tensor::new(t.channels(), t.height(), t.width(), data)
                    .expect("tanh keeps values finite")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputFn {
    /// `W_I x` over the whole hidden vector.
    Linear(Matrix),
    /// Composition of the module's stages, fed by the previous module.
    Compose,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HiddenFn {
    Linear(Matrix),
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Srn,
    ClockRn,
    ClockFcn,
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Srn => "srn",
            Preset::ClockRn => "clockrn",
            Preset::ClockFcn => "clockfcn",
            Preset::Custom => "custom",
        }
    }
}

/// What a threshold signal compares the source stage's current labels to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiffReference {
    /// The source labels at the previous step.
    #[default]
    PreviousFrame,
    /// The source labels at the gated module's last update.
    LastUpdate,
}

/// How a staged module receives its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Routing {
    /// From the previous module's features after this step's update.
    #[default]
    Sequential,
    /// From the previous module's features as of the previous step, so
    /// module `m` sees the frame from `m` steps earlier.
    Pipelined,
}

/// Contiguous stage ranges forming the modules of a staged network,
/// covering stages `0..covered()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageGroups {
    ranges: Vec<Range<usize>>,
}

impl StageGroups {
    pub fn new(ranges: Vec<Range<usize>>, stage_count: usize) -> Result<Self> {
        if ranges.is_empty() {
            return Err(invalid!("at least one stage group required"));
        }
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(invalid!(
                    "stage groups {ranges:?} are not contiguous non-empty ranges from 0"
                ));
            }
            next = r.end;
        }
        if next > stage_count {
            return Err(invalid!(
                "stage groups reach stage {next}, network has {stage_count}"
            ));
        }
        Ok(Self { ranges })
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            ranges: (0..n).map(|k| k..k + 1).collect(),
        }
    }

    /// Two modules over a 3-stage network: the first two stages run as one.
    pub fn merged_two_stage() -> Self {
        Self {
            ranges: vec![0..2, 2..3],
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn covered(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn group_of(&self, stage: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&stage))
    }
}

/// Module layout and the data each module carries.
#[derive(Clone)]
pub enum Layout<'m> {
    /// Hidden vector of size `dim` split into contiguous module slices.
    Vector {
        input_dim: usize,
        modules: Vec<Range<usize>>,
    },
    /// Stage groups of a staged network.
    Staged {
        model: &'m dyn StageModel,
        groups: StageGroups,
        routing: Routing,
    },
}

impl core::fmt::Debug for Layout<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Layout::Vector { input_dim, modules } => f
                .debug_struct("Vector")
                .field("input_dim", input_dim)
                .field("modules", modules)
                .finish(),
            Layout::Staged {
                model,
                groups,
                routing,
            } => f
                .debug_struct("Staged")
                .field("stages", &model.stage_count())
                .field("groups", groups)
                .field("routing", routing)
                .finish(),
        }
    }
}

impl Layout<'_> {
    pub fn module_count(&self) -> usize {
        match self {
            Layout::Vector { modules, .. } => modules.len(),
            Layout::Staged { groups, .. } => groups.len(),
        }
    }
}

/// The four functions and three per-module clocks of one clockwork network.
#[derive(Debug, Clone)]
pub struct ClockworkConfig<'m> {
    preset: Preset,
    pub f_i: InputFn,
    pub f_h: HiddenFn,
    pub f_o: Activation,
    pub f_t: Activation,
    pub c_i: Vec<Clock>,
    pub c_h: Vec<Clock>,
    pub c_o: Vec<Clock>,
    pub layout: Layout<'m>,
    pub diff_reference: DiffReference,
}

impl<'m> ClockworkConfig<'m> {
    /// A custom configuration with every slot given explicitly.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        f_i: InputFn,
        f_h: HiddenFn,
        f_o: Activation,
        f_t: Activation,
        c_i: Vec<Clock>,
        c_h: Vec<Clock>,
        c_o: Vec<Clock>,
        layout: Layout<'m>,
    ) -> Result<Self> {
        let config = Self {
            preset: Preset::Custom,
            f_i,
            f_h,
            f_o,
            f_t,
            c_i,
            c_h,
            c_o,
            layout,
            diff_reference: DiffReference::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn preset(&self) -> Preset {
        self.preset
    }

    pub fn module_count(&self) -> usize {
        self.layout.module_count()
    }

    pub fn with_diff_reference(mut self, reference: DiffReference) -> Self {
        self.diff_reference = reference;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.module_count();
        if n == 0 {
            return Err(config_err!("no modules"));
        }
        for (name, clocks) in [("C_I", &self.c_i), ("C_H", &self.c_h), ("C_O", &self.c_o)] {
            if clocks.len() != n {
                return Err(config_err!(
                    "{name} has {} clocks for {n} modules",
                    clocks.len()
                ));
            }
            clocks.iter().try_for_each(Clock::validate)?;
        }
        match &self.layout {
            Layout::Vector { input_dim, modules } => {
                let dim = modules.last().map_or(0, |r| r.end);
                let mut next = 0;
                for r in modules {
                    if r.start != next || r.end <= r.start {
                        return Err(config_err!(
                            "modules {modules:?} do not partition the hidden vector"
                        ));
                    }
                    next = r.end;
                }
                match &self.f_i {
                    InputFn::Linear(w) if w.rows == dim && w.cols == *input_dim => {}
                    InputFn::Linear(w) => {
                        return Err(config_err!(
                            "W_I is {}x{}, expected {dim}x{input_dim}",
                            w.rows,
                            w.cols
                        ))
                    }
                    InputFn::Compose => {
                        return Err(config_err!("stage composition needs a staged layout"))
                    }
                }
                if let HiddenFn::Linear(w) = &self.f_h {
                    if w.rows != dim || w.cols != dim {
                        return Err(config_err!(
                            "W_H is {}x{}, expected {dim}x{dim}",
                            w.rows,
                            w.cols
                        ));
                    }
                }
                let all = self.c_i.iter().chain(&self.c_h).chain(&self.c_o);
                if all.clone().any(|c| c.source_stage().is_some()) {
                    return Err(config_err!("threshold clocks need a staged layout"));
                }
            }
            Layout::Staged { model, groups, .. } => {
                if groups.covered() > model.stage_count() {
                    return Err(config_err!(
                        "groups cover {} stages of {}",
                        groups.covered(),
                        model.stage_count()
                    ));
                }
                if self.f_i != InputFn::Compose {
                    return Err(config_err!(
                        "staged modules take their input by stage composition"
                    ));
                }
                if self.f_h != HiddenFn::Identity || self.f_t != Activation::Identity {
                    return Err(config_err!("staged modules persist state by identity"));
                }
                for (m, clocks) in [&self.c_i, &self.c_h, &self.c_o]
                    .iter()
                    .flat_map(|c| c.iter().enumerate())
                {
                    if let Some(s) = clocks.source_stage() {
                        match groups.group_of(s) {
                            Some(g) if g < m => {}
                            _ => {
                                return Err(config_err!(
                                    "module {m} is gated on stage {s}, which is not in an earlier module"
                                ))
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Standard recurrent network: one module, all clocks always on.
pub fn make_srn_config(dim: usize, w_i: Matrix, w_h: Matrix) -> Result<ClockworkConfig<'static>> {
    if dim == 0 || dim > MAX_RECURRENT_DIM {
        return Err(invalid!(
            "recurrent dim must be in 1..={MAX_RECURRENT_DIM}, got {dim}"
        ));
    }
    let input_dim = w_i.cols;
    let config = ClockworkConfig {
        preset: Preset::Srn,
        f_i: InputFn::Linear(w_i),
        f_h: HiddenFn::Linear(w_h),
        f_o: Activation::Tanh,
        f_t: Activation::Tanh,
        c_i: vec![Clock::Always],
        c_h: vec![Clock::Always],
        c_o: vec![Clock::Always],
        layout: Layout::Vector {
            input_dim,
            modules: vec![0..dim],
        },
        diff_reference: DiffReference::default(),
    };
    config.validate()?;
    Ok(config)
}

/// Clockwork RN: `dim` split evenly into one module per rate; each module
/// shares one clock across input, hidden, and output, and reads only itself
/// and slower modules (other `W_H` entries are zeroed).
pub fn make_clockrn_config(
    dim: usize,
    w_i: Matrix,
    w_h: Matrix,
    module_rates: &[usize],
) -> Result<ClockworkConfig<'static>> {
    if dim == 0 || dim > MAX_RECURRENT_DIM {
        return Err(invalid!(
            "recurrent dim must be in 1..={MAX_RECURRENT_DIM}, got {dim}"
        ));
    }
    if module_rates.is_empty() || !dim.is_multiple_of(module_rates.len()) {
        return Err(invalid!(
            "dim {dim} does not split into {} modules",
            module_rates.len()
        ));
    }
    if module_rates.iter().any(|r| !r.is_power_of_two())
        || module_rates.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(invalid!(
            "module rates {module_rates:?} must be strictly increasing powers of two"
        ));
    }
    if w_h.rows != dim || w_h.cols != dim {
        return Err(shape_err!(
            "W_H is {}x{}, expected {dim}x{dim}",
            w_h.rows,
            w_h.cols
        ));
    }
    let width = dim / module_rates.len();
    let modules: Vec<Range<usize>> = (0..module_rates.len())
        .map(|m| m * width..(m + 1) * width)
        .collect();
    let masked = Matrix::from_fn(dim, dim, |i, j| {
        if j / width >= i / width {
            w_h.get(i, j)
        } else {
            0.0
        }
    });
    let clocks: Vec<Clock> = module_rates.iter().map(|&r| Clock::every(r)).collect();
    let input_dim = w_i.cols;
    let config = ClockworkConfig {
        preset: Preset::ClockRn,
        f_i: InputFn::Linear(w_i),
        f_h: HiddenFn::Linear(masked),
        f_o: Activation::Tanh,
        f_t: Activation::Tanh,
        c_i: clocks.clone(),
        c_h: clocks.clone(),
        c_o: clocks,
        layout: Layout::Vector { input_dim, modules },
        diff_reference: DiffReference::default(),
    };
    config.validate()?;
    Ok(config)
}

/// Clock FCN with one module per stage and sequential routing.
pub fn make_clockfcn_config<'m>(
    model: &'m dyn StageModel,
    clocks: Vec<Clock>,
) -> Result<ClockworkConfig<'m>> {
    let groups = StageGroups::singletons(model.stage_count());
    make_clockfcn_grouped(model, groups, clocks, Routing::Sequential)
}

/// Clock FCN over arbitrary stage groups: input clock `C`, hidden clock
/// `C̄`, output clock always on.
pub fn make_clockfcn_grouped<'m>(
    model: &'m dyn StageModel,
    groups: StageGroups,
    clocks: Vec<Clock>,
    routing: Routing,
) -> Result<ClockworkConfig<'m>> {
    let c_h = clocks.iter().map(Clock::counter).collect();
    let c_o = vec![Clock::Always; clocks.len()];
    let config = ClockworkConfig {
        preset: Preset::ClockFcn,
        f_i: InputFn::Compose,
        f_h: HiddenFn::Identity,
        f_o: Activation::Relu,
        f_t: Activation::Identity,
        c_i: clocks,
        c_h,
        c_o,
        layout: Layout::Staged {
            model,
            groups,
            routing,
        },
        diff_reference: DiffReference::default(),
    };
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hidden {
    Vector(Vec<f32>),
    /// One cache per stage; `None` until the stage first executes.
    Stages(Vec<Option<StageCache>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClockworkState {
    t: usize,
    hidden: Hidden,
    last_update: Vec<Option<usize>>,
    /// Source-stage labels at the previous step, per stage.
    prev_labels: Vec<Option<LabelMap>>,
    /// Source-stage labels at each module's last update, per module.
    update_labels: Vec<Option<LabelMap>>,
}

impl ClockworkState {
    /// Zero hidden state at `t = 0`.
    pub fn new(config: &ClockworkConfig<'_>) -> Self {
        let n = config.module_count();
        let hidden = match &config.layout {
            Layout::Vector { modules, .. } => {
                Hidden::Vector(vec![0.0; modules.last().map_or(0, |r| r.end)])
            }
            Layout::Staged { model, .. } => Hidden::Stages(vec![None; model.stage_count()]),
        };
        let stages = match &config.layout {
            Layout::Staged { model, .. } => model.stage_count(),
            Layout::Vector { .. } => 0,
        };
        Self {
            t: 0,
            hidden,
            last_update: vec![None; n],
            prev_labels: vec![None; stages],
            update_labels: vec![None; n],
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn hidden(&self) -> &Hidden {
        &self.hidden
    }

    pub fn last_update(&self, module: usize) -> Option<usize> {
        self.last_update.get(module).copied().flatten()
    }

    pub fn stage_cache(&self, stage: usize) -> Option<&StageCache> {
        match &self.hidden {
            Hidden::Stages(c) => c.get(stage).and_then(Option::as_ref),
            Hidden::Vector(_) => None,
        }
    }

    /// `f_O(f_H(y_H))` for one module, regardless of its output clock.
    pub fn module_output(
        &self,
        config: &ClockworkConfig<'_>,
        module: usize,
    ) -> Result<ModuleValue> {
        match (&self.hidden, &config.layout) {
            (Hidden::Vector(y), Layout::Vector { modules, .. }) => {
                let rows = modules
                    .get(module)
                    .cloned()
                    .ok_or_else(|| invalid!("no module {module}"))?;
                let h = match &config.f_h {
                    HiddenFn::Linear(w) => w.mul_rows(rows, y),
                    HiddenFn::Identity => y[rows].to_vec(),
                };
                Ok(ModuleValue::Vector(
                    h.into_iter().map(|v| config.f_o.apply_scalar(v)).collect(),
                ))
            }
            (Hidden::Stages(caches), Layout::Staged { groups, .. }) => {
                let range = groups
                    .ranges()
                    .get(module)
                    .cloned()
                    .ok_or_else(|| invalid!("no module {module}"))?;
                let cache = caches[range.end - 1]
                    .as_ref()
                    .ok_or_else(|| invalid!("module {module} has no state"))?;
                Ok(ModuleValue::Tensor(
                    config.f_o.apply_tensor(&cache.features),
                ))
            }
            _ => Err(config_err!("state does not match the configuration layout")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModuleValue {
    Vector(Vec<f32>),
    Tensor(Tensor),
}

/// Input of one step.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a> {
    Vector(&'a [f32]),
    Frame(&'a Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepValue {
    /// Per-module outputs; `None` where the output clock is off.
    Vector(Vec<Option<Vec<f32>>>),
    /// Skip fusion of the scores of modules whose output clock fired.
    Fused(Option<Tensor>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Timestep the output belongs to.
    pub t: usize,
    /// Whether each module computed from the input this step.
    pub executed: Vec<bool>,
    /// Difference signal fed to each module's clocks, when one was needed.
    pub signals: Vec<Option<f64>>,
    pub value: StepValue,
}

/// One step of the clockwork equations; returns the advanced state.
pub fn clockwork_step(
    config: &ClockworkConfig<'_>,
    state: ClockworkState,
    input: StepInput<'_>,
) -> Result<(ClockworkState, StepOutput)> {
    match (&config.layout, input) {
        (Layout::Vector { input_dim, modules }, StepInput::Vector(x)) => {
            if x.len() != *input_dim {
                return Err(shape_err!(
                    "input has {} values, expected {input_dim}",
                    x.len()
                ));
            }
            vector_step(config, modules, state, x)
        }
        (
            Layout::Staged {
                model,
                groups,
                routing,
            },
            StepInput::Frame(frame),
        ) => staged_step(config, *model, groups, *routing, state, frame),
        _ => Err(shape_err!(
            "step input kind does not match the configuration layout"
        )),
    }
}

fn vector_step(
    config: &ClockworkConfig<'_>,
    modules: &[Range<usize>],
    mut state: ClockworkState,
    x: &[f32],
) -> Result<(ClockworkState, StepOutput)> {
    let t = state.t;
    let Hidden::Vector(prev) = &state.hidden else {
        return Err(config_err!("state does not match the configuration layout"));
    };
    let dim = modules.last().map_or(0, |r| r.end);
    if prev.len() != dim || state.last_update.len() != modules.len() {
        return Err(shape_err!(
            "state has {} hidden values, configuration needs {dim}",
            prev.len()
        ));
    }
    let mut next = prev.clone();
    let mut executed = vec![false; modules.len()];
    for (m, rows) in modules.iter().enumerate() {
        let fire_i = t == 0 || clock_fires(&config.c_i[m], t, None)?;
        let fire_h = clock_fires(&config.c_h[m], t, None)?;
        if !fire_i && !fire_h {
            continue;
        }
        let hidden_term = fire_h.then(|| match &config.f_h {
            HiddenFn::Linear(w) => w.mul_rows(rows.clone(), prev),
            HiddenFn::Identity => prev[rows.clone()].to_vec(),
        });
        let input_term = fire_i.then(|| match &config.f_i {
            InputFn::Linear(w) => w.mul_rows(rows.clone(), x),
            InputFn::Compose => unreachable!("validated"),
        });
        let pre: Vec<f32> = match (hidden_term, input_term) {
            (Some(h), Some(i)) => h.iter().zip(&i).map(|(a, b)| a + b).collect(),
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => unreachable!(),
        };
        for (slot, v) in next[rows.clone()].iter_mut().zip(pre) {
            *slot = config.f_t.apply_scalar(v);
        }
        if fire_i {
            executed[m] = true;
            state.last_update[m] = Some(t);
        }
    }
    state.hidden = Hidden::Vector(next);
    let mut outputs = Vec::with_capacity(modules.len());
    for m in 0..modules.len() {
        outputs.push(if clock_fires(&config.c_o[m], t, None)? {
            match state.module_output(config, m)? {
                ModuleValue::Vector(v) => Some(v),
                ModuleValue::Tensor(_) => unreachable!(),
            }
        } else {
            None
        });
    }
    state.t += 1;
    let out = StepOutput {
        t,
        executed,
        signals: vec![None; modules.len()],
        value: StepValue::Vector(outputs),
    };
    Ok((state, out))
}

fn staged_step(
    config: &ClockworkConfig<'_>,
    model: &dyn StageModel,
    groups: &StageGroups,
    routing: Routing,
    mut state: ClockworkState,
    frame: &Tensor,
) -> Result<(ClockworkState, StepOutput)> {
    let t = state.t;
    let n_modules = groups.len();
    let Hidden::Stages(caches) = &mut state.hidden else {
        return Err(config_err!("state does not match the configuration layout"));
    };
    if caches.len() != model.stage_count() || state.last_update.len() != n_modules {
        return Err(shape_err!(
            "state holds {} stage caches for a {}-stage model",
            caches.len(),
            model.stage_count()
        ));
    }
    if frame.channels() != model.input_channels() {
        return Err(shape_err!(
            "frame has {} channels, model expects {}",
            frame.channels(),
            model.input_channels()
        ));
    }
    // Pipelined modules read the previous step's features of the module
    // before them; snapshot those before any update.
    let delayed: Vec<Option<Tensor>> = if routing == Routing::Pipelined && t > 0 {
        groups
            .ranges()
            .iter()
            .map(|r| match r.start {
                0 => Ok(None),
                s => caches[s - 1]
                    .as_ref()
                    .map(|c| Some(c.features.clone()))
                    .ok_or_else(|| invalid!("stage {} has no cached features", s - 1)),
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; n_modules]
    };

    let mut executed = vec![false; n_modules];
    let mut signals = vec![None; n_modules];
    let mut current_labels: Vec<Option<LabelMap>> = vec![None; model.stage_count()];
    let needs_labels = |s: usize| {
        config
            .c_i
            .iter()
            .chain(&config.c_h)
            .chain(&config.c_o)
            .any(|c| c.source_stage() == Some(s))
    };

    for (m, range) in groups.ranges().iter().enumerate() {
        let source = config.c_i[m]
            .source_stage()
            .or(config.c_h[m].source_stage());
        let signal = match source {
            Some(s) if t > 0 => {
                let cur = current_labels[s]
                    .as_ref()
                    .ok_or_else(|| invalid!("stage {s} labels unavailable"))?;
                let reference = match config.diff_reference {
                    DiffReference::PreviousFrame => state.prev_labels[s].as_ref(),
                    DiffReference::LastUpdate => state.update_labels[m].as_ref(),
                }
                .ok_or_else(|| invalid!("stage {s} has no reference labels"))?;
                Some(score_map_distance(cur, reference)?)
            }
            _ => None,
        };
        signals[m] = signal;
        let (fire_i, fire_h) = if t == 0 {
            (true, false)
        } else {
            (
                clock_fires(&config.c_i[m], t, signal)?,
                clock_fires(&config.c_h[m], t, signal)?,
            )
        };
        if fire_i && fire_h {
            return Err(config_err!(
                "module {m} has both input and hidden clocks firing at step {t}"
            ));
        }
        if fire_i {
            let mut input = match (&delayed[m], range.start) {
                (Some(f), _) => f.clone(),
                (None, 0) => frame.clone(),
                (None, s) => caches[s - 1]
                    .as_ref()
                    .map(|c| c.features.clone())
                    .ok_or_else(|| invalid!("stage {} has no cached features", s - 1))?,
            };
            for k in range.clone() {
                let out = model.forward_stage(k, &input)?;
                input = out.features.clone();
                caches[k] = Some(StageCache {
                    features: out.features,
                    score: out.score,
                    last_update: t,
                });
            }
            executed[m] = true;
            state.last_update[m] = Some(t);
        }
        for k in range.clone() {
            if needs_labels(k) {
                let cache = caches[k]
                    .as_ref()
                    .ok_or_else(|| invalid!("stage {k} has no cache"))?;
                current_labels[k] = Some(argmax_channels(&cache.score)?);
            }
        }
        if fire_i {
            if let Some(s) = source {
                state.update_labels[m] = current_labels[s].clone();
            }
        }
    }

    let mut fused_inputs: Vec<(usize, &Tensor)> = Vec::new();
    for (m, range) in groups.ranges().iter().enumerate() {
        if clock_fires(&config.c_o[m], t, signals[m])? {
            for k in range.clone() {
                let cache = caches[k]
                    .as_ref()
                    .ok_or_else(|| invalid!("stage {k} has no cache"))?;
                fused_inputs.push((k, &cache.score));
            }
        }
    }
    let fused = if fused_inputs.is_empty() {
        None
    } else {
        Some(fuse_partial(
            model,
            &fused_inputs,
            (frame.height(), frame.width()),
        )?)
    };
    for (k, labels) in current_labels.into_iter().enumerate() {
        if labels.is_some() {
            state.prev_labels[k] = labels;
        }
    }
    state.t += 1;
    Ok((
        state,
        StepOutput {
            t,
            executed,
            signals,
            value: StepValue::Fused(fused),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_procedural_scene, SceneParams};
    use crate::stagenet::{full_forward, init_weights, make_procedural_segmenter, ArchSpec};
    use proptest::prelude::*;

    fn fused(out: &StepOutput) -> &Tensor {
        match &out.value {
            StepValue::Fused(Some(t)) => t,
            other => panic!("expected fused output, got {other:?}"),
        }
    }

    #[test]
    fn clock_examples() {
        assert!(clock_fires(&Clock::Always, 17, None).unwrap());
        assert!(!clock_fires(&Clock::every(2), 3, None).unwrap());
        assert!(clock_fires(&Clock::Modulo { rate: 3, phase: 1 }, 4, None).unwrap());
        assert!(!clock_fires(&Clock::Modulo { rate: 3, phase: 1 }, 0, None).unwrap());
        let th = Clock::Threshold {
            theta: 0.25,
            source_stage: 0,
        };
        assert!(clock_fires(&th, 5, Some(0.30)).unwrap());
        assert!(!clock_fires(&th, 5, Some(0.25)).unwrap());
        assert!(clock_fires(&th, 5, None).is_err());
        assert!(clock_fires(&th, 5, Some(1.5)).is_err());
        assert!(clock_fires(&th.counter(), 5, Some(0.25)).unwrap());
        let ext = Clock::External(vec![true, false]);
        assert!(!clock_fires(&ext, 1, None).unwrap());
        assert!(clock_fires(&ext, 2, None).is_err());
        assert!(clock_fires(&Clock::every(0), 0, None).is_err());
    }

    #[test]
    fn theta_one_never_fires() {
        let th = Clock::Threshold {
            theta: 1.0,
            source_stage: 0,
        };
        assert!(!clock_fires(&th, 1, Some(1.0)).unwrap());
    }

    #[test]
    fn srn_hand_evaluation() {
        let cfg = make_srn_config(1, Matrix::identity(1), Matrix::identity(1)).unwrap();
        assert_eq!(cfg.c_i, vec![Clock::Always]);
        assert_eq!(cfg.c_h, vec![Clock::Always]);
        assert_eq!(cfg.c_o, vec![Clock::Always]);
        let state = ClockworkState::new(&cfg);
        let (state, out) = clockwork_step(&cfg, state, StepInput::Vector(&[1.0])).unwrap();
        let Hidden::Vector(y) = state.hidden().clone() else {
            panic!()
        };
        assert!((y[0] - 0.761_594_2).abs() < 1e-6);
        assert_eq!(
            out.value,
            StepValue::Vector(vec![Some(vec![libm::tanhf(y[0])])])
        );
        let (state, _) = clockwork_step(&cfg, state, StepInput::Vector(&[1.0])).unwrap();
        let Hidden::Vector(y2) = state.hidden() else {
            panic!()
        };
        assert_eq!(y2[0], libm::tanhf(y[0] + 1.0));
        assert!(clockwork_step(&cfg, state, StepInput::Vector(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn clockrn_rates_and_mask() {
        let w_i = Matrix::from_fn(6, 2, |i, j| 0.1 * (i + j) as f32);
        let w_h = Matrix::from_fn(6, 6, |_, _| 0.5);
        let cfg = make_clockrn_config(6, w_i.clone(), w_h.clone(), &[1, 2, 4]).unwrap();
        assert_eq!(
            cfg.c_i,
            vec![Clock::every(1), Clock::every(2), Clock::every(4)]
        );
        assert_eq!(cfg.c_i, cfg.c_h);
        assert_eq!(cfg.c_i, cfg.c_o);
        let HiddenFn::Linear(masked) = &cfg.f_h else {
            panic!()
        };
        assert_eq!(masked.get(0, 5), 0.5);
        assert_eq!(masked.get(5, 0), 0.0);
        assert_eq!(masked.get(2, 3), 0.5);
        assert!(make_clockrn_config(6, w_i.clone(), w_h.clone(), &[1, 3, 4]).is_err());
        assert!(make_clockrn_config(6, w_i.clone(), w_h.clone(), &[2, 1, 4]).is_err());
        assert!(make_clockrn_config(6, w_i, w_h, &[1, 2, 4, 8]).is_err());
    }

    #[test]
    fn clockrn_slow_modules_persist() {
        let w_i = Matrix::from_fn(4, 1, |i, _| 0.3 + 0.1 * i as f32);
        let w_h = Matrix::from_fn(4, 4, |i, j| 0.05 * (1 + i + 2 * j) as f32);
        let cfg = make_clockrn_config(4, w_i, w_h, &[1, 2]).unwrap();
        let mut state = ClockworkState::new(&cfg);
        let mut prev = vec![0.0; 4];
        for t in 0..6 {
            let (next, out) =
                clockwork_step(&cfg, state, StepInput::Vector(&[1.0 + t as f32])).unwrap();
            let Hidden::Vector(y) = next.hidden() else {
                panic!()
            };
            assert_eq!(out.executed, vec![true, t % 2 == 0]);
            if t % 2 == 1 {
                assert_eq!(&y[2..], &prev[2..]);
                let StepValue::Vector(v) = &out.value else {
                    panic!()
                };
                assert!(v[1].is_none());
            }
            prev = y.clone();
            state = next;
        }
    }

    #[test]
    fn clockfcn_preset_slots() {
        let seg = make_procedural_segmenter(5, &[2, 4, 8]).unwrap();
        let cfg = make_clockfcn_config(
            &seg,
            vec![Clock::every(1), Clock::every(2), Clock::every(4)],
        )
        .unwrap();
        assert_eq!(cfg.preset(), Preset::ClockFcn);
        assert_eq!(cfg.f_h, HiddenFn::Identity);
        assert_eq!(cfg.f_t, Activation::Identity);
        assert_eq!(cfg.f_o, Activation::Relu);
        assert_eq!(cfg.c_o, vec![Clock::Always; 3]);
        assert_eq!(cfg.c_h[1], Clock::every(2).counter());
        assert!(make_clockfcn_config(&seg, vec![Clock::Always; 2]).is_err());
    }

    #[test]
    fn clockfcn_all_on_matches_full_forward() {
        let net = init_weights(&ArchSpec::toy(5), 0).unwrap();
        let cfg = make_clockfcn_config(&net, vec![Clock::Always; 3]).unwrap();
        let seq = generate_procedural_scene(3, &SceneParams::toy(4)).unwrap();
        let mut state = ClockworkState::new(&cfg);
        for f in &seq.frames {
            let (next, out) = clockwork_step(&cfg, state, StepInput::Frame(f)).unwrap();
            assert_eq!(fused(&out), &full_forward(&net, f).unwrap().fused);
            assert_eq!(out.executed, vec![true; 3]);
            state = next;
        }
    }

    #[test]
    fn clockfcn_off_module_persists_bitwise() {
        let seg = make_procedural_segmenter(5, &[2, 4, 8]).unwrap();
        let cfg = make_clockfcn_config(&seg, vec![Clock::Always, Clock::Always, Clock::every(3)])
            .unwrap();
        let seq = generate_procedural_scene(4, &SceneParams::toy(5)).unwrap();
        let mut state = ClockworkState::new(&cfg);
        for (t, f) in seq.frames.iter().enumerate() {
            let before = state.stage_cache(2).cloned();
            let (next, out) = clockwork_step(&cfg, state, StepInput::Frame(f)).unwrap();
            if t % 3 != 0 {
                assert!(!out.executed[2]);
                assert_eq!(next.stage_cache(2).cloned(), before);
            } else {
                assert_eq!(next.stage_cache(2).unwrap().last_update, t);
            }
            state = next;
        }
        assert_eq!(state.last_update(2), Some(3));
    }

    #[test]
    fn both_selection_clocks_firing_is_rejected() {
        let seg = make_procedural_segmenter(5, &[2, 4]).unwrap();
        let layout = Layout::Staged {
            model: &seg,
            groups: StageGroups::singletons(2),
            routing: Routing::Sequential,
        };
        let cfg = ClockworkConfig::custom(
            InputFn::Compose,
            HiddenFn::Identity,
            Activation::Relu,
            Activation::Identity,
            vec![Clock::Always; 2],
            vec![Clock::Always.counter(), Clock::every(2)],
            vec![Clock::Always; 2],
            layout,
        )
        .unwrap();
        let frame = Tensor::zeros(3, 16, 16);
        let (state, _) =
            clockwork_step(&cfg, ClockworkState::new(&cfg), StepInput::Frame(&frame)).unwrap();
        let (state, _) = clockwork_step(&cfg, state, StepInput::Frame(&frame)).unwrap();
        assert!(matches!(
            clockwork_step(&cfg, state, StepInput::Frame(&frame)),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn threshold_sources_must_precede() {
        let seg = make_procedural_segmenter(5, &[2, 4, 8]).unwrap();
        let th = |s| Clock::Threshold {
            theta: 0.1,
            source_stage: s,
        };
        assert!(make_clockfcn_config(&seg, vec![Clock::Always, Clock::Always, th(0)]).is_ok());
        assert!(make_clockfcn_config(&seg, vec![Clock::Always, Clock::Always, th(2)]).is_err());
        assert!(make_clockfcn_config(&seg, vec![th(0), Clock::Always, Clock::Always]).is_err());
    }

    #[test]
    fn pipelined_routing_delays_each_group() {
        let seg = make_procedural_segmenter(5, &[2, 4, 8]).unwrap();
        let cfg = make_clockfcn_grouped(
            &seg,
            StageGroups::singletons(3),
            vec![Clock::Always; 3],
            Routing::Pipelined,
        )
        .unwrap();
        let seq = generate_procedural_scene(5, &SceneParams::toy(5)).unwrap();
        let mut state = ClockworkState::new(&cfg);
        for f in &seq.frames {
            state = clockwork_step(&cfg, state, StepInput::Frame(f)).unwrap().0;
        }
        let f = &seq.frames;
        let s2 = seg.forward_stage(
            2,
            &seg.forward_stage(1, &seg.forward_stage(0, &f[2]).unwrap().features)
                .unwrap()
                .features,
        );
        assert_eq!(state.stage_cache(2).unwrap().score, s2.unwrap().score);
        let s1 = seg
            .forward_stage(1, &seg.forward_stage(0, &f[3]).unwrap().features)
            .unwrap();
        assert_eq!(state.stage_cache(1).unwrap().score, s1.score);
    }

    #[test]
    fn stage_groups_validation() {
        assert!(StageGroups::new(vec![0..2, 2..3], 3).is_ok());
        assert!(StageGroups::new(vec![0..1], 3).is_ok());
        assert!(StageGroups::new(vec![1..3], 3).is_err());
        assert!(StageGroups::new(vec![0..2, 3..4], 4).is_err());
        assert!(StageGroups::new(vec![0..4], 3).is_err());
        assert_eq!(StageGroups::merged_two_stage().group_of(1), Some(0));
    }

    proptest! {
        #[test]
        fn modulo_rule(rate in 1usize..9, phase in 0usize..9, t in 0usize..200) {
            let fires = clock_fires(&Clock::Modulo { rate, phase }, t, None).unwrap();
            prop_assert_eq!(fires, (t as i64 - phase as i64).rem_euclid(rate as i64) == 0);
        }

        #[test]
        fn exponential_rates_nest(k in 0u32..5, t in 0usize..500) {
            let slow = clock_fires(&Clock::every(1 << (k + 1)), t, None).unwrap();
            let fast = clock_fires(&Clock::every(1 << k), t, None).unwrap();
            prop_assert!(!slow || fast);
        }

        #[test]
        fn all_on_recurrence_is_stateless_composition(
            xs in proptest::collection::vec(-2.0f32..2.0, 1..12),
            wi in -1.0f32..1.0,
            wh in -1.0f32..1.0,
        ) {
            let cfg = make_srn_config(1, Matrix::new(1, 1, vec![wi]).unwrap(), Matrix::new(1, 1, vec![wh]).unwrap()).unwrap();
            let mut state = ClockworkState::new(&cfg);
            let mut y = 0.0f32;
            for x in xs {
                state = clockwork_step(&cfg, state, StepInput::Vector(&[x])).unwrap().0;
                y = libm::tanhf(wh * y + wi * x);
                let Hidden::Vector(h) = state.hidden() else { unreachable!() };
                prop_assert_eq!(h[0], y);
            }
        }

        #[test]
        fn external_clocks_persist_or_compute(mask in proptest::collection::vec(any::<bool>(), 6)) {
            let seg = make_procedural_segmenter(5, &[2, 4]).unwrap();
            let cfg = make_clockfcn_config(&seg, vec![Clock::Always, Clock::External(mask.clone())]).unwrap();
            let seq = generate_procedural_scene(9, &SceneParams::toy(6)).unwrap();
            let mut state = ClockworkState::new(&cfg);
            for (t, f) in seq.frames.iter().enumerate() {
                let before = state.stage_cache(1).cloned();
                let (next, out) = clockwork_step(&cfg, state, StepInput::Frame(f)).unwrap();
                let computed = t == 0 || mask[t];
                prop_assert_eq!(out.executed[1], computed);
                if computed {
                    let direct = full_forward(&seg, f).unwrap();
                    prop_assert_eq!(&next.stage_cache(1).unwrap().score, &direct.stages[1].score);
                } else {
                    prop_assert_eq!(next.stage_cache(1).cloned(), before);
                }
                state = next;
            }
        }
    }
}
