//! Curriculum masking: progressive schedule, Bernoulli choice between random
//! block and time-frequency aware target masks, and context masks carved out
//! of the target complements.
//!
//! Patch indices are raster ordered over a `rows x cols` grid where rows are
//! time and columns are frequency.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Whole-plan retries before a configuration is declared unsatisfiable.
pub const PLAN_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn require_sampleable(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Config(format!(
                "mask sampling needs at least a 2x2 grid, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for GridShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("grid `{s}` is not of the form RxC")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("grid `{s}` is not of the form RxC")))
        };
        Ok(Self::new(parse(r)?, parse(c)?))
    }
}

/// Strictly increasing patch indices into a grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskIndexSet {
    indices: Vec<usize>,
    grid: GridShape,
}

impl MaskIndexSet {
    pub fn new(indices: Vec<usize>, grid: GridShape) -> Result<Self> {
        if indices.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Precondition(
                "mask indices must be strictly increasing".into(),
            ));
        }
        if indices.last().is_some_and(|&i| i >= grid.len()) {
            return Err(Error::Precondition(format!(
                "mask index out of range for grid {grid}"
            )));
        }
        Ok(Self { indices, grid })
    }

    /// Sorts and deduplicates.
    pub fn from_unsorted(mut indices: Vec<usize>, grid: GridShape) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, grid)
    }

    pub fn full(grid: GridShape) -> Self {
        Self {
            indices: (0..grid.len()).collect(),
            grid,
        }
    }

    pub fn empty(grid: GridShape) -> Self {
        Self {
            indices: Vec::new(),
            grid,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn grid(&self) -> GridShape {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn is_disjoint(&self, other: &MaskIndexSet) -> bool {
        !self.indices.iter().any(|&i| other.contains(i))
    }

    /// Membership flags over the whole grid.
    pub fn to_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.grid.len()];
        for &i in &self.indices {
            flags[i] = true;
        }
        flags
    }
}

/// Axis-aligned block of patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl Block {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.h).contains(&row) && (self.left..self.left + self.w).contains(&col)
    }

    pub fn shares_row_or_col(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.h).contains(&row) || (self.left..self.left + self.w).contains(&col)
    }

    fn indices(&self, grid: GridShape) -> impl Iterator<Item = usize> + '_ {
        (self.top..self.top + self.h)
            .flat_map(move |r| (self.left..self.left + self.w).map(move |c| r * grid.cols + c))
    }
}

/// Binary grid raster; `true` cells are acceptable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    grid: GridShape,
    cells: Vec<bool>,
}

impl Raster {
    pub fn ones(grid: GridShape) -> Self {
        Self {
            grid,
            cells: vec![true; grid.len()],
        }
    }

    /// Everything except the block.
    pub fn block_complement(grid: GridShape, block: &Block) -> Self {
        let mut r = Self::ones(grid);
        for i in block.indices(grid) {
            r.cells[i] = false;
        }
        r
    }

    /// Everything except the block's rows and columns (cross-shaped removal).
    pub fn tf_complement(grid: GridShape, block: &Block) -> Self {
        let mut r = Self::ones(grid);
        for (i, cell) in r.cells.iter_mut().enumerate() {
            if block.shares_row_or_col(i / grid.cols, i % grid.cols) {
                *cell = false;
            }
        }
        r
    }

    pub fn from_cells(grid: GridShape, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid.len() {
            return Err(Error::Shape(format!(
                "raster of {} cells for grid {grid}",
                cells.len()
            )));
        }
        Ok(Self { grid, cells })
    }

    pub fn allows(&self, index: usize) -> bool {
        self.cells[index]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count_zeros(&self) -> usize {
        self.cells.iter().filter(|&&c| !c).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_targets_block: usize,
    pub block_scale: (f64, f64),
    pub block_aspect: (f64, f64),
    pub n_targets_tf: usize,
    pub tf_scale: (f64, f64),
    pub context_scale: (f64, f64),
    pub context_aspect: f64,
    pub min_ratio: f64,
    /// Placement attempts per relaxation level.
    pub max_tries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_targets_block: 4,
            block_scale: (0.15, 0.20),
            block_aspect: (0.75, 1.5),
            n_targets_tf: 3,
            tf_scale: (0.05, 0.075),
            context_scale: (0.85, 1.0),
            context_aspect: 1.0,
            min_ratio: 0.35,
            max_tries: 20,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let scale_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !scale_ok(self.block_scale) || !scale_ok(self.tf_scale) || !scale_ok(self.context_scale)
        {
            return Err(Error::Config("mask scales must lie in (0, 1]".into()));
        }
        if !range_ok(self.block_aspect) || !(self.context_aspect > 0.0) {
            return Err(Error::Config("aspect ratios must be positive".into()));
        }
        if self.n_targets_block == 0 || self.n_targets_tf == 0 {
            return Err(Error::Config("at least one target block is required".into()));
        }
        if !(0.0..1.0).contains(&self.min_ratio) {
            return Err(Error::Config("min_ratio must lie in [0, 1)".into()));
        }
        if self.max_tries == 0 {
            return Err(Error::Config("max_tries must be positive".into()));
        }
        Ok(())
    }
}

/// Shape of the progressive function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressKind {
    Sqrt,
    Linear,
    /// Easy level for the first half, hard afterwards.
    Step,
    /// Stays at the easy level (pure random-block masking).
    Constant,
    /// `1 - sqrt`: time-frequency first, random blocks later.
    Reversed,
}

impl FromStr for ProgressKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqrt" => Ok(Self::Sqrt),
            "linear" => Ok(Self::Linear),
            "step" => Ok(Self::Step),
            "constant" => Ok(Self::Constant),
            "reversed" => Ok(Self::Reversed),
            other => Err(Error::Config(format!("unknown curriculum kind `{other}`"))),
        }
    }
}

impl fmt::Display for ProgressKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sqrt => "sqrt",
            Self::Linear => "linear",
            Self::Step => "step",
            Self::Constant => "constant",
            Self::Reversed => "reversed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    pub total_steps: u64,
    pub c0: f64,
    pub kind: ProgressKind,
}

impl CurriculumSchedule {
    pub fn new(total_steps: u64) -> Self {
        Self {
            total_steps,
            c0: 0.01,
            kind: ProgressKind::Sqrt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("curriculum needs total_steps > 0".into()));
        }
        if !(self.c0 > 0.0 && self.c0 < 1.0) {
            return Err(Error::Config("c0 must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Probability of time-frequency masking at `step`.
    pub fn f(&self, step: u64) -> f64 {
        let floor = self.c0 * self.c0;
        let progress = step as f64 / self.total_steps as f64;
        let sqrt = || ((progress * (1.0 - floor)).sqrt() + floor).min(1.0);
        match self.kind {
            ProgressKind::Sqrt => sqrt(),
            ProgressKind::Linear => (progress * (1.0 - floor) + floor).min(1.0),
            ProgressKind::Step => {
                if 2 * step < self.total_steps {
                    floor
                } else {
                    1.0
                }
            }
            ProgressKind::Constant => floor,
            ProgressKind::Reversed => 1.0 - sqrt(),
        }
    }
}

pub fn curriculum_f(step: u64, sched: &CurriculumSchedule) -> f64 {
    sched.f(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMode {
    Block,
    TimeFrequency,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Block => "block",
            Self::TimeFrequency => "tf",
        })
    }
}

/// Bernoulli draw: time-frequency with probability `f(step)`.
pub fn choose_mode<R: Rng + ?Sized>(step: u64, sched: &CurriculumSchedule, rng: &mut R) -> MaskMode {
    let u: f64 = rng.random();
    if u < sched.f(step) {
        MaskMode::TimeFrequency
    } else {
        MaskMode::Block
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSize {
    pub h: usize,
    pub w: usize,
}

/// Block with area `scale * rows * cols` and height/width ratio `aspect`,
/// rounded half-up and clamped to `[1, axis - 1]`.
pub fn block_size_for(grid: GridShape, scale: f64, aspect: f64) -> BlockSize {
    let area = scale * grid.len() as f64;
    let round = |v: f64| (v + 0.5).floor().max(1.0) as usize;
    BlockSize {
        h: round((area * aspect).sqrt()).clamp(1, grid.rows - 1),
        w: round((area / aspect).sqrt()).clamp(1, grid.cols - 1),
    }
}

fn uniform<R: Rng + ?Sized>((lo, hi): (f64, f64), rng: &mut R) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn sample_block_size<R: Rng + ?Sized>(
    grid: GridShape,
    scale: (f64, f64),
    aspect: (f64, f64),
    rng: &mut R,
) -> Result<BlockSize> {
    grid.require_sampleable()?;
    let s = uniform(scale, rng);
    let a = uniform(aspect, rng);
    Ok(block_size_for(grid, s, a))
}

/// Outcome of one accepted block placement.
#[derive(Debug, Clone)]
pub struct BlockDraw {
    pub mask: MaskIndexSet,
    pub block: Block,
    pub complement: Raster,
    pub complement_tf: Raster,
    /// Leading acceptable regions that constrained the accepted placement.
    pub regions_used: usize,
}

/// Cells of `block` that survive the first `used` regions.
pub fn surviving_cells(block: &Block, grid: GridShape, regions: &[Raster]) -> Vec<usize> {
    block
        .indices(grid)
        .filter(|&i| regions.iter().all(|r| r.allows(i)))
        .collect()
}

pub fn exceeds_min_ratio(count: usize, min_ratio: f64, size: BlockSize) -> bool {
    count as f64 > min_ratio * (size.h * size.w) as f64
}

/// Rejection sampler shared by all mask kinds.
///
/// Each relaxation level makes `max_tries` placement attempts; level `k`
/// honors only the first `len - k` acceptable regions. Levels stop once
/// fewer than `min_regions` would remain.
fn sample_constrained<R: Rng + ?Sized>(
    size: BlockSize,
    grid: GridShape,
    acceptable: &[Raster],
    min_regions: usize,
    min_ratio: f64,
    max_tries: usize,
    rng: &mut R,
) -> Result<BlockDraw> {
    grid.require_sampleable()?;
    if size.h == 0 || size.w == 0 || size.h >= grid.rows || size.w >= grid.cols {
        return Err(Error::Precondition(format!(
            "block {}x{} does not fit strictly inside grid {grid}",
            size.h, size.w
        )));
    }
    if acceptable.iter().any(|r| r.grid != grid) {
        return Err(Error::Shape("acceptable region raster on another grid".into()));
    }
    let min_regions = min_regions.min(acceptable.len());
    let mut tries = 0;
    for used in (min_regions..=acceptable.len()).rev() {
        for _ in 0..max_tries {
            tries += 1;
            let block = Block {
                top: rng.random_range(0..grid.rows - size.h),
                left: rng.random_range(0..grid.cols - size.w),
                h: size.h,
                w: size.w,
            };
            let cells = surviving_cells(&block, grid, &acceptable[..used]);
            if exceeds_min_ratio(cells.len(), min_ratio, size) {
                return Ok(BlockDraw {
                    mask: MaskIndexSet::new(cells, grid)?,
                    block,
                    complement: Raster::block_complement(grid, &block),
                    complement_tf: Raster::tf_complement(grid, &block),
                    regions_used: used,
                });
            }
        }
    }
    Err(Error::SamplingFailure { tries })
}

/// Random block mask; returns the surviving indices and the block complement.
pub fn sample_block_mask<R: Rng + ?Sized>(
    size: BlockSize,
    grid: GridShape,
    acceptable: Option<&[Raster]>,
    min_ratio: f64,
    max_tries: usize,
    rng: &mut R,
) -> Result<(MaskIndexSet, Raster)> {
    let d = sample_constrained(size, grid, acceptable.unwrap_or(&[]), 0, min_ratio, max_tries, rng)?;
    Ok((d.mask, d.complement))
}

/// Time-frequency aware mask: the mask is still the block, but the returned
/// complement also removes every patch in the block's rows and columns.
pub fn sample_tf_mask<R: Rng + ?Sized>(
    size: BlockSize,
    grid: GridShape,
    acceptable: Option<&[Raster]>,
    min_ratio: f64,
    max_tries: usize,
    rng: &mut R,
) -> Result<(MaskIndexSet, Raster)> {
    let d = sample_constrained(size, grid, acceptable.unwrap_or(&[]), 0, min_ratio, max_tries, rng)?;
    Ok((d.mask, d.complement_tf))
}

/// Context block of scale `context_scale` and aspect `context_aspect`,
/// restricted to the acceptable regions.
///
/// When no placement satisfies every region, trailing regions are relaxed
/// one at a time, never below one; `regions_used` reports how many held.
pub fn sample_context_mask<R: Rng + ?Sized>(
    grid: GridShape,
    cfg: &SamplerConfig,
    acceptable: &[Raster],
    rng: &mut R,
) -> Result<BlockDraw> {
    let size = sample_block_size(
        grid,
        cfg.context_scale,
        (cfg.context_aspect, cfg.context_aspect),
        rng,
    )?;
    sample_constrained(size, grid, acceptable, 1, cfg.min_ratio, cfg.max_tries, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub context: MaskIndexSet,
    pub targets: Vec<MaskIndexSet>,
    pub target_blocks: Vec<Block>,
    pub mode: MaskMode,
}

impl MaskPlan {
    pub fn grid(&self) -> GridShape {
        self.context.grid()
    }

    /// Cell codes: 0 removed, 1 context, 2 target.
    pub fn cell_codes(&self) -> Vec<u8> {
        let mut codes = vec![0u8; self.grid().len()];
        for &i in self.context.indices() {
            codes[i] = 1;
        }
        for t in &self.targets {
            for &i in t.indices() {
                codes[i] = 2;
            }
        }
        codes
    }

    pub fn to_text(&self) -> String {
        let join = |m: &MaskIndexSet| {
            m.indices()
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = format!("grid {}\nmode {}\ncontext {}\n", self.grid(), self.mode, join(&self.context));
        for (k, t) in self.targets.iter().enumerate() {
            out.push_str(&format!("target{k} {}\n", join(t)));
        }
        out
    }
}

/// One plan attempt in a fixed mode.
fn try_plan<R: Rng + ?Sized>(
    grid: GridShape,
    cfg: &SamplerConfig,
    mode: MaskMode,
    rng: &mut R,
) -> Result<MaskPlan> {
    let (n_targets, scale) = match mode {
        MaskMode::Block => (cfg.n_targets_block, cfg.block_scale),
        MaskMode::TimeFrequency => (cfg.n_targets_tf, cfg.tf_scale),
    };
    // One target size per plan, shared by all target blocks.
    let size = sample_block_size(grid, scale, cfg.block_aspect, rng)?;
    let mut draws = Vec::with_capacity(n_targets);
    let mut regions = Vec::with_capacity(n_targets);
    for _ in 0..n_targets {
        let d = sample_constrained(size, grid, &[], 0, cfg.min_ratio, cfg.max_tries, rng)?;
        regions.push(match mode {
            MaskMode::Block => d.complement.clone(),
            MaskMode::TimeFrequency => d.complement_tf.clone(),
        });
        draws.push(d);
    }
    let context = sample_context_mask(grid, cfg, &regions, rng)?;
    // Targets whose regions had to be relaxed are dropped so the plan stays
    // disjoint from every target it keeps.
    draws.truncate(context.regions_used);
    Ok(MaskPlan {
        context: context.mask,
        target_blocks: draws.iter().map(|d| d.block).collect(),
        targets: draws.into_iter().map(|d| d.mask).collect(),
        mode,
    })
}

/// Full curriculum plan: mode from the schedule, then targets and context.
pub fn build_mask_plan<R: Rng + ?Sized>(
    grid: GridShape,
    cfg: &SamplerConfig,
    step: u64,
    sched: &CurriculumSchedule,
    rng: &mut R,
) -> Result<MaskPlan> {
    build_mask_plan_with(grid, cfg, None, step, sched, rng)
}

/// As [`build_mask_plan`], optionally forcing the mode.
pub fn build_mask_plan_with<R: Rng + ?Sized>(
    grid: GridShape,
    cfg: &SamplerConfig,
    forced: Option<MaskMode>,
    step: u64,
    sched: &CurriculumSchedule,
    rng: &mut R,
) -> Result<MaskPlan> {
    grid.require_sampleable()?;
    cfg.validate()?;
    for _ in 0..PLAN_RETRIES {
        let mode = forced.unwrap_or_else(|| choose_mode(step, sched, rng));
        match try_plan(grid, cfg, mode, rng) {
            Ok(plan) => return Ok(plan),
            Err(Error::SamplingFailure { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Unsatisfiable {
        retries: PLAN_RETRIES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    const G88: GridShape = GridShape { rows: 8, cols: 8 };
    const G648: GridShape = GridShape { rows: 64, cols: 8 };

    #[test]
    fn curriculum_closed_forms() {
        let s = CurriculumSchedule::new(1000);
        assert_eq!(s.f(0), 0.01f64 * 0.01);
        assert_eq!(s.f(1000), 1.0);
        assert!((s.f(250) - 0.500075).abs() < 1e-9);
        assert!((s.f(250) - ((0.25f64 * 0.9999).sqrt() + 0.0001)).abs() < 1e-15);
        let mut prev = 0.0;
        for step in 0..=1200 {
            let f = s.f(step);
            assert!(f >= prev && (1e-4..=1.0).contains(&f));
            prev = f;
        }
    }

    #[test]
    fn other_progress_kinds() {
        let mut s = CurriculumSchedule::new(100);
        s.kind = ProgressKind::Linear;
        assert!((s.f(50) - (0.5 * 0.9999 + 0.0001)).abs() < 1e-12);
        s.kind = ProgressKind::Step;
        assert_eq!((s.f(49), s.f(50)), (0.0001, 1.0));
        s.kind = ProgressKind::Constant;
        assert_eq!(s.f(100), 0.0001);
        s.kind = ProgressKind::Reversed;
        assert!((s.f(0) - 0.9999).abs() < 1e-12);
        assert_eq!(s.f(100), 0.0);
    }

    #[test]
    fn mode_extremes_and_frequency() {
        let mut rng = seed::stream(1, "masks", 0);
        let mut sched = CurriculumSchedule::new(100);
        sched.kind = ProgressKind::Reversed;
        // f(S) = 0 under the reversed schedule
        assert!((0..1000).all(|_| choose_mode(100, &sched, &mut rng) == MaskMode::Block));
        sched.kind = ProgressKind::Sqrt;
        assert!((0..1000).all(|_| choose_mode(100, &sched, &mut rng) == MaskMode::TimeFrequency));

        sched.kind = ProgressKind::Linear;
        sched.c0 = 1e-9;
        let step = 50;
        let f = sched.f(step);
        let n = 10_000;
        let tf = (0..n)
            .filter(|_| choose_mode(step, &sched, &mut rng) == MaskMode::TimeFrequency)
            .count();
        let rate = tf as f64 / n as f64;
        assert!((0.48..=0.52).contains(&rate), "rate {rate} f {f}");
    }

    #[test]
    fn block_size_arithmetic() {
        assert_eq!(block_size_for(G648, 0.175, 1.0), BlockSize { h: 9, w: 7 });
        assert_eq!(block_size_for(G88, 0.2, 1.0), BlockSize { h: 4, w: 4 });
        let mut rng = seed::stream(2, "masks", 0);
        for grid in [G88, G648, GridShape::new(2, 2)] {
            for _ in 0..500 {
                let b = sample_block_size(grid, (0.01, 1.0), (0.2, 5.0), &mut rng).unwrap();
                assert!(b.h >= 1 && b.h < grid.rows && b.w >= 1 && b.w < grid.cols);
            }
        }
        assert!(matches!(
            sample_block_size(GridShape::new(1, 8), (0.1, 0.2), (1.0, 1.0), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unconstrained_block_has_full_size() {
        let mut rng = seed::stream(3, "masks", 0);
        let size = BlockSize { h: 3, w: 2 };
        let (mask, comp) = sample_block_mask(size, G88, None, 0.35, 20, &mut rng).unwrap();
        assert_eq!(mask.len(), 6);
        assert_eq!(comp.count_zeros(), 6);
        assert!(mask.indices().iter().all(|&i| !comp.allows(i)));
    }

    #[test]
    fn mostly_excluded_block_is_rejected() {
        let block = Block { top: 0, left: 0, h: 4, w: 4 };
        let mut cells = vec![true; 64];
        // exclude 12 of the 16 block cells
        for i in block.indices(G88).take(12) {
            cells[i] = false;
        }
        let region = Raster::from_cells(G88, cells).unwrap();
        let surviving = surviving_cells(&block, G88, std::slice::from_ref(&region));
        assert_eq!(surviving.len(), 4);
        assert!(!exceeds_min_ratio(4, 0.35, BlockSize { h: 4, w: 4 }));
        assert!(exceeds_min_ratio(6, 0.35, BlockSize { h: 4, w: 4 }));
    }

    #[test]
    fn impossible_constraints_fail_after_relaxation() {
        let mut rng = seed::stream(4, "masks", 0);
        let size = BlockSize { h: 2, w: 2 };
        let nothing = Raster::from_cells(G88, vec![false; 64]).unwrap();
        // the context sampler never relaxes its last region
        let err = sample_constrained(size, G88, &[nothing.clone()], 1, 0.35, 20, &mut rng);
        assert!(matches!(err, Err(Error::SamplingFailure { tries: 20 })));
        // the listing's sampler relaxes all the way down
        let (mask, _) =
            sample_block_mask(size, G88, Some(&[nothing.clone(), nothing]), 0.35, 5, &mut rng).unwrap();
        assert_eq!(mask.len(), 4);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let run = || {
            let mut rng = seed::stream(7, "masks", 0);
            (0..20)
                .map(|_| sample_block_mask(BlockSize { h: 3, w: 3 }, G88, None, 0.35, 20, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tf_complement_cross_count() {
        let block = Block { top: 10, left: 3, h: 4, w: 2 };
        let comp = Raster::tf_complement(G648, &block);
        assert_eq!(comp.count_zeros(), 4 * 8 + 2 * 64 - 4 * 2);
        assert_eq!(comp.count_zeros(), 152);
        let all_rows = Block { top: 0, left: 0, h: 64, w: 1 };
        assert_eq!(Raster::tf_complement(G648, &all_rows).count_zeros(), 512);
    }

    #[test]
    fn tf_mask_lies_inside_its_cross() {
        let mut rng = seed::stream(8, "masks", 0);
        for _ in 0..50 {
            let (mask, comp) =
                sample_tf_mask(BlockSize { h: 4, w: 2 }, G648, None, 0.35, 20, &mut rng).unwrap();
            assert_eq!(mask.len(), 8);
            assert_eq!(comp.count_zeros(), 152);
            let rows: Vec<usize> = mask.indices().iter().map(|i| i / 8).collect();
            let cols: Vec<usize> = mask.indices().iter().map(|i| i % 8).collect();
            let (rmin, rmax) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
            let (cmin, cmax) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
            assert_eq!((rmax - rmin + 1, cmax - cmin + 1), (4, 2));
        }
    }

    #[test]
    fn context_without_targets_is_full_block() {
        let mut rng = seed::stream(9, "masks", 0);
        let cfg = SamplerConfig::default();
        let d = sample_context_mask(G88, &cfg, &[], &mut rng).unwrap();
        // scale (0.85, 1) of 64 cells clamps to a 7x7 block
        assert_eq!(d.mask.len(), 49);
        assert_eq!(d.regions_used, 0);
    }

    #[test]
    fn context_subtracts_enclosed_target() {
        let mut rng = seed::stream(10, "masks", 0);
        let cfg = SamplerConfig::default();
        let target = Block { top: 2, left: 2, h: 3, w: 3 };
        let comp = Raster::block_complement(G88, &target);
        let d = sample_context_mask(G88, &cfg, &[comp], &mut rng).unwrap();
        assert_eq!(d.mask.len(), 49 - 9);
        assert!(d.mask.indices().iter().all(|&i| !target.contains(i / 8, i % 8)));
    }

    #[test]
    fn plans_respect_invariants() {
        let sched = CurriculumSchedule::new(100);
        let cfg = SamplerConfig::default();
        for seed_v in 0..200 {
            let mut rng = seed::stream(seed_v, "masks", 0);
            let plan = build_mask_plan(G88, &cfg, seed_v % 101, &sched, &mut rng).unwrap();
            assert!(!plan.context.is_empty());
            assert!(!plan.targets.is_empty());
            for (t, b) in plan.targets.iter().zip(&plan.target_blocks) {
                assert!(!t.is_empty());
                assert!(plan.context.is_disjoint(t));
                if plan.mode == MaskMode::TimeFrequency {
                    assert!(plan
                        .context
                        .indices()
                        .iter()
                        .all(|&i| !b.shares_row_or_col(i / 8, i % 8)));
                }
            }
        }
    }

    #[test]
    fn plan_at_start_and_end_of_curriculum() {
        let sched = CurriculumSchedule::new(100);
        let cfg = SamplerConfig::default();
        let mut rng = seed::stream(3, "masks", 0);
        let plan = build_mask_plan(G88, &cfg, 0, &sched, &mut rng).unwrap();
        assert_eq!(plan.mode, MaskMode::Block);
        for s in 0..50 {
            let mut rng = seed::stream(s, "masks", 1);
            let plan = build_mask_plan(G88, &cfg, 100, &sched, &mut rng).unwrap();
            assert_eq!(plan.mode, MaskMode::TimeFrequency);
        }
        let a = build_mask_plan(G88, &cfg, 40, &sched, &mut seed::stream(5, "m", 0)).unwrap();
        let b = build_mask_plan(G88, &cfg, 40, &sched, &mut seed::stream(5, "m", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn index_set_validation() {
        assert!(MaskIndexSet::new(vec![1, 1], G88).is_err());
        assert!(MaskIndexSet::new(vec![2, 1], G88).is_err());
        assert!(MaskIndexSet::new(vec![64], G88).is_err());
        let m = MaskIndexSet::from_unsorted(vec![5, 1, 5], G88).unwrap();
        assert_eq!(m.indices(), &[1, 5]);
        assert_eq!("64x8".parse::<GridShape>().unwrap(), G648);
        assert!("64".parse::<GridShape>().is_err());
    }
}
