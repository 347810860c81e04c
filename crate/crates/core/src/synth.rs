//! Deterministic synthetic procedural sequences: a stroke drawn segment by
//! segment, a polygon outlined then filled inward, and blocks stacked bottom up.
//! Every frame of a sequence is a superset construction of the previous one.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_pgm, write_atomic, write_pgm};
use crate::layout::{compose, decompose, quantize, stack_grids, to_model_space, SerpentineOrder};
use crate::numerics::{Real, Tensor};

/// Default monotonicity tolerance.
pub const MONOTONICITY_DELTA: f64 = 0.01;

const MAX_TRIES: usize = 256;

/// Pixels each construction step must add: more than `MONOTONICITY_DELTA` of
/// the frame, so that any reordering of a sequence shows a visible drop.
pub fn min_new_pixels(size: usize) -> usize {
    (MONOTONICITY_DELTA * (size * size) as f64).floor() as usize + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Stroke,
    Fill,
    Blocks,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Stroke, TaskKind::Fill, TaskKind::Blocks];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Stroke => "stroke",
            TaskKind::Fill => "fill",
            TaskKind::Blocks => "blocks",
        }
    }

    fn stream(self) -> u64 {
        match self {
            TaskKind::Stroke => 1,
            TaskKind::Fill => 2,
            TaskKind::Blocks => 3,
        }
    }

    pub fn generate(self, seed: u64, frames: usize, size: usize) -> Result<SequenceSample> {
        match self {
            TaskKind::Stroke => gen_stroke(seed, frames, size),
            TaskKind::Fill => gen_fill(seed, frames, size),
            TaskKind::Blocks => gen_blocks(seed, frames, size),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `K` frames of `[f, f]` with values `k / 255`.
    pub frames: Vec<Tensor<f32>>,
    pub task: TaskKind,
    pub seed: u64,
}

impl SequenceSample {
    pub fn grid(&self, order: &SerpentineOrder) -> Result<Tensor<f32>> {
        compose(&self.frames, order)
    }
}

fn task_rng(task: TaskKind, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.stream());
    rng
}

fn check_args(frames: usize, size: usize) -> Result<()> {
    if !matches!(frames, 4 | 9) {
        return Err(Error::InvalidArgument(format!(
            "K must be 4 or 9, got {frames}"
        )));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(format!("frame size {size} below 8")));
    }
    Ok(())
}

type Canvas = Vec<f64>;

fn finish(canvases: Vec<Canvas>, size: usize, task: TaskKind, seed: u64) -> Result<SequenceSample> {
    let frames = canvases
        .into_iter()
        .map(|c| {
            Tensor::new(
                vec![size, size],
                c.into_iter().map(quantize::<f32>).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let step = min_new_pixels(size) as f64 / (size * size) as f64;
    let grows = frames
        .windows(2)
        .all(|w| coverage(&w[1]) - coverage(&w[0]) >= step - 1e-12);
    if !grows || coverage(&frames[0]) < step - 1e-12 {
        return Err(Error::Data(format!(
            "{task} seed {seed}: coverage grows too little"
        )));
    }
    Ok(SequenceSample { frames, task, seed })
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + s * dx - p.0, a.1 + s * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Anti-aliased 1px line: intensity `1 - d` within one pixel of the segment.
fn draw_segment(canvas: &mut Canvas, size: usize, a: (f64, f64), b: (f64, f64)) {
    for y in 0..size {
        for x in 0..size {
            let d = point_segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
            let v = (1.0 - d).max(0.0);
            let px = &mut canvas[y * size + x];
            *px = px.max(v);
        }
    }
}

fn covered(canvas: &Canvas) -> usize {
    canvas.iter().filter(|&&v| quantize::<f64>(v) > 0.5).count()
}

/// A random polyline of `frames` segments revealed one segment per frame.
pub fn gen_stroke(seed: u64, frames: usize, size: usize) -> Result<SequenceSample> {
    check_args(frames, size)?;
    let mut rng = task_rng(TaskKind::Stroke, seed);
    let f = size as f64;
    let (lo, hi) = (1.5, f - 1.5);
    let mut p = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    let mut canvas = vec![0.0; size * size];
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut accepted = None;
        for _ in 0..MAX_TRIES {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(0.4 * f..0.7 * f);
            let q = (p.0 + len * angle.cos(), p.1 + len * angle.sin());
            if !(lo..hi).contains(&q.0) || !(lo..hi).contains(&q.1) {
                continue;
            }
            let mut next = canvas.clone();
            draw_segment(&mut next, size, p, q);
            if covered(&next) >= covered(&canvas) + min_new_pixels(size) {
                accepted = Some((q, next));
                break;
            }
        }
        let (q, next) = accepted
            .ok_or_else(|| Error::Data(format!("stroke seed {seed}: no room for a new segment")))?;
        p = q;
        canvas = next;
        out.push(canvas.clone());
    }
    finish(out, size, TaskKind::Stroke, seed)
}

fn inside_convex(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    poly.iter()
        .zip(poly.iter().cycle().skip(1))
        .all(|(a, b)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0)
}

fn scaled(poly: &[(f64, f64)], c: (f64, f64), s: f64) -> Vec<(f64, f64)> {
    poly.iter()
        .map(|&(x, y)| (c.0 + s * (x - c.0), c.1 + s * (y - c.1)))
        .collect()
}

const FILL_LEVEL: f64 = 0.8;

/// A convex polygon outline, then its interior filled from the boundary
/// inward in `frames - 1` rings of equal area.
pub fn gen_fill(seed: u64, frames: usize, size: usize) -> Result<SequenceSample> {
    check_args(frames, size)?;
    let mut rng = task_rng(TaskKind::Fill, seed);
    let f = size as f64;
    for _ in 0..MAX_TRIES {
        let c = (
            f / 2.0 + rng.gen_range(-0.08..0.08) * f,
            f / 2.0 + rng.gen_range(-0.08..0.08) * f,
        );
        let (rx, ry) = (rng.gen_range(0.32..0.45) * f, rng.gen_range(0.32..0.45) * f);
        let n = rng.gen_range(5..=8);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        // points on an ellipse in angular order form a convex polygon
        let poly: Vec<(f64, f64)> = angles
            .iter()
            .map(|a| (c.0 + rx * a.cos(), c.1 + ry * a.sin()))
            .collect();
        let mut outline = vec![0.0; size * size];
        for (a, b) in poly.iter().zip(poly.iter().cycle().skip(1)) {
            draw_segment(&mut outline, size, *a, *b);
        }
        // rings partition the region inside the one-pixel outline band
        let s0 = 1.0 - 1.0 / rx.min(ry);
        let mut out = vec![outline.clone()];
        for k in 1..frames {
            let s = s0 * (1.0 - k as f64 / (frames - 1) as f64).max(0.0).sqrt();
            let inner = scaled(&poly, c, s);
            let mut canvas = out.last().expect("outline frame").clone();
            for y in 0..size {
                for x in 0..size {
                    let p = (x as f64 + 0.5, y as f64 + 0.5);
                    if inside_convex(p, &poly) && (k == frames - 1 || !inside_convex(p, &inner)) {
                        let px = &mut canvas[y * size + x];
                        *px = px.max(FILL_LEVEL);
                    }
                }
            }
            out.push(canvas);
        }
        let grows = out
            .windows(2)
            .all(|w| covered(&w[1]) >= covered(&w[0]) + min_new_pixels(size));
        if grows && covered(&out[0]) >= min_new_pixels(size) {
            return finish(out, size, TaskKind::Fill, seed);
        }
    }
    Err(Error::Data(format!(
        "fill seed {seed}: rings too thin for frame size {size}"
    )))
}

/// `frames` axis-aligned rectangles stacked from the bottom edge up, each
/// resting on the previous one, one added per frame.
pub fn gen_blocks(seed: u64, frames: usize, size: usize) -> Result<SequenceSample> {
    check_args(frames, size)?;
    let mut rng = task_rng(TaskKind::Blocks, seed);
    let max_h = ((size - 2) / frames).max(1);
    let mut canvas = vec![0.0; size * size];
    let mut out = Vec::with_capacity(frames);
    let mut bottom = size;
    let mut prev: Option<(usize, usize)> = None;
    for _ in 0..frames {
        let h = rng.gen_range(max_h.div_ceil(2).max(1)..=max_h);
        let w = rng.gen_range(min_new_pixels(size).div_ceil(h).max(3)..=size - 4);
        let x = loop {
            let x = rng.gen_range(1..=size - 1 - w);
            // must overlap the block below
            match prev {
                Some((px, pw)) if x + w <= px || px + pw <= x => continue,
                _ => break x,
            }
        };
        let level = rng.gen_range(0.6..1.0);
        let top = bottom - h;
        for y in top..bottom {
            for xx in x..x + w {
                canvas[y * size + xx] = level;
            }
        }
        bottom = top;
        prev = Some((x, w));
        out.push(canvas.clone());
    }
    finish(out, size, TaskKind::Blocks, seed)
}

/// Fraction of pixels strictly above 0.5.
pub fn coverage<T: Real>(frame: &Tensor<T>) -> f64 {
    let half = T::from_f64(0.5);
    frame.data().iter().filter(|&&v| v > half).count() as f64 / frame.numel() as f64
}

/// Fraction of adjacent pairs with `coverage(k + 1) >= coverage(k) - delta`.
pub fn monotonicity<T: Real>(frames: &[Tensor<T>], delta: f64) -> f64 {
    if frames.len() < 2 {
        return 1.0;
    }
    let cov: Vec<f64> = frames.iter().map(coverage).collect();
    let ok = cov.windows(2).filter(|w| w[1] >= w[0] - delta).count();
    ok as f64 / (cov.len() - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// A half-open range of per-sample seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub len: u64,
}

impl SeedRange {
    pub fn iter(&self) -> impl Iterator<Item = u64> {
        self.start..self.start + self.len
    }

    pub fn contains(&self, seed: u64) -> bool {
        (self.start..self.start + self.len).contains(&seed)
    }
}

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Task id `i` is `tasks[i]`.
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskKind>,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub seed: u64,
}

fn default_tasks() -> Vec<TaskKind> {
    TaskKind::ALL.to_vec()
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            tasks: default_tasks(),
            train_per_task: 500,
            val_per_task: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub file: String,
    pub task: TaskKind,
    pub task_id: usize,
    pub seed: u64,
    pub split: Split,
}

/// Index of a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub tasks: Vec<TaskKind>,
    pub counts: BTreeMap<String, usize>,
    pub frames: usize,
    pub frame_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub seed: u64,
    pub train_seeds: SeedRange,
    pub val_seeds: SeedRange,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Plans a dataset: train seeds start at `seed * 2^20`, validation seeds
    /// follow immediately after, shared by every task.
    pub fn plan(data: &DataConfig, order: &SerpentineOrder, frame_size: usize) -> Result<Self> {
        if data.tasks.is_empty() || data.train_per_task == 0 {
            return Err(Error::Config(
                "dataset needs at least one task and sample".into(),
            ));
        }
        let base = data.seed.wrapping_mul(1 << 20);
        let train_seeds = SeedRange {
            start: base,
            len: data.train_per_task as u64,
        };
        let val_seeds = SeedRange {
            start: base + data.train_per_task as u64,
            len: data.val_per_task as u64,
        };
        let mut samples = Vec::new();
        let mut counts = BTreeMap::new();
        for (task_id, &task) in data.tasks.iter().enumerate() {
            for (split, range) in [(Split::Train, train_seeds), (Split::Val, val_seeds)] {
                for seed in range.iter() {
                    samples.push(SampleRecord {
                        file: format!("{task}_{seed}.pgm"),
                        task,
                        task_id,
                        seed,
                        split,
                    });
                }
            }
            counts.insert(
                task.name().to_string(),
                data.train_per_task + data.val_per_task,
            );
        }
        Ok(Self {
            tasks: data.tasks.clone(),
            counts,
            frames: order.len(),
            frame_size,
            grid_rows: order.rows,
            grid_cols: order.cols,
            seed: data.seed,
            train_seeds,
            val_seeds,
            samples,
        })
    }

    pub fn order(&self) -> Result<SerpentineOrder> {
        crate::layout::serpentine_order(self.grid_rows, self.grid_cols)
    }
}

/// One composed grid with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRecord {
    pub task: TaskKind,
    pub task_id: usize,
    pub seed: u64,
    /// `[rows * f, cols * f]` in pixel space.
    pub grid: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<GridRecord>,
    pub val: Vec<GridRecord>,
}

impl Dataset {
    /// Generates every planned sample in memory.
    pub fn generate(manifest: DatasetManifest) -> Result<Self> {
        let order = manifest.order()?;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for rec in &manifest.samples {
            let sample = rec
                .task
                .generate(rec.seed, manifest.frames, manifest.frame_size)?;
            let grid = GridRecord {
                task: rec.task,
                task_id: rec.task_id,
                seed: rec.seed,
                grid: sample.grid(&order)?,
            };
            match rec.split {
                Split::Train => train.push(grid),
                Split::Val => val.push(grid),
            }
        }
        Ok(Self {
            manifest,
            train,
            val,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (h, w) = (
            manifest.grid_rows * manifest.frame_size,
            manifest.grid_cols * manifest.frame_size,
        );
        let mut train = Vec::new();
        let mut val = Vec::new();
        for rec in &manifest.samples {
            let grid: Tensor<f32> =
                read_pgm(&dir.join(&rec.file)).map_err(|e| Error::Data(e.to_string()))?;
            if grid.shape() != [h, w] {
                return Err(Error::Data(format!(
                    "{}: grid is {:?}, manifest says [{h}, {w}]",
                    rec.file,
                    grid.shape()
                )));
            }
            let g = GridRecord {
                task: rec.task,
                task_id: rec.task_id,
                seed: rec.seed,
                grid,
            };
            match rec.split {
                Split::Train => train.push(g),
                Split::Val => val.push(g),
            }
        }
        Ok(Self {
            manifest,
            train,
            val,
        })
    }

    /// Frames of a record in serpentine order.
    pub fn frames(&self, rec: &GridRecord) -> Result<Vec<Tensor<f32>>> {
        decompose(&rec.grid, &self.manifest.order()?)
    }
}

/// Writes `manifest.json` and one `<task>_<seed>.pgm` grid per sample.
pub fn gen_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<Dataset> {
    fs::create_dir_all(dir)?;
    let data = Dataset::generate(manifest.clone())?;
    for rec in data.train.iter().chain(&data.val) {
        write_pgm(
            &dir.join(format!("{}_{}.pgm", rec.task, rec.seed)),
            &rec.grid,
        )?;
    }
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(data)
}

/// Model-space batch `[B, 1, H, W]` of the given records.
pub fn batch_tensor<T: Real>(records: &[&GridRecord]) -> Result<Tensor<T>> {
    let grids: Vec<Tensor<T>> = records
        .iter()
        .map(|r| to_model_space(&r.grid.cast()))
        .collect();
    stack_grids(&grids)
}
