//! Synthetic video tasks, the SGD training loop, multi-view evaluation,
//! TSN-style frame sampling, and probability ensembling.
//!
//! Both tasks emit 1x8x32x32 clips with values in {0, 1}, so a cached
//! f32 copy reproduces the generated f64 clips bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// A 3x3 dot translating 2 px/frame in one of 4 directions, wrapping
    /// at the borders. No single frame carries the label.
    MovingDot,
    /// A square, cross, or bar held still across all frames; solvable
    /// from any one frame.
    StaticShape,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::MovingDot => "moving_dot",
            Task::StaticShape => "static_shape",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "moving_dot" => Ok(Task::MovingDot),
            "static_shape" => Ok(Task::StaticShape),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            Task::MovingDot => 4,
            Task::StaticShape => 3,
        }
    }

    /// channels x frames x width x height of every clip.
    pub fn clip_shape(self) -> [usize; 4] {
        [1, 8, 32, 32]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labelled clips from one generator stream.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: Task,
    pub split: Split,
    pub seed: u64,
    pub clips: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.task.class_count()
    }
}

const SIDE: usize = 32;
const FRAMES: usize = 8;

fn moving_dot_clip(rng: &mut ChaCha8Rng, label: usize) -> Tensor {
    let sx = rng.gen_range(0..SIDE) as i64;
    let sy = rng.gen_range(0..SIDE) as i64;
    let (dx, dy): (i64, i64) = match label {
        0 => (2, 0),
        1 => (-2, 0),
        2 => (0, 2),
        _ => (0, -2),
    };
    let mut data = vec![0.0; FRAMES * SIDE * SIDE];
    for t in 0..FRAMES {
        let ox = sx + dx * t as i64;
        let oy = sy + dy * t as i64;
        for a in 0..3 {
            for b in 0..3 {
                let x = (ox + a).rem_euclid(SIDE as i64) as usize;
                let y = (oy + b).rem_euclid(SIDE as i64) as usize;
                data[(t * SIDE + x) * SIDE + y] = 1.0;
            }
        }
    }
    Tensor::new(vec![1, FRAMES, SIDE, SIDE], data).unwrap()
}

fn static_shape_clip(rng: &mut ChaCha8Rng, label: usize) -> Tensor {
    let ax = rng.gen_range(0..SIDE);
    let ay = rng.gen_range(0..SIDE);
    let mut frame = vec![0.0; SIDE * SIDE];
    let mut set = |x: usize, y: usize| frame[((ax + x) % SIDE) * SIDE + (ay + y) % SIDE] = 1.0;
    match label {
        // 5x5 square, 25 px.
        0 => {
            for x in 0..5 {
                for y in 0..5 {
                    set(x, y);
                }
            }
        }
        // Plus-shaped cross, 9 px.
        1 => {
            for x in 0..5 {
                set(x, 2);
            }
            for y in 0..5 {
                set(2, y);
            }
        }
        // 3x9 bar, 27 px.
        _ => {
            for x in 0..3 {
                for y in 0..9 {
                    set(x, y);
                }
            }
        }
    }
    let mut data = Vec::with_capacity(FRAMES * SIDE * SIDE);
    for _ in 0..FRAMES {
        data.extend_from_slice(&frame);
    }
    Tensor::new(vec![1, FRAMES, SIDE, SIDE], data).unwrap()
}

/// Labels round-robin so class marginals are exact; samples drawn from a
/// dedicated RNG stream so train and test never share randomness.
fn gen_split(task: Task, seed: u64, n: usize, split: Split) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let k = task.class_count();
    let mut clips = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        clips.push(match task {
            Task::MovingDot => moving_dot_clip(&mut rng, label),
            Task::StaticShape => static_shape_clip(&mut rng, label),
        });
        labels.push(label);
    }
    Dataset { task, split, seed, clips, labels }
}

fn gen_pair(task: Task, seed: u64, n: usize) -> Result<(Dataset, Dataset)> {
    if n < 8 {
        return Err(Error::Invalid {
            op: "gen_data",
            msg: format!("n = {n} too small; need at least 8 to fill both splits"),
        });
    }
    let test_n = n / 5;
    Ok((
        gen_split(task, seed, n - test_n, Split::Train),
        gen_split(task, seed, test_n, Split::Test),
    ))
}

/// Four-direction moving-dot task; n splits 4:1 into train and test.
pub fn gen_moving_dot(seed: u64, n: usize) -> Result<(Dataset, Dataset)> {
    gen_pair(Task::MovingDot, seed, n)
}

/// Three-shape static task; same geometry and split convention.
pub fn gen_static_shape(seed: u64, n: usize) -> Result<(Dataset, Dataset)> {
    gen_pair(Task::StaticShape, seed, n)
}

/// Mirrors a clip along the width axis.
pub fn flip_x(clip: &Tensor) -> Tensor {
    let (c, t, w, h) = (
        clip.shape()[0],
        clip.shape()[1],
        clip.shape()[2],
        clip.shape()[3],
    );
    let mut data = vec![0.0; clip.len()];
    for ci in 0..c {
        for ti in 0..t {
            let base = (ci * t + ti) * w * h;
            for x in 0..w {
                let src = base + x * h;
                let dst = base + (w - 1 - x) * h;
                data[dst..dst + h].copy_from_slice(&clip.data()[src..src + h]);
            }
        }
    }
    Tensor::new(clip.shape().to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------
// Dataset cache

const MANIFEST_KEYS: &[&str] = &[
    "task",
    "seed",
    "train_samples",
    "test_samples",
    "channels",
    "frames",
    "width",
    "height",
    "classes",
];

fn split_bytes(ds: &Dataset) -> Vec<u8> {
    let voxels: usize = ds.task.clip_shape().iter().product();
    let mut bytes = Vec::with_capacity(ds.len() * (voxels * 4 + 4));
    for clip in &ds.clips {
        for &v in clip.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &l in &ds.labels {
        bytes.extend_from_slice(&(l as u32).to_le_bytes());
    }
    bytes
}

/// Writes manifest.txt, train.bin, and test.bin under `dir`.
pub fn save_cache(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    if train.task != test.task || train.seed != test.seed {
        return Err(Error::Invalid {
            op: "save_cache",
            msg: "train and test halves disagree on task or seed".into(),
        });
    }
    fs::create_dir_all(dir)?;
    let shape = train.task.clip_shape();
    let manifest = format!(
        "task={}\nseed={}\ntrain_samples={}\ntest_samples={}\nchannels={}\nframes={}\nwidth={}\nheight={}\nclasses={}\n",
        train.task.name(),
        train.seed,
        train.len(),
        test.len(),
        shape[0],
        shape[1],
        shape[2],
        shape[3],
        train.task.class_count(),
    );
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(dir.join("train.bin"), split_bytes(train))?;
    fs::write(dir.join("test.bin"), split_bytes(test))?;
    Ok(())
}

fn manifest_value<'a>(fields: &'a [(String, String)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Invalid {
            op: "load_cache",
            msg: format!("manifest missing key `{key}`"),
        })
}

fn load_split(path: &Path, task: Task, seed: u64, split: Split, n: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let shape = task.clip_shape();
    let voxels: usize = shape.iter().product();
    let want = n * (voxels * 4 + 4);
    if bytes.len() != want {
        return Err(Error::Invalid {
            op: "load_cache",
            msg: format!("{}: {} bytes, expected {want}", path.display(), bytes.len()),
        });
    }
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * voxels * 4;
        let data: Vec<f64> = bytes[start..start + voxels * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        clips.push(Tensor::new(shape.to_vec(), data)?);
    }
    let mut labels = Vec::with_capacity(n);
    for chunk in bytes[n * voxels * 4..].chunks_exact(4) {
        let l = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
        if l >= task.class_count() {
            return Err(Error::Invalid {
                op: "load_cache",
                msg: format!("label {l} out of range for {}", task.name()),
            });
        }
        labels.push(l);
    }
    Ok(Dataset { task, split, seed, clips, labels })
}

/// Reads a cache directory written by `save_cache`.
pub fn load_cache(dir: &Path) -> Result<(Dataset, Dataset)> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut fields = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Invalid {
            op: "load_cache",
            msg: format!("manifest line `{line}` is not key=value"),
        })?;
        if !MANIFEST_KEYS.contains(&k) || fields.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Invalid {
                op: "load_cache",
                msg: format!("manifest key `{k}` unknown or repeated"),
            });
        }
        fields.push((k.to_string(), v.to_string()));
    }
    let parse_n = |key: &str| -> Result<usize> {
        manifest_value(&fields, key)?.parse().map_err(|_| Error::Invalid {
            op: "load_cache",
            msg: format!("manifest key `{key}` is not a count"),
        })
    };
    let task = Task::parse(manifest_value(&fields, "task")?)?;
    let seed: u64 = manifest_value(&fields, "seed")?.parse().map_err(|_| Error::Invalid {
        op: "load_cache",
        msg: "manifest seed is not an integer".into(),
    })?;
    let shape = task.clip_shape();
    for (key, want) in [
        ("channels", shape[0]),
        ("frames", shape[1]),
        ("width", shape[2]),
        ("height", shape[3]),
        ("classes", task.class_count()),
    ] {
        let got = parse_n(key)?;
        if got != want {
            return Err(Error::Invalid {
                op: "load_cache",
                msg: format!("manifest {key}={got} does not match task {}", task.name()),
            });
        }
    }
    let train_n = parse_n("train_samples")?;
    let test_n = parse_n("test_samples")?;
    Ok((
        load_split(&dir.join("train.bin"), task, seed, Split::Train, train_n)?,
        load_split(&dir.join("test.bin"), task, seed, Split::Test, test_n)?,
    ))
}

// ---------------------------------------------------------------------
// TSN-style frame sampling

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Uniform-random frame within each chunk (training).
    RandomPerChunk,
    /// Chunk-center frame (evaluation).
    Center,
}

/// Splits `frames` into `n` equal chunks and picks one index per chunk.
pub fn tsn_indices(
    frames: usize,
    n: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n == 0 || frames < n {
        return Err(Error::Invalid {
            op: "tsn_indices",
            msg: format!("cannot draw {n} frames from {frames}"),
        });
    }
    Ok((0..n)
        .map(|i| {
            let a = i * frames / n;
            let b = (i + 1) * frames / n;
            match mode {
                SampleMode::Center => a + (b - a) / 2,
                SampleMode::RandomPerChunk => rng.gen_range(a..b),
            }
        })
        .collect())
}

/// Gathers the sampled frames of a CxFxWxH clip into CxnxWxH.
pub fn tsn_sample(
    clip: &Tensor,
    n: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if clip.rank() != 4 {
        return Err(Error::Invalid {
            op: "tsn_sample",
            msg: format!("clip rank {} != 4", clip.rank()),
        });
    }
    let (c, f, w, h) = (
        clip.shape()[0],
        clip.shape()[1],
        clip.shape()[2],
        clip.shape()[3],
    );
    let idx = tsn_indices(f, n, mode, rng)?;
    let mut data = Vec::with_capacity(c * n * w * h);
    for ci in 0..c {
        for &fi in &idx {
            let start = (ci * f + fi) * w * h;
            data.extend_from_slice(&clip.data()[start..start + w * h]);
        }
    }
    Tensor::new(vec![c, n, w, h], data)
}

// ---------------------------------------------------------------------
// Training

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 0-based epochs at whose start the rate is multiplied by 0.1.
    pub milestones: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            milestones: vec![50, 80],
            seed: 0,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch",
    "lr",
    "momentum",
    "weight_decay",
    "milestones",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        for pair in self.milestones.windows(2) {
            if pair[0] >= pair[1] {
                return bad(format!("milestones {:?} not strictly increasing", self.milestones));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return bad(format!(
                    "milestone {last} not below epochs {}",
                    self.epochs
                ));
            }
        }
        Ok(())
    }

    pub fn is_train_key(key: &str) -> bool {
        TRAIN_KEYS.contains(&key)
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let count = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("key `{key}`: `{v}` is not a count")))
        };
        let real = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("key `{key}`: `{v}` is not a number")))
        };
        match key {
            "epochs" => self.epochs = count(value)?,
            "batch" => self.batch = count(value)?,
            "lr" => self.lr = real(value)?,
            "momentum" => self.momentum = real(value)?,
            "weight_decay" => self.weight_decay = real(value)?,
            "milestones" => {
                self.milestones = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(count)
                    .collect::<Result<_>>()?;
            }
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("key `{key}`: `{value}` is not a seed")))?;
            }
            other => return Err(Error::Config(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let milestones: Vec<String> = self.milestones.iter().map(|m| m.to_string()).collect();
        format!(
            "epochs={}\nbatch={}\nlr={}\nmomentum={}\nweight_decay={}\nmilestones={}\nseed={}\n",
            self.epochs,
            self.batch,
            self.lr,
            self.momentum,
            self.weight_decay,
            milestones.join(","),
            self.seed,
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// "epoch,split,loss,accuracy" rows, train then test per epoch.
    pub metrics_csv: String,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub final_test_accuracy: Option<f64>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// SGD with momentum and coupled weight decay; cross-entropy loss;
/// horizontal flips only for static_shape (flips would corrupt
/// moving_dot's direction labels). Deterministic given seeds. Stops
/// early once the test accuracy reaches `target_accuracy`, when given.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    tcfg: &TrainConfig,
    target_accuracy: Option<f64>,
) -> Result<TrainReport> {
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Invalid {
            op: "train",
            msg: "empty training set".into(),
        });
    }
    let geom = model.config().geom();
    let shape = train_set.task.clip_shape();
    if shape != [geom.channels, geom.frames, geom.width, geom.height] {
        return Err(Error::Invalid {
            op: "train",
            msg: format!("model geometry {:?} does not match task clips {:?}",
                [geom.channels, geom.frames, geom.width, geom.height], shape),
        });
    }
    if train_set.class_count() != model.config().class_count {
        return Err(Error::Invalid {
            op: "train",
            msg: format!(
                "model has {} classes, task {}",
                model.config().class_count,
                train_set.class_count()
            ),
        });
    }
    let precision = model.config().precision;
    let flip = train_set.task == Task::StaticShape;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(3);
    let mut velocity: Vec<Vec<f64>> =
        model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut csv = String::from("epoch,split,loss,accuracy\n");
    let mut lr = tcfg.lr;
    let mut report = TrainReport {
        metrics_csv: String::new(),
        epochs_run: 0,
        final_train_loss: f64::INFINITY,
        final_test_accuracy: None,
    };

    for epoch in 0..tcfg.epochs {
        if tcfg.milestones.contains(&epoch) {
            lr *= 0.1;
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch) in order.chunks(tcfg.batch).enumerate() {
            let mut grads: Vec<Vec<f64>> =
                model.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for &si in batch {
                let mut clip = train_set.clips[si].clone();
                if flip && rng.gen_bool(0.5) {
                    clip = flip_x(&clip);
                }
                let label = train_set.labels[si];
                let mut tape = crate::tape::Tape::new(precision);
                let (vars, flat) = model.register_flat(&mut tape, true);
                let (loss, logits) = model.loss_on(&mut tape, &vars, &clip, label)?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::Diverged { epoch, batch: bi });
                }
                if argmax(tape.value(logits).data()) == label {
                    correct += 1;
                }
                loss_sum += lv;
                tape.backward(loss)?;
                for (acc, v) in grads.iter_mut().zip(&flat) {
                    if let Some(g) = tape.grad(*v) {
                        for (a, gv) in acc.iter_mut().zip(g.data()) {
                            *a += gv;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((param, vel), grad) in model
                .params_mut()
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&grads)
            {
                let data = param.data_mut();
                for i in 0..data.len() {
                    let g = grad[i] * scale + tcfg.weight_decay * data[i];
                    vel[i] = tcfg.momentum * vel[i] + g;
                    data[i] -= lr * vel[i];
                }
                precision.round_slice(data);
            }
        }
        let n = train_set.len() as f64;
        report.final_train_loss = loss_sum / n;
        let _ = writeln!(
            csv,
            "{epoch},train,{:.6},{:.4}",
            loss_sum / n,
            correct as f64 / n
        );
        report.epochs_run = epoch + 1;
        if let Some(test) = test_set {
            let ev = evaluate(
                model,
                test,
                ViewSpec { temporal: 1, spatial: 1 },
                CombineMode::Probability,
            )?;
            let _ = writeln!(csv, "{epoch},test,{:.6},{:.4}", ev.mean_loss, ev.accuracy);
            report.final_test_accuracy = Some(ev.accuracy);
            if let Some(target) = target_accuracy {
                if ev.accuracy >= target {
                    break;
                }
            }
        }
    }
    report.metrics_csv = csv;
    Ok(report)
}

// ---------------------------------------------------------------------
// Evaluation

/// temporal x spatial view counts, e.g. "10x3".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewSpec {
    pub temporal: usize,
    pub spatial: usize,
}

impl ViewSpec {
    pub fn parse(s: &str) -> Result<ViewSpec> {
        let bad = || Error::Config(format!("views `{s}` not of the form TxS"));
        let (t, sp) = s.split_once('x').ok_or_else(bad)?;
        let spec = ViewSpec {
            temporal: t.parse().map_err(|_| bad())?,
            spatial: sp.parse().map_err(|_| bad())?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal == 0 {
            return Err(Error::Config("need at least one temporal view".into()));
        }
        if !matches!(self.spatial, 1 | 3) {
            return Err(Error::Config(format!(
                "spatial views must be 1 or 3, got {}",
                self.spatial
            )));
        }
        Ok(())
    }
}

/// How multi-view outputs are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMode {
    /// Softmax each view, then average probabilities (default).
    Probability,
    /// Average raw logits, softmax once at the end.
    Logit,
}

impl CombineMode {
    pub fn name(self) -> &'static str {
        match self {
            CombineMode::Probability => "probs",
            CombineMode::Logit => "logits",
        }
    }

    pub fn parse(s: &str) -> Result<CombineMode> {
        match s {
            "probs" => Ok(CombineMode::Probability),
            "logits" => Ok(CombineMode::Logit),
            other => Err(Error::Config(format!("unknown combine mode `{other}`"))),
        }
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_class_total: Vec<usize>,
    pub per_class_correct: Vec<usize>,
    /// Mean negative log of the combined probability at the true label.
    pub mean_loss: f64,
    /// Combined per-sample class probabilities, dataset order.
    pub probs: Vec<Vec<f64>>,
}

/// Frame index for evaluation view `view` of `n_views`: a fixed position
/// (view+1)/(n_views+1) of the way through each chunk. One view lands on
/// the chunk centers; when the clip already has exactly the model's frame
/// count every view is the identity selection.
fn view_indices(frames: usize, n: usize, view: usize, n_views: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let a = i * frames / n;
            let b = (i + 1) * frames / n;
            a + (b - a) * (view + 1) / (n_views + 1)
        })
        .collect()
}

fn gather_frames(clip: &Tensor, idx: &[usize]) -> Tensor {
    let (c, f, w, h) = (
        clip.shape()[0],
        clip.shape()[1],
        clip.shape()[2],
        clip.shape()[3],
    );
    let mut data = Vec::with_capacity(c * idx.len() * w * h);
    for ci in 0..c {
        for &fi in idx {
            let start = (ci * f + fi) * w * h;
            data.extend_from_slice(&clip.data()[start..start + w * h]);
        }
    }
    Tensor::new(vec![c, idx.len(), w, h], data).unwrap()
}

fn crop_x(clip: &Tensor, offset: usize, width: usize) -> Tensor {
    let (c, f, w, h) = (
        clip.shape()[0],
        clip.shape()[1],
        clip.shape()[2],
        clip.shape()[3],
    );
    let mut data = Vec::with_capacity(c * f * width * h);
    for ci in 0..c {
        for fi in 0..f {
            let base = (ci * f + fi) * w * h;
            for x in offset..offset + width {
                data.extend_from_slice(&clip.data()[base + x * h..base + (x + 1) * h]);
            }
        }
    }
    Tensor::new(vec![c, f, width, h], data).unwrap()
}

/// Multi-view inference: per view forward then softmax, views combined
/// per `mode`, argmax against the label.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    views: ViewSpec,
    mode: CombineMode,
) -> Result<EvalReport> {
    views.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid {
            op: "evaluate",
            msg: "empty dataset".into(),
        });
    }
    let geom = model.config().geom();
    let shape = data.task.clip_shape();
    if shape[0] != geom.channels
        || shape[1] < geom.frames
        || shape[2] < geom.width
        || shape[3] != geom.height
    {
        return Err(Error::Invalid {
            op: "evaluate",
            msg: format!(
                "model geometry {:?} cannot view task clips {:?}",
                [geom.channels, geom.frames, geom.width, geom.height],
                shape
            ),
        });
    }
    if data.class_count() != model.config().class_count {
        return Err(Error::Invalid {
            op: "evaluate",
            msg: format!(
                "model has {} classes, task {}",
                model.config().class_count,
                data.class_count()
            ),
        });
    }
    let k = model.config().class_count;
    let x_offsets: Vec<usize> = if views.spatial == 1 {
        vec![(shape[2] - geom.width) / 2]
    } else {
        vec![0, (shape[2] - geom.width) / 2, shape[2] - geom.width]
    };
    let mut report = EvalReport {
        total: data.len(),
        correct: 0,
        accuracy: 0.0,
        per_class_total: vec![0; k],
        per_class_correct: vec![0; k],
        mean_loss: 0.0,
        probs: Vec::with_capacity(data.len()),
    };
    let view_count = (views.temporal * views.spatial) as f64;
    for (clip, &label) in data.clips.iter().zip(&data.labels) {
        let mut combined = vec![0.0; k];
        for tv in 0..views.temporal {
            let idx = view_indices(shape[1], geom.frames, tv, views.temporal);
            let frames = if idx.iter().enumerate().all(|(i, &f)| i == f) && shape[1] == geom.frames
            {
                clip.clone()
            } else {
                gather_frames(clip, &idx)
            };
            for &off in &x_offsets {
                let view = if geom.width == shape[2] {
                    frames.clone()
                } else {
                    crop_x(&frames, off, geom.width)
                };
                let logits = model.forward(&view)?.logits;
                match mode {
                    CombineMode::Probability => {
                        for (c, p) in combined.iter_mut().zip(softmax(logits.data())) {
                            *c += p;
                        }
                    }
                    CombineMode::Logit => {
                        for (c, &l) in combined.iter_mut().zip(logits.data()) {
                            *c += l;
                        }
                    }
                }
            }
        }
        for c in combined.iter_mut() {
            *c /= view_count;
        }
        let probs = match mode {
            CombineMode::Probability => combined,
            CombineMode::Logit => softmax(&combined),
        };
        let pred = argmax(&probs);
        report.per_class_total[label] += 1;
        if pred == label {
            report.correct += 1;
            report.per_class_correct[label] += 1;
        }
        report.mean_loss -= probs[label].max(1e-300).ln();
        report.probs.push(probs);
    }
    report.accuracy = report.correct as f64 / report.total as f64;
    report.mean_loss /= report.total as f64;
    Ok(report)
}

/// Entrywise mean of two probability vectors.
pub fn ensemble_average(p1: &[f64], p2: &[f64]) -> Result<Vec<f64>> {
    if p1.len() != p2.len() {
        return Err(Error::Shape {
            op: "ensemble_average",
            lhs: vec![p1.len()],
            rhs: vec![p2.len()],
        });
    }
    for p in [p1, p2] {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid {
                op: "ensemble_average",
                msg: "inputs must lie on the probability simplex".into(),
            });
        }
    }
    Ok(p1.iter().zip(p2).map(|(a, b)| (a + b) / 2.0).collect())
}
