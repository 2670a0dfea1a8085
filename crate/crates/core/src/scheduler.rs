//! Balanced batch construction and the chunked load/replay schedule.
//!
//! Each batch is split in two halves: one balanced over label classes, the
//! other balanced over the categories of a single confound that rotates from
//! batch to batch. Batches are concatenated into chunks; every chunk is
//! iterated for a fixed number of passes in freshly shuffled order and then
//! dropped, until the sample budget has been loaded.
//!
//! A schedule is materialized as a [`ScheduleLog`] so that several models can
//! replay exactly the same data order.

use std::fmt::Write as _;
use std::str::FromStr;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::Dataset;

const PLAN_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

/// Per-class and per-category index pools for a dataset.
#[derive(Debug, Clone)]
pub struct SampleIndex {
    label_pools: Vec<Vec<usize>>,
    confound_pools: Vec<Vec<Vec<usize>>>,
}

impl SampleIndex {
    pub fn new(labels: &[usize], confounds: &[Vec<Option<usize>>], label_arity: usize, confound_arities: &[usize]) -> Self {
        let mut label_pools = vec![Vec::new(); label_arity];
        let mut confound_pools: Vec<Vec<Vec<usize>>> = confound_arities.iter().map(|&n| vec![Vec::new(); n]).collect();
        for (i, &y) in labels.iter().enumerate() {
            label_pools[y].push(i);
            for (k, c) in confounds[i].iter().enumerate() {
                if let Some(c) = c {
                    confound_pools[k][*c].push(i);
                }
            }
        }
        Self {
            label_pools,
            confound_pools,
        }
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        let arities: Vec<usize> = ds.layout.confounds().iter().map(|c| c.arity()).collect();
        Self::new(&ds.labels, &ds.confounds, ds.layout.label_arity(), &arities)
    }

    pub fn num_confounds(&self) -> usize {
        self.confound_pools.len()
    }

    pub fn label_pools(&self) -> &[Vec<usize>] {
        &self.label_pools
    }

    pub fn confound_pools(&self, k: usize) -> &[Vec<usize>] {
        &self.confound_pools[k]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub chunk_size: usize,
    pub passes: usize,
    pub budget: usize,
    /// Order in which confounds take the balanced half; `None` means `0..K`.
    pub rotation: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            chunk_size: 48,
            passes: 5,
            budget: 2400,
            rotation: None,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    /// Chunk 48, five passes, 33,000 samples.
    pub fn paper() -> Self {
        Self {
            budget: 33_000,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_confounds: usize) -> Result<()> {
        if self.batch_size == 0 || self.chunk_size == 0 || self.passes == 0 || self.budget == 0 {
            return Err(Error::config("batch, chunk, passes and budget must all be positive"));
        }
        if self.chunk_size < self.batch_size {
            return Err(Error::config("chunk size must be at least the batch size"));
        }
        if let Some(rot) = &self.rotation {
            if num_confounds > 0 && rot.is_empty() {
                return Err(Error::config("rotation must name at least one confound"));
            }
            if let Some(bad) = rot.iter().find(|&&k| k >= num_confounds) {
                return Err(Error::config(format!("rotation refers to confound {bad}, only {num_confounds} exist")));
            }
        }
        Ok(())
    }

    pub fn rotation_for(&self, num_confounds: usize) -> Vec<usize> {
        self.rotation.clone().unwrap_or_else(|| (0..num_confounds).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    /// Label half followed by confound half.
    pub indices: Vec<usize>,
    pub label_half: Vec<usize>,
    pub confound_half: Vec<usize>,
    /// Confound balanced in the second half; `None` when there are no
    /// confounds and both halves are label-balanced.
    pub balanced_confound: Option<usize>,
    pub warnings: Vec<String>,
}

/// Emits balanced batches with a rotating balanced confound.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    batch_size: usize,
    rotation: Vec<usize>,
    rng: ChaCha8Rng,
    emitted: usize,
}

impl BatchSampler {
    pub fn new(config: &ScheduleConfig, num_confounds: usize) -> Result<Self> {
        config.validate(num_confounds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(PLAN_STREAM);
        Ok(Self {
            batch_size: config.batch_size,
            rotation: config.rotation_for(num_confounds),
            rng,
            emitted: 0,
        })
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn next_batch(&mut self, index: &SampleIndex) -> Result<BatchPlan> {
        if index.label_pools.iter().all(|p| p.is_empty()) {
            return Err(Error::input("cannot build a batch from an empty dataset"));
        }
        let t = self.emitted;
        let label_n = self.batch_size - self.batch_size / 2;
        let confound_n = self.batch_size / 2;
        let mut warnings = Vec::new();

        let label_half = balanced_draw(&index.label_pools, label_n, t, &mut self.rng, &mut warnings, "label");
        let (balanced_confound, confound_half) = if self.rotation.is_empty() {
            (None, balanced_draw(&index.label_pools, confound_n, t + 1, &mut self.rng, &mut warnings, "label"))
        } else {
            let k = self.rotation[t % self.rotation.len()];
            let pools = &index.confound_pools[k];
            let half = if pools.iter().all(|p| p.is_empty()) {
                warnings.push(format!("confound {k} is missing everywhere; balancing on label instead"));
                balanced_draw(&index.label_pools, confound_n, t + 1, &mut self.rng, &mut warnings, "label")
            } else {
                balanced_draw(pools, confound_n, t, &mut self.rng, &mut warnings, "confound category")
            };
            (Some(k), half)
        };
        for w in &warnings {
            warn!("batch {t}: {w}");
        }
        self.emitted += 1;
        let mut indices = label_half.clone();
        indices.extend_from_slice(&confound_half);
        Ok(BatchPlan {
            indices,
            label_half,
            confound_half,
            balanced_confound,
            warnings,
        })
    }
}

/// Draws `count` indices spread evenly over the non-empty pools; remainders go
/// to pools in an order that rotates with `offset`.
fn balanced_draw<R: Rng>(
    pools: &[Vec<usize>],
    count: usize,
    offset: usize,
    rng: &mut R,
    warnings: &mut Vec<String>,
    what: &str,
) -> Vec<usize> {
    let live: Vec<usize> = (0..pools.len()).filter(|&c| !pools[c].is_empty()).collect();
    if live.len() < pools.len() {
        warnings.push(format!(
            "{} {what} pool(s) empty; balancing over the remaining {}",
            pools.len() - live.len(),
            live.len()
        ));
    }
    let per = count / live.len();
    let extra = count % live.len();
    let mut out = Vec::with_capacity(count);
    for (j, &c) in live.iter().enumerate() {
        let slot = (j + live.len() - offset % live.len()) % live.len();
        let n = per + usize::from(slot < extra);
        let pool = &pools[c];
        if n <= pool.len() {
            out.extend(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]));
        } else {
            warnings.push(format!("{what} {c} has {} samples, drawing {n} with replacement", pool.len()));
            out.extend((0..n).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }
    out
}

/// One training step's worth of indices within a replayed schedule.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub chunk: usize,
    pub pass: usize,
    pub step: usize,
    pub indices: &'a [usize],
}

/// Every loaded index, grouped into chunks, plus the config that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleLog {
    pub config: ScheduleConfig,
    pub chunks: Vec<Vec<usize>>,
}

impl ScheduleLog {
    /// Samples balanced batches until the budget is loaded. The last chunk
    /// (and the last batch within a chunk) are truncated to fit.
    pub fn plan(index: &SampleIndex, config: &ScheduleConfig) -> Result<Self> {
        let mut sampler = BatchSampler::new(config, index.num_confounds())?;
        let mut chunks = Vec::new();
        let mut loaded = 0;
        while loaded < config.budget {
            let size = config.chunk_size.min(config.budget - loaded);
            let mut chunk = Vec::with_capacity(size);
            while chunk.len() < size {
                let plan = sampler.next_batch(index)?;
                let take = (size - chunk.len()).min(plan.indices.len());
                chunk.extend_from_slice(&plan.indices[..take]);
            }
            loaded += chunk.len();
            chunks.push(chunk);
        }
        Ok(Self {
            config: config.clone(),
            chunks,
        })
    }

    pub fn loaded(&self) -> usize {
        self.chunks.iter().map(Vec::len).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.chunks.iter().flatten().copied()
    }

    pub fn pass_iterations(&self) -> usize {
        self.chunks.len() * self.config.passes
    }

    /// Feeds every minibatch to `consumer` in schedule order. The shuffle of
    /// each pass derives from the log's seed, so replays are identical.
    pub fn replay<F>(&self, mut consumer: F) -> Result<usize>
    where
        F: FnMut(&StepBatch<'_>) -> Result<()>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        let mut step = 0;
        let mut order = Vec::with_capacity(self.config.chunk_size);
        for (c, chunk) in self.chunks.iter().enumerate() {
            for pass in 0..self.config.passes {
                order.clear();
                order.extend_from_slice(chunk);
                order.shuffle(&mut rng);
                for mb in order.chunks(self.config.batch_size) {
                    consumer(&StepBatch {
                        chunk: c,
                        pass,
                        step,
                        indices: mb,
                    })?;
                    step += 1;
                }
            }
        }
        Ok(step)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let rotation = c
            .rotation
            .as_ref()
            .map(|r| r.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","))
            .unwrap_or_else(|| "auto".into());
        let mut out = format!(
            "# mucran-schedule seed={} batch={} chunk={} passes={} budget={} rotation={}\n",
            c.seed, c.batch_size, c.chunk_size, c.passes, c.budget, rotation
        );
        for i in self.indices() {
            let _ = writeln!(out, "{i}");
        }
        out
    }
}

impl FromStr for ScheduleLog {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix("# mucran-schedule "))
            .ok_or_else(|| Error::format(0, "missing schedule header"))?;
        let mut config = ScheduleConfig::default();
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::format(0, format!("malformed header field `{field}`")))?;
            let num = || value.parse::<u64>().map_err(|_| Error::format(0, format!("bad value in `{field}`")));
            match key {
                "seed" => config.seed = num()?,
                "batch" => config.batch_size = num()? as usize,
                "chunk" => config.chunk_size = num()? as usize,
                "passes" => config.passes = num()? as usize,
                "budget" => config.budget = num()? as usize,
                "rotation" if value == "auto" => config.rotation = None,
                "rotation" => {
                    config.rotation = Some(
                        value
                            .split(',')
                            .filter(|s| !s.is_empty())
                            .map(|s| s.parse().map_err(|_| Error::format(0, format!("bad rotation `{value}`"))))
                            .collect::<Result<_>>()?,
                    )
                }
                _ => return Err(Error::format(0, format!("unknown header field `{key}`"))),
            }
        }
        let mut flat = Vec::new();
        let mut offset = header.len() as u64 + 18;
        for line in lines {
            let v = line
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::format(offset, format!("bad index line `{line}`")))?;
            flat.push(v);
            offset += line.len() as u64 + 1;
        }
        let chunks = flat.chunks(config.chunk_size.max(1)).map(<[usize]>::to_vec).collect();
        Ok(Self { config, chunks })
    }
}

/// Plans a schedule, replays it through `consumer`, and returns the log.
pub fn run_schedule<F>(index: &SampleIndex, config: &ScheduleConfig, consumer: F) -> Result<ScheduleLog>
where
    F: FnMut(&StepBatch<'_>) -> Result<()>,
{
    let log = ScheduleLog::plan(index, config)?;
    log.replay(consumer)?;
    Ok(log)
}
