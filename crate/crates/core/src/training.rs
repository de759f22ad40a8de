//! Multilevel ELBO, Adam, and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Utterance;
use crate::diffcore::{grad_check, GradCheck, Graph, NodeId, Tensor};
use crate::model::{
    forward_batch, param_gradients, save_checkpoint, Bound, ForwardNodes, Level, Masks, ModelConfig, ModelError,
    ModelParams, Noise,
};

/// Finite-difference step for [`check_gradients`] with the fourth-order
/// stencil.
pub const GRAD_CHECK_STEP: f64 = 3e-3;

/// Totals above this count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: total loss {total}")]
    Diverged { step: u64, total: f64 },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<crate::diffcore::DiffError> for TrainError {
    fn from(e: crate::diffcore::DiffError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Trace rows are written every `log_every` steps (and on the last).
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return bad("epsilon must be positive and clip_norm nonnegative");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }
}

/// `0.5 · (mu² + σ² − 1 − 2·log σ)` for one Gaussian dimension.
pub fn kl_standard_normal(mu: f64, log_sigma: f64) -> f64 {
    0.5 * (mu * mu + (2.0 * log_sigma).exp_m1() - 2.0 * log_sigma)
}

/// `recon + Σ_level β_level · Σ_k KL_level[k]`.
pub fn elbo_multilevel(recon: f64, kl: &BTreeMap<Level, Vec<f64>>, cfg: &ModelConfig) -> f64 {
    recon
        + kl
            .iter()
            .map(|(&level, v)| cfg.beta(level) * v.iter().sum::<f64>())
            .sum::<f64>()
}

/// Loss terms of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub frame_mse: f64,
    pub duration_mse: f64,
    /// `frame_mse + duration_weight · duration_mse`.
    pub recon: f64,
    /// Per dimension, summed over units of the level.
    pub kl: BTreeMap<Level, Vec<f64>>,
    pub total: f64,
}

impl ElboReport {
    pub fn kl_total(&self, level: Level) -> f64 {
        self.kl.get(&level).map_or(0.0, |v| v.iter().sum())
    }
}

/// Graph handles of a batch loss.
pub struct LossNodes {
    pub forward: ForwardNodes,
    /// Mean of the per-utterance totals.
    pub loss: NodeId,
    pub totals: Vec<NodeId>,
    pub frame_mse: Vec<NodeId>,
    pub duration_mse: Vec<NodeId>,
    pub recon: Vec<NodeId>,
}

fn level_nodes(f: &ForwardNodes, level: Level) -> Option<&crate::model::LevelNodes> {
    match level {
        Level::Utterance => f.utt.as_ref(),
        Level::Word => Some(&f.word),
        Level::Phone => Some(&f.phone),
    }
}

fn level_rows(f: &ForwardNodes, level: Level, b: usize) -> (usize, usize) {
    let lay = &f.layout;
    match level {
        Level::Utterance => (b, 1),
        Level::Word => (lay.word_offsets[b], lay.word_offsets[b + 1] - lay.word_offsets[b]),
        Level::Phone => (lay.phone_offsets[b], lay.phone_offsets[b + 1] - lay.phone_offsets[b]),
    }
}

/// Builds the multilevel ELBO for a batch.
pub fn elbo_loss(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    utts: &[&Utterance],
    noise: &[Noise],
    masks: &Masks,
) -> Result<LossNodes> {
    let f = forward_batch(g, bound, cfg, utts, noise, masks)?;
    let lay = &f.layout;
    let (mut totals, mut frame_mses, mut duration_mses, mut recons) = (vec![], vec![], vec![], vec![]);
    for b in 0..lay.n_utts() {
        let (t0, t1) = (lay.frame_offsets[b], lay.frame_offsets[b + 1]);
        let pred = g.slice_rows(f.decoder.frames, t0, t1 - t0)?;
        let tgt = g.slice_rows(f.target_frames, t0, t1 - t0)?;
        let diff = g.sub(pred, tgt)?;
        let sq = g.square(diff);
        let frame_mse = g.mean(sq);

        let (p0, np) = (lay.phone_offsets[b], lay.phone_offsets[b + 1] - lay.phone_offsets[b]);
        let dp = g.slice_rows(f.decoder.durations, p0, np)?;
        let dt = g.slice_rows(f.target_durations, p0, np)?;
        let lp = g.log(dp);
        let lt = g.log(dt);
        let dd = g.sub(lp, lt)?;
        let dsq = g.square(dd);
        let dur_mse = g.mean(dsq);
        let wd = g.scale(dur_mse, cfg.duration_weight);
        let recon = g.add(frame_mse, wd)?;

        let mut total = recon;
        for level in Level::ALL {
            let Some(ln) = level_nodes(&f, level) else { continue };
            let (r0, nr) = level_rows(&f, level, b);
            for (k, &kl) in ln.kl.iter().enumerate() {
                if !masks.get(level)[k] {
                    continue;
                }
                let rows = g.slice_rows(kl, r0, nr)?;
                let s = g.sum(rows);
                let w = g.scale(s, cfg.beta(level));
                total = g.add(total, w)?;
            }
        }
        frame_mses.push(frame_mse);
        duration_mses.push(dur_mse);
        recons.push(recon);
        totals.push(total);
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = g.add(acc, t)?;
    }
    let loss = g.scale(acc, 1.0 / totals.len() as f64);
    Ok(LossNodes {
        forward: f,
        loss,
        totals,
        frame_mse: frame_mses,
        duration_mse: duration_mses,
        recon: recons,
    })
}

impl LossNodes {
    /// Reads the loss terms of utterance `b`. KL sums are accumulated here
    /// from the per-unit values, apart from the graph's own reduction.
    pub fn report(&self, g: &Graph, b: usize) -> ElboReport {
        let f = &self.forward;
        let mut kl = BTreeMap::new();
        for level in Level::ALL {
            let Some(ln) = level_nodes(f, level) else { continue };
            let (r0, nr) = level_rows(f, level, b);
            let per_dim = ln
                .kl
                .iter()
                .map(|&k| g.value(k).data()[r0..r0 + nr].iter().sum())
                .collect();
            kl.insert(level, per_dim);
        }
        ElboReport {
            frame_mse: g.value(self.frame_mse[b]).item(),
            duration_mse: g.value(self.duration_mse[b]).item(),
            recon: g.value(self.recon[b]).item(),
            kl,
            total: g.value(self.totals[b]).item(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. Parameters without a gradient entry are
    /// left untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &HashMap<String, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut HashMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Batch-averaged trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub recon: f64,
    pub kl_phone: f64,
    pub kl_word: f64,
    pub kl_utt: f64,
    pub total: f64,
    pub active_dims: usize,
}

pub const TRACE_HEADER: &str = "step,recon,kl_phone_total,kl_word_total,kl_utt_total,total,active_dims";

impl TraceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            self.step, self.recon, self.kl_phone, self.kl_word, self.kl_utt, self.total, self.active_dims
        )
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    /// Zero-based index of this update; masks are evaluated at it.
    pub step: u64,
    pub masks: Masks,
    pub batch: Vec<usize>,
    pub reports: Vec<ElboReport>,
    /// Graph value of the batch loss.
    pub loss: f64,
    pub grad_norm: f64,
}

impl StepReport {
    pub fn trace_row(&self) -> TraceRow {
        let n = self.reports.len() as f64;
        let mean = |f: &dyn Fn(&ElboReport) -> f64| self.reports.iter().map(f).sum::<f64>() / n;
        TraceRow {
            step: self.step,
            recon: mean(&|r| r.recon),
            kl_phone: mean(&|r| r.kl_total(Level::Phone)),
            kl_word: mean(&|r| r.kl_total(Level::Word)),
            kl_utt: mean(&|r| r.kl_total(Level::Utterance)),
            total: self.loss,
            active_dims: Level::ALL.iter().map(|&l| self.masks.active_count(l)).sum(),
        }
    }
}

/// Stateful optimizer loop over a fixed corpus.
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        let params = ModelParams::init(&model, train.seed)?;
        Self::with_params(model, train, params)
    }

    pub fn with_params(model: ModelConfig, train: TrainConfig, params: ModelParams) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let adam = Adam::new(train.learning_rate, train.beta1, train.beta2, train.epsilon);
        // distinct stream from parameter init
        let rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x05ee_d0fb_a7c4);
        Ok(Trainer {
            model,
            train,
            params,
            adam,
            rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn pick_batch(&mut self, n: usize) -> Vec<usize> {
        if n <= self.train.batch_size {
            return (0..n).collect();
        }
        let mut idx = sample(&mut self.rng, n, self.train.batch_size).into_vec();
        idx.sort_unstable();
        idx
    }

    /// One optimizer update on a random minibatch.
    pub fn step(&mut self, corpus: &[Utterance]) -> Result<StepReport> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let step = self.step;
        let masks = self.model.masks_at(step);
        let batch = self.pick_batch(corpus.len());
        let utts: Vec<&Utterance> = batch.iter().map(|&i| &corpus[i]).collect();
        let noise: Vec<Noise> = utts
            .iter()
            .map(|u| Noise::sample(&self.model, u.n_words, u.n_phones(), &mut self.rng))
            .collect();

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let nodes = elbo_loss(&mut g, &bound, &self.model, &utts, &noise, &masks)?;
        let loss = g.value(nodes.loss).item();
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { step, total: loss });
        }
        let reports = (0..utts.len()).map(|b| nodes.report(&g, b)).collect();
        let mut grads = param_gradients(&g, &bound, &self.params, nodes.loss)?;
        let grad_norm = clip_global_norm(&mut grads, self.train.clip_norm);
        if !grad_norm.is_finite() {
            return Err(TrainError::Diverged { step, total: loss });
        }
        self.adam.step(&mut self.params, &grads);
        self.step += 1;
        Ok(StepReport {
            step,
            masks,
            batch,
            reports,
            loss,
            grad_norm,
        })
    }

    /// Loss terms with every dimension active and zero noise, without
    /// updating parameters.
    pub fn evaluate(&self, utts: &[Utterance]) -> Result<Vec<ElboReport>> {
        evaluate(&self.model, &self.params, utts)
    }
}

/// Posterior-mean loss terms of each utterance under frozen parameters.
pub fn evaluate(cfg: &ModelConfig, params: &ModelParams, utts: &[Utterance]) -> Result<Vec<ElboReport>> {
    let masks = Masks::all_active(cfg);
    utts.iter()
        .map(|u| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let noise = [Noise::zeros(cfg, u.n_words, u.n_phones())];
            let nodes = elbo_loss(&mut g, &bound, cfg, &[u], &noise, &masks)?;
            Ok(nodes.report(&g, 0))
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub first: TraceRow,
    pub last: TraceRow,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs `train.steps` updates. With `out_dir`, writes `trace.csv`,
/// periodic `ckpt_<step>.bin` and `final.bin`.
pub fn train(
    model: &ModelConfig,
    train: &TrainConfig,
    corpus: &[Utterance],
    init: Option<ModelParams>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = match init {
        Some(p) => Trainer::with_params(model.clone(), train.clone(), p)?,
        None => Trainer::new(model.clone(), train.clone())?,
    };
    if train.steps == 0 {
        return Err(TrainError::Config("steps must be positive".into()));
    }
    let mut trace_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("trace.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            writeln!(w, "{TRACE_HEADER}").map_err(io_err(&path))?;
            Some((w, path))
        }
        None => None,
    };
    let mut trace = Vec::new();
    let mut checkpoints = Vec::new();
    let mut first = None;
    let mut last = None;
    for i in 0..train.steps {
        let rep = trainer.step(corpus)?;
        let row = rep.trace_row();
        let is_last = i + 1 == train.steps;
        if i % train.log_every == 0 || is_last {
            if let Some((w, path)) = trace_file.as_mut() {
                writeln!(w, "{}", row.csv()).map_err(io_err(path))?;
            }
            trace.push(row.clone());
        }
        if first.is_none() {
            first = Some(row.clone());
        }
        if let Some(dir) = out_dir {
            if train.checkpoint_every > 0 && (i + 1) % train.checkpoint_every == 0 && !is_last {
                let path = dir.join(format!("ckpt_{:06}.bin", i + 1));
                save_checkpoint(&path, model, &trainer.params)?;
                checkpoints.push(path);
            }
        }
        last = Some(row);
    }
    if let Some((mut w, path)) = trace_file {
        w.flush().map_err(io_err(&path))?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.bin");
        save_checkpoint(&path, model, &trainer.params)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        params: trainer.params,
        trace,
        first: first.expect("steps > 0"),
        last: last.expect("steps > 0"),
        checkpoints,
    })
}

/// Central-difference check of the full ELBO gradient with respect to every
/// parameter, on one utterance with fixed noise.
pub fn check_gradients(
    cfg: &ModelConfig,
    params: &ModelParams,
    utt: &Utterance,
    noise: &Noise,
    masks: &Masks,
    step: f64,
    tolerance: f64,
) -> Result<GradCheck> {
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.tensors.values().cloned().collect();
    let build = |g: &mut Graph, ids: &[NodeId]| {
        let bound = Bound {
            ids: names.iter().cloned().zip(ids.iter().copied()).collect(),
        };
        elbo_loss(g, &bound, cfg, &[utt], std::slice::from_ref(noise), masks)
            .map(|n| n.loss)
            .map_err(|e| match e {
                TrainError::Model(ModelError::Graph(d)) => d,
                other => crate::diffcore::DiffError::Invalid(other.to_string()),
            })
    };
    Ok(grad_check(build, &inputs, step, tolerance)?)
}
