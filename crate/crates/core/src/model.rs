//! Hierarchical conditional VAE.
//!
//! Three latent levels (utterance, word, phone). Each level has a reference
//! encoder: a tanh pre-net over pooled spectral features followed by a gated
//! recurrent cell that steps over latent dimensions. At step `k` the cell
//! input is the pre-net output, the coarser-level latents, and the sum of the
//! projections of the samples already drawn for dimensions `1..k`; a
//! per-dimension head emits `(mu_k, log_sigma_k)`. The same per-dimension
//! projections feed the decoder, which predicts a duration per phone and
//! renders frames from the conditioned phone vector plus an intra-phone
//! position.
//!
//! With [`PosteriorKind::Independent`] the projection-sum input is dropped,
//! giving the plain fine-grained VAE with a factorized posterior.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{spans, CorpusError, Reader, Spectrogram, Utterance};
use crate::diffcore::{DiffError, Graph, NodeId, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Subtracted from `ln(duration)` before it enters the encoders.
const LOG_DURATION_CENTRE: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error("non-finite {what} at {level} level, dimension {dim}")]
    NonFinite {
        what: &'static str,
        level: Level,
        dim: usize,
    },
    #[error("phone {0} has no frames")]
    EmptyPhone(usize),
    #[error("word {0} has no phones")]
    EmptyWord(usize),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    File(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Utterance,
    Word,
    Phone,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Utterance, Level::Word, Level::Phone];

    pub fn prefix(self) -> &'static str {
        match self {
            Level::Utterance => "utt",
            Level::Word => "word",
            Level::Phone => "phone",
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Utterance => "utterance",
            Level::Word => "word",
            Level::Phone => "phone",
        })
    }
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "utterance" | "utt" => Ok(Level::Utterance),
            "word" => Ok(Level::Word),
            "phone" => Ok(Level::Phone),
            _ => Err(format!("unknown level {s:?} (expected phone, word or utterance)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorKind {
    /// `q(z_k | z_1..z_{k-1}, X)`: each dimension sees the projected samples
    /// of the previous ones.
    Conditional,
    /// `q(z_k | X)`: factorized baseline.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Spectral bins per frame.
    pub n_bins: usize,
    pub phone_embed_dim: usize,
    pub hidden_dim: usize,
    pub d_phone: usize,
    pub d_word: usize,
    pub d_utt: usize,
    pub proj_dim: usize,
    pub beta_phone: f64,
    pub beta_word: f64,
    pub beta_utt: f64,
    /// Weight of the log-duration error inside the reconstruction term.
    pub duration_weight: f64,
    pub posterior: PosteriorKind,
    /// Steps between activating successive latent dimensions; 0 disables the
    /// schedule.
    pub schedule_interval: u64,
    pub schedule_phone: bool,
    pub schedule_word: bool,
    pub schedule_utt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 12,
            n_bins: 129,
            phone_embed_dim: 16,
            hidden_dim: 64,
            d_phone: 3,
            d_word: 3,
            d_utt: 0,
            proj_dim: 16,
            beta_phone: 1e-3,
            beta_word: 1e-3,
            beta_utt: 1e-3,
            duration_weight: 1.0,
            posterior: PosteriorKind::Conditional,
            schedule_interval: 2000,
            schedule_phone: true,
            schedule_word: true,
            schedule_utt: true,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, level: Level) -> usize {
        match level {
            Level::Utterance => self.d_utt,
            Level::Word => self.d_word,
            Level::Phone => self.d_phone,
        }
    }

    pub fn beta(&self, level: Level) -> f64 {
        match level {
            Level::Utterance => self.beta_utt,
            Level::Word => self.beta_word,
            Level::Phone => self.beta_phone,
        }
    }

    fn scheduled(&self, level: Level) -> bool {
        self.schedule_interval > 0
            && match level {
                Level::Utterance => self.schedule_utt,
                Level::Word => self.schedule_word,
                Level::Phone => self.schedule_phone,
            }
    }

    /// Width of the coarser-level latent context fed to a level's encoder.
    fn context_dim(&self, level: Level) -> usize {
        match level {
            Level::Utterance => 0,
            Level::Word => self.d_utt,
            Level::Phone => self.d_word + self.d_utt,
        }
    }

    fn decoder_input_dim(&self) -> usize {
        let levels = Level::ALL.iter().filter(|&&l| self.dims(l) > 0).count();
        self.phone_embed_dim + levels * self.proj_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size == 0 || self.n_bins == 0 {
            return bad("vocab_size and n_bins must be positive");
        }
        if self.phone_embed_dim == 0 || self.hidden_dim == 0 || self.proj_dim == 0 {
            return bad("embedding, hidden and projection widths must be positive");
        }
        if self.d_phone == 0 || self.d_word == 0 {
            return bad("phone and word latent dims must be positive");
        }
        if [self.beta_phone, self.beta_word, self.beta_utt, self.duration_weight]
            .iter()
            .any(|b| !(b.is_finite() && *b >= 0.0))
        {
            return bad("beta weights and duration_weight must be finite and nonnegative");
        }
        Ok(())
    }

    /// Active-dimension masks for every level at a training step.
    pub fn masks_at(&self, step: u64) -> Masks {
        let mask = |level: Level| {
            let d = self.dims(level);
            if self.scheduled(level) {
                schedule_mask(step, d, self.schedule_interval)
            } else {
                vec![true; d]
            }
        };
        Masks {
            utt: mask(Level::Utterance),
            word: mask(Level::Word),
            phone: mask(Level::Phone),
        }
    }
}

/// Dimension `k` (0-based) is active once `step >= k · interval`.
pub fn schedule_mask(step: u64, d: usize, interval: u64) -> Vec<bool> {
    let interval = interval.max(1);
    (0..d).map(|k| step / interval >= k as u64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub utt: Vec<bool>,
    pub word: Vec<bool>,
    pub phone: Vec<bool>,
}

impl Masks {
    pub fn all_active(cfg: &ModelConfig) -> Self {
        Masks {
            utt: vec![true; cfg.d_utt],
            word: vec![true; cfg.d_word],
            phone: vec![true; cfg.d_phone],
        }
    }

    pub fn get(&self, level: Level) -> &[bool] {
        match level {
            Level::Utterance => &self.utt,
            Level::Word => &self.word,
            Level::Phone => &self.phone,
        }
    }

    pub fn active_count(&self, level: Level) -> usize {
        self.get(level).iter().filter(|&&a| a).count()
    }
}

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("nonzero shape")
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, &[rows, cols], (6.0 / (rows + cols) as f64).sqrt())
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = BTreeMap::new();
        let h = cfg.hidden_dim;
        let p = cfg.proj_dim;
        let feat = cfg.n_bins + 1;

        t.insert("embed".to_string(), uniform(&mut rng, &[cfg.vocab_size, cfg.phone_embed_dim], 0.5));
        for level in Level::ALL {
            let d = cfg.dims(level);
            if d == 0 {
                continue;
            }
            let l = level.prefix();
            t.insert(format!("{l}.in.w"), glorot(&mut rng, feat, h));
            t.insert(format!("{l}.in.b"), Tensor::zeros(&[h]));
            t.insert(format!("{l}.gru.wx"), glorot(&mut rng, h + cfg.context_dim(level), 3 * h));
            t.insert(format!("{l}.gru.wp"), glorot(&mut rng, p, 3 * h));
            t.insert(format!("{l}.gru.wh_ru"), glorot(&mut rng, h, 2 * h));
            t.insert(format!("{l}.gru.wh_n"), glorot(&mut rng, h, h));
            t.insert(format!("{l}.gru.b"), Tensor::zeros(&[3 * h]));
            for k in 0..d {
                t.insert(format!("{l}.head{k}.w"), uniform(&mut rng, &[h, 2], 0.1));
                t.insert(format!("{l}.head{k}.b"), Tensor::vector(vec![0.0, -1.0]));
                t.insert(format!("{l}.proj{k}"), uniform(&mut rng, &[1, p], 1.0));
            }
        }
        let din = cfg.decoder_input_dim();
        t.insert("dur.w1".into(), glorot(&mut rng, din, h));
        t.insert("dur.b1".into(), Tensor::zeros(&[h]));
        t.insert("dur.w2".into(), glorot(&mut rng, h, 1));
        // softplus(8) ≈ 8 frames
        t.insert("dur.b2".into(), Tensor::vector(vec![8.0]));
        t.insert("dec.w1".into(), glorot(&mut rng, din, h));
        t.insert("dec.wpos".into(), glorot(&mut rng, 1, h));
        t.insert("dec.b1".into(), Tensor::zeros(&[h]));
        t.insert("dec.w2".into(), glorot(&mut rng, h, h));
        t.insert("dec.b2".into(), Tensor::zeros(&[h]));
        t.insert("dec.out.w".into(), glorot(&mut rng, h, cfg.n_bins));
        t.insert("dec.out.b".into(), Tensor::zeros(&[cfg.n_bins]));
        Ok(ModelParams { tensors: t })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Records every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let id = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), id)
            })
            .collect();
        Bound { ids }
    }
}

/// Graph handles of bound parameters.
pub struct Bound {
    pub ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.into()))
    }
}

/// Mean of the frames assigned to each phone (`N × F`).
pub fn pool_frames_to_phones(spec: &Spectrogram, alignment: &[usize], n_phones: usize) -> Result<Vec<Vec<f64>>> {
    if alignment.len() != spec.frames {
        return Err(ModelError::Shape(format!(
            "alignment covers {} frames, spectrogram has {}",
            alignment.len(),
            spec.frames
        )));
    }
    let mut sums = vec![vec![0.0; spec.bins]; n_phones];
    let mut counts = vec![0usize; n_phones];
    for (t, &p) in alignment.iter().enumerate() {
        if p >= n_phones {
            return Err(ModelError::Shape(format!("frame {t} aligned to phone {p} of {n_phones}")));
        }
        counts[p] += 1;
        for (s, v) in sums[p].iter_mut().zip(spec.frame(t)) {
            *s += v;
        }
    }
    for (n, (row, &c)) in sums.iter_mut().zip(&counts).enumerate() {
        if c == 0 {
            return Err(ModelError::EmptyPhone(n));
        }
        row.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(sums)
}

/// Mean of the phone rows belonging to each word (`M × F`).
pub fn pool_phones_to_words(phone_features: &[Vec<f64>], word_map: &[usize]) -> Result<Vec<Vec<f64>>> {
    if phone_features.len() != word_map.len() {
        return Err(ModelError::Shape("word map length differs from phone count".into()));
    }
    if word_map.windows(2).any(|w| w[1] < w[0]) {
        return Err(ModelError::Shape(format!("word map {word_map:?} is not nondecreasing")));
    }
    let m = word_map.last().map_or(0, |w| w + 1);
    let width = phone_features.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; width]; m];
    let mut counts = vec![0usize; m];
    for (row, &w) in phone_features.iter().zip(word_map) {
        counts[w] += 1;
        for (s, v) in sums[w].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (w, (row, &c)) in sums.iter_mut().zip(&counts).enumerate() {
        if c == 0 {
            return Err(ModelError::EmptyWord(w));
        }
        row.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(sums)
}

/// `mu + exp(log_sigma) · eps`
pub fn reparameterize(g: &mut Graph, mu: NodeId, log_sigma: NodeId, eps: NodeId) -> Result<NodeId> {
    let sigma = g.exp(log_sigma);
    let spread = g.mul(sigma, eps)?;
    Ok(g.add(mu, spread)?)
}

/// `0.5 · (mu² + σ² − 1 − 2·log σ)` elementwise.
pub fn kl_standard_normal_node(g: &mut Graph, mu: NodeId, log_sigma: NodeId) -> Result<NodeId> {
    let mu2 = g.square(mu);
    let two_ls = g.scale(log_sigma, 2.0);
    let var = g.exp(two_ls);
    let a = g.add(mu2, var)?;
    let b = g.sub(a, two_ls)?;
    let c = g.add_scalar(b, -1.0);
    Ok(g.scale(c, 0.5))
}

/// Standard-normal reparameterization noise for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub utt: Vec<f64>,
    /// `M × d_word`, row-major.
    pub word: Vec<f64>,
    /// `N × d_phone`, row-major.
    pub phone: Vec<f64>,
}

impl Noise {
    pub fn zeros(cfg: &ModelConfig, n_words: usize, n_phones: usize) -> Self {
        Noise {
            utt: vec![0.0; cfg.d_utt],
            word: vec![0.0; n_words * cfg.d_word],
            phone: vec![0.0; n_phones * cfg.d_phone],
        }
    }

    pub fn sample(cfg: &ModelConfig, n_words: usize, n_phones: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Noise {
            utt: draw(cfg.d_utt),
            word: draw(n_words * cfg.d_word),
            phone: draw(n_phones * cfg.d_phone),
        }
    }

    fn get(&self, level: Level) -> &[f64] {
        match level {
            Level::Utterance => &self.utt,
            Level::Word => &self.word,
            Level::Phone => &self.phone,
        }
    }
}

/// Graph nodes of one level's posterior: one `rows × 1` column per dimension.
pub struct LevelNodes {
    pub mu: Vec<NodeId>,
    pub log_sigma: Vec<NodeId>,
    pub sample: Vec<NodeId>,
    pub kl: Vec<NodeId>,
    /// `rows × d` matrix of samples.
    pub z: NodeId,
    /// `Σ_k Proj_k(z_k)`, `rows × proj_dim`.
    pub projection: NodeId,
}

/// Runs the recurrent posterior over latent dimensions for `rows` units.
///
/// `features` is the pre-net output (`rows × H`), `context` the coarser
/// latents (`rows × C`) if any. `noise` is `rows × d`, row-major. Inactive
/// dimensions record `mu = log_sigma = sample = 0` and contribute neither KL
/// nor projection.
#[allow(clippy::too_many_arguments)]
pub fn conditional_encode(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    level: Level,
    features: NodeId,
    context: Option<NodeId>,
    active: &[bool],
    noise: &[f64],
) -> Result<LevelNodes> {
    let l = level.prefix();
    let d = cfg.dims(level);
    let h = cfg.hidden_dim;
    let rows = g.shape(features)[0];
    if active.len() != d || noise.len() != rows * d {
        return Err(ModelError::Shape(format!(
            "{level} level: mask of {} / noise of {} for {rows} units × {d} dims",
            active.len(),
            noise.len()
        )));
    }
    let input = match context {
        Some(c) => g.concat_cols(&[features, c])?,
        None => features,
    };
    let wx = bound.id(&format!("{l}.gru.wx"))?;
    let xg = g.matmul(input, wx)?;
    let gb = bound.id(&format!("{l}.gru.b"))?;
    let xg = g.add(xg, gb)?;
    let wp = bound.id(&format!("{l}.gru.wp"))?;
    let wh_ru = bound.id(&format!("{l}.gru.wh_ru"))?;
    let wh_n = bound.id(&format!("{l}.gru.wh_n"))?;

    let zero_col = g.constant(Tensor::zeros(&[rows, 1]));
    let mut state: Option<NodeId> = None;
    let mut proj_sum: Option<NodeId> = None;
    let mut out = LevelNodes {
        mu: Vec::with_capacity(d),
        log_sigma: Vec::with_capacity(d),
        sample: Vec::with_capacity(d),
        kl: Vec::with_capacity(d),
        z: zero_col,
        projection: zero_col,
    };

    for k in 0..d {
        let mut pre = xg;
        if cfg.posterior == PosteriorKind::Conditional {
            if let Some(ps) = proj_sum {
                let pp = g.matmul(ps, wp)?;
                pre = g.add(pre, pp)?;
            }
        }
        let x_ru = g.slice_cols(pre, 0, 2 * h)?;
        let x_n = g.slice_cols(pre, 2 * h, h)?;
        let next = match state {
            None => {
                let ru = g.sigmoid(x_ru);
                let u = g.slice_cols(ru, h, h)?;
                let n = g.tanh(x_n);
                // s' = (1 - u)·n with s = 0
                let un = g.mul(u, n)?;
                g.sub(n, un)?
            }
            Some(s) => {
                let hs = g.matmul(s, wh_ru)?;
                let ru_pre = g.add(x_ru, hs)?;
                let ru = g.sigmoid(ru_pre);
                let r = g.slice_cols(ru, 0, h)?;
                let u = g.slice_cols(ru, h, h)?;
                let hn = g.matmul(s, wh_n)?;
                let rhn = g.mul(r, hn)?;
                let n_pre = g.add(x_n, rhn)?;
                let n = g.tanh(n_pre);
                // s' = n + u·(s − n)
                let diff = g.sub(s, n)?;
                let ud = g.mul(u, diff)?;
                g.add(n, ud)?
            }
        };
        state = Some(next);

        if !active[k] {
            out.mu.push(zero_col);
            out.log_sigma.push(zero_col);
            out.sample.push(zero_col);
            out.kl.push(zero_col);
            continue;
        }
        let hw = bound.id(&format!("{l}.head{k}.w"))?;
        let hb = bound.id(&format!("{l}.head{k}.b"))?;
        let head = g.linear(next, hw, hb)?;
        let mu = g.slice_cols(head, 0, 1)?;
        let log_sigma = g.slice_cols(head, 1, 1)?;
        for (what, node) in [("mean", mu), ("log-sigma", log_sigma)] {
            if !g.value(node).is_finite() {
                return Err(ModelError::NonFinite { what, level, dim: k });
            }
        }
        let eps: Vec<f64> = (0..rows).map(|r| noise[r * d + k]).collect();
        let eps = g.constant(Tensor::matrix(rows, 1, eps)?);
        let z = reparameterize(g, mu, log_sigma, eps)?;
        let kl = kl_standard_normal_node(g, mu, log_sigma)?;
        let proj = bound.id(&format!("{l}.proj{k}"))?;
        let pz = g.matmul(z, proj)?;
        proj_sum = Some(match proj_sum {
            Some(ps) => g.add(ps, pz)?,
            None => pz,
        });
        out.mu.push(mu);
        out.log_sigma.push(log_sigma);
        out.sample.push(z);
        out.kl.push(kl);
    }
    out.z = g.concat_cols(&out.sample)?;
    out.projection = match proj_sum {
        Some(ps) => ps,
        None => g.constant(Tensor::zeros(&[rows, cfg.proj_dim])),
    };
    Ok(out)
}

/// Projects fixed latent values (`rows × d`) through a level's projections.
fn project_fixed(g: &mut Graph, bound: &Bound, cfg: &ModelConfig, level: Level, z: &[f64], rows: usize) -> Result<NodeId> {
    let d = cfg.dims(level);
    let l = level.prefix();
    let mut acc: Option<NodeId> = None;
    for k in 0..d {
        let col: Vec<f64> = (0..rows).map(|r| z[r * d + k]).collect();
        if col.iter().all(|v| *v == 0.0) {
            continue;
        }
        let c = g.constant(Tensor::matrix(rows, 1, col)?);
        let proj = bound.id(&format!("{l}.proj{k}"))?;
        let pz = g.matmul(c, proj)?;
        acc = Some(match acc {
            Some(a) => g.add(a, pz)?,
            None => pz,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::zeros(&[rows, cfg.proj_dim])),
    })
}

/// Flattened structure of a batch of utterances.
pub struct BatchLayout {
    pub phone_ids: Vec<usize>,
    /// Global word index of each phone.
    pub phone_word: Vec<usize>,
    pub phone_utt: Vec<usize>,
    pub word_utt: Vec<usize>,
    /// Frame counts used to lay out decoder frames.
    pub durations: Vec<usize>,
    pub phone_offsets: Vec<usize>,
    pub word_offsets: Vec<usize>,
    pub frame_offsets: Vec<usize>,
}

impl BatchLayout {
    pub fn new(units: &[(&[usize], &[usize], &[usize])]) -> Result<Self> {
        let mut lay = BatchLayout {
            phone_ids: Vec::new(),
            phone_word: Vec::new(),
            phone_utt: Vec::new(),
            word_utt: Vec::new(),
            durations: Vec::new(),
            phone_offsets: vec![0],
            word_offsets: vec![0],
            frame_offsets: vec![0],
        };
        for (b, (ids, wm, durs)) in units.iter().enumerate() {
            if ids.is_empty() || ids.len() != wm.len() || ids.len() != durs.len() {
                return Err(ModelError::Shape(format!("utterance {b}: inconsistent phone arrays")));
            }
            if wm[0] != 0 || wm.windows(2).any(|w| w[1] < w[0] || w[1] > w[0] + 1) {
                return Err(ModelError::Shape(format!("utterance {b}: word map {wm:?} is not a nondecreasing surjection")));
            }
            let m = wm[wm.len() - 1] + 1;
            let w0 = *lay.word_offsets.last().unwrap();
            lay.phone_ids.extend_from_slice(ids);
            lay.phone_word.extend(wm.iter().map(|w| w + w0));
            lay.phone_utt.extend(std::iter::repeat_n(b, ids.len()));
            lay.word_utt.extend(std::iter::repeat_n(b, m));
            lay.durations.extend_from_slice(durs);
            lay.phone_offsets.push(lay.phone_ids.len());
            lay.word_offsets.push(w0 + m);
            lay.frame_offsets.push(lay.frame_offsets.last().unwrap() + durs.iter().sum::<usize>());
        }
        Ok(lay)
    }

    pub fn n_utts(&self) -> usize {
        self.phone_offsets.len() - 1
    }

    /// Global phone index and normalized intra-phone position of every frame.
    fn frame_layout(&self) -> (Vec<usize>, Vec<f64>) {
        let mut phone = Vec::new();
        let mut pos = Vec::new();
        for (n, &d) in self.durations.iter().enumerate() {
            for i in 0..d {
                phone.push(n);
                pos.push(if d > 1 { i as f64 / (d - 1) as f64 } else { 0.5 });
            }
        }
        (phone, pos)
    }
}

pub struct DecoderNodes {
    /// Predicted frame counts, `N × 1`.
    pub durations: NodeId,
    /// Decoded frames, `T × F`.
    pub frames: NodeId,
}

/// Duration predictor and frame decoder over conditioned phone vectors
/// `phone encoding ⊕ Proj(z_p) ⊕ Proj(z_w) ⊕ Proj(z_u)`.
pub fn decode_nodes(
    g: &mut Graph,
    bound: &Bound,
    layout: &BatchLayout,
    projections: &[NodeId],
) -> Result<DecoderNodes> {
    let embed = bound.id("embed")?;
    let y = g.gather_rows(embed, &layout.phone_ids)?;
    let mut parts = vec![y];
    parts.extend_from_slice(projections);
    let cond = g.concat_cols(&parts)?;

    let dh = g.linear(cond, bound.id("dur.w1")?, bound.id("dur.b1")?)?;
    let dh = g.tanh(dh);
    let dpre = g.linear(dh, bound.id("dur.w2")?, bound.id("dur.b2")?)?;
    let durations = g.softplus(dpre);

    let (frame_phone, frame_pos) = layout.frame_layout();
    if frame_phone.is_empty() {
        return Err(ModelError::Shape("no frames to decode".into()));
    }
    let per_phone = g.matmul(cond, bound.id("dec.w1")?)?;
    let per_frame = g.gather_rows(per_phone, &frame_phone)?;
    let pos = g.constant(Tensor::matrix(frame_pos.len(), 1, frame_pos)?);
    let pos_h = g.matmul(pos, bound.id("dec.wpos")?)?;
    let h1 = g.add(per_frame, pos_h)?;
    let h1 = g.add(h1, bound.id("dec.b1")?)?;
    let h1 = g.tanh(h1);
    let h2 = g.linear(h1, bound.id("dec.w2")?, bound.id("dec.b2")?)?;
    let h2 = g.tanh(h2);
    let frames = g.linear(h2, bound.id("dec.out.w")?, bound.id("dec.out.b")?)?;
    Ok(DecoderNodes { durations, frames })
}

/// Encoder inputs at phone, word and utterance granularity.
type FeatureRows = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>);

fn feature_rows(utt: &Utterance) -> Result<FeatureRows> {
    let mut phone = pool_frames_to_phones(&utt.spectrogram, &utt.alignment, utt.n_phones())?;
    for (row, p) in phone.iter_mut().zip(&utt.phones) {
        row.push((p.duration_frames as f64).ln() - LOG_DURATION_CENTRE);
    }
    let word = pool_phones_to_words(&phone, &utt.word_map())?;
    let width = phone[0].len();
    let mut whole = vec![0.0; width];
    for t in 0..utt.spectrogram.frames {
        for (w, v) in whole.iter_mut().zip(utt.spectrogram.frame(t)) {
            *w += v / utt.spectrogram.frames as f64;
        }
    }
    whole[width - 1] = phone.iter().map(|r| r[width - 1]).sum::<f64>() / phone.len() as f64;
    Ok((phone, word, whole))
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    Ok(Tensor::from_rows(rows)?)
}

/// Everything the loss needs from a forward pass over a batch.
pub struct ForwardNodes {
    pub layout: BatchLayout,
    pub utt: Option<LevelNodes>,
    pub word: LevelNodes,
    pub phone: LevelNodes,
    pub decoder: DecoderNodes,
    /// Teacher-forced targets, `T × F`.
    pub target_frames: NodeId,
    /// Ground-truth durations, `N × 1`.
    pub target_durations: NodeId,
}

fn pre_net(g: &mut Graph, bound: &Bound, level: Level, feats: Tensor) -> Result<NodeId> {
    let l = level.prefix();
    let x = g.constant(feats);
    let h = g.linear(x, bound.id(&format!("{l}.in.w"))?, bound.id(&format!("{l}.in.b"))?)?;
    Ok(g.tanh(h))
}

/// Encoder and teacher-forced decoder over a batch: pool, encode the
/// utterance and word levels, encode phones conditioned on their word (and
/// utterance) latents, concatenate via the word map, decode.
pub fn forward_batch(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    utts: &[&Utterance],
    noise: &[Noise],
    masks: &Masks,
) -> Result<ForwardNodes> {
    if utts.is_empty() || utts.len() != noise.len() {
        return Err(ModelError::Shape("batch and noise sizes differ or batch is empty".into()));
    }
    let wms: Vec<Vec<usize>> = utts.iter().map(|u| u.word_map()).collect();
    let ids: Vec<Vec<usize>> = utts.iter().map(|u| u.phones.iter().map(|p| p.phone_id as usize).collect()).collect();
    let durs: Vec<Vec<usize>> = utts.iter().map(|u| u.durations()).collect();
    let units: Vec<(&[usize], &[usize], &[usize])> = (0..utts.len())
        .map(|b| (ids[b].as_slice(), wms[b].as_slice(), durs[b].as_slice()))
        .collect();
    let layout = BatchLayout::new(&units)?;
    if let Some(&bad) = layout.phone_ids.iter().find(|&&p| p >= cfg.vocab_size) {
        return Err(ModelError::Shape(format!("phone id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }

    let mut phone_rows = Vec::new();
    let mut word_rows = Vec::new();
    let mut utt_rows = Vec::new();
    let mut targets = Vec::new();
    for u in utts {
        if u.spectrogram.bins != cfg.n_bins {
            return Err(ModelError::Shape(format!("spectrogram has {} bins, model expects {}", u.spectrogram.bins, cfg.n_bins)));
        }
        let (p, w, whole) = feature_rows(u)?;
        phone_rows.extend(p);
        word_rows.extend(w);
        utt_rows.push(whole);
        targets.extend_from_slice(&u.spectrogram.data);
    }
    let gather_noise = |level: Level, counts: &dyn Fn(usize) -> usize| -> Result<Vec<f64>> {
        let mut v = Vec::new();
        for (b, n) in noise.iter().enumerate() {
            let src = n.get(level);
            if src.len() != counts(b) * cfg.dims(level) {
                return Err(ModelError::Shape(format!("utterance {b}: {level} noise has {} values", src.len())));
            }
            v.extend_from_slice(src);
        }
        Ok(v)
    };

    let utt = if cfg.d_utt > 0 {
        let f = pre_net(g, bound, Level::Utterance, stack(&utt_rows)?)?;
        let nz = gather_noise(Level::Utterance, &|_| 1)?;
        Some(conditional_encode(g, bound, cfg, Level::Utterance, f, None, &masks.utt, &nz)?)
    } else {
        None
    };

    let wf = pre_net(g, bound, Level::Word, stack(&word_rows)?)?;
    let word_ctx = match &utt {
        Some(u) => Some(g.gather_rows(u.z, &layout.word_utt)?),
        None => None,
    };
    let nz = gather_noise(Level::Word, &|b| layout.word_offsets[b + 1] - layout.word_offsets[b])?;
    let word = conditional_encode(g, bound, cfg, Level::Word, wf, word_ctx, &masks.word, &nz)?;

    let pf = pre_net(g, bound, Level::Phone, stack(&phone_rows)?)?;
    let mut ctx = vec![g.gather_rows(word.z, &layout.phone_word)?];
    if let Some(u) = &utt {
        ctx.push(g.gather_rows(u.z, &layout.phone_utt)?);
    }
    let phone_ctx = g.concat_cols(&ctx)?;
    let nz = gather_noise(Level::Phone, &|b| layout.phone_offsets[b + 1] - layout.phone_offsets[b])?;
    let phone = conditional_encode(g, bound, cfg, Level::Phone, pf, Some(phone_ctx), &masks.phone, &nz)?;

    let mut projections = vec![phone.projection, g.gather_rows(word.projection, &layout.phone_word)?];
    if let Some(u) = &utt {
        projections.push(g.gather_rows(u.projection, &layout.phone_utt)?);
    }
    let decoder = decode_nodes(g, bound, &layout, &projections)?;

    let t_total = *layout.frame_offsets.last().unwrap();
    let target_frames = g.constant(Tensor::matrix(t_total, cfg.n_bins, targets)?);
    let td: Vec<f64> = layout.durations.iter().map(|&d| d as f64).collect();
    let target_durations = g.constant(Tensor::matrix(td.len(), 1, td)?);
    Ok(ForwardNodes {
        layout,
        utt,
        word,
        phone,
        decoder,
        target_frames,
        target_durations,
    })
}

/// Posterior parameters of one latent unit (word, phone or utterance), per
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStep {
    pub mu: f64,
    pub log_sigma: f64,
    pub sample: f64,
}

/// Sampled latents and their posteriors for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHierarchy {
    pub utt: Vec<PosteriorStep>,
    /// `M` rows of `d_word` steps.
    pub word: Vec<Vec<PosteriorStep>>,
    /// `N` rows of `d_phone` steps.
    pub phone: Vec<Vec<PosteriorStep>>,
}

impl LatentHierarchy {
    pub fn samples(&self, level: Level) -> Vec<f64> {
        let rows: Vec<&Vec<PosteriorStep>> = match level {
            Level::Utterance => vec![&self.utt],
            Level::Word => self.word.iter().collect(),
            Level::Phone => self.phone.iter().collect(),
        };
        rows.into_iter().flat_map(|r| r.iter().map(|s| s.sample)).collect()
    }
}

fn read_level(g: &Graph, nodes: &LevelNodes, rows: std::ops::Range<usize>) -> Vec<Vec<PosteriorStep>> {
    rows.map(|r| {
        (0..nodes.mu.len())
            .map(|k| PosteriorStep {
                mu: g.value(nodes.mu[k]).data()[r],
                log_sigma: g.value(nodes.log_sigma[k]).data()[r],
                sample: g.value(nodes.sample[k]).data()[r],
            })
            .collect()
    })
    .collect()
}

impl ForwardNodes {
    /// Posterior parameters of utterance `b` of the batch.
    pub fn latents(&self, g: &Graph, b: usize) -> LatentHierarchy {
        let lay = &self.layout;
        LatentHierarchy {
            utt: self
                .utt
                .as_ref()
                .map(|u| read_level(g, u, b..b + 1).remove(0))
                .unwrap_or_default(),
            word: read_level(g, &self.word, lay.word_offsets[b]..lay.word_offsets[b + 1]),
            phone: read_level(g, &self.phone, lay.phone_offsets[b]..lay.phone_offsets[b + 1]),
        }
    }

    /// Decoded frames of utterance `b`.
    pub fn reconstruction(&self, g: &Graph, b: usize, n_bins: usize) -> Spectrogram {
        let (t0, t1) = (self.layout.frame_offsets[b], self.layout.frame_offsets[b + 1]);
        let data = g.value(self.decoder.frames).data()[t0 * n_bins..t1 * n_bins].to_vec();
        Spectrogram::new(t1 - t0, n_bins, data)
    }
}

/// Single-utterance forward pass with frozen parameters.
pub fn forward(
    utt: &Utterance,
    params: &ModelParams,
    cfg: &ModelConfig,
    noise: &Noise,
    masks: &Masks,
) -> Result<(LatentHierarchy, Spectrogram, Vec<f64>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let f = forward_batch(&mut g, &bound, cfg, &[utt], std::slice::from_ref(noise), masks)?;
    let durs = g.value(f.decoder.durations).data().to_vec();
    Ok((f.latents(&g, 0), f.reconstruction(&g, 0, cfg.n_bins), durs))
}

/// Latent values for decoding; each vector is row-major `units × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLatents {
    pub utt: Vec<f64>,
    pub word: Vec<f64>,
    pub phone: Vec<f64>,
}

impl FixedLatents {
    /// All-zero latents: neutral prosody.
    pub fn zeros(cfg: &ModelConfig, n_words: usize, n_phones: usize) -> Self {
        FixedLatents {
            utt: vec![0.0; cfg.d_utt],
            word: vec![0.0; n_words * cfg.d_word],
            phone: vec![0.0; n_phones * cfg.d_phone],
        }
    }

    pub fn from_hierarchy(h: &LatentHierarchy) -> Self {
        FixedLatents {
            utt: h.samples(Level::Utterance),
            word: h.samples(Level::Word),
            phone: h.samples(Level::Phone),
        }
    }

    pub fn get_mut(&mut self, level: Level) -> &mut Vec<f64> {
        match level {
            Level::Utterance => &mut self.utt,
            Level::Word => &mut self.word,
            Level::Phone => &mut self.phone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Continuous predictor output per phone.
    pub predicted_durations: Vec<f64>,
    /// Frame counts used to lay out `frames`.
    pub frame_durations: Vec<usize>,
    pub frames: Spectrogram,
}

/// Decodes phones with fixed latents. Without `durations`, the predictor's
/// output is rounded (minimum one frame) to lay out the frames.
pub fn decode(
    params: &ModelParams,
    cfg: &ModelConfig,
    phone_ids: &[usize],
    word_map: &[usize],
    latents: &FixedLatents,
    durations: Option<&[usize]>,
) -> Result<Decoded> {
    let n = phone_ids.len();
    let m = word_map.last().map_or(0, |w| w + 1);
    if latents.phone.len() != n * cfg.d_phone || latents.word.len() != m * cfg.d_word || latents.utt.len() != cfg.d_utt {
        return Err(ModelError::Shape("latent sizes do not match the phone/word structure".into()));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let ones = vec![1usize; n];
    let first = BatchLayout::new(&[(phone_ids, word_map, &ones)])?;
    let mut projections = vec![
        project_fixed(&mut g, &bound, cfg, Level::Phone, &latents.phone, n)?,
    ];
    let pw = project_fixed(&mut g, &bound, cfg, Level::Word, &latents.word, m)?;
    projections.push(g.gather_rows(pw, &first.phone_word)?);
    if cfg.d_utt > 0 {
        let pu = project_fixed(&mut g, &bound, cfg, Level::Utterance, &latents.utt, 1)?;
        projections.push(g.gather_rows(pu, &vec![0; n])?);
    }
    let first_pass = decode_nodes(&mut g, &bound, &first, &projections)?;
    let predicted = g.value(first_pass.durations).data().to_vec();
    let frame_durations: Vec<usize> = match durations {
        Some(d) => d.to_vec(),
        None => predicted.iter().map(|d| (d.round() as usize).max(1)).collect(),
    };
    let layout = BatchLayout::new(&[(phone_ids, word_map, &frame_durations)])?;
    let out = decode_nodes(&mut g, &bound, &layout, &projections)?;
    let t: usize = frame_durations.iter().sum();
    let frames = Spectrogram::new(t, cfg.n_bins, g.value(out.frames).data().to_vec());
    Ok(Decoded {
        predicted_durations: predicted,
        frame_durations,
        frames,
    })
}

/// Frame interval of each phone under the given frame counts.
pub fn phone_spans(durations: &[usize]) -> Vec<(usize, usize)> {
    spans(durations)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// `HVCK`, version, length-prefixed TOML echo of the config, then named
/// tensors in name order.
pub fn encode_checkpoint(cfg: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let echo = toml::to_string(cfg).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    put_u32(&mut buf, echo.len())?;
    buf.extend_from_slice(echo.as_bytes());
    put_u32(&mut buf, params.tensors.len())?;
    for (name, t) in &params.tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut buf, e)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic (expected \"HVCK\")".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u32("config length")? as usize;
    let echo = std::str::from_utf8(r.take(len, "config")?)
        .map_err(|e| ModelError::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let cfg: ModelConfig = toml::from_str(echo).map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nl = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nl, "name")?)
            .map_err(|_| r.corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| r.corrupt(format!("tensor {name} size overflows")))?;
        let data = r.f64s(n, &name)?;
        let t = Tensor::new(shape, data).map_err(|e| r.corrupt(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }
    if !r.finished() {
        return Err(r.corrupt("trailing bytes after last tensor".into()).into());
    }
    let params = ModelParams { tensors };
    let expected = ModelParams::init(&cfg, 0)?;
    for (name, t) in &expected.tensors {
        let got = params.get(name)?;
        if got.shape() != t.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has shape {:?}, config implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if !params.is_finite() {
        return Err(ModelError::Checkpoint("non-finite parameter values".into()));
    }
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let bytes = encode_checkpoint(cfg, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Gradient of the scalar `loss` for every parameter, by name.
pub fn param_gradients(g: &Graph, bound: &Bound, params: &ModelParams, loss: NodeId) -> Result<HashMap<String, Tensor>> {
    let grads = g.backward(loss)?;
    Ok(bound
        .ids
        .iter()
        .map(|(name, &id)| {
            let shape = params.tensors[name].shape();
            (name.clone(), grads.get_or_zeros(id, shape))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            n_bins: 129,
            phone_embed_dim: 4,
            hidden_dim: 6,
            proj_dim: 3,
            ..ModelConfig::default()
        }
    }

    fn spec_from(rows: &[Vec<f64>]) -> Spectrogram {
        let bins = rows[0].len();
        Spectrogram::new(rows.len(), bins, rows.concat())
    }

    #[test]
    fn pooling_single_phone_is_global_mean() {
        let s = spec_from(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]]);
        let p = pool_frames_to_phones(&s, &[0, 0, 0], 1).unwrap();
        assert_eq!(p, vec![vec![3.0, 3.0]]);
    }

    #[test]
    fn pooling_two_constant_phones() {
        let s = spec_from(&[vec![1.0], vec![1.0], vec![4.0], vec![4.0], vec![4.0]]);
        let p = pool_frames_to_phones(&s, &[0, 0, 1, 1, 1], 2).unwrap();
        assert_eq!(p, vec![vec![1.0], vec![4.0]]);
    }

    #[test]
    fn pooling_rejects_empty_phone() {
        let s = spec_from(&[vec![1.0], vec![2.0]]);
        assert!(matches!(pool_frames_to_phones(&s, &[0, 2], 3), Err(ModelError::EmptyPhone(1))));
    }

    #[test]
    fn word_pooling_cases() {
        let rows = vec![vec![1.0, 0.0], vec![3.0, 2.0]];
        assert_eq!(pool_phones_to_words(&rows, &[0, 1]).unwrap(), rows);
        assert_eq!(pool_phones_to_words(&rows, &[0, 0]).unwrap(), vec![vec![2.0, 1.0]]);
        assert!(matches!(pool_phones_to_words(&rows, &[0, 2]), Err(ModelError::EmptyWord(1))));
        assert!(pool_phones_to_words(&rows, &[1, 0]).is_err());
    }

    #[test]
    fn schedule_mask_definition() {
        assert_eq!(schedule_mask(0, 3, 2000), vec![true, false, false]);
        assert_eq!(schedule_mask(2000, 3, 2000), vec![true, true, false]);
        assert_eq!(schedule_mask(1999, 3, 2000), vec![true, false, false]);
        assert_eq!(schedule_mask(u64::MAX, 3, 2000), vec![true, true, true]);
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::new();
        let mu = g.param(Tensor::scalar(0.7));
        let ls = g.param(Tensor::scalar(-0.3));
        let zero = g.constant(Tensor::scalar(0.0));
        let z = reparameterize(&mut g, mu, ls, zero).unwrap();
        assert_eq!(g.value(z).item(), 0.7);

        let mu0 = g.constant(Tensor::scalar(0.0));
        let ls0 = g.constant(Tensor::scalar(0.0));
        let one = g.constant(Tensor::scalar(1.0));
        let z = reparameterize(&mut g, mu0, ls0, one).unwrap();
        assert_eq!(g.value(z).item(), 1.0);

        let eps = g.constant(Tensor::scalar(1.3));
        let z = reparameterize(&mut g, mu, ls, eps).unwrap();
        let gr = g.backward(z).unwrap();
        assert_eq!(gr.get(mu).unwrap().item(), 1.0);
        let expect = (-0.3f64).exp() * 1.3;
        assert!((gr.get(ls).unwrap().item() - expect).abs() < 1e-15);
        // finite differences
        let h = 1e-6;
        let f = |ls: f64| 0.7 + ls.exp() * 1.3;
        let num = (f(-0.3 + h) - f(-0.3 - h)) / (2.0 * h);
        assert!((num - expect).abs() / expect < 1e-8);
    }

    fn utterance() -> Utterance {
        let cfg = CorpusConfig { seed: 4, ..CorpusConfig::desk() };
        generate_corpus(&cfg, 1).unwrap().remove(0)
    }

    #[test]
    fn inactive_dims_are_zero() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let u = utterance();
        let masks = Masks {
            utt: vec![],
            word: vec![false; 3],
            phone: vec![false; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = Noise::sample(&cfg, u.n_words, u.n_phones(), &mut rng);
        let (lat, _, _) = forward(&u, &params, &cfg, &noise, &masks).unwrap();
        for row in lat.phone.iter().chain(&lat.word) {
            for s in row {
                assert_eq!((s.mu, s.log_sigma, s.sample), (0.0, 0.0, 0.0));
            }
        }
    }

    #[test]
    fn zero_noise_samples_at_mean() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 1).unwrap();
        let u = utterance();
        let noise = Noise::zeros(&cfg, u.n_words, u.n_phones());
        let (lat, _, _) = forward(&u, &params, &cfg, &noise, &Masks::all_active(&cfg)).unwrap();
        for row in lat.phone.iter().chain(&lat.word) {
            for s in row {
                assert_eq!(s.sample, s.mu);
            }
        }
    }

    #[test]
    fn neutral_decode_is_deterministic_and_identical_phones_match() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 2).unwrap();
        let ids = [5, 5, 0];
        let wm = [0, 0, 1];
        let z = FixedLatents::zeros(&cfg, 2, 3);
        let a = decode(&params, &cfg, &ids, &wm, &z, Some(&[3, 3, 4])).unwrap();
        let b = decode(&params, &cfg, &ids, &wm, &z, Some(&[3, 3, 4])).unwrap();
        assert_eq!(a, b);
        // phones 0 and 1 share id, word and (zero) latents
        assert_eq!(&a.frames.data[..3 * cfg.n_bins], &a.frames.data[3 * cfg.n_bins..6 * cfg.n_bins]);
        assert!(a.predicted_durations.iter().all(|d| *d > 0.0));
    }

    #[test]
    fn single_phone_utterance_shapes() {
        use crate::corpus::{render_utterance, PhoneSpec};
        let ccfg = CorpusConfig::desk();
        let u = render_utterance(
            &ccfg,
            vec![PhoneSpec { phone_id: 1, is_vowel: true, duration_frames: 6, f0_hz: 200.0, energy_gain: 1.0, word_index: 0 }],
            0,
        )
        .unwrap();
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let (lat, rec, durs) = forward(&u, &params, &cfg, &Noise::zeros(&cfg, 1, 1), &Masks::all_active(&cfg)).unwrap();
        assert_eq!(lat.word.len(), 1);
        assert_eq!(lat.phone.len(), 1);
        assert_eq!(rec.frames, 6);
        assert_eq!(durs.len(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config();
        let params = ModelParams::init(&cfg, 9).unwrap();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        let (c2, p2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(p2, params);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
