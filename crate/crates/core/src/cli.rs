//! Command-line front end: config loading, subcommands and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate_corpus, load_corpus, save_corpus, CorpusConfig, CorpusError, Utterance};
use crate::disentangle::{
    format_table, grid, traverse, variance_ratio, write_report_csv, AttributeProbe, Carrier, DisentangleError,
    ModelProbe,
};
use crate::metrics::{
    f0_error_metrics, f0_track_spec, mcd13, mcd_frame, measure_generated, write_attributes_csv, write_metrics_csv,
    yin_f0, F0Track, MeasureConfig, MelFilterbank, MetricsError, MetricsRow, YinConfig,
};
use crate::model::{
    forward, load_checkpoint, Level, Masks, ModelConfig, ModelError, ModelParams, Noise, PosteriorKind,
};
use crate::training::{check_gradients, train, TrainConfig, TrainError, Trainer, GRAD_CHECK_STEP};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

const SCHEMA: &str = "\
config schema (TOML; unknown keys are rejected, every key optional):
  seed = <u64>                 overrides corpus.seed and train.seed
  out = <dir>                  output directory (default \"out\")
  corpus_size = <usize>        utterances to generate (default 500)
  corpus_file = <path>         load this corpus instead of generating
  [corpus]  vocab_size, vowel_ids, sample_rate, frame_length, hop_length, fft_bins,
            f0_range, energy_range, duration_range, words_range, phones_per_word_range, seed
  [model]   vocab_size, n_bins, phone_embed_dim, hidden_dim, d_phone, d_word, d_utt, proj_dim,
            beta_phone, beta_word, beta_utt, duration_weight, posterior = \"conditional\"|\"independent\",
            schedule_interval, schedule_phone, schedule_word, schedule_utt
  [train]   steps, batch_size, learning_rate, beta1, beta2, epsilon, clip_norm, seed, log_every,
            checkpoint_every
  [eval]    max_utterances, n_samples, n_seeds, carrier_phones, carrier_words, carrier_target";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Runtime(e.to_string()),
            ModelError::File(inner) => inner.into(),
            ModelError::Graph(_) | ModelError::NonFinite { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) | TrainError::EmptyCorpus => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DisentangleError> for CliError {
    fn from(e: DisentangleError) -> Self {
        match e {
            DisentangleError::Model(m) => m.into(),
            DisentangleError::Invalid(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// 0 evaluates every utterance.
    pub max_utterances: usize,
    pub n_samples: usize,
    pub n_seeds: usize,
    pub carrier_phones: Vec<usize>,
    pub carrier_words: Vec<usize>,
    pub carrier_target: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_utterances: 0,
            n_samples: 100,
            n_seeds: 5,
            carrier_phones: vec![6, 1, 8, 3, 10, 0],
            carrier_words: vec![0, 0, 0, 1, 1, 1],
            carrier_target: 1,
        }
    }
}

impl EvalOptions {
    pub fn carrier(&self) -> Carrier {
        Carrier {
            phone_ids: self.carrier_phones.clone(),
            word_map: self.carrier_words.clone(),
            target_phone: self.carrier_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub corpus_size: usize,
    pub corpus_file: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: None,
            corpus_size: 500,
            corpus_file: None,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML, filling `model.n_bins` and `model.vocab_size` from the
    /// corpus section unless they are given explicitly.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let model_has = |key: &str| {
            raw.get("model")
                .and_then(|m| m.as_table())
                .is_some_and(|m| m.contains_key(key))
        };
        if !model_has("n_bins") {
            cfg.model.n_bins = cfg.corpus.n_bins();
        }
        if !model_has("vocab_size") {
            cfg.model.vocab_size = cfg.corpus.vocab_size as usize;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn apply_overrides(&mut self, common: &Common) {
        if let Some(s) = common.seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.corpus.seed = s;
            self.train.seed = s;
        }
        if let Some(o) = &common.out {
            self.out = Some(o.clone());
        }
        if let Some(n) = common.steps {
            self.train.steps = n;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = |m: String| Err(CliError::Validation(m));
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.n_bins != self.corpus.n_bins() {
            return v(format!(
                "model.n_bins = {} but the corpus spectrogram has {} bins",
                self.model.n_bins,
                self.corpus.n_bins()
            ));
        }
        if self.model.vocab_size < self.corpus.vocab_size as usize {
            return v("model.vocab_size is smaller than corpus.vocab_size".into());
        }
        if self.corpus_size == 0 {
            return v("corpus_size must be positive".into());
        }
        let e = &self.eval;
        if e.carrier_phones.is_empty() || e.carrier_phones.len() != e.carrier_words.len() {
            return v("eval.carrier_phones and eval.carrier_words must be nonempty and equally long".into());
        }
        if e.carrier_phones.iter().any(|&p| p >= self.model.vocab_size) {
            return v("eval.carrier_phones contains an id outside the vocabulary".into());
        }
        if e.carrier_words[0] != 0 || e.carrier_words.windows(2).any(|w| w[1] != w[0] && w[1] != w[0] + 1) {
            return v("eval.carrier_words must start at 0 and increase by at most 1".into());
        }
        if e.carrier_target >= e.carrier_phones.len() {
            return v("eval.carrier_target is outside the carrier".into());
        }
        if e.n_samples < 2 || e.n_seeds == 0 {
            return v("eval.n_samples must be at least 2 and eval.n_seeds positive".into());
        }
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "prosody-hvae", version, about = "Hierarchical conditional VAE for prosody on a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus(Common),
    /// Train a model; `--checkpoint` resumes from saved parameters.
    Train(Common),
    /// Compare reconstructions to references (identity without a checkpoint).
    Eval(Common),
    /// Sweep one latent dimension of the carrier's target unit.
    Traverse {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "phone")]
        level: Level,
        #[arg(long, default_value_t = 0)]
        dim: usize,
        /// LO:HI:STEPS
        #[arg(long, default_value = "-2:2:9", allow_hyphen_values = true)]
        range: String,
    },
    /// Variance-ratio disentanglement report.
    Disentangle(Common),
    /// Gradient checks and oracle suites.
    Selfcheck(Common),
}

/// Parses `LO:HI:STEPS` into a strictly increasing grid.
pub fn parse_range(s: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Usage(format!("--range expects LO:HI:STEPS with LO < HI and STEPS >= 2, got {s:?}"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi && n >= 2) {
        return Err(bad());
    }
    Ok(grid(lo, hi, n))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    started_unix: f64,
    finished_unix: f64,
    outputs: Vec<String>,
    inputs: Vec<String>,
    config: &'a RunConfig,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

struct Run {
    command: &'static str,
    cfg: RunConfig,
    out: PathBuf,
    started: f64,
    outputs: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, common: &Common, require_config: bool) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None if require_config => {
                return Err(CliError::Usage(format!("{command} requires --config PATH\n\n{SCHEMA}")));
            }
            None => RunConfig::from_toml("")?,
        };
        cfg.apply_overrides(common);
        cfg.validate()?;
        let out = cfg.out_dir();
        fs::create_dir_all(&out).map_err(io(&out))?;
        let mut inputs: Vec<PathBuf> = common.config.iter().cloned().collect();
        inputs.extend(common.checkpoint.iter().cloned());
        Ok(Run {
            command,
            cfg,
            out,
            started: now(),
            outputs: Vec::new(),
            inputs,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn corpus(&mut self) -> Result<Vec<Utterance>> {
        match &self.cfg.corpus_file {
            Some(p) => {
                self.inputs.push(p.clone());
                let c = load_corpus(p)?;
                if let Some(u) = c.iter().find(|u| u.spectrogram.bins != self.cfg.model.n_bins) {
                    return Err(CliError::Validation(format!(
                        "corpus file has {} bins, model expects {}",
                        u.spectrogram.bins, self.cfg.model.n_bins
                    )));
                }
                Ok(c)
            }
            None => Ok(generate_corpus(&self.cfg.corpus, self.cfg.corpus_size)?),
        }
    }

    fn finish(self) -> Result<()> {
        let path = self.out.join("manifest.toml");
        let display = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect();
        let m = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.train.seed,
            started_unix: self.started,
            finished_unix: now(),
            outputs: display(&self.outputs),
            inputs: display(&self.inputs),
            config: &self.cfg,
        };
        let text = toml::to_string(&m).map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
        fs::write(&path, text).map_err(io(&path))
    }
}

fn load_model(run: &Run, common: &Common) -> Result<(ModelConfig, ModelParams)> {
    let path = common
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{} requires --checkpoint PATH", run.command)))?;
    let (cfg, params) = load_checkpoint(path)?;
    if cfg.n_bins != run.cfg.corpus.n_bins() {
        return Err(CliError::Validation(format!(
            "checkpoint expects {} bins, corpus config gives {}",
            cfg.n_bins,
            run.cfg.corpus.n_bins()
        )));
    }
    Ok((cfg, params))
}

fn cmd_gen_corpus(common: &Common) -> Result<()> {
    let mut run = Run::start("gen-corpus", common, true)?;
    let corpus = generate_corpus(&run.cfg.corpus, run.cfg.corpus_size)?;
    let path = run.path("corpus.bin");
    save_corpus(&corpus, &path)?;
    println!("wrote {} utterances to {}", corpus.len(), path.display());
    run.finish()
}

fn cmd_train(common: &Common) -> Result<()> {
    let mut run = Run::start("train", common, true)?;
    let corpus = run.corpus()?;
    let init = match &common.checkpoint {
        Some(p) => {
            let (cfg, params) = load_checkpoint(p)?;
            if cfg != run.cfg.model {
                return Err(CliError::Validation("checkpoint model config differs from [model]".into()));
            }
            Some(params)
        }
        None => None,
    };
    let out = run.out.clone();
    let result = train(&run.cfg.model, &run.cfg.train, &corpus, init, Some(&out))?;
    run.outputs.push(out.join("trace.csv"));
    run.outputs.extend(result.checkpoints.iter().cloned());
    println!(
        "step {}: recon {:.5} (first step {:.5}), total {:.5}",
        result.last.step, result.last.recon, result.first.recon, result.last.total
    );
    run.finish()
}

fn cmd_eval(common: &Common) -> Result<()> {
    let mut run = Run::start("eval", common, true)?;
    let mut corpus = run.corpus()?;
    if run.cfg.eval.max_utterances > 0 {
        corpus.truncate(run.cfg.eval.max_utterances);
    }
    let model = match common.checkpoint {
        Some(_) => Some(load_model(&run, common)?),
        None => None,
    };
    let mc = MeasureConfig::for_corpus(&run.cfg.corpus);
    let fb = MelFilterbank::for_corpus(&run.cfg.corpus);
    let mut rows = Vec::new();
    let mut attrs = Vec::new();
    for (i, u) in corpus.iter().enumerate() {
        let (recon, predicted) = match &model {
            Some((cfg, params)) => {
                let noise = Noise::zeros(cfg, u.n_words, u.n_phones());
                let (_, rec, durs) = forward(u, params, cfg, &noise, &Masks::all_active(cfg))?;
                (rec, durs)
            }
            None => (u.spectrogram.clone(), u.durations().iter().map(|&d| d as f64).collect()),
        };
        let reference = f0_track_spec(&u.spectrogram, &mc);
        let estimate = f0_track_spec(&recon, &mc);
        rows.push(MetricsRow {
            utterance: i,
            errors: f0_error_metrics(&reference, &estimate)?,
            mcd13: mcd13(&u.spectrogram, &recon, &fb)?,
        });
        for n in 0..u.n_phones() {
            attrs.push((i, measure_generated(&recon, &u.durations(), &predicted, n, &mc)?));
        }
    }
    let mp = run.path("metrics.csv");
    write_metrics_csv(&rows, &mp)?;
    let ap = run.path("attributes.csv");
    write_attributes_csv(&attrs, &ap)?;
    let n = rows.len().max(1) as f64;
    println!(
        "{} utterances: mean FFE {:.4}, mean VDE {:.4}, mean MCD13 {:.4} dB",
        rows.len(),
        rows.iter().map(|r| r.errors.ffe).sum::<f64>() / n,
        rows.iter().map(|r| r.errors.vde).sum::<f64>() / n,
        rows.iter().map(|r| r.mcd13).sum::<f64>() / n
    );
    run.finish()
}

fn cmd_traverse(common: &Common, level: Level, dim: usize, range: &str) -> Result<()> {
    let values = parse_range(range)?;
    let mut run = Run::start("traverse", common, true)?;
    let (cfg, params) = load_model(&run, common)?;
    let carrier = run.cfg.eval.carrier();
    let fixed = crate::model::FixedLatents::zeros(&cfg, carrier.n_words(), carrier.phone_ids.len());
    let mc = MeasureConfig::for_corpus(&run.cfg.corpus);
    let result = traverse(&params, &cfg, &mc, &carrier, level, dim, &values, &fixed)?;
    let path = run.path("traversal.csv");
    result.write_csv(&path)?;
    println!("{}: {} points written to {}", result.context, values.len(), path.display());
    run.finish()
}

fn model_label(cfg: &ModelConfig) -> &'static str {
    match cfg.posterior {
        PosteriorKind::Conditional => "conditional",
        PosteriorKind::Independent => "independent",
    }
}

fn cmd_disentangle(common: &Common) -> Result<()> {
    let mut run = Run::start("disentangle", common, true)?;
    let (cfg, params) = load_model(&run, common)?;
    let mc = MeasureConfig::for_corpus(&run.cfg.corpus);
    let mut probe = ModelProbe::new(&params, &cfg, mc, run.cfg.eval.carrier(), Level::Phone);
    let e = &run.cfg.eval;
    let report = variance_ratio(&mut probe, model_label(&cfg), e.n_samples, e.n_seeds, run.cfg.train.seed)?;
    let csv = run.path("disentangle.csv");
    write_report_csv(&[&report], &csv)?;
    let table = format_table("Variance ratio for the carrier vowel", &[&report]);
    let txt = run.path("disentangle.txt");
    fs::write(&txt, &table).map_err(io(&txt))?;
    print!("{table}");
    run.finish()
}

/// One named selfcheck outcome.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Gradient check, ELBO decomposition, metric and protocol oracles.
pub fn selfcheck() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut push = |name, passed, detail: String| out.push(Check { name, passed, detail });

    let ccfg = CorpusConfig {
        words_range: [2, 2],
        phones_per_word_range: [2, 2],
        ..CorpusConfig::desk()
    };
    let corpus = generate_corpus(&ccfg, 4)?;
    let cfg = ModelConfig {
        phone_embed_dim: 3,
        hidden_dim: 4,
        proj_dim: 3,
        d_utt: 1,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Noise::sample(&cfg, corpus[0].n_words, corpus[0].n_phones(), &mut rng);
    let gc = check_gradients(&cfg, &params, &corpus[0], &noise, &Masks::all_active(&cfg), GRAD_CHECK_STEP, 1e-4)?;
    push("elbo gradient", gc.passed, format!("max relative error {:.2e}", gc.max_rel_error));

    let mut trainer = Trainer::new(cfg.clone(), TrainConfig { batch_size: 2, ..TrainConfig::default() })?;
    let mut worst = 0.0f64;
    let mut min_kl = f64::INFINITY;
    for _ in 0..3 {
        for r in trainer.step(&corpus)?.reports {
            let oracle: f64 = r.recon
                + Level::ALL
                    .iter()
                    .map(|&l| cfg.beta(l) * r.kl.get(&l).map_or(0.0, |v| v.iter().sum::<f64>()))
                    .sum::<f64>();
            worst = worst.max((oracle - r.total).abs());
            min_kl = r.kl.values().flatten().copied().fold(min_kl, f64::min);
        }
    }
    push("elbo decomposition", worst < 1e-12 && min_kl >= 0.0, format!("max |total - sum| {worst:.1e}, min KL {min_kl:.3e}"));

    let yin = YinConfig::default();
    let sr = 16000.0;
    let window: Vec<f64> = (0..yin.min_window(sr)).map(|i| (2.0 * std::f64::consts::PI * 220.0 * i as f64 / sr).sin()).collect();
    let f0 = yin_f0(&window, sr, &yin)?.unwrap_or(0.0);
    push("yin 220 Hz", (f0 - 220.0).abs() < 2.2, format!("estimate {f0:.3} Hz"));

    let r = F0Track::from_values(vec![Some(100.0), Some(100.0), None, None], 0.01);
    let e = F0Track::from_values(vec![Some(100.0), Some(150.0), None, Some(100.0)], 0.01);
    let m = f0_error_metrics(&r, &e)?;
    push(
        "gpe/vde/ffe",
        m.gpe == Some(0.5) && m.vde == 0.25 && m.ffe == 0.5,
        format!("gpe {:?} vde {} ffe {}", m.gpe, m.vde, m.ffe),
    );

    let mcd = mcd_frame(&[1.0], &[0.0]);
    let expect = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    push("mcd closed form", (mcd - expect).abs() < 1e-9, format!("{mcd:.12} vs {expect:.12}"));

    struct Axis;
    impl AttributeProbe for Axis {
        fn n_dims(&self) -> usize {
            3
        }
        fn measure(&mut self, z: &[f64]) -> std::result::Result<[f64; 3], DisentangleError> {
            Ok([z[0] + 1e-3 * z[1], z[1] + 1e-3 * z[2], z[2] + 1e-3 * z[0]])
        }
    }
    let rep = variance_ratio(&mut Axis, "axis", 100, 1, 0)?;
    let ok = rep.seeds[0].dims.iter().all(|d| d.ratio.is_some_and(|r| r > 50.0));
    push("variance-ratio oracle", ok, format!("summed ratio {:.1}", rep.mean));

    let bytes = crate::model::encode_checkpoint(&cfg, &params)?;
    let (c2, p2) = crate::model::decode_checkpoint(&bytes)?;
    push("checkpoint round trip", c2 == cfg && p2 == params, format!("{} bytes", bytes.len()));
    Ok(out)
}

fn cmd_selfcheck(common: &Common) -> Result<()> {
    let run = Run::start("selfcheck", common, false)?;
    let checks = selfcheck()?;
    let mut report = String::new();
    for c in &checks {
        let line = format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        print!("{line}");
        report.push_str(&line);
    }
    let path = run.out.join("selfcheck.txt");
    let mut f = fs::File::create(&path).map_err(io(&path))?;
    f.write_all(report.as_bytes()).map_err(io(&path))?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    let mut run = run;
    run.outputs.push(path);
    run.finish()?;
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} selfcheck(s) failed")));
    }
    Ok(())
}

/// Runs a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus(c) => cmd_gen_corpus(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Traverse { common, level, dim, range } => cmd_traverse(common, *level, *dim, range),
        Command::Disentangle(c) => cmd_disentangle(c),
        Command::Selfcheck(c) => cmd_selfcheck(c),
    }
}

/// Parses `argv` (program name first) and runs it, returning the exit code.
pub fn run_from<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => match run(cli) {
            Ok(()) => EXIT_OK,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(CliError::Validation(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nhiden_dim = 3"), Err(CliError::Validation(_))));
    }

    #[test]
    fn bins_follow_corpus_unless_given() {
        let c = RunConfig::from_toml("[corpus]\nfft_bins = 256\nframe_length = 256\nsample_rate = 8000\nhop_length = 80").unwrap();
        assert_eq!(c.model.n_bins, 129);
        let c = RunConfig::from_toml("[model]\nn_bins = 7").unwrap();
        assert_eq!(c.model.n_bins, 7);
        assert!(c.validate().is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::from_toml("seed = 3\n[train]\nsteps = 10").unwrap();
        c.apply_overrides(&Common { seed: Some(9), steps: Some(4), ..Common::default() });
        assert_eq!((c.train.seed, c.corpus.seed, c.train.steps), (9, 9, 4));
    }

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("-1:1:3").unwrap(), vec![-1.0, 0.0, 1.0]);
        for bad in ["1:1:3", "0:1", "a:1:2", "0:1:1"] {
            assert!(matches!(parse_range(bad), Err(CliError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn level_parsing() {
        assert_eq!("word".parse::<Level>().unwrap(), Level::Word);
        assert!("frame".parse::<Level>().is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_from(["prosody-hvae", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_from(["prosody-hvae", "train"]), EXIT_USAGE);
    }

    #[test]
    fn default_carrier_is_valid_for_default_corpus() {
        let mut c = RunConfig::from_toml("").unwrap();
        c.corpus = CorpusConfig::desk();
        c.model.n_bins = c.corpus.n_bins();
        c.validate().unwrap();
        assert!(c.corpus.is_vowel(c.eval.carrier_phones[c.eval.carrier_target] as u32));
    }
}
