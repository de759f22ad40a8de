//! Latent traversals and the variance-ratio disentanglement score.
//!
//! For each latent dimension, 100 values are drawn from a standard normal
//! with the other dimensions held at zero, and the F0, energy and duration
//! of a designated vowel are measured on the decoded output. Each
//! attribute's standard deviation is divided by its standard deviation when
//! all dimensions are sampled jointly, which puts the three attributes on a
//! common scale. A dimension's ratio is its largest scaled deviation over the
//! second largest; the score of one repetition is the sum over dimensions.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::corpus::Utterance;
use crate::metrics::{measure_generated, peak_f0, MeasureConfig, MetricsError};
use crate::model::{decode, FixedLatents, Level, ModelConfig, ModelError, ModelParams};

pub const ATTRIBUTES: [&str; 3] = ["f0", "energy", "duration"];
pub const F0: usize = 0;
pub const ENERGY: usize = 1;
pub const DURATION: usize = 2;

/// Scaling rule written into every report.
pub const SCALING_RULE: &str = "per-attribute std divided by its std under joint sampling of all dimensions";

#[derive(Debug, Error)]
pub enum DisentangleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
    #[error("attribute {attribute} does not vary under joint sampling")]
    Degenerate { attribute: &'static str },
    #[error("no F0 estimate for phone {0}")]
    NoPitch(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DisentangleError>;

/// Maps the latent vector of one unit to `[f0, energy, duration]`.
pub trait AttributeProbe {
    fn n_dims(&self) -> usize;
    fn measure(&mut self, z: &[f64]) -> Result<[f64; 3]>;
}

/// Phone and word structure of the utterance a probe decodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Carrier {
    pub phone_ids: Vec<usize>,
    pub word_map: Vec<usize>,
    /// Phone whose attributes are reported.
    pub target_phone: usize,
}

impl Carrier {
    pub fn from_utterance(utt: &Utterance, target_phone: usize) -> Result<Self> {
        if target_phone >= utt.n_phones() {
            return Err(DisentangleError::Invalid(format!(
                "target phone {target_phone} outside utterance of {} phones",
                utt.n_phones()
            )));
        }
        Ok(Carrier {
            phone_ids: utt.phones.iter().map(|p| p.phone_id as usize).collect(),
            word_map: utt.word_map(),
            target_phone,
        })
    }

    /// First vowel of the utterance, if any.
    pub fn first_vowel(utt: &Utterance) -> Result<Self> {
        let n = utt
            .phones
            .iter()
            .position(|p| p.is_vowel)
            .ok_or_else(|| DisentangleError::Invalid("utterance has no vowel".into()))?;
        Self::from_utterance(utt, n)
    }

    pub fn n_words(&self) -> usize {
        self.word_map.last().map_or(0, |w| w + 1)
    }

    /// Row of `level`'s latents that owns the target phone.
    pub fn target_unit(&self, level: Level) -> usize {
        match level {
            Level::Phone => self.target_phone,
            Level::Word => self.word_map[self.target_phone],
            Level::Utterance => 0,
        }
    }
}

/// Attributes of every phone of a decoded carrier.
fn measure_decoded(
    params: &ModelParams,
    cfg: &ModelConfig,
    measure: &MeasureConfig,
    carrier: &Carrier,
    latents: &FixedLatents,
) -> Result<Vec<[f64; 3]>> {
    let out = decode(params, cfg, &carrier.phone_ids, &carrier.word_map, latents, None)?;
    (0..carrier.phone_ids.len())
        .map(|n| {
            let m = measure_generated(&out.frames, &out.frame_durations, &out.predicted_durations, n, measure)?;
            let f0 = peak_f0(&out.frames, &out.frame_durations, n, measure).ok_or(DisentangleError::NoPitch(n))?;
            Ok([f0, m.energy, m.duration_frames])
        })
        .collect()
}

fn set_unit(latents: &mut FixedLatents, cfg: &ModelConfig, level: Level, unit: usize, z: &[f64]) {
    let d = cfg.dims(level);
    latents.get_mut(level)[unit * d..(unit + 1) * d].copy_from_slice(z);
}

/// Decodes the carrier with one unit's latents set and everything else fixed.
pub struct ModelProbe<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
    pub measure: MeasureConfig,
    pub carrier: Carrier,
    pub level: Level,
    /// Values of all other latents (zeros for neutral prosody).
    pub background: FixedLatents,
}

impl<'a> ModelProbe<'a> {
    pub fn new(
        params: &'a ModelParams,
        cfg: &'a ModelConfig,
        measure: MeasureConfig,
        carrier: Carrier,
        level: Level,
    ) -> Self {
        let background = FixedLatents::zeros(cfg, carrier.n_words(), carrier.phone_ids.len());
        ModelProbe {
            params,
            cfg,
            measure,
            carrier,
            level,
            background,
        }
    }
}

impl AttributeProbe for ModelProbe<'_> {
    fn n_dims(&self) -> usize {
        self.cfg.dims(self.level)
    }

    fn measure(&mut self, z: &[f64]) -> Result<[f64; 3]> {
        let mut lat = self.background.clone();
        set_unit(&mut lat, self.cfg, self.level, self.carrier.target_unit(self.level), z);
        let all = measure_decoded(self.params, self.cfg, &self.measure, &self.carrier, &lat)?;
        Ok(all[self.carrier.target_phone])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalPoint {
    pub value: f64,
    /// `[f0, energy, duration]` of every carrier phone.
    pub phones: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraversalResult {
    pub level: Level,
    pub dim: usize,
    pub target_phone: usize,
    /// Phones owned by the traversed unit.
    pub unit_phones: Vec<usize>,
    pub points: Vec<TraversalPoint>,
    pub context: String,
}

impl TraversalResult {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    /// One attribute of the target phone along the sweep.
    pub fn target_series(&self, attribute: usize) -> Vec<f64> {
        self.points.iter().map(|p| p.phones[self.target_phone][attribute]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "dim,value,f0,energy,duration")?;
        for p in &self.points {
            let a = p.phones[self.target_phone];
            writeln!(f, "{},{},{},{},{}", self.dim, p.value, a[0], a[1], a[2])?;
        }
        f.flush()?;
        Ok(())
    }
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Sweeps one dimension of the unit owning `carrier.target_phone`, holding
/// all other latents at `fixed`, and measures every phone at each value.
#[allow(clippy::too_many_arguments)]
pub fn traverse(
    params: &ModelParams,
    cfg: &ModelConfig,
    measure: &MeasureConfig,
    carrier: &Carrier,
    level: Level,
    dim: usize,
    values: &[f64],
    fixed: &FixedLatents,
) -> Result<TraversalResult> {
    let d = cfg.dims(level);
    if dim >= d {
        return Err(DisentangleError::Invalid(format!("dimension {dim} out of range for {d} {level}-level dims")));
    }
    if values.is_empty() || values.windows(2).any(|w| w[1] <= w[0]) || values.iter().any(|v| !v.is_finite()) {
        return Err(DisentangleError::Invalid("traversal grid must be nonempty, finite and strictly increasing".into()));
    }
    let unit = carrier.target_unit(level);
    let unit_phones = (0..carrier.phone_ids.len())
        .filter(|&n| match level {
            Level::Phone => n == unit,
            Level::Word => carrier.word_map[n] == unit,
            Level::Utterance => true,
        })
        .collect();
    let points = values
        .iter()
        .map(|&value| {
            let mut lat = fixed.clone();
            lat.get_mut(level)[unit * d + dim] = value;
            Ok(TraversalPoint {
                value,
                phones: measure_decoded(params, cfg, measure, carrier, &lat)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TraversalResult {
        level,
        dim,
        target_phone: carrier.target_phone,
        unit_phones,
        points,
        context: format!(
            "{level} unit {unit} of a {}-phone carrier, target phone {}",
            carrier.phone_ids.len(),
            carrier.target_phone
        ),
    })
}

/// Attribute a traversal moves most: the target phone's range of each
/// attribute over the sweep, divided by `scale` (joint-sampling stds, as in
/// the variance ratio). Returns the winner and the scaled ranges.
pub fn traversal_dominant(result: &TraversalResult, scale: &[f64; 3]) -> (usize, [f64; 3]) {
    let moved = [0, 1, 2].map(|a| {
        let y = result.target_series(a);
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / scale[a]
    });
    let best = (0..3).max_by(|&a, &b| moved[a].total_cmp(&moved[b])).unwrap_or(0);
    (best, moved)
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
/// A constant `y` is fitted exactly and scores 1.
pub fn linear_fit_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    (sxy * sxy) / (sxx * syy)
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Sample standard deviation (n − 1) across repetitions.
fn spread(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn attribute_stds(samples: &[[f64; 3]]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (a, o) in out.iter_mut().enumerate() {
        let col: Vec<f64> = samples.iter().map(|s| s[a]).collect();
        *o = std_dev(&col);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimensionReport {
    pub dim: usize,
    pub raw_std: [f64; 3],
    pub scaled_std: [f64; 3],
    /// Attribute with the largest scaled deviation.
    pub dominant: usize,
    /// Largest over second-largest scaled deviation; `None` when the second
    /// largest is zero.
    pub ratio: Option<f64>,
}

impl DimensionReport {
    pub fn controlled_std(&self) -> f64 {
        self.scaled_std[self.dominant]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedReport {
    pub seed: u64,
    /// Attribute stds under joint sampling (the scale).
    pub joint_std: [f64; 3],
    pub dims: Vec<DimensionReport>,
    /// Sum of the defined per-dimension ratios.
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisentanglementReport {
    pub label: String,
    pub n_samples: usize,
    pub n_seeds: usize,
    pub scaling: &'static str,
    pub seeds: Vec<SeedReport>,
    pub mean: f64,
    pub std: f64,
}

fn rank_ratio(scaled: &[f64; 3]) -> (usize, Option<f64>) {
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]));
    let (top, second) = (scaled[order[0]], scaled[order[1]]);
    (order[0], (second > 0.0).then(|| top / second))
}

fn draw(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// One repetition of the protocol with its own sampling seed.
pub fn variance_ratio_seed<P: AttributeProbe + ?Sized>(probe: &mut P, n_samples: usize, seed: u64) -> Result<SeedReport> {
    let d = probe.n_dims();
    if n_samples < 2 || d == 0 {
        return Err(DisentangleError::Invalid("need at least 2 samples and 1 dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint = (0..n_samples)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| draw(&mut rng)).collect();
            probe.measure(&z)
        })
        .collect::<Result<Vec<_>>>()?;
    let joint_std = attribute_stds(&joint);
    for (a, s) in joint_std.iter().enumerate() {
        if *s == 0.0 || !s.is_finite() {
            return Err(DisentangleError::Degenerate { attribute: ATTRIBUTES[a] });
        }
    }
    let mut dims = Vec::with_capacity(d);
    for k in 0..d {
        let samples = (0..n_samples)
            .map(|_| {
                let mut z = vec![0.0; d];
                z[k] = draw(&mut rng);
                probe.measure(&z)
            })
            .collect::<Result<Vec<_>>>()?;
        let raw_std = attribute_stds(&samples);
        let scaled_std = [0, 1, 2].map(|a| raw_std[a] / joint_std[a]);
        let (dominant, ratio) = rank_ratio(&scaled_std);
        dims.push(DimensionReport {
            dim: k,
            raw_std,
            scaled_std,
            dominant,
            ratio,
        });
    }
    let sum = dims.iter().filter_map(|r| r.ratio).sum();
    Ok(SeedReport {
        seed,
        joint_std,
        dims,
        sum,
    })
}

/// Gathers repetitions into a report with mean ± std of the summed ratios.
pub fn combine(label: &str, n_samples: usize, seeds: Vec<SeedReport>) -> DisentanglementReport {
    let sums: Vec<f64> = seeds.iter().map(|s| s.sum).collect();
    DisentanglementReport {
        label: label.to_string(),
        n_samples,
        n_seeds: seeds.len(),
        scaling: SCALING_RULE,
        mean: sums.iter().sum::<f64>() / sums.len().max(1) as f64,
        std: spread(&sums),
        seeds,
    }
}

/// Runs `n_seeds` repetitions with seeds `base_seed, base_seed + 1, …`.
pub fn variance_ratio<P: AttributeProbe + ?Sized>(
    probe: &mut P,
    label: &str,
    n_samples: usize,
    n_seeds: usize,
    base_seed: u64,
) -> Result<DisentanglementReport> {
    let seeds = (0..n_seeds as u64)
        .map(|s| variance_ratio_seed(probe, n_samples, base_seed + s))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(label, n_samples, seeds))
}

/// Two-column table of average variance ratios, one row per model.
pub fn format_table(title: &str, reports: &[&DisentanglementReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).chain([5]).max().unwrap_or(5);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "{:<width$} | Average variance ratio", "Model");
    let _ = writeln!(s, "{}-+-{}", "-".repeat(width), "-".repeat(22));
    for r in reports {
        let _ = writeln!(s, "{:<width$} | {:.2} ± {:.2}", r.label, r.mean, r.std);
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(s, "({} samples per dimension, {} repetitions; scaling: {})", r.n_samples, r.n_seeds, r.scaling);
    }
    s
}

pub fn write_report_csv(reports: &[&DisentanglementReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model,seed,dim,dominant,ratio,scaled_f0,scaled_energy,scaled_duration,seed_sum")?;
    for r in reports {
        for s in &r.seeds {
            for d in &s.dims {
                let ratio = d.ratio.map_or_else(|| "undefined".to_string(), |v| v.to_string());
                writeln!(
                    f,
                    "{},{},{},{},{},{},{},{},{}",
                    r.label, s.seed, d.dim, ATTRIBUTES[d.dominant], ratio, d.scaled_std[0], d.scaled_std[1], d.scaled_std[2], s.sum
                )?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Mean relative attribute change between the two ends of a word-level
/// sweep, for phones inside and outside the traversed word.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Locality {
    pub inside: f64,
    pub outside: f64,
}

pub fn locality(result: &TraversalResult) -> Result<Locality> {
    let (first, last) = match (result.points.first(), result.points.last()) {
        (Some(a), Some(b)) if result.points.len() >= 2 => (a, b),
        _ => return Err(DisentangleError::Invalid("locality needs at least two traversal points".into())),
    };
    let change = |n: usize| {
        (0..3)
            .map(|a| {
                let (x, y) = (first.phones[n][a], last.phones[n][a]);
                let base = 0.5 * (x.abs() + y.abs());
                if base > 0.0 {
                    (y - x).abs() / base
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / 3.0
    };
    let n = first.phones.len();
    let (ins, outs): (Vec<usize>, Vec<usize>) = (0..n).partition(|p| result.unit_phones.contains(p));
    let mean = |v: &[usize]| if v.is_empty() { 0.0 } else { v.iter().map(|&p| change(p)).sum::<f64>() / v.len() as f64 };
    Ok(Locality {
        inside: mean(&ins),
        outside: mean(&outs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dimension k sets attribute k; every attribute gets small noise.
    struct Disentangled {
        rng: ChaCha8Rng,
        noise: f64,
    }

    impl AttributeProbe for Disentangled {
        fn n_dims(&self) -> usize {
            3
        }
        fn measure(&mut self, z: &[f64]) -> Result<[f64; 3]> {
            let mut out = [0.0; 3];
            for (a, o) in out.iter_mut().enumerate() {
                *o = z[a] + self.noise * draw(&mut self.rng);
            }
            Ok(out)
        }
    }

    /// Every dimension moves every attribute equally.
    struct Entangled {
        rng: ChaCha8Rng,
    }

    impl AttributeProbe for Entangled {
        fn n_dims(&self) -> usize {
            3
        }
        fn measure(&mut self, z: &[f64]) -> Result<[f64; 3]> {
            let s: f64 = z.iter().sum();
            Ok([0, 1, 2].map(|_| s + 0.01 * draw(&mut self.rng)))
        }
    }

    fn sweep(series: [[f64; 3]; 3]) -> TraversalResult {
        TraversalResult {
            level: Level::Phone,
            dim: 0,
            target_phone: 0,
            unit_phones: vec![0],
            points: series
                .iter()
                .enumerate()
                .map(|(i, &a)| TraversalPoint { value: i as f64, phones: vec![a] })
                .collect(),
            context: String::new(),
        }
    }

    #[test]
    fn traversal_dominance_uses_scaled_range() {
        // F0 moves 30 Hz, energy 0.3, duration 1 frame.
        let t = sweep([[200.0, 1.0, 5.0], [230.0, 1.3, 5.5], [215.0, 1.1, 6.0]]);
        let (best, moved) = traversal_dominant(&t, &[60.0, 0.2, 4.0]);
        assert_eq!(best, ENERGY);
        assert!((moved[0] - 0.5).abs() < 1e-12 && (moved[2] - 0.25).abs() < 1e-12);
        assert_eq!(traversal_dominant(&t, &[10.0, 0.2, 4.0]).0, F0);
    }

    #[test]
    fn disentangled_oracle_ratio_near_hundred() {
        let mut p = Disentangled { rng: ChaCha8Rng::seed_from_u64(3), noise: 0.01 };
        let r = variance_ratio(&mut p, "oracle", 2000, 1, 0).unwrap();
        for d in &r.seeds[0].dims {
            assert_eq!(d.dominant, d.dim);
            let ratio = d.ratio.unwrap();
            assert!((ratio - 100.0).abs() < 10.0, "ratio {ratio}");
        }
        assert!((r.mean - 300.0).abs() < 30.0);
    }

    #[test]
    fn entangled_oracle_ratio_near_one() {
        let mut p = Entangled { rng: ChaCha8Rng::seed_from_u64(4) };
        let r = variance_ratio(&mut p, "entangled", 100, 5, 0).unwrap();
        assert_eq!(r.n_seeds, 5);
        for s in &r.seeds {
            assert!(s.sum >= 3.0 && s.sum < 3.3, "{}", s.sum);
        }
    }

    #[test]
    fn ratio_permutation_invariance() {
        struct Permuted(Disentangled);
        impl AttributeProbe for Permuted {
            fn n_dims(&self) -> usize {
                3
            }
            fn measure(&mut self, z: &[f64]) -> Result<[f64; 3]> {
                let a = self.0.measure(z)?;
                Ok([a[2], a[0], a[1]])
            }
        }
        let mk = || Disentangled { rng: ChaCha8Rng::seed_from_u64(9), noise: 0.05 };
        let a = variance_ratio(&mut mk(), "a", 200, 2, 7).unwrap();
        let b = variance_ratio(&mut Permuted(mk()), "b", 200, 2, 7).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-9 * a.mean);
    }

    #[test]
    fn degenerate_attribute_is_reported() {
        struct Flat;
        impl AttributeProbe for Flat {
            fn n_dims(&self) -> usize {
                2
            }
            fn measure(&mut self, z: &[f64]) -> Result<[f64; 3]> {
                Ok([z[0], 1.0, z[1]])
            }
        }
        assert!(matches!(
            variance_ratio(&mut Flat, "flat", 10, 1, 0),
            Err(DisentangleError::Degenerate { attribute: "energy" })
        ));
    }

    #[test]
    fn undefined_ratio_when_second_is_zero() {
        assert_eq!(rank_ratio(&[0.0, 2.0, 0.0]), (1, None));
        assert_eq!(rank_ratio(&[1.0, 4.0, 2.0]), (1, Some(2.0)));
    }

    #[test]
    fn r2_cases() {
        let x = grid(-1.0, 1.0, 9);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert!((linear_fit_r2(&x, &y) - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        assert!(linear_fit_r2(&x, &y) < 1e-12);
        assert_eq!(linear_fit_r2(&x, &[2.0; 9]), 1.0);
    }

    #[test]
    fn grid_endpoints() {
        assert_eq!(grid(-1.0, 1.0, 9).len(), 9);
        assert_eq!(grid(-1.0, 1.0, 9)[4], 0.0);
        assert_eq!(grid(-2.0, 2.0, 2), vec![-2.0, 2.0]);
    }

    #[test]
    fn table_layout() {
        let r = combine("baseline", 100, vec![
            SeedReport { seed: 0, joint_std: [1.0; 3], dims: vec![], sum: 2.0 },
            SeedReport { seed: 1, joint_std: [1.0; 3], dims: vec![], sum: 4.0 },
        ]);
        assert_eq!(r.mean, 3.0);
        assert!((r.std - 2f64.sqrt()).abs() < 1e-12);
        let t = format_table("Variance ratio", &[&r]);
        assert!(t.contains("baseline | 3.00 ± 1.41"), "{t}");
    }

    mod with_model {
        use super::*;
        use crate::corpus::{generate_corpus, CorpusConfig};

        fn setup() -> (ModelConfig, ModelParams, MeasureConfig, Utterance) {
            let ccfg = CorpusConfig { seed: 2, words_range: [2, 3], ..CorpusConfig::desk() };
            let u = generate_corpus(&ccfg, 1).unwrap().remove(0);
            let cfg = ModelConfig { hidden_dim: 8, proj_dim: 4, phone_embed_dim: 4, ..ModelConfig::default() };
            let params = ModelParams::init(&cfg, 1).unwrap();
            (cfg, params, MeasureConfig::for_corpus(&ccfg), u)
        }

        #[test]
        fn zero_traversal_is_neutral_decode() {
            let (cfg, params, mc, u) = setup();
            let carrier = Carrier::first_vowel(&u).unwrap();
            let zeros = FixedLatents::zeros(&cfg, carrier.n_words(), carrier.phone_ids.len());
            let r = traverse(&params, &cfg, &mc, &carrier, Level::Phone, 0, &[0.0], &zeros).unwrap();
            let direct = measure_decoded(&params, &cfg, &mc, &carrier, &zeros).unwrap();
            assert_eq!(r.points[0].phones, direct);
        }

        #[test]
        fn traversal_rejects_bad_input() {
            let (cfg, params, mc, u) = setup();
            let carrier = Carrier::first_vowel(&u).unwrap();
            let zeros = FixedLatents::zeros(&cfg, carrier.n_words(), carrier.phone_ids.len());
            assert!(traverse(&params, &cfg, &mc, &carrier, Level::Phone, 3, &[0.0], &zeros).is_err());
            assert!(traverse(&params, &cfg, &mc, &carrier, Level::Phone, 0, &[1.0, 0.0], &zeros).is_err());
        }

        #[test]
        fn word_traversal_leaves_other_words_alone() {
            let (cfg, params, mc, u) = setup();
            let carrier = Carrier::from_utterance(&u, 0).unwrap();
            let zeros = FixedLatents::zeros(&cfg, carrier.n_words(), carrier.phone_ids.len());
            let r = traverse(&params, &cfg, &mc, &carrier, Level::Word, 1, &[-2.0, 2.0], &zeros).unwrap();
            let loc = locality(&r).unwrap();
            assert!(loc.outside <= 0.1 * loc.inside, "{loc:?}");
        }
    }
}
