//! Signal-level evaluation: YIN pitch tracking, a spectral-peak pitch
//! tracker for generated spectrograms, GPE/VDE/FFE, MCD over 13 mel
//! cepstra, and per-phone prosody measurement.

use std::f64::consts::{LN_10, PI};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{spans, CorpusConfig, Spectrogram, Utterance};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("window of {len} samples is shorter than the {needed} needed for f0_min {f0_min} Hz")]
    WindowTooShort { len: usize, needed: usize, f0_min: f64 },
    #[error("track lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("frame counts differ: {0} vs {1} (no alignment is performed)")]
    FrameMismatch(usize, usize),
    #[error("phone {index} does not exist (utterance has {count})")]
    NoSuchPhone { index: usize, count: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Deviation beyond which a voiced frame counts as a gross pitch error.
pub const GPE_THRESHOLD: f64 = 0.2;
/// Signal samples dropped at each edge of a phone span when measuring energy.
pub const MARGIN_SAMPLES: usize = 50;
pub const MEL_FILTERS: usize = 40;
pub const MCD_COEFFS: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YinConfig {
    pub f0_min: f64,
    pub f0_max: f64,
    pub threshold: f64,
    /// Variance (after removing the window mean) below which a window is
    /// unvoiced.
    pub energy_floor: f64,
}

impl Default for YinConfig {
    fn default() -> Self {
        YinConfig {
            f0_min: 100.0,
            f0_max: 500.0,
            threshold: 0.1,
            energy_floor: 1e-6,
        }
    }
}

impl YinConfig {
    /// Shortest admissible window: two periods of the lowest pitch.
    pub fn min_window(&self, sample_rate: f64) -> usize {
        let n = (2.0 * sample_rate / self.f0_min).ceil() as usize;
        n + n % 2
    }
}

/// YIN estimate for one analysis window; `None` when unvoiced.
///
/// The difference function is integrated over the first half of the window
/// and evaluated for lags up to half the window length.
pub fn yin_f0(window: &[f64], sample_rate: f64, cfg: &YinConfig) -> Result<Option<f64>> {
    let needed = (2.0 * sample_rate / cfg.f0_min).ceil() as usize;
    if window.len() < needed {
        return Err(MetricsError::WindowTooShort {
            len: window.len(),
            needed,
            f0_min: cfg.f0_min,
        });
    }
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    let var = window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / window.len() as f64;
    if var < cfg.energy_floor {
        return Ok(None);
    }

    let w = window.len() / 2;
    let tau_max = ((sample_rate / cfg.f0_min).ceil() as usize).min(w - 1);
    let tau_min = ((sample_rate / cfg.f0_max).floor() as usize).max(2);
    let mut d = vec![0.0; tau_max + 2];
    for (tau, dv) in d.iter_mut().enumerate().skip(1) {
        *dv = (0..w).map(|j| {
            let diff = window[j] - window[j + tau];
            diff * diff
        }).sum();
    }
    let mut cmnd = vec![1.0; d.len()];
    let mut running = 0.0;
    for tau in 1..d.len() {
        running += d[tau];
        cmnd[tau] = if running > 0.0 { d[tau] * tau as f64 / running } else { 1.0 };
    }

    let mut chosen = None;
    let mut tau = tau_min;
    while tau <= tau_max {
        if cmnd[tau] < cfg.threshold {
            while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                tau += 1;
            }
            chosen = Some(tau);
            break;
        }
        tau += 1;
    }
    let tau = match chosen {
        Some(t) => t,
        None => {
            // argmin; it lies above the threshold, so the window is unvoiced
            return Ok(None);
        }
    };

    let refined = if tau > 1 && tau + 1 < cmnd.len() {
        let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
        let den = a - 2.0 * b + c;
        let shift = if den.abs() > 1e-15 { (0.5 * (a - c) / den).clamp(-1.0, 1.0) } else { 0.0 };
        tau as f64 + shift
    } else {
        tau as f64
    };
    Ok(Some(sample_rate / refined))
}

/// Per-frame pitch with frame times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    pub f0: Vec<Option<f64>>,
    pub times: Vec<f64>,
}

impl F0Track {
    pub fn from_values(f0: Vec<Option<f64>>, frame_period: f64) -> Self {
        let times = (0..f0.len()).map(|t| (t as f64 + 0.5) * frame_period).collect();
        F0Track { f0, times }
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_fraction(&self) -> f64 {
        self.f0.iter().filter(|v| v.is_some()).count() as f64 / self.f0.len().max(1) as f64
    }
}

/// Analysis settings derived from a corpus configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureConfig {
    pub sample_rate: f64,
    pub hop_length: usize,
    pub fft_bins: usize,
    pub yin: YinConfig,
    /// Minimum linear magnitude of a spectral F0 peak.
    pub min_peak: f64,
    /// Peak and second harmonic must exceed the frame's median magnitude by
    /// this factor.
    pub peak_to_floor: f64,
}

impl MeasureConfig {
    pub fn for_corpus(cfg: &CorpusConfig) -> Self {
        MeasureConfig {
            sample_rate: cfg.sample_rate as f64,
            hop_length: cfg.hop_length,
            fft_bins: cfg.fft_bins,
            yin: YinConfig::default(),
            min_peak: cfg.frame_length as f64 / 256.0,
            peak_to_floor: 4.0,
        }
    }

    pub fn bin_width(&self) -> f64 {
        self.sample_rate / self.fft_bins as f64
    }

    pub fn frame_period(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate
    }
}

/// YIN track over a waveform, one estimate per hop, each window centred on
/// its frame and shifted inward at the signal edges.
pub fn yin_track(waveform: &[f64], cfg: &MeasureConfig) -> Result<F0Track> {
    let win = cfg.yin.min_window(cfg.sample_rate);
    if waveform.len() < win {
        return Err(MetricsError::WindowTooShort {
            len: waveform.len(),
            needed: win,
            f0_min: cfg.yin.f0_min,
        });
    }
    let frames = waveform.len() / cfg.hop_length;
    let mut f0 = Vec::with_capacity(frames);
    for t in 0..frames {
        let centre = t * cfg.hop_length + cfg.hop_length / 2;
        let start = centre.saturating_sub(win / 2).min(waveform.len() - win);
        f0.push(yin_f0(&waveform[start..start + win], cfg.sample_rate, &cfg.yin)?);
    }
    Ok(F0Track::from_values(f0, cfg.frame_period()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Harmonics scored per F0 candidate.
const SHS_HARMONICS: usize = 6;

/// F0 of one log-magnitude frame. The candidate maximizing the weighted sum
/// of linear magnitudes at its harmonics (1 Hz grid over the F0 band) picks
/// the fundamental's bin, which is then refined by quadratic interpolation;
/// returns `(f0, voiced)`.
pub fn spectral_peak(frame: &[f64], cfg: &MeasureConfig) -> Option<(f64, bool)> {
    let bw = cfg.bin_width();
    let lo = ((cfg.yin.f0_min / bw).ceil() as usize).max(1);
    let hi = ((cfg.yin.f0_max / bw).floor() as usize).min(frame.len() - 2);
    if lo > hi {
        return None;
    }
    let lin: Vec<f64> = frame.iter().map(|v| v.exp_m1()).collect();
    let at = |bin: f64| {
        let i = bin.floor() as usize;
        if i + 1 >= lin.len() {
            return 0.0;
        }
        let t = bin - i as f64;
        lin[i] * (1.0 - t) + lin[i + 1] * t
    };
    let score = |f: f64| {
        (1..=SHS_HARMONICS)
            .map(|h| at(h as f64 * f / bw) / h as f64)
            .sum::<f64>()
    };
    let coarse = (cfg.yin.f0_min.ceil() as usize..=cfg.yin.f0_max.floor() as usize)
        .map(|f| f as f64)
        .max_by(|&a, &b| score(a).total_cmp(&score(b)))?;
    let centre = ((coarse / bw).round() as usize).clamp(lo, hi);
    let k = (centre.saturating_sub(1).max(lo)..=(centre + 1).min(hi)).max_by(|&a, &b| frame[a].total_cmp(&frame[b]))?;
    let (a, b, c) = (frame[k - 1], frame[k], frame[k + 1]);
    let den = a - 2.0 * b + c;
    let shift = if den < 0.0 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
    let f0 = (k as f64 + shift) * bw;

    let floor = median(lin.clone());
    let peak = lin[k];
    let h2 = (2.0 * f0 / bw).round() as usize;
    let second = (h2.saturating_sub(1)..=(h2 + 1).min(lin.len() - 1))
        .map(|i| lin[i])
        .fold(0.0, f64::max);
    let is_peak = b >= a && b >= c;
    let voiced = is_peak
        && peak >= cfg.min_peak
        && peak > cfg.peak_to_floor * floor
        && second > cfg.peak_to_floor * floor;
    Some((f0, voiced))
}

/// Pitch track from a linear-frequency log-magnitude spectrogram.
pub fn f0_track_spec(spec: &Spectrogram, cfg: &MeasureConfig) -> F0Track {
    let f0 = (0..spec.frames)
        .map(|t| match spectral_peak(spec.frame(t), cfg) {
            Some((f, true)) => Some(f),
            _ => None,
        })
        .collect();
    F0Track::from_values(f0, cfg.frame_period())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Errors {
    /// `None` when no frame is voiced in both tracks.
    pub gpe: Option<f64>,
    pub vde: f64,
    pub ffe: f64,
}

pub fn f0_error_metrics(reference: &F0Track, estimate: &F0Track) -> Result<F0Errors> {
    if reference.len() != estimate.len() {
        return Err(MetricsError::LengthMismatch(reference.len(), estimate.len()));
    }
    if reference.is_empty() {
        return Err(MetricsError::Invalid("empty F0 tracks".into()));
    }
    let (mut both, mut gross, mut mismatch, mut frame_err) = (0usize, 0usize, 0usize, 0usize);
    for (r, e) in reference.f0.iter().zip(&estimate.f0) {
        match (r, e) {
            (Some(r), Some(e)) => {
                both += 1;
                if (e - r).abs() > GPE_THRESHOLD * r {
                    gross += 1;
                    frame_err += 1;
                }
            }
            (None, None) => {}
            _ => {
                mismatch += 1;
                frame_err += 1;
            }
        }
    }
    let t = reference.len() as f64;
    Ok(F0Errors {
        gpe: (both > 0).then(|| gross as f64 / both as f64),
        vde: mismatch as f64 / t,
        ffe: frame_err as f64 / t,
    })
}

/// Triangular mel filterbank over `0..Nyquist` (HTK mel scale), one row per
/// filter, each `fft_bins / 2 + 1` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub weights: Vec<Vec<f64>>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_filters: usize, fft_bins: usize, sample_rate: f64) -> Self {
        let bins = fft_bins / 2 + 1;
        let nyq = sample_rate / 2.0;
        let top = hz_to_mel(nyq);
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_filters + 1) as f64))
            .collect();
        let weights = (0..n_filters)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate / fft_bins as f64;
                        if f > l && f < c {
                            (f - l) / (c - l)
                        } else if f >= c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        MelFilterbank { weights }
    }

    pub fn for_corpus(cfg: &CorpusConfig) -> Self {
        MelFilterbank::new(MEL_FILTERS, cfg.fft_bins, cfg.sample_rate as f64)
    }

    /// Cepstra `c_0..c_{n-1}` of one log-magnitude frame: power through the
    /// filterbank, natural log, orthonormal DCT-II.
    pub fn cepstrum(&self, log_mag_frame: &[f64], n: usize) -> Vec<f64> {
        let power: Vec<f64> = log_mag_frame.iter().map(|v| v.exp_m1().powi(2)).collect();
        let logmel: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w.iter().zip(&power).map(|(a, b)| a * b).sum::<f64>().max(1e-10).ln())
            .collect();
        dct2_ortho(&logmel, n)
    }
}

fn dct2_ortho(x: &[f64], n: usize) -> Vec<f64> {
    let len = x.len() as f64;
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / len).cos())
                .sum();
            let norm = if k == 0 { (1.0 / len).sqrt() } else { (2.0 / len).sqrt() };
            s * norm
        })
        .collect()
}

/// `(10 / ln 10) · sqrt(2 · Σ_d (c_d - c'_d)²)` for one frame's coefficients
/// `c_1..c_13` (callers exclude `c_0`).
pub fn mcd_frame(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (10.0 / LN_10) * (2.0 * s).sqrt()
}

/// Mean frame-wise mel-cepstral distortion over `c_1..c_13`, in dB.
pub fn mcd13(reference: &Spectrogram, estimate: &Spectrogram, filters: &MelFilterbank) -> Result<f64> {
    if reference.frames != estimate.frames {
        return Err(MetricsError::FrameMismatch(reference.frames, estimate.frames));
    }
    if reference.bins != estimate.bins {
        return Err(MetricsError::Invalid(format!(
            "bin counts differ: {} vs {}",
            reference.bins, estimate.bins
        )));
    }
    if reference.frames == 0 {
        return Err(MetricsError::Invalid("empty spectrograms".into()));
    }
    let total: f64 = (0..reference.frames)
        .map(|t| {
            let a = filters.cepstrum(reference.frame(t), MCD_COEFFS + 1);
            let b = filters.cepstrum(estimate.frame(t), MCD_COEFFS + 1);
            mcd_frame(&a[1..], &b[1..])
        })
        .sum();
    Ok(total / reference.frames as f64)
}

/// Prosody of one phone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeMeasurement {
    pub phone_index: usize,
    /// Frames owned by the phone (fractional for predicted durations).
    pub duration_frames: f64,
    /// Mean magnitude over the phone (margins excluded in the waveform
    /// domain).
    pub energy: f64,
    /// `energy` divided by the utterance's mean magnitude.
    pub energy_ratio: f64,
    pub mean_f0_hz: Option<f64>,
}

fn mean_voiced(track: &F0Track, range: std::ops::Range<usize>) -> Option<f64> {
    let v: Vec<f64> = track.f0[range].iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Sample range used for a phone's energy: the span minus
/// [`MARGIN_SAMPLES`] at each end when the span exceeds 101 samples.
pub fn energy_span(t1: usize, t2: usize) -> (usize, usize) {
    if t2 - t1 > 2 * MARGIN_SAMPLES + 1 {
        (t1 + MARGIN_SAMPLES, t2 - MARGIN_SAMPLES)
    } else {
        (t1, t2)
    }
}

fn mean_abs(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum::<f64>() / x.len().max(1) as f64
}

/// Waveform-domain measurement of a corpus phone using its oracle alignment.
/// Pass a precomputed YIN track to avoid recomputing it per phone.
pub fn measure_attributes(
    utt: &Utterance,
    phone: usize,
    cfg: &MeasureConfig,
    track: Option<&F0Track>,
) -> Result<AttributeMeasurement> {
    if phone >= utt.n_phones() {
        return Err(MetricsError::NoSuchPhone {
            index: phone,
            count: utt.n_phones(),
        });
    }
    let (n1, n2) = utt.frame_spans()[phone];
    let (t1, t2) = (n1 * cfg.hop_length, n2 * cfg.hop_length);
    let (a, b) = energy_span(t1, t2);
    let energy = mean_abs(&utt.waveform[a..b]);
    let whole = mean_abs(&utt.waveform);
    let owned;
    let track = match track {
        Some(t) => t,
        None => {
            owned = yin_track(&utt.waveform, cfg)?;
            &owned
        }
    };
    Ok(AttributeMeasurement {
        phone_index: phone,
        duration_frames: utt.alignment.iter().filter(|&&p| p == phone).count() as f64,
        energy,
        energy_ratio: if whole > 0.0 { energy / whole } else { 0.0 },
        mean_f0_hz: mean_voiced(track, n1..n2),
    })
}

pub fn measure_all(utt: &Utterance, cfg: &MeasureConfig) -> Result<Vec<AttributeMeasurement>> {
    let track = yin_track(&utt.waveform, cfg)?;
    (0..utt.n_phones())
        .map(|n| measure_attributes(utt, n, cfg, Some(&track)))
        .collect()
}

/// Spectrogram-domain measurement of a generated phone: frames come from the
/// rounded durations that laid out `spec`, the reported duration is the
/// predictor's continuous output.
pub fn measure_generated(
    spec: &Spectrogram,
    frame_durations: &[usize],
    predicted: &[f64],
    phone: usize,
    cfg: &MeasureConfig,
) -> Result<AttributeMeasurement> {
    if phone >= frame_durations.len() {
        return Err(MetricsError::NoSuchPhone {
            index: phone,
            count: frame_durations.len(),
        });
    }
    let total: usize = frame_durations.iter().sum();
    if total != spec.frames {
        return Err(MetricsError::FrameMismatch(total, spec.frames));
    }
    let (n1, n2) = spans(frame_durations)[phone];
    let frame_energy = |t: usize| spec.frame(t).iter().map(|v| v.exp_m1()).sum::<f64>() / spec.bins as f64;
    let energy = if n2 > n1 {
        (n1..n2).map(frame_energy).sum::<f64>() / (n2 - n1) as f64
    } else {
        0.0
    };
    let whole = (0..spec.frames).map(frame_energy).sum::<f64>() / spec.frames.max(1) as f64;
    let track = f0_track_spec(spec, cfg);
    Ok(AttributeMeasurement {
        phone_index: phone,
        duration_frames: predicted[phone],
        energy,
        energy_ratio: if whole > 0.0 { energy / whole } else { 0.0 },
        mean_f0_hz: if n2 > n1 { mean_voiced(&track, n1..n2) } else { None },
    })
}

/// Unconditional spectral-peak F0 of a phone: mean peak frequency over its
/// frames, without the voicing gate. Used where a pitch value is needed for
/// every sample (variance statistics over generated vowels).
pub fn peak_f0(spec: &Spectrogram, frame_durations: &[usize], phone: usize, cfg: &MeasureConfig) -> Option<f64> {
    let (n1, n2) = spans(frame_durations)[phone];
    let v: Vec<f64> = (n1..n2).filter_map(|t| spectral_peak(spec.frame(t), cfg).map(|p| p.0)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub utterance: usize,
    pub errors: F0Errors,
    pub mcd13: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "utterance,gpe,vde,ffe,mcd13")?;
    for r in rows {
        let gpe = r.errors.gpe.map_or_else(|| "undefined".to_string(), |g| format!("{g}"));
        writeln!(f, "{},{},{},{},{}", r.utterance, gpe, r.errors.vde, r.errors.ffe, r.mcd13)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_attributes_csv(rows: &[(usize, AttributeMeasurement)], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "utterance,phone,duration,energy,f0")?;
    for (u, m) in rows {
        let f0 = m.mean_f0_hz.map_or_else(String::new, |v| format!("{v}"));
        writeln!(f, "{},{},{},{},{}", u, m.phone_index, m.duration_frames, m.energy_ratio, f0)?;
    }
    f.flush()?;
    Ok(())
}
