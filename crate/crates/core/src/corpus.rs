//! Synthetic prosody corpus.
//!
//! Utterances are sequences of phones grouped into words. Every phone carries
//! ground-truth prosody (F0, energy gain, duration in frames); vowels are
//! rendered as a stack of eight harmonics with `1/k` amplitudes, consonants
//! as band-limited noise. Adjacent phones are cross-faded over one hop.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CORPUS_MAGIC: &[u8; 4] = b"HVAC";
pub const CORPUS_VERSION: u32 = 1;

const HARMONICS: usize = 8;
const NOISE_PARTIALS: usize = 24;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("waveform of {len} samples is shorter than one frame ({frame_length})")]
    TooShort { len: usize, frame_length: usize },
    #[error("corrupt corpus file at byte offset {offset}: {what}")]
    Corrupt { offset: usize, what: String },
    #[error("unsupported corpus version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab_size: u32,
    pub vowel_ids: Vec<u32>,
    pub sample_rate: u32,
    pub frame_length: usize,
    pub hop_length: usize,
    pub fft_bins: usize,
    pub f0_range: [f64; 2],
    pub energy_range: [f64; 2],
    /// Inclusive range of phone durations in frames.
    pub duration_range: [u32; 2],
    /// Inclusive range of words per utterance.
    pub words_range: [u32; 2],
    /// Inclusive range of phones per word.
    pub phones_per_word_range: [u32; 2],
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 12,
            vowel_ids: vec![0, 1, 2, 3, 4],
            sample_rate: 24_000,
            frame_length: 1024,
            hop_length: 240,
            fft_bins: 1024,
            f0_range: [120.0, 400.0],
            energy_range: [0.25, 2.5],
            duration_range: [4, 12],
            words_range: [2, 4],
            phones_per_word_range: [1, 3],
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// 8 kHz preset with 129 spectral bins, sized for minutes-scale CPU
    /// training.
    pub fn desk() -> Self {
        CorpusConfig {
            sample_rate: 8_000,
            frame_length: 256,
            hop_length: 80,
            fft_bins: 256,
            ..CorpusConfig::default()
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_bins / 2 + 1
    }

    pub fn is_vowel(&self, phone_id: u32) -> bool {
        self.vowel_ids.contains(&phone_id)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.vowel_ids.is_empty() || self.vowel_ids.iter().any(|&v| v >= self.vocab_size) {
            return bad(format!("vowel_ids {:?} must be nonempty and < vocab_size", self.vowel_ids));
        }
        if self.hop_length == 0 || self.hop_length > self.frame_length {
            return bad("need 0 < hop_length <= frame_length".into());
        }
        if self.frame_length > self.fft_bins {
            return bad("frame_length must not exceed fft_bins".into());
        }
        let [f0_lo, f0_hi] = self.f0_range;
        if !(f0_lo > 0.0 && f0_lo <= f0_hi) {
            return bad(format!("empty f0 range {:?}", self.f0_range));
        }
        if f0_hi >= self.sample_rate as f64 / 4.0 {
            return bad("f0 maximum must be below sample_rate / 4".into());
        }
        let [e_lo, e_hi] = self.energy_range;
        if !(e_lo > 0.0 && e_lo <= e_hi) {
            return bad(format!("empty energy range {:?}", self.energy_range));
        }
        for (name, [lo, hi]) in [
            ("duration_range", self.duration_range),
            ("words_range", self.words_range),
            ("phones_per_word_range", self.phones_per_word_range),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("empty {name} [{lo}, {hi}]"));
            }
        }
        if self.duration_range[0] < 2 {
            return bad("phone durations must be at least 2 frames".into());
        }
        let shortest = self.words_range[0] as usize
            * self.phones_per_word_range[0] as usize
            * self.duration_range[0] as usize
            * self.hop_length;
        if shortest < self.frame_length {
            return bad(format!(
                "shortest possible utterance ({shortest} samples) is shorter than one frame"
            ));
        }
        Ok(())
    }

    fn consonant_ids(&self) -> Vec<u32> {
        (0..self.vocab_size).filter(|id| !self.is_vowel(*id)).collect()
    }

    /// Noise band `[lo, hi]` in Hz for a consonant, placed above the F0 search
    /// range.
    pub fn consonant_band(&self, phone_id: u32) -> (f64, f64) {
        let nyq = self.sample_rate as f64 / 2.0;
        let cons = self.consonant_ids();
        let j = cons.iter().position(|&c| c == phone_id).unwrap_or(0);
        let frac = if cons.len() > 1 { j as f64 / (cons.len() - 1) as f64 } else { 0.0 };
        let lo = nyq * (0.35 + 0.4 * frac);
        (lo, (lo + 0.2 * nyq).min(0.98 * nyq))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhoneSpec {
    pub phone_id: u32,
    pub is_vowel: bool,
    pub duration_frames: u32,
    /// Zero for unvoiced phones.
    pub f0_hz: f64,
    pub energy_gain: f64,
    pub word_index: u32,
}

/// `frames × bins` log-magnitude spectrogram, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Self {
        assert_eq!(frames * bins, data.len(), "spectrogram data length");
        Spectrogram { frames, bins, data }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub phones: Vec<PhoneSpec>,
    pub n_words: usize,
    pub waveform: Vec<f64>,
    pub spectrogram: Spectrogram,
    /// Phone index of each frame.
    pub alignment: Vec<usize>,
}

impl Utterance {
    pub fn n_phones(&self) -> usize {
        self.phones.len()
    }

    pub fn n_frames(&self) -> usize {
        self.alignment.len()
    }

    /// `f(n)`: word index of each phone.
    pub fn word_map(&self) -> Vec<usize> {
        self.phones.iter().map(|p| p.word_index as usize).collect()
    }

    pub fn durations(&self) -> Vec<usize> {
        self.phones.iter().map(|p| p.duration_frames as usize).collect()
    }

    /// Frame interval `[n1, n2)` of each phone.
    pub fn frame_spans(&self) -> Vec<(usize, usize)> {
        spans(&self.durations())
    }

    /// Checks the structural invariants tying phones, frames and words together.
    pub fn check(&self) -> Result<(), String> {
        if self.phones.is_empty() {
            return Err("utterance has no phones".into());
        }
        let total: usize = self.durations().iter().sum();
        if total != self.alignment.len() || total != self.spectrogram.frames {
            return Err(format!(
                "durations sum to {total}, alignment has {}, spectrogram has {} frames",
                self.alignment.len(),
                self.spectrogram.frames
            ));
        }
        let wm = self.word_map();
        if wm[0] != 0 || wm.windows(2).any(|w| w[1] < w[0] || w[1] > w[0] + 1) {
            return Err(format!("word map {wm:?} is not a nondecreasing surjection"));
        }
        if wm[wm.len() - 1] + 1 != self.n_words {
            return Err(format!("word map covers {} words, expected {}", wm[wm.len() - 1] + 1, self.n_words));
        }
        for (n, (a, b)) in self.frame_spans().into_iter().enumerate() {
            if self.alignment[a..b].iter().any(|&p| p != n) {
                return Err(format!("alignment disagrees with duration of phone {n}"));
            }
        }
        Ok(())
    }
}

pub(crate) fn spans(durations: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(durations.len());
    let mut t = 0;
    for &d in durations {
        out.push((t, t + d));
        t += d;
    }
    out
}

/// Draws the phone/word structure and independent uniform prosody attributes.
pub fn sample_phones(config: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<PhoneSpec> {
    let n_words = rng.random_range(config.words_range[0]..=config.words_range[1]);
    let mut phones = Vec::new();
    for w in 0..n_words {
        let n = rng.random_range(config.phones_per_word_range[0]..=config.phones_per_word_range[1]);
        for _ in 0..n {
            let phone_id = rng.random_range(0..config.vocab_size);
            let is_vowel = config.is_vowel(phone_id);
            let duration_frames = rng.random_range(config.duration_range[0]..=config.duration_range[1]);
            let f0 = rng.random_range(config.f0_range[0]..=config.f0_range[1]);
            let energy_gain = rng.random_range(config.energy_range[0]..=config.energy_range[1]);
            phones.push(PhoneSpec {
                phone_id,
                is_vowel,
                duration_frames,
                f0_hz: if is_vowel { f0 } else { 0.0 },
                energy_gain,
                word_index: w,
            });
        }
    }
    phones
}

/// Draws one utterance: structure and attributes, then waveform, spectrogram
/// and alignment.
pub fn generate_utterance(config: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<Utterance, CorpusError> {
    config.validate()?;
    let phones = sample_phones(config, rng);
    let noise_seed = rng.random::<u64>();
    render_utterance(config, phones, noise_seed)
}

/// Generates `count` utterances from `config.seed`.
pub fn generate_corpus(config: &CorpusConfig, count: usize) -> Result<Vec<Utterance>, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..count).map(|_| generate_utterance(config, &mut rng)).collect()
}

/// Renders a given phone sequence. Consonant noise is drawn from `noise_seed`.
pub fn render_utterance(
    config: &CorpusConfig,
    phones: Vec<PhoneSpec>,
    noise_seed: u64,
) -> Result<Utterance, CorpusError> {
    let waveform = render_waveform(config, &phones, noise_seed);
    let spectrogram = spectrogram(&waveform, config)?;
    let mut alignment = Vec::with_capacity(spectrogram.frames);
    for (n, p) in phones.iter().enumerate() {
        alignment.extend(std::iter::repeat_n(n, p.duration_frames as usize));
    }
    let n_words = phones.last().map_or(0, |p| p.word_index as usize + 1);
    let utt = Utterance {
        phones,
        n_words,
        waveform,
        spectrogram,
        alignment,
    };
    utt.check().map_err(CorpusError::Config)?;
    Ok(utt)
}

/// Sums per-phone segments, each extended by half a hop on both sides and
/// faded linearly so that neighbouring fades add to one.
pub fn render_waveform(config: &CorpusConfig, phones: &[PhoneSpec], noise_seed: u64) -> Vec<f64> {
    let hop = config.hop_length;
    let sr = config.sample_rate as f64;
    let nyq = sr / 2.0;
    let total: usize = phones.iter().map(|p| p.duration_frames as usize).sum::<usize>() * hop;
    let mut out = vec![0.0; total];
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let half = hop as f64 / 2.0;
    let mut start = 0usize;
    let last = phones.len().saturating_sub(1);
    for (n, p) in phones.iter().enumerate() {
        let end = start + p.duration_frames as usize * hop;
        let lo = if n == 0 { 0 } else { start - hop / 2 };
        let hi = if n == last { end } else { (end + hop - hop / 2).min(total) };

        // Fixed partials for the consonant noise of this phone.
        let partials: Vec<(f64, f64)> = if p.is_vowel {
            Vec::new()
        } else {
            let (b_lo, b_hi) = config.consonant_band(p.phone_id);
            (0..NOISE_PARTIALS)
                .map(|_| (rng.random_range(b_lo..b_hi), rng.random_range(0.0..2.0 * PI)))
                .collect()
        };
        let noise_amp = 0.25;

        for (t, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
            let tc = t as f64 + 0.5;
            let mut env = 1.0;
            if n > 0 {
                env *= ((tc - (start as f64 - half)) / hop as f64).clamp(0.0, 1.0);
            }
            if n < last {
                env *= (1.0 - (tc - (end as f64 - half)) / hop as f64).clamp(0.0, 1.0);
            }
            if env == 0.0 {
                continue;
            }
            let time = (t as f64 - start as f64) / sr;
            let s = if p.is_vowel {
                (1..=HARMONICS)
                    .take_while(|&k| (k as f64) * p.f0_hz < nyq)
                    .map(|k| (2.0 * PI * k as f64 * p.f0_hz * time).sin() / k as f64)
                    .sum::<f64>()
            } else {
                noise_amp * partials.iter().map(|(f, ph)| (2.0 * PI * f * time + ph).sin()).sum::<f64>()
            };
            *o += env * p.energy_gain * s;
        }
        start = end;
    }
    out
}

pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Short-time magnitude spectrum frames, one every hop.
///
/// Frame `t` is centred on sample `t·hop + hop/2` with zero padding past the
/// signal ends, so a waveform of `T·hop` samples yields exactly `T` frames.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    frame_length: usize,
    hop: usize,
    fft_bins: usize,
}

impl Stft {
    pub fn new(frame_length: usize, hop: usize, fft_bins: usize) -> Self {
        let mut planner = FftPlanner::new();
        Stft {
            fft: planner.plan_fft_forward(fft_bins),
            window: hann(frame_length),
            frame_length,
            hop,
            fft_bins,
        }
    }

    pub fn magnitudes(&self, waveform: &[f64]) -> (usize, Vec<f64>) {
        let frames = waveform.len() / self.hop;
        let bins = self.fft_bins / 2 + 1;
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_bins];
        for t in 0..frames {
            let centre = (t * self.hop + self.hop / 2) as isize;
            let start = centre - (self.frame_length / 2) as isize;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, w) in self.window.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < waveform.len() {
                    buf[i].re = waveform[idx as usize] * w;
                }
            }
            self.fft.process(&mut buf);
            out.extend(buf[..bins].iter().map(|c| c.norm()));
        }
        (frames, out)
    }
}

/// Hann-windowed short-time magnitude, compressed as `ln(1 + |X|)`.
pub fn spectrogram(waveform: &[f64], config: &CorpusConfig) -> Result<Spectrogram, CorpusError> {
    if waveform.len() < config.frame_length {
        return Err(CorpusError::TooShort {
            len: waveform.len(),
            frame_length: config.frame_length,
        });
    }
    let stft = Stft::new(config.frame_length, config.hop_length, config.fft_bins);
    let (frames, mags) = stft.magnitudes(waveform);
    let data = mags.into_iter().map(f64::ln_1p).collect();
    Ok(Spectrogram::new(frames, config.n_bins(), data))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_len(buf: &mut Vec<u8>, v: usize) -> Result<(), CorpusError> {
    let v = u32::try_from(v).map_err(|_| CorpusError::Config(format!("length {v} exceeds u32")))?;
    put_u32(buf, v);
    Ok(())
}

pub fn encode_corpus(utterances: &[Utterance]) -> Result<Vec<u8>, CorpusError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CORPUS_MAGIC);
    put_u32(&mut buf, CORPUS_VERSION);
    put_len(&mut buf, utterances.len())?;
    for u in utterances {
        put_len(&mut buf, u.phones.len())?;
        put_len(&mut buf, u.n_words)?;
        for p in &u.phones {
            put_u32(&mut buf, p.phone_id);
            buf.push(p.is_vowel as u8);
            put_u32(&mut buf, p.duration_frames);
            buf.extend_from_slice(&p.f0_hz.to_le_bytes());
            buf.extend_from_slice(&p.energy_gain.to_le_bytes());
            put_u32(&mut buf, p.word_index);
        }
        buf.extend_from_slice(&(u.waveform.len() as u64).to_le_bytes());
        for s in &u.waveform {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        put_len(&mut buf, u.spectrogram.frames)?;
        put_len(&mut buf, u.spectrogram.bins)?;
        for v in &u.spectrogram.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put_len(&mut buf, u.alignment.len())?;
        for &a in &u.alignment {
            put_len(&mut buf, a)?;
        }
    }
    Ok(buf)
}

/// Bounds-checked little-endian cursor that reports byte offsets on failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CorpusError> {
        if self.buf.len() - self.pos < n {
            return Err(CorpusError::Corrupt {
                offset: self.pos,
                what: format!("unexpected end of file reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8, CorpusError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64, CorpusError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64, CorpusError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, CorpusError> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.corrupt(format!("{what} length overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn corrupt(&self, what: String) -> CorpusError {
        CorpusError::Corrupt { offset: self.pos, what }
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Vec<Utterance>, CorpusError> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CORPUS_MAGIC {
        return Err(CorpusError::Corrupt {
            offset: 0,
            what: "bad magic (expected \"HVAC\")".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CORPUS_VERSION {
        return Err(CorpusError::Version {
            found: version,
            expected: CORPUS_VERSION,
        });
    }
    let count = r.u32("utterance count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = r.pos();
        let n = r.u32("phone count")? as usize;
        let m = r.u32("word count")? as usize;
        let mut phones = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let phone_id = r.u32("phone id")?;
            let is_vowel = match r.u8("vowel flag")? {
                0 => false,
                1 => true,
                v => return Err(r.corrupt(format!("vowel flag {v} is not 0 or 1"))),
            };
            phones.push(PhoneSpec {
                phone_id,
                is_vowel,
                duration_frames: r.u32("duration")?,
                f0_hz: r.f64("f0")?,
                energy_gain: r.f64("gain")?,
                word_index: r.u32("word index")?,
            });
        }
        let wl = r.u64("waveform length")?;
        let wl = usize::try_from(wl).map_err(|_| r.corrupt("waveform length overflows".into()))?;
        let waveform = r.f64s(wl, "waveform")?;
        let frames = r.u32("frame count")? as usize;
        let bins = r.u32("bin count")? as usize;
        let cells = frames
            .checked_mul(bins)
            .ok_or_else(|| r.corrupt("spectrogram size overflows".into()))?;
        let data = r.f64s(cells, "spectrogram")?;
        let t = r.u32("alignment length")? as usize;
        let mut alignment = Vec::with_capacity(t.min(1 << 20));
        for _ in 0..t {
            alignment.push(r.u32("alignment index")? as usize);
        }
        let utt = Utterance {
            phones,
            n_words: m,
            waveform,
            spectrogram: Spectrogram { frames, bins, data },
            alignment,
        };
        utt.check().map_err(|e| CorpusError::Corrupt {
            offset: start,
            what: format!("inconsistent utterance record: {e}"),
        })?;
        out.push(utt);
    }
    if !r.finished() {
        return Err(r.corrupt("trailing bytes after last utterance".into()));
    }
    Ok(out)
}

pub fn save_corpus(utterances: &[Utterance], path: &Path) -> Result<(), CorpusError> {
    let bytes = encode_corpus(utterances)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    decode_corpus(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vowel(f0: f64, gain: f64, dur: u32, word: u32) -> PhoneSpec {
        PhoneSpec {
            phone_id: 0,
            is_vowel: true,
            duration_frames: dur,
            f0_hz: f0,
            energy_gain: gain,
            word_index: word,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = CorpusConfig { seed: 11, ..CorpusConfig::desk() };
        let a = generate_corpus(&cfg, 3).unwrap();
        let b = generate_corpus(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusConfig { seed: 12, ..cfg }, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_utterances_satisfy_invariants() {
        let cfg = CorpusConfig::desk();
        for u in generate_corpus(&cfg, 20).unwrap() {
            u.check().unwrap();
            assert_eq!(u.waveform.len(), u.n_frames() * cfg.hop_length);
            assert_eq!(u.spectrogram.bins, cfg.n_bins());
            for p in &u.phones {
                assert!(p.duration_frames >= 2);
                if p.is_vowel {
                    assert!(p.f0_hz >= cfg.f0_range[0] && p.f0_hz <= cfg.f0_range[1]);
                } else {
                    assert_eq!(p.f0_hz, 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_ranges_are_rejected() {
        let cfg = CorpusConfig {
            f0_range: [300.0, 200.0],
            ..CorpusConfig::desk()
        };
        assert!(matches!(cfg.validate(), Err(CorpusError::Config(_))));
        let cfg = CorpusConfig {
            duration_range: [5, 4],
            ..CorpusConfig::desk()
        };
        assert!(cfg.validate().is_err());
        let cfg = CorpusConfig {
            hop_length: 512,
            ..CorpusConfig::desk()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sine_peak_lands_on_expected_bin() {
        let cfg = CorpusConfig::default();
        let sr = cfg.sample_rate as f64;
        let wave: Vec<f64> = (0..cfg.hop_length * 40)
            .map(|t| (2.0 * PI * 1000.0 * t as f64 / sr).sin())
            .collect();
        let spec = spectrogram(&wave, &cfg).unwrap();
        let expected = (1000.0 * cfg.fft_bins as f64 / sr).round() as isize;
        for t in 0..spec.frames {
            let row = spec.frame(t);
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap() as isize;
            assert!((peak - expected).abs() <= 1, "frame {t}: peak {peak} vs {expected}");
        }
    }

    #[test]
    fn silence_gives_zero_spectrogram() {
        let cfg = CorpusConfig::desk();
        let spec = spectrogram(&vec![0.0; 2000], &cfg).unwrap();
        assert!(spec.data.iter().all(|v| v.abs() <= 1e-9));
    }

    #[test]
    fn louder_signal_has_larger_log_magnitude() {
        let cfg = CorpusConfig::desk();
        let wave: Vec<f64> = (0..1600).map(|t| (t as f64 * 0.3).sin() + 0.2 * (t as f64 * 0.07).cos()).collect();
        let loud: Vec<f64> = wave.iter().map(|v| 2.0 * v).collect();
        let a = spectrogram(&wave, &cfg).unwrap();
        let b = spectrogram(&loud, &cfg).unwrap();
        for t in 0..a.frames {
            let sa: f64 = a.frame(t).iter().sum();
            let sb: f64 = b.frame(t).iter().sum();
            assert!(sb > sa);
        }
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| y >= x));
    }

    #[test]
    fn short_waveform_is_rejected() {
        let cfg = CorpusConfig::desk();
        assert!(matches!(
            spectrogram(&[0.0; 100], &cfg),
            Err(CorpusError::TooShort { .. })
        ));
    }

    #[test]
    fn renderer_is_linear_in_gain() {
        let cfg = CorpusConfig::desk();
        let a = render_waveform(&cfg, &[vowel(200.0, 1.0, 10, 0)], 1);
        let b = render_waveform(&cfg, &[vowel(200.0, 2.0, 10, 0)], 1);
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn crossfade_spans_one_hop() {
        let cfg = CorpusConfig::desk();
        let hop = cfg.hop_length;
        let boundary = 6 * hop;
        let phones = [vowel(200.0, 1.0, 6, 0), vowel(300.0, 0.0, 6, 0)];
        let w = render_waveform(&cfg, &phones, 0);
        assert_eq!(w.len(), 12 * hop);
        assert!(w[boundary + hop / 2..].iter().all(|v| *v == 0.0));
        assert!(w[boundary..boundary + hop / 2].iter().any(|v| *v != 0.0));
        let solo = render_waveform(&cfg, &phones[..1], 0);
        assert_eq!(&w[..boundary - hop / 2], &solo[..boundary - hop / 2]);

        // Fades of neighbouring phones sum to one: rendering each phone with the
        // other silenced and adding reproduces the joint rendering.
        let a = [vowel(200.0, 1.0, 6, 0), vowel(300.0, 0.0, 6, 0)];
        let b = [vowel(200.0, 0.0, 6, 0), vowel(300.0, 1.0, 6, 0)];
        let both = [vowel(200.0, 1.0, 6, 0), vowel(300.0, 1.0, 6, 0)];
        let (wa, wb, wab) = (
            render_waveform(&cfg, &a, 0),
            render_waveform(&cfg, &b, 0),
            render_waveform(&cfg, &both, 0),
        );
        for t in 0..wab.len() {
            assert!((wa[t] + wb[t] - wab[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_corruption() {
        let cfg = CorpusConfig { seed: 3, ..CorpusConfig::desk() };
        let utts = generate_corpus(&cfg, 10).unwrap();
        let bytes = encode_corpus(&utts).unwrap();
        assert_eq!(decode_corpus(&bytes).unwrap(), utts);

        let err = decode_corpus(&bytes[..bytes.len() - 7]).unwrap_err();
        assert!(matches!(err, CorpusError::Corrupt { .. }), "{err}");
        assert!(err.to_string().contains("offset"));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_corpus(&bad), Err(CorpusError::Version { found: 2, .. })));

        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(decode_corpus(&bad), Err(CorpusError::Corrupt { offset: 0, .. })));
    }
}
