//! WAV decoding, band-limited resampling and MFCC extraction.
//!
//! The MFCC pipeline is: pre-emphasis, Hann-windowed frames, FFT magnitude
//! spectrum, HTK mel filterbank (`mel(f) = 2595 log10(1 + f/700)`), natural
//! log floored at `log_floor`, orthonormal DCT-II truncated to `n_mfcc`.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::matrix::Matrix;

pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Taps per polyphase branch of the resampling filter.
pub const RESAMPLE_TAPS: usize = 64;
/// Kaiser window shape parameter of the resampling filter.
pub const KAISER_BETA: f64 = 8.6;

/// Phase tables larger than this are not precomputed.
const MAX_PHASE_TABLE: u64 = 4096;

/// Mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Wav("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

/// Decodes a RIFF/WAVE byte buffer holding 16-bit PCM or 32-bit float
/// samples in one or two channels. Stereo is averaged to mono.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| match e {
        hound::Error::Unsupported => Error::UnsupportedCodec("unsupported WAVE format tag".into()),
        other => Error::Wav(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::UnsupportedCodec(format!("{channels} channels")));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        (format, bits) => {
            return Err(Error::UnsupportedCodec(format!("{format:?} {bits}-bit")));
        }
    }
    .map_err(|e| Error::Wav(format!("truncated or unreadable data chunk: {e}")))?;

    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Wav("truncated data chunk (partial frame)".into()));
    }
    if interleaved.is_empty() {
        return Err(Error::Wav("zero-length audio".into()));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::Wav(msg) => Error::Wav(format!("{}: {msg}", path.display())),
        Error::UnsupportedCodec(msg) => {
            Error::UnsupportedCodec(format!("{}: {msg}", path.display()))
        }
        other => other,
    })
}

/// Encodes mono samples as 16-bit PCM WAV (values are clipped to [-1, 1)).
pub fn encode_wav_pcm16(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer =
            hound::WavWriter::new(&mut buf, spec).map_err(|e| Error::Wav(e.to_string()))?;
        for s in samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer
                .write_sample(v)
                .map_err(|e| Error::Wav(e.to_string()))?;
        }
        writer.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    }
    Ok(buf.into_inner())
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= half / k as f64;
        let t2 = term * term;
        sum += t2;
        if t2 < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc taps for one fractional phase. Tap `k` multiplies
/// source sample `base - HALF + 1 + k`; taps are normalised to unit sum.
fn phase_taps(frac: f64, cutoff: f64) -> [f64; RESAMPLE_TAPS] {
    let half = (RESAMPLE_TAPS / 2) as f64;
    let norm = bessel_i0(KAISER_BETA);
    let mut taps = [0.0; RESAMPLE_TAPS];
    for (k, tap) in taps.iter_mut().enumerate() {
        // distance from the output instant to the source sample
        let d = frac + half - 1.0 - k as f64;
        let r = d / half;
        let window = if r.abs() <= 1.0 {
            bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
        } else {
            0.0
        };
        *tap = cutoff * sinc(cutoff * d) * window;
    }
    let sum: f64 = taps.iter().sum();
    if sum != 0.0 {
        taps.iter_mut().for_each(|t| *t /= sum);
    }
    taps
}

/// Polyphase windowed-sinc resampler (Kaiser, beta 8.6, 64 taps per
/// phase). Output sample `n` sits at source time `n * src / dst`; the
/// filter cutoff is the lower of the two Nyquist rates and samples outside
/// the signal are treated as zero. Equal rates return the input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let g = gcd(w.sample_rate as u64, target_rate as u64);
    let up = target_rate as u64 / g;
    let down = w.sample_rate as u64 / g;
    let cutoff = (up as f64 / down as f64).min(1.0);

    let len = w.samples.len() as u64;
    let out_len = ((len * up + down / 2) / down) as usize;

    let table: Option<Vec<[f64; RESAMPLE_TAPS]>> = (up <= MAX_PHASE_TABLE).then(|| {
        (0..up)
            .map(|p| phase_taps(p as f64 / up as f64, cutoff))
            .collect()
    });

    let half = RESAMPLE_TAPS as i64 / 2;
    let src = &w.samples;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let computed;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                computed = phase_taps(phase as f64 / up as f64, cutoff);
                &computed
            }
        };
        let first = base - half + 1;
        let mut acc = 0.0;
        for (k, tap) in taps.iter().enumerate() {
            let j = first + k as i64;
            if j >= 0 && (j as usize) < src.len() {
                acc += tap * src[j as usize];
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

/// Framing and filterbank parameters. Lengths are in samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub pre_emphasis: f64,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FrameConfig {
    /// 25 ms frames with a 10 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            frame_length: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 26,
            n_mfcc: 13,
            pre_emphasis: 0.97,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("frame config: {msg}")));
        if self.frame_length == 0 || self.hop == 0 {
            return fail("frame_length and hop must be positive".into());
        }
        if self.hop > self.frame_length {
            return fail(format!("hop {} exceeds frame_length {}", self.hop, self.frame_length));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.frame_length {
            return fail(format!(
                "n_fft {} must be a power of two >= frame_length {}",
                self.n_fft, self.frame_length
            ));
        }
        if self.n_mels == 0 || self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return fail(format!(
                "need 0 < n_mfcc ({}) <= n_mels ({})",
                self.n_mfcc, self.n_mels
            ));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return fail(format!("pre_emphasis {} outside [0, 1)", self.pre_emphasis));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= sample_rate as f64 / 2.0) {
            return fail(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= {}",
                self.fmin,
                self.fmax,
                sample_rate as f64 / 2.0
            ));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
        if !(self.log_floor > 0.0) {
            return fail("log_floor must be positive".into());
        }
        Ok(())
    }

    /// Number of frames for a signal of `len` samples (after padding
    /// short signals to one frame).
    pub fn frame_count(&self, len: usize) -> usize {
        let len = len.max(self.frame_length);
        1 + (len - self.frame_length) / self.hop
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters, one per row, over the `n_fft/2 + 1` FFT bins.
///
/// Filter edges are `n_mels + 2` points equally spaced in mel between
/// `fmin` and `fmax`; weights are evaluated at each bin's centre frequency
/// and peak at 1 on the filter's centre.
pub fn mel_filterbank(cfg: &FrameConfig, sample_rate: u32) -> Result<Matrix> {
    cfg.validate(sample_rate)?;
    let n_bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;

    let mut bank = Matrix::zeros(cfg.n_mels, n_bins);
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = bank.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            *w = rising.min(falling).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; reduce n_mels or raise n_fft"
            )));
        }
    }
    Ok(bank)
}

/// Orthonormal DCT-II basis, `n_out` rows by `n_in` columns.
fn dct_matrix(n_out: usize, n_in: usize) -> Matrix {
    let mut m = Matrix::zeros(n_out, n_in);
    let n = n_in as f64;
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..n_in {
            let angle = std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n);
            m.set(k, i, scale * angle.cos());
        }
    }
    m
}

/// Periodic Hann window.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Reusable MFCC extractor holding the FFT plan, window, filterbank and DCT
/// basis for one `(FrameConfig, sample_rate)` pair.
pub struct MfccExtractor {
    cfg: FrameConfig,
    sample_rate: u32,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Matrix,
    dct: Matrix,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("cfg", &self.cfg)
            .field("sample_rate", &self.sample_rate)
            .finish_non_exhaustive()
    }
}

impl MfccExtractor {
    pub fn new(cfg: &FrameConfig, sample_rate: u32) -> Result<Self> {
        let filterbank = mel_filterbank(cfg, sample_rate)?;
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            window: hann(cfg.frame_length),
            filterbank,
            dct: dct_matrix(cfg.n_mfcc, cfg.n_mels),
        })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.cfg
    }

    pub fn extract(&self, w: &Waveform) -> Result<Matrix> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::Config(format!(
                "waveform rate {} Hz does not match extractor rate {} Hz",
                w.sample_rate, self.sample_rate
            )));
        }
        if let Some(i) = w.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        let cfg = &self.cfg;

        let mut signal = Vec::with_capacity(w.len().max(cfg.frame_length));
        let mut prev = 0.0;
        for (i, &s) in w.samples.iter().enumerate() {
            signal.push(if i == 0 { s } else { s - cfg.pre_emphasis * prev });
            prev = s;
        }
        if signal.len() < cfg.frame_length {
            signal.resize(cfg.frame_length, 0.0);
        }

        let n_frames = cfg.frame_count(signal.len());
        let n_bins = cfg.n_fft / 2 + 1;
        let mut out = Matrix::zeros(n_frames, cfg.n_mfcc);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut magnitude = vec![0.0; n_bins];
        for f in 0..n_frames {
            let start = f * cfg.hop;
            let frame = &signal[start..start + cfg.frame_length];
            for (slot, (s, win)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(s * win, 0.0);
            }
            buf[cfg.frame_length..].fill(Complex::new(0.0, 0.0));
            self.fft.process(&mut buf);
            for (m, c) in magnitude.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            let log_mel: Vec<f64> = self
                .filterbank
                .mul_vec(&magnitude)
                .into_iter()
                .map(|e| e.max(cfg.log_floor).ln())
                .collect();
            out.row_mut(f).copy_from_slice(&self.dct.mul_vec(&log_mel));
        }
        Ok(out)
    }
}

/// MFCC frames of `w`: one row per frame, `cfg.n_mfcc` columns.
pub fn mfcc(w: &Waveform, cfg: &FrameConfig) -> Result<Matrix> {
    MfccExtractor::new(cfg, w.sample_rate)?.extract(w)
}

/// Per-coefficient mean followed by per-coefficient population standard
/// deviation. Each column is summed in sorted order, so the result does
/// not depend on frame order.
pub fn pool_statistics(m: &Matrix) -> Result<FeatureVector> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Config("cannot pool an empty frame matrix".into()));
    }
    let n = m.rows() as f64;
    let mut means = Vec::with_capacity(m.cols());
    let mut stds = Vec::with_capacity(m.cols());
    let mut column = Vec::with_capacity(m.rows());
    for c in 0..m.cols() {
        column.clear();
        column.extend((0..m.rows()).map(|r| m.get(r, c)));
        column.sort_by(f64::total_cmp);
        let mean = column.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = column.iter().map(|v| (v - mean) * (v - mean)).collect();
        sq.sort_by(f64::total_cmp);
        means.push(mean);
        stds.push((sq.iter().sum::<f64>() / n).sqrt());
    }
    means.extend(stds);
    Ok(FeatureVector::new(means))
}

/// Decode, resample to `target_rate`, extract MFCCs and pool them.
pub fn utterance_features(
    bytes: &[u8],
    extractor: &MfccExtractor,
    target_rate: u32,
) -> Result<FeatureVector> {
    let wave = resample(&decode_wav(bytes)?, target_rate)?;
    pool_statistics(&extractor.extract(&wave)?)
}
