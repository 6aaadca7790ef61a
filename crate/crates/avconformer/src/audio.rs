//! Audio front-end: 16 kHz waveforms to 20 ms-rate feature sequences.
//!
//! STFT (Hann 400, hop 160, 512-point FFT, reflect center padding), an
//! 80-band mel filterbank with natural-log energies, a 3x3/stride-2 conv stem
//! with a linear projection, and SpecAugment for training.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::tensor::{Graph, NodeId, ParamSet, Real, Rng, Tensor};
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const STFT_WINDOW: usize = 400;
pub const STFT_HOP: usize = 160;
pub const STFT_FFT: usize = 512;
pub const STFT_BINS: usize = STFT_FFT / 2 + 1;
pub const LOG_FLOOR: f32 = 1e-6;

/// Mono waveform at the fixed 16 kHz rate, samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean square over the utterance.
    pub fn power(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>()
            / self.samples.len() as f64
    }
}

/// Frames after the STFT: T_a // 160 + 1.
pub fn stft_frames(t_a: usize) -> usize {
    t_a / STFT_HOP + 1
}

/// Frames after the conv stem: T_a // 320 + 1.
pub fn stem_frames(t_a: usize) -> usize {
    t_a / (2 * STFT_HOP) + 1
}

// ── WAV I/O ────────────────────────────────────────────────────────────

/// Reads mono 16-bit PCM WAV at 16 kHz; anything else is rejected with a
/// description of what was found.
pub fn read_wav<R: std::io::Read>(mut r: R) -> Result<Waveform> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" {
        return Err(Error::Input("not a RIFF/WAVE file".into()));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    loop {
        let mut chunk = [0u8; 8];
        if r.read_exact(&mut chunk).is_err() {
            return Err(Error::Input("WAV file has no data chunk".into()));
        }
        let id = &chunk[0..4];
        let size = u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize;
        if id == b"fmt " {
            let mut body = vec![0u8; size];
            r.read_exact(&mut body)?;
            let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
            let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
            let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
            let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
            fmt = Some((format, channels, rate, bits));
        } else if id == b"data" {
            let (format, channels, rate, bits) =
                fmt.ok_or_else(|| Error::Input("WAV data chunk before fmt".into()))?;
            if format != 1 {
                return Err(Error::Input(format!("WAV format {format}, only PCM (1) supported")));
            }
            if channels != 1 {
                return Err(Error::Input(format!("{channels} channels, only mono supported")));
            }
            if rate != SAMPLE_RATE {
                return Err(Error::Input(format!("sample rate {rate}, only {SAMPLE_RATE} supported")));
            }
            if bits != 16 {
                return Err(Error::Input(format!("{bits}-bit samples, only 16-bit supported")));
            }
            let mut body = vec![0u8; size];
            r.read_exact(&mut body)?;
            let samples = body
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
                .collect();
            return Waveform::new(samples);
        } else {
            let mut skip = vec![0u8; size + (size & 1)];
            r.read_exact(&mut skip)?;
        }
    }
}

pub fn write_wav<W: std::io::Write>(w: &mut W, wave: &Waveform) -> Result<()> {
    let data_len = (wave.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&SAMPLE_RATE.to_le_bytes())?;
    w.write_all(&(SAMPLE_RATE * 2).to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&16u16.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

// ── STFT ───────────────────────────────────────────────────────────────

fn reflect_index(mut i: i64, len: i64) -> usize {
    // bounce until inside [0, len); handles signals shorter than the pad
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * (len - 1) - i;
        } else {
            return i as usize;
        }
        if len == 1 {
            return 0;
        }
    }
}

/// Magnitude spectrogram (257, T_a//160+1): Hann window of 400, hop 160,
/// 512-point FFT, signal reflect-padded by 200 on each side.
pub fn stft(wave: &Waveform) -> Result<Tensor> {
    if wave.is_empty() {
        return Err(Error::Input("empty waveform".into()));
    }
    let t_a = wave.len();
    let frames = stft_frames(t_a);
    let pad = STFT_WINDOW / 2;
    let len = t_a as i64;
    let window: Vec<f32> = (0..STFT_WINDOW)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f32::consts::PI * i as f32 / STFT_WINDOW as f32).cos())
        .collect();
    let fft = FftPlanner::<f32>::new().plan_fft_forward(STFT_FFT);
    let mut out = Tensor::zeros(&[STFT_BINS, frames]);
    let mut buf = vec![Complex::new(0.0f32, 0.0); STFT_FFT];
    for f in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(0.0, 0.0);
            if i < STFT_WINDOW {
                let src = f as i64 * STFT_HOP as i64 + i as i64 - pad as i64;
                b.re = wave.samples[reflect_index(src, len)] * window[i];
            }
        }
        fft.process(&mut buf);
        for (k, b) in buf.iter().take(STFT_BINS).enumerate() {
            out.data[k * frames + f] = b.norm();
        }
    }
    Ok(out)
}

// ── Mel filterbank ─────────────────────────────────────────────────────

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters (mel_bins, 257) spanning 0-8000 Hz on the mel scale.
pub fn mel_filterbank(mel_bins: usize) -> Tensor {
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..mel_bins + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (mel_bins + 1) as f64))
        .collect();
    let mut fb = Tensor::zeros(&[mel_bins, STFT_BINS]);
    for m in 0..mel_bins {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..STFT_BINS {
            let f = k as f64 * SAMPLE_RATE as f64 / STFT_FFT as f64;
            let w = if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                fb.data[m * STFT_BINS + k] = w as f32;
            }
        }
    }
    fb
}

/// Log filterbank energies; frame count is preserved.
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// (mel_bins, frames), natural-log energies
    pub frames: Tensor,
}

impl MelSpectrogram {
    pub fn mel_bins(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape[1]
    }
}

/// Apply the filterbank and take log(x + 1e-6).
pub fn mel_project(spec: &Tensor, filterbank: &Tensor) -> Result<MelSpectrogram> {
    if spec.shape.len() != 2 || spec.shape[0] != STFT_BINS {
        return Err(Error::Shape {
            op: "mel_project",
            lhs: spec.shape.clone(),
            rhs: vec![STFT_BINS],
        });
    }
    let mel_bins = filterbank.shape[0];
    let frames = spec.shape[1];
    let mut out = Tensor::zeros(&[mel_bins, frames]);
    for m in 0..mel_bins {
        for f in 0..frames {
            let mut acc = 0.0f32;
            for k in 0..STFT_BINS {
                let w = filterbank.data[m * STFT_BINS + k];
                if w != 0.0 {
                    acc += w * spec.data[k * frames + f];
                }
            }
            out.data[m * frames + f] = (acc + LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram { frames: out })
}

// ── SpecAugment ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SpecAugmentConfig {
    pub freq_masks: usize,
    pub freq_width: usize,
    pub time_masks: usize,
    pub time_pct: f32,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            freq_width: 27,
            time_masks: 5,
            time_pct: 0.05,
        }
    }
}

/// Frequency and adaptive time masking; identity in eval mode. Mask widths
/// are drawn uniformly including zero; masked cells are set to 0.
pub fn spec_augment(
    mel: &MelSpectrogram,
    cfg: &SpecAugmentConfig,
    rng: &mut Rng,
    training: bool,
) -> MelSpectrogram {
    if !training {
        return mel.clone();
    }
    let bins = mel.mel_bins();
    let frames = mel.num_frames();
    let mut out = mel.clone();
    for _ in 0..cfg.freq_masks {
        let width = rng.int_range(0, cfg.freq_width.min(bins));
        if width == 0 {
            continue;
        }
        let start = rng.int_range(0, bins - width);
        for b in start..start + width {
            out.frames.data[b * frames..(b + 1) * frames].fill(0.0);
        }
    }
    let max_t = ((frames as f32) * cfg.time_pct).floor() as usize;
    for _ in 0..cfg.time_masks {
        let width = rng.int_range(0, max_t);
        if width == 0 {
            continue;
        }
        let start = rng.int_range(0, frames - width);
        for b in 0..bins {
            out.frames.data[b * frames + start..b * frames + start + width].fill(0.0);
        }
    }
    out
}

// ── Conv stem + projection ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioFrontendConfig {
    pub mel_bins: usize,
    pub stem_filters: usize,
    pub out_dim: usize,
}

impl Default for AudioFrontendConfig {
    fn default() -> Self {
        Self {
            mel_bins: 80,
            stem_filters: 180,
            out_dim: 180,
        }
    }
}

impl AudioFrontendConfig {
    /// Frequency extent after the stride-2 stem conv.
    pub fn freq_out(&self) -> usize {
        (self.mel_bins - 1) / 2 + 1
    }
}

/// Parameter ids for the stem conv and output projection.
#[derive(Debug, Clone)]
pub struct AudioFrontend {
    pub cfg: AudioFrontendConfig,
    filterbank: Tensor,
    stem_w: usize,
    stem_b: usize,
    proj_w: usize,
    proj_b: usize,
}

impl AudioFrontend {
    pub fn new(cfg: AudioFrontendConfig, params: &mut ParamSet, rng: &mut Rng) -> Self {
        let fan_in = 9; // 3x3 kernel, 1 input channel
        let stem_w = params.weight(
            "audio.stem.w",
            &[cfg.stem_filters, 1, 3, 3],
            fan_in,
            rng,
        );
        let stem_b = params.zeros("audio.stem.b", &[cfg.stem_filters], true);
        let proj_in = cfg.stem_filters * cfg.freq_out();
        let proj_w = params.weight("audio.proj.w", &[cfg.out_dim, proj_in], proj_in, rng);
        let proj_b = params.zeros("audio.proj.b", &[cfg.out_dim], true);
        let filterbank = mel_filterbank(cfg.mel_bins);
        Self {
            cfg,
            filterbank,
            stem_w,
            stem_b,
            proj_w,
            proj_b,
        }
    }

    /// Waveform -> log-mel (outside the graph); SpecAugment only when the
    /// graph is in training mode.
    pub fn features(
        &self,
        wave: &Waveform,
        aug: &SpecAugmentConfig,
        rng: &mut Rng,
        training: bool,
    ) -> Result<MelSpectrogram> {
        let spec = stft(wave)?;
        let mel = mel_project(&spec, &self.filterbank)?;
        Ok(spec_augment(&mel, aug, rng, training))
    }

    /// Log-mel (mel_bins, F) -> (F//2+1 frames, out_dim), time-major.
    /// Frequency and channel flatten channel-major: flat = c * freq_out + f.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet,
        mel: &MelSpectrogram,
    ) -> Result<NodeId> {
        if mel.mel_bins() != self.cfg.mel_bins {
            return Err(Error::Shape {
                op: "audio_stem",
                lhs: mel.frames.shape.clone(),
                rhs: vec![self.cfg.mel_bins],
            });
        }
        let frames = mel.num_frames();
        let x = g.constant(Tensor::<F> {
            shape: vec![1, self.cfg.mel_bins, frames],
            data: mel.frames.data.iter().map(|&v| F::from_f32(v)).collect(),
        });
        let w = g.param_leaf(params, self.stem_w);
        let b = g.param_leaf(params, self.stem_b);
        let conv = g.conv2d(x, w, Some(b), (2, 2), (1, 1), 1)?;
        let act = g.swish(conv);
        // (C, freq, T) -> (T, C, freq) -> (T, C*freq)
        let t_out = g.shape(act)[2];
        let perm = g.permute(act, &[2, 0, 1])?;
        let flat = g.reshape(perm, &[t_out, self.cfg.stem_filters * self.cfg.freq_out()])?;
        let pw = g.param_leaf(params, self.proj_w);
        let pb = g.param_leaf(params, self.proj_b);
        let proj = g.matmul_nt(flat, pw)?;
        g.add_bias(proj, pb)
    }
}
