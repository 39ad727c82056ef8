//! STFT analysis/synthesis and the spectrogram container shared by every stage.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;
pub const DEFAULT_WINDOW: usize = 1024;
pub const DEFAULT_HOP: usize = 256;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("clip contains non-finite samples".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Complex STFT coefficients stored frame-major: entry `(n, k)` lives at `n * bins + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    frames: usize,
    bins: usize,
    window_size: usize,
    hop_size: usize,
    signal_len: usize,
    dc_dropped: bool,
}

impl ComplexSpectrogram {
    /// All-zero spectrogram with the layout `stft` would produce for `signal_len` samples.
    pub fn zeros(
        frames: usize,
        window_size: usize,
        hop_size: usize,
        signal_len: usize,
        dc_dropped: bool,
    ) -> Self {
        let bins = bins_for(window_size, dc_dropped);
        ComplexSpectrogram {
            data: vec![Complex64::new(0.0, 0.0); frames * bins],
            frames,
            bins,
            window_size,
            hop_size,
            signal_len,
            dc_dropped,
        }
    }

    pub fn from_data(
        data: Vec<Complex64>,
        frames: usize,
        window_size: usize,
        hop_size: usize,
        signal_len: usize,
        dc_dropped: bool,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument("spectrogram needs at least one frame".into()));
        }
        let bins = bins_for(window_size, dc_dropped);
        if data.len() != frames * bins {
            return Err(Error::ShapeMismatch(format!(
                "{} coefficients for {frames} frames x {bins} bins",
                data.len()
            )));
        }
        Ok(ComplexSpectrogram {
            data,
            frames,
            bins,
            window_size,
            hop_size,
            signal_len,
            dc_dropped,
        })
    }

    /// Same layout and metadata, new coefficients.
    pub fn with_data(&self, data: Vec<Complex64>) -> Result<Self> {
        Self::from_data(
            data,
            self.frames,
            self.window_size,
            self.hop_size,
            self.signal_len,
            self.dc_dropped,
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(
            self.frames,
            self.window_size,
            self.hop_size,
            self.signal_len,
            self.dc_dropped,
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop_size(&self) -> usize {
        self.hop_size
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn dc_dropped(&self) -> bool {
        self.dc_dropped
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }

    pub fn set(&mut self, frame: usize, bin: usize, value: Complex64) {
        self.data[frame * self.bins + bin] = value;
    }

    /// The time sequence of one frequency bin.
    pub fn band(&self, bin: usize) -> Vec<Complex64> {
        (0..self.frames).map(|n| self.get(n, bin)).collect()
    }

    pub fn set_band(&mut self, bin: usize, values: &[Complex64]) {
        assert_eq!(values.len(), self.frames, "band length");
        for (n, v) in values.iter().enumerate() {
            self.set(n, bin, *v);
        }
    }

    pub fn bands(&self) -> Vec<Vec<Complex64>> {
        (0..self.bins).map(|k| self.band(k)).collect()
    }

    /// Rebuild from per-band sequences, keeping this spectrogram's metadata.
    pub fn from_bands_like(&self, bands: &[Vec<Complex64>]) -> Result<Self> {
        if bands.len() != self.bins || bands.iter().any(|b| b.len() != self.frames) {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bands of {} frames",
                self.bins, self.frames
            )));
        }
        let mut out = self.zeros_like();
        for (k, b) in bands.iter().enumerate() {
            out.set_band(k, b);
        }
        Ok(out)
    }

    pub fn same_shape(&self, other: &ComplexSpectrogram) -> bool {
        self.frames == other.frames && self.bins == other.bins
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|c| *c *= factor);
        out
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Root-mean-square coefficient magnitude.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.energy() / self.data.len() as f64).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

fn bins_for(window_size: usize, dc_dropped: bool) -> usize {
    if dc_dropped {
        window_size / 2
    } else {
        window_size / 2 + 1
    }
}

/// Periodic Hann window.
pub fn hann(window_size: usize) -> Vec<f64> {
    (0..window_size)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / window_size as f64).cos())
        .collect()
}

fn check_params(window_size: usize, hop_size: usize) -> Result<()> {
    if window_size == 0 || hop_size == 0 {
        return Err(Error::InvalidArgument(
            "window and hop sizes must be positive".into(),
        ));
    }
    if window_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "window size {window_size} must be even"
        )));
    }
    Ok(())
}

fn frame_count(signal_len: usize, window_size: usize, hop_size: usize) -> usize {
    (signal_len + window_size) / hop_size + 1
}

/// Hann-windowed STFT. The clip is zero-padded by `window_size` at both ends.
pub fn stft(clip: &AudioClip, window_size: usize, hop_size: usize) -> Result<ComplexSpectrogram> {
    check_params(window_size, hop_size)?;
    let len = clip.samples.len();
    if len < window_size {
        return Err(Error::ClipTooShort {
            len,
            window: window_size,
        });
    }
    let mut padded = vec![0.0; len + 2 * window_size];
    padded[window_size..window_size + len].copy_from_slice(&clip.samples);

    let frames = frame_count(len, window_size, hop_size);
    let bins = window_size / 2 + 1;
    let window = hann(window_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    let mut data = Vec::with_capacity(frames * bins);
    for n in 0..frames {
        let start = n * hop_size;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    ComplexSpectrogram::from_data(data, frames, window_size, hop_size, len, false)
}

/// Sum of shifted squared windows, one hop period long.
fn wola_profile(window: &[f64], hop_size: usize) -> Vec<f64> {
    let mut profile = vec![0.0; hop_size];
    for (i, w) in window.iter().enumerate() {
        profile[i % hop_size] += w * w;
    }
    profile
}

/// True when Hann analysis plus Hann synthesis overlap-adds to a constant.
pub fn is_cola(window_size: usize, hop_size: usize) -> bool {
    if window_size == 0 || hop_size == 0 || hop_size > window_size {
        return false;
    }
    let profile = wola_profile(&hann(window_size), hop_size);
    let max = profile.iter().cloned().fold(f64::MIN, f64::max);
    let min = profile.iter().cloned().fold(f64::MAX, f64::min);
    min > 0.0 && (max - min) <= 1e-9 * max
}

/// Weighted overlap-add inverse of [`stft`].
pub fn istft(spec: &ComplexSpectrogram, sample_rate: u32) -> Result<AudioClip> {
    if spec.dc_dropped() {
        return Err(Error::InvalidArgument(
            "restore the DC row before inversion".into(),
        ));
    }
    let window_size = spec.window_size();
    let hop_size = spec.hop_size();
    check_params(window_size, hop_size)?;
    if !is_cola(window_size, hop_size) {
        return Err(Error::NonCola {
            window: window_size,
            hop: hop_size,
        });
    }
    let frames = spec.frames();
    let bins = spec.bins();
    let window = hann(window_size);
    let norm = wola_profile(&window, hop_size)[0];
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(window_size);

    let total = (frames - 1) * hop_size + window_size;
    let mut out = vec![0.0; total.max(spec.signal_len() + 2 * window_size)];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    for n in 0..frames {
        let row = &spec.data()[n * bins..(n + 1) * bins];
        buf[..bins].copy_from_slice(row);
        for k in bins..window_size {
            buf[k] = row[window_size - k].conj();
        }
        // A real frame has purely real DC and Nyquist bins.
        buf[0].im = 0.0;
        buf[window_size / 2].im = 0.0;
        ifft.process(&mut buf);
        let start = n * hop_size;
        for i in 0..window_size {
            out[start + i] += buf[i].re / window_size as f64 * window[i];
        }
    }
    let samples: Vec<f64> = out[window_size..window_size + spec.signal_len()]
        .iter()
        .map(|s| s / norm)
        .collect();
    AudioClip::new(samples, sample_rate)
}

/// Remove bin 0, returning the reduced spectrogram and the DC row.
pub fn drop_dc(spec: &ComplexSpectrogram) -> Result<(ComplexSpectrogram, Vec<Complex64>)> {
    if spec.dc_dropped() {
        return Err(Error::InvalidArgument("DC row already dropped".into()));
    }
    let bins = spec.bins();
    let mut data = Vec::with_capacity(spec.frames() * (bins - 1));
    let mut dc = Vec::with_capacity(spec.frames());
    for n in 0..spec.frames() {
        let row = &spec.data()[n * bins..(n + 1) * bins];
        dc.push(row[0]);
        data.extend_from_slice(&row[1..]);
    }
    let reduced = ComplexSpectrogram::from_data(
        data,
        spec.frames(),
        spec.window_size(),
        spec.hop_size(),
        spec.signal_len(),
        true,
    )?;
    Ok((reduced, dc))
}

/// Reinsert a DC row removed by [`drop_dc`].
pub fn restore_dc(spec: &ComplexSpectrogram, dc_row: &[Complex64]) -> Result<ComplexSpectrogram> {
    if !spec.dc_dropped() {
        return Err(Error::InvalidArgument("spectrogram still has its DC row".into()));
    }
    if dc_row.len() != spec.frames() {
        return Err(Error::ShapeMismatch(format!(
            "DC row has {} frames, spectrogram has {}",
            dc_row.len(),
            spec.frames()
        )));
    }
    let bins = spec.bins();
    let mut data = Vec::with_capacity(spec.frames() * (bins + 1));
    for (n, dc) in dc_row.iter().enumerate() {
        data.push(*dc);
        data.extend_from_slice(&spec.data()[n * bins..(n + 1) * bins]);
    }
    ComplexSpectrogram::from_data(
        data,
        spec.frames(),
        spec.window_size(),
        spec.hop_size(),
        spec.signal_len(),
        false,
    )
}

/// Sample encoding for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Read a mono 16-bit PCM or 32-bit float WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{} has {} channels; only mono input is supported",
            path.as_ref().display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedAudio(format!(
                "{bits}-bit {fmt:?} samples; expected 16-bit PCM or 32-bit float"
            )))
        }
    };
    AudioClip::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, format: WavFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in &clip.samples {
        match format {
            WavFormat::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)?;
            }
            WavFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 16_000).unwrap()
    }

    #[test]
    fn zero_clip_gives_zero_spectrogram() {
        let s = stft(&clip(vec![0.0; 4096]), 1024, 256).unwrap();
        assert!(s.data().iter().all(|c| c.norm() == 0.0));
        assert_eq!(s.bins(), 513);
    }

    #[test]
    fn defaults() {
        assert_eq!((DEFAULT_WINDOW, DEFAULT_HOP), (1024, 256));
        assert_eq!(DEFAULT_SAMPLE_RATE, 44_100);
    }

    #[test]
    fn bin_centred_sinusoid_peaks_at_its_bin() {
        let w = 1024;
        let x: Vec<f64> = (0..w)
            .map(|t| (2.0 * PI * 8.0 * t as f64 / w as f64).cos())
            .collect();
        let s = stft(&clip(x.clone()), w, w).unwrap();
        // frame 1 is exactly aligned with the clip
        let win = hann(w);
        for k in 0..=w / 2 {
            let direct: Complex64 = (0..w)
                .map(|t| {
                    let ph = -2.0 * PI * (k * t) as f64 / w as f64;
                    Complex64::from_polar(x[t] * win[t], ph)
                })
                .sum();
            assert!((s.get(1, k) - direct).norm() < 1e-9);
        }
        let mags: Vec<f64> = (0..=w / 2).map(|k| s.get(1, k).norm()).collect();
        let peak = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 8);
        for (k, m) in mags.iter().enumerate() {
            if !(7..=9).contains(&k) {
                assert!(*m < 1e-9 * mags[8], "bin {k} leaks {m}");
            }
        }
    }

    #[test]
    fn round_trip_white_noise() {
        let x = noise(10_000, 3);
        let s = stft(&clip(x.clone()), 1024, 256).unwrap();
        let y = istft(&s, 16_000).unwrap();
        assert_eq!(y.len(), x.len());
        let err: f64 = x.iter().zip(&y.samples).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = x.iter().map(|a| a * a).sum();
        assert!((err / norm).sqrt() < 1e-12);
        let max = x
            .iter()
            .zip(&y.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-6);
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let s = ComplexSpectrogram::zeros(20, 512, 128, 2000, false);
        let y = istft(&s, 16_000).unwrap();
        assert_eq!(y.len(), 2000);
        assert!(y.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dc_drop_restore_is_exact() {
        let s = stft(&clip(noise(3000, 1)), 1024, 256).unwrap();
        let (d, dc) = drop_dc(&s).unwrap();
        assert_eq!(d.bins(), 512);
        assert!(d.dc_dropped());
        assert!(drop_dc(&d).is_err());
        assert_eq!(restore_dc(&d, &dc).unwrap(), s);
        assert!(restore_dc(&d, &dc[1..]).is_err());
        assert!(restore_dc(&s, &dc).is_err());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            stft(&clip(vec![0.0; 100]), 1024, 256),
            Err(Error::ClipTooShort { .. })
        ));
        assert!(stft(&clip(vec![0.0; 2048]), 0, 256).is_err());
        assert!(stft(&clip(vec![0.0; 2048]), 1024, 0).is_err());
        let s = stft(&clip(vec![0.0; 2048]), 1024, 512).unwrap();
        assert!(matches!(istft(&s, 16_000), Err(Error::NonCola { .. })));
        assert!(AudioClip::new(vec![f64::NAN], 100).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn cola_pairs() {
        assert!(is_cola(1024, 256));
        assert!(is_cola(512, 128));
        assert!(is_cola(1024, 341) == false);
        assert!(!is_cola(1024, 512));
    }

    #[test]
    fn parseval() {
        let x = noise(8192, 9);
        let (w, h) = (1024, 256);
        let s = stft(&clip(x.clone()), w, h).unwrap();
        let mut spec_energy = 0.0;
        for n in 0..s.frames() {
            for k in 0..s.bins() {
                let e = s.get(n, k).norm_sqr();
                spec_energy += if k == 0 || k == w / 2 { e } else { 2.0 * e };
            }
        }
        spec_energy /= w as f64;
        let win_sq_sum = wola_profile(&hann(w), h)[0];
        let time_energy: f64 = x.iter().map(|v| v * v).sum::<f64>() * win_sq_sum;
        assert!((spec_energy - time_energy).abs() < 1e-6 * time_energy);
        assert!((win_sq_sum - 1.5).abs() < 1e-12);
    }

    #[test]
    fn wav_round_trip_and_stereo_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let c = AudioClip::new(vec![0.0, 0.5, -0.25, 0.125], 22_050).unwrap();
        let p = dir.path().join("f.wav");
        write_wav(&p, &c, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), c);
        let p16 = dir.path().join("i.wav");
        write_wav(&p16, &c, WavFormat::Pcm16).unwrap();
        assert_eq!(read_wav(&p16).unwrap(), c);

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(Error::UnsupportedAudio(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn stft_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = noise(2048, seed);
            let y = noise(2048, seed + 7919);
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let sx = stft(&clip(x), 512, 128).unwrap();
            let sy = stft(&clip(y), 512, 128).unwrap();
            let sm = stft(&clip(mix), 512, 128).unwrap();
            let scale = sm.energy().sqrt().max(1e-300);
            let mut err = 0.0;
            for i in 0..sm.data().len() {
                err += (sm.data()[i] - (sx.data()[i] * a + sy.data()[i] * b)).norm_sqr();
            }
            prop_assert!(err.sqrt() <= 1e-10 * scale);
        }

        #[test]
        fn round_trip_property(seed in 0u64..1000, len in 2048usize..6000) {
            let x = noise(len, seed);
            let y = istft(&stft(&clip(x.clone()), 512, 128).unwrap(), 16_000).unwrap();
            let err: f64 = x.iter().zip(&y.samples).map(|(a, b)| (a - b).powi(2)).sum();
            let norm: f64 = x.iter().map(|a| a * a).sum();
            prop_assert!((err / norm).sqrt() < 1e-6);
        }
    }
}
