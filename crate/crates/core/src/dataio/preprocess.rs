//! Resampling, windowing/tokenization, and per-electrode z-scoring.

use crate::numkit::Tensor;

use super::{DataError, EegRecording, EegSample};
use crate::tokenizer::electrode_index;

/// Windowing and token layout. Stride is `token_len · (1 − overlap)` and must
/// come out integral.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeProfile {
    /// Window length in seconds; windows never overlap.
    pub window_s: f64,
    /// Points per token.
    pub token_len: usize,
    /// Fraction of a token shared with its successor, in `[0, 1)`.
    pub overlap: f64,
}

impl TokenizeProfile {
    /// The default recipe: 4 s windows, 256-point tokens, 0.875 overlap.
    pub fn standard() -> Self {
        Self {
            window_s: 4.0,
            token_len: 256,
            overlap: 0.875,
        }
    }

    pub fn stride(&self) -> Result<usize, DataError> {
        let raw = self.token_len as f64 * (1.0 - self.overlap);
        let stride = raw.round();
        if (raw - stride).abs() > 1e-9 || stride < 1.0 {
            return Err(DataError::Config(format!(
                "token stride {raw} is not a positive integer (token_len {}, overlap {})",
                self.token_len, self.overlap
            )));
        }
        Ok(stride as usize)
    }

    pub fn window_samples(&self, rate: u32) -> Result<usize, DataError> {
        let raw = self.window_s * f64::from(rate);
        let w = raw.round();
        if (raw - w).abs() > 1e-9 || w < 1.0 {
            return Err(DataError::Config(format!(
                "window of {}s at {rate} Hz is not a whole number of samples",
                self.window_s
            )));
        }
        Ok(w as usize)
    }

    /// Tokens per window: `(W − L)/S + 1`.
    pub fn tokens_per_window(&self, rate: u32) -> Result<usize, DataError> {
        let w = self.window_samples(rate)?;
        let s = self.stride()?;
        if w < self.token_len {
            return Err(DataError::Config(format!(
                "window of {w} samples is shorter than one {}-point token",
                self.token_len
            )));
        }
        Ok((w - self.token_len) / s + 1)
    }
}

/// Full preprocessing recipe: resample target plus token layout.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessProfile {
    pub target_hz: u32,
    pub tokenize: TokenizeProfile,
}

impl PreprocessProfile {
    pub fn standard() -> Self {
        Self {
            target_hz: 256,
            tokenize: TokenizeProfile::standard(),
        }
    }
}

/// Linear-interpolation resampling to `target_hz`. Output length is
/// `round(n · target/source)`, which preserves duration to within one output
/// sample; positions past the last source sample extrapolate the final
/// segment's slope. Returns the recording untouched when rates already match.
pub fn resample(rec: &EegRecording, target_hz: u32) -> Result<EegRecording, DataError> {
    if target_hz == 0 {
        return Err(DataError::Config("target_hz must be positive".into()));
    }
    let n = rec.samples();
    if n == 0 {
        return Err(DataError::EmptySignal);
    }
    if target_hz == rec.sample_rate() {
        return Ok(rec.clone());
    }
    if n < 2 {
        return Err(DataError::Config(
            "resampling needs at least 2 samples".into(),
        ));
    }
    let e_count = rec.electrode_names().len();
    let ratio = f64::from(rec.sample_rate()) / f64::from(target_hz);
    let out_len = ((n as f64) / ratio).round() as usize;
    let src = rec.signal().data();
    let mut out = Vec::with_capacity(e_count * out_len);
    for e in 0..e_count {
        let row = &src[e * n..(e + 1) * n];
        for k in 0..out_len {
            let pos = k as f64 * ratio;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let v = if i + 1 < n {
                row[i] + frac * (row[i + 1] - row[i])
            } else {
                // extrapolate the last segment
                let slope = row[n - 1] - row[n - 2];
                row[n - 1] + (pos - (n - 1) as f64) * slope
            };
            out.push(v);
        }
    }
    EegRecording::new(
        rec.electrode_names().to_vec(),
        target_hz,
        Tensor::new(&[e_count, out_len], out)?,
        rec.subject_id(),
    )
}

/// Bandpass stage of the pipeline. Identity by design: synthetic corpora need
/// no filtering, and the hook keeps the pipeline shape stable for callers that
/// later substitute a real filter.
pub fn bandpass_hook(rec: EegRecording) -> EegRecording {
    rec
}

/// Cut non-overlapping windows and split each into overlapping tokens.
/// Token `t` of a window starts at sample `t · stride`. Output samples are
/// *not* yet normalized; see [`zscore`].
pub fn segment_and_tokenize(
    rec: &EegRecording,
    profile: &TokenizeProfile,
) -> Result<Vec<EegSample>, DataError> {
    let rate = rec.sample_rate();
    let window = profile.window_samples(rate)?;
    let stride = profile.stride()?;
    let t_count = profile.tokens_per_window(rate)?;
    let c = profile.token_len;
    let e_count = rec.electrode_names().len();
    let n = rec.samples();
    let num_windows = n / window;

    let ids: Vec<_> = rec
        .electrode_names()
        .iter()
        .map(|name| electrode_index(name).expect("recording names are canonical"))
        .collect();

    let src = rec.signal().data();
    let mut out = Vec::with_capacity(num_windows);
    for w in 0..num_windows {
        let start = w * window;
        let mut data = Vec::with_capacity(e_count * t_count * c);
        for e in 0..e_count {
            let row = &src[e * n..(e + 1) * n];
            for t in 0..t_count {
                let begin = start + t * stride;
                data.extend_from_slice(&row[begin..begin + c]);
            }
        }
        let tokens = Tensor::new(&[e_count, t_count, c], data)?;
        out.push(EegSample::new(ids.clone(), tokens, None, None)?);
    }
    Ok(out)
}

/// Per-electrode z-score over the full `T × C` block. A sigma floor of 1e-8
/// maps constant blocks to exact zeros.
pub fn zscore(sample: &EegSample) -> Result<EegSample, DataError> {
    const SIGMA_FLOOR: f64 = 1e-8;
    let shape = sample.tokens().shape().to_vec();
    let (e_count, block) = (shape[0], shape[1] * shape[2]);
    let src = sample.tokens().data();
    let mut out = Vec::with_capacity(src.len());
    for e in 0..e_count {
        let slice = &src[e * block..(e + 1) * block];
        let mean: f64 = slice.iter().sum::<f64>() / block as f64;
        let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
        let std = var.sqrt();
        if std < SIGMA_FLOOR {
            out.extend(std::iter::repeat(0.0).take(block));
        } else {
            out.extend(slice.iter().map(|v| (v - mean) / std));
        }
    }
    let tokens = Tensor::new(&shape, out)?;
    let mut normalized = EegSample::new(
        sample.electrodes().to_vec(),
        tokens,
        sample.label(),
        sample.task_id().cloned(),
    )?;
    if let Some(subject) = sample.subject_id() {
        normalized = normalized.with_subject(subject);
    }
    Ok(normalized)
}

/// Whole pipeline: resample → bandpass hook → windows/tokens → z-score.
pub fn preprocess_recording(
    rec: &EegRecording,
    profile: &PreprocessProfile,
) -> Result<Vec<EegSample>, DataError> {
    let resampled = resample(rec, profile.target_hz)?;
    let filtered = bandpass_hook(resampled);
    let samples = segment_and_tokenize(&filtered, &profile.tokenize)?;
    samples.iter().map(zscore).collect()
}
