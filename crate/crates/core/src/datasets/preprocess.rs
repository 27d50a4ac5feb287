//! Windowing and per-modality feature transforms.
//!
//! Accelerometer windows become per-second, per-axis DCT coefficient
//! blocks; camera-style windows become downsampled, block-averaged
//! frame stacks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{RawRecording, WindowInstance};

/// One window of multi-channel samples cut from a recording.
#[derive(Debug, Clone)]
pub struct RawWindow {
    /// `[channel][sample]`, all channels equal length.
    pub channels: Vec<Vec<f64>>,
    pub sample_rate: f64,
}

/// Cuts fixed-length windows with the given overlap.
///
/// The stride is `window_s - overlap_s`; windows start at sample 0 and
/// advance by whole strides, and a trailing partial window is dropped.
pub fn sliding_window(rec: &RawRecording, window_s: f64, overlap_s: f64) -> Result<Vec<RawWindow>> {
    if !(overlap_s >= 0.0 && overlap_s < window_s) {
        return Err(Error::invalid(format!(
            "overlap {overlap_s}s must satisfy 0 <= overlap < window ({window_s}s)"
        )));
    }
    let win = (window_s * rec.sample_rate).round() as usize;
    let stride = ((window_s - overlap_s) * rec.sample_rate).round() as usize;
    if win == 0 || stride == 0 {
        return Err(Error::invalid("window or stride rounds to zero samples"));
    }
    let n = rec.len();
    if n < win {
        return Err(Error::data(format!(
            "recording ({}, {}) has {n} samples, shorter than one {win}-sample window",
            rec.person_id, rec.activity_id
        )));
    }
    let mut windows = Vec::new();
    let mut start = 0;
    while start + win <= n {
        windows.push(RawWindow {
            channels: rec
                .channels
                .iter()
                .map(|(_, data)| data[start..start + win].to_vec())
                .collect(),
            sample_rate: rec.sample_rate,
        });
        start += stride;
    }
    Ok(windows)
}

/// Orthonormal DCT-II.
pub fn dct_ii(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, &v)| v * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Orthonormal DCT-III, the inverse of [`dct_ii`].
pub fn dct_iii(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len();
    let nf = n as f64;
    (0..n)
        .map(|i| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
                    scale * c * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos()
                })
                .sum()
        })
        .collect()
}

/// Per-second, per-axis DCT features for an accelerometer window.
///
/// Each one-second slice of each axis is transformed with the
/// orthonormal DCT-II and the first `n_coeff` coefficients are kept in
/// frequency-index order; a 5-second tri-axial window becomes a
/// `(5, 3, n_coeff)` tensor.
pub fn dct_features(window: &RawWindow, n_coeff: usize) -> Result<Tensor> {
    let sps = window.sample_rate.round() as usize;
    if sps == 0 {
        return Err(Error::invalid("sample rate rounds to zero"));
    }
    if sps < n_coeff {
        return Err(Error::data(format!(
            "one-second slice has {sps} samples, fewer than {n_coeff} coefficients"
        )));
    }
    let n_axes = window.channels.len();
    if n_axes == 0 {
        return Err(Error::data("window has no channels"));
    }
    let len = window.channels[0].len();
    if len % sps != 0 {
        return Err(Error::data(format!(
            "window length {len} is not a whole number of {sps}-sample seconds"
        )));
    }
    let n_slices = len / sps;
    let mut out = Vec::with_capacity(n_slices * n_axes * n_coeff);
    for s in 0..n_slices {
        for axis in window.channels.iter() {
            let coeffs = dct_ii(&axis[s * sps..(s + 1) * sps]);
            out.extend_from_slice(&coeffs[..n_coeff]);
        }
    }
    Tensor::new(vec![n_slices, n_axes, n_coeff], out)
}

/// Keeps the first frame of each second: frames at indices
/// `0, factor, 2*factor, ...`.
pub fn downsample_frames(frames: &[Tensor], factor: usize) -> Result<Vec<Tensor>> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be positive"));
    }
    Ok(frames.iter().step_by(factor).cloned().collect())
}

/// Block-mean spatial reduction; input extents must divide evenly by
/// the output extents.
pub fn resize_frame(frame: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("resize_frame: expected 2-d frame, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if out_h == 0 || out_w == 0 || h % out_h != 0 || w % out_w != 0 {
        return Err(Error::shape(format!(
            "resize_frame: {h}x{w} not divisible into {out_h}x{out_w} blocks"
        )));
    }
    let (bh, bw) = (h / out_h, w / out_w);
    let d = frame.data();
    let mut out = vec![0.0; out_h * out_w];
    for oi in 0..out_h {
        for oj in 0..out_w {
            let mut acc = 0.0;
            for p in 0..bh {
                for q in 0..bw {
                    acc += d[(oi * bh + p) * w + (oj * bw + q)];
                }
            }
            out[oi * out_w + oj] = acc / (bh * bw) as f64;
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Sensor modality, deciding the per-window feature transform and the
/// final instance shape.
#[derive(Debug, Clone, PartialEq)]
pub enum Modality {
    /// One channel per axis; windows become `(seconds, axes, n_coeff)`
    /// DCT blocks.
    Accelerometer { n_coeff: usize },
    /// One channel per pixel of a `native` frame, downsampled to 1 Hz
    /// and block-averaged to 12x16: `(seconds, 12, 16)`.
    DepthCamera { native: (usize, usize) },
    /// One channel per cell of a 16x16 mat, downsampled to 1 Hz with no
    /// resize: `(seconds, 16, 16)`.
    PressureMat,
}

impl Modality {
    pub fn accelerometer() -> Self {
        Modality::Accelerometer { n_coeff: 60 }
    }

    pub fn depth_camera() -> Self {
        Modality::DepthCamera { native: (240, 320) }
    }

    fn frame_extents(&self) -> Option<(usize, usize)> {
        match self {
            Modality::Accelerometer { .. } => None,
            Modality::DepthCamera { native } => Some(*native),
            Modality::PressureMat => Some((16, 16)),
        }
    }

    fn window_features(&self, window: &RawWindow) -> Result<Tensor> {
        match self {
            Modality::Accelerometer { n_coeff } => dct_features(window, *n_coeff),
            Modality::DepthCamera { native } => {
                let frames = frames_of(window, *native)?;
                let kept = downsample_frames(&frames, window.sample_rate.round() as usize)?;
                let resized: Vec<Tensor> = kept
                    .iter()
                    .map(|f| resize_frame(f, 12, 16))
                    .collect::<Result<_>>()?;
                stack_frames(&resized)
            }
            Modality::PressureMat => {
                let frames = frames_of(window, (16, 16))?;
                let kept = downsample_frames(&frames, window.sample_rate.round() as usize)?;
                stack_frames(&kept)
            }
        }
    }
}

fn frames_of(window: &RawWindow, extents: (usize, usize)) -> Result<Vec<Tensor>> {
    let (h, w) = extents;
    if window.channels.len() != h * w {
        return Err(Error::data(format!(
            "expected {}x{}={} pixel channels, got {}",
            h,
            w,
            h * w,
            window.channels.len()
        )));
    }
    let n = window.channels[0].len();
    (0..n)
        .map(|t| {
            let data: Vec<f64> = window.channels.iter().map(|c| c[t]).collect();
            Tensor::new(vec![h, w], data)
        })
        .collect()
}

fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::data("no frames to stack"));
    }
    let s = frames[0].shape().to_vec();
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in frames {
        if f.shape() != s {
            return Err(Error::shape("frames have different extents"));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(vec![frames.len(), s[0], s[1]], data)
}

/// Counts reported alongside preprocessed instances.
#[derive(Debug, Clone, Default)]
pub struct PreprocessSummary {
    pub recordings: usize,
    pub skipped_short: usize,
    pub instances: usize,
}

/// Runs the windowing and feature chain over a batch of recordings.
///
/// Recordings shorter than one window are skipped and counted; other
/// failures abort with the recording named.
pub fn preprocess_recordings(
    recordings: &[RawRecording],
    modality: &Modality,
    window_s: f64,
    overlap_s: f64,
) -> Result<(Vec<WindowInstance>, PreprocessSummary)> {
    let mut summary = PreprocessSummary {
        recordings: recordings.len(),
        ..Default::default()
    };
    let mut instances = Vec::new();
    for rec in recordings {
        let windows = match sliding_window(rec, window_s, overlap_s) {
            Ok(w) => w,
            Err(Error::Data(msg)) if msg.contains("shorter than one") => {
                summary.skipped_short += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        for window in &windows {
            let features = modality.window_features(window).map_err(|e| {
                Error::data(format!(
                    "recording ({}, {}): {e}",
                    rec.person_id, rec.activity_id
                ))
            })?;
            instances.push(WindowInstance {
                features,
                activity_id: rec.activity_id.clone(),
                person_id: rec.person_id.clone(),
            });
        }
    }
    summary.instances = instances.len();
    Ok((instances, summary))
}

/// Validates that `modality` can ingest the named channels.
pub fn check_channels(modality: &Modality, n_channels: usize) -> Result<()> {
    match modality.frame_extents() {
        Some((h, w)) if n_channels != h * w => Err(Error::data(format!(
            "modality expects {h}x{w}={} channels, CSV has {n_channels}",
            h * w
        ))),
        _ if n_channels == 0 => Err(Error::data("no channel columns")),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rate: f64, seconds: f64, n_channels: usize) -> RawRecording {
        let n = (rate * seconds) as usize;
        RawRecording {
            person_id: "p".into(),
            activity_id: "a".into(),
            sample_rate: rate,
            channels: (0..n_channels)
                .map(|c| (format!("ch{c}"), (0..n).map(|i| (i + c) as f64).collect()))
                .collect(),
        }
    }

    #[test]
    fn window_count_matches_closed_form() {
        // 60 s at stride 2 s: floor((60-5)/2) + 1 = 28
        let r = rec(100.0, 60.0, 1);
        let w = sliding_window(&r, 5.0, 3.0).unwrap();
        assert_eq!(w.len(), 28);
    }

    #[test]
    fn exact_length_gives_single_window() {
        let r = rec(100.0, 5.0, 2);
        let w = sliding_window(&r, 5.0, 3.0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].channels[0].len(), 500);
    }

    #[test]
    fn zero_overlap_gives_disjoint_windows() {
        let r = rec(10.0, 10.0, 1);
        let w = sliding_window(&r, 5.0, 0.0).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].channels[0][49], 49.0);
        assert_eq!(w[1].channels[0][0], 50.0);
    }

    #[test]
    fn too_short_recording_is_an_error() {
        let r = rec(10.0, 3.0, 1);
        assert!(sliding_window(&r, 5.0, 3.0).is_err());
    }

    #[test]
    fn dct_constant_slice_is_dc_only() {
        let c = 2.5;
        let n = 64;
        let coeffs = dct_ii(&vec![c; n]);
        assert!((coeffs[0] - c * (n as f64).sqrt()).abs() < 1e-9);
        for &v in &coeffs[1..] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn dct_round_trip_and_parseval() {
        let x: Vec<f64> = (0..80).map(|i| ((i * 7 % 13) as f64).sin() + 0.1 * i as f64).collect();
        let coeffs = dct_ii(&x);
        let back = dct_iii(&coeffs);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
        let energy_x: f64 = x.iter().map(|v| v * v).sum();
        let energy_c: f64 = coeffs.iter().map(|v| v * v).sum();
        assert!((energy_x - energy_c).abs() < 1e-9 * energy_x.max(1.0));
        // kept-coefficient energy never exceeds the slice energy
        let kept: f64 = coeffs[..60].iter().map(|v| v * v).sum();
        assert!(kept <= energy_x + 1e-9);
    }

    #[test]
    fn dct_features_shape_for_triaxial_window() {
        let r = rec(64.0, 5.0, 3);
        let w = sliding_window(&r, 5.0, 0.0).unwrap();
        let t = dct_features(&w[0], 60).unwrap();
        assert_eq!(t.shape(), &[5, 3, 60]);
    }

    #[test]
    fn dct_features_rejects_short_slices() {
        let r = rec(30.0, 5.0, 3);
        let w = sliding_window(&r, 5.0, 0.0).unwrap();
        assert!(dct_features(&w[0], 60).is_err());
    }

    #[test]
    fn downsample_keeps_first_of_each_second() {
        let frames: Vec<Tensor> = (0..75).map(|i| Tensor::scalar(i as f64).reshaped(vec![1, 1]).unwrap()).collect();
        let kept = downsample_frames(&frames, 15).unwrap();
        assert_eq!(kept.len(), 5);
        let firsts: Vec<f64> = kept.iter().map(|f| f.data()[0]).collect();
        assert_eq!(firsts, vec![0.0, 15.0, 30.0, 45.0, 60.0]);
    }

    #[test]
    fn resize_constant_frame_is_constant() {
        let f = Tensor::new(vec![240, 320], vec![3.5; 240 * 320]).unwrap();
        let r = resize_frame(&f, 12, 16).unwrap();
        assert_eq!(r.shape(), &[12, 16]);
        assert!(r.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn resize_single_hot_block() {
        // one 20x20 block set to 400 -> that output cell averages to 1.0
        let mut data = vec![0.0; 240 * 320];
        for p in 0..20 {
            for q in 0..20 {
                data[(40 + p) * 320 + (60 + q)] = 1.0;
            }
        }
        // block value 400 spread as 400 total over the 400-cell block
        let f = Tensor::new(vec![240, 320], data).unwrap();
        let r = resize_frame(&f, 12, 16).unwrap();
        assert!((r.at2(2, 3) - 1.0).abs() < 1e-12);
        assert!((r.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_rejects_non_divisible() {
        let f = Tensor::new(vec![10, 10], vec![0.0; 100]).unwrap();
        assert!(resize_frame(&f, 3, 5).is_err());
    }

    #[test]
    fn depth_chain_produces_5_12_16() {
        let r = rec(15.0, 5.0, 240 * 320);
        let (instances, summary) =
            preprocess_recordings(&[r], &Modality::depth_camera(), 5.0, 3.0).unwrap();
        assert_eq!(summary.skipped_short, 0);
        assert_eq!(instances.len(), 1);
        assert_eq!(instances[0].features.shape(), &[5, 12, 16]);
    }

    #[test]
    fn pressure_chain_produces_5_16_16() {
        let r = rec(15.0, 7.0, 256);
        let (instances, _) = preprocess_recordings(&[r], &Modality::PressureMat, 5.0, 3.0).unwrap();
        assert_eq!(instances.len(), 2);
        assert_eq!(instances[0].features.shape(), &[5, 16, 16]);
    }

    #[test]
    fn short_recordings_are_skipped_and_counted() {
        let ok = rec(64.0, 5.0, 3);
        let short = rec(64.0, 2.0, 3);
        let (instances, summary) =
            preprocess_recordings(&[ok, short], &Modality::accelerometer(), 5.0, 3.0).unwrap();
        assert_eq!(summary.recordings, 2);
        assert_eq!(summary.skipped_short, 1);
        assert_eq!(instances.len(), 1);
        assert_eq!(instances[0].features.shape(), &[5, 3, 60]);
    }
}
