//! Spatiotemporal pairing of camera frames with tire vibration.
//!
//! A frame captured at `t0` shows the road from `d_near` to `d_far` meters
//! ahead of the vehicle. Integrating the RTK speed from `t0` gives the times
//! `t1`/`t2` at which the tire reaches both ends of that segment; the tactile
//! samples recorded in `[t1, t2]` are then re-indexed by traveled arc length so
//! every pair has the same number of samples regardless of speed.
//!
//! Speed is piecewise linear between RTK samples, so all integrals here are
//! closed-form (trapezoids and quadratics) rather than numerical quadrature.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LightCondition, RoadClass};
use crate::frame::VisualFrame;
use crate::signal::TactileSignal;

/// Tolerance, in units of one sample period, for deciding whether a window
/// edge lands on a sample.
const SAMPLE_EDGE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("track exhausted: covered {covered:.4} m of {distance:.4} m after t0={t0:.4} s")]
    InsufficientTrack { t0: f64, distance: f64, covered: f64 },
    #[error("time {t:.4} s outside track span [{start:.4}, {end:.4}]")]
    TimeOutsideTrack { t: f64, start: f64, end: f64 },
    #[error("window [{t1:.4}, {t2:.4}] s outside tactile stream [{start:.4}, {end:.4}]")]
    WindowOutOfRange { t1: f64, t2: f64, start: f64, end: f64 },
    #[error("degenerate segment: s(t1)={s1:.6} m, s(t2)={s2:.6} m")]
    DegenerateSegment { s1: f64, s2: f64 },
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("invalid stream: {0}")]
    InvalidStream(String),
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("rtk csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AlignmentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtkSample {
    /// Seconds since the shared stream epoch.
    pub t: f64,
    /// Cumulative arc length in meters.
    pub s: f64,
    /// Forward speed in m/s.
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtkTrack {
    samples: Vec<RtkSample>,
    rate_hz: f64,
}

impl RtkTrack {
    pub fn new(samples: Vec<RtkSample>, rate_hz: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(AlignmentError::InvalidTrack(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        if !(rate_hz > 0.0) {
            return Err(AlignmentError::InvalidTrack(format!("rate {rate_hz} Hz")));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(AlignmentError::InvalidTrack(format!(
                    "time not strictly increasing at row {}",
                    i + 1
                )));
            }
            if w[1].s < w[0].s {
                return Err(AlignmentError::InvalidTrack(format!(
                    "position decreases at row {}",
                    i + 1
                )));
            }
        }
        if let Some(bad) = samples.iter().find(|p| !(p.v >= 0.0) || !p.t.is_finite()) {
            return Err(AlignmentError::InvalidTrack(format!(
                "bad sample {bad:?} (speed must be finite and non-negative)"
            )));
        }
        Ok(Self { samples, rate_hz })
    }

    /// Builds a track whose positions are the trapezoidal integral of `speeds`.
    pub fn from_speeds(times: &[f64], speeds: &[f64], s_start: f64, rate_hz: f64) -> Result<Self> {
        if times.len() != speeds.len() {
            return Err(AlignmentError::InvalidTrack(
                "times and speeds differ in length".into(),
            ));
        }
        let mut s = s_start;
        let mut samples = Vec::with_capacity(times.len());
        for i in 0..times.len() {
            if i > 0 {
                s += 0.5 * (speeds[i - 1] + speeds[i]) * (times[i] - times[i - 1]);
            }
            samples.push(RtkSample {
                t: times[i],
                s,
                v: speeds[i],
            });
        }
        Self::new(samples, rate_hz)
    }

    /// Samples `speed(t)` at `rate_hz` over `[t_start, t_end]`.
    pub fn sampled(
        t_start: f64,
        t_end: f64,
        rate_hz: f64,
        speed: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let n = ((t_end - t_start) * rate_hz).floor() as usize + 1;
        let times: Vec<f64> = (0..n).map(|i| t_start + i as f64 / rate_hz).collect();
        let speeds: Vec<f64> = times.iter().map(|&t| speed(t)).collect();
        Self::from_speeds(&times, &speeds, 0.0, rate_hz)
    }

    pub fn samples(&self) -> &[RtkSample] {
        &self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn t_start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn t_end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-9 * (1.0 + t.abs());
        if !(t >= self.t_start() - tol && t <= self.t_end() + tol) {
            return Err(AlignmentError::TimeOutsideTrack {
                t,
                start: self.t_start(),
                end: self.t_end(),
            });
        }
        Ok(())
    }

    /// Index `k` of the segment `[t_k, t_{k+1}]` containing `t`.
    fn segment(&self, t: f64) -> usize {
        let idx = self.samples.partition_point(|p| p.t <= t);
        idx.saturating_sub(1).min(self.samples.len() - 2)
    }

    pub fn speed_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let k = self.segment(t);
        let (a, b) = (self.samples[k], self.samples[k + 1]);
        Ok(a.v + (b.v - a.v) * (t - a.t) / (b.t - a.t))
    }

    /// Arc length at `t`: the segment's start position plus the exact
    /// integral of the linearly varying speed.
    pub fn position_at(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let k = self.segment(t);
        let (a, b) = (self.samples[k], self.samples[k + 1]);
        let accel = (b.v - a.v) / (b.t - a.t);
        let tau = t - a.t;
        Ok(a.s + a.v * tau + 0.5 * accel * tau * tau)
    }

    /// Largest gap between recorded positions and the trapezoidal integral of speed.
    pub fn max_integration_residual(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| ((w[1].s - w[0].s) - 0.5 * (w[0].v + w[1].v) * (w[1].t - w[0].t)).abs())
            .fold(0.0, f64::max)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t", "s", "v"] {
            return Err(AlignmentError::InvalidTrack(format!(
                "expected header t,s,v, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let samples = rdr
            .deserialize::<RtkSample>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if samples.len() < 2 {
            return Err(AlignmentError::InvalidTrack("fewer than 2 rows".into()));
        }
        let span = samples[samples.len() - 1].t - samples[0].t;
        let rate = (samples.len() - 1) as f64 / span;
        Self::new(samples, rate)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        for s in &self.samples {
            wtr.serialize(s)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Multi-channel accelerometer recording on the shared clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileStream {
    pub t0: f64,
    pub fs: f64,
    pub channels: Vec<Vec<f64>>,
}

impl TactileStream {
    pub fn new(t0: f64, fs: f64, channels: Vec<Vec<f64>>) -> Result<Self> {
        if !(fs > 0.0) {
            return Err(AlignmentError::InvalidStream(format!("sample rate {fs}")));
        }
        if channels.is_empty() {
            return Err(AlignmentError::InvalidStream("no channels".into()));
        }
        let n = channels[0].len();
        if channels.iter().any(|c| c.len() != n) {
            return Err(AlignmentError::InvalidStream("channels differ in length".into()));
        }
        Ok(Self { t0, fs, channels })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Timestamp of the last sample.
    pub fn t_end(&self) -> f64 {
        self.t0 + (self.len().max(1) - 1) as f64 / self.fs
    }

    /// Keeps only the first `n` samples of each channel.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            t0: self.t0,
            fs: self.fs,
            channels: self.channels.iter().map(|c| c[..n.min(c.len())].to_vec()).collect(),
        }
    }
}

/// Contiguous slice of a stream; sample `i` was taken at `t_start + i / fs`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSegment {
    pub t_start: f64,
    pub fs: f64,
    pub channels: Vec<Vec<f64>>,
}

impl RawSegment {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub d_near: f64,
    pub d_far: f64,
    pub resample_len: usize,
    pub channel_select: Vec<usize>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            d_near: 0.6,
            d_far: 20.0,
            resample_len: 1024,
            channel_select: vec![0],
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_near > 0.0 && self.d_near < self.d_far) {
            return Err(AlignmentError::InvalidConfig(format!(
                "need 0 < d_near < d_far, got {} / {}",
                self.d_near, self.d_far
            )));
        }
        if self.resample_len < 2 {
            return Err(AlignmentError::InvalidConfig("resample_len must be >= 2".into()));
        }
        if self.channel_select.is_empty() {
            return Err(AlignmentError::InvalidConfig("no channels selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub frame: VisualFrame,
    pub signal: TactileSignal,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub s0: f64,
    pub mean_speed: f64,
    pub road_class: Option<RoadClass>,
    pub light: Option<LightCondition>,
}

impl AlignedPair {
    pub fn with_labels(mut self, road_class: RoadClass, light: LightCondition) -> Self {
        self.road_class = Some(road_class);
        self.light = Some(light);
        self
    }
}

/// Every `stride`-th frame, timestamps untouched.
pub fn extract_keyframes(video: &[VisualFrame], stride: usize) -> Result<Vec<VisualFrame>> {
    if stride == 0 {
        return Err(AlignmentError::InvalidInput("stride must be >= 1".into()));
    }
    Ok(video.iter().step_by(stride).cloned().collect())
}

/// Earliest time `t* >= t0` at which the vehicle has traveled `distance`
/// meters since `t0`.
pub fn arrival_time(track: &RtkTrack, t0: f64, distance: f64) -> Result<f64> {
    if !(distance >= 0.0) || !distance.is_finite() {
        return Err(AlignmentError::InvalidInput(format!("distance {distance}")));
    }
    track.check_time(t0)?;
    if distance == 0.0 {
        return Ok(t0);
    }
    let samples = track.samples();
    let mut k = track.segment(t0);
    let mut cur_t = t0;
    let mut cur_v = track.speed_at(t0)?;
    let mut remaining = distance;
    while k + 1 < samples.len() {
        let end = samples[k + 1];
        let dt = end.t - cur_t;
        let covered = 0.5 * (cur_v + end.v) * dt;
        if covered >= remaining && covered > 0.0 {
            let accel = (end.v - cur_v) / dt;
            // cur_v·τ + accel·τ²/2 = remaining, in the cancellation-free form.
            let disc = (cur_v * cur_v + 2.0 * accel * remaining).max(0.0);
            let tau = 2.0 * remaining / (cur_v + disc.sqrt());
            return Ok(cur_t + tau.min(dt));
        }
        remaining -= covered;
        cur_t = end.t;
        cur_v = end.v;
        k += 1;
    }
    Err(AlignmentError::InsufficientTrack {
        t0,
        distance,
        covered: distance - remaining,
    })
}

/// Samples recorded in `[t1, t2]`: the first at or after `t1`, the last at or before `t2`.
pub fn extract_tactile_window(stream: &TactileStream, t1: f64, t2: f64) -> Result<RawSegment> {
    if !(t1 < t2) {
        return Err(AlignmentError::InvalidInput(format!(
            "window start {t1} not before end {t2}"
        )));
    }
    let out_of_range = || AlignmentError::WindowOutOfRange {
        t1,
        t2,
        start: stream.t0,
        end: stream.t_end(),
    };
    let first = ((t1 - stream.t0) * stream.fs - SAMPLE_EDGE_TOL).ceil();
    let last = ((t2 - stream.t0) * stream.fs + SAMPLE_EDGE_TOL).floor();
    if first < 0.0 || last > (stream.len() as f64 - 1.0) || stream.is_empty() {
        return Err(out_of_range());
    }
    let (first, last) = (first as usize, last as usize);
    if first > last {
        return Err(AlignmentError::InvalidInput(format!(
            "window [{t1}, {t2}] contains no samples"
        )));
    }
    Ok(RawSegment {
        t_start: stream.t0 + first as f64 / stream.fs,
        fs: stream.fs,
        channels: stream
            .channels
            .iter()
            .map(|c| c[first..=last].to_vec())
            .collect(),
    })
}

/// Re-indexes `raw` by arc length: `n` equally spaced positions over
/// `[s(t1), s(t2)]`, values linearly interpolated between raw samples.
pub fn resample_spatially(
    raw: &RawSegment,
    track: &RtkTrack,
    t1: f64,
    t2: f64,
    n: usize,
) -> Result<TactileSignal> {
    if n < 2 {
        return Err(AlignmentError::InvalidInput(format!("n = {n}, need >= 2")));
    }
    if raw.is_empty() {
        return Err(AlignmentError::InvalidInput("empty raw segment".into()));
    }
    let s1 = track.position_at(t1)?;
    let s2 = track.position_at(t2)?;
    if !(s2 - s1 > 1e-12) {
        return Err(AlignmentError::DegenerateSegment { s1, s2 });
    }
    let positions = (0..raw.len())
        .map(|i| track.position_at(raw.t_start + i as f64 / raw.fs))
        .collect::<Result<Vec<_>>>()?;
    let step = (s2 - s1) / (n - 1) as f64;
    let channels = raw
        .channels
        .iter()
        .map(|values| {
            (0..n)
                .map(|j| {
                    let target = if j == n - 1 { s2 } else { s1 + j as f64 * step };
                    interp_monotone(&positions, values, target)
                })
                .collect()
        })
        .collect();
    Ok(TactileSignal {
        sample_rate_hz: raw.fs,
        channels,
    })
}

/// Linear interpolation over non-decreasing knots; clamps outside the knot
/// range and takes the later value across zero-width (stationary) gaps.
fn interp_monotone(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let hi = xs.partition_point(|&p| p < x);
    if hi == 0 {
        return ys[0];
    }
    if hi == xs.len() {
        return ys[xs.len() - 1];
    }
    let lo = hi - 1;
    let span = xs[hi] - xs[lo];
    if span <= 0.0 {
        return ys[hi];
    }
    let w = (x - xs[lo]) / span;
    ys[lo] + w * (ys[hi] - ys[lo])
}

/// Builds the pair for one frame: look-ahead arrival times, window
/// extraction, spatial resampling.
pub fn align_pair(
    frame: &VisualFrame,
    track: &RtkTrack,
    stream: &TactileStream,
    cfg: &AlignmentConfig,
) -> Result<AlignedPair> {
    cfg.validate()?;
    let t1 = arrival_time(track, frame.t, cfg.d_near)?;
    let t2 = arrival_time(track, frame.t, cfg.d_far)?;
    // Validate the exact window, then take one neighbor sample on each side
    // (when recorded) so the end positions are interpolated, not clamped.
    extract_tactile_window(stream, t1, t2)?;
    let dt = 1.0 / stream.fs;
    let mut raw = extract_tactile_window(
        stream,
        (t1 - dt).max(stream.t0),
        (t2 + dt).min(stream.t_end()),
    )?;
    raw.channels = cfg
        .channel_select
        .iter()
        .map(|&c| {
            raw.channels.get(c).cloned().ok_or_else(|| {
                AlignmentError::InvalidConfig(format!(
                    "channel {c} selected but stream has {}",
                    stream.channels.len()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let signal = resample_spatially(&raw, track, t1, t2, cfg.resample_len)?;
    Ok(AlignedPair {
        frame: frame.clone(),
        signal,
        t0: frame.t,
        t1,
        t2,
        s0: track.position_at(frame.t)?,
        mean_speed: (cfg.d_far - cfg.d_near) / (t2 - t1),
        road_class: None,
        light: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkipRecord {
    pub frame_id: u64,
    pub t: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchAlignment {
    pub pairs: Vec<AlignedPair>,
    pub skipped: Vec<SkipRecord>,
}

/// Aligns every frame; frames whose window cannot be built are recorded as
/// skips instead of failing the batch.
pub fn align_batch(
    frames: &[VisualFrame],
    track: &RtkTrack,
    stream: &TactileStream,
    cfg: &AlignmentConfig,
) -> Result<BatchAlignment> {
    cfg.validate()?;
    let mut out = BatchAlignment::default();
    for frame in frames {
        match align_pair(frame, track, stream, cfg) {
            Ok(pair) => out.pairs.push(pair),
            Err(
                e @ (AlignmentError::InsufficientTrack { .. }
                | AlignmentError::WindowOutOfRange { .. }
                | AlignmentError::TimeOutsideTrack { .. }
                | AlignmentError::DegenerateSegment { .. }),
            ) => {
                log::warn!("skipping frame {} at t={:.3}: {e}", frame.frame_id, frame.t);
                out.skipped.push(SkipRecord {
                    frame_id: frame.frame_id,
                    t: frame.t,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
