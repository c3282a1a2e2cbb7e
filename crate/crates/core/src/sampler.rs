//! Sliding-window slicing, coordinate normalization and fixed-size
//! resampling of event streams.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Event, EventStream};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("event stream is empty")]
    EmptyStream,
    #[error("point set is empty")]
    EmptyInput,
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("malformed point file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub window_s: f64,
    pub step_s: f64,
    pub n_points: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            window_s: 0.5,
            step_s: 0.25,
            n_points: 1024,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.window_s > 0.0) || !self.window_s.is_finite() {
            return Err(SampleError::InvalidConfig(format!(
                "window_s must be > 0, got {}",
                self.window_s
            )));
        }
        if !(self.step_s > 0.0 && self.step_s <= self.window_s) {
            return Err(SampleError::InvalidConfig(format!(
                "step_s must be in (0, window_s], got {}",
                self.step_s
            )));
        }
        if self.n_points == 0 {
            return Err(SampleError::InvalidConfig("n_points must be >= 1".into()));
        }
        Ok(())
    }

    fn window_us(&self) -> u64 {
        ((self.window_s * 1e6).round() as u64).max(1)
    }

    fn step_us(&self) -> u64 {
        ((self.step_s * 1e6).round() as u64).max(1)
    }
}

/// A contiguous time slice of a stream. `first_index` is the position of
/// `events[0]` in the source stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub first_index: usize,
    pub t_start: u64,
    pub t_end: u64,
}

/// Events as normalized `(x, y, t)` points in `[0, 1]^3`.
///
/// `event_indices[i]` is the index of the event in the source stream that
/// produced row `i`; it lets callers carry out-of-band labels through
/// windowing and resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f64; 3]>,
    pub polarities: Vec<u8>,
    pub event_indices: Vec<usize>,
    pub source_window: (u64, u64),
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rows `idx` of this set, in the given order.
    pub fn select(&self, idx: &[usize]) -> PointSet {
        PointSet {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            polarities: idx.iter().map(|&i| self.polarities[i]).collect(),
            event_indices: idx.iter().map(|&i| self.event_indices[i]).collect(),
            source_window: self.source_window,
        }
    }

    /// Writes the `x,y,t,p` CSV form. Floats use the shortest round-trip
    /// representation so reading the file back is lossless.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,y,t,p")?;
        for (pt, p) in self.points.iter().zip(&self.polarities) {
            writeln!(out, "{},{},{},{}", pt[0], pt[1], pt[2], p)?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`PointSet::write_csv`]. Event indices are
    /// set to row numbers and the source window is unknown (`(0, 0)`).
    pub fn read_csv(text: &str) -> Result<PointSet, SampleError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "x,y,t,p" => {}
            _ => {
                return Err(SampleError::Malformed {
                    line: 1,
                    reason: "expected header `x,y,t,p`".into(),
                })
            }
        }
        let mut ps = PointSet {
            points: Vec::new(),
            polarities: Vec::new(),
            event_indices: Vec::new(),
            source_window: (0, 0),
        };
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| SampleError::Malformed { line: i + 1, reason };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let mut xyz = [0.0; 3];
            for (v, s) in xyz.iter_mut().zip(&f[..3]) {
                *v = s.trim().parse().map_err(|_| bad(format!("bad number `{s}`")))?;
                if !(0.0..=1.0).contains(v) {
                    return Err(bad(format!("coordinate {v} outside [0, 1]")));
                }
            }
            let p: u8 = f[3].trim().parse().map_err(|_| bad(format!("bad polarity `{}`", f[3])))?;
            if p > 1 {
                return Err(bad(format!("polarity {p} not in {{0, 1}}")));
            }
            ps.event_indices.push(ps.points.len());
            ps.points.push(xyz);
            ps.polarities.push(p);
        }
        Ok(ps)
    }
}

/// Slices a stream into fixed-duration windows.
///
/// Windows start at `t0 + i * step` while `start + window <= t_last` and hold
/// events with `start <= t < start + window`. A stream shorter than one
/// window yields a single window containing every event.
pub fn slide_windows(s: &EventStream, cfg: &SamplerConfig) -> Result<Vec<EventWindow>, SampleError> {
    cfg.validate()?;
    let events = s.events();
    let (first, last) = match (events.first(), events.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Err(SampleError::EmptyStream),
    };
    let window = cfg.window_us();
    let step = cfg.step_us();

    if last - first < window {
        return Ok(vec![EventWindow {
            events: events.to_vec(),
            first_index: 0,
            t_start: first,
            t_end: first + window,
        }]);
    }

    let mut out = Vec::new();
    let mut start = first;
    while start + window <= last {
        let end = start + window;
        let lo = events.partition_point(|e| e.t < start);
        let hi = events.partition_point(|e| e.t < end);
        out.push(EventWindow {
            events: events[lo..hi].to_vec(),
            first_index: lo,
            t_start: start,
            t_end: end,
        });
        start += step;
    }
    Ok(out)
}

/// Maps a window to normalized coordinates: `t` by the window's own first and
/// last timestamps, `x` and `y` by the sensor resolution.
pub fn normalize_window(w: &EventWindow, width: u32, height: u32) -> Result<PointSet, SampleError> {
    let t0 = w.events.iter().map(|e| e.t).min().ok_or(SampleError::EmptyInput)?;
    let tmax = w.events.iter().map(|e| e.t).max().unwrap_or(t0);
    let span = (tmax - t0) as f64;
    let sx = if width > 1 { (width - 1) as f64 } else { 1.0 };
    let sy = if height > 1 { (height - 1) as f64 } else { 1.0 };

    let points = w
        .events
        .iter()
        .map(|e| {
            let t = if span > 0.0 { (e.t - t0) as f64 / span } else { 0.0 };
            [f64::from(e.x) / sx, f64::from(e.y) / sy, t]
        })
        .collect();
    Ok(PointSet {
        points,
        polarities: w.events.iter().map(|e| e.p).collect(),
        event_indices: (w.first_index..w.first_index + w.events.len()).collect(),
        source_window: (w.t_start, w.t_end),
    })
}

/// Row indices implementing the resampling rule of [`resample_to_n`].
pub fn resample_indices<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Vec<usize>, SampleError> {
    if len == 0 {
        return Err(SampleError::EmptyInput);
    }
    if len >= n {
        Ok(index::sample(rng, len, n).into_vec())
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((0..n - len).map(|_| rng.random_range(0..len)));
        Ok(idx)
    }
}

/// Draws exactly `n` rows: without replacement when the set is large
/// enough, otherwise every row once plus uniform duplicates.
pub fn resample_to_n<R: Rng + ?Sized>(ps: &PointSet, n: usize, rng: &mut R) -> Result<PointSet, SampleError> {
    let idx = resample_indices(ps.len(), n, rng)?;
    Ok(ps.select(&idx))
}

/// RNG for window `index`, independent of processing order.
pub fn window_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Full sampler: windows, normalization and resampling. Empty windows
/// (possible inside gaps of a sparse recording) are skipped.
pub fn sample_stream(s: &EventStream, cfg: &SamplerConfig) -> Result<Vec<PointSet>, SampleError> {
    let windows = slide_windows(s, cfg)?;
    windows
        .par_iter()
        .enumerate()
        .filter(|(_, w)| !w.events.is_empty())
        .map(|(i, w)| {
            let ps = normalize_window(w, s.width(), s.height())?;
            resample_to_n(&ps, cfg.n_points, &mut window_rng(cfg.seed, i))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream_with_times(ts: &[u64]) -> EventStream {
        let ev = ts.iter().map(|&t| Event::new(0, 0, t, 1)).collect();
        EventStream::new(ev, 16, 16).unwrap()
    }

    #[test]
    fn three_windows_over_one_second() {
        let ts: Vec<u64> = (0..=100).map(|i| i * 10_000).collect();
        let w = slide_windows(&stream_with_times(&ts), &SamplerConfig::default()).unwrap();
        let starts: Vec<u64> = w.iter().map(|w| w.t_start).collect();
        assert_eq!(starts, vec![0, 250_000, 500_000]);
        for win in &w {
            assert!(win.events.iter().all(|e| e.t >= win.t_start && e.t < win.t_end));
        }
        assert_eq!(w[0].events.len(), 50);
    }

    #[test]
    fn short_stream_single_window() {
        let w = slide_windows(&stream_with_times(&[0, 100_000, 300_000]), &SamplerConfig::default()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].events.len(), 3);
    }

    #[test]
    fn exact_window_span_single_window() {
        let w = slide_windows(&stream_with_times(&[0, 250_000, 500_000]), &SamplerConfig::default()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].t_start, 0);
    }

    #[test]
    fn empty_stream_errors() {
        assert_eq!(
            slide_windows(&EventStream::empty(4, 4), &SamplerConfig::default()),
            Err(SampleError::EmptyStream)
        );
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = SamplerConfig {
            step_s: 0.6,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SamplerConfig {
            n_points: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn window(events: Vec<Event>) -> EventWindow {
        EventWindow {
            events,
            first_index: 0,
            t_start: 0,
            t_end: 1,
        }
    }

    #[test]
    fn normalize_time_and_space() {
        let w = window(vec![
            Event::new(0, 0, 100, 1),
            Event::new(7, 3, 150, 0),
            Event::new(15, 15, 200, 1),
        ]);
        let ps = normalize_window(&w, 16, 16).unwrap();
        let t: Vec<f64> = ps.points.iter().map(|p| p[2]).collect();
        assert_eq!(t, vec![0.0, 0.5, 1.0]);
        assert_eq!(ps.points[0][0], 0.0);
        assert_eq!(ps.points[2][0], 1.0);
        assert_eq!(ps.polarities, vec![1, 0, 1]);
    }

    #[test]
    fn normalize_single_event() {
        let ps = normalize_window(&window(vec![Event::new(3, 3, 77, 0)]), 16, 16).unwrap();
        assert_eq!(ps.points[0][2], 0.0);
    }

    fn dummy(n: usize) -> PointSet {
        PointSet {
            points: (0..n).map(|i| [i as f64 / n as f64, 0.0, 0.0]).collect(),
            polarities: vec![1; n],
            event_indices: (0..n).collect(),
            source_window: (0, 1),
        }
    }

    #[test]
    fn downsample_distinct() {
        let out = resample_to_n(&dummy(2048), 1024, &mut window_rng(1, 0)).unwrap();
        assert_eq!(out.len(), 1024);
        let mut idx = out.event_indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 1024);
    }

    #[test]
    fn upsample_keeps_everything() {
        let out = resample_to_n(&dummy(700), 1024, &mut window_rng(1, 0)).unwrap();
        assert_eq!(out.len(), 1024);
        let mut seen = vec![0usize; 700];
        for &i in &out.event_indices {
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c >= 1));
        assert_eq!(seen.iter().map(|c| c - 1).sum::<usize>(), 324);
    }

    #[test]
    fn resample_is_seeded() {
        let a = resample_to_n(&dummy(900), 64, &mut window_rng(5, 2)).unwrap();
        let b = resample_to_n(&dummy(900), 64, &mut window_rng(5, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(resample_to_n(&dummy(0), 4, &mut window_rng(5, 2)), Err(SampleError::EmptyInput));
    }

    #[test]
    fn csv_round_trip() {
        let mut ps = dummy(10);
        ps.points[3] = [0.1, 0.2, 1.0 / 3.0];
        let mut buf = Vec::new();
        ps.write_csv(&mut buf).unwrap();
        let back = PointSet::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.points, ps.points);
        assert_eq!(back.polarities, ps.polarities);
    }
}
