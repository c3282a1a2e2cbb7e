//! Synthetic event streams with known structure.
//!
//! A bar with straight edges translates across the sensor at constant
//! velocity. Each edge fires events at the pixels it crosses, stamped with
//! the crossing time of the pixel center, so that inlier events satisfy
//! `t = (u . p - d0) / speed` exactly (up to timestamp jitter) and lie on a
//! plane in `(x, y, t)`. Uniform background-activity noise is mixed in.
//! Every event carries an out-of-band inlier/noise label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::event::{Event, EventStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolarityRule {
    /// One edge; every inlier event is positive.
    SingleEdge,
    /// Leading edge positive, trailing edge `width_px` behind it negative.
    Bar { width_px: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub duration_s: f64,
    /// Edge velocity in pixels per second.
    pub velocity: (f64, f64),
    /// Inlier events per second.
    pub inlier_rate: f64,
    /// Noise events per second.
    pub noise_rate: f64,
    pub polarity: PolarityRule,
    /// Standard deviation of Gaussian timestamp jitter on inlier events.
    pub time_jitter_us: f64,
    pub class_id: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 128,
            height: 128,
            duration_s: 0.5,
            velocity: (80.0, 0.0),
            inlier_rate: 10_000.0,
            noise_rate: 1_000.0,
            polarity: PolarityRule::Bar { width_px: 10.0 },
            time_jitter_us: 50.0,
            class_id: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventLabel {
    Inlier,
    Noise,
}

/// A generated stream with per-event labels aligned to `stream.events()`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStream {
    pub stream: EventStream,
    pub labels: Vec<EventLabel>,
}

impl SynthStream {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == EventLabel::Noise).count()
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map_or(0, |p| p.sample(rng) as usize)
}

/// Generates a moving-edge stream with labeled background noise.
pub fn gen_planar_stream<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> SynthStream {
    let (w, h) = (cfg.width.max(1), cfg.height.max(1));
    let dur_us = (cfg.duration_s.max(1e-6) * 1e6).round().max(1.0);
    let (vx, vy) = cfg.velocity;
    let speed = vx.hypot(vy);
    let (ux, uy) = if speed > 0.0 { (vx / speed, vy / speed) } else { (1.0, 0.0) };
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    // Edge offset along u at mid-duration passes the sensor center.
    let d_mid = ux * cx + uy * cy;
    let half_len = f64::from(w).hypot(f64::from(h)) / 2.0;
    let jitter = Normal::new(0.0, cfg.time_jitter_us.max(0.0)).expect("non-negative std");

    let edges: Vec<(f64, u8)> = match cfg.polarity {
        PolarityRule::SingleEdge => vec![(0.0, 1)],
        PolarityRule::Bar { width_px } => vec![(0.0, 1), (width_px, 0)],
    };

    let mut tagged: Vec<(Event, EventLabel)> = Vec::new();
    let n_inlier = poisson(cfg.inlier_rate * cfg.duration_s, rng);
    let mut produced = 0;
    let mut tries = 0usize;
    while produced < n_inlier && tries < 1000 * (n_inlier + 1) {
        tries += 1;
        let (offset, p) = edges[rng.random_range(0..edges.len())];
        let t_s = rng.random::<f64>() * dur_us / 1e6;
        let d = d_mid + speed * (t_s - cfg.duration_s / 2.0) - offset;
        let lambda = rng.random_range(-half_len..half_len);
        // Point on the edge line: u . p = d.
        let along = d - (ux * cx + uy * cy);
        let px = cx + ux * along - uy * lambda + rng.random_range(-0.5..0.5);
        let py = cy + uy * along + ux * lambda + rng.random_range(-0.5..0.5);
        let (xi, yi) = (px.round(), py.round());
        if xi < 0.0 || yi < 0.0 || xi >= f64::from(w) || yi >= f64::from(h) {
            continue;
        }
        let t_us = if speed > 0.0 {
            let crossing = (ux * xi + uy * yi - (d_mid - offset)) / speed + cfg.duration_s / 2.0;
            crossing * 1e6 + jitter.sample(rng)
        } else {
            t_s * 1e6
        };
        let t_us = t_us.round();
        if !(0.0..dur_us).contains(&t_us) {
            continue;
        }
        tagged.push((Event::new(xi as u16, yi as u16, t_us as u64, p), EventLabel::Inlier));
        produced += 1;
    }

    let n_noise = poisson(cfg.noise_rate * cfg.duration_s, rng);
    for _ in 0..n_noise {
        let e = Event::new(
            rng.random_range(0..w) as u16,
            rng.random_range(0..h) as u16,
            rng.random_range(0..dur_us as u64),
            rng.random_range(0..2u8),
        );
        tagged.push((e, EventLabel::Noise));
    }

    tagged.sort_by_key(|(e, _)| e.t);
    let (events, labels): (Vec<Event>, Vec<EventLabel>) = tagged.into_iter().unzip();
    let stream = EventStream::new(events, w, h).expect("generated events are in bounds");
    SynthStream { stream, labels }
}

/// One labeled sample of the motion-direction task.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStream {
    pub id: usize,
    pub class_id: usize,
    pub data: SynthStream,
}

/// Unit direction of class `class_id` out of `n_classes` evenly spaced angles.
pub fn class_direction(class_id: usize, n_classes: usize) -> (f64, f64) {
    let a = std::f64::consts::TAU * class_id as f64 / n_classes as f64;
    (a.cos(), a.sin())
}

/// Seed of sample `index` in a set generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A single sample of class `class_id`: speed varies by +-20% around the
/// base speed and the bar is shifted up to 10 px along its direction.
pub fn gen_class_sample(base: &SynthConfig, class_id: usize, n_classes: usize, seed: u64) -> SynthStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dy) = class_direction(class_id, n_classes);
    let speed = base.velocity.0.hypot(base.velocity.1) * rng.random_range(0.8..1.2);
    let cfg = SynthConfig {
        velocity: (dx * speed, dy * speed),
        class_id,
        seed,
        ..base.clone()
    };
    // Shifting the time origin moves the bar along its direction of travel.
    let shift_s = rng.random_range(-10.0..10.0) / speed.max(1e-9);
    let mut s = gen_planar_stream(&cfg, &mut rng);
    if shift_s != 0.0 && speed > 0.0 {
        s = retime(s, shift_s, cfg.duration_s);
    }
    s
}

/// Shifts inlier timestamps by `shift_s`, wrapping into `[0, duration)`
/// would break planarity, so events leaving the interval are dropped.
fn retime(s: SynthStream, shift_s: f64, duration_s: f64) -> SynthStream {
    let (w, h) = (s.stream.width(), s.stream.height());
    let dur_us = (duration_s * 1e6).round() as i64;
    let shift_us = (shift_s * 1e6).round() as i64;
    let mut tagged: Vec<(Event, EventLabel)> = s
        .stream
        .into_events()
        .into_iter()
        .zip(s.labels)
        .filter_map(|(mut e, l)| {
            if l == EventLabel::Inlier {
                let t = e.t as i64 + shift_us;
                if !(0..dur_us).contains(&t) {
                    return None;
                }
                e.t = t as u64;
            }
            Some((e, l))
        })
        .collect();
    tagged.sort_by_key(|(e, _)| e.t);
    let (events, labels): (Vec<Event>, Vec<EventLabel>) = tagged.into_iter().unzip();
    SynthStream {
        stream: EventStream::new(events, w, h).expect("events stay in bounds"),
        labels,
    }
}

/// Balanced set: sample `i` belongs to class `i % n_classes`.
pub fn gen_classification_set(n_samples: usize, n_classes: usize, base: &SynthConfig, seed: u64) -> Vec<LabeledStream> {
    assert!((2..=8).contains(&n_classes), "n_classes must be in 2..=8");
    (0..n_samples)
        .map(|i| {
            let class_id = i % n_classes;
            LabeledStream {
                id: i,
                class_id,
                data: gen_class_sample(base, class_id, n_classes, sample_seed(seed, i)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let cfg = SynthConfig::default();
        let s = gen_planar_stream(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let n = s.stream.len() as f64;
        // 5500 expected; 5 standard deviations of the Poisson total.
        assert!((n - 5500.0).abs() < 5.0 * 5500f64.sqrt(), "{n}");
        assert_eq!(s.labels.len(), s.stream.len());
        let noise = s.noise_count() as f64;
        assert!((noise - 500.0).abs() < 5.0 * 500f64.sqrt());
    }

    #[test]
    fn inliers_lie_on_the_edge_planes() {
        let cfg = SynthConfig {
            noise_rate: 0.0,
            time_jitter_us: 0.0,
            velocity: (60.0, 30.0),
            ..Default::default()
        };
        let s = gen_planar_stream(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let speed = 60f64.hypot(30.0);
        let (ux, uy) = (60.0 / speed, 30.0 / speed);
        for e in s.stream.events() {
            let offset = if e.p == 1 { 0.0 } else { 10.0 };
            let d0 = ux * 63.5 + uy * 63.5 - offset;
            let t = (ux * f64::from(e.x) + uy * f64::from(e.y) - d0) / speed + 0.25;
            assert!((t * 1e6 - e.t as f64).abs() <= 0.5 + 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        let a = gen_planar_stream(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = gen_planar_stream(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn balanced_classes() {
        let base = SynthConfig {
            inlier_rate: 400.0,
            noise_rate: 40.0,
            ..Default::default()
        };
        let set = gen_classification_set(30, 3, &base, 7);
        for c in 0..3 {
            assert_eq!(set.iter().filter(|s| s.class_id == c).count(), 10);
        }
        let again = gen_class_sample(&base, set[4].class_id, 3, sample_seed(7, 4));
        assert_eq!(again, set[4].data);
    }

    #[test]
    fn class_directions_are_spread() {
        for n in 2..=8 {
            for i in 0..n {
                for j in i + 1..n {
                    let (a, b) = (class_direction(i, n), class_direction(j, n));
                    let ang = (a.0 * b.0 + a.1 * b.1).clamp(-1.0, 1.0).acos();
                    assert!(ang >= std::f64::consts::TAU / n as f64 - 1e-9 || n == 2 && ang >= std::f64::consts::PI - 1e-9);
                }
            }
        }
    }
}
