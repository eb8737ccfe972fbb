//! Synthetic per-frame feature videos with two boundary families.
//!
//! * `step`: the feature level jumps at the boundary while segments drift
//!   slowly, so raw values alone reveal it.
//! * `smooth`: every channel follows a piecewise cubic whose values and
//!   first differences continue across the boundary; only the second
//!   difference jumps.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalproto::{frame_to_seconds, AnnotationSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Step,
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyMix {
    Step,
    Smooth,
    /// Each boundary draws its family independently.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames: usize,
    pub channels: usize,
    pub families: FamilyMix,
    pub boundaries_per_video: usize,
    pub noise_std: f64,
    /// Minimum spacing between boundaries, normally the window length.
    pub min_gap: usize,
    /// Minimum distance from either sequence end, normally `k`.
    pub edge_margin: usize,
    pub fps: f64,
    /// Raters besides the exact one, each jittered by N(0, 1) frames.
    pub jittered_raters: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_videos: 200,
            frames: 100,
            channels: 32,
            families: FamilyMix::Mixed,
            boundaries_per_video: 3,
            noise_std: 0.02,
            min_gap: 17,
            edge_margin: 8,
            fps: 10.0,
            jittered_raters: 2,
            seed: 0,
            id_prefix: "video".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 {
            return Err(Error::Spec("frames and channels must be >= 1".into()));
        }
        if !(self.fps > 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Spec("fps must be > 0 and noise_std >= 0".into()));
        }
        if self.boundaries_per_video > 0 && self.slack().is_none() {
            return Err(Error::Spec(format!(
                "{} boundaries with spacing {} and margin {} do not fit in {} frames",
                self.boundaries_per_video, self.min_gap, self.edge_margin, self.frames
            )));
        }
        Ok(())
    }

    /// Free frames left after placing boundaries at the minimum spacing.
    fn slack(&self) -> Option<usize> {
        let span = self.frames.checked_sub(1 + 2 * self.edge_margin)?;
        span.checked_sub((self.boundaries_per_video.saturating_sub(1)) * self.min_gap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub features: Tensor,
    pub boundaries: Vec<usize>,
    pub families: Vec<Family>,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub videos: Vec<SyntheticVideo>,
    pub annotations: BTreeMap<String, AnnotationSet>,
}

fn place_boundaries(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.boundaries_per_video;
    let slack = spec.slack().unwrap_or(0);
    let mut u: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=slack)).collect();
    u.sort_unstable();
    u.iter()
        .enumerate()
        .map(|(i, &v)| spec.edge_margin + v + i * spec.min_gap)
        .collect()
}

/// Second-difference schedule: regime `d + 6e·(t - start)` per channel,
/// switching one frame after each smooth boundary.
fn smooth_trajectory(t_len: usize, c: usize, switches: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = vec![0.0; t_len * c];
    let any = !switches.is_empty();
    for ch in 0..c {
        let mut sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let draw = |rng: &mut ChaCha8Rng, sign: f64| {
            if any {
                (sign * rng.gen_range(0.02..0.04), rng.gen_range(-5e-5..5e-5))
            } else {
                (sign * rng.gen_range(0.0..2e-4), rng.gen_range(-5e-7..5e-7))
            }
        };
        let (mut d, mut e) = draw(rng, sign);
        let mut start = 0usize;
        let mut next = 0usize;
        let mut v = rng.gen_range(-0.1..0.1);
        let mut pos = 0.0;
        for t in 0..t_len {
            if next < switches.len() && t == switches[next] + 1 {
                sign = -sign;
                (d, e) = draw(rng, sign);
                start = t;
                next += 1;
            }
            if t > 0 {
                v += d + 6.0 * e * (t - start) as f64;
                pos += v;
            }
            x[t * c + ch] = pos;
        }
        // drop the best-fit line: second differences are unchanged
        let n = t_len as f64;
        let tm = (n - 1.0) / 2.0;
        let xm = (0..t_len).map(|t| x[t * c + ch]).sum::<f64>() / n;
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..t_len {
            num += (t as f64 - tm) * (x[t * c + ch] - xm);
            den += (t as f64 - tm).powi(2);
        }
        let slope = if den > 0.0 { num / den } else { 0.0 };
        for t in 0..t_len {
            x[t * c + ch] -= xm + slope * (t as f64 - tm);
        }
    }
    x
}

/// Piecewise-constant levels that jump at each step boundary, plus a slow
/// sinusoidal drift when there is at least one step.
fn step_levels(t_len: usize, c: usize, steps: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let level = Normal::new(0.0, 0.5).expect("valid normal");
    let draw_level = |rng: &mut ChaCha8Rng, prev: Option<&[f64]>| loop {
        let l: Vec<f64> = (0..c).map(|_| level.sample(rng)).collect();
        match prev {
            Some(p) => {
                let jump = l.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if jump >= 0.3 * (c as f64).sqrt() {
                    return l;
                }
            }
            None => return l,
        }
    };
    let mut current = draw_level(rng, None);
    let phase: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let drift = if steps.is_empty() { 0.0 } else { 0.05 };
    let mut x = vec![0.0; t_len * c];
    let mut next = 0;
    for t in 0..t_len {
        if next < steps.len() && t == steps[next] {
            current = draw_level(rng, Some(&current));
            next += 1;
        }
        for ch in 0..c {
            x[t * c + ch] = current[ch] + drift * (0.05 * t as f64 + phase[ch]).sin();
        }
    }
    x
}

pub fn generate_video(spec: &SyntheticSpec, video_id: String, rng: &mut ChaCha8Rng) -> SyntheticVideo {
    let (t_len, c) = (spec.frames, spec.channels);
    let boundaries = place_boundaries(spec, rng);
    let families: Vec<Family> = boundaries
        .iter()
        .map(|_| match spec.families {
            FamilyMix::Step => Family::Step,
            FamilyMix::Smooth => Family::Smooth,
            FamilyMix::Mixed => {
                if rng.gen_bool(0.5) {
                    Family::Step
                } else {
                    Family::Smooth
                }
            }
        })
        .collect();
    let pick = |f: Family| -> Vec<usize> {
        boundaries
            .iter()
            .zip(&families)
            .filter(|(_, &g)| g == f)
            .map(|(&b, _)| b)
            .collect()
    };
    let smooth = smooth_trajectory(t_len, c, &pick(Family::Smooth), rng);
    let steps = step_levels(t_len, c, &pick(Family::Step), rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let data: Vec<f64> = smooth
        .iter()
        .zip(&steps)
        .map(|(a, b)| {
            let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            a + b + n
        })
        .collect();
    SyntheticVideo {
        video_id,
        features: Tensor::from_vec(&[t_len, c], data).expect("shape matches"),
        boundaries,
        families,
        fps: spec.fps,
    }
}

fn annotate(video: &SyntheticVideo, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> AnnotationSet {
    let t_len = spec.frames;
    let to_secs = |frames: &[usize]| frames.iter().map(|&t| frame_to_seconds(t, spec.fps)).collect::<Vec<_>>();
    let mut raters = vec![to_secs(&video.boundaries)];
    let jitter = Normal::new(0.0, 1.0).expect("valid normal");
    for _ in 0..spec.jittered_raters {
        let mut frames: Vec<usize> = video
            .boundaries
            .iter()
            .map(|&b| (b as f64 + jitter.sample(rng)).round().clamp(0.0, (t_len - 1) as f64) as usize)
            .collect();
        frames.sort_unstable();
        raters.push(to_secs(&frames));
    }
    AnnotationSet {
        video_id: video.video_id.clone(),
        duration: t_len as f64 / spec.fps,
        fps: spec.fps,
        raters,
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut videos = Vec::with_capacity(spec.n_videos);
    let mut annotations = BTreeMap::new();
    for i in 0..spec.n_videos {
        let v = generate_video(spec, format!("{}_{:04}", spec.id_prefix, i), &mut rng);
        annotations.insert(v.video_id.clone(), annotate(&v, spec, &mut rng));
        videos.push(v);
    }
    Ok(SyntheticDataset { videos, annotations })
}
