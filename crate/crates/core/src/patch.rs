//! Patch generation: choosing patch centers and grouping their k nearest
//! neighbors.
//!
//! The default center selector is the plane-fit inlier model: a candidate
//! center is accepted only when the events in its neighborhood lie close to
//! a local plane `dt = a*dx + b*dy + c`, which holds for an edge moving
//! linearly over a short time span and fails for background noise.
//! Farthest point sampling and uniform random selection are provided as
//! baselines.
//!
//! Neighborhoods are stored in patch-local coordinates `delta = center -
//! point`. Positive and negative events are handled as separate subsets,
//! each receiving a share of the patch budget proportional to its size.

use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{window_rng, PointSet};

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("k = {k} exceeds the {n} available points")]
    KTooLarge { k: usize, n: usize },
    #[error("m = {m} exceeds the {n} available points")]
    MTooLarge { m: usize, n: usize },
    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("neighborhood does not span a plane")]
    DegenerateNeighborhood,
    #[error("invalid patch config: {0}")]
    InvalidConfig(String),
    #[error("malformed patch file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterMethod {
    Inlier,
    Fps,
    Random,
}

impl std::str::FromStr for CenterMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inlier" => Ok(CenterMethod::Inlier),
            "fps" => Ok(CenterMethod::Fps),
            "random" => Ok(CenterMethod::Random),
            other => Err(format!("unknown method `{other}` (expected inlier|fps|random)")),
        }
    }
}

impl std::fmt::Display for CenterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CenterMethod::Inlier => "inlier",
            CenterMethod::Fps => "fps",
            CenterMethod::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub m: usize,
    pub k: usize,
    /// Residual threshold in normalized time units.
    #[serde(rename = "H")]
    pub threshold: f64,
    /// Candidate budget; `None` means `10 * m`.
    pub max_attempts: Option<usize>,
    pub method: CenterMethod,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            m: 64,
            k: 32,
            threshold: 0.85e-3,
            max_attempts: None,
            method: CenterMethod::Inlier,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<(), PatchError> {
        if self.m == 0 || self.k == 0 {
            return Err(PatchError::InvalidConfig("m and k must be >= 1".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(PatchError::InvalidConfig(format!(
                "H must be > 0, got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn attempts(&self) -> usize {
        self.max_attempts.unwrap_or(10 * self.m)
    }
}

/// Least-squares plane `dt = a*dx + b*dy + c` and its mean absolute residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub residual_mean_abs: f64,
}

impl PlaneFit {
    pub fn predict(&self, dx: f64, dy: f64) -> f64 {
        self.a * dx + self.b * dy + self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: [f64; 3],
    /// Row of the center in the source point set.
    pub center_index: usize,
    /// Rows of the neighbors in the source point set, center first.
    pub neighbor_indices: Vec<usize>,
    /// Neighbor coordinates in the normalized frame of the point set.
    pub points: Vec<[f64; 3]>,
    /// `center - point` for each neighbor.
    pub local: Vec<[f64; 3]>,
    pub polarity: u8,
    /// Mean absolute plane residual; infinite when the neighborhood is degenerate.
    pub residual: f64,
    /// Set when the center was taken by the fallback fill rather than accepted.
    pub fallback: bool,
}

impl Patch {
    pub fn global_points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.points.iter().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub k: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn fallback_count(&self) -> usize {
        self.patches.iter().filter(|p| p.fallback).count()
    }

    pub fn used_fallback(&self) -> bool {
        self.fallback_count() > 0
    }

    /// Columns: `patch_id,is_center,x,y,t,p,residual`. Each patch is written
    /// as its center row followed by its k neighbor rows, all in the
    /// normalized global frame.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "patch_id,is_center,x,y,t,p,residual")?;
        for (id, patch) in self.patches.iter().enumerate() {
            let c = patch.center;
            writeln!(
                out,
                "{id},1,{},{},{},{},{}",
                c[0], c[1], c[2], patch.polarity, patch.residual
            )?;
            for g in patch.global_points() {
                writeln!(
                    out,
                    "{id},0,{},{},{},{},{}",
                    g[0], g[1], g[2], patch.polarity, patch.residual
                )?;
            }
        }
        Ok(())
    }

    /// Reads the format written by [`PatchSet::write_csv`]. Source indices and
    /// fallback flags are not stored in the file and come back as defaults.
    pub fn read_csv(text: &str) -> Result<PatchSet, PatchError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "patch_id,is_center,x,y,t,p,residual" => {}
            _ => {
                return Err(PatchError::Malformed {
                    line: 1,
                    reason: "missing patch header".into(),
                })
            }
        }
        let mut patches: Vec<Patch> = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| PatchError::Malformed { line: i + 1, reason };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", f.len())));
            }
            let id: usize = f[0].parse().map_err(|_| bad("bad patch_id".into()))?;
            let is_center = match f[1] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("bad is_center `{other}`"))),
            };
            let mut xyz = [0.0; 3];
            for (v, s) in xyz.iter_mut().zip(&f[2..5]) {
                *v = s.parse().map_err(|_| bad(format!("bad number `{s}`")))?;
            }
            let p: u8 = f[5].parse().map_err(|_| bad("bad polarity".into()))?;
            let residual: f64 = f[6].parse().map_err(|_| bad("bad residual".into()))?;
            if is_center {
                if id != patches.len() {
                    return Err(bad(format!("patch ids must be consecutive, got {id}")));
                }
                patches.push(Patch {
                    center: xyz,
                    center_index: 0,
                    neighbor_indices: Vec::new(),
                    points: Vec::new(),
                    local: Vec::new(),
                    polarity: p,
                    residual,
                    fallback: false,
                });
            } else {
                let n = patches.len();
                let patch = match patches.last_mut() {
                    Some(pt) if id + 1 == n => pt,
                    _ => return Err(bad(format!("neighbor row for unknown patch {id}"))),
                };
                let c = patch.center;
                patch.points.push(xyz);
                patch.local.push([c[0] - xyz[0], c[1] - xyz[1], c[2] - xyz[2]]);
            }
        }
        let k = patches.first().map_or(0, |p| p.local.len());
        if patches.iter().any(|p| p.local.len() != k || k == 0) {
            return Err(PatchError::Malformed {
                line: 0,
                reason: "patches have unequal or zero neighbor counts".into(),
            });
        }
        for p in &mut patches {
            p.neighbor_indices = vec![0; k];
        }
        Ok(PatchSet { patches, k })
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dt = a[2] - b[2];
    dx * dx + dy * dy + dt * dt
}

/// The `k` points nearest to `points[center]` by Euclidean distance.
///
/// The center is always first; the rest follow in order of increasing
/// distance, ties going to the lower index.
pub fn knn_group(points: &[[f64; 3]], center: usize, k: usize) -> Result<Vec<usize>, PatchError> {
    let n = points.len();
    if k > n {
        return Err(PatchError::KTooLarge { k, n });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let c = points[center];
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != center)
        .map(|(i, p)| (dist2(p, &c), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let rest = k - 1;
    if rest > 0 && rest < cand.len() {
        cand.select_nth_unstable_by(rest - 1, cmp);
        cand.truncate(rest);
    }
    cand.truncate(rest);
    cand.sort_unstable_by(cmp);
    let mut out = Vec::with_capacity(k);
    out.push(center);
    out.extend(cand.into_iter().map(|(_, i)| i));
    Ok(out)
}

/// Least-squares plane through patch-local points via the 3x3 normal
/// equations `(A^T A) D = A^T B` with `A = [dx, dy, 1]`, `B = dt`.
pub fn fit_plane(local: &[[f64; 3]]) -> Result<PlaneFit, PatchError> {
    let n = local.len();
    if n < 3 {
        return Err(PatchError::DegenerateNeighborhood);
    }
    let nf = n as f64;

    // Rank test on the centered (dx, dy) scatter: A has rank 3 iff the
    // projected points are not collinear.
    let (mx, my) = local
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    let (mx, my) = (mx / nf, my / nf);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for p in local {
        let (u, v) = (p[0] - mx, p[1] - my);
        cxx += u * u;
        cyy += v * v;
        cxy += u * v;
    }
    let trace = cxx + cyy;
    if !(trace > 0.0) || cxx * cyy - cxy * cxy <= 1e-12 * trace * trace {
        return Err(PatchError::DegenerateNeighborhood);
    }

    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for p in local {
        let row = [p[0], p[1], 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * p[2];
        }
    }
    let [a, b, c] = solve3(ata, atb).ok_or(PatchError::DegenerateNeighborhood)?;
    if !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(PatchError::DegenerateNeighborhood);
    }
    let mut fit = PlaneFit {
        a,
        b,
        c,
        residual_mean_abs: 0.0,
    };
    fit.residual_mean_abs = patch_error(&fit, local);
    Ok(fit)
}

/// Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col] == 0.0 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for j in col..3 {
                m[row][j] -= f * m[col][j];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let s: f64 = (i + 1..3).map(|j| m[i][j] * x[j]).sum();
        x[i] = (r[i] - s) / m[i][i];
    }
    Some(x)
}

/// Mean absolute residual `|dt - (a*dx + b*dy + c)|` over the patch.
///
/// The signed mean is identically zero for a least-squares fit with an
/// intercept, so the absolute value is what makes this a distance.
pub fn patch_error(fit: &PlaneFit, local: &[[f64; 3]]) -> f64 {
    if local.is_empty() {
        return 0.0;
    }
    local
        .iter()
        .map(|p| (p[2] - fit.predict(p[0], p[1])).abs())
        .sum::<f64>()
        / local.len() as f64
}

/// Farthest point sampling starting at `start`. Ties go to the lower index.
pub fn fps_centers(points: &[[f64; 3]], m: usize, start: usize) -> Result<Vec<usize>, PatchError> {
    let n = points.len();
    if m > n {
        return Err(PatchError::MTooLarge { m, n });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(m);
    let mut mind = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = start;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == m {
            break;
        }
        let c = points[cur];
        let mut best = None::<(f64, usize)>;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(p, &c);
            if d < mind[i] {
                mind[i] = d;
            }
            if best.is_none_or(|(bd, _)| mind[i] > bd) {
                best = Some((mind[i], i));
            }
        }
        cur = best.expect("m <= n leaves an untaken point").1;
    }
    Ok(chosen)
}

/// `m` distinct indices drawn uniformly from `0..n`.
pub fn random_centers<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>, PatchError> {
    if m > n {
        return Err(PatchError::MTooLarge { m, n });
    }
    Ok(index::sample(rng, n, m).into_vec())
}

/// Points of one polarity (or all points, when neither polarity alone can
/// fill a neighborhood) with their patch budget.
struct Group {
    polarity: Option<u8>,
    members: Vec<usize>,
    quota: usize,
}

fn polarity_groups(ps: &PointSet, m: usize, k: usize) -> Result<Vec<Group>, PatchError> {
    let n = ps.len();
    let pos: Vec<usize> = (0..n).filter(|&i| ps.polarities[i] == 1).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| ps.polarities[i] != 1).collect();
    let (np, nn) = (pos.len(), neg.len());

    let groups = match (np >= k, nn >= k) {
        (true, true) => {
            let mut qp = ((m as f64 * np as f64 / n as f64).round() as usize).min(np);
            let mut qn = m - qp;
            if qn > nn {
                qp += qn - nn;
                qn = nn;
            }
            vec![
                Group {
                    polarity: Some(1),
                    members: pos,
                    quota: qp,
                },
                Group {
                    polarity: Some(0),
                    members: neg,
                    quota: qn,
                },
            ]
        }
        (true, false) => vec![Group {
            polarity: Some(1),
            members: pos,
            quota: m,
        }],
        (false, true) => vec![Group {
            polarity: Some(0),
            members: neg,
            quota: m,
        }],
        (false, false) => vec![Group {
            polarity: None,
            members: (0..n).collect(),
            quota: m,
        }],
    };
    for g in &groups {
        if g.quota > g.members.len() {
            return Err(PatchError::TooFewPoints {
                needed: g.quota,
                found: g.members.len(),
            });
        }
    }
    Ok(groups)
}

fn local_coords(points: &[[f64; 3]], nbrs: &[usize], center: usize) -> Vec<[f64; 3]> {
    let c = points[center];
    nbrs.iter()
        .map(|&i| {
            let p = points[i];
            [c[0] - p[0], c[1] - p[1], c[2] - p[2]]
        })
        .collect()
}

/// Builds the patch around `center` (an index into `sub`, the group's points).
fn build_patch(sub: &[[f64; 3]], members: &[usize], polarities: &[u8], center: usize, k: usize, fallback: bool) -> Result<Patch, PatchError> {
    let nbrs = knn_group(sub, center, k)?;
    let local = local_coords(sub, &nbrs, center);
    let residual = fit_plane(&local).map_or(f64::INFINITY, |f| f.residual_mean_abs);
    Ok(Patch {
        center: sub[center],
        center_index: members[center],
        neighbor_indices: nbrs.iter().map(|&i| members[i]).collect(),
        points: nbrs.iter().map(|&i| sub[i]).collect(),
        local,
        polarity: polarities[members[center]],
        residual,
        fallback,
    })
}

/// Inlier-model center selection within one group.
fn inlier_group<R: Rng + ?Sized>(sub: &[[f64; 3]], members: &[usize], polarities: &[u8], quota: usize, budget: usize, cfg: &PatchConfig, rng: &mut R) -> Result<Vec<Patch>, PatchError> {
    let mut order: Vec<usize> = (0..sub.len()).collect();
    order.shuffle(rng);

    let mut patches = Vec::with_capacity(quota);
    let mut accepted = vec![false; sub.len()];
    let tried = budget.min(order.len());
    for &cand in &order[..tried] {
        if patches.len() == quota {
            break;
        }
        let nbrs = knn_group(sub, cand, cfg.k)?;
        let local = local_coords(sub, &nbrs, cand);
        let Ok(fit) = fit_plane(&local) else {
            continue;
        };
        if fit.residual_mean_abs < cfg.threshold {
            accepted[cand] = true;
            patches.push(Patch {
                center: sub[cand],
                center_index: members[cand],
                neighbor_indices: nbrs.iter().map(|&i| members[i]).collect(),
                points: nbrs.iter().map(|&i| sub[i]).collect(),
                local,
                polarity: polarities[members[cand]],
                residual: fit.residual_mean_abs,
                fallback: false,
            });
        }
    }

    // Fallback: untried candidates first, then rejected ones, in draw order.
    if patches.len() < quota {
        let refill = order[tried..].iter().chain(&order[..tried]);
        for &cand in refill {
            if patches.len() == quota {
                break;
            }
            if accepted[cand] {
                continue;
            }
            accepted[cand] = true;
            patches.push(build_patch(sub, members, polarities, cand, cfg.k, true)?);
        }
    }
    Ok(patches)
}

/// Selects `cfg.m` patch centers with `cfg.method` and groups their
/// neighborhoods.
///
/// For the inlier method, candidates are drawn uniformly without repeats;
/// a candidate is accepted iff its neighborhood plane fit has mean absolute
/// residual below `cfg.threshold`. Degenerate fits count as rejections.
/// When the attempt budget runs out, the remaining slots are filled with
/// random centers regardless of residual and marked `fallback`.
pub fn generate_patches<R: Rng + ?Sized>(ps: &PointSet, cfg: &PatchConfig, rng: &mut R) -> Result<PatchSet, PatchError> {
    cfg.validate()?;
    let n = ps.len();
    if n < cfg.k || n < cfg.m {
        return Err(PatchError::TooFewPoints {
            needed: cfg.k.max(cfg.m),
            found: n,
        });
    }
    let groups = polarity_groups(ps, cfg.m, cfg.k)?;
    let mut patches = Vec::with_capacity(cfg.m);
    for g in &groups {
        if g.quota == 0 {
            continue;
        }
        let sub: Vec<[f64; 3]> = g.members.iter().map(|&i| ps.points[i]).collect();
        let group_patches = match cfg.method {
            CenterMethod::Inlier => {
                let budget = (cfg.attempts() * g.quota).div_ceil(cfg.m);
                inlier_group(&sub, &g.members, &ps.polarities, g.quota, budget, cfg, rng)?
            }
            CenterMethod::Fps => {
                let start = rng.random_range(0..sub.len());
                fps_centers(&sub, g.quota, start)?
                    .into_iter()
                    .map(|c| build_patch(&sub, &g.members, &ps.polarities, c, cfg.k, false))
                    .collect::<Result<_, _>>()?
            }
            CenterMethod::Random => random_centers(sub.len(), g.quota, rng)?
                .into_iter()
                .map(|c| build_patch(&sub, &g.members, &ps.polarities, c, cfg.k, false))
                .collect::<Result<_, _>>()?,
        };
        debug_assert!(g.polarity.is_none() || group_patches.iter().all(|p: &Patch| Some(p.polarity) == g.polarity));
        patches.extend(group_patches);
    }
    Ok(PatchSet { patches, k: cfg.k })
}

/// Patches every window, seeding window `i` with `window_rng(cfg.seed, i)`.
pub fn generate_patch_sets(windows: &[PointSet], cfg: &PatchConfig) -> Result<Vec<PatchSet>, PatchError> {
    windows
        .par_iter()
        .enumerate()
        .map(|(i, ps)| generate_patches(ps, cfg, &mut window_rng(cfg.seed, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn knn_collinear() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(knn_group(&pts, 0, 2).unwrap(), vec![0, 1]);
        let mut all = knn_group(&pts, 2, 4).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(knn_group(&pts, 3, 1).unwrap(), vec![3]);
        assert_eq!(knn_group(&pts, 0, 5), Err(PatchError::KTooLarge { k: 5, n: 4 }));
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let pts = [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        assert_eq!(knn_group(&pts, 1, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..200).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        for center in [0, 17, 199] {
            let got = knn_group(&pts, center, 32).unwrap();
            let mut all: Vec<usize> = (0..pts.len()).filter(|&i| i != center).collect();
            all.sort_by(|&a, &b| {
                dist2(&pts[a], &pts[center])
                    .partial_cmp(&dist2(&pts[b], &pts[center]))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut want = vec![center];
            want.extend(&all[..31]);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn exact_plane_recovered() {
        let pts: Vec<[f64; 3]> = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.5, 0.7), (-0.3, 0.2)]
            .iter()
            .map(|&(x, y)| [x, y, 0.1 * x + 0.2 * y + 0.3])
            .collect();
        let f = fit_plane(&pts).unwrap();
        assert!((f.a - 0.1).abs() < 1e-12);
        assert!((f.b - 0.2).abs() < 1e-12);
        assert!((f.c - 0.3).abs() < 1e-12);
        assert!(f.residual_mean_abs < 1e-12);
    }

    #[test]
    fn degenerate_neighborhoods() {
        let same = vec![[0.1, 0.1, 0.0], [0.1, 0.1, 0.5], [0.1, 0.1, 0.9]];
        assert_eq!(fit_plane(&same), Err(PatchError::DegenerateNeighborhood));
        let line: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.3]).collect();
        assert_eq!(fit_plane(&line), Err(PatchError::DegenerateNeighborhood));
        assert_eq!(fit_plane(&same[..2]), Err(PatchError::DegenerateNeighborhood));
    }

    #[test]
    fn absolute_mean_residual() {
        let fit = PlaneFit {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            residual_mean_abs: 0.0,
        };
        let pts = [[0.0, 0.0, 0.1], [1.0, 0.0, -0.1]];
        // Signed mean would be 0.
        assert!((patch_error(&fit, &pts) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn fps_square_corners() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(fps_centers(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(fps_centers(&pts, 1, 2).unwrap(), vec![2]);
        let mut all = fps_centers(&pts, 4, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(fps_centers(&pts, 5, 0), Err(PatchError::MTooLarge { m: 5, n: 4 }));
    }

    #[test]
    fn random_center_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(random_centers(10, 0, &mut rng).unwrap().is_empty());
        let mut perm = random_centers(10, 10, &mut rng).unwrap();
        perm.sort_unstable();
        assert_eq!(perm, (0..10).collect::<Vec<_>>());
        let a = random_centers(100, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_centers(100, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(random_centers(3, 4, &mut rng).is_err());
    }

    fn planar_set(n: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let x: f64 = rng.random();
                let y: f64 = rng.random();
                [x, y, 0.5 * x + 0.25 * y]
            })
            .collect();
        PointSet {
            polarities: (0..n).map(|i| (i % 3 != 0) as u8).collect(),
            event_indices: (0..n).collect(),
            points,
            source_window: (0, 1),
        }
    }

    #[test]
    fn quota_split_and_polarity_purity() {
        let ps = planar_set(300, 2);
        let cfg = PatchConfig {
            m: 16,
            k: 8,
            threshold: 10.0,
            ..Default::default()
        };
        let set = generate_patches(&ps, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.len(), 16);
        let n_pos = set.patches.iter().filter(|p| p.polarity == 1).count();
        assert_eq!(n_pos, 11); // round(16 * 200 / 300)
        for p in &set.patches {
            assert!(p.neighbor_indices.iter().all(|&i| ps.polarities[i] == p.polarity));
            assert_eq!(p.local.len(), 8);
            assert_eq!(p.local[0], [0.0, 0.0, 0.0]);
            for (g, &i) in p.global_points().zip(&p.neighbor_indices) {
                assert_eq!(g, ps.points[i]);
            }
        }
        let mut centers: Vec<usize> = set.patches.iter().map(|p| p.center_index).collect();
        centers.sort_unstable();
        centers.dedup();
        assert_eq!(centers.len(), 16);
    }

    #[test]
    fn too_few_points() {
        let ps = planar_set(10, 1);
        let cfg = PatchConfig {
            m: 4,
            k: 32,
            ..Default::default()
        };
        assert!(matches!(
            generate_patches(&ps, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(PatchError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn small_polarity_subset_is_merged() {
        let mut ps = planar_set(100, 4);
        ps.polarities = vec![1; 100];
        ps.polarities[0] = 0;
        let cfg = PatchConfig {
            m: 8,
            k: 8,
            threshold: 10.0,
            ..Default::default()
        };
        let set = generate_patches(&ps, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(set.len(), 8);
        assert!(set.patches.iter().all(|p| p.polarity == 1));
    }

    #[test]
    fn csv_round_trip() {
        let ps = planar_set(200, 5);
        let cfg = PatchConfig {
            m: 6,
            k: 5,
            threshold: 10.0,
            ..Default::default()
        };
        let set = generate_patches(&ps, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = PatchSet::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in back.patches.iter().zip(&set.patches) {
            assert_eq!(a.center, b.center);
            assert_eq!(a.local, b.local);
            assert_eq!(a.residual, b.residual);
        }
    }
}
