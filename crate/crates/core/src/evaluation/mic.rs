//! Maximal information coefficient.
//!
//! Approximation in the style of ApproxMaxMI: one axis is equipartitioned
//! (keeping tied values together), the other is optimized by dynamic
//! programming over clumps of consecutive points, and both orientations are
//! searched. The score only depends on ranks, so it is invariant under
//! strictly monotone transforms of either input. Row boundaries are snapped
//! to the tie-block edge nearest each quantile target, which also makes the
//! partitions mirror-symmetric, so order-reversing transforms give the same
//! score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicConfig {
    /// Grid budget `B(n) = n^max_grid_exponent` on `|X|·|Y|`.
    pub max_grid_exponent: f64,
    /// Smallest number of bins per axis.
    pub min_bins: usize,
    /// Superclump count per allowed column.
    pub clump_factor: usize,
}

impl Default for MicConfig {
    fn default() -> Self {
        Self {
            max_grid_exponent: 0.6,
            min_bins: 2,
            clump_factor: 15,
        }
    }
}

impl MicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_grid_exponent > 0.0 && self.max_grid_exponent < 1.0) {
            return Err(Error::config("MIC grid exponent must lie in (0, 1)"));
        }
        if self.min_bins < 2 || self.clump_factor == 0 {
            return Err(Error::config("MIC needs min_bins >= 2 and a positive clump factor"));
        }
        Ok(())
    }

    pub fn budget(&self, n: usize) -> usize {
        ((n as f64).powf(self.max_grid_exponent).floor() as usize).max(self.min_bins * self.min_bins)
    }
}

pub const MIN_SAMPLES: usize = 20;

/// Dense ranks with ties sharing a rank, and the sort order.
fn ranks(v: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut rank = vec![0; v.len()];
    let mut r = 0;
    for w in 0..order.len() {
        if w > 0 && v[order[w]] != v[order[w - 1]] {
            r += 1;
        }
        rank[order[w]] = r;
    }
    (rank, order)
}

/// Split `sizes` (consecutive tie blocks) into about `parts` groups of equal
/// total weight. Returns the group index of each block.
fn equipartition(sizes: &[usize], parts: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    // block edges in cumulative-count units, excluding 0 and total
    let mut edges = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &s in &sizes[..sizes.len().saturating_sub(1)] {
        acc += s;
        edges.push(acc);
    }
    let center = total as f64 / 2.0;
    let mut cuts: Vec<usize> = Vec::new();
    for j in 1..parts {
        let target = j as f64 * total as f64 / parts as f64;
        let pos = edges.partition_point(|&e| (e as f64) < target);
        let mut best: Option<usize> = None;
        for cand in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
            let Some(&e) = edges.get(cand) else { continue };
            best = Some(match best {
                None => e,
                Some(b) => {
                    let (db, de) = ((b as f64 - target).abs(), (e as f64 - target).abs());
                    if de < db || (de == db && (e as f64 - center).abs() < (b as f64 - center).abs()) {
                        e
                    } else {
                        b
                    }
                }
            });
        }
        if let Some(b) = best {
            if cuts.last() != Some(&b) {
                cuts.push(b);
            }
        }
    }
    cuts.sort_unstable();
    cuts.dedup();
    let mut group = Vec::with_capacity(sizes.len());
    let (mut acc, mut g) = (0, 0);
    for &s in sizes {
        while g < cuts.len() && acc >= cuts[g] {
            g += 1;
        }
        group.push(g);
        acc += s;
    }
    group
}

/// Tie blocks of `rank` in sorted order: (start offset in `order`, size).
fn tie_blocks(rank: &[usize], order: &[usize]) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for w in 1..=order.len() {
        if w == order.len() || rank[order[w]] != rank[order[start]] {
            blocks.push((start, w - start));
            start = w;
        }
    }
    blocks
}

fn xlnx(c: f64) -> f64 {
    if c > 0.0 {
        c * c.ln()
    } else {
        0.0
    }
}

/// Best mutual information (nats) for each column count `2..=max_cols`
/// when the columns are unions of consecutive clumps of the `x` order and
/// rows are the fixed partition `row_of`. Entry `l` of the result holds the
/// value for `l` columns (`None` when fewer than `l` clumps exist).
fn optimize_axis(
    x_rank: &[usize],
    x_order: &[usize],
    row_of: &[usize],
    rows: usize,
    max_cols: usize,
    clump_factor: usize,
) -> Vec<Option<f64>> {
    let n = x_order.len();
    // clumps: x tie blocks that span several rows stand alone; runs of blocks
    // in the same row merge.
    let blocks = tie_blocks(x_rank, x_order);
    let mut clumps: Vec<Vec<usize>> = Vec::new();
    let mut last_row: Option<usize> = None;
    for &(start, size) in &blocks {
        let ids = &x_order[start..start + size];
        let r0 = row_of[ids[0]];
        let uniform = ids.iter().all(|&i| row_of[i] == r0);
        let mut counts = vec![0usize; rows];
        for &i in ids {
            counts[row_of[i]] += 1;
        }
        if uniform && last_row == Some(r0) {
            let c = clumps.last_mut().unwrap();
            for r in 0..rows {
                c[r] += counts[r];
            }
        } else {
            clumps.push(counts);
        }
        last_row = if uniform { Some(r0) } else { None };
    }
    let k_hat = clump_factor * max_cols;
    if clumps.len() > k_hat {
        let sizes: Vec<usize> = clumps.iter().map(|c| c.iter().sum()).collect();
        let group = equipartition(&sizes, k_hat);
        let mut merged: Vec<Vec<usize>> = Vec::new();
        for (c, &g) in clumps.iter().zip(&group) {
            if merged.len() <= g {
                merged.push(vec![0; rows]);
            }
            let last = merged.last_mut().unwrap();
            for r in 0..rows {
                last[r] += c[r];
            }
        }
        clumps = merged;
    }
    let k = clumps.len();

    // cum[t][r]: points of row r in clumps before t
    let mut cum = vec![vec![0usize; rows]; k + 1];
    for t in 0..k {
        for r in 0..rows {
            cum[t + 1][r] = cum[t][r] + clumps[t][r];
        }
    }
    let nf = n as f64;
    let row_tot: Vec<f64> = (0..rows).map(|r| cum[k][r] as f64).collect();
    let h_rows = -row_tot.iter().map(|&c| xlnx(c / nf)).sum::<f64>();
    // score(s, t) = -(n_col/n)·H(Q | column) for clumps s..t
    let score = |s: usize, t: usize| {
        let mut acc = 0.0;
        let mut tot = 0usize;
        for r in 0..rows {
            let c = cum[t][r] - cum[s][r];
            tot += c;
            acc += xlnx(c as f64);
        }
        (acc - xlnx(tot as f64)) / nf
    };
    let mut table = vec![vec![0.0f64; k + 1]; k + 1];
    for s in 0..k {
        for t in s + 1..=k {
            table[s][t] = score(s, t);
        }
    }

    let lmax = max_cols.min(k);
    let mut out = vec![None; max_cols + 1];
    // f[t] = best with current column count covering clumps 0..t
    let mut f: Vec<f64> = (0..=k).map(|t| if t == 0 { f64::NEG_INFINITY } else { table[0][t] }).collect();
    for l in 2..=lmax {
        let mut g = vec![f64::NEG_INFINITY; k + 1];
        for t in l..=k {
            let mut best = f64::NEG_INFINITY;
            for s in (l - 1)..t {
                let v = f[s] + table[s][t];
                if v > best {
                    best = v;
                }
            }
            g[t] = best;
        }
        f = g;
        out[l] = Some(h_rows + f[k]);
    }
    out
}

/// One orientation: equipartition `y`, optimize `x`. Returns the best
/// normalized score over all grids within `budget`.
fn orient(xr: &[usize], xo: &[usize], yr: &[usize], yo: &[usize], budget: usize, cfg: &MicConfig) -> f64 {
    let n = xr.len();
    let y_blocks = tie_blocks(yr, yo);
    let sizes: Vec<usize> = y_blocks.iter().map(|b| b.1).collect();
    let mut best = 0.0f64;
    let mut previous: Option<Vec<usize>> = None;
    let mut y = cfg.min_bins;
    while y * cfg.min_bins <= budget {
        let group = equipartition(&sizes, y);
        if previous.as_ref() != Some(&group) {
            let rows = group.last().map_or(1, |g| g + 1);
            if rows >= 2 {
                let mut row_of = vec![0; n];
                for (&(start, size), &g) in y_blocks.iter().zip(&group) {
                    for &i in &yo[start..start + size] {
                        row_of[i] = g;
                    }
                }
                let max_cols = budget / y;
                let mi = optimize_axis(xr, xo, &row_of, rows, max_cols, cfg.clump_factor);
                for (l, v) in mi.iter().enumerate() {
                    if let Some(v) = v {
                        let norm = (l.min(rows) as f64).ln();
                        best = best.max(v / norm);
                    }
                }
            }
            previous = Some(group);
        }
        y += 1;
    }
    best
}

/// Maximal information coefficient of paired samples, in `[0, 1]`.
///
/// A constant input yields 0.
pub fn mic(x: &[f64], y: &[f64], cfg: &MicConfig) -> Result<f64> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::contract(format!("mic: {} vs {} samples", x.len(), y.len())));
    }
    if x.len() < MIN_SAMPLES {
        return Err(Error::contract(format!("mic needs at least {MIN_SAMPLES} samples, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numerical { term: "mic input".into() });
    }
    let (xr, xo) = ranks(x);
    let (yr, yo) = ranks(y);
    let constant = |r: &[usize]| r.iter().all(|&v| v == 0);
    if constant(&xr) || constant(&yr) {
        log::debug!("mic: constant input, returning 0");
        return Ok(0.0);
    }
    let budget = cfg.budget(x.len());
    let a = orient(&xr, &xo, &yr, &yo, budget, cfg);
    let b = orient(&yr, &yo, &xr, &xo, budget, cfg);
    Ok(a.max(b).clamp(0.0, 1.0))
}
