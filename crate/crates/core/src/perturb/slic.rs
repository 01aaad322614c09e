//! SLIC superpixels on grayscale images.
//!
//! Localized k-means in `(intensity, x, y)` with the usual SLIC distance
//! `D = sqrt(dI² + (m/S)²·dxy²)`, grid-seeded centers, a fixed number of
//! iterations and a final connectivity pass so every label is one 4-connected
//! region.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::raster::ImageBuffer;

use super::PerturbError;

pub const DEFAULT_COMPACTNESS: f64 = 10.0;
pub const SLIC_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicParams {
    pub cluster_count: usize,
    #[serde(default = "default_compactness")]
    pub compactness: f64,
}

fn default_compactness() -> f64 {
    DEFAULT_COMPACTNESS
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            cluster_count: 50,
            compactness: DEFAULT_COMPACTNESS,
        }
    }
}

/// Dense per-pixel cluster ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelLabels {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub cluster_count: usize,
}

impl SuperpixelLabels {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Number of 4-connected components formed by pixels of `label`.
    pub fn component_count(&self, label: u32) -> usize {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut seen = vec![false; self.labels.len()];
        let mut count = 0;
        for start in 0..self.labels.len() {
            if self.labels[start] != label || seen[start] {
                continue;
            }
            count += 1;
            flood(w, h, start, &mut seen, |i| self.labels[i] == label, |_| {});
        }
        count
    }
}

/// Breadth-first 4-connected flood fill from `start`.
fn flood(
    w: usize,
    h: usize,
    start: usize,
    seen: &mut [bool],
    member: impl Fn(usize) -> bool,
    mut visit: impl FnMut(usize),
) {
    let mut queue = VecDeque::new();
    seen[start] = true;
    queue.push_back(start);
    while let Some(i) = queue.pop_front() {
        visit(i);
        let (x, y) = (i % w, i / w);
        let mut push = |j: usize| {
            if !seen[j] && member(j) {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < w {
            push(i + 1);
        }
        if y > 0 {
            push(i - w);
        }
        if y + 1 < h {
            push(i + w);
        }
    }
}

/// Grid shape `nx × ny` with `nx·ny` as close as possible to `k` and cells as
/// square as possible. Ties prefer more columns.
fn grid_shape(width: usize, height: usize, k: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_score = (usize::MAX, f64::INFINITY);
    for ny in 1..=k {
        let nx = ((k as f64 / ny as f64).round() as usize).max(1);
        if nx > width || ny > height {
            continue;
        }
        let count_err = (nx * ny).abs_diff(k);
        let aspect = ((width as f64 / nx as f64) / (height as f64 / ny as f64)).ln().abs();
        let score = (count_err, aspect);
        if score.0 < best_score.0 || (score.0 == best_score.0 && score.1 < best_score.1 - 1e-12) {
            best_score = score;
            best = (nx, ny);
        }
    }
    best
}

pub fn slic_segment(img: &ImageBuffer, params: &SlicParams) -> Result<SuperpixelLabels, PerturbError> {
    let k = params.cluster_count;
    if k < 2 {
        return Err(PerturbError::InvalidParameter(format!(
            "cluster count must be at least 2, got {k}"
        )));
    }
    if !(params.compactness > 0.0) {
        return Err(PerturbError::InvalidParameter(format!(
            "compactness must be positive, got {}",
            params.compactness
        )));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let s = (n as f64 / k as f64).sqrt();
    if s < 2.0 {
        return Err(PerturbError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            detail: format!("superpixel interval {s:.2} px is below 2 px for {k} clusters"),
        });
    }

    let (nx, ny) = grid_shape(w, h, k);
    let step_x = w as f64 / nx as f64;
    let step_y = h as f64 / ny as f64;
    let window = step_x.max(step_y);
    let spatial_weight = (params.compactness / s).powi(2);
    let intensity: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();

    // center = (intensity, x, y), pixel centers at (i + 0.5)
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (i as f64 + 0.5) * step_x;
            let cy = (j as f64 + 0.5) * step_y;
            let px = (cx.floor() as usize).min(w - 1);
            let py = (cy.floor() as usize).min(h - 1);
            centers.push([intensity[py * w + px], cx, cy]);
        }
    }

    let mut labels: Vec<u32> = (0..n)
        .map(|idx| {
            let (x, y) = (idx % w, idx / w);
            let i = ((x as f64 + 0.5) / step_x).floor().min(nx as f64 - 1.0) as usize;
            let j = ((y as f64 + 0.5) / step_y).floor().min(ny as f64 - 1.0) as usize;
            (j * nx + i) as u32
        })
        .collect();
    let mut distance = vec![f64::INFINITY; n];

    for _ in 0..SLIC_ITERATIONS {
        distance.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (c_idx, c) in centers.iter().enumerate() {
            let x_lo = ((c[1] - window).floor().max(0.0)) as usize;
            let x_hi = ((c[1] + window).ceil() as usize).min(w);
            let y_lo = ((c[2] - window).floor().max(0.0)) as usize;
            let y_hi = ((c[2] + window).ceil() as usize).min(h);
            for y in y_lo..y_hi {
                let dy = y as f64 + 0.5 - c[2];
                for x in x_lo..x_hi {
                    let dx = x as f64 + 0.5 - c[1];
                    let idx = y * w + x;
                    let di = intensity[idx] - c[0];
                    let d = di * di + spatial_weight * (dx * dx + dy * dy);
                    if d < distance[idx] {
                        distance[idx] = d;
                        labels[idx] = c_idx as u32;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 4]; centers.len()];
        for (idx, &l) in labels.iter().enumerate() {
            let acc = &mut sums[l as usize];
            acc[0] += intensity[idx];
            acc[1] += (idx % w) as f64 + 0.5;
            acc[2] += (idx / w) as f64 + 0.5;
            acc[3] += 1.0;
        }
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[3] > 0.0 {
                *c = [acc[0] / acc[3], acc[1] / acc[3], acc[2] / acc[3]];
            }
        }
    }

    let min_size = ((s * s) / 4.0).floor().max(1.0) as usize;
    Ok(enforce_connectivity(w, h, &labels, centers.len(), min_size))
}

/// Keep the largest component of every label (if not tiny) and merge every other
/// component into the largest adjacent surviving region.
fn enforce_connectivity(w: usize, h: usize, labels: &[u32], label_count: usize, min_size: usize) -> SuperpixelLabels {
    let n = labels.len();
    let mut comp = vec![usize::MAX; n];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let id = comp_label.len();
        let label = labels[start];
        let mut size = 0;
        flood(
            w,
            h,
            start,
            &mut seen,
            |i| labels[i] == label,
            |i| {
                comp[i] = id;
                size += 1;
            },
        );
        comp_label.push(label);
        comp_size.push(size);
    }
    let comp_count = comp_label.len();

    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); comp_count];
    for i in 0..n {
        let (x, y) = (i % w, i / w);
        let a = comp[i];
        let mut link = |j: usize| {
            let b = comp[j];
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        };
        if x + 1 < w {
            link(i + 1);
        }
        if y + 1 < h {
            link(i + w);
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }

    let mut largest: Vec<Option<usize>> = vec![None; label_count];
    for c in 0..comp_count {
        let l = comp_label[c] as usize;
        match largest[l] {
            Some(b) if comp_size[b] >= comp_size[c] => {}
            _ => largest[l] = Some(c),
        }
    }
    let mut kept = vec![false; comp_count];
    for c in largest.iter().flatten() {
        if comp_size[*c] >= min_size {
            kept[*c] = true;
        }
    }
    if !kept.iter().any(|&k| k) {
        let biggest = (0..comp_count)
            .max_by_key(|&c| (comp_size[c], usize::MAX - c))
            .unwrap_or(0);
        kept[biggest] = true;
    }

    // Union-find style parent pointers: orphans point at the region they joined.
    let mut parent: Vec<usize> = (0..comp_count).collect();
    fn root(parent: &[usize], mut c: usize) -> usize {
        while parent[c] != c {
            c = parent[c];
        }
        c
    }
    let mut size = comp_size.clone();
    let mut pending: Vec<usize> = (0..comp_count).filter(|&c| !kept[c]).collect();
    while !pending.is_empty() {
        let mut still = Vec::new();
        for &o in &pending {
            let target = adjacency[o]
                .iter()
                .map(|&b| root(&parent, b))
                .filter(|&r| r != o && kept[r])
                .max_by_key(|&r| (size[r], usize::MAX - r));
            match target {
                Some(r) => {
                    parent[o] = r;
                    size[r] += size[o];
                }
                None => still.push(o),
            }
        }
        if still.len() == pending.len() {
            // unreachable for a connected image grid; promote to keep progress
            kept[still[0]] = true;
            still.remove(0);
        }
        pending = still;
    }

    // Dense relabel in raster order of first appearance.
    let mut dense = vec![u32::MAX; comp_count];
    let mut next = 0u32;
    let mut out = Vec::with_capacity(n);
    for &c in &comp {
        let r = root(&parent, c);
        if dense[r] == u32::MAX {
            dense[r] = next;
            next += 1;
        }
        out.push(dense[r]);
    }
    SuperpixelLabels {
        width: w as u32,
        height: h as u32,
        labels: out,
        cluster_count: next as usize,
    }
}
