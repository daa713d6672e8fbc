//! Single-frame raster helpers: connected components, flood fill, boundary
//! rings and centroids. Frames are row-major slices of `height * width`.

use std::collections::VecDeque;

pub type Pixel = (usize, usize);

const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const N8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[inline]
fn step(p: Pixel, d: (isize, isize), height: usize, width: usize) -> Option<Pixel> {
    let r = p.0.checked_add_signed(d.0)?;
    let c = p.1.checked_add_signed(d.1)?;
    (r < height && c < width).then_some((r, c))
}

/// Mean coordinate of `pixels`, or `None` when empty.
pub fn mean_position(pixels: &[Pixel]) -> Option<(f64, f64)> {
    if pixels.is_empty() {
        return None;
    }
    let (sr, sc) = pixels
        .iter()
        .fold((0u64, 0u64), |(a, b), &(r, c)| (a + r as u64, b + c as u64));
    let n = pixels.len() as f64;
    Some((sr as f64 / n, sc as f64 / n))
}

/// Integer centroid: per-axis mean rounded half away from zero.
pub fn centroid(pixels: &[Pixel]) -> Option<(i64, i64)> {
    mean_position(pixels).map(|(r, c)| (r.round() as i64, c.round() as i64))
}

/// Pixels of `frame` equal to `value`, in row-major order.
pub fn pixels_with(frame: &[u8], width: usize, value: u8) -> Vec<Pixel> {
    frame
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == value)
        .map(|(i, _)| (i / width, i % width))
        .collect()
}

/// Breadth-first 4-connected flood fill over `mask` from `seed`, calling
/// `visit` once per reached pixel. Returns the number of pixels visited.
pub fn flood_fill<F: FnMut(Pixel)>(
    mask: &[bool],
    height: usize,
    width: usize,
    seed: Pixel,
    mut visit: F,
) -> usize {
    if !mask[seed.0 * width + seed.1] {
        return 0;
    }
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::from([seed]);
    seen[seed.0 * width + seed.1] = true;
    let mut n = 0;
    while let Some(p) = queue.pop_front() {
        visit(p);
        n += 1;
        for d in N4 {
            if let Some(q) = step(p, d, height, width) {
                let i = q.0 * width + q.1;
                if mask[i] && !seen[i] {
                    seen[i] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    n
}

/// 4-connected components of `mask`, ordered by their first pixel in
/// row-major scan order. Pixels inside a component are row-major sorted.
pub fn components4(mask: &[bool], height: usize, width: usize) -> Vec<Vec<Pixel>> {
    let mut comp_of = vec![usize::MAX; mask.len()];
    let mut comps: Vec<Vec<Pixel>> = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || comp_of[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([(start / width, start % width)]);
        comp_of[start] = id;
        while let Some(p) = queue.pop_front() {
            members.push(p);
            for d in N4 {
                if let Some(q) = step(p, d, height, width) {
                    let i = q.0 * width + q.1;
                    if mask[i] && comp_of[i] == usize::MAX {
                        comp_of[i] = id;
                        queue.push_back(q);
                    }
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// The component pixel closest to the component's mean position; ties go to
/// the earliest pixel in row-major order.
pub fn nearest_to_centroid(component: &[Pixel]) -> Option<Pixel> {
    let (mr, mc) = mean_position(component)?;
    let mut best: Option<(f64, Pixel)> = None;
    let mut sorted = component.to_vec();
    sorted.sort_unstable();
    for p in sorted {
        let d = (p.0 as f64 - mr).powi(2) + (p.1 as f64 - mc).powi(2);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, p));
        }
    }
    best.map(|(_, p)| p)
}

/// Pixels outside `mask` that are 8-adjacent to at least one mask pixel.
pub fn outer_ring8(mask: &[bool], height: usize, width: usize) -> Vec<Pixel> {
    let mut in_ring = vec![false; mask.len()];
    let mut ring = Vec::new();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let p = (i / width, i % width);
        for d in N8 {
            if let Some(q) = step(p, d, height, width) {
                let j = q.0 * width + q.1;
                if !mask[j] && !in_ring[j] {
                    in_ring[j] = true;
                    ring.push(q);
                }
            }
        }
    }
    ring.sort_unstable();
    ring
}

pub fn keep_largest_component(labels: &mut [u8], height: usize, width: usize, label: u8) {
    let mask: Vec<bool> = labels.iter().map(|&l| l == label).collect();
    let comps = components4(&mask, height, width);
    let Some(keep) = comps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
    else {
        return;
    };
    for (i, comp) in comps.iter().enumerate() {
        if i != keep {
            for &(r, c) in comp {
                labels[r * width + c] = 0;
            }
        }
    }
}

/// Relabels pixels whose four in-bounds neighbours all carry `label`.
pub fn fill_single_holes(labels: &mut [u8], height: usize, width: usize, label: u8) {
    let snapshot = labels.to_vec();
    for r in 1..height.saturating_sub(1) {
        for c in 1..width.saturating_sub(1) {
            let i = r * width + c;
            if snapshot[i] != label
                && N4.iter().all(|&d| {
                    let q = step((r, c), d, height, width).expect("interior pixel");
                    snapshot[q.0 * width + q.1] == label
                })
            {
                labels[i] = label;
            }
        }
    }
}
