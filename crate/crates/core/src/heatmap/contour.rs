//! Cell-edge boundary tracing of binary masks.
//!
//! Boundary edges are directed with the tumor cell on their left, so outer
//! rings come out with positive signed area and holes with negative. At a
//! saddle vertex the tracer turns right, which joins diagonal neighbours:
//! tumor regions are 8-connected and holes 4-connected.

use std::collections::{BTreeMap, HashSet, VecDeque};

use super::grid::{BinaryMask, ProbabilityGrid};
use super::HeatmapError;

pub type Point = [f64; 2];

pub const DEFAULT_MIN_AREA: usize = 2;

/// A tumor region. Rings are closed (first point repeated last); the outer
/// ring has positive signed area, holes negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TumorAnnotation {
    pub outer_ring: Vec<Point>,
    pub holes: Vec<Vec<Point>>,
    pub mean_probability: f64,
    pub area_px: f64,
}

/// Shoelace area; positive for counterclockwise rings.
pub fn signed_area(ring: &[Point]) -> f64 {
    ring.windows(2)
        .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
        .sum::<f64>()
        / 2.0
}

type Vertex = (i64, i64);
type Dir = (i64, i64);

struct Component {
    cells: Vec<(u32, u32)>,
    first: (u32, u32),
}

/// Labels 8-connected true components in row-major discovery order.
fn label_components(mask: &BinaryMask) -> (Vec<Option<usize>>, Vec<Component>) {
    let (cols, rows) = (i64::from(mask.cols()), i64::from(mask.rows()));
    let mut labels = vec![None; mask.cells().len()];
    let mut components = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let idx = (r * cols + c) as usize;
            if !mask.get(r, c) || labels[idx].is_some() {
                continue;
            }
            let id = components.len();
            let mut cells = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            labels[idx] = Some(id);
            while let Some((y, x)) = queue.pop_front() {
                cells.push((y as u32, x as u32));
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if mask.get(ny, nx) {
                            let n = (ny * cols + nx) as usize;
                            if labels[n].is_none() {
                                labels[n] = Some(id);
                                queue.push_back((ny, nx));
                            }
                        }
                    }
                }
            }
            components.push(Component {
                cells,
                first: (r as u32, c as u32),
            });
        }
    }
    (labels, components)
}

/// Directed boundary edges keyed by start vertex.
fn boundary_edges(mask: &BinaryMask) -> BTreeMap<Vertex, Vec<Dir>> {
    let mut edges: BTreeMap<Vertex, Vec<Dir>> = BTreeMap::new();
    for r in 0..i64::from(mask.rows()) {
        for c in 0..i64::from(mask.cols()) {
            if !mask.get(r, c) {
                continue;
            }
            if !mask.get(r - 1, c) {
                edges.entry((c, r)).or_default().push((1, 0));
            }
            if !mask.get(r, c + 1) {
                edges.entry((c + 1, r)).or_default().push((0, 1));
            }
            if !mask.get(r + 1, c) {
                edges.entry((c + 1, r + 1)).or_default().push((-1, 0));
            }
            if !mask.get(r, c - 1) {
                edges.entry((c, r + 1)).or_default().push((0, -1));
            }
        }
    }
    edges
}

/// Cell on the left of an edge leaving `v` in direction `d`.
fn left_cell(v: Vertex, d: Dir) -> (i64, i64) {
    let col = (2 * v.0 + d.0 - d.1).div_euclid(2);
    let row = (2 * v.1 + d.1 + d.0).div_euclid(2);
    (row, col)
}

fn trace_loops(mask: &BinaryMask) -> Vec<Vec<Vertex>> {
    let edges = boundary_edges(mask);
    let mut used: HashSet<(Vertex, Dir)> = HashSet::new();
    let mut loops = Vec::new();
    for (&start, dirs) in &edges {
        for &d0 in dirs {
            if used.contains(&(start, d0)) {
                continue;
            }
            let mut ring = Vec::new();
            let (mut v, mut d) = (start, d0);
            loop {
                used.insert((v, d));
                ring.push(v);
                v = (v.0 + d.0, v.1 + d.1);
                let outs = &edges[&v];
                // Two outgoing edges only at saddles: turn right.
                d = if outs.len() == 1 { outs[0] } else { (d.1, -d.0) };
                if (v, d) == (start, d0) {
                    break;
                }
            }
            loops.push(ring);
        }
    }
    loops
}

/// Drops vertices that sit on a straight run and rotates the ring to start
/// at its smallest (y, x) vertex. Input is open; output is closed.
fn canonical_ring(ring: &[Vertex]) -> Vec<Point> {
    let n = ring.len();
    let corners: Vec<Vertex> = (0..n)
        .filter(|&i| {
            let (p, v, q) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
            (v.0 - p.0) * (q.1 - v.1) - (v.1 - p.1) * (q.0 - v.0) != 0
        })
        .map(|i| ring[i])
        .collect();
    let start = (0..corners.len())
        .min_by_key(|&i| (corners[i].1, corners[i].0))
        .unwrap_or(0);
    let mut out: Vec<Point> = corners[start..]
        .iter()
        .chain(&corners[..start])
        .map(|&(x, y)| [x as f64, y as f64])
        .collect();
    out.push(out[0]);
    out
}

/// One annotation per 8-connected true component with at least `min_area`
/// cells, in grid coordinates. `mean_probability` averages `scores` over the
/// component's cells. Sorted by descending area, then by first cell.
pub fn extract_contours(
    mask: &BinaryMask,
    scores: &ProbabilityGrid,
    min_area: usize,
) -> Result<Vec<TumorAnnotation>, HeatmapError> {
    if scores.cols() != mask.cols() || scores.rows() != mask.rows() {
        return Err(HeatmapError::InvalidGrid(format!(
            "mask {}x{} does not match grid {}x{}",
            mask.cols(),
            mask.rows(),
            scores.cols(),
            scores.rows()
        )));
    }
    let (labels, components) = label_components(mask);
    let mut outer: Vec<Option<Vec<Point>>> = vec![None; components.len()];
    let mut holes: Vec<Vec<Vec<Point>>> = vec![Vec::new(); components.len()];
    for ring in trace_loops(mask) {
        let d = (ring[1].0 - ring[0].0, ring[1].1 - ring[0].1);
        let (r, c) = left_cell(ring[0], d);
        let id = labels[(r * i64::from(mask.cols()) + c) as usize]
            .expect("boundary edge borders a tumor cell");
        let closed = canonical_ring(&ring);
        if signed_area(&closed) > 0.0 {
            debug_assert!(outer[id].is_none(), "component with two outer rings");
            outer[id] = Some(closed);
        } else {
            holes[id].push(closed);
        }
    }
    let mut found: Vec<(usize, TumorAnnotation)> = components
        .iter()
        .enumerate()
        .filter(|(_, comp)| comp.cells.len() >= min_area)
        .map(|(id, comp)| {
            let mut hs = std::mem::take(&mut holes[id]);
            hs.sort_by(|a, b| (a[0][1], a[0][0]).partial_cmp(&(b[0][1], b[0][0])).unwrap());
            let values: Vec<f64> = comp
                .cells
                .iter()
                .filter_map(|&(r, c)| scores.get(r, c))
                .collect();
            let mean_probability = if values.is_empty() {
                0.0
            } else {
                values.iter().sum::<f64>() / values.len() as f64
            };
            let ring = outer[id].take().expect("every component has an outer ring");
            let area_px = signed_area(&ring) + hs.iter().map(|h| signed_area(h)).sum::<f64>();
            (
                id,
                TumorAnnotation {
                    outer_ring: ring,
                    holes: hs,
                    mean_probability,
                    area_px,
                },
            )
        })
        .collect();
    found.sort_by(|(ia, a), (ib, b)| {
        b.area_px
            .partial_cmp(&a.area_px)
            .unwrap()
            .then(components[*ia].first.cmp(&components[*ib].first))
    });
    Ok(found.into_iter().map(|(_, a)| a).collect())
}

/// Scales grid coordinates to level-0 pixels.
pub fn rescale_to_level0(ann: &TumorAnnotation, tile_size: u32, level_downsample: f64) -> TumorAnnotation {
    let f = f64::from(tile_size) * level_downsample;
    let scale = |ring: &Vec<Point>| ring.iter().map(|p| [p[0] * f, p[1] * f]).collect();
    TumorAnnotation {
        outer_ring: scale(&ann.outer_ring),
        holes: ann.holes.iter().map(scale).collect(),
        mean_probability: ann.mean_probability,
        area_px: ann.area_px * f * f,
    }
}
