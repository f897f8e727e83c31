//! Fibre layouts and the two geometric primitives built on them: Voronoi
//! labelling of the pixel grid and Delaunay-based linear interpolation from
//! fibre centres to pixel centres.
//!
//! Pixel `(x, y)` is sampled at its centre `(x + 0.5, y + 0.5)`. Voronoi
//! ties go to the lowest fibre index. Pixels outside the convex hull of the
//! fibre centres take the value of their nearest fibre.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use robust::Coord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn coord(self) -> Coord<f64> {
        Coord {
            x: self.x,
            y: self.y,
        }
    }
}

#[inline]
pub fn pixel_centre(x: usize, y: usize) -> Point {
    Point::new(x as f64 + 0.5, y as f64 + 0.5)
}

#[inline]
fn dist2(a: Point, b: Point) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    dx * dx + dy * dy
}

/// Interpolation weights of one pixel: up to three (fibre, weight) pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PixelWeights([(u32, f64); 3]);

/// Fibre centres over a pixel grid, with the Voronoi labelling, cell sizes,
/// Delaunay triangulation and per-pixel interpolation weights precomputed.
/// Immutable once built.
#[derive(Debug, Clone)]
pub struct FibreLayout {
    positions: Vec<Point>,
    width: usize,
    height: usize,
    cell_label: Arc<[u32]>,
    cell_size: Vec<usize>,
    triangles: Vec<[usize; 3]>,
    weights: Vec<PixelWeights>,
}

#[derive(Serialize, Deserialize)]
struct LayoutFile {
    width: usize,
    height: usize,
    positions: Vec<[f64; 2]>,
}

impl FibreLayout {
    /// Builds a layout from fibre centres. Positions must be pairwise
    /// distinct and inside `[0, width) × [0, height)`. With fewer than three
    /// or only collinear fibres the triangulation is empty and interpolation
    /// falls back to nearest-fibre values everywhere.
    pub fn new(positions: Vec<Point>, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "layout grid must be non-empty".into(),
            ));
        }
        for (i, p) in positions.iter().enumerate() {
            let inside = p.x.is_finite()
                && p.y.is_finite()
                && p.x >= 0.0
                && p.y >= 0.0
                && p.x < width as f64
                && p.y < height as f64;
            if !inside {
                return Err(Error::InvalidArgument(format!(
                    "fibre {i} at ({}, {}) lies outside the {width}x{height} grid",
                    p.x, p.y
                )));
            }
        }
        if positions.is_empty() {
            return Err(Error::InvalidArgument(
                "a layout needs at least one fibre".into(),
            ));
        }
        check_distinct(&positions, &lexicographic_order(&positions))?;
        let triangles = match triangulate(&positions) {
            Ok(t) => t,
            Err(Error::DegenerateTriangulation(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let (cell_label, cell_size) = label_voronoi(&positions, width, height)?;
        let weights = interpolation_weights(&positions, &triangles, &cell_label, width, height);
        Ok(FibreLayout {
            positions,
            width,
            height,
            cell_label: cell_label.into(),
            cell_size,
            triangles,
            weights,
        })
    }

    /// Like [`FibreLayout::new`] but drops fibres whose Voronoi cell contains
    /// no pixel centre, so every remaining fibre sees at least one pixel.
    pub fn new_pruned(positions: Vec<Point>, width: usize, height: usize) -> Result<Self> {
        let (_, sizes) = label_voronoi(&positions, width, height)?;
        let kept: Vec<Point> = positions
            .into_iter()
            .zip(&sizes)
            .filter(|(_, &s)| s > 0)
            .map(|(p, _)| p)
            .collect();
        FibreLayout::new(kept, width, height)
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn fibre_count(&self) -> usize {
        self.positions.len()
    }

    /// Voronoi cell (fibre index) of every pixel, row-major.
    pub fn cell_labels(&self) -> &Arc<[u32]> {
        &self.cell_label
    }

    pub fn cell_label(&self, x: usize, y: usize) -> usize {
        self.cell_label[y * self.width + x] as usize
    }

    pub fn cell_sizes(&self) -> &[usize] {
        &self.cell_size
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Fibres whose centres lie inside the rectangle, shifted to the crop's
    /// origin. Fibres with empty cells in the crop are dropped.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<FibreLayout> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds layout {}x{}",
                self.width, self.height
            )));
        }
        let (fx, fy) = (x0 as f64, y0 as f64);
        let inside: Vec<Point> = self
            .positions
            .iter()
            .filter(|p| p.x >= fx && p.y >= fy && p.x < fx + w as f64 && p.y < fy + h as f64)
            .map(|p| Point::new(p.x - fx, p.y - fy))
            .collect();
        FibreLayout::new_pruned(inside, w, h)
    }

    /// Linear interpolation of per-fibre values onto the pixel grid.
    pub fn interpolate(&self, values: &[f64]) -> Result<Image> {
        if values.len() != self.fibre_count() {
            return Err(Error::LengthMismatch {
                context: "interpolate values",
                expected: self.fibre_count(),
                found: values.len(),
            });
        }
        let data = self
            .weights
            .iter()
            .map(|PixelWeights(w)| {
                w.iter()
                    .map(|&(k, wk)| wk * values[k as usize])
                    .sum::<f64>() as f32
            })
            .collect();
        Image::new(self.width, self.height, data)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LayoutFile {
            width: self.width,
            height: self.height,
            positions: self.positions.iter().map(|p| [p.x, p.y]).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses the layout file format; labels and triangles are recomputed.
    pub fn from_json(text: &str) -> Result<FibreLayout> {
        let file: LayoutFile = serde_json::from_str(text)?;
        let positions = file
            .positions
            .into_iter()
            .map(|[x, y]| Point::new(x, y))
            .collect();
        FibreLayout::new(positions, file.width, file.height)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FibreLayout> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FibreLayout::from_json(&text)
    }
}

/// Jittered hexagonal fibre layout with roughly `width · height ·
/// target_density` fibres. At density 1 the lattice degenerates to one fibre
/// per pixel centre. Deterministic given `seed`.
pub fn generate_layout(
    width: usize,
    height: usize,
    target_density: f64,
    jitter: f64,
    seed: u64,
) -> Result<FibreLayout> {
    if width < 8 || height < 8 {
        return Err(Error::InvalidArgument(format!(
            "layout grid {width}x{height} is smaller than 8x8"
        )));
    }
    if !(target_density > 0.0 && target_density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target density {target_density} outside (0, 1]"
        )));
    }
    if !(0.0..=0.5).contains(&jitter) {
        return Err(Error::InvalidArgument(format!(
            "jitter {jitter} outside [0, 0.5]"
        )));
    }
    let mut rng = seed::rng(seed, "layout", 0);
    let (w, h) = (width as f64, height as f64);

    let lattice: Vec<Point> = if target_density >= 1.0 {
        let mut pts = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pts.push(pixel_centre(x, y));
            }
        }
        pts
    } else {
        // hexagonal cell area sqrt(3)/2 · a² = 1 / density
        let pitch = (2.0 / (3f64.sqrt() * target_density)).sqrt();
        let row = pitch * 3f64.sqrt() / 2.0;
        let x0: f64 = rng.gen_range(0.0..pitch);
        let y0: f64 = rng.gen_range(0.0..row);
        let mut pts = Vec::new();
        let mut j = 0usize;
        loop {
            let y = y0 + j as f64 * row;
            if y >= h + pitch {
                break;
            }
            let shift = if j % 2 == 1 { pitch / 2.0 } else { 0.0 };
            let mut x = x0 + shift - pitch;
            while x < w + pitch {
                pts.push(Point::new(x, y - row));
                x += pitch;
            }
            j += 1;
        }
        pts
    };

    let pitch = if target_density >= 1.0 {
        1.0
    } else {
        (2.0 / (3f64.sqrt() * target_density)).sqrt()
    };
    let amp = jitter * pitch;
    let positions: Vec<Point> = lattice
        .into_iter()
        .map(|p| {
            if amp > 0.0 {
                Point::new(
                    p.x + rng.gen_range(-amp..=amp),
                    p.y + rng.gen_range(-amp..=amp),
                )
            } else {
                p
            }
        })
        .filter(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h)
        .collect();
    let layout = FibreLayout::new_pruned(positions, width, height)?;
    if layout.triangles().is_empty() {
        return Err(Error::DegenerateTriangulation(format!(
            "generated layout has {} fibres and no triangle",
            layout.fibre_count()
        )));
    }
    Ok(layout)
}

/// Assigns every pixel centre to its nearest fibre (ties to the lowest
/// index). Returns the row-major labels and per-fibre pixel counts.
pub fn label_voronoi(
    positions: &[Point],
    width: usize,
    height: usize,
) -> Result<(Vec<u32>, Vec<usize>)> {
    if positions.is_empty() {
        return Err(Error::InvalidArgument(
            "Voronoi labelling needs at least one fibre".into(),
        ));
    }
    // uniform bucket grid with about one fibre per bucket
    let area = (width * height) as f64;
    let side = (area / positions.len() as f64).sqrt().max(1.0);
    let gx = ((width as f64 / side).ceil() as usize).max(1);
    let gy = ((height as f64 / side).ceil() as usize).max(1);
    let bucket_of = |p: Point| -> (usize, usize) {
        let bx = ((p.x / side).floor().max(0.0) as usize).min(gx - 1);
        let by = ((p.y / side).floor().max(0.0) as usize).min(gy - 1);
        (bx, by)
    };
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); gx * gy];
    for (i, &p) in positions.iter().enumerate() {
        let (bx, by) = bucket_of(p);
        buckets[by * gx + bx].push(i as u32);
    }

    let mut labels = vec![0u32; width * height];
    let mut sizes = vec![0usize; positions.len()];
    let max_ring = gx.max(gy);
    for y in 0..height {
        for x in 0..width {
            let c = pixel_centre(x, y);
            let (bx, by) = bucket_of(c);
            let mut best = (f64::INFINITY, u32::MAX);
            for r in 0..=max_ring {
                let (rx0, rx1) = (bx as isize - r as isize, bx as isize + r as isize);
                let (ry0, ry1) = (by as isize - r as isize, by as isize + r as isize);
                for yy in ry0..=ry1 {
                    if yy < 0 || yy >= gy as isize {
                        continue;
                    }
                    let on_edge_row = yy == ry0 || yy == ry1;
                    let step = if on_edge_row {
                        1
                    } else {
                        (rx1 - rx0).max(1) as usize
                    };
                    let mut xx = rx0;
                    while xx <= rx1 {
                        if xx >= 0 && xx < gx as isize {
                            for &i in &buckets[yy as usize * gx + xx as usize] {
                                let d = dist2(c, positions[i as usize]);
                                if d < best.0 || (d == best.0 && i < best.1) {
                                    best = (d, i);
                                }
                            }
                        }
                        xx += step as isize;
                    }
                }
                // everything beyond ring r is at least r·side away
                let reach = r as f64 * side;
                if best.1 != u32::MAX && best.0 < reach * reach {
                    break;
                }
            }
            labels[y * width + x] = best.1;
            sizes[best.1 as usize] += 1;
        }
    }
    Ok((labels, sizes))
}

#[derive(Debug, Clone, Copy)]
struct Tri {
    v: [usize; 3],
    /// neighbour across the edge opposite `v[i]`
    n: [Option<usize>; 3],
    alive: bool,
}

#[inline]
fn orient(a: Point, b: Point, c: Point) -> f64 {
    robust::orient2d(a.coord(), b.coord(), c.coord())
}

#[inline]
fn in_circle(a: Point, b: Point, c: Point, d: Point) -> f64 {
    robust::incircle(a.coord(), b.coord(), c.coord(), d.coord())
}

/// Delaunay triangulation by incremental Bowyer–Watson insertion.
///
/// Points are inserted in lexicographic (x, y) order, which fixes how
/// cocircular configurations are split and makes the result independent of
/// the input order. Triangles are returned as sorted index triples in sorted
/// order.
pub fn triangulate(positions: &[Point]) -> Result<Vec<[usize; 3]>> {
    let n = positions.len();
    if n < 3 {
        return Err(Error::DegenerateTriangulation(format!(
            "need at least 3 fibres, got {n}"
        )));
    }
    let order = lexicographic_order(positions);
    check_distinct(positions, &order)?;
    let p0 = positions[order[0]];
    let p1 = positions[order[1]];
    if order[2..]
        .iter()
        .all(|&i| orient(p0, p1, positions[i]) == 0.0)
    {
        return Err(Error::DegenerateTriangulation(
            "all fibres are collinear".into(),
        ));
    }

    let (mut xmin, mut ymin, mut xmax, mut ymax) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for p in positions {
        xmin = xmin.min(p.x);
        ymin = ymin.min(p.y);
        xmax = xmax.max(p.x);
        ymax = ymax.max(p.y);
    }
    let span = (xmax - xmin).max(ymax - ymin).max(1.0);
    let (cx, cy) = ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0);
    let m = 1e4 * span;
    let mut pts: Vec<Point> = order.iter().map(|&i| positions[i]).collect();
    pts.push(Point::new(cx - m, cy - m));
    pts.push(Point::new(cx + m, cy - m));
    pts.push(Point::new(cx, cy + m));

    let mut tris = vec![Tri {
        v: [n, n + 1, n + 2],
        n: [None; 3],
        alive: true,
    }];
    let mut free: Vec<usize> = Vec::new();
    let mut last = 0usize;

    let mut cavity: Vec<usize> = Vec::new();
    let mut in_cavity: Vec<bool> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut boundary: Vec<(usize, usize, Option<usize>)> = Vec::new();

    for pi in 0..n {
        let p = pts[pi];
        let start = locate(&tris, &pts, last, p);

        // cavity: connected triangles whose circumcircle strictly contains p
        cavity.clear();
        in_cavity.resize(tris.len(), false);
        stack.clear();
        stack.push(start);
        in_cavity[start] = true;
        while let Some(t) = stack.pop() {
            cavity.push(t);
            for nb in tris[t].n.iter().flatten() {
                if in_cavity[*nb] {
                    continue;
                }
                let [a, b, c] = tris[*nb].v;
                if in_circle(pts[a], pts[b], pts[c], p) > 0.0 {
                    in_cavity[*nb] = true;
                    stack.push(*nb);
                }
            }
        }

        boundary.clear();
        for &t in &cavity {
            let tri = tris[t];
            for i in 0..3 {
                let outside = tri.n[i].filter(|nb| !in_cavity[*nb]);
                if tri.n[i].is_none() || outside.is_some() {
                    boundary.push((tri.v[(i + 1) % 3], tri.v[(i + 2) % 3], outside));
                }
            }
        }
        for &t in &cavity {
            tris[t].alive = false;
            in_cavity[t] = false;
            free.push(t);
        }

        let mut by_start: HashMap<usize, usize> = HashMap::with_capacity(boundary.len());
        let mut by_end: HashMap<usize, usize> = HashMap::with_capacity(boundary.len());
        let mut created = Vec::with_capacity(boundary.len());
        for &(a, b, outside) in &boundary {
            let tri = Tri {
                v: [a, b, pi],
                n: [None, None, outside],
                alive: true,
            };
            let id = match free.pop() {
                Some(slot) => {
                    tris[slot] = tri;
                    slot
                }
                None => {
                    tris.push(tri);
                    in_cavity.push(false);
                    tris.len() - 1
                }
            };
            if let Some(o) = outside {
                // re-point the outside neighbour's shared edge (b, a)
                let ov = tris[o].v;
                for j in 0..3 {
                    if ov[(j + 1) % 3] == b && ov[(j + 2) % 3] == a {
                        tris[o].n[j] = Some(id);
                    }
                }
            }
            by_start.insert(a, id);
            by_end.insert(b, id);
            created.push(id);
        }
        for &id in &created {
            let [a, b, _] = tris[id].v;
            // edge opposite a is (b, p): shared with the triangle starting at b
            tris[id].n[0] = by_start.get(&b).copied();
            // edge opposite b is (p, a): shared with the triangle ending at a
            tris[id].n[1] = by_end.get(&a).copied();
        }
        last = created[0];
    }

    let mut out: Vec<[usize; 3]> = tris
        .iter()
        .filter(|t| t.alive && t.v.iter().all(|&v| v < n))
        .map(|t| {
            let mut v = [order[t.v[0]], order[t.v[1]], order[t.v[2]]];
            v.sort_unstable();
            v
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

fn lexicographic_order(positions: &[Point]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (positions[a], positions[b]);
        pa.x.total_cmp(&pb.x)
            .then(pa.y.total_cmp(&pb.y))
            .then(a.cmp(&b))
    });
    order
}

fn check_distinct(positions: &[Point], order: &[usize]) -> Result<()> {
    for w in order.windows(2) {
        if positions[w[0]] == positions[w[1]] {
            return Err(Error::DegenerateTriangulation(format!(
                "fibres {} and {} coincide",
                w[0].min(w[1]),
                w[0].max(w[1])
            )));
        }
    }
    Ok(())
}

/// Visibility walk to a triangle containing `p` (closed), falling back to a
/// linear scan.
fn locate(tris: &[Tri], pts: &[Point], start: usize, p: Point) -> usize {
    let mut t = if tris[start].alive {
        start
    } else {
        tris.iter().position(|t| t.alive).expect("live triangle")
    };
    let limit = tris.len() + 16;
    'walk: for _ in 0..limit {
        let tri = &tris[t];
        for i in 0..3 {
            let a = pts[tri.v[(i + 1) % 3]];
            let b = pts[tri.v[(i + 2) % 3]];
            if orient(a, b, p) < 0.0 {
                match tri.n[i] {
                    Some(nb) => {
                        t = nb;
                        continue 'walk;
                    }
                    None => break 'walk,
                }
            }
        }
        return t;
    }
    tris.iter()
        .enumerate()
        .find(|(_, tri)| {
            tri.alive
                && (0..3)
                    .all(|i| orient(pts[tri.v[(i + 1) % 3]], pts[tri.v[(i + 2) % 3]], p) >= 0.0)
        })
        .map(|(i, _)| i)
        .expect("point inside super triangle")
}

/// Barycentric coordinates of `p` in triangle `(a, b, c)`.
pub fn barycentric(a: Point, b: Point, c: Point, p: Point) -> [f64; 3] {
    let det = (b.y - c.y) * (a.x - c.x) + (c.x - b.x) * (a.y - c.y);
    let l1 = ((b.y - c.y) * (p.x - c.x) + (c.x - b.x) * (p.y - c.y)) / det;
    let l2 = ((c.y - a.y) * (p.x - c.x) + (a.x - c.x) * (p.y - c.y)) / det;
    [l1, l2, 1.0 - l1 - l2]
}

fn interpolation_weights(
    positions: &[Point],
    triangles: &[[usize; 3]],
    labels: &[u32],
    width: usize,
    height: usize,
) -> Vec<PixelWeights> {
    const EPS: f64 = 1e-12;
    let mut assigned: Vec<Option<PixelWeights>> = vec![None; width * height];
    for tri in triangles {
        let [a, b, c] = tri.map(|i| positions[i]);
        let xmin = a.x.min(b.x).min(c.x);
        let xmax = a.x.max(b.x).max(c.x);
        let ymin = a.y.min(b.y).min(c.y);
        let ymax = a.y.max(b.y).max(c.y);
        let px0 = (xmin - 0.5).ceil().max(0.0) as usize;
        let py0 = (ymin - 0.5).ceil().max(0.0) as usize;
        let px1 = ((xmax - 0.5).floor() as isize).min(width as isize - 1);
        let py1 = ((ymax - 0.5).floor() as isize).min(height as isize - 1);
        if px1 < 0 || py1 < 0 {
            continue;
        }
        for py in py0..=py1 as usize {
            for px in px0..=px1 as usize {
                let slot = &mut assigned[py * width + px];
                if slot.is_some() {
                    continue;
                }
                let l = barycentric(a, b, c, pixel_centre(px, py));
                if l.iter().all(|&v| v >= -EPS) {
                    let l = l.map(|v| v.max(0.0));
                    let s: f64 = l.iter().sum();
                    *slot = Some(PixelWeights([
                        (tri[0] as u32, l[0] / s),
                        (tri[1] as u32, l[1] / s),
                        (tri[2] as u32, l[2] / s),
                    ]));
                }
            }
        }
    }
    assigned
        .into_iter()
        .zip(labels)
        .map(|(w, &k)| w.unwrap_or(PixelWeights([(k, 1.0), (k, 0.0), (k, 0.0)])))
        .collect()
}
