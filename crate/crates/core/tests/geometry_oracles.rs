use fibresr::geometry::{generate_layout, label_voronoi, pixel_centre, triangulate};
use fibresr::{FibreLayout, Point};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_labels(pos: &[Point], w: usize, h: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let c = pixel_centre(x, y);
            let mut best = (f64::INFINITY, 0u32);
            for (i, p) in pos.iter().enumerate() {
                let d = (p.x - c.x).powi(2) + (p.y - c.y).powi(2);
                if d < best.0 {
                    best = (d, i as u32);
                }
            }
            out.push(best.1);
        }
    }
    out
}

/// Whether `d` lies strictly inside the circumcircle of (a, b, c), exact.
fn strictly_inside(a: Point, b: Point, c: Point, d: Point) -> bool {
    let c_ = |p: Point| robust::Coord { x: p.x, y: p.y };
    let o = robust::orient2d(c_(a), c_(b), c_(c));
    let s = robust::incircle(c_(a), c_(b), c_(c), c_(d));
    if o > 0.0 {
        s > 0.0
    } else {
        s < 0.0
    }
}

fn assert_delaunay(pos: &[Point], tris: &[[usize; 3]]) {
    assert!(!tris.is_empty());
    for t in tris {
        for (i, &p) in pos.iter().enumerate() {
            if t.contains(&i) {
                continue;
            }
            assert!(
                !strictly_inside(pos[t[0]], pos[t[1]], pos[t[2]], p),
                "fibre {i} inside circumcircle of {t:?}"
            );
        }
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h)))
        .collect()
}

#[test]
fn default_density_layout_statistics() {
    for seed in 0..5 {
        let l = generate_layout(64, 64, 1.0 / 7.0, 0.2, seed).unwrap();
        let n = l.fibre_count();
        assert!((520..=650).contains(&n), "seed {seed}: {n} fibres");
        let mean = 4096.0 / n as f64;
        assert!((mean - 7.0).abs() <= 0.5, "mean cell size {mean}");
        assert_eq!(l.cell_sizes().iter().sum::<usize>(), 4096);
    }
}

#[test]
fn cell_histogram_matches_exhaustive_scan() {
    let l = generate_layout(16, 16, 0.25, 0.0, 0).unwrap();
    let brute = brute_labels(l.positions(), 16, 16);
    let mut hist = vec![0usize; l.fibre_count()];
    for &b in &brute {
        hist[b as usize] += 1;
    }
    assert_eq!(hist, l.cell_sizes());
}

#[test]
fn unit_square_two_triangles() {
    let sq = vec![
        Point::new(0.0, 0.0),
        Point::new(1.0, 0.0),
        Point::new(1.0, 1.0),
        Point::new(0.0, 1.0),
    ];
    let t = triangulate(&sq).unwrap();
    assert_eq!(t.len(), 2);
    assert_delaunay(&sq, &t);
}

#[test]
fn twenty_random_points_are_delaunay() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let pts = random_points(&mut rng, 20, 10.0, 10.0);
        assert_delaunay(&pts, &triangulate(&pts).unwrap());
    }
}

#[test]
fn triangle_count_matches_euler() {
    // T = 2n - 2 - h for a triangulation of n points with h on the hull
    let sq: Vec<Point> = (0..5)
        .flat_map(|y| (0..5).map(move |x| Point::new(x as f64, y as f64)))
        .collect();
    let t = triangulate(&sq).unwrap();
    assert_eq!(t.len(), 2 * 25 - 2 - 16);
    assert_delaunay(&sq, &t);
}

#[test]
fn interpolate_constants_everywhere() {
    let l = generate_layout(24, 20, 0.2, 0.3, 8).unwrap();
    let img = l.interpolate(&vec![0.37; l.fibre_count()]).unwrap();
    assert!(img.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
}

#[test]
fn interpolate_hand_barycentric() {
    // fibres at (0,0), (4,0), (0,4) expressed on a 5x5 grid; pixel (1,1) has
    // centre (1.5,1.5) => weights (0.25, 0.375, 0.375)
    let l = FibreLayout::new(
        vec![
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(0.0, 4.0),
        ],
        5,
        5,
    )
    .unwrap();
    let img = l.interpolate(&[0.0, 1.0, 1.0]).unwrap();
    assert!((img.get(1, 1) - 0.75).abs() < 1e-7);
    // (1.5, 2.5) is on the hypotenuse x + y = 4: weights (0, 0.375, 0.625)
    assert!((img.get(1, 2) - 1.0).abs() < 1e-7);
}

#[test]
fn interpolation_reproduces_vertex_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // fibres on pixel centres so that vertex values are sampled directly
    let mut cells: Vec<(usize, usize)> =
        (0..24).flat_map(|y| (0..24).map(move |x| (x, y))).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.gen_range(0..=i));
    }
    cells.truncate(60);
    let pos: Vec<Point> = cells.iter().map(|&(x, y)| pixel_centre(x, y)).collect();
    let l = FibreLayout::new(pos, 24, 24).unwrap();
    let vals: Vec<f64> = (0..60).map(|_| rng.gen()).collect();
    let img = l.interpolate(&vals).unwrap();
    for (i, &(x, y)) in cells.iter().enumerate() {
        assert!((img.get(x, y) as f64 - vals[i]).abs() < 1e-6);
    }
}

#[test]
fn degenerate_layout_is_rejected_by_generator() {
    assert!(generate_layout(8, 8, 0.02, 0.0, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn voronoi_equals_exhaustive(seed in any::<u64>(), w in 1usize..=32, h in 1usize..=32, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, n, w as f64, h as f64);
        let (labels, sizes) = label_voronoi(&pts, w, h).unwrap();
        prop_assert_eq!(&labels, &brute_labels(&pts, w, h));
        prop_assert_eq!(sizes.iter().sum::<usize>(), w * h);
    }

    #[test]
    fn delaunay_order_independent(seed in any::<u64>(), n in 3usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, n, 16.0, 16.0);
        let t = triangulate(&pts).unwrap();
        assert_delaunay(&pts, &t);
        let perm: Vec<usize> = (0..n).rev().collect();
        let shuffled: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
        let mut back: Vec<[usize; 3]> = triangulate(&shuffled)
            .unwrap()
            .into_iter()
            .map(|t| {
                let mut v = t.map(|i| perm[i]);
                v.sort_unstable();
                v
            })
            .collect();
        back.sort_unstable();
        prop_assert_eq!(t, back);
    }

    #[test]
    fn interpolate_is_linear_and_convex(seed in any::<u64>(), alpha in -2.0f64..2.0) {
        let l = generate_layout(20, 20, 0.15, 0.3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let v1: Vec<f64> = (0..l.fibre_count()).map(|_| rng.gen()).collect();
        let v2: Vec<f64> = (0..l.fibre_count()).map(|_| rng.gen()).collect();
        let sum: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + alpha * b).collect();
        let (i1, i2, is) = (l.interpolate(&v1).unwrap(), l.interpolate(&v2).unwrap(), l.interpolate(&sum).unwrap());
        for k in 0..400 {
            let lin = i1.data()[k] as f64 + alpha * i2.data()[k] as f64;
            prop_assert!((is.data()[k] as f64 - lin).abs() < 1e-6);
            prop_assert!(i1.data()[k] >= 0.0 && i1.data()[k] <= 1.0);
        }
    }
}
