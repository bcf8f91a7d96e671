mod common;

use dapt::analysis::{convex_hull, harmonic_mean, hull_area, mean_std, pca_2d};
use dapt::autodiff::{Graph, Tensor};
use dapt::losses;
use dapt::{EncoderConfig, PromptSet};
use proptest::prelude::*;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n)
}

fn normalize(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    v.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn inter(rows: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let w = g.constant(&common::to_tensor(rows));
    let l = losses::inter_dispersion_loss(&mut g, w, 2.0).unwrap();
    g.scalar(l)
}

/// Random orthogonal matrix as a product of Householder reflections.
fn orthogonal(reflectors: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for v in normalize(reflectors) {
        for row in &mut q {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (x, vk) in row.iter_mut().zip(&v) {
                *x -= 2.0 * dot * vk;
            }
        }
    }
    q
}

fn apply(q: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| q.iter().map(|qrow| qrow.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
        .collect()
}

proptest! {
    #[test]
    fn l2_normalize_gives_unit_rows(x in rows(4, 5)) {
        prop_assume!(x.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
        let mut g = Graph::new();
        let v = g.constant(&common::to_tensor(&x));
        let y = g.l2_normalize_rows(v).unwrap();
        for row in g.value(y).chunks(5) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inter_dispersion_ignores_class_order(x in rows(5, 4), rot in 0usize..5) {
        prop_assume!(x.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let u = normalize(&x);
        let mut p = u.clone();
        p.rotate_left(rot);
        p.swap(0, 4);
        prop_assert!((inter(&u) - inter(&p)).abs() < 1e-12);
    }

    #[test]
    fn inter_dispersion_orthogonally_invariant(x in rows(4, 5), refl in rows(3, 5)) {
        prop_assume!(x.iter().chain(&refl).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let u = normalize(&x);
        let q = orthogonal(&refl, 5);
        let ru = normalize(&apply(&q, &u));
        prop_assert!((inter(&u) - inter(&ru)).abs() < 1e-10);
        prop_assert!(inter(&u) > 0.0 && inter(&u) <= 12.0 + 1e-12);
    }

    #[test]
    fn hull_matches_edge_oracle(pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..20)) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a, b]).collect();
        let (area, _) = hull_area(&pts);
        let want = common::oracle::hull_area(&pts);
        prop_assert!((area - want).abs() < 1e-9 * want.max(1.0), "{area} vs {want}");
        for v in convex_hull(&pts) {
            prop_assert!(pts.contains(&v));
        }
    }

    #[test]
    fn hull_area_rotation_and_scale(pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..20),
                                    theta in 0.0..std::f64::consts::TAU, s in 0.1..10.0f64,
                                    dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a, b]).collect();
        let (c, si) = (theta.cos(), theta.sin());
        let moved: Vec<[f64; 2]> = pts.iter().map(|p| [s * (c * p[0] - si * p[1]) + dx, s * (si * p[0] + c * p[1]) + dy]).collect();
        let (a, _) = hull_area(&pts);
        let (b, _) = hull_area(&moved);
        prop_assert!((b - s * s * a).abs() < 1e-9 * (s * s * a).max(1.0));
    }

    #[test]
    fn pca_plane_preserves_within_plane_points(pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..12)) {
        // Points already living in a 2-D subspace of R^4 keep their hull area.
        let lifted: Vec<Vec<f64>> = pts.iter().map(|&(a, b)| vec![a, 0.0, b, 0.0]).collect();
        let plane = pca_2d(&lifted).unwrap();
        let flat: Vec<[f64; 2]> = pts.iter().map(|&(a, b)| [a, b]).collect();
        let (a, _) = hull_area(&flat);
        let (b, _) = hull_area(&plane);
        prop_assert!((a - b).abs() < 1e-8 * a.max(1.0));
    }

    #[test]
    fn prompt_file_round_trip(seed in any::<u64>(), len in 1usize..6, d in 1usize..9) {
        let cfg = EncoderConfig { prompt_len: len, d_model: d, ..EncoderConfig::default() };
        let p = PromptSet::init(&cfg, seed);
        let back = PromptSet::from_bytes(&p.to_bytes()).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_bytes(), p.to_bytes());
    }

    #[test]
    fn truncated_prompt_file_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let p = PromptSet::init(&EncoderConfig::default(), seed);
        let bytes = p.to_bytes();
        prop_assert!(PromptSet::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn harmonic_mean_bounded_by_arithmetic(b in 0.0..=1.0f64, n in 0.0..=1.0f64) {
        let h = harmonic_mean(b, n);
        prop_assert!(h <= (b + n) / 2.0 + 1e-15);
        if b + n > 0.0 {
            prop_assert!((h - 2.0 * b * n / (b + n)).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_values_have_zero_std(x in -1e3..1e3f64, k in 1usize..8) {
        prop_assert_eq!(mean_std(&vec![x; k]), (x, 0.0));
    }

    #[test]
    fn backward_is_deterministic(x in rows(3, 4)) {
        let t = Tensor::from_rows(&x).unwrap();
        let run = || {
            let mut g = Graph::new();
            let v = g.param(&t);
            let s = g.softmax_rows(v).unwrap();
            let r = g.rms_normalize_rows(s).unwrap();
            let y = g.sum(r);
            g.backward(y).unwrap();
            g.grad(v).unwrap().to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
