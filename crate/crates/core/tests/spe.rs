use proptest::prelude::*;
use th2_core::spe::{spe_grid, spe_interpolate, SpeTable};
use th2_core::SplitMix64;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Angle between two vectors via the stable atan2 form.
fn angle(a: &[f64], b: &[f64]) -> f64 {
    let ub: Vec<f64> = b.iter().map(|v| v / norm(b)).collect();
    let along = dot(a, &ub);
    let perp: Vec<f64> = a.iter().zip(&ub).map(|(x, u)| x - along * u).collect();
    norm(&perp).atan2(along)
}

/// Rotation-in-the-plane construction of the great-circle point at `t`:
/// orthonormal basis (u, v) of span{e0, e1}, point = s·(cos tθ · u + sin tθ · v).
fn oracle(e0: &[f64], e1: &[f64], t: f64) -> Vec<f64> {
    let s = (e0.len() as f64).sqrt();
    let u: Vec<f64> = e0.iter().map(|x| x / norm(e0)).collect();
    let w: Vec<f64> = e1.iter().map(|x| x / norm(e1)).collect();
    let c = dot(&u, &w);
    let r: Vec<f64> = w.iter().zip(&u).map(|(w, u)| w - c * u).collect();
    let v: Vec<f64> = r.iter().map(|x| x / norm(&r)).collect();
    let theta = norm(&r).atan2(c);
    u.iter()
        .zip(&v)
        .map(|(a, b)| s * ((t * theta).cos() * a + (t * theta).sin() * b))
        .collect()
}

fn random_vec(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

#[test]
fn matches_rotation_oracle_and_angle_is_linear() {
    let mut rng = SplitMix64::new(21);
    for _ in 0..50 {
        let dh = 2 + rng.below(15) as usize;
        let e0 = random_vec(dh, &mut rng);
        let e1 = random_vec(dh, &mut rng);
        let theta = angle(&e0, &e1);
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let e = spe_interpolate(&e0, &e1, t).unwrap();
            let o = oracle(&e0, &e1, t);
            for (a, b) in e.iter().zip(&o) {
                assert!((a - b).abs() < 1e-12, "oracle mismatch {a} vs {b}");
            }
            assert!((angle(&e, &e0) - t * theta).abs() < 1e-9);
            assert!((norm(&e) - (dh as f64).sqrt()).abs() < 1e-9);
        }
    }
}

#[test]
fn grid_row_components_hit_endpoints() {
    let mut rng = SplitMix64::new(5);
    let table = SpeTable::random(12, 3, &mut rng).unwrap();
    let r0 = table.row_embedding(0.0).unwrap();
    let r1 = table.row_embedding(1.0).unwrap();
    // rows=2 grid: cell (i, j) = row(i) + col(j)
    let g = spe_grid(&table, 2, 3).unwrap();
    let c1 = table.col_embedding(0.5).unwrap();
    for k in 0..12 {
        assert_eq!(g.row(1)[k], r0[k] + c1[k]);
        assert_eq!(g.row(4)[k], r1[k] + c1[k]);
    }
    for h in 0..3 {
        assert!((norm(&r0[h * 4..h * 4 + 4]) - 2.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn per_head_norms_hold_on_any_grid(seed in any::<u64>(), rows in 1usize..10, cols in 1usize..10, heads in 1usize..5) {
        let mut rng = SplitMix64::new(seed);
        let dh = 2 + rng.below(6) as usize;
        let table = SpeTable::random(dh * heads, heads, &mut rng).unwrap();
        let g = spe_grid(&table, rows, cols).unwrap();
        prop_assert_eq!(g.shape(), &[rows * cols, dh * heads]);
        for i in 0..rows {
            let t = if rows == 1 { 0.5 } else { i as f64 / (rows - 1) as f64 };
            let r = table.row_embedding(t).unwrap();
            for h in 0..heads {
                prop_assert!((norm(&r[h * dh..(h + 1) * dh]) - (dh as f64).sqrt()).abs() < 1e-9);
            }
        }
    }
}
