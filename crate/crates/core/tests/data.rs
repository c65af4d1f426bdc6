use std::f64::consts::PI;

use pflow::data::*;
use pflow::Error;
use rand::{Rng, SeedableRng};

fn direct_mixture_pdf(z: f64) -> f64 {
    [-2.0, 0.0, 2.0].iter().map(|m| (-0.5 * ((z - m) / 0.3f64).powi(2)).exp() / (0.3 * (2.0 * PI).sqrt()) / 3.0).sum()
}

#[test]
fn grid_points_stay_near_centers() {
    let ds = gen_2d("grid", 5000, 3).unwrap();
    assert!(ds.points.data().iter().all(|v| v.abs() <= 2.0 + 3.0 * 0.05 + 0.1));
    let near = (0..ds.len()).filter(|&r| ds.points.row(r).iter().all(|v| (v - v.round()).abs() < 0.2)).count();
    assert!(near as f64 / ds.len() as f64 > 0.99);
}

#[test]
fn circles_have_two_radius_modes() {
    let ds = gen_2d("circles", 4000, 1).unwrap();
    let radii: Vec<f64> = (0..ds.len()).map(|r| ds.points.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let inner = radii.iter().filter(|&&r| (r - 0.5).abs() < 0.15).count();
    let outer = radii.iter().filter(|&&r| (r - 1.0).abs() < 0.15).count();
    let middle = radii.iter().filter(|&&r| (r - 0.75).abs() < 0.05).count();
    assert!(inner > 1800 && outer > 1800, "{inner} {outer}");
    assert!(middle < 40, "{middle}");
}

#[test]
fn generator_preconditions() {
    assert!(matches!(gen_2d("moons", 0, 1), Err(Error::InvalidArgument(_))));
    assert!(matches!(gen_2d("spirals", 10, 1), Err(Error::InvalidArgument(_))));
    for name in GENERATORS_2D {
        let ds = gen_2d(name, 200, 9).unwrap();
        assert_eq!(ds.points.shape(), [200, 2]);
        assert!(ds.points.all_finite());
        assert!(ds.points.max_abs() < 6.0, "{name}");
    }
}

#[test]
fn generation_is_deterministic() {
    for name in GENERATORS_2D {
        let a = to_csv(&gen_2d(name, 300, 5).unwrap()).unwrap();
        let b = to_csv(&gen_2d(name, 300, 5).unwrap()).unwrap();
        let c = to_csv(&gen_2d(name, 300, 6).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
    assert_eq!(to_csv(&gen_vardim_3d(100, 2, 0.01).unwrap()).unwrap(), to_csv(&gen_vardim_3d(100, 2, 0.01).unwrap()).unwrap());
}

#[test]
fn vardim_clean_structure() {
    let ds = gen_vardim_3d(20000, 4, 0.01).unwrap();
    let clean = ds.clean.as_ref().unwrap();
    let rank = ds.true_rank.as_ref().unwrap();
    let mut ones = 0;
    for r in 0..ds.len() {
        let x = clean.row(r);
        assert_eq!(x[2], x[0].sin());
        if x[0].abs() < 1.0 {
            assert_eq!(x[1], 0.0);
        }
        assert_eq!(rank[r], if x[0].abs() <= 1.0 { 1 } else { 2 });
        ones += (rank[r] == 1) as usize;
    }
    // P(|z1| < 1) by Simpson's rule on the mixture density.
    let m = 4000;
    let h = 2.0 / m as f64;
    let p1: f64 = (0..=m).map(|i| {
        let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        w * direct_mixture_pdf(-1.0 + i as f64 * h)
    }).sum::<f64>() * h / 3.0;
    let n = ds.len() as f64;
    let sd = (p1 * (1.0 - p1) / n).sqrt();
    assert!((ones as f64 / n - p1).abs() < 3.0 * sd, "{} vs {p1}", ones as f64 / n);
    let noise: Vec<f64> = ds.points.sub(clean).into_data();
    let var = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    assert!((var.sqrt() - 0.01).abs() < 2e-4);
}

#[test]
fn vardim_curve_density_by_hand() {
    let x = vardim_map(0.5, 1.7);
    let (lp, rank) = true_logpdf_vardim(&x).unwrap();
    assert_eq!(rank, 1);
    let want = direct_mixture_pdf(0.5).ln() - 0.5 * (1.0 + 0.5f64.cos().powi(2)).ln();
    assert!((lp - want).abs() < 1e-13);
}

#[test]
fn vardim_surface_density_by_finite_differences() {
    for (z1, z2) in [(2.0, 0.0), (-1.7, 0.8), (2.4, -1.3)] {
        let x = vardim_map(z1, z2);
        let (lp, rank) = true_logpdf_vardim(&x).unwrap();
        assert_eq!(rank, 2);
        let h = 1e-4;
        let d = |f: &dyn Fn(f64) -> [f64; 3]| -> [f64; 3] {
            let (a, b, c, e) = (f(h), f(-h), f(h / 2.0), f(-h / 2.0));
            let mut out = [0.0; 3];
            for i in 0..3 {
                let coarse = (a[i] - b[i]) / (2.0 * h);
                let fine = (c[i] - e[i]) / h;
                out[i] = (4.0 * fine - coarse) / 3.0;
            }
            out
        };
        let j1 = d(&|t| vardim_map(z1 + t, z2));
        let j2 = d(&|t| vardim_map(z1, z2 + t));
        let dot = |a: &[f64; 3], b: &[f64; 3]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let det = dot(&j1, &j1) * dot(&j2, &j2) - dot(&j1, &j2).powi(2);
        let want = direct_mixture_pdf(z1).ln() - 0.5 * z2 * z2 - 0.5 * (2.0 * PI).ln() - 0.5 * det.ln();
        assert!((lp - want).abs() < 1e-8, "{lp} vs {want}");
        let (mirror, _) = true_logpdf_vardim(&vardim_map(z1, -z2)).unwrap();
        assert_eq!(lp, mirror);
    }
}

#[test]
fn vardim_rejects_points_off_the_manifold() {
    assert!(true_logpdf_vardim(&[0.5, 0.1, 0.5f64.sin()]).is_err());
    assert!(true_logpdf_vardim(&[2.0, 0.0, 0.0]).is_err());
    assert!(true_logpdf_vardim(&[2.0, 0.0]).is_err());
}

#[test]
fn vardim_density_integrates_to_one() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let n = 200_000;
    // Curve part: uniform proposal on [-1, 1], arc-length factor sqrt(1 + cos^2).
    let curve: f64 = (0..n).map(|_| {
        let z1: f64 = rng.random_range(-1.0..1.0);
        let (lp, _) = true_logpdf_vardim(&vardim_map(z1, 0.0)).unwrap();
        lp.exp() * (1.0 + z1.cos().powi(2)).sqrt() * 2.0
    }).sum::<f64>() / n as f64;
    // Surface part: uniform z1 on 1 < |z1| < 4, z2 ~ N(0, 1.5^2); area factor m sqrt(1 + cos^2).
    let surface: f64 = (0..n).map(|_| {
        let a: f64 = rng.random_range(1.0..4.0);
        let z1 = if rng.random::<bool>() { a } else { -a };
        let z2 = 1.5 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let q = (1.0 / 6.0) * (-0.5 * (z2 / 1.5).powi(2)).exp() / (1.5 * (2.0 * PI).sqrt());
        let m = 1.0 - 1.0 / z1.abs();
        let (lp, _) = true_logpdf_vardim(&vardim_map(z1, z2)).unwrap();
        lp.exp() * m * (1.0 + z1.cos().powi(2)).sqrt() / q
    }).sum::<f64>() / n as f64;
    assert!((curve + surface - 1.0).abs() < 0.01, "{curve} + {surface}");
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let ds = gen_vardim_3d(1000, 8, 0.01).unwrap();
    let back = from_csv(&to_csv(&ds).unwrap(), "vardim").unwrap();
    assert_eq!(back.points, ds.points);
    assert_eq!(back.true_logpdf, ds.true_logpdf);
    assert_eq!(back.true_rank, ds.true_rank);
    let text = String::from_utf8(to_csv(&ds).unwrap()).unwrap();
    assert!(text.starts_with("x1,x2,x3,true_logpdf,true_rank\n"));
    let two = gen_2d("moons", 50, 1).unwrap();
    let text = String::from_utf8(to_csv(&two).unwrap()).unwrap();
    assert!(text.starts_with("x1,x2\n"));
    let first = text.lines().nth(1).unwrap().split(',').next().unwrap().to_owned();
    let mantissa = first.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
    assert_eq!(mantissa.len(), 17);
}

#[test]
fn split_sizes() {
    let ds = gen_2d("moons", 1000, 2).unwrap();
    let (a, b) = ds.split(0.7).unwrap();
    assert_eq!((a.len(), b.len()), (700, 300));
    assert_eq!(a.points.row(0), ds.points.row(0));
    assert_eq!(b.points.row(0), ds.points.row(700));
}

#[test]
fn files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_vardim_3d(100, 1, 0.01).unwrap();
    let m = split_and_write(&ds, 0.7, dir.path()).unwrap();
    assert_eq!((m.n, m.n_train, m.n_test), (100, 70, 30));
    assert_eq!(m.files, ["train.csv", "train_clean.csv", "test.csv", "test_clean.csv"]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    for k in ["name", "n", "seed", "noise_sigma", "columns"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    let test = read(&dir.path().join("test.csv")).unwrap();
    assert_eq!(test.name, "vardim");
    assert_eq!(test.noise_sigma, 0.01);
    assert_eq!(test.points, ds.split(0.7).unwrap().1.points);
    let clean = read(&dir.path().join("test_clean.csv")).unwrap();
    assert_eq!(&clean.points, ds.split(0.7).unwrap().1.clean.as_ref().unwrap());
}

#[test]
fn read_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(read(&dir.path().join("missing.csv")), Err(Error::Io(_))));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert!(matches!(read(&bad), Err(Error::Format(_))));
    std::fs::write(&bad, "x1,x2\n1,oops\n").unwrap();
    assert!(matches!(read(&bad), Err(Error::Format(_))));
}
