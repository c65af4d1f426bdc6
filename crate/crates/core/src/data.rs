//! Synthetic datasets and their CSV form.
//!
//! The 2D generators (all noise terms are isotropic Gaussian):
//!
//! | name        | construction |
//! |-------------|--------------|
//! | `moons`     | sample `i` on moon `i mod 2`; `t ~ U(0, pi)`; `(cos t, sin t)` or `(1 - cos t, 1/2 - sin t)`, shifted by `(-1/2, -1/4)`; noise 0.05 |
//! | `circles`   | radius 1 or 0.5 (alternating), angle `~ U(0, 2 pi)`; noise 0.05 |
//! | `grid`      | 5 x 5 centers at `{-2, -1, 0, 1, 2}^2`, uniform over centers; std 0.05 |
//! | `pinwheel`  | 5 arms: `(r, s) ~ (N(1, 0.3^2), N(0, 0.1^2))` rotated by `2 pi a / 5 + 0.25 e^r` |
//! | `swissroll` | `t = 1.5 pi (1 + 2u)`, `(t cos t, t sin t) / 5`; noise 0.1 |
//! | `swirl`     | 3 arms: `theta = 3 pi u`, `r = theta / (2 pi)`, angle `theta + 2 pi a / 3`; noise 0.05 |
//! | `caret`     | segments `(-1.5, -1) -> (0, 1) -> (1.5, -1)`, uniform along each; noise 0.05 |
//! | `points`    | 8 Gaussians of std 0.1 centered at radius 2, angles `2 pi k / 8` |
//!
//! The variable-rank 3D set draws `z1` from an equal mixture of
//! `N(-2, 0.3^2)`, `N(0, 0.3^2)`, `N(2, 0.3^2)` and `z2 ~ N(0, 1)`, and maps
//! them to `(z1, z2 max(0, 1 - 1/|z1|), sin z1)`. Points with `|z1| <= 1`
//! lie on a curve (rank 1), the rest on a surface (rank 2).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const GENERATORS_2D: [&str; 8] = ["points", "circles", "caret", "swirl", "grid", "moons", "pinwheel", "swissroll"];

pub const VARDIM: &str = "vardim";

/// Tolerance for a point to count as lying on the variable-rank manifold.
pub const ON_MANIFOLD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `n x d`, `d` in {2, 3}.
    pub points: Tensor<f64>,
    /// Noise-free points, when the generator adds noise to a known manifold.
    pub clean: Option<Tensor<f64>>,
    pub true_logpdf: Option<Vec<f64>>,
    pub true_rank: Option<Vec<u32>>,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn columns(&self) -> Vec<String> {
        let mut c: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        if self.true_logpdf.is_some() {
            c.push("true_logpdf".into());
        }
        if self.true_rank.is_some() {
            c.push("true_rank".into());
        }
        c
    }

    fn rows(&self, r: std::ops::Range<usize>) -> Dataset {
        let idx: Vec<usize> = r.clone().collect();
        Dataset {
            name: self.name.clone(),
            points: self.points.select_rows(&idx),
            clean: self.clean.as_ref().map(|c| c.select_rows(&idx)),
            true_logpdf: self.true_logpdf.as_ref().map(|v| v[r.clone()].to_vec()),
            true_rank: self.true_rank.as_ref().map(|v| v[r].to_vec()),
            seed: self.seed,
            noise_sigma: self.noise_sigma,
        }
    }

    /// First `round(n * train_frac)` rows for training, the rest for testing.
    pub fn split(&self, train_frac: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_frac) {
            return Err(Error::invalid("train fraction must lie in [0, 1]"));
        }
        let k = (self.len() as f64 * train_frac).round() as usize;
        Ok((self.rows(0..k), self.rows(k..self.len())))
    }

    /// Same dataset with the clean points in place of the noisy ones.
    pub fn clean_view(&self) -> Option<Dataset> {
        self.clean.as_ref().map(|c| Dataset { points: c.clone(), clean: None, ..self.clone() })
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    Ok(())
}

fn sample_2d(name: &str, i: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let gauss = |rng: &mut ChaCha8Rng, s: f64| -> f64 { s * rng.sample::<f64, _>(StandardNormal) };
    match name {
        "moons" => {
            let t = rng.random_range(0.0..PI);
            let (x, y) = if i % 2 == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
            (x - 0.5 + gauss(rng, 0.05), y - 0.25 + gauss(rng, 0.05))
        }
        "circles" => {
            let r = if i % 2 == 0 { 1.0 } else { 0.5 };
            let a = rng.random_range(0.0..2.0 * PI);
            (r * a.cos() + gauss(rng, 0.05), r * a.sin() + gauss(rng, 0.05))
        }
        "grid" => {
            let c = rng.random_range(0..25);
            ((c % 5) as f64 - 2.0 + gauss(rng, 0.05), (c / 5) as f64 - 2.0 + gauss(rng, 0.05))
        }
        "pinwheel" => {
            let arm = rng.random_range(0..5);
            let r = 1.0 + gauss(rng, 0.3);
            let s = gauss(rng, 0.1);
            let ang = 2.0 * PI * arm as f64 / 5.0 + 0.25 * r.exp();
            (r * ang.cos() - s * ang.sin(), r * ang.sin() + s * ang.cos())
        }
        "swissroll" => {
            let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
            (t * t.cos() / 5.0 + gauss(rng, 0.1), t * t.sin() / 5.0 + gauss(rng, 0.1))
        }
        "swirl" => {
            let arm = rng.random_range(0..3);
            let th = 3.0 * PI * rng.random::<f64>();
            let r = th / (2.0 * PI);
            let a = th + 2.0 * PI * arm as f64 / 3.0;
            (r * a.cos() + gauss(rng, 0.05), r * a.sin() + gauss(rng, 0.05))
        }
        "caret" => {
            let u = rng.random::<f64>();
            let (x, y) = if rng.random::<bool>() { (-1.5 + 1.5 * u, -1.0 + 2.0 * u) } else { (1.5 * u, 1.0 - 2.0 * u) };
            (x + gauss(rng, 0.05), y + gauss(rng, 0.05))
        }
        "points" => {
            let k = rng.random_range(0..8);
            let a = 2.0 * PI * k as f64 / 8.0;
            (2.0 * a.cos() + gauss(rng, 0.1), 2.0 * a.sin() + gauss(rng, 0.1))
        }
        _ => unreachable!("checked by gen_2d"),
    }
}

/// `n` points from a named 2D generator (see the module table).
pub fn gen_2d(name: &str, n: usize, seed: u64) -> Result<Dataset> {
    if !GENERATORS_2D.contains(&name) {
        return Err(Error::invalid(format!("unknown 2D dataset `{name}`; expected one of {}", GENERATORS_2D.join(", "))));
    }
    check_n(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (x, y) = sample_2d(name, i, &mut rng);
        data.push(x);
        data.push(y);
    }
    Ok(Dataset { name: name.into(), points: Tensor::new(n, 2, data), clean: None, true_logpdf: None, true_rank: None, seed, noise_sigma: 0.0 })
}

const MIX_MEANS: [f64; 3] = [-2.0, 0.0, 2.0];
const MIX_STD: f64 = 0.3;

/// Log density of the `z1` mixture.
pub fn vardim_mixture_logpdf(z1: f64) -> f64 {
    let terms: Vec<f64> = MIX_MEANS.iter().map(|m| -0.5 * ((z1 - m) / MIX_STD).powi(2) - MIX_STD.ln() - 0.5 * (2.0 * PI).ln() - 3f64.ln()).collect();
    let hi = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi + terms.iter().map(|t| (t - hi).exp()).sum::<f64>().ln()
}

/// The variable-rank generative map.
pub fn vardim_map(z1: f64, z2: f64) -> [f64; 3] {
    [z1, z2 * (1.0 - (1.0 / z1).abs()).max(0.0), z1.sin()]
}

/// Draws `(z1, z2)` for the variable-rank set.
pub fn vardim_latents(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m = MIX_MEANS[rng.random_range(0..3)];
            let z1 = Normal::new(m, MIX_STD).expect("valid std").sample(&mut rng);
            let z2: f64 = rng.sample(StandardNormal);
            (z1, z2)
        })
        .collect()
}

/// `n` variable-rank points with ground truth from the clean copies, plus
/// isotropic noise of std `noise_sigma` on the stored points.
pub fn gen_vardim_3d(n: usize, seed: u64, noise_sigma: f64) -> Result<Dataset> {
    check_n(n)?;
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise sigma must be finite and nonnegative"));
    }
    let z = vardim_latents(n, seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    let mut clean = Vec::with_capacity(3 * n);
    let mut noisy = Vec::with_capacity(3 * n);
    let mut lp = Vec::with_capacity(n);
    let mut rank = Vec::with_capacity(n);
    for &(z1, z2) in &z {
        let x = vardim_map(z1, z2);
        let (l, r) = true_logpdf_vardim(&x)?;
        lp.push(l);
        rank.push(r);
        for v in x {
            clean.push(v);
            noisy.push(v + noise_sigma * noise_rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(Dataset {
        name: VARDIM.into(),
        points: Tensor::new(n, 3, noisy),
        clean: Some(Tensor::new(n, 3, clean)),
        true_logpdf: Some(lp),
        true_rank: Some(rank),
        seed,
        noise_sigma,
    })
}

/// Ground-truth log density on the variable-rank manifold and its local
/// dimension. On the curve (`|z1| <= 1`) the density is with respect to arc
/// length, on the surface with respect to area.
pub fn true_logpdf_vardim(x: &[f64]) -> Result<(f64, u32)> {
    if x.len() != 3 {
        return Err(Error::shape(format!("variable-rank points have 3 coordinates, got {}", x.len())));
    }
    let z1 = x[0];
    if !z1.is_finite() || (x[2] - z1.sin()).abs() > ON_MANIFOLD_TOL {
        return Err(Error::invalid(format!("point {x:?} is off the manifold (x3 != sin x1)")));
    }
    let c2 = z1.cos().powi(2);
    if z1.abs() <= 1.0 {
        if x[1].abs() > ON_MANIFOLD_TOL {
            return Err(Error::invalid(format!("point {x:?} is off the manifold (x2 != 0 where |x1| <= 1)")));
        }
        return Ok((vardim_mixture_logpdf(z1) - 0.5 * (1.0 + c2).ln(), 1));
    }
    let m = 1.0 - 1.0 / z1.abs();
    let z2 = x[1] / m;
    let log_phi = -0.5 * z2 * z2 - 0.5 * (2.0 * PI).ln();
    Ok((vardim_mixture_logpdf(z1) + log_phi - m.ln() - 0.5 * (1.0 + c2).ln(), 2))
}

/// Formats a value with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the dataset as CSV: `x1,x2[,x3][,true_logpdf][,true_rank]`.
pub fn to_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ds.columns())?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.points.row(r).iter().map(|&v| fmt_f64(v)).collect();
        if let Some(lp) = &ds.true_logpdf {
            rec.push(fmt_f64(lp[r]));
        }
        if let Some(rk) = &ds.true_rank {
            rec.push(rk[r].to_string());
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Parses a dataset CSV. `name`, `seed` and `noise_sigma` are left at
/// neutral values; the manifest carries them.
pub fn from_csv(bytes: &[u8], name: &str) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let d = header.iter().take_while(|h| h.starts_with('x')).count();
    let expect_x: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    let rest = &header[d..];
    let ok_rest = matches!(rest.iter().map(String::as_str).collect::<Vec<_>>().as_slice(), [] | ["true_logpdf"] | ["true_rank"] | ["true_logpdf", "true_rank"]);
    if !(2..=3).contains(&d) || header[..d] != expect_x[..] || !ok_rest {
        return Err(Error::Format(format!("unexpected header {header:?}; expected x1,x2[,x3][,true_logpdf][,true_rank]")));
    }
    let has_lp = rest.iter().any(|h| h == "true_logpdf");
    let has_rank = rest.iter().any(|h| h == "true_rank");
    let mut pts = Vec::new();
    let mut lp = Vec::new();
    let mut rank = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!("row {} has {} fields, expected {}", line + 1, rec.len(), header.len())));
        }
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|e| Error::Format(format!("row {}, column {}: {e}", line + 1, header[i])));
        for i in 0..d {
            pts.push(num(i)?);
        }
        if has_lp {
            lp.push(num(d)?);
        }
        if has_rank {
            let i = header.len() - 1;
            rank.push(rec[i].trim().parse::<u32>().map_err(|e| Error::Format(format!("row {}, column true_rank: {e}", line + 1)))?);
        }
    }
    let n = pts.len() / d;
    Ok(Dataset {
        name: name.into(),
        points: Tensor::new(n, d, pts),
        clean: None,
        true_logpdf: has_lp.then_some(lp),
        true_rank: has_rank.then_some(rank),
        seed: 0,
        noise_sigma: 0.0,
    })
}

/// Dataset manifest written next to the CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub columns: Vec<String>,
    pub train_frac: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// File names relative to the manifest.
    pub files: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

/// Splits and writes `train.csv`, `test.csv` (plus `*_clean.csv` when clean
/// copies exist) and `manifest.json` into directory `dir`.
pub fn split_and_write(ds: &Dataset, train_frac: f64, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let (train, test) = ds.split(train_frac)?;
    let mut files = Vec::new();
    for (stem, part) in [("train", &train), ("test", &test)] {
        write_atomic(&dir.join(format!("{stem}.csv")), &to_csv(part)?)?;
        files.push(format!("{stem}.csv"));
        if let Some(c) = part.clean_view() {
            write_atomic(&dir.join(format!("{stem}_clean.csv")), &to_csv(&c)?)?;
            files.push(format!("{stem}_clean.csv"));
        }
    }
    let m = Manifest {
        name: ds.name.clone(),
        n: ds.len(),
        seed: ds.seed,
        noise_sigma: ds.noise_sigma,
        columns: ds.columns(),
        train_frac,
        n_train: train.len(),
        n_test: test.len(),
        files,
    };
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(m)
}

/// Reads a dataset CSV. When `path` is a directory, reads its `train.csv`.
/// Name, seed and noise come from a sibling `manifest.json` if present.
pub fn read(path: &Path) -> Result<Dataset> {
    let file: PathBuf = if path.is_dir() { path.join("train.csv") } else { path.to_path_buf() };
    let bytes = std::fs::read(&file)?;
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_owned();
    let mut ds = from_csv(&bytes, &stem)?;
    if let Some(m) = file.parent().map(|p| p.join(MANIFEST)).filter(|p| p.is_file()) {
        let m: Manifest = serde_json::from_slice(&std::fs::read(m)?)?;
        ds.name = m.name;
        ds.seed = m.seed;
        ds.noise_sigma = m.noise_sigma;
    }
    Ok(ds)
}
