//! Randomized audit of the contour identities on explicit Jacobians.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gram;
use super::partition::{Partition, Tree};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CookbookRow {
    pub claim: String,
    pub trials: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

struct Acc {
    claim: &'static str,
    tolerance: f64,
    trials: usize,
    worst: f64,
}

impl Acc {
    fn new(claim: &'static str, tolerance: f64) -> Self {
        Acc { claim, tolerance, trials: 0, worst: 0.0 }
    }

    /// Records a violation; NaN counts as infinitely bad.
    fn push(&mut self, v: f64) {
        self.trials += 1;
        self.worst = if v.is_nan() { f64::INFINITY } else { self.worst.max(v) };
    }

    fn row(&self) -> CookbookRow {
        CookbookRow { claim: self.claim.into(), trials: self.trials, max_violation: self.worst, tolerance: self.tolerance, pass: self.trials > 0 && self.worst <= self.tolerance }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    linalg::qr(&gaussian(rng, n, n)).0
}

/// Random partition of `0..m` into `blocks` nonempty sets.
fn random_partition(rng: &mut ChaCha8Rng, m: usize, blocks: usize) -> Partition {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    let mut cuts: Vec<usize> = (1..m).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(blocks - 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(blocks);
    let mut start = 0;
    for c in cuts.into_iter().chain([m]) {
        let mut b = idx[start..c].to_vec();
        b.sort_unstable();
        out.push(b);
        start = c;
    }
    Partition::new(out, m).expect("constructed partition is valid")
}

/// Random binary tree over `n` leaves.
fn random_tree(rng: &mut ChaCha8Rng, mut nodes: Vec<Tree>) -> Tree {
    while nodes.len() > 1 {
        let i = rng.random_range(0..nodes.len() - 1);
        let r = nodes.remove(i + 1);
        let l = nodes.remove(i);
        nodes.insert(i, Tree::node(l, r));
    }
    nodes.pop().expect("at least one leaf")
}

/// `J = U diag(sigma) blockdiag(V_k)^T`: columns in different blocks are
/// orthogonal.
fn block_orthogonal(rng: &mut ChaCha8Rng, p: &Partition) -> Tensor<f64> {
    let m = p.dim();
    let u = orthogonal(rng, m);
    let mut v = Tensor::zeros(m, m);
    for b in p.blocks() {
        let q = orthogonal(rng, b.len());
        for (a, &i) in b.iter().enumerate() {
            for (c, &j) in b.iter().enumerate() {
                v[(i, j)] = q[(a, c)];
            }
        }
    }
    let sigma: Vec<f64> = (0..m).map(|_| rng.random_range(0.3..3.0)).collect();
    u.matmul(&Tensor::diag(&sigma)).matmul(&v.transpose())
}

/// Runs every audit with `trials` random Jacobians of shape `n x m`,
/// `1 <= m <= n <= max_dim` (`m >= 2` where two blocks are needed).
pub fn cookbook_check(trials: usize, max_dim: usize, seed: u64) -> Vec<CookbookRow> {
    let max_dim = max_dim.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c12 = Acc::new("pmi_det_vs_projection", 1e-8);
    let mut c67 = Acc::new("pmi_hat_det_vs_projection", 1e-8);
    let mut c3 = Acc::new("pmi_nonneg", 1e-10);
    let mut c35 = Acc::new("partition_pmi_nonneg", 1e-10);
    let mut c8 = Acc::new("pmi_hat_nonpos", 1e-10);
    let mut c85 = Acc::new("partition_pmi_hat_nonpos", 1e-10);
    let mut tree = Acc::new("tree_independence", 1e-10);
    let mut c5 = Acc::new("orthogonal_blocks_zero_pmi", 1e-10);
    let mut c5c = Acc::new("zero_pmi_orthogonal_spans", 1e-8);
    let mut c11 = Acc::new("block_orthogonal_both_zero", 1e-8);
    let mut c11s = Acc::new("shear_both_nonzero", 0.0);
    let mut c45 = Acc::new("zero_pmi_block_diagonal_gram", 1e-8);
    for _ in 0..trials {
        let n = rng.random_range(2..=max_dim);
        let m = rng.random_range(2..=n);
        let j = gaussian(&mut rng, n, m);
        // G: the exact inverse when square, an unrelated full-row-rank map otherwise.
        let g = if n == m { linalg::inverse(&j) } else { gaussian(&mut rng, m, n) };
        let blocks = rng.random_range(2..=m);
        let p = random_partition(&mut rng, m, blocks);
        let s = p.blocks()[0].clone();
        let t = p.blocks()[1].clone();

        let det = gram::pmi_det(&j, &s, &t).expect("disjoint");
        let proj = gram::pmi_projection(&j, &s, &t).expect("disjoint");
        c12.push((det - proj).abs());
        c3.push(-det);
        let hdet = gram::pmi_hat_det(&g, &s, &t).expect("disjoint");
        let hproj = gram::pmi_hat_projection(&g, &s, &t).expect("disjoint");
        c67.push((hdet - hproj).abs());
        c8.push(hdet);
        c35.push(-gram::partition_pmi_of(&j, &p));
        c85.push(gram::partition_pmi_hat_of(&g, &p));

        if p.len() >= 2 {
            let leaves: Vec<Tree> = (0..p.len()).map(Tree::Leaf).collect();
            let t1 = random_tree(&mut rng, leaves.clone());
            let t2 = Tree::right_leaning(p.len());
            let sum = |tr: &Tree| gram::tree_terms(&j, &p, tr).expect("valid tree").iter().map(|x| x.2).sum::<f64>();
            tree.push((sum(&t1) - sum(&t2)).abs().max((sum(&t1) - gram::partition_pmi_of(&j, &p)).abs()));
        }

        // Orthogonal column spaces for s and t: build J_t inside the
        // complement of span(J_s).
        let js = gaussian(&mut rng, n, s.len().min(n - 1));
        let q = linalg::qr(&Tensor::concat_cols(&[&js, &gaussian(&mut rng, n, n - js.cols())])).0;
        let kt = rng.random_range(1..=n - js.cols());
        let basis = q.slice_cols(js.cols(), js.cols() + kt);
        let jt = basis.matmul(&gaussian(&mut rng, kt, kt));
        let jo = Tensor::concat_cols(&[&js, &jt]);
        let ss: Vec<usize> = (0..js.cols()).collect();
        let tt: Vec<usize> = (js.cols()..jo.cols()).collect();
        let v = gram::pmi_det(&jo, &ss, &tt).expect("disjoint");
        c5.push(v.abs());
        if v <= 1e-10 {
            let qs = linalg::qr(&js).0;
            let qt = linalg::qr(&jt).0;
            c5c.push(qs.transpose().matmul(&qt).max_abs());
        }

        let sq = rng.random_range(2..=max_dim);
        let nb = rng.random_range(2..=sq);
        let ps = random_partition(&mut rng, sq, nb);
        let jb = block_orthogonal(&mut rng, &ps);
        let gb = linalg::inverse(&jb);
        let ip = gram::partition_pmi_of(&jb, &ps);
        let ihp = gram::partition_pmi_hat_of(&gb, &ps);
        c11.push(ip.abs().max(ihp.abs()));
        let gram_m = jb.transpose().matmul(&jb);
        let scale = gram_m.frobenius();
        let mut off: f64 = 0.0;
        for (a, ba) in ps.blocks().iter().enumerate() {
            for bb in ps.blocks().iter().skip(a + 1) {
                for &i in ba {
                    for &k in bb {
                        off = off.max(gram_m[(i, k)].abs());
                    }
                }
            }
        }
        if ip <= 1e-10 {
            c45.push(off / scale);
        }
        // Shear: mix the first column of block 1 into block 0 until it
        // dominates.
        let mut js = jb.clone();
        let (a0, b0) = (ps.blocks()[0][0], ps.blocks()[1][0]);
        let c = 3.0 * (jb.col(a0).iter().map(|v| v * v).sum::<f64>() / jb.col(b0).iter().map(|v| v * v).sum::<f64>()).sqrt();
        for r in 0..sq {
            js[(r, a0)] += c * jb[(r, b0)];
        }
        let gs = linalg::inverse(&js);
        let ips = gram::partition_pmi_of(&js, &ps);
        let ihs = gram::partition_pmi_hat_of(&gs, &ps);
        c11s.push(if ips > 0.1 && -ihs > 0.1 { 0.0 } else { 0.1 - ips.min(-ihs) });
    }
    [c12, c67, c3, c35, c8, c85, tree, c5, c5c, c11, c11s, c45].iter().map(Acc::row).collect()
}
