mod common;

use common::*;
use pflow::contours::*;
use pflow::flows::{ArchSpec, CouplingKind, LayerSpec, Prior};
use pflow::linalg;
use pflow::{Error, FlowStack, Tensor};
use proptest::prelude::*;

const LN_2PI: f64 = 1.8378770664093453;

fn linear(rows: &[Vec<f64>]) -> FlowStack {
    FlowStack::linear(&Tensor::from_rows(rows)).unwrap()
}

fn identity(d: usize) -> FlowStack {
    FlowStack::linear(&Tensor::eye(d)).unwrap()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::row_vector(v)
}

fn orthogonal(n: usize, seed: u64) -> Tensor {
    linalg::qr(&gaussian(n, n, seed)).0
}

#[test]
fn block_columns_of_simple_maps() {
    let j = jacobian_block_cols(&identity(2), &row(&[0.3, -0.2]), &[0]).unwrap();
    assert_eq!(j, Tensor::from_rows(&[vec![1.0], vec![0.0]]));
    let j = jacobian_block_cols(&linear(&[vec![1.0, 1.0], vec![0.0, 1.0]]), &row(&[0.5, 0.5]), &[1]).unwrap();
    assert!(j.max_abs_diff(&Tensor::from_rows(&[vec![1.0], vec![1.0]])) < 1e-15);
    assert!(matches!(jacobian_block_cols(&identity(2), &row(&[0.0, 0.0]), &[]), Err(Error::Partition(_))));
}

#[test]
fn block_columns_concatenate() {
    let s = mixed_stack(4, 3);
    let z = gaussian(1, 4, 4);
    let a = jacobian_block_cols(&s, &z, &[0, 2]).unwrap();
    let b = jacobian_block_cols(&s, &z, &[3]).unwrap();
    let ab = jacobian_block_cols(&s, &z, &[0, 2, 3]).unwrap();
    assert!(ab.max_abs_diff(&Tensor::concat_cols(&[&a, &b])) < 1e-14);
}

#[test]
fn block_rows_invert_columns() {
    let e = jacobian_block_rows(&identity(2), &row(&[1.0, 2.0]), &[1]).unwrap();
    assert_eq!(e, row(&[0.0, 1.0]));
    let s = mixed_stack(3, 5);
    let z = gaussian(1, 3, 6);
    let x = s.forward(&z).unwrap().0;
    let g = jacobian_block_rows(&s, &x, &[0, 1, 2]).unwrap();
    let j = jacobian_block_cols(&s, &z, &[0, 1, 2]).unwrap();
    assert!(g.matmul(&j).max_abs_diff(&Tensor::eye(3)) < 1e-8);
    let pt = evaluate_data(&s, &x).unwrap().remove(0);
    assert!(pt.g_block(&[0, 1, 2]).unwrap().max_abs_diff(pt.g.as_ref().unwrap()) == 0.0);
}

#[test]
fn contour_loglik_closed_forms() {
    let l = contour_loglik(&identity(2), &row(&[0.0, 0.7]), &[0]).unwrap();
    assert!((l + 0.5 * LN_2PI).abs() < 1e-15);
    let s = linear(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
    let l = contour_loglik(&s, &row(&[0.0, 0.0]), &[0]).unwrap();
    assert!((l - (-0.5 * LN_2PI - 3f64.ln())).abs() < 1e-14);
    let s = linear(&[vec![2.0, 0.0], vec![0.0, 5.0]]);
    let lh = contour_loglik_hat(&s, &row(&[0.0, 0.0]), &[1]).unwrap();
    assert!((lh - (-0.5 * LN_2PI + (0.2f64).ln())).abs() < 1e-14);
    let id = identity(3);
    let x = row(&[0.1, -1.0, 2.0]);
    for k in 0..3 {
        let a = contour_loglik(&id, &x, &[k]).unwrap();
        let b = contour_loglik_hat(&id, &x, &[k]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn singular_block_is_an_error() {
    let s = linear(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let mut pt = evaluate_latent(&s, &row(&[0.0, 0.0])).unwrap().remove(0);
    pt.j = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
    assert!(matches!(pt.contour_loglik(&[1]), Err(Error::Degenerate(_))));
}

#[test]
fn decomposition_reconstructs_log_density() {
    for seed in 0..5 {
        let s = mixed_stack(2, seed);
        let x = s.forward(&gaussian(3, 2, seed + 10)).unwrap().0;
        let logp = s.log_prob(&x).unwrap();
        let p = Partition::singletons(2);
        for (r, pt) in evaluate_data(&s, &x).unwrap().iter().enumerate() {
            let total = pt.contour_loglik(&[0]).unwrap() + pt.contour_loglik(&[1]).unwrap() + pt.partition_pmi(&p).unwrap();
            assert!((total - logp[(r, 0)]).abs() < 1e-10, "{total} vs {}", logp[(r, 0)]);
        }
    }
}

#[test]
fn large_batches_match_single_rows() {
    let s = mixed_stack(2, 4);
    let x = s.forward(&gaussian(4500, 2, 5)).unwrap().0;
    let all = evaluate_data(&s, &x).unwrap();
    let logp = s.log_prob(&x).unwrap();
    assert_eq!(all.len(), 4500);
    for r in [0, 2047, 2048, 4095, 4096, 4499] {
        let one = evaluate_data(&s, &x.slice_rows(r, r + 1)).unwrap().remove(0);
        assert!(all[r].j.max_abs_diff(&one.j) < 1e-12);
        assert!((all[r].logpx - logp[(r, 0)]).abs() < 1e-10);
        assert_eq!(all[r].x, one.x);
    }
}

#[test]
fn block_orthogonal_maps_have_equal_hat_quantities() {
    let p = Partition::new(vec![vec![0, 2], vec![1]], 3).unwrap();
    let u = orthogonal(3, 1);
    let q = orthogonal(2, 2);
    let mut v = Tensor::eye(3);
    for (a, &i) in [0, 2].iter().enumerate() {
        for (b, &j) in [0, 2].iter().enumerate() {
            v[(i, j)] = q[(a, b)];
        }
    }
    let a = u.matmul(&Tensor::diag(&[2.0, 0.5, 1.3])).matmul(&v.transpose());
    let s = FlowStack::linear(&a).unwrap();
    let pt = evaluate_data(&s, &row(&[0.3, 0.1, -0.4])).unwrap().remove(0);
    for b in p.blocks() {
        assert!((pt.contour_loglik(b).unwrap() - pt.contour_loglik_hat(b).unwrap()).abs() < 1e-10);
    }
    assert!(pt.partition_pmi(&p).unwrap().abs() < 1e-10);
    assert!(pt.partition_pmi_hat(&p).unwrap().abs() < 1e-10);
}

#[test]
fn pmi_of_simple_maps() {
    assert!(pmi(&identity(2), &row(&[0.2, 0.1]), &[0], &[1]).unwrap().abs() < 1e-15);
    let shear = linear(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
    let v = pmi(&shear, &row(&[0.2, 0.1]), &[0], &[1]).unwrap();
    assert!((v - 0.5 * 2f64.ln()).abs() < 1e-14);
    let j = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
    let brute = 0.5 * (na(&j.select_cols(&[0])).norm_squared().ln() + na(&j.select_cols(&[1])).norm_squared().ln()) - 0.5 * (na(&j).transpose() * na(&j)).determinant().ln();
    assert!((v - brute).abs() < 1e-14);
    assert!(matches!(pmi(&shear, &row(&[0.0, 0.0]), &[0], &[0]), Err(Error::Partition(_))));
}

#[test]
fn pmi_hat_of_simple_maps() {
    assert!(pmi_hat(&identity(2), &row(&[0.2, 0.1]), &[0], &[1]).unwrap().abs() < 1e-15);
    // G = [[1, 0], [1, 1]] is the inverse of A = [[1, 0], [-1, 1]].
    let s = linear(&[vec![1.0, 0.0], vec![-1.0, 1.0]]);
    let x = row(&[0.4, -0.3]);
    let v = pmi_hat(&s, &x, &[0], &[1]).unwrap();
    assert!((v - 0.5 * 0.5f64.ln()).abs() < 1e-14);
    let pt = evaluate_data(&s, &x).unwrap().remove(0);
    assert!((pt.pmi_hat_projection(&[0], &[1]).unwrap() - v).abs() < 1e-14);
    let lh = |b: &[usize]| pt.contour_loglik_hat(b).unwrap();
    assert!((lh(&[0, 1]) - lh(&[0]) - lh(&[1]) - v).abs() < 1e-13);
}

#[test]
fn whole_partition_has_zero_pmi() {
    let s = mixed_stack(3, 8);
    let x = s.forward(&gaussian(1, 3, 9)).unwrap().0;
    let (ip, ihp) = partition_pmi(&s, &x, &Partition::whole(3)).unwrap();
    assert!(ip.abs() < 1e-12 && ihp.abs() < 1e-12);
}

#[test]
fn partition_pmi_signs_on_random_flows() {
    for seed in 0..6 {
        let s = mixed_stack(4, seed);
        let x = s.forward(&gaussian(1, 4, seed + 50)).unwrap().0;
        let (ip, ihp) = partition_pmi(&s, &x, &Partition::singletons(4)).unwrap();
        assert!(ip >= -1e-10 && ihp <= 1e-10, "{ip} {ihp}");
    }
}

#[test]
fn trees_change_terms_not_totals() {
    let s = mixed_stack(4, 21);
    let z = gaussian(1, 4, 22);
    let p = Partition::new(vec![vec![0], vec![1, 3], vec![2]], 4).unwrap();
    let left = tree_decompose(&s, &z, &p.clone().with_tree(Tree::left_leaning(3)).unwrap()).unwrap();
    let right = tree_decompose(&s, &z, &p.clone().with_tree(Tree::right_leaning(3)).unwrap()).unwrap();
    assert_eq!(left.parents.len(), 2);
    assert!((left.parents[0].2 - right.parents[0].2).abs() > 1e-6);
    assert!((left.total() - right.total()).abs() < 1e-10);
    let x = s.forward(&z).unwrap().0;
    let logp = s.log_prob(&x).unwrap().item();
    assert!((left.total() - logp).abs() < 1e-10);
    let two = Partition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
    let d = tree_decompose(&s, &z, &two).unwrap();
    assert!((d.leaves[0] + d.leaves[1] + d.parents[0].2 - logp).abs() < 1e-10);
    assert!((d.parents[0].2 - pmi(&s, &z, &[0, 1], &[2, 3]).unwrap()).abs() < 1e-12);
}

#[test]
fn four_singletons_match_log_prob() {
    let s = mixed_stack(4, 31);
    for seed in 0..4 {
        let z = gaussian(1, 4, seed);
        let x = s.forward(&z).unwrap().0;
        let d = tree_decompose(&s, &z, &Partition::singletons(4)).unwrap();
        assert!((d.total() - s.log_prob(&x).unwrap().item()).abs() < 1e-10);
    }
}

#[test]
fn principal_frame_of_diagonal_map() {
    let s = linear(&[vec![3.0, 0.0], vec![0.0, 1.0]]);
    let f = principal_frame(&s, &row(&[0.5, 0.5])).unwrap();
    assert!((f.values[0] - 9.0).abs() < 1e-12 && (f.values[1] - 1.0).abs() < 1e-12);
    assert!(f.vectors.max_abs_diff(&Tensor::eye(2)) < 1e-12);
}

#[test]
fn principal_frame_matches_svd() {
    let a = gaussian(4, 4, 77);
    let f = principal_frame(&FlowStack::linear(&a).unwrap(), &gaussian(1, 4, 1)).unwrap();
    let svd = na(&a).svd(true, false);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());
    let u = svd.u.unwrap();
    for (i, &k) in order.iter().enumerate() {
        assert!((f.values[i] - svd.singular_values[k].powi(2)).abs() < 1e-9);
        let w = f.vector(i);
        let dot: f64 = (0..4).map(|r| w[r] * u[(r, k)]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9);
    }
    let jjt = na(&a) * na(&a).transpose();
    let w = na(&f.vectors);
    assert!((w.transpose() * &w - nalgebra::DMatrix::identity(4, 4)).abs().max() < 1e-10);
    for i in 0..4 {
        assert!((&jjt * w.column(i) - w.column(i) * f.values[i]).abs().max() < 1e-8);
        let col = w.column(i);
        let big = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(big > 0.0);
    }
}

#[test]
fn principal_frame_of_injective_map() {
    let arch = ArchSpec { latent_dim: 1, data_dim: 3, layers: vec![LayerSpec::Slice { latent_dim: 1, data_dim: 3 }], prior: Prior::StandardNormal };
    let s = FlowStack::new(arch, 0).unwrap();
    let f = principal_frame(&s, &row(&[0.4])).unwrap();
    assert!((f.values[0] - 1.0).abs() < 1e-14 && f.values[1].abs() < 1e-14 && f.values[2].abs() < 1e-14);
    assert!(matches!(contour_loglik_hat(&s, &row(&[0.4, 0.0, 0.0]), &[0]), Err(Error::Unsupported(_))));
    assert!(matches!(jacobian_block_rows(&s, &row(&[0.4, 0.0, 0.0]), &[0]), Err(Error::Unsupported(_))));
    let pt = evaluate_latent(&s, &row(&[0.4])).unwrap().remove(0);
    let r = pt.report(&Partition::whole(1)).unwrap();
    assert!(r.lhat_k.is_none() && r.ihat_p.is_none());
}

#[test]
fn trace_linear_map_is_straight() {
    let s = linear(&[vec![2.0, 0.0], vec![0.0, 1.0]]);
    let path = trace_principal_manifold(&s, &[0.0, 0.0], &[0], 1.0, 0.02).unwrap();
    assert!(path.truncated.is_none());
    assert_eq!(path.points.len(), 51);
    for p in &path.points {
        assert!((p.x[0] - 2.0 * p.t).abs() < 1e-10 && p.x[1].abs() < 1e-12);
        assert!((p.cos - 1.0).abs() < 1e-12);
    }
    assert!(path.off_block_drift() < 1e-12);
}

#[test]
fn trace_step_halving() {
    let arch = ArchSpec::coupling(2, 4, CouplingKind::Affine, NET);
    let s = FlowStack::randomized(arch, 4, 0.3).unwrap();
    let x0 = s.forward(&gaussian(1, 2, 5)).unwrap().0;
    let a = trace_principal_manifold(&s, x0.row(0), &[0], 0.5, 0.02).unwrap();
    let b = trace_principal_manifold(&s, x0.row(0), &[0], 0.5, 0.01).unwrap();
    assert!(a.truncated.is_none() && b.truncated.is_none());
    let d: f64 = a.end().x.iter().zip(&b.end().x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let c = trace_principal_manifold(&s, x0.row(0), &[0], 0.5, 0.04).unwrap();
    let d2: f64 = a.end().x.iter().zip(&c.end().x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(d < 1e-4, "{d}");
    assert!(d2 / d > 10.0, "order check {d2} / {d}");
}

#[test]
fn trace_stops_at_eigenvalue_tie() {
    let path = trace_principal_manifold(&identity(2), &[0.0, 0.0], &[0], 1.0, 0.1).unwrap();
    assert!(path.truncated.is_some());
    assert_eq!(path.points.len(), 1);
    assert!(matches!(trace_principal_manifold(&identity(2), &[0.0, 0.0], &[0, 1], 1.0, 0.1), Err(Error::Unsupported(_))));
}

#[test]
fn similarity_of_identity_is_identity() {
    let m = similarity_matrix(&identity(3), &gaussian(4, 3, 1), &Partition::singletons(3)).unwrap();
    assert!(m.max_abs_diff(&Tensor::eye(3)) < 1e-12, "{m:?}");
}

#[test]
fn similarity_of_orthogonal_columns_is_diagonal() {
    let a = orthogonal(3, 9).matmul(&Tensor::diag(&[0.5, 3.0, 1.5]));
    let m = similarity_matrix(&FlowStack::linear(&a).unwrap(), &gaussian(5, 3, 2), &Partition::singletons(3)).unwrap();
    for r in 0..3 {
        assert!(m[(r, r)] >= 0.99);
        for c in 0..3 {
            assert!(m[(r, c)] <= m[(r, r)] + 1e-12);
        }
    }
}

#[test]
fn manifold_density_selection() {
    let s = identity(2);
    let x = row(&[0.3, -0.2]);
    let p = Partition::singletons(2);
    let md = manifold_corrected_logpdf(&s, &x, &p, 1e-3).unwrap().remove(0);
    assert_eq!(md.selected, vec![0, 1]);
    assert_eq!(md.rank, 2);
    assert!((md.log_pm - s.log_prob(&x).unwrap().item()).abs() < 1e-14);
    let s = linear(&[vec![1.0, 0.0], vec![0.0, 1e-8]]);
    let x = row(&[0.3, 1e-9]);
    let pt = evaluate_data(&s, &x).unwrap().remove(0);
    let md = pt.manifold_corrected(&p, 1e-3).unwrap();
    assert_eq!(md.selected, vec![0]);
    assert_eq!(md.rank, 1);
    assert!((md.log_pm - pt.contour_loglik(&[0]).unwrap()).abs() < 1e-14);
    // A threshold exactly at a stretch includes it.
    let md = pt.manifold_corrected(&p, 1e-8).unwrap();
    assert_eq!(md.selected, vec![0, 1]);
}

#[test]
fn report_json_names() {
    let s = mixed_stack(2, 1);
    let x = s.forward(&gaussian(1, 2, 2)).unwrap().0;
    let r = evaluate_data(&s, &x).unwrap()[0].report(&Partition::singletons(2)).unwrap();
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["I_P", "Ihat_P", "L_k", "Lhat_k", "block_ids", "logpx", "stretch_k"]);
    assert!((r.l_k.iter().sum::<f64>() + r.i_p - r.logpx).abs() < 1e-10);
    let back: ContourReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}

#[test]
fn cookbook_audit_passes() {
    let rows = cookbook_check(300, 6, 11);
    for r in &rows {
        assert!(r.pass, "{r:?}");
        assert!(r.trials > 0);
    }
}

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (2..=max).prop_flat_map(|n| (Just(n), 2..=n)).prop_flat_map(|(n, m)| proptest::collection::vec(-2.0f64..2.0, n * m).prop_map(move |v| Tensor::new(n, m, v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pmi_forms_agree_and_are_nonnegative(j in matrix(6), split in 1usize..6) {
        prop_assume!(linalg::gram_logdet(&j) > -20.0);
        let m = j.cols();
        let k = split.min(m - 1);
        let s: Vec<usize> = (0..k).collect();
        let t: Vec<usize> = (k..m).collect();
        let det = gram::pmi_det(&j, &s, &t).unwrap();
        let proj = gram::pmi_projection(&j, &s, &t).unwrap();
        prop_assert!((det - proj).abs() <= 1e-8 * (1.0 + det.abs()));
        prop_assert!(det >= -1e-10);
        prop_assert!(gram::partition_pmi_of(&j, &Partition::singletons(m)) >= -1e-10);
    }

    #[test]
    fn hat_pmi_is_nonpositive(j in matrix(5)) {
        let g = j.transpose();
        prop_assume!(linalg::gram_logdet(&j) > -20.0);
        let d = g.rows();
        prop_assert!(gram::partition_pmi_hat_of(&g, &Partition::singletons(d)) <= 1e-10);
        prop_assert!(gram::pmi_hat_det(&g, &[0], &(1..d).collect::<Vec<_>>()).unwrap() <= 1e-10);
    }

    #[test]
    fn partition_pmi_is_tree_free(seed in 0u64..1000) {
        let j = gaussian(5, 5, seed);
        let p = Partition::new(vec![vec![0, 4], vec![1], vec![2, 3]], 5).unwrap();
        let a: f64 = gram::tree_terms(&j, &p, &Tree::left_leaning(3)).unwrap().iter().map(|t| t.2).sum();
        let b: f64 = gram::tree_terms(&j, &p, &Tree::node(Tree::Leaf(1), Tree::node(Tree::Leaf(2), Tree::Leaf(0)))).unwrap().iter().map(|t| t.2).sum();
        prop_assert!((a - b).abs() < 1e-10);
        prop_assert!((a - gram::partition_pmi_of(&j, &p)).abs() < 1e-10);
    }
}
