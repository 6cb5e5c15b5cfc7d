use proptest::prelude::*;

use splat4d::gaussian::{GaussianBinding, GaussianPrimitive};
use splat4d::linalg::{Quat, Vec3};
use splat4d::scaffold::{deform_transform, ScaffoldGraph, ScaffoldNode};
use splat4d::se3::{dqb, interpolate_pose, se3_exp, se3_log, DualQuat, SE3Pose, Twist};
use splat4d::uncertainty::{overlap_ratio, reweighted_mask, BinaryMask};

fn twist(max_angle: f64) -> impl Strategy<Value = Twist<f64>> {
    (
        prop::array::uniform3(-1.0..1.0f64),
        0.0..max_angle,
        prop::array::uniform3(-2.0..2.0f64),
    )
        .prop_filter_map("degenerate axis", |(a, theta, t)| {
            let axis = Vec3::new(a[0], a[1], a[2]);
            let n = axis.norm();
            (n > 1e-3).then(|| Twist::new(axis.scale(theta / n), Vec3::new(t[0], t[1], t[2])))
        })
}

fn pose() -> impl Strategy<Value = SE3Pose<f64>> {
    twist(3.0).prop_map(|xi| se3_exp(&xi))
}

fn mask(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(any::<bool>(), w * h).prop_map(move |data| BinaryMask { width: w, height: h, data })
}

proptest! {
    #[test]
    fn exp_log_round_trip(xi in twist(3.0)) {
        let back = se3_log(&se3_exp(&xi)).unwrap();
        for (a, b) in back.to_array().iter().zip(xi.to_array()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn dqb_of_one_or_repeated_operand_is_that_operand(p in pose(), w in 0.1..5.0f64, k in 1usize..5) {
        let dq = p.to_dual_quat();
        prop_assert!(dqb(&[w], &[dq]).unwrap().max_abs_diff(&p) < 1e-9);
        let ws = vec![w; k];
        let dqs = vec![dq; k];
        prop_assert!(dqb(&ws, &dqs).unwrap().max_abs_diff(&p) < 1e-9);
        let flipped = DualQuat::new(dq.real.scale(-1.0), dq.dual.scale(-1.0));
        prop_assert!(dqb(&[w, w], &[dq, flipped]).unwrap().max_abs_diff(&p) < 1e-9);
    }

    #[test]
    fn dqb_ignores_operand_order(ps in prop::collection::vec(twist(1.5).prop_map(|xi| se3_exp(&xi)), 2..6), seed in any::<u64>()) {
        // Rotations within 90° of identity share a quaternion hemisphere.
        let ws: Vec<f64> = (0..ps.len()).map(|i| 0.2 + ((seed >> (i * 8)) & 0xff) as f64 / 64.0).collect();
        let dqs: Vec<_> = ps.iter().map(SE3Pose::to_dual_quat).collect();
        let a = dqb(&ws, &dqs).unwrap();
        let mut idx: Vec<usize> = (0..ps.len()).collect();
        idx.rotate_left(1 + seed as usize % (ps.len() - 1));
        let b = dqb(&idx.iter().map(|&i| ws[i]).collect::<Vec<_>>(), &idx.iter().map(|&i| dqs[i]).collect::<Vec<_>>()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn interpolation_hits_both_endpoints(a in pose(), xi in twist(2.5)) {
        let b = a.compose(&se3_exp(&xi));
        let rel = a.inverse().compose(&b);
        prop_assert!(interpolate_pose(&a, &b, 0.0).unwrap().max_abs_diff(&SE3Pose::identity()) < 1e-12);
        prop_assert!(interpolate_pose(&a, &b, 1.0).unwrap().max_abs_diff(&rel) < 1e-9);
    }

    #[test]
    fn deformation_is_identity_at_the_reference_time(
        nodes in prop::collection::vec(prop::collection::vec(pose(), 4), 1..6),
        t_ref in 0usize..4,
        mean in prop::array::uniform3(-1.0..1.0f64),
        radius in 0.2..2.0f64,
    ) {
        let nodes: Vec<_> = nodes.into_iter().map(|traj| ScaffoldNode::new(traj, radius)).collect();
        let graph = ScaffoldGraph::fully_connected(nodes);
        let g = GaussianPrimitive::isotropic(Vec3::new(mean[0], mean[1], mean[2]), 0.05, 0.5, Vec3::new(0.5, 0.5, 0.5));
        for node_index in 0..graph.nodes.len() {
            let b = GaussianBinding { node_index, reference_time: t_ref };
            let xf = deform_transform(&g, &b, &graph, t_ref).unwrap();
            prop_assert!(xf.max_abs_diff(&SE3Pose::identity()) < 1e-9);
        }
    }

    #[test]
    fn rum_contains_mu_and_is_monotone(
        mu in mask(9, 7),
        extra in mask(9, 7),
        cands in prop::collection::vec(mask(9, 7), 0..6),
        d in 0.0..1.0f64,
    ) {
        let rum = reweighted_mask(&mu, &cands, d).unwrap();
        prop_assert!(mu.is_subset_of(&rum));
        let bigger = mu.union(&extra).unwrap();
        prop_assert!(rum.is_subset_of(&reweighted_mask(&bigger, &cands, d).unwrap()));
        let lower = reweighted_mask(&mu, &cands, d * 0.5).unwrap();
        prop_assert!(rum.is_subset_of(&lower));
    }

    #[test]
    fn overlap_is_a_pixel_count_ratio(c in mask(6, 5), m in mask(6, 5)) {
        let n = c.data.iter().filter(|&&x| x).count();
        let both = c.data.iter().zip(&m.data).filter(|(a, b)| **a && **b).count();
        match overlap_ratio(&c, &m) {
            Ok(r) => prop_assert_eq!(r, both as f64 / n as f64),
            Err(_) => prop_assert_eq!(n, 0),
        }
    }
}

#[test]
fn quaternion_sign_does_not_change_the_pose() {
    let q = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), 0.7);
    let t = Vec3::new(0.3, -0.2, 1.0);
    let a = SE3Pose::new(q, t);
    let b = SE3Pose::new(q.scale(-1.0), t);
    assert!(a.max_abs_diff(&b) < 1e-15);
    let (la, lb) = (se3_log(&a).unwrap().to_array(), se3_log(&b).unwrap().to_array());
    assert!(la.iter().zip(lb).all(|(x, y): (&f64, f64)| (x - y).abs() < 1e-12));
}
