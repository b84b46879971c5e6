use proptest::prelude::*;

use kanbench::accounting::{
    flops_diff_identity, flops_kan_formula, flops_measured, flops_mlp_formula, params_introspect, params_kan_formula,
    params_mlp_formula, FlopsConvention,
};
use kanbench::bench::{cl_metrics, match_budgets, upper_envelope, AccuracyMatrix, EnvelopePoint, Orientation};
use kanbench::bspline::{basis_eval, make_knots, SplineSpec};
use kanbench::data::{split_class_incremental, Dataset, Targets};
use kanbench::layers::{ArchSpec, Model};
use kanbench::nn::{ActivationKind, Matrix};

fn brute_envelope(points: &[EnvelopePoint], orientation: Orientation) -> Vec<EnvelopePoint> {
    let better_eq = |a: f64, b: f64| match orientation {
        Orientation::Maximize => a >= b,
        Orientation::Minimize => a <= b,
    };
    let mut keep: Vec<EnvelopePoint> = points
        .iter()
        .filter(|p| {
            !points.iter().any(|q| {
                q.budget <= p.budget
                    && better_eq(q.metric, p.metric)
                    && (q.budget < p.budget || q.metric != p.metric || q.idx < p.idx)
            })
        })
        .copied()
        .collect();
    keep.sort_by(|a, b| a.budget.total_cmp(&b.budget));
    keep
}

fn points() -> impl Strategy<Value = Vec<EnvelopePoint>> {
    prop::collection::vec((0u8..20, 0u8..20), 1..60).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(idx, (b, m))| EnvelopePoint {
                budget: b as f64,
                metric: m as f64 / 4.0,
                idx,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn envelope_matches_domination_scan(pts in points(), maximize in any::<bool>()) {
        let o = if maximize { Orientation::Maximize } else { Orientation::Minimize };
        let env = upper_envelope(&pts, o);
        prop_assert_eq!(&env, &brute_envelope(&pts, o));
        prop_assert_eq!(&upper_envelope(&env, o), &env);
    }

    #[test]
    fn accounting_relations(d_in in 1usize..40, d_out in 1usize..40, g in 1usize..25, k in 0usize..6) {
        let conv = FlopsConvention::default();
        let kan = Model::zeros(&ArchSpec::kan(&[d_in, d_out], SplineSpec::new(g, k, -1.0, 1.0).unwrap())).unwrap();
        prop_assert_eq!(params_kan_formula(d_in, d_out, g, k).unwrap() - params_introspect(&kan), (d_in * d_out) as u64);
        let mlp = Model::zeros(&ArchSpec::mlp(&[d_in, d_out], ActivationKind::Relu)).unwrap();
        prop_assert_eq!(params_mlp_formula(d_in, d_out).unwrap(), params_introspect(&mlp));
        let diff = flops_kan_formula(d_in, d_out, g, k, &conv).unwrap()
            - flops_mlp_formula(d_in, d_out, &conv, ActivationKind::Silu, true).unwrap();
        let id = flops_diff_identity(d_in, d_out, g, k, &conv, true).unwrap();
        prop_assert!((diff - id).abs() <= 1e-9 * id.abs());
    }

    #[test]
    fn measured_flops_are_deterministic(d_in in 1usize..6, d_out in 1usize..6, g in 1usize..8, k in 0usize..4, x in -2.0f64..2.0) {
        let conv = FlopsConvention::default();
        let m = Model::zeros(&ArchSpec::kan(&[d_in, d_out], SplineSpec::new(g, k, -1.0, 1.0).unwrap())).unwrap();
        let probe = vec![x; d_in];
        prop_assert_eq!(flops_measured(&m, &conv, &probe).unwrap(), flops_measured(&m, &conv, &probe).unwrap());
    }

    #[test]
    fn basis_partition_of_unity(g in 1usize..25, k in 0usize..6, u in 0.0f64..1.0) {
        let knots = make_knots(&SplineSpec::new(g, k, -2.0, 3.0).unwrap());
        let s: f64 = basis_eval(&knots, -2.0 + 5.0 * u).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn budget_matching_accepts_by_relative_gap(a in 1.0f64..1e6, b in 1.0f64..1e6, tol in 0.001f64..0.5) {
        let m = match_budgets(&[a], &[b], tol).unwrap();
        prop_assert_eq!(m.pairs.len() == 1, (b - a).abs() <= tol * a);
    }

    #[test]
    fn constant_accuracy_rows(c in 0.0f64..100.0, t in 1usize..6) {
        let m = AccuracyMatrix::new((0..t).map(|i| vec![c; i + 1]).collect()).unwrap();
        let cm = cl_metrics(&m).unwrap();
        prop_assert!((cm.acc - c).abs() < 1e-9);
        if t >= 2 {
            prop_assert_eq!(cm.bwt, Some(0.0));
        }
    }

    #[test]
    fn class_incremental_partitions_rows(labels in prop::collection::vec(0usize..6, 6..80)) {
        let mut labels = labels;
        labels[..6].copy_from_slice(&[0, 1, 2, 3, 4, 5]);
        let n = labels.len();
        let ds = Dataset::new(
            "p",
            Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            Targets::Classes { labels, num_classes: 6 },
        )
        .unwrap();
        let groups = vec![vec![0, 1, 2], vec![3, 4], vec![5]];
        let seq = split_class_incremental(&ds, &groups).unwrap();
        prop_assert_eq!(seq.tasks.iter().map(|t| t.data.len()).sum::<usize>(), n);
        for (task, group) in seq.tasks.iter().zip(&groups) {
            prop_assert!(task.data.labels().unwrap().iter().all(|l| group.contains(l)));
        }
    }
}
