use kanbench::gradcheck::{check_model_gradients, random_probe, random_small_arch};
use kanbench::layers::{build_model, ArchKind};
use kanbench::nn::{Matrix, Rng};

const KINDS: [ArchKind; 4] = [
    ArchKind::Kan,
    ArchKind::Mlp,
    ArchKind::MlpSplinePre,
    ArchKind::MlpSplinePost,
];

#[test]
fn every_kind_matches_finite_differences() {
    for kind in KINDS {
        for seed in 0..20 {
            let mut rng = Rng::new(1000 + seed);
            let arch = random_small_arch(kind, 5, &mut rng);
            // Perturb everything away from zero so no branch is trivially inactive.
            let mut model = build_model(&arch, &mut rng).unwrap();
            let jittered: Vec<f64> = model.to_flat().iter().map(|v| v + rng.normal(0.0, 0.3)).collect();
            model.load_flat(&jittered).unwrap();
            let (x, up) = random_probe(&model, 3, &mut rng);
            let check = check_model_gradients(&model, &x, &up, 1e-6).unwrap();
            assert!(check.worst() < 1e-4, "{kind} seed {seed} {:?}: {check:?}", arch.widths);
        }
    }
}

#[test]
fn forward_commutes_with_row_permutation() {
    for kind in KINDS {
        let mut rng = Rng::new(7);
        let arch = random_small_arch(kind, 5, &mut rng);
        let model = build_model(&arch, &mut rng).unwrap();
        let (x, _) = random_probe(&model, 6, &mut rng);
        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let y = model.forward(&x).unwrap();
        let yp = model.forward(&x.select_rows(&perm)).unwrap();
        assert_eq!(yp, y.select_rows(&perm), "{kind}");
        let single: Vec<Vec<f64>> = (0..6)
            .map(|r| model.forward(&Matrix::row_vector(x.row(r))).unwrap().into_vec())
            .collect();
        assert_eq!(Matrix::from_rows(&single).unwrap(), y, "{kind}");
    }
}
