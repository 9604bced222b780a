use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use certignc::io::{
    inject_outliers, outlier_count, parse_document, parse_g2o, procrustes, rmse_ate, serialize_g2o, G2oErrorKind,
};
use certignc::problem::{axis_angle3, rot2, rotation_angle_between, EdgeKind, Problem};
use certignc::{generate_synthetic, SyntheticSpec, World};
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Hypergeometric};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/g2o")
}

fn corpus(dir: &str) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(fixtures().join(dir))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "g2o"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect()
}

/// Same variables and edges; rotations within `tol`, everything else exact.
fn assert_same_problem(a: &Problem, b: &Problem, tol: f64, what: &str) {
    assert_eq!(a.d, b.d, "{what}");
    assert_eq!(a.poses.keys().collect::<Vec<_>>(), b.poses.keys().collect::<Vec<_>>(), "{what}");
    assert_eq!(a.landmarks, b.landmarks, "{what}");
    for (id, p) in &a.poses {
        let q = &b.poses[id];
        assert_eq!(p.translation, q.translation, "{what}: pose {id}");
        assert!((&p.rotation - &q.rotation).amax() <= tol, "{what}: pose {id}");
    }
    assert_eq!(a.edges.len(), b.edges.len(), "{what}");
    for (k, (x, y)) in a.edges.iter().zip(&b.edges).enumerate() {
        assert_eq!(x.class, y.class, "{what}: edge {k}");
        match (&x.kind, &y.kind) {
            (
                EdgeKind::RelativePose { from: f1, to: t1, rotation: r1, translation: v1, kappa: k1, tau: s1 },
                EdgeKind::RelativePose { from: f2, to: t2, rotation: r2, translation: v2, kappa: k2, tau: s2 },
            ) => {
                assert_eq!((f1, t1, v1, k1, s1), (f2, t2, v2, k2, s2), "{what}: edge {k}");
                assert!((r1 - r2).amax() <= tol, "{what}: edge {k}");
            }
            (a, b) => assert_eq!(a, b, "{what}: edge {k}"),
        }
    }
}

#[test]
fn valid_corpus_round_trips_to_a_fixed_point() {
    let files = corpus("valid");
    assert!(files.len() >= 6);
    let mut dims = BTreeSet::new();
    let mut has_landmarks = false;
    for (name, text) in &files {
        let p0 = parse_g2o(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        dims.insert(p0.d);
        has_landmarks |= !p0.landmarks.is_empty();
        let s1 = serialize_g2o(&p0).unwrap();
        let p1 = parse_g2o(&s1).unwrap();
        // The first write fixes the isotropic precisions; afterwards the
        // serialized form is stable up to rotation round-off.
        assert_same_problem(&p0, &p1, 1e-12, name);
        let p2 = parse_g2o(&serialize_g2o(&p1).unwrap()).unwrap();
        assert_same_problem(&p1, &p2, 1e-12, name);
    }
    assert_eq!(dims, BTreeSet::from([2, 3]));
    assert!(has_landmarks);
}

#[test]
fn malformed_corpus_raises_located_errors() {
    let expected: Vec<(&str, usize, usize, fn(&G2oErrorKind) -> bool)> = vec![
        ("01_unknown_tag.g2o", 2, 1, |k| matches!(k, G2oErrorKind::UnknownTag(t) if t == "VERTEX_SE4")),
        ("02_edge_arity.g2o", 3, 29, |k| matches!(k, G2oErrorKind::Arity { expected: 11, found: 10, .. })),
        ("03_bad_number.g2o", 2, 14, |k| matches!(k, G2oErrorKind::Number(s) if s == "1.0x")),
        ("04_bad_id.g2o", 2, 12, |k| matches!(k, G2oErrorKind::Id(s) if s == "-1")),
        ("05_not_pd.g2o", 3, 20, |k| matches!(k, G2oErrorKind::NotPositiveDefinite)),
        ("06_dangling_vertex.g2o", 4, 12, |k| matches!(k, G2oErrorKind::DanglingVertex(7))),
        ("07_duplicate_vertex.g2o", 3, 12, |k| matches!(k, G2oErrorKind::DuplicateVertex(1))),
        ("08_quaternion_norm.g2o", 2, 25, |k| matches!(k, G2oErrorKind::QuaternionNorm(_))),
        ("09_mixed_dimension.g2o", 2, 1, |k| matches!(k, G2oErrorKind::MixedDimension)),
        ("10_self_loop.g2o", 3, 12, |k| matches!(k, G2oErrorKind::SelfLoop(1))),
    ];
    let files = corpus("malformed");
    assert_eq!(files.len(), expected.len());
    for ((name, text), (want, line, column, kind)) in files.iter().zip(&expected) {
        assert_eq!(name, want);
        let e = parse_document(text).and_then(|d| d.to_problem(name)).unwrap_err();
        assert_eq!((e.line, e.column), (*line, *column), "{name}: {e}");
        assert!(kind(&e.kind), "{name}: {e}");
        assert!(e.to_string().starts_with(&format!("line {line}, column {column}: ")));
    }
}

#[test]
fn injection_subset_counts_are_hypergeometric() {
    let spec = SyntheticSpec { poses: 30, lc_prob: 1.0, ..Default::default() };
    let p = generate_synthetic(&spec, 4).unwrap();
    let eligible = p.robust_edges();
    let l = eligible.len();
    let rate = 0.3;
    let k = outlier_count(rate, l);
    assert!(l >= 20, "{l}");
    // Fixed marked subset: the first third of the eligible edges.
    let marked: BTreeSet<usize> = eligible[..l / 3].iter().copied().collect();
    let trials = 4000u64;
    let mut counts = vec![0u64; k + 1];
    let mut per_edge = vec![0u64; p.edges.len()];
    for seed in 0..trials {
        let (_, rep) = inject_outliers(&p, rate, seed).unwrap();
        assert_eq!(rep.replaced.len(), k);
        counts[rep.replaced.iter().filter(|e| marked.contains(e)).count()] += 1;
        for &e in &rep.replaced {
            per_edge[e] += 1;
        }
    }
    let hyper = Hypergeometric::new(l as u64, marked.len() as u64, k as u64).unwrap();
    // Pearson statistic over cells with expected count ≥ 5, the rest pooled.
    let (mut stat, mut cells, mut pool_obs, mut pool_exp) = (0.0, 0usize, 0.0, 0.0);
    for (x, &obs) in counts.iter().enumerate() {
        let exp = hyper.pmf(x as u64) * trials as f64;
        if exp >= 5.0 {
            stat += (obs as f64 - exp).powi(2) / exp;
            cells += 1;
        } else {
            pool_obs += obs as f64;
            pool_exp += exp;
        }
    }
    if pool_exp > 0.0 {
        stat += (pool_obs - pool_exp).powi(2) / pool_exp;
        cells += 1;
    }
    let crit = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(stat < crit, "chi2 {stat} vs {crit} on {cells} cells");
    // Odometry is never touched; eligible edges are hit at rate k/l.
    let expect = trials as f64 * k as f64 / l as f64;
    for (e, &n) in per_edge.iter().enumerate() {
        if eligible.contains(&e) {
            assert!((n as f64 - expect).abs() < 5.0 * expect.sqrt(), "edge {e}: {n} vs {expect}");
        } else {
            assert_eq!(n, 0);
        }
    }
}

/// Pearson test of samples against a continuous CDF with equiprobable bins.
fn gof_passes(samples: &[f64], dist: &ChiSquared, bins: usize) -> (f64, f64) {
    let edges: Vec<f64> = (1..bins).map(|b| dist.inverse_cdf(b as f64 / bins as f64)).collect();
    let mut counts = vec![0usize; bins];
    for &s in samples {
        counts[edges.partition_point(|&e| e < s)] += 1;
    }
    let exp = samples.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - exp).powi(2) / exp).sum();
    (stat, ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.999))
}

#[test]
fn generated_noise_has_the_specified_distribution() {
    for d in [2, 3] {
        let spec = SyntheticSpec { d, poses: 3000, lc_prob: 0.0, sigma_r: 0.02, sigma_t: 0.1, ..Default::default() };
        let p = generate_synthetic(&spec, 9).unwrap();
        let (mut trans, mut rot) = (Vec::new(), Vec::new());
        for e in &p.edges {
            if let EdgeKind::RelativePose { from, to, rotation, translation, tau, .. } = &e.kind {
                let (a, b) = (&p.poses[from], &p.poses[to]);
                let true_rot = a.rotation.transpose() * &b.rotation;
                let true_t = a.rotation.transpose() * (&b.translation - &a.translation);
                trans.push(tau * (translation - true_t).norm_squared());
                rot.push((rotation_angle_between(rotation, &true_rot) / spec.sigma_r).powi(2));
            }
        }
        let (s, c) = gof_passes(&trans, &ChiSquared::new(d as f64).unwrap(), 20);
        assert!(s < c, "d = {d}: translation chi2 {s} vs {c}");
        let (s, c) = gof_passes(&rot, &ChiSquared::new(1.0).unwrap(), 20);
        assert!(s < c, "d = {d}: rotation chi2 {s} vs {c}");
    }
}

fn rms_after(a: &[DVector<f64>], b: &[DVector<f64>], r: &nalgebra::DMatrix<f64>) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().fold(DVector::zeros(a[0].len()), |s, v| s + v) / n;
    let mb = b.iter().fold(DVector::zeros(a[0].len()), |s, v| s + v) / n;
    let t = mb - r * ma;
    (a.iter().zip(b).map(|(x, y)| (r * x + &t - y).norm_squared()).sum::<f64>() / n).sqrt()
}

#[test]
fn alignment_matches_brute_force_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..10 {
        let n = 8 + trial;
        let a: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0))).collect();
        let r_true = rot2(rng.random_range(-3.0..3.0));
        let b: Vec<DVector<f64>> = a
            .iter()
            .map(|x| &r_true * x + DVector::from_vec(vec![1.0, -2.0]) + DVector::from_fn(2, |_, _| rng.random_range(-0.3..0.3)))
            .collect();
        let (r, _) = procrustes(&a, &b).unwrap();
        let ours = rms_after(&a, &b, &r);
        // Grid over the angle, then golden-section refinement around the best cell.
        let step = 1e-3;
        let f = |th: f64| rms_after(&a, &b, &rot2(th));
        let best = (0..(std::f64::consts::TAU / step) as usize)
            .map(|k| -std::f64::consts::PI + k as f64 * step)
            .min_by(|x, y| f(*x).total_cmp(&f(*y)))
            .unwrap();
        let (mut lo, mut hi) = (best - step, best + step);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..80 {
            let (m1, m2) = (hi - g * (hi - lo), lo + g * (hi - lo));
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let oracle = f(0.5 * (lo + hi));
        assert!((ours - oracle).abs() <= 1e-10 * (1.0 + oracle), "{ours} vs {oracle}");
    }
    // 3D: no sampled rotation beats the closed form.
    for _ in 0..5 {
        let a: Vec<DVector<f64>> = (0..10).map(|_| DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0))).collect();
        let r_true = axis_angle3(Vector3::new(0.2, 1.0, -0.4), rng.random_range(-3.0..3.0));
        let b: Vec<DVector<f64>> =
            a.iter().map(|x| &r_true * x + DVector::from_fn(3, |_, _| rng.random_range(-0.3..0.3))).collect();
        let (r, _) = procrustes(&a, &b).unwrap();
        let ours = rms_after(&a, &b, &r);
        for _ in 0..2000 {
            let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let probe = axis_angle3(axis, rng.random_range(0.0..3.2)) * &r;
            assert!(rms_after(&a, &b, &probe) >= ours - 1e-12);
            let near = axis_angle3(axis, 1e-4) * &r;
            assert!(rms_after(&a, &b, &near) >= ours - 1e-12);
        }
    }
}

#[test]
fn ate_of_noiseless_generation_against_itself_is_zero() {
    let spec = SyntheticSpec { world: World::Grid, poses: 25, landmarks: 6, sigma_r: 0.0, sigma_t: 0.0, ..Default::default() };
    let p = generate_synthetic(&spec, 2).unwrap();
    let odo = p.odometry_estimate();
    let ate = rmse_ate(&odo, &p.values()).unwrap();
    assert!(ate.translation_rmse < 1e-9 && ate.rotation_rmse_deg < 1e-7, "{ate:?}");
}
