//! End-to-end checks of the inversion pipeline on circle scenes: first
//! arrivals, cut times, hidden distances, cut-off inner products, pointwise
//! products, and gauge recovery, each against an independent oracle.

use bclab::control::*;
use bclab::error::Error;
use bclab::geometry::*;
use bclab::operator::*;
use bclab::recon::*;
use bclab::s2s::*;
use bclab::wave::*;
use num_complex::Complex64;

const PI: f64 = std::f64::consts::PI;

struct Lab {
    grid: PeriodicGrid,
    metric: ConformalMetric,
    decomp: SpectralDecomposition,
    obs: ObservationSet,
}

fn circle_lab(n: usize, x_lo: f64, x_hi: f64) -> Lab {
    let grid = PeriodicGrid::circle(n, 1.0).unwrap();
    let metric = ConformalMetric::uniform(&grid, 1.0).unwrap();
    let disc = assemble_operator(
        &grid,
        &metric,
        &CovectorField::zero(&grid),
        &ScalarPotential::zero(&grid),
    )
    .unwrap();
    let decomp = eigendecompose(&disc).unwrap();
    let obs = ObservationSet::from_interval(&grid, &metric, x_lo, x_hi).unwrap();
    Lab { grid, metric, decomp, obs }
}

#[test]
fn first_arrival_recovers_circle_distance() {
    let lab = circle_lab(256, 0.0, 0.6);
    let eps = 0.03;
    let est = boundary_distance_experiment(
        &lab.grid,
        &lab.metric,
        &lab.decomp,
        &lab.obs,
        [0.1, 0.0],
        [0.3, 0.0],
        eps,
        0.2,
        0.5,
        512,
    )
    .unwrap();
    let budget = 2.0 * eps + 3.0 * lab.grid.spacing(0) + est.uncertainty * 0.0;
    assert!(
        (est.estimate - 0.2).abs() <= budget,
        "estimate {} for true 0.2 (budget {budget})",
        est.estimate
    );

    // symmetry within 2 eps
    let back = boundary_distance_experiment(
        &lab.grid,
        &lab.metric,
        &lab.decomp,
        &lab.obs,
        [0.3, 0.0],
        [0.1, 0.0],
        eps,
        0.2,
        0.5,
        512,
    )
    .unwrap();
    assert!((est.estimate - back.estimate).abs() <= 2.0 * eps);

    // coincident points: estimate within 2 eps of zero
    let same = boundary_distance_experiment(
        &lab.grid,
        &lab.metric,
        &lab.decomp,
        &lab.obs,
        [0.2, 0.0],
        [0.2, 0.0],
        eps,
        0.2,
        0.5,
        512,
    )
    .unwrap();
    assert!(same.estimate <= 2.0 * eps, "self distance {}", same.estimate);
}

#[test]
fn cut_time_on_flat_circle_is_half() {
    let lab = circle_lab(128, 0.0, 0.6);
    let h = lab.grid.spacing(0);
    let r_grid: Vec<f64> = (1..=60).map(|k| 0.2 + k as f64 * h).collect();
    let cfg = CutTimeConfig {
        y: [0.1, 0.0],
        xi: [1.0, 0.0],
        s_probe: 0.15,
        r_grid,
        eps: 0.04,
        theta: 1e-2,
        t_final: 0.75,
        steps: 256,
        lattice: AtomLattice::default(),
    };
    let est = cut_time(&lab.grid, &lab.metric, &lab.decomp, &lab.obs, &cfg).unwrap();
    let tau = est.tau.expect("scan must find the cut time");
    let oracle = cut_time_flat_oracle(&lab.grid, &lab.metric, [1.0, 0.0]).unwrap();
    assert!((oracle - 0.5).abs() < 1e-12);
    let budget = 2.0 * h + h; // 2h plus one scan step
    assert!(
        (tau - 0.5).abs() <= budget,
        "tau {tau} vs 0.5 (budget {budget})"
    );
    // included stays included once true (monotone scan)
    let mut seen_true = false;
    for (_, inc, _) in &est.scan {
        if seen_true {
            assert!(*inc);
        }
        seen_true |= *inc;
    }
}

#[test]
fn hidden_distance_matches_oracle_on_circle() {
    let lab = circle_lab(128, 0.0, 0.45);
    let h = lab.grid.spacing(0);
    let eps = 0.04;
    // hidden point p = gamma(0.45) = 0.50 from y = 0.05 heading forward
    let entry = FanEntry::from_direction(&lab.grid, &lab.metric, [0.05, 0.0], [1.0, 0.0], 0.45, 0.12)
        .unwrap();
    let cfg = HiddenDistanceConfig {
        eps,
        theta: 1e-2,
        t_final: 0.8,
        steps: 256,
        lattice: AtomLattice::default(),
        r_step: h,
        r_max: 0.6,
    };
    let sites = [(entry.z, eps), (entry.y, eps), ([0.2, 0.0], eps)];
    let s2s = record_scan_experiment(&lab.grid, &lab.decomp, &lab.obs, cfg.t_final, cfg.steps, &sites, cfg.lattice)
        .unwrap();
    let est = hidden_distance(&s2s, &lab.grid, &entry, [0.2, 0.0], &cfg, Some(0.5)).unwrap();
    let got = est.distance.expect("scan should find the distance");
    let want = 0.3; // d(0.50, 0.20) on the unit circle
    let budget = 2.0 * eps + 3.0 * h + cfg.r_step;
    assert!((got - want).abs() <= budget, "got {got}, want {want}");
    // once true, stays true: scan is monotone
    let mut seen = false;
    for (_, inc, _) in &est.scan {
        if seen {
            assert!(*inc);
        }
        seen |= *inc;
    }
    // beyond the cut time is an error
    let bad = FanEntry { r: 0.55, ..entry.clone() };
    assert!(matches!(
        hidden_distance(&s2s, &lab.grid, &bad, [0.2, 0.0], &cfg, Some(0.5)),
        Err(Error::BeyondCutTime { .. })
    ));
}

#[test]
fn travel_time_function_is_lipschitz_and_consistent() {
    let lab = circle_lab(128, 0.0, 0.45);
    let h = lab.grid.spacing(0);
    let eps = 0.04;
    let cfg = HiddenDistanceConfig {
        eps,
        theta: 1e-2,
        t_final: 0.8,
        steps: 256,
        lattice: AtomLattice::default(),
        r_step: h,
        r_max: 0.6,
    };
    let fan = vec![
        FanEntry::from_direction(&lab.grid, &lab.metric, [0.05, 0.0], [1.0, 0.0], 0.45, 0.12).unwrap(),
        FanEntry::from_direction(&lab.grid, &lab.metric, [0.05, 0.0], [1.0, 0.0], 0.42, 0.12).unwrap(),
    ];
    let obs_points = [[0.2, 0.0], [0.3, 0.0]];
    let functions = travel_time_data(
        &lab.grid,
        &lab.metric,
        &lab.decomp,
        &lab.obs,
        &fan,
        &obs_points,
        &cfg,
    );
    let r0 = functions[0].as_ref().unwrap();
    let r1 = functions[1].as_ref().unwrap();
    for (f, entry) in [(r0, &fan[0]), (r1, &fan[1])] {
        let p = entry.hidden.unwrap();
        for s in &f.samples {
            let want = lab.grid.flat_distance(p, s.point);
            let got = s.distance.expect("sample resolved");
            assert!(
                (got - want).abs() <= s.uncertainty,
                "sample at {:?}: got {got}, want {want}, budget {}",
                s.point,
                s.uncertainty
            );
        }
    }
    // 1-Lipschitz of the travel time map within the grid budget
    let d_pq = lab
        .grid
        .flat_distance(fan[0].hidden.unwrap(), fan[1].hidden.unwrap());
    assert!(r0.sup_distance(r1) <= d_pq + 3.0 * h + cfg.r_step);
}

#[test]
fn cutoff_inner_reduces_to_blago_and_matches_oracle() {
    let lab = circle_lab(128, 0.0, 0.6);
    let t_final = 0.5;
    let steps = 256;
    // basis: probes f, h plus controls across the whole observation window
    let mut basis = SourceBasis::new();
    let f_atom = SourceAtom::new([0.15, 0.0], 0.05, 0.05, 0.2, Complex64::new(1.0, 0.0));
    let h_atom = SourceAtom::new([0.40, 0.0], 0.05, 0.1, 0.3, Complex64::new(0.6, 0.8));
    for atom in [f_atom, h_atom] {
        let cyl = Cylinder { center: atom.center, radius: atom.radius + 1e-9, t0: 0.0, t1: t_final };
        basis.push(atom, cyl, &lab.grid).unwrap();
    }
    let x_cyl = Cylinder { center: [0.3, 0.0], radius: 0.3, t0: 0.0, t1: t_final };
    for atom in cylinder_atoms(&lab.grid, x_cyl, AtomLattice { windows_per_tenth: 6.0, subcenters: 4, ..AtomLattice::default() }) {
        basis.push(atom, x_cyl, &lab.grid).unwrap();
    }
    let s2s = build_s2s(&lab.grid, &lab.decomp, basis, lab.obs.clone(), t_final, steps, "cutoff")
        .unwrap();
    let f = s2s.unit_coeffs(0);
    let h = s2s.unit_coeffs(1);

    // Y = X, s = T: the cutoff is the plain identity, within control tolerance
    let full = cutoff_inner(
        &s2s,
        &lab.grid,
        &lab.metric,
        &f,
        &h,
        lab.obs.indicator(),
        t_final,
        None,
        CutoffConfig::default(),
    )
    .unwrap();
    let plain = s2s.blago_inner_product(&f, &h).unwrap();
    let scale = s2s.blago_norm_sq(&f).unwrap().sqrt() * s2s.blago_norm_sq(&h).unwrap().sqrt();
    assert!(
        (full.plain - plain).norm() <= 5e-2 * scale,
        "cutoff {} vs plain {plain}",
        full.plain
    );

    // genuine cutoff with a nested region, against the direct oracle
    let y_seed = IndicatorSet::flat_ball(&lab.grid, &lab.metric, [0.3, 0.0], 0.08);
    let yhat_seed = IndicatorSet::flat_ball(&lab.grid, &lab.metric, [0.25, 0.0], 0.05);
    let s_depth = 0.3;
    let shat_depth = 0.2;
    let out = cutoff_inner(
        &s2s,
        &lab.grid,
        &lab.metric,
        &f,
        &h,
        &y_seed,
        s_depth,
        Some((&yhat_seed, shat_depth)),
        CutoffConfig::default(),
    )
    .unwrap();
    // algebraic identity of the difference value
    let diff = out.difference.unwrap();
    let nested = out.nested.unwrap();
    assert!((diff - (out.plain - nested)).norm() <= 1e-10 * (1.0 + out.plain.norm()));

    // direct oracle
    let m1 = domain_of_influence(&lab.grid, &lab.metric, &y_seed, s_depth).unwrap();
    let m2 = domain_of_influence(&lab.grid, &lab.metric, &yhat_seed, shat_depth).unwrap();
    let uf = solve_cauchy(&lab.decomp, &f_atom.source(&lab.grid, s2s.time()).unwrap(), t_final).unwrap();
    let uh = solve_cauchy(&lab.decomp, &h_atom.source(&lab.grid, s2s.time()).unwrap(), t_final).unwrap();
    let mask = |set: &IndicatorSet, u: &Wavefield| -> Vec<Complex64> {
        u.values
            .iter()
            .enumerate()
            .map(|(i, z)| if set.contains(i) { *z } else { Complex64::new(0.0, 0.0) })
            .collect()
    };
    let direct_plain = lab.decomp.m_inner(&mask(&m1, &uf), &uh.values);
    assert!(
        (out.plain - direct_plain).norm() <= 5e-2 * scale,
        "plain {} vs direct {direct_plain}",
        out.plain
    );
    let cut1 = mask(&m1, &uf);
    let cut12 = mask(&m2, &Wavefield { values: cut1.clone(), time: t_final });
    let direct_nested = lab.decomp.m_inner(&cut12, &uh.values);
    assert!(
        (nested - direct_nested).norm() <= 5e-2 * scale,
        "nested {nested} vs direct {direct_nested}"
    );
}

#[test]
fn pointwise_product_matches_oracle_inside() {
    let lab = circle_lab(256, 0.0, 0.6);
    let t_final = 0.55;
    let x0 = lab.grid.node_at([0.75, 0.0]); // interior, distance 0.15 from X
    let f_atom = SourceAtom::new([0.2, 0.0], 0.06, 0.05, 0.25, Complex64::new(1.0, 0.0));
    let h_atom = SourceAtom::new([0.35, 0.0], 0.06, 0.08, 0.3, Complex64::new(0.8, -0.5));
    let cfg = ProductConfig {
        y: [0.55, 0.0],
        eps: 16.0 * lab.grid.spacing(0),
        ladder_levels: 4,
        t_final,
        steps: 512,
        lattice: AtomLattice { windows_per_tenth: 6.0, subcenters: 2, ..AtomLattice::default() },
        cutoff: CutoffConfig::default(),
        cauchy_slack: 2.0,
    };
    let exp = record_product_experiment(
        &lab.grid,
        &lab.metric,
        &lab.decomp,
        &lab.obs,
        f_atom,
        h_atom,
        x0,
        &cfg,
    )
    .unwrap();
    let est = pointwise_product(&lab.grid, &lab.metric, &lab.obs, &exp, &cfg).unwrap();

    let uf = solve_cauchy(&lab.decomp, &f_atom.source(&lab.grid, exp.s2s.time()).unwrap(), t_final)
        .unwrap();
    let uh = solve_cauchy(&lab.decomp, &h_atom.source(&lab.grid, exp.s2s.time()).unwrap(), t_final)
        .unwrap();
    let want = uf.values[x0] * uh.values[x0].conj();
    let rel = (est.value - want).norm() / want.norm();
    assert!(
        rel <= 1e-1,
        "product {} vs oracle {want} (rel {rel}, quotients {:?})",
        est.value,
        est.quotients
    );

    // f = h: the product is |u|^2, real and nonnegative up to tolerance
    let exp_ff = record_product_experiment(
        &lab.grid,
        &lab.metric,
        &lab.decomp,
        &lab.obs,
        f_atom,
        f_atom,
        x0,
        &cfg,
    )
    .unwrap();
    let est_ff = pointwise_product(&lab.grid, &lab.metric, &lab.obs, &exp_ff, &cfg).unwrap();
    let want_ff = uf.values[x0].norm_sqr();
    assert!(est_ff.value.im.abs() <= 0.2 * want_ff);
    assert!(est_ff.value.re >= -0.2 * want_ff);
}

#[test]
fn gauge_recovery_on_constructed_scene() {
    let n = 128;
    let grid = PeriodicGrid::circle(n, 1.0).unwrap();
    let metric = ConformalMetric::uniform(&grid, 1.0).unwrap();
    let obs = ObservationSet::from_interval(&grid, &metric, 0.0, 0.5).unwrap();
    let t_final = 0.6;
    let steps = 256;

    let mut a = CovectorField::zero(&grid);
    for (i, x) in a.component_mut(0).iter_mut().enumerate() {
        *x = 0.5 * (2.0 * PI * i as f64 / n as f64).sin();
    }
    let v = ScalarPotential::new(
        &grid,
        (0..n).map(|i| 0.8 * (4.0 * PI * i as f64 / n as f64).cos()).collect(),
    )
    .unwrap();
    // theta supported outside X = [0, 0.5]
    let theta: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 / n as f64;
            if x > 0.58 && x < 0.92 {
                let s = (x - 0.75) / 0.17;
                0.9 * (1.0 - s * s).powi(3)
            } else {
                0.0
            }
        })
        .collect();
    let a1 = gauge_conjugate(&grid, &a, &theta).unwrap();

    let disc1 = assemble_operator(&grid, &metric, &a1, &v).unwrap();
    let disc2 = assemble_operator(&grid, &metric, &a, &v).unwrap();
    let decomp1 = eigendecompose(&disc1).unwrap();
    let decomp2 = eigendecompose(&disc2).unwrap();

    let mut basis = SourceBasis::new();
    for (k, c) in [0.1f64, 0.25, 0.4].iter().enumerate() {
        let atom = SourceAtom::new(
            [*c, 0.0],
            0.05,
            0.02 + 0.05 * k as f64,
            0.25 + 0.05 * k as f64,
            Complex64::new(1.0, 0.3 * k as f64),
        );
        let cyl = Cylinder { center: [*c, 0.0], radius: 0.06, t0: 0.0, t1: t_final };
        basis.push(atom, cyl, &grid).unwrap();
    }
    let s2s1 = build_s2s(&grid, &decomp1, basis.clone(), obs.clone(), t_final, steps, "model1")
        .unwrap();
    let s2s2 = build_s2s(&grid, &decomp2, basis.clone(), obs.clone(), t_final, steps, "model2")
        .unwrap();

    // Omega: everything within distance 0.55 of X (all of the circle here)
    let omega = IndicatorSet::full(&grid, &metric);
    let model1 = GaugeModel { decomp: &decomp1, a: &a1, v: &v };
    let model2 = GaugeModel { decomp: &decomp2, a: &a, v: &v };
    let (field, report) = recover_gauge(
        &grid,
        &metric,
        &model1,
        &model2,
        &s2s1,
        &s2s2,
        &omega,
        &[0, 1, 2],
        GaugeConfig::default(),
    )
    .unwrap();

    assert!(report.precheck_defect <= 1e-9, "defect {}", report.precheck_defect);
    assert!(report.max_modulus_defect <= 1e-2);
    assert!(report.max_defect_on_observation <= 1e-6);
    assert!(report.max_edge_residual <= 1e-2, "edge residual {}", report.max_edge_residual);
    assert!(report.max_potential_defect <= 1e-6);
    // recovered kappa matches exp(i theta) pointwise
    let mut worst = 0.0f64;
    for i in 0..n {
        if let Some(kappa) = field.values[i] {
            let want = Complex64::from_polar(1.0, theta[i]);
            worst = worst.max((kappa - want).norm());
        }
    }
    assert!(worst <= 1e-2, "kappa defect {worst}");
    assert!(field.unresolved.len() < n / 8, "{} unresolved", field.unresolved.len());

    // uniqueness: two disjoint probe selections agree
    let (field_a, _) = recover_gauge(
        &grid, &metric, &model1, &model2, &s2s1, &s2s2, &omega, &[0, 1], GaugeConfig::default(),
    )
    .unwrap();
    let (field_b, _) = recover_gauge(
        &grid, &metric, &model1, &model2, &s2s1, &s2s2, &omega, &[2], GaugeConfig::default(),
    )
    .unwrap();
    assert!(gauge_agreement(&field_a, &field_b) <= 2e-2);

    // theta == 0 gives kappa == 1
    let (field0, report0) = recover_gauge(
        &grid, &metric, &model2, &model2, &s2s2, &s2s2, &omega, &[0, 1, 2], GaugeConfig::default(),
    )
    .unwrap();
    assert!(report0.max_modulus_defect <= 1e-6);
    for v in field0.values.iter().flatten() {
        assert!((v - Complex64::new(1.0, 0.0)).norm() <= 1e-6);
    }

    // negative control: V perturbed outside X must be flagged distinguishable
    let mut v_bad = v.values().to_vec();
    for (i, val) in v_bad.iter_mut().enumerate() {
        let x = i as f64 / n as f64;
        if x > 0.6 && x < 0.8 {
            *val += 8.0;
        }
    }
    let v_bad = ScalarPotential::new(&grid, v_bad).unwrap();
    let disc_bad = assemble_operator(&grid, &metric, &a, &v_bad).unwrap();
    let decomp_bad = eigendecompose(&disc_bad).unwrap();
    let s2s_bad = build_s2s(&grid, &decomp_bad, basis, obs.clone(), t_final, steps, "bad").unwrap();
    let model_bad = GaugeModel { decomp: &decomp_bad, a: &a, v: &v_bad };
    let err = recover_gauge(
        &grid, &metric, &model_bad, &model2, &s2s_bad, &s2s2, &omega, &[0, 1, 2],
        GaugeConfig::default(),
    );
    match err {
        Err(Error::ModelsDistinguishable { defect, .. }) => {
            assert!(defect >= 1e-3, "witness defect {defect}");
        }
        other => panic!("expected distinguishable models, got {other:?}"),
    }
}
