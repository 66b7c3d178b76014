use attnlab::context::{sample_context, sample_qtrue, targets, CategoryDist, QTrueMode, QTrueTable};
use attnlab::stationarity::case_b::{
    canonical_point, gauge_point, invalid_branch_witness, moments, predict_case_b, row_residuals, stationarity_case_b,
    zero_row_sum_point, CaseBParams,
};
use attnlab::stationarity::oracle::case_b_enumerate;
use attnlab::{Mat, Rng};

fn dists(n: usize) -> Vec<CategoryDist> {
    let w: Vec<f64> = (1..=n).map(|k| k as f64).collect();
    vec![CategoryDist::uniform(n).unwrap(), CategoryDist::from_weights(&w).unwrap()]
}

#[test]
fn canonical_and_gauge_points_are_stationary() {
    let mut rng = Rng::new(200);
    for n in [3, 4, 6] {
        let q = sample_qtrue(n, QTrueMode::StandardNormal, &mut rng).unwrap();
        for dist in dists(n) {
            let mut points = vec![canonical_point(&q, 7).unwrap()];
            for c in [0.5, 2.0, -0.3] {
                points.push(gauge_point(&q, 7, c).unwrap());
            }
            for p in &points {
                let rep = stationarity_case_b(p, &q, &dist, 1e-10);
                for id in ["soap", "soap2", "soap3", "eq100"] {
                    assert!(rep.get(id).unwrap() < 1e-10, "{id} {:?}", rep.get(id));
                }
            }
        }
    }
}

#[test]
fn enumerated_gradient_vanishes_where_residuals_do() {
    let mut rng = Rng::new(201);
    let q = sample_qtrue(3, QTrueMode::StandardNormal, &mut rng).unwrap();
    for dist in dists(3) {
        for p in [canonical_point(&q, 5).unwrap(), gauge_point(&q, 5, 0.7).unwrap()] {
            let g = case_b_enumerate(&p, &q, &dist).unwrap();
            assert!(g.loss < 1e-20);
            assert!(g.gq.max_abs() < 1e-9 && g.gv.max_abs() < 1e-9);
            assert!(stationarity_case_b(&p, &q, &dist, 1e-9).get("soap2").unwrap() < 1e-9);
        }
    }
}

#[test]
fn residuals_are_nonzero_where_the_gradient_is() {
    let mut rng = Rng::new(202);
    let q = sample_qtrue(3, QTrueMode::StandardNormal, &mut rng).unwrap();
    let dist = CategoryDist::uniform(3).unwrap();
    let p = CaseBParams::new(
        Mat::from_fn(5, 5, |_, _| rng.normal()).unwrap(),
        Mat::from_fn(3, 3, |_, _| rng.normal()).unwrap(),
    )
    .unwrap();
    assert!(case_b_enumerate(&p, &q, &dist).unwrap().gv.max_abs() > 1e-3);
    assert!(!stationarity_case_b(&p, &q, &dist, 1e-6).passed());
}

#[test]
fn gauge_predictions_equal_targets() {
    let mut rng = Rng::new(203);
    let n = 5;
    let q = sample_qtrue(n, QTrueMode::StandardNormal, &mut rng).unwrap();
    let dist = CategoryDist::uniform(n).unwrap();
    let points: Vec<CaseBParams> = [0.0, 0.5, 3.0, -0.4]
        .iter()
        .map(|c| gauge_point(&q, 12, *c).unwrap())
        .collect();
    for _ in 0..1000 {
        let t = sample_context(n, 12, &dist, &mut rng).unwrap();
        let y = targets(&t, &q).unwrap();
        for p in &points {
            let pred = predict_case_b(p, &t).unwrap();
            assert!(pred.iter().zip(&y).skip(1).all(|(a, b)| (a - b).abs() < 1e-10));
        }
    }
}

#[test]
fn zero_mixing_predicts_zero() {
    let q = QTrueTable::pair_code(3);
    let p = CaseBParams::new(Mat::zeros(4, 4), q.table().clone()).unwrap();
    let t = sample_context(3, 4, &CategoryDist::uniform(3).unwrap(), &mut Rng::new(1)).unwrap();
    assert_eq!(predict_case_b(&p, &t).unwrap(), vec![0.0; 4]);
}

#[test]
fn zero_row_sum_branch_leaves_the_witness() {
    let mut rng = Rng::new(204);
    for n in [3, 5] {
        let q = sample_qtrue(n, QTrueMode::StandardNormal, &mut rng).unwrap();
        for dist in dists(n) {
            let w = invalid_branch_witness(&q, &dist);
            for row in [3, 4, 6] {
                let (p, beta) = zero_row_sum_point(&q, &dist, 6, row, 0.8).unwrap();
                let rep = stationarity_case_b(&p, &q, &dist, 1e-10);
                let r = row_residuals(&p, &moments(&p.q, &q, &dist), row - 1);
                assert!((r.soap2.abs() - beta * (1.0 - beta) * w).abs() < 1e-10, "{r:?}");
                assert!(r.eq100.abs() < 1e-10);
                assert!(!rep.passed());
            }
        }
    }
}

#[test]
fn witness_values() {
    let dist = CategoryDist::uniform(4).unwrap();
    assert!((invalid_branch_witness(&QTrueTable::pair_code(4), &dist) - 125.0).abs() < 1e-10);
    let rows_equal = Mat::from_fn(4, 4, |_, t| t as f64 * 1.7 - 2.0).unwrap();
    let flat = QTrueTable::from_mat(rows_equal, QTrueMode::StandardNormal).unwrap();
    for d in dists(4) {
        assert_eq!(invalid_branch_witness(&flat, &d), 0.0);
    }
    let mut rng = Rng::new(205);
    for _ in 0..100 {
        let q = sample_qtrue(10, QTrueMode::StandardNormal, &mut rng).unwrap();
        assert!(invalid_branch_witness(&q, &CategoryDist::uniform(10).unwrap()) > 1e-6);
    }
}

proptest::proptest! {
    #[test]
    fn witness_vanishes_on_column_constant_tables(
        n in 2usize..8,
        cols in proptest::collection::vec(-50.0f64..50.0, 8),
        weights in proptest::collection::vec(0.01f64..10.0, 8),
    ) {
        let q = QTrueTable::from_mat(Mat::from_fn(n, n, |_, t| cols[t]).unwrap(), QTrueMode::StandardNormal).unwrap();
        let dist = CategoryDist::from_weights(&weights[..n]).unwrap();
        proptest::prop_assert_eq!(invalid_branch_witness(&q, &dist), 0.0);
    }
}
