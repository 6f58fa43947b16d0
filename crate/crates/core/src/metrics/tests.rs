use super::*;
use crate::numeric::SeededRng;
use proptest::prelude::*;

fn col(values: &[f64]) -> Matrix {
    Matrix::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
}

/// Scores every query by enumerating positive ranks directly.
fn oracle(q: &Matrix, ql: &[usize], g: &Matrix, gl: &[usize], ks: &[usize]) -> (f64, Vec<f64>, usize) {
    let mut aps = Vec::new();
    let mut hits = vec![0usize; ks.len()];
    for i in 0..q.rows() {
        let d: Vec<f64> = (0..g.rows())
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(g.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        // rank of j = 1 + number of gallery items strictly before it
        let rank = |j: usize| {
            1 + (0..g.rows())
                .filter(|&o| d[o] < d[j] || (d[o] == d[j] && o < j))
                .count()
        };
        let mut pos: Vec<usize> = (0..g.rows()).filter(|&j| gl[j] == ql[i]).map(rank).collect();
        if pos.is_empty() {
            continue;
        }
        pos.sort_unstable();
        let ap: f64 = pos
            .iter()
            .enumerate()
            .map(|(m, &r)| (m + 1) as f64 / r as f64)
            .sum::<f64>()
            / pos.len() as f64;
        aps.push(ap);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if pos[0] <= k {
                *h += 1;
            }
        }
    }
    let n = aps.len() as f64;
    (
        aps.iter().sum::<f64>() / n,
        hits.iter().map(|&h| h as f64 / n).collect(),
        q.rows() - aps.len(),
    )
}

fn random_instance(rng: &mut SeededRng, nq: usize, ng: usize, labels: usize) -> (Matrix, Vec<usize>, Matrix, Vec<usize>) {
    let dim = 3;
    let mut m = |n: usize| {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    };
    let q = m(nq);
    let g = m(ng);
    let ql = (0..nq).map(|_| rng.below(labels)).collect();
    let mut gl: Vec<usize> = (0..ng).map(|_| rng.below(labels)).collect();
    gl[0] = 0;
    let mut ql: Vec<usize> = ql;
    ql[0] = 0;
    (q, ql, g, gl)
}

#[test]
fn single_nearest_positive_is_perfect() {
    let s = evaluate_retrieval(&col(&[0.0]), &[7], &col(&[0.1, 5.0]), &[7, 3], &RANKS).unwrap();
    assert_eq!(s.map, 1.0);
    assert_eq!(s.cmc[&1], 1.0);
}

#[test]
fn positives_at_ranks_one_and_three() {
    let g = col(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    let s = evaluate_retrieval(&col(&[0.0]), &[1], &g, &[1, 0, 1, 0, 0], &RANKS).unwrap();
    assert_eq!(s.map, (1.0 + 2.0 / 3.0) / 2.0);
    assert!((s.map - 5.0 / 6.0).abs() <= f64::EPSILON);
}

#[test]
fn ties_prefer_lower_gallery_index() {
    // Both gallery items are equidistant; the negative comes first.
    let s = evaluate_retrieval(&col(&[0.0]), &[1], &col(&[1.0, -1.0]), &[0, 1], &[1, 2]).unwrap();
    assert_eq!(s.map, 0.5);
    assert_eq!(s.cmc[&1], 0.0);
    assert_eq!(s.cmc[&2], 1.0);
}

#[test]
fn queries_without_positive_are_skipped() {
    let s = evaluate_retrieval(&col(&[0.0, 1.0]), &[1, 9], &col(&[0.0]), &[1], &[1]).unwrap();
    assert_eq!(s.valid_queries, 1);
    assert_eq!(s.skipped_queries, 1);
    assert_eq!(s.map, 1.0);
}

#[test]
fn no_valid_query_is_an_error() {
    let err = evaluate_retrieval(&col(&[0.0]), &[1], &col(&[0.0]), &[2], &[1]).unwrap_err();
    assert!(matches!(err, Error::EmptyEval(_)));
}

#[test]
fn label_count_mismatch_is_rejected() {
    let err = evaluate_retrieval(&col(&[0.0]), &[1, 2], &col(&[0.0]), &[1], &[1]).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn matches_enumeration_oracle_on_random_instances() {
    let mut rng = SeededRng::new(31);
    let ks = [1, 3, 5];
    for _ in 0..20 {
        let nq = 1 + rng.below(10);
        let ng = 1 + rng.below(50);
        let (q, ql, g, gl) = random_instance(&mut rng, nq, ng, 6);
        let s = evaluate_retrieval(&q, &ql, &g, &gl, &ks).unwrap();
        let (map, cmc, skipped) = oracle(&q, &ql, &g, &gl, &ks);
        assert!((s.map - map).abs() <= 1e-12);
        for (k, want) in ks.iter().zip(cmc) {
            assert!((s.cmc[k] - want).abs() <= 1e-12);
        }
        assert_eq!(s.skipped_queries, skipped);
    }
}

proptest! {
    #[test]
    fn cmc_is_monotone_and_saturates(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let (q, ql, g, gl) = random_instance(&mut rng, 6, 20, 4);
        let ks: Vec<usize> = (1..=20).collect();
        let s = evaluate_retrieval(&q, &ql, &g, &gl, &ks).unwrap();
        for k in 1..20 {
            prop_assert!(s.cmc[&k] <= s.cmc[&(k + 1)]);
        }
        prop_assert_eq!(s.cmc[&20], 1.0);
        prop_assert!(s.map > 0.0 && s.map <= 1.0);
    }

    #[test]
    fn perfect_separation_gives_unit_map(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        // Identity i lives near 10*i, far from every other identity.
        let labels: Vec<usize> = (0..12).map(|_| rng.below(4)).collect();
        let g = col(&labels.iter().map(|&l| 10.0 * l as f64 + rng.uniform()).collect::<Vec<_>>());
        let s = evaluate_retrieval(&col(&[0.0, 10.0, 20.0, 30.0]), &[0, 1, 2, 3], &g, &labels, &[1]).unwrap();
        prop_assert_eq!(s.map, 1.0);
    }
}

fn batch(client: usize, round: usize, identities: &[usize]) -> TaskBatch {
    use crate::numeric::Vector;
    use crate::stream::{RawSample, Role};
    let sample = |identity: usize, role: Role| RawSample {
        features: Vector::new(vec![identity as f64, client as f64]).unwrap(),
        identity,
        client,
        round,
        role,
    };
    TaskBatch {
        client,
        round,
        train: identities.iter().map(|&i| sample(i, Role::Train)).collect(),
        query: identities.iter().map(|&i| sample(i, Role::Query)).collect(),
    }
}

fn identity_setup() -> (ExtractionLayer, LayerShapes, ParamVector) {
    let shapes = LayerShapes::new(2, 2, 8).unwrap();
    let mut theta = vec![0.0; shapes.param_count()];
    // W1 = identity, b1 = 0 so embeddings equal (non-negative) prototypes.
    theta[0] = 1.0;
    theta[3] = 1.0;
    (
        ExtractionLayer::from_matrix(Matrix::identity(2)),
        shapes,
        ParamVector::from_vec(theta),
    )
}

#[test]
fn two_client_gallery_is_the_other_clients_queries() {
    let (ex, shapes, theta) = identity_setup();
    let batches = [batch(0, 0, &[1, 2]), batch(1, 0, &[3, 4, 5])];
    let (g, labels) = build_gallery(&batches, 0, &ex, &theta, &shapes).unwrap();
    assert_eq!(labels, vec![3, 4, 5]);
    assert_eq!(g.row(0), &[3.0, 1.0]);
}

#[test]
fn gallery_excludes_own_samples_and_counts_others() {
    let (ex, shapes, theta) = identity_setup();
    let batches: Vec<TaskBatch> = (0..5)
        .flat_map(|c| (0..2).map(move |r| batch(c, r, &vec![c; c + 1 + r])))
        .collect();
    for client in 0..5 {
        let (g, labels) = build_gallery(&batches, client, &ex, &theta, &shapes).unwrap();
        assert!(!labels.contains(&client));
        let expected: usize = batches
            .iter()
            .filter(|b| b.client != client)
            .map(|b| b.query.len())
            .sum();
        assert_eq!(g.rows(), expected);
    }
}

#[test]
fn gallery_order_is_client_then_round() {
    let (ex, shapes, theta) = identity_setup();
    let batches = [batch(2, 1, &[6]), batch(1, 0, &[4]), batch(2, 0, &[5]), batch(1, 1, &[7])];
    let (_, labels) = build_gallery(&batches, 0, &ex, &theta, &shapes).unwrap();
    assert_eq!(labels, vec![4, 7, 5, 6]);
}

#[test]
fn empty_gallery_is_an_error() {
    let (ex, shapes, theta) = identity_setup();
    let err = build_gallery(&[batch(0, 0, &[1])], 0, &ex, &theta, &shapes).unwrap_err();
    assert!(matches!(err, Error::EmptyEval(_)));
}

fn acc(map: f64) -> TaskAccuracy {
    TaskAccuracy {
        map,
        rank1: map,
        rank3: map,
        rank5: map,
    }
}

#[test]
fn average_accuracy_cases() {
    let mut t = AccuracyTimeline::default();
    t.record(0, 0, 0, acc(0.7));
    assert_eq!(avg_accuracy(&t, 0, 0).unwrap(), 0.7);
    t.record(0, 1, 0, acc(0.4));
    t.record(0, 1, 1, acc(0.6));
    assert!((avg_accuracy(&t, 0, 1).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(avg_accuracy(&t, 1, 0), Err(Error::EmptyEval(_))));
}

#[test]
fn average_accuracy_matches_mean_oracle() {
    let mut rng = SeededRng::new(5);
    let mut t = AccuracyTimeline::default();
    let values: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
    for (i, &v) in values.iter().enumerate() {
        t.record(3, 5, i, acc(v));
    }
    let mut sum = 0.0;
    for v in &values {
        sum += v;
    }
    assert!((avg_accuracy(&t, 3, 5).unwrap() - sum / 6.0).abs() <= 1e-12);
}

#[test]
fn forgetting_cases() {
    let mut t = AccuracyTimeline::default();
    t.record(0, 0, 0, acc(0.5));
    assert!(matches!(
        forgetting(&t, 0, 0),
        Err(Error::UndefinedForgetting { tasks: 1, .. })
    ));
    t.record(0, 1, 0, acc(0.8));
    t.record(0, 1, 1, acc(0.3));
    assert_eq!(forgetting(&t, 0, 1).unwrap(), 0.0);
    t.record(0, 2, 0, acc(0.6));
    t.record(0, 2, 1, acc(0.1));
    t.record(0, 2, 2, acc(0.9));
    // task 0: 0.8 -> 0.6, task 1: 0.3 -> 0.1, newest task excluded
    assert!((forgetting(&t, 0, 2).unwrap() - 0.2).abs() < 1e-12);
}

#[test]
fn single_historical_task_forgetting() {
    let mut t = AccuracyTimeline::default();
    t.record(0, 0, 0, acc(0.8));
    t.record(0, 1, 0, acc(0.6));
    t.record(0, 1, 1, acc(0.9));
    assert!((forgetting(&t, 0, 1).unwrap() - 0.2).abs() < 1e-12);
}

#[test]
fn forgetting_matches_max_scan_oracle() {
    let mut rng = SeededRng::new(8);
    let mut t = AccuracyTimeline::default();
    let mut grid = [[f64::NAN; 6]; 6];
    for (round, row) in grid.iter_mut().enumerate() {
        for (task, cell) in row.iter_mut().enumerate().take(round + 1) {
            *cell = rng.uniform();
            t.record(1, round, task, acc(*cell));
        }
    }
    let now = 5;
    let mut total = 0.0;
    for task in 0..now {
        let mut best = grid[task][task];
        for row in grid.iter().take(now + 1).skip(task) {
            if row[task] > best {
                best = row[task];
            }
        }
        total += best - grid[now][task];
    }
    assert!((forgetting(&t, 1, now).unwrap() - total / 5.0).abs() <= 1e-12);
    assert!(forgetting(&t, 1, now).unwrap() >= 0.0);
}

#[test]
fn account_round_cases() {
    let mut ledger = CommLedger::default();
    account_round(&mut ledger, 0, 10, 2, &[]);
    assert!(ledger.is_zero());
    account_round(&mut ledger, 0, 10, 2, &[1]);
    let c = ledger.get(0, 1);
    assert_eq!((c.c2s_floats, c.c2s_bytes()), (12, 48));
    assert_eq!((c.s2c_floats, c.s2c_bytes()), (10, 40));
}

#[test]
fn ledger_totals_match_closed_form() {
    let mut ledger = CommLedger::default();
    let (rounds, clients, p, f) = (6usize, 5usize, 1000usize, 64usize);
    let all: Vec<usize> = (0..clients).collect();
    for r in 0..rounds {
        account_round(&mut ledger, r, p, f, &all);
    }
    let t = ledger.totals();
    assert_eq!(t.c2s_bytes(), (rounds * clients * 4 * (p + f)) as u64);
    assert_eq!(t.s2c_bytes(), (rounds * clients * 4 * p) as u64);
}

#[test]
fn metrics_csv_round_trip() {
    let mut log = MetricsLog::default();
    log.push(0, 1, "fedstil", Metric::Map, Some(0), 0.123456789);
    log.push(0, 1, "fedstil", Metric::AvgMapEq7, None, 0.5);
    log.push(2, 0, "local", Metric::S2cBytes, None, 0.0);
    let text = log.to_csv();
    assert!(text.starts_with("round,client,strategy,metric,task_index,value\n"));
    assert!(text.contains("0,1,fedstil,avg_map_eq7,,0.5\n"));
    assert_eq!(MetricsLog::parse_csv(&text).unwrap(), log);
}

#[test]
fn metrics_csv_rejects_bad_rows() {
    let err = MetricsLog::parse_csv("round,client,strategy,metric,task_index,value\n0,0,x,nope,,1\n")
        .unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }));
    assert!(matches!(MetricsLog::parse_csv(""), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn summary_uses_final_round() {
    let mut log = MetricsLog::default();
    for (round, v) in [(0, 0.2), (1, 0.4)] {
        log.push(round, 0, "s", Metric::AvgMapEq7, None, v);
        log.push(round, 1, "s", Metric::AvgMapEq7, None, v + 0.2);
        log.push(round, 0, "s", Metric::S2cBytes, None, 40.0);
    }
    log.push(1, 0, "s", Metric::Rank1, Some(0), 1.0);
    log.push(1, 0, "s", Metric::Rank1, Some(1), 0.0);
    log.push(1, 1, "s", Metric::Rank1, Some(0), 1.0);
    let s = summarize(&log, "s");
    assert_eq!(s.final_round, Some(1));
    assert!((s.final_avg_map.unwrap() - 0.5).abs() < 1e-12);
    assert!((s.final_rank1.unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(s.total_s2c_bytes, 80);
    assert_eq!(s.final_forgetting, None);
}
