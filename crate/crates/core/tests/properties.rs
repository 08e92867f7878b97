//! Property tests for the invariants the engine relies on.

use std::collections::BTreeSet;

use codewrangle_core::consensus::{compute_accuracy, consensus, is_abstention, normalize, SnippetOutputs};
use codewrangle_core::kb::{Embedder, HashingEmbedder};
use codewrangle_core::prompt::parse_code;
use codewrangle_core::relevance::binning::quantile_edges;
use codewrangle_core::relevance::{FeatureBinning, NULL_BIN};
use codewrangle_core::safety::safety_scan;
use codewrangle_core::sampling::kmeans;
use codewrangle_core::synth::fenced;
use codewrangle_core::table::{format_rows, make_folds, parse_table, table_to_csv, Table, DEFAULT_NULL_TOKENS};
use proptest::prelude::*;

fn cell() -> impl Strategy<Value = Option<String>> {
    prop_oneof![
        1 => Just(None),
        6 => "[a-zA-Z0-9 ,;:\"'_.-]{1,10}"
            .prop_filter("null tokens read back as NULL", |s| !DEFAULT_NULL_TOKENS.contains(&s.trim()))
            .prop_map(Some),
    ]
}

fn table() -> impl Strategy<Value = Table> {
    (1usize..6, 1usize..20).prop_flat_map(|(cols, rows)| {
        (
            proptest::collection::btree_set("[a-z]{1,6}", cols),
            proptest::collection::vec(proptest::collection::vec(cell(), cols), rows),
        )
            .prop_map(|(names, rows)| Table::new("t", names.into_iter().collect(), rows).unwrap())
    })
}

proptest! {
    #[test]
    fn csv_round_trip(t in table()) {
        let text = table_to_csv(&t).unwrap();
        let back = parse_table("t", &text, &DEFAULT_NULL_TOKENS).unwrap();
        prop_assert_eq!(back.columns(), t.columns());
        prop_assert_eq!(back.rows(), t.rows());
    }

    #[test]
    fn folds_partition_rows(n in 2usize..300, k in 2usize..11, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let plan = make_folds(n, k, seed).unwrap();
        let mut seen = vec![0; n];
        for f in 0..k {
            let holdout = plan.holdout(f);
            let training = plan.training(f);
            prop_assert_eq!(holdout.len() + training.len(), n);
            for &r in &holdout {
                seen[r] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(make_folds(n, k, seed).unwrap(), plan);
    }

    #[test]
    fn formatted_rows_parse_back(t in table(), header in any::<bool>()) {
        let picks: Vec<usize> = (0..t.row_count()).rev().collect();
        let text = format_rows(&t, &picks, header);
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b';')
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
        let mut expected: Vec<Vec<String>> = Vec::new();
        if header {
            expected.push(t.columns().to_vec());
        }
        for &r in &picks {
            expected.push(t.row(r).iter().map(|c| c.clone().unwrap_or_default()).collect());
        }
        // A lone empty cell serializes to an empty line, which CSV readers skip.
        expected.retain(|r| !(r.len() == 1 && r[0].is_empty()));
        let got: Vec<Vec<String>> = records.iter().map(|r| r.iter().map(str::to_string).collect()).collect();
        prop_assert_eq!(got, expected);
        // One line per row (no cell here holds a newline), nothing trailing.
        prop_assert_eq!(text.split('\n').count(), picks.len() + header as usize);
    }

    #[test]
    fn fenced_snippets_parse_to_themselves(body in "[a-z_]{1,8}( [+*-] [0-9]{1,3})?", pre in "[A-Za-z .]{0,30}") {
        let src = format!("def transform(row):\n    x = row.get(\"a\")\n    return str({body})");
        prop_assert_eq!(parse_code(&format!("{pre}\n```python\n{src}\n```\ntrailing")), Some(src.clone()));
        prop_assert_eq!(parse_code(&fenced(&src)), Some(src.clone()));
        prop_assert_eq!(parse_code(&src), Some(src));
    }

    #[test]
    fn consensus_invariants(
        matrix in proptest::collection::vec(
            proptest::collection::vec(proptest::option::of(prop_oneof![
                Just("x".to_string()), Just("X ".to_string()), Just("y".to_string()),
                Just("Unknown".to_string()), Just(String::new()),
            ]), 12),
            1..7,
        ),
        accs in proptest::collection::vec(0u8..4, 7),
        rotate in 0usize..7,
    ) {
        let outputs: Vec<SnippetOutputs> = matrix
            .iter()
            .enumerate()
            .map(|(i, values)| SnippetOutputs {
                fold_id: i as i64,
                validation_accuracy: 0.9 + accs[i] as f64 * 0.03,
                values: values.clone(),
            })
            .collect();
        let c = consensus(&outputs);
        for row in 0..12 {
            let votes: Vec<String> = outputs
                .iter()
                .filter_map(|o| o.values[row].clone())
                .filter(|v| !is_abstention(v))
                .collect();
            match c.per_row.get(&row) {
                None => {
                    prop_assert!(votes.is_empty());
                    prop_assert!(c.abstained.contains(&row));
                }
                Some(w) => {
                    prop_assert!(votes.contains(&w.value));
                    let key = normalize(&w.value);
                    prop_assert_eq!(votes.iter().filter(|v| normalize(v) == key).count(), w.votes);
                    let groups: BTreeSet<String> = votes.iter().map(|v| normalize(v)).collect();
                    for g in groups {
                        prop_assert!(votes.iter().filter(|v| normalize(v) == g).count() <= w.votes);
                    }
                }
            }
        }
        // Fold ids are distinct, so snippet order cannot matter.
        let mut rotated = outputs.clone();
        rotated.rotate_left(rotate % outputs.len());
        let r = consensus(&rotated);
        for row in 0..12 {
            prop_assert_eq!(r.value(row), c.value(row));
        }
    }

    #[test]
    fn accuracy_is_a_fraction(pairs in proptest::collection::vec((proptest::option::of("[ab]"), "[ab]"), 1..50)) {
        let (p, t): (Vec<Option<String>>, Vec<String>) = pairs.into_iter().unzip();
        let a = compute_accuracy(&p, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn ordinal_bins_are_monotone(mut values in proptest::collection::vec(-1e6f64..1e6, 1..600)) {
        values.sort_by(f64::total_cmp);
        let binning = FeatureBinning::Ordinal { edges: quantile_edges(&values), temporal: false };
        let bins: Vec<u8> = values.iter().map(|v| binning.bin_of(Some(&v.to_string()))).collect();
        prop_assert!(bins.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(bins.iter().all(|&b| b < NULL_BIN));
        prop_assert_eq!(binning.bin_of(None), NULL_BIN);
        prop_assert_eq!(binning.bin_of(Some("not a number")), NULL_BIN);
    }

    #[test]
    fn embeddings_are_unit_or_zero(texts in proptest::collection::vec("[ -~]{0,20}", 0..5)) {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let v = HashingEmbedder::default().embed(&refs);
        prop_assert!(v.is_zero() || (v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kmeans_inertia_never_increases(
        points in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 5..80),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let m = kmeans(&points, k, seed, 50, 0.0);
        prop_assert!(m.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        prop_assert!(m.assignment.iter().all(|&a| a < k));
    }

    #[test]
    fn dunder_access_always_rejected(name in "[a-z]{1,8}") {
        let src = format!("def transform(row):\n    return row.__{name}__\n");
        prop_assert!(!safety_scan(&src).passed());
    }
}
