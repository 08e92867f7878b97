//! Seeded synthetic datasets with known answers, used by tests, benchmarks
//! and the command-line demo.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sandbox::{RowOutcome, RowValues};
use crate::table::{Cell, Table};

pub const STORES_TARGET: &str = "24-Hour Service";
pub const STORES_OPENING: &str = "Opening Time";
pub const STORES_CLOSING: &str = "Closing Time";

const CITIES: &[&str] = &[
    "Austin", "Boston", "Chicago", "Denver", "Fresno", "Houston", "Miami", "Omaha", "Portland",
    "Raleigh", "Seattle", "Tucson",
];
const DAY_OPENINGS: &[&str] = &["06:00", "07:00", "07:30", "08:00", "09:00", "10:00"];
const DAY_CLOSINGS: &[&str] = &["17:00", "18:00", "20:00", "21:00", "22:00", "23:00"];

/// Python rule for the stores fixture: a store is open around the clock
/// exactly when it both opens and closes at midnight.
pub const STORES_RULE: &str = r#"def transform(row):
    opening = row.get("Opening Time")
    closing = row.get("Closing Time")
    if opening is None or closing is None:
        return "Unknown"
    if opening == "00:00" and closing == "00:00":
        return "True"
    return "False""#;

/// A plausible but wrong first attempt: either end at midnight.
pub const STORES_NEAR_MISS: &str = r#"def transform(row):
    opening = row.get("Opening Time")
    closing = row.get("Closing Time")
    if opening == "00:00" or closing == "00:00":
        return "True"
    return "False""#;

/// In-process equivalent of [`STORES_RULE`].
pub fn stores_rule(row: &RowValues) -> RowOutcome {
    let get = |c: &str| row.get(c).cloned().flatten();
    Ok(match (get(STORES_OPENING), get(STORES_CLOSING)) {
        (Some(o), Some(c)) if o == "00:00" && c == "00:00" => "True",
        (Some(_), Some(_)) => "False",
        _ => "Unknown",
    }
    .to_string())
}

/// In-process equivalent of [`STORES_NEAR_MISS`].
pub fn stores_near_miss(row: &RowValues) -> RowOutcome {
    let midnight = |c: &str| row.get(c).cloned().flatten().as_deref() == Some("00:00");
    Ok(if midnight(STORES_OPENING) || midnight(STORES_CLOSING) { "True" } else { "False" }.to_string())
}

/// Wraps a snippet the way a model reply would.
pub fn fenced(source: &str) -> String {
    format!("Here is the function.\n\n```python\n{source}\n```\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoresFixture {
    pub clean: Table,
    /// `clean` with the target blanked on `masked_rows`.
    pub dirty: Table,
    pub masked_rows: Vec<usize>,
}

/// Store directory where about 30% of stores run 24 hours; 10% open at
/// midnight but close in the evening, 10% open in the morning and close at
/// midnight.
pub fn stores(n_rows: usize, n_masked: usize, seed: u64) -> StoresFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<String> = ["Store ID", "City", STORES_OPENING, STORES_CLOSING, "Phone", STORES_TARGET]
        .iter()
        .map(|c| c.to_string())
        .collect();
    let mut rows = Vec::with_capacity(n_rows);
    for i in 0..n_rows {
        let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.gen_range(0..xs.len())].to_string();
        let roll: f64 = rng.gen();
        let (opening, closing) = if roll < 0.3 {
            ("00:00".to_string(), "00:00".to_string())
        } else if roll < 0.4 {
            ("00:00".to_string(), pick(&mut rng, DAY_CLOSINGS))
        } else if roll < 0.5 {
            (pick(&mut rng, DAY_OPENINGS), "00:00".to_string())
        } else {
            (pick(&mut rng, DAY_OPENINGS), pick(&mut rng, DAY_CLOSINGS))
        };
        let always = opening == "00:00" && closing == "00:00";
        rows.push(vec![
            Some(format!("S{:05}", i + 1)),
            Some(pick(&mut rng, CITIES)),
            Some(opening),
            Some(closing),
            Some(format!("555-{:03}-{:04}", rng.gen_range(100..1000), rng.gen_range(0..10_000))),
            Some(if always { "True" } else { "False" }.to_string()),
        ]);
    }
    let clean = Table::new("stores", columns, rows).expect("fixed shape");
    let mut masked_rows = sample(&mut rng, n_rows, n_masked.min(n_rows)).into_vec();
    masked_rows.sort_unstable();
    let dirty = blank_cells(&clean, STORES_TARGET, &masked_rows);
    StoresFixture {
        clean,
        dirty,
        masked_rows,
    }
}

fn blank_cells(t: &Table, column: &str, rows: &[usize]) -> Table {
    let c = t.column_index(column).expect("fixture column");
    let mut values: Vec<Cell> = t.column_values(c).map(|v| v.map(str::to_string)).collect();
    for &r in rows {
        values[r] = None;
    }
    t.with_column_values(c, values)
}

/// Flips the stores target on `n_cells` random rows. Returns the corrupted
/// table and the sorted corrupted rows.
pub fn corrupt_stores(clean: &Table, n_cells: usize, seed: u64) -> (Table, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = clean.column_index(STORES_TARGET).expect("stores table");
    let mut rows = sample(&mut rng, clean.row_count(), n_cells.min(clean.row_count())).into_vec();
    rows.sort_unstable();
    let mut values: Vec<Cell> = clean.column_values(c).map(|v| v.map(str::to_string)).collect();
    for &r in &rows {
        values[r] = values[r].as_deref().map(|v| if v == "True" { "False" } else { "True" }.to_string());
    }
    (clean.with_column_values(c, values), rows)
}

pub const LABEL_COPY_TARGET: &str = "label";

/// `n_features` feature columns `f00..`, one of which (returned) is an exact
/// copy of the four-class `label`. The rest are independent noise, half
/// numeric and half categorical.
pub fn label_copy(n_rows: usize, n_features: usize, seed: u64) -> (Table, String) {
    assert!(n_features >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let copy = rng.gen_range(0..n_features);
    let mut columns: Vec<String> = (0..n_features).map(|i| format!("f{i:02}")).collect();
    columns.push(LABEL_COPY_TARGET.to_string());
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let label = format!("class_{}", rng.gen_range(0..4));
        let mut row: Vec<Cell> = (0..n_features)
            .map(|f| {
                Some(if f == copy {
                    label.clone()
                } else if f % 2 == 0 {
                    format!("{:.3}", rng.gen_range(0.0..1000.0))
                } else {
                    format!("cat_{}", rng.gen_range(0..8))
                })
            })
            .collect();
        row.push(Some(label));
        rows.push(row);
    }
    let name = columns[copy].clone();
    (Table::new("label_copy", columns, rows).expect("fixed shape"), name)
}

pub const THREE_PATTERNS: [[&str; 3]; 3] = [
    ["00:00", "00:00", "True"],
    ["09:00", "17:30", "False"],
    ["06:45", "23:15", "False"],
];

/// `copies` repetitions of three distinct rows; row `i` has pattern `i % 3`.
pub fn three_patterns(copies: usize) -> Table {
    let rows: Vec<Vec<Cell>> = (0..copies * 3)
        .map(|i| THREE_PATTERNS[i % 3].iter().map(|v| Some(v.to_string())).collect())
        .collect();
    Table::new(
        "patterns",
        vec!["Opening Time".into(), "Closing Time".into(), "24-Hour Service".into()],
        rows,
    )
    .expect("fixed shape")
}
