use super::*;
use crate::sql::{parse, ColumnDef, ColumnType, Predicate};
use proptest::prelude::*;

fn addr(s: &str) -> Address {
    Address::new(s)
}

fn info(replicas: &[&str], rows: u64) -> TableInfo {
    TableInfo { replicas: replicas.iter().map(|r| addr(r)).collect(), row_count: rows, stats: AccessStats::default() }
}

fn select(text: &str) -> Select {
    match parse(text).unwrap() {
        Statement::Select(s) => s,
        other => panic!("not a select: {other}"),
    }
}

fn equal_scores(names: &[&str]) -> BTreeMap<Address, AvailabilityScore> {
    names.iter().map(|n| (addr(n), AvailabilityScore(0.5))).collect()
}

#[test]
fn join_runs_where_both_tables_live() {
    let q = select("SELECT * FROM X, Y WHERE X.a_id = Y.a_id");
    let mut tables = BTreeMap::new();
    tables.insert("X".into(), info(&["C", "D"], 10));
    tables.insert("Y".into(), info(&["C"], 10));
    let scores = equal_scores(&["A", "B", "C", "D"]);
    let plan = plan_select(&q, &tables, &scores, &addr("A"), DEFAULT_ALPHA).unwrap();
    assert_eq!(plan.executor, addr("C"));
    assert_eq!(plan.table_sources["X"], addr("C"));
    assert_eq!(plan.table_sources["Y"], addr("C"));
    assert_eq!(plan.lock_set, [("X".into(), LockMode::Read), ("Y".into(), LockMode::Read)]);
    let names: Vec<_> = plan.candidates.iter().map(|c| c.addr.as_str()).collect();
    assert_eq!(names, ["A", "C", "D"]);

    // Empty tables fall back to counting tables.
    tables.insert("X".into(), info(&["C", "D"], 0));
    tables.insert("Y".into(), info(&["C"], 0));
    let plan = plan_select(&q, &tables, &scores, &addr("A"), DEFAULT_ALPHA).unwrap();
    assert_eq!(plan.executor, addr("C"));
    assert_eq!(plan.candidates[2].locality, 0.5);
}

#[test]
fn availability_breaks_equal_locality() {
    let q = select("SELECT * FROM X");
    let mut tables = BTreeMap::new();
    tables.insert("X".into(), info(&["C", "D"], 5));
    let mut scores = BTreeMap::new();
    scores.insert(addr("C"), AvailabilityScore(0.4));
    scores.insert(addr("D"), AvailabilityScore(0.9));
    let plan = plan_select(&q, &tables, &scores, &addr("C"), DEFAULT_ALPHA).unwrap();
    assert_eq!(plan.executor, addr("D"));
    assert_eq!(plan.table_sources["X"], addr("D"));
}

#[test]
fn single_candidate_and_missing_table() {
    let q = select("SELECT * FROM X");
    let mut tables = BTreeMap::new();
    tables.insert("X".into(), info(&["A"], 1));
    let plan = plan_select(&q, &tables, &BTreeMap::new(), &addr("A"), DEFAULT_ALPHA).unwrap();
    assert_eq!(plan.executor, addr("A"));
    assert_eq!(plan.candidates.len(), 1);
    let q = select("SELECT * FROM Z");
    assert_eq!(plan_select(&q, &tables, &BTreeMap::new(), &addr("A"), 0.7).unwrap_err().kind, ErrorKind::NoSuchTable);
}

#[test]
fn remote_table_uses_read_replica_rule() {
    let q = select("SELECT * FROM X, Y WHERE X.a = Y.a");
    let mut tables = BTreeMap::new();
    tables.insert("X".into(), info(&["C"], 100));
    tables.insert("Y".into(), info(&["D", "E"], 1));
    let mut scores = equal_scores(&["C", "D", "E"]);
    scores.insert(addr("E"), AvailabilityScore(0.6));
    let plan = plan_select(&q, &tables, &scores, &addr("A"), DEFAULT_ALPHA).unwrap();
    assert_eq!(plan.executor, addr("C"));
    assert_eq!(plan.table_sources["Y"], addr("E"));
}

#[test]
fn lock_sets_are_sorted() {
    let s = parse("SELECT * FROM Y, X WHERE Y.a = X.a").unwrap();
    assert_eq!(lock_set(&s), [("X".into(), LockMode::Read), ("Y".into(), LockMode::Read)]);
    let s = parse("DELETE FROM X").unwrap();
    assert_eq!(lock_set(&s), [("X".into(), LockMode::Write)]);
}

fn schema(name: &str, cols: &[(&str, ColumnType)]) -> TableSchema {
    TableSchema::new(name, cols.iter().map(|(n, t)| ColumnDef { name: (*n).into(), ty: *t }).collect()).unwrap()
}

fn rows(vals: &[Vec<Value>]) -> Vec<Row> {
    vals.iter().enumerate().map(|(i, v)| Row { id: i as u64 + 1, values: v.clone() }).collect()
}

#[test]
fn minimal_join() {
    let mut data = Materialized::new();
    data.insert("X".into(), (schema("X", &[("a_id", ColumnType::Int)]), rows(&[alloc::vec![Value::Int(1)]])));
    data.insert("Y".into(), (schema("Y", &[("a_id", ColumnType::Int)]), rows(&[alloc::vec![Value::Int(1)]])));
    let rs = evaluate_select(&select("SELECT * FROM X, Y WHERE X.a_id = Y.a_id"), &data).unwrap();
    assert_eq!(rs.columns, ["X.a_id", "Y.a_id"]);
    assert_eq!(rs.rows, [[Value::Int(1), Value::Int(1)]]);
}

#[test]
fn bind_errors() {
    let mut data = Materialized::new();
    data.insert("X".into(), (schema("X", &[("a", ColumnType::Int)]), Vec::new()));
    data.insert("Y".into(), (schema("Y", &[("a", ColumnType::Int)]), Vec::new()));
    let e = evaluate_select(&select("SELECT * FROM X WHERE X.b = 1"), &data).unwrap_err();
    assert_eq!(e.kind, ErrorKind::Bind);
    let e = evaluate_select(&select("SELECT * FROM X WHERE X.a = 'x'"), &data).unwrap_err();
    assert_eq!(e.kind, ErrorKind::Bind);
    let e = evaluate_select(&select("SELECT * FROM Z"), &data).unwrap_err();
    assert_eq!(e.kind, ErrorKind::NoSuchTable);
}

#[test]
fn explain_prefix() {
    assert_eq!(split_explain("EXPLAIN SELECT * FROM X"), (true, " SELECT * FROM X"));
    assert_eq!(split_explain("  explain\tSELECT 1"), (true, "\tSELECT 1"));
    assert_eq!(split_explain("EXPLAINED"), (false, "EXPLAINED"));
    assert_eq!(split_explain("SELECT * FROM X"), (false, "SELECT * FROM X"));
}

#[test]
fn txn_context_is_two_phase() {
    let mut t = TxnContext::new("n1:1".into());
    t.note_acquired("X", LockMode::Read).unwrap();
    assert_eq!(t.finish(true), [("X".into(), LockMode::Read)]);
    assert_eq!(t.state, TxnState::Committed);
    assert!(t.note_acquired("Y", LockMode::Read).is_err());
}

// Independent oracle: nested loops over the cross product, predicate
// evaluated atom by atom on qualified names.
fn oracle(sel: &Select, data: &Materialized) -> Vec<Vec<Value>> {
    let lookup = |tuple: &[(&str, &TableSchema, &Row)], c: &ColumnRef| -> Value {
        for (t, s, r) in tuple {
            if c.table.as_deref().is_none_or(|q| q == *t) {
                if let Some(i) = s.columns.iter().position(|d| d.name == c.column) {
                    return r.values[i].clone();
                }
            }
        }
        panic!("unresolved {c}")
    };
    let mut tuples: Vec<Vec<(&str, &TableSchema, &Row)>> = alloc::vec![Vec::new()];
    for t in &sel.tables {
        let (s, rs) = &data[t];
        let mut next = Vec::new();
        for prefix in &tuples {
            for r in rs {
                let mut v = prefix.clone();
                v.push((t.as_str(), s, r));
                next.push(v);
            }
        }
        tuples = next;
    }
    let mut out = Vec::new();
    for tuple in tuples {
        let ok = sel.predicate.iter().flat_map(|p| p.atoms.iter()).all(|a| match a {
            Atom::Compare { column, op, value } => op.holds(lookup(&tuple, column).cmp(value)),
            Atom::Join { left, right } => lookup(&tuple, left) == lookup(&tuple, right),
        });
        if ok {
            out.push(match &sel.projection {
                Projection::All => tuple.iter().flat_map(|(_, _, r)| r.values.clone()).collect(),
                Projection::Columns(cs) => cs.iter().map(|c| lookup(&tuple, c)).collect(),
            });
        }
    }
    out
}

fn table_rows(n: usize) -> impl Strategy<Value = Vec<(i64, i64, String)>> {
    proptest::collection::vec((0i64..6, 0i64..6, "[ab]{0,2}"), 0..n)
}

fn op() -> impl Strategy<Value = CmpOp> {
    prop_oneof![
        Just(CmpOp::Eq),
        Just(CmpOp::Lt),
        Just(CmpOp::Gt),
        Just(CmpOp::Le),
        Just(CmpOp::Ge),
        Just(CmpOp::Ne)
    ]
}

proptest! {
    #[test]
    fn evaluator_matches_nested_loops(
        xs in table_rows(100),
        ys in table_rows(100),
        join_col in prop_oneof![Just("a"), Just("b")],
        xfilter in proptest::option::of((op(), 0i64..6)),
        yfilter in proptest::option::of((op(), "[ab]{0,2}")),
        two in any::<bool>(),
        project in any::<bool>(),
    ) {
        let cols = [("a", ColumnType::Int), ("b", ColumnType::Int), ("s", ColumnType::Text)];
        let to_rows = |v: &[(i64, i64, String)]| {
            rows(&v.iter().map(|(a, b, s)| alloc::vec![Value::Int(*a), Value::Int(*b), Value::Text(s.clone())]).collect::<Vec<_>>())
        };
        let mut data = Materialized::new();
        data.insert("X".into(), (schema("X", &cols), to_rows(&xs)));
        data.insert("Y".into(), (schema("Y", &cols), to_rows(&ys)));
        let mut atoms = Vec::new();
        if let Some((o, v)) = xfilter {
            atoms.push(Atom::Compare { column: ColumnRef::new("X", "a"), op: o, value: Value::Int(v) });
        }
        let tables = if two {
            atoms.push(Atom::Join { left: ColumnRef::new("X", join_col), right: ColumnRef::new("Y", "b") });
            if let Some((o, v)) = yfilter {
                atoms.push(Atom::Compare { column: ColumnRef::new("Y", "s"), op: o, value: Value::Text(v) });
            }
            alloc::vec!["X".into(), "Y".into()]
        } else {
            alloc::vec!["X".into()]
        };
        let projection = if project {
            let mut cs = alloc::vec![ColumnRef::new("X", "s")];
            if two { cs.push(ColumnRef::new("Y", "a")); }
            Projection::Columns(cs)
        } else {
            Projection::All
        };
        let sel = Select { projection, tables, predicate: (!atoms.is_empty()).then_some(Predicate { atoms }) };
        // Round-trip through text so the oracle sees what a client would send.
        let sel = select(&Statement::Select(sel).to_string());
        let got = evaluate_select(&sel, &data).unwrap();
        prop_assert_eq!(got.rows, oracle(&sel, &data));
    }

    #[test]
    fn planning_is_deterministic(
        xr in proptest::collection::btree_set("[A-E]", 1..4),
        yr in proptest::collection::btree_set("[A-E]", 1..4),
        counts in (0u64..50, 0u64..50),
        sc in proptest::collection::vec(0u32..=4, 5),
    ) {
        let q = select("SELECT * FROM X, Y WHERE X.a = Y.a");
        let mk = |s: &alloc::collections::BTreeSet<String>, n| TableInfo {
            replicas: s.iter().map(|a| addr(a)).collect(),
            row_count: n,
            stats: AccessStats::default(),
        };
        let mut tables = BTreeMap::new();
        tables.insert("X".into(), mk(&xr, counts.0));
        tables.insert("Y".into(), mk(&yr, counts.1));
        let scores: BTreeMap<_, _> = ["A", "B", "C", "D", "E"]
            .iter()
            .zip(&sc)
            .map(|(a, s)| (addr(a), AvailabilityScore(*s as f64 / 4.0)))
            .collect();
        let p1 = plan_select(&q, &tables, &scores, &addr("A"), DEFAULT_ALPHA).unwrap();
        let p2 = plan_select(&q, &tables.clone(), &scores.clone(), &addr("A"), DEFAULT_ALPHA).unwrap();
        prop_assert_eq!(&p1, &p2);
        let best = p1.candidates.iter().map(|c| c.combined).fold(f64::MIN, f64::max);
        let chosen = p1.candidates.iter().find(|c| c.addr == p1.executor).unwrap();
        prop_assert_eq!(chosen.combined, best);
    }
}
