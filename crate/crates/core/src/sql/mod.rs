//! The SQL subset: AST, a hand-written LL parser and a canonical printer.
//!
//! `parse(&stmt.to_string())` reproduces `stmt` for every valid AST. In
//! single-table statements the parser qualifies bare column references with
//! the table name, which is also how the printer writes them.

mod lexer;
mod parser;

pub use lexer::is_keyword;
pub use parser::parse;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColumnType {
    #[serde(rename = "INT")]
    Int,
    #[serde(rename = "TEXT")]
    Text,
}

/// A literal or stored cell value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Text(String),
}

impl Value {
    pub fn column_type(&self) -> ColumnType {
        match self {
            Value::Int(_) => ColumnType::Int,
            Value::Text(_) => ColumnType::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ColumnRef {
    pub table: Option<String>,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: &str, column: &str) -> Self {
        ColumnRef { table: Some(table.into()), column: column.into() }
    }

    pub fn bare(column: &str) -> Self {
        ColumnRef { table: None, column: column.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Lt,
    Gt,
    Le,
    Ge,
    Ne,
}

impl CmpOp {
    pub fn holds(self, ord: core::cmp::Ordering) -> bool {
        use core::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Gt => ord == Greater,
            CmpOp::Le => ord != Greater,
            CmpOp::Ge => ord != Less,
            CmpOp::Ne => ord != Equal,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Ne => "<>",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Atom {
    Compare { column: ColumnRef, op: CmpOp, value: Value },
    /// Equality between columns of two distinct tables.
    Join { left: ColumnRef, right: ColumnRef },
}

/// Conjunction of atoms.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Predicate {
    pub atoms: Vec<Atom>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Projection {
    All,
    Columns(Vec<ColumnRef>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Select {
    pub projection: Projection,
    pub tables: Vec<String>,
    pub predicate: Option<Predicate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Statement {
    CreateTable { name: String, columns: Vec<ColumnDef>, replication: Option<u32> },
    DropTable { name: String },
    Insert { table: String, values: Vec<Value> },
    Select(Select),
    Update { table: String, assignments: Vec<(String, Value)>, predicate: Option<Predicate> },
    Delete { table: String, predicate: Option<Predicate> },
}

impl Statement {
    /// Tables the statement reads or writes, in source order.
    pub fn tables(&self) -> Vec<&str> {
        match self {
            Statement::CreateTable { name, .. } | Statement::DropTable { name } => alloc::vec![name.as_str()],
            Statement::Insert { table, .. } | Statement::Update { table, .. } | Statement::Delete { table, .. } => {
                alloc::vec![table.as_str()]
            }
            Statement::Select(sel) => sel.tables.iter().map(String::as_str).collect(),
        }
    }

    pub fn is_write(&self) -> bool {
        matches!(self, Statement::Insert { .. } | Statement::Update { .. } | Statement::Delete { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    /// `offset` is 1-based; end of input is reported as `len + 1`.
    #[error("syntax error at offset {offset}: expected one of {expected:?}, found {found}")]
    Syntax { offset: usize, expected: Vec<String>, found: String },
    #[error("unsupported at offset {offset}: {message}")]
    Unsupported { offset: usize, message: String },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. } | ParseError::Unsupported { offset, .. } => *offset,
        }
    }
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnType::Int => "INT",
            ColumnType::Text => "TEXT",
        })
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Text(s) => {
                f.write_str("'")?;
                for part in s.split('\'').enumerate() {
                    if part.0 > 0 {
                        f.write_str("''")?;
                    }
                    f.write_str(part.1)?;
                }
                f.write_str("'")
            }
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.table {
            Some(t) => write!(f, "{t}.{}", self.column),
            None => f.write_str(&self.column),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Compare { column, op, value } => write!(f, "{column} {} {value}", op.symbol()),
            Atom::Join { left, right } => write!(f, "{left} = {right}"),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_list(f, &self.atoms, " AND ")
    }
}

fn write_list<T: fmt::Display>(f: &mut fmt::Formatter<'_>, items: &[T], sep: &str) -> fmt::Result {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(sep)?;
        }
        write!(f, "{item}")?;
    }
    Ok(())
}

fn write_where(f: &mut fmt::Formatter<'_>, pred: &Option<Predicate>) -> fmt::Result {
    match pred {
        Some(p) => write!(f, " WHERE {p}"),
        None => Ok(()),
    }
}

impl fmt::Display for Select {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SELECT ")?;
        match &self.projection {
            Projection::All => f.write_str("*")?,
            Projection::Columns(cols) => write_list(f, cols, ", ")?,
        }
        f.write_str(" FROM ")?;
        write_list(f, &self.tables, ", ")?;
        write_where(f, &self.predicate)
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::CreateTable { name, columns, replication } => {
                write!(f, "CREATE TABLE {name} (")?;
                for (i, c) in columns.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{} {}", c.name, c.ty)?;
                }
                f.write_str(")")?;
                if let Some(rf) = replication {
                    write!(f, " REPLICATION {rf}")?;
                }
                Ok(())
            }
            Statement::DropTable { name } => write!(f, "DROP TABLE {name}"),
            Statement::Insert { table, values } => {
                write!(f, "INSERT INTO {table} VALUES (")?;
                write_list(f, values, ", ")?;
                f.write_str(")")
            }
            Statement::Select(sel) => write!(f, "{sel}"),
            Statement::Update { table, assignments, predicate } => {
                write!(f, "UPDATE {table} SET ")?;
                for (i, (col, v)) in assignments.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{col} = {v}")?;
                }
                write_where(f, predicate)
            }
            Statement::Delete { table, predicate } => {
                write!(f, "DELETE FROM {table}")?;
                write_where(f, predicate)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn ident() -> impl Strategy<Value = String> {
        "[A-Za-z_][A-Za-z0-9_]{0,6}".prop_filter("reserved", |s| !is_keyword(s))
    }

    fn value() -> impl Strategy<Value = Value> {
        prop_oneof![any::<i64>().prop_map(Value::Int), ".{0,8}".prop_map(Value::Text)]
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

    fn compare(tables: Vec<String>) -> impl Strategy<Value = Atom> {
        let single = tables.len() == 1;
        (proptest::sample::select(tables), any::<bool>(), ident(), op(), value()).prop_map(
            move |(t, qualified, column, op, value)| {
                let table = if single || qualified { Some(t) } else { None };
                Atom::Compare { column: ColumnRef { table, column }, op, value }
            },
        )
    }

    fn single_pred(table: String) -> impl Strategy<Value = Option<Predicate>> {
        proptest::option::of(proptest::collection::vec(compare(vec![table]), 1..4).prop_map(|atoms| Predicate { atoms }))
    }

    fn statement() -> impl Strategy<Value = Statement> {
        let create = (ident(), proptest::collection::btree_map(ident(), any::<bool>(), 1..5), proptest::option::of(1u32..9))
            .prop_map(|(name, cols, replication)| Statement::CreateTable {
                name,
                columns: cols
                    .into_iter()
                    .map(|(name, int)| ColumnDef { name, ty: if int { ColumnType::Int } else { ColumnType::Text } })
                    .collect(),
                replication,
            });
        let drop = ident().prop_map(|name| Statement::DropTable { name });
        let insert = (ident(), proptest::collection::vec(value(), 1..5))
            .prop_map(|(table, values)| Statement::Insert { table, values });
        let update = ident().prop_flat_map(|t| {
            (Just(t.clone()), proptest::collection::vec((ident(), value()), 1..4), single_pred(t))
                .prop_map(|(table, assignments, predicate)| Statement::Update { table, assignments, predicate })
        });
        let delete = ident().prop_flat_map(|t| {
            (Just(t.clone()), single_pred(t)).prop_map(|(table, predicate)| Statement::Delete { table, predicate })
        });
        let select1 = ident().prop_flat_map(|t| {
            let cols = proptest::option::of(proptest::collection::vec(ident(), 1..4));
            (Just(t.clone()), cols, single_pred(t)).prop_map(|(t, cols, predicate)| {
                let projection = match cols {
                    None => Projection::All,
                    Some(c) => Projection::Columns(c.iter().map(|c| ColumnRef::new(&t, c)).collect()),
                };
                Statement::Select(Select { projection, tables: vec![t], predicate })
            })
        });
        let select2 = (ident(), ident()).prop_filter("distinct", |(a, b)| a != b).prop_flat_map(|(a, b)| {
            let tables = vec![a.clone(), b.clone()];
            let cols = proptest::option::of(proptest::collection::vec(
                (proptest::option::of(proptest::sample::select(tables.clone())), ident())
                    .prop_map(|(table, column)| ColumnRef { table, column }),
                1..4,
            ));
            let join = (ident(), ident(), any::<bool>()).prop_map({
                let (a, b) = (a.clone(), b.clone());
                move |(x, y, flip)| {
                    let (l, r) = if flip { (&b, &a) } else { (&a, &b) };
                    Atom::Join { left: ColumnRef::new(l, &x), right: ColumnRef::new(r, &y) }
                }
            });
            let extra = proptest::collection::vec(compare(tables.clone()), 0..3);
            (Just(tables), cols, join, extra).prop_map(|(tables, cols, join, mut extra)| {
                extra.insert(0, join);
                Statement::Select(Select {
                    projection: cols.map_or(Projection::All, Projection::Columns),
                    tables,
                    predicate: Some(Predicate { atoms: extra }),
                })
            })
        });
        prop_oneof![create, drop, insert, update, delete, select1, select2]
    }

    proptest! {
        #[test]
        fn parse_inverts_print(stmt in statement()) {
            let text = stmt.to_string();
            let back = parse(&text).map_err(|e| TestCaseError::fail(alloc::format!("{text}: {e}")))?;
            prop_assert_eq!(&back, &stmt);
            prop_assert_eq!(back.to_string(), text);
        }

        #[test]
        fn parse_is_total(input in ".{0,64}") {
            let _ = parse(&input);
        }
    }
}
