use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use super::lexer::{symbol, tokenize, Keyword, Spanned, Tok};
use super::{Atom, CmpOp, ColumnDef, ColumnRef, ColumnType, ParseError, Predicate, Projection, Select, Statement, Value};

/// Parses one statement, optionally terminated by `;`.
pub fn parse(text: &str) -> Result<Statement, ParseError> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0, end: text.len() + 1, expected: BTreeSet::new() };
    let stmt = p.statement()?;
    p.eat(&Tok::Semi);
    p.expect_end()?;
    Ok(stmt)
}

struct Parser {
    tokens: Vec<Spanned>,
    pos: usize,
    end: usize,
    /// Alternatives tried at the current position, for error reports.
    expected: BTreeSet<String>,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|s| &s.tok)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |s| s.offset)
    }

    fn advance(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).map(|s| s.tok.clone());
        if t.is_some() {
            self.pos += 1;
            self.expected.clear();
        }
        t
    }

    fn note(&mut self, what: &str) {
        self.expected.insert(String::from(what));
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.advance();
            true
        } else {
            self.note(symbol(tok));
            false
        }
    }

    fn eat_kw(&mut self, kw: Keyword) -> bool {
        if self.peek() == Some(&Tok::Keyword(kw)) {
            self.advance();
            true
        } else {
            self.note(kw.name());
            false
        }
    }

    fn error(&mut self) -> ParseError {
        let found = match self.peek() {
            Some(t) => t.describe(),
            None => String::from("end of input"),
        };
        ParseError::Syntax { offset: self.offset(), expected: core::mem::take(&mut self.expected).into_iter().collect(), found }
    }

    fn unsupported(&self, offset: usize, message: &str) -> ParseError {
        ParseError::Unsupported { offset, message: String::from(message) }
    }

    fn expect(&mut self, tok: &Tok) -> Result<(), ParseError> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(self.error())
        }
    }

    fn expect_kw(&mut self, kw: Keyword) -> Result<(), ParseError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(self.error())
        }
    }

    fn expect_end(&mut self) -> Result<(), ParseError> {
        if self.peek().is_none() {
            Ok(())
        } else {
            self.note("end of input");
            Err(self.error())
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        if let Some(Tok::Ident(name)) = self.peek() {
            let name = name.clone();
            self.advance();
            Ok(name)
        } else {
            self.note("identifier");
            Err(self.error())
        }
    }

    fn statement(&mut self) -> Result<Statement, ParseError> {
        if self.eat_kw(Keyword::Select) {
            return self.select().map(Statement::Select);
        }
        if self.eat_kw(Keyword::Insert) {
            return self.insert();
        }
        if self.eat_kw(Keyword::Update) {
            return self.update();
        }
        if self.eat_kw(Keyword::Delete) {
            return self.delete();
        }
        if self.eat_kw(Keyword::Create) {
            return self.create();
        }
        if self.eat_kw(Keyword::Drop) {
            self.expect_kw(Keyword::Table)?;
            return Ok(Statement::DropTable { name: self.ident()? });
        }
        Err(self.error())
    }

    fn column_ref(&mut self) -> Result<ColumnRef, ParseError> {
        let first = self.ident()?;
        if self.eat(&Tok::Dot) {
            let column = self.ident()?;
            Ok(ColumnRef { table: Some(first), column })
        } else {
            Ok(ColumnRef { table: None, column: first })
        }
    }

    fn literal(&mut self) -> Result<Value, ParseError> {
        let negative = self.eat(&Tok::Minus);
        match self.peek().cloned() {
            Some(Tok::Number(digits)) => {
                let offset = self.offset();
                self.advance();
                let magnitude: u64 = digits.parse().map_err(|_| self.out_of_range(offset))?;
                let value = if negative {
                    if magnitude == 1u64 << 63 {
                        i64::MIN
                    } else {
                        -(i64::try_from(magnitude).map_err(|_| self.out_of_range(offset))?)
                    }
                } else {
                    i64::try_from(magnitude).map_err(|_| self.out_of_range(offset))?
                };
                Ok(Value::Int(value))
            }
            Some(Tok::Str(s)) if !negative => {
                self.advance();
                Ok(Value::Text(s))
            }
            _ => {
                self.note("number");
                if !negative {
                    self.note("string literal");
                }
                Err(self.error())
            }
        }
    }

    fn out_of_range(&self, offset: usize) -> ParseError {
        ParseError::Syntax {
            offset,
            expected: alloc::vec![String::from("64-bit integer")],
            found: String::from("out-of-range number"),
        }
    }

    fn cmp_op(&mut self) -> Result<CmpOp, ParseError> {
        let op = match self.peek() {
            Some(Tok::Eq) => CmpOp::Eq,
            Some(Tok::Lt) => CmpOp::Lt,
            Some(Tok::Gt) => CmpOp::Gt,
            Some(Tok::Le) => CmpOp::Le,
            Some(Tok::Ge) => CmpOp::Ge,
            Some(Tok::Ne) => CmpOp::Ne,
            _ => {
                for s in ["=", "<", ">", "<=", ">=", "<>"] {
                    self.note(s);
                }
                return Err(self.error());
            }
        };
        self.advance();
        Ok(op)
    }

    /// Parses `atom (AND atom)*`. Column-to-column atoms are only legal as
    /// equality joins between the two tables of a two-table SELECT.
    fn predicate(&mut self, tables: &[String]) -> Result<Predicate, ParseError> {
        let mut atoms = Vec::new();
        loop {
            let start = self.offset();
            let mut column = self.column_ref()?;
            let op = self.cmp_op()?;
            let rhs_is_column = matches!(self.peek(), Some(Tok::Ident(_)));
            if rhs_is_column {
                let mut right = self.column_ref()?;
                if tables.len() < 2 {
                    return Err(self.unsupported(start, "column comparisons require a two-table SELECT"));
                }
                if op != CmpOp::Eq {
                    return Err(self.unsupported(start, "only equality joins are supported"));
                }
                let (Some(lt), Some(rt)) = (&column.table, &right.table) else {
                    return Err(self.unsupported(start, "join columns must be table-qualified"));
                };
                if lt == rt || !tables.contains(lt) || !tables.contains(rt) {
                    return Err(self.unsupported(start, "join must relate the two tables in FROM"));
                }
                qualify(&mut column, tables);
                qualify(&mut right, tables);
                atoms.push(Atom::Join { left: column, right });
            } else {
                let value = self.literal()?;
                qualify(&mut column, tables);
                atoms.push(Atom::Compare { column, op, value });
            }
            if !self.eat_kw(Keyword::And) {
                break;
            }
        }
        Ok(Predicate { atoms })
    }

    fn where_clause(&mut self, tables: &[String]) -> Result<Option<Predicate>, ParseError> {
        if self.eat_kw(Keyword::Where) {
            Ok(Some(self.predicate(tables)?))
        } else {
            Ok(None)
        }
    }

    fn select(&mut self) -> Result<Select, ParseError> {
        let projection = if self.eat(&Tok::Star) {
            Projection::All
        } else {
            let mut cols = alloc::vec![self.column_ref()?];
            while self.eat(&Tok::Comma) {
                cols.push(self.column_ref()?);
            }
            Projection::Columns(cols)
        };
        self.expect_kw(Keyword::From)?;
        let from_offset = self.offset();
        let mut tables = alloc::vec![self.ident()?];
        while self.eat(&Tok::Comma) {
            let offset = self.offset();
            let t = self.ident()?;
            if tables.len() == 2 {
                return Err(self.unsupported(offset, "at most two tables in FROM"));
            }
            if tables.contains(&t) {
                return Err(self.unsupported(offset, "a table may appear only once in FROM"));
            }
            tables.push(t);
        }
        let projection = match projection {
            Projection::Columns(mut cols) => {
                for c in &mut cols {
                    qualify(c, &tables);
                }
                Projection::Columns(cols)
            }
            all => all,
        };
        let predicate = self.where_clause(&tables)?;
        if tables.len() == 2 {
            let has_join = predicate.as_ref().is_some_and(|p| p.atoms.iter().any(|a| matches!(a, Atom::Join { .. })));
            if !has_join {
                return Err(self.unsupported(from_offset, "two-table SELECT requires an equality join predicate"));
            }
        }
        Ok(Select { projection, tables, predicate })
    }

    fn insert(&mut self) -> Result<Statement, ParseError> {
        self.expect_kw(Keyword::Into)?;
        let table = self.ident()?;
        self.expect_kw(Keyword::Values)?;
        self.expect(&Tok::LParen)?;
        let mut values = alloc::vec![self.literal()?];
        while self.eat(&Tok::Comma) {
            values.push(self.literal()?);
        }
        self.expect(&Tok::RParen)?;
        Ok(Statement::Insert { table, values })
    }

    fn update(&mut self) -> Result<Statement, ParseError> {
        let table = self.ident()?;
        self.expect_kw(Keyword::Set)?;
        let mut assignments = Vec::new();
        loop {
            let col = self.ident()?;
            self.expect(&Tok::Eq)?;
            assignments.push((col, self.literal()?));
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        let tables = [table];
        let predicate = self.where_clause(&tables)?;
        let [table] = tables;
        Ok(Statement::Update { table, assignments, predicate })
    }

    fn delete(&mut self) -> Result<Statement, ParseError> {
        self.expect_kw(Keyword::From)?;
        let tables = [self.ident()?];
        let predicate = self.where_clause(&tables)?;
        let [table] = tables;
        Ok(Statement::Delete { table, predicate })
    }

    fn create(&mut self) -> Result<Statement, ParseError> {
        self.expect_kw(Keyword::Table)?;
        let name = self.ident()?;
        self.expect(&Tok::LParen)?;
        let mut columns: Vec<ColumnDef> = Vec::new();
        loop {
            let offset = self.offset();
            let col = self.ident()?;
            let ty = if self.eat_kw(Keyword::Int) {
                ColumnType::Int
            } else if self.eat_kw(Keyword::Text) {
                ColumnType::Text
            } else {
                return Err(self.error());
            };
            if columns.iter().any(|c| c.name == col) {
                return Err(self.unsupported(offset, "duplicate column name"));
            }
            columns.push(ColumnDef { name: col, ty });
            if !self.eat(&Tok::Comma) {
                break;
            }
        }
        self.expect(&Tok::RParen)?;
        let replication = if self.eat_kw(Keyword::Replication) {
            let offset = self.offset();
            match self.peek().cloned() {
                Some(Tok::Number(d)) => {
                    self.advance();
                    match d.parse::<u32>() {
                        Ok(n) if n > 0 => Some(n),
                        _ => {
                            return Err(ParseError::Syntax {
                                offset,
                                expected: alloc::vec![String::from("positive integer")],
                                found: alloc::format!("number {d}"),
                            })
                        }
                    }
                }
                _ => {
                    self.note("positive integer");
                    return Err(self.error());
                }
            }
        } else {
            None
        };
        Ok(Statement::CreateTable { name, columns, replication })
    }
}

/// Bare references in a single-table statement belong to that table.
fn qualify(col: &mut ColumnRef, tables: &[String]) {
    if col.table.is_none() && tables.len() == 1 {
        col.table = Some(tables[0].clone());
    }
}
