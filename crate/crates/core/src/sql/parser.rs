//! Recursive-descent parser for the supported SELECT subset.
//!
//! Anything outside the subset is rejected with a parse error instead of
//! being approximated.

use super::ast::*;
use super::lexer::{tokenize, Token, TokenKind};
use super::SqlError;

const RESERVED: &[&str] = &[
    "SELECT", "FROM", "WHERE", "GROUP", "BY", "HAVING", "ORDER", "LIMIT", "OFFSET", "JOIN", "INNER", "LEFT",
    "OUTER", "RIGHT", "FULL", "CROSS", "NATURAL", "ON", "USING", "AND", "OR", "NOT", "IN", "IS", "NULL", "AS",
    "UNION", "INTERSECT", "EXCEPT", "ALL", "DISTINCT", "ASC", "DESC", "LIKE", "BETWEEN", "EXISTS", "CASE", "WHEN",
    "THEN", "ELSE", "END", "WITH", "INSERT", "UPDATE", "DELETE", "CREATE", "DROP",
];

fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|r| r.eq_ignore_ascii_case(word))
}

pub fn parse_query(sql: &str) -> Result<Query, SqlError> {
    let tokens = tokenize(sql)?;
    if tokens.is_empty() {
        return Err(SqlError::Empty);
    }
    let mut parser = Parser { tokens, pos: 0, end: sql.len() };
    let query = parser.query()?;
    parser.eat_symbol(";");
    if let Some(tok) = parser.peek() {
        return Err(SqlError::parse(tok.offset, format!("unexpected trailing input {:?}", tok.text)));
    }
    Ok(query)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_at(&self, ahead: usize) -> Option<&Token> {
        self.tokens.get(self.pos + ahead)
    }

    fn offset(&self) -> usize {
        self.peek().map_or(self.end, |t| t.offset)
    }

    fn error<T>(&self, msg: impl Into<String>) -> Result<T, SqlError> {
        Err(SqlError::parse(self.offset(), msg))
    }

    fn next(&mut self) -> Option<Token> {
        let tok = self.tokens.get(self.pos).cloned();
        if tok.is_some() {
            self.pos += 1;
        }
        tok
    }

    fn at_keyword(&self, kw: &str) -> bool {
        self.peek().is_some_and(|t| t.is_keyword(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.at_keyword(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), SqlError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            self.error(format!("expected {kw}"))
        }
    }

    fn at_symbol(&self, sym: &str) -> bool {
        self.peek().is_some_and(|t| t.is_symbol(sym))
    }

    fn eat_symbol(&mut self, sym: &str) -> bool {
        if self.at_symbol(sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_symbol(&mut self, sym: &str) -> Result<(), SqlError> {
        if self.eat_symbol(sym) {
            Ok(())
        } else {
            self.error(format!("expected {sym:?}"))
        }
    }

    fn ident(&mut self) -> Result<Ident, SqlError> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Word && !is_reserved(&t.text) => {
                let value = t.text.clone();
                self.pos += 1;
                Ok(Ident { value, quoted: false })
            }
            Some(t) if t.kind == TokenKind::QuotedIdent => {
                let value = t.text.clone();
                self.pos += 1;
                Ok(Ident { value, quoted: true })
            }
            _ => self.error("expected identifier"),
        }
    }

    fn optional_alias(&mut self) -> Result<Option<Ident>, SqlError> {
        if self.eat_keyword("AS") {
            return self.ident().map(Some);
        }
        match self.peek() {
            Some(t) if (t.kind == TokenKind::Word && !is_reserved(&t.text)) || t.kind == TokenKind::QuotedIdent => {
                self.ident().map(Some)
            }
            _ => Ok(None),
        }
    }

    fn query(&mut self) -> Result<Query, SqlError> {
        if self.at_keyword("WITH") {
            return self.error("common table expressions are not supported");
        }
        let mut body = SetExpr::Select(Box::new(self.select()?));
        loop {
            if self.at_keyword("INTERSECT") || self.at_keyword("EXCEPT") {
                return self.error("only UNION set operations are supported");
            }
            if !self.eat_keyword("UNION") {
                break;
            }
            let all = self.eat_keyword("ALL");
            let right = SetExpr::Select(Box::new(self.select()?));
            body = SetExpr::Union { all, left: Box::new(body), right: Box::new(right) };
        }
        let mut order_by = Vec::new();
        if self.eat_keyword("ORDER") {
            self.expect_keyword("BY")?;
            loop {
                let expr = self.expr()?;
                let desc = if self.eat_keyword("DESC") {
                    true
                } else {
                    self.eat_keyword("ASC");
                    false
                };
                order_by.push(OrderItem { expr, desc });
                if !self.eat_symbol(",") {
                    break;
                }
            }
        }
        let mut limit = None;
        let mut offset = None;
        if self.eat_keyword("LIMIT") {
            limit = Some(self.expr()?);
            if self.eat_keyword("OFFSET") {
                offset = Some(self.expr()?);
            }
        }
        Ok(Query { body, order_by, limit, offset })
    }

    fn select(&mut self) -> Result<Select, SqlError> {
        self.expect_keyword("SELECT")?;
        let distinct = self.eat_keyword("DISTINCT");
        if !distinct {
            self.eat_keyword("ALL");
        }
        let mut projection = Vec::new();
        loop {
            projection.push(self.select_item()?);
            if !self.eat_symbol(",") {
                break;
            }
        }
        let from = if self.eat_keyword("FROM") { Some(self.parse_from_clause()?) } else { None };
        let selection = if self.eat_keyword("WHERE") { Some(self.expr()?) } else { None };
        let mut group_by = Vec::new();
        if self.eat_keyword("GROUP") {
            self.expect_keyword("BY")?;
            loop {
                group_by.push(self.expr()?);
                if !self.eat_symbol(",") {
                    break;
                }
            }
        }
        let having = if self.eat_keyword("HAVING") { Some(self.expr()?) } else { None };
        Ok(Select { distinct, projection, from, selection, group_by, having })
    }

    fn select_item(&mut self) -> Result<SelectItem, SqlError> {
        if self.eat_symbol("*") {
            return Ok(SelectItem::Wildcard);
        }
        let qualified_star = matches!(self.peek(), Some(t) if t.kind == TokenKind::Word || t.kind == TokenKind::QuotedIdent)
            && self.peek_at(1).is_some_and(|t| t.is_symbol("."))
            && self.peek_at(2).is_some_and(|t| t.is_symbol("*"));
        if qualified_star {
            let q = self.ident()?;
            self.pos += 2;
            return Ok(SelectItem::QualifiedWildcard(q));
        }
        let expr = self.expr()?;
        let alias = self.optional_alias()?;
        Ok(SelectItem::Expr { expr, alias })
    }

    fn table_factor(&mut self) -> Result<TableFactor, SqlError> {
        if self.at_symbol("(") {
            return self.error("derived tables in FROM are not supported");
        }
        let name = self.ident()?;
        if self.at_symbol(".") {
            return self.error("schema-qualified table names are not supported");
        }
        let alias = self.optional_alias()?;
        Ok(TableFactor { name, alias })
    }

    fn parse_from_clause(&mut self) -> Result<FromClause, SqlError> {
        let base = self.table_factor()?;
        let mut joins = Vec::new();
        loop {
            if self.at_symbol(",") {
                return self.error("comma joins are not supported; use JOIN ... ON");
            }
            let kind = if self.eat_keyword("JOIN") {
                JoinKind::Inner
            } else if self.eat_keyword("INNER") {
                self.expect_keyword("JOIN")?;
                JoinKind::Inner
            } else if self.eat_keyword("LEFT") {
                self.eat_keyword("OUTER");
                self.expect_keyword("JOIN")?;
                JoinKind::Left
            } else if ["RIGHT", "FULL", "CROSS", "NATURAL"].iter().any(|k| self.at_keyword(k)) {
                return self.error("only INNER and LEFT joins are supported");
            } else {
                break;
            };
            let table = self.table_factor()?;
            if self.at_keyword("USING") {
                return self.error("JOIN ... USING is not supported; use ON");
            }
            self.expect_keyword("ON")?;
            let on = self.expr()?;
            joins.push(Join { kind, table, on });
        }
        Ok(FromClause { base, joins })
    }

    pub fn expr(&mut self) -> Result<Expr, SqlError> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.and_expr()?;
        while self.eat_keyword("OR") {
            let right = self.and_expr()?;
            left = Expr::binary(left, BinaryOp::Or, right);
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.not_expr()?;
        while self.eat_keyword("AND") {
            let right = self.not_expr()?;
            left = Expr::binary(left, BinaryOp::And, right);
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, SqlError> {
        if self.eat_keyword("NOT") {
            let inner = self.not_expr()?;
            return Ok(Expr::Unary { op: UnaryOp::Not, expr: Box::new(inner) });
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, SqlError> {
        let left = self.additive()?;
        if self.eat_keyword("IS") {
            let negated = self.eat_keyword("NOT");
            self.expect_keyword("NULL")?;
            return Ok(Expr::IsNull { expr: Box::new(left), negated });
        }
        let negated = if self.at_keyword("NOT")
            && self.peek_at(1).is_some_and(|t| t.is_keyword("IN") || t.is_keyword("LIKE") || t.is_keyword("BETWEEN"))
        {
            self.pos += 1;
            true
        } else {
            false
        };
        if self.eat_keyword("IN") {
            self.expect_symbol("(")?;
            let expr = if self.at_keyword("SELECT") {
                let query = self.query()?;
                Expr::InSubquery { expr: Box::new(left), query: Box::new(query), negated }
            } else {
                let mut list = Vec::new();
                loop {
                    list.push(self.expr()?);
                    if !self.eat_symbol(",") {
                        break;
                    }
                }
                Expr::InList { expr: Box::new(left), list, negated }
            };
            self.expect_symbol(")")?;
            return Ok(expr);
        }
        if self.eat_keyword("LIKE") {
            let pattern = self.additive()?;
            return Ok(Expr::Like { expr: Box::new(left), pattern: Box::new(pattern), negated });
        }
        if self.eat_keyword("BETWEEN") {
            let low = self.additive()?;
            self.expect_keyword("AND")?;
            let high = self.additive()?;
            return Ok(Expr::Between { expr: Box::new(left), low: Box::new(low), high: Box::new(high), negated });
        }
        if negated {
            return self.error("expected IN, LIKE or BETWEEN after NOT");
        }
        let op = match self.peek() {
            Some(t) if t.kind == TokenKind::Symbol => match t.text.as_str() {
                "=" | "==" => Some(BinaryOp::Eq),
                "<>" | "!=" => Some(BinaryOp::NotEq),
                "<" => Some(BinaryOp::Lt),
                "<=" => Some(BinaryOp::LtEq),
                ">" => Some(BinaryOp::Gt),
                ">=" => Some(BinaryOp::GtEq),
                _ => None,
            },
            _ => None,
        };
        match op {
            Some(op) => {
                self.pos += 1;
                let right = self.additive()?;
                Ok(Expr::binary(left, op, right))
            }
            None => Ok(left),
        }
    }

    fn additive(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.multiplicative()?;
        loop {
            let op = if self.at_symbol("+") {
                BinaryOp::Plus
            } else if self.at_symbol("-") {
                BinaryOp::Minus
            } else {
                break;
            };
            self.pos += 1;
            let right = self.multiplicative()?;
            left = Expr::binary(left, op, right);
        }
        Ok(left)
    }

    fn multiplicative(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.concat()?;
        loop {
            let op = if self.at_symbol("*") {
                BinaryOp::Multiply
            } else if self.at_symbol("/") {
                BinaryOp::Divide
            } else if self.at_symbol("%") {
                BinaryOp::Modulo
            } else {
                break;
            };
            self.pos += 1;
            let right = self.concat()?;
            left = Expr::binary(left, op, right);
        }
        Ok(left)
    }

    fn concat(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.unary()?;
        while self.eat_symbol("||") {
            let right = self.unary()?;
            left = Expr::binary(left, BinaryOp::Concat, right);
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Expr, SqlError> {
        if self.eat_symbol("-") {
            let inner = self.unary()?;
            return Ok(Expr::Unary { op: UnaryOp::Neg, expr: Box::new(inner) });
        }
        if self.eat_symbol("+") {
            return self.unary();
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, SqlError> {
        let Some(tok) = self.peek().cloned() else {
            return self.error("unexpected end of input");
        };
        match tok.kind {
            TokenKind::Number => {
                self.pos += 1;
                Ok(Expr::Number(tok.text))
            }
            TokenKind::String => {
                self.pos += 1;
                Ok(Expr::String(tok.text))
            }
            TokenKind::Symbol if tok.text == "(" => {
                self.pos += 1;
                let expr = if self.at_keyword("SELECT") {
                    Expr::Subquery(Box::new(self.query()?))
                } else {
                    Expr::Nested(Box::new(self.expr()?))
                };
                self.expect_symbol(")")?;
                Ok(expr)
            }
            TokenKind::Word if tok.is_keyword("NULL") => {
                self.pos += 1;
                Ok(Expr::Null)
            }
            TokenKind::Word if tok.is_keyword("EXISTS") || tok.is_keyword("CASE") => {
                self.error(format!("{} expressions are not supported", tok.text.to_ascii_uppercase()))
            }
            TokenKind::Word if self.peek_at(1).is_some_and(|t| t.is_symbol("(")) && !is_reserved(&tok.text) => {
                self.function()
            }
            TokenKind::Word | TokenKind::QuotedIdent => {
                let first = self.ident()?;
                if self.eat_symbol(".") {
                    let name = self.ident()?;
                    Ok(Expr::Column { table: Some(first), name })
                } else {
                    Ok(Expr::Column { table: None, name: first })
                }
            }
            _ => self.error(format!("unexpected token {:?}", tok.text)),
        }
    }

    fn function(&mut self) -> Result<Expr, SqlError> {
        let name = self.next().map(|t| t.text.to_ascii_uppercase()).unwrap_or_default();
        self.expect_symbol("(")?;
        if self.eat_symbol("*") {
            self.expect_symbol(")")?;
            return Ok(Expr::Function { name, distinct: false, args: FunctionArgs::Star });
        }
        let distinct = self.eat_keyword("DISTINCT");
        let mut args = Vec::new();
        if !self.at_symbol(")") {
            loop {
                args.push(self.expr()?);
                if !self.eat_symbol(",") {
                    break;
                }
            }
        }
        self.expect_symbol(")")?;
        Ok(Expr::Function { name, distinct, args: FunctionArgs::List(args) })
    }
}
