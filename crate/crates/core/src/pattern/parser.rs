use serde_json::Number;

use super::{EdgePattern, Literal, NodePattern, Pattern, Predicate, Test};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at offset {offset}: expected {expected}")]
pub struct ParseError {
    pub offset: usize,
    pub expected: String,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

type PResult<T> = Result<T, ParseError>;

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn fail<T>(&self, expected: &str) -> PResult<T> {
        Err(ParseError { offset: self.pos, expected: expected.to_string() })
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos == self.src.len()
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str) -> PResult<()> {
        if self.eat(tok) {
            Ok(())
        } else {
            self.fail(&format!("'{tok}'"))
        }
    }

    /// Case-insensitive keyword followed by a non-identifier character.
    fn eat_keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let rest = self.rest();
        if rest.len() >= kw.len() && rest[..kw.len()].eq_ignore_ascii_case(kw) {
            let next = rest[kw.len()..].chars().next();
            if !next.is_some_and(is_ident_char) {
                self.pos += kw.len();
                return true;
            }
        }
        false
    }

    fn ident(&mut self, what: &str) -> PResult<String> {
        self.skip_ws();
        let rest = self.rest();
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return self.fail(what),
        }
        let end = chars.find(|(_, c)| !is_ident_char(*c)).map(|(i, _)| i).unwrap_or(rest.len());
        self.pos += end;
        Ok(rest[..end].to_string())
    }

    fn key_path(&mut self) -> PResult<(String, Vec<String>)> {
        let var = self.ident("variable")?;
        if !self.rest().starts_with('.') {
            return self.fail("'.' and a property key");
        }
        let mut path = Vec::new();
        while self.rest().starts_with('.') {
            self.pos += 1;
            let start = self.pos;
            let key = self.ident("property key")?;
            if self.pos - key.len() != start {
                // no whitespace inside a key path
                self.pos = start;
                return self.fail("property key");
            }
            path.push(key);
        }
        Ok((var, path))
    }

    fn literal(&mut self) -> PResult<Literal> {
        self.skip_ws();
        let rest = self.rest();
        if rest.starts_with('\'') {
            let mut out = String::new();
            let mut i = 1;
            let bytes = rest.as_bytes();
            loop {
                match rest[i..].find('\'') {
                    None => {
                        self.pos += rest.len();
                        return self.fail("closing quote");
                    }
                    Some(j) => {
                        out.push_str(&rest[i..i + j]);
                        i += j + 1;
                        if bytes.get(i) == Some(&b'\'') {
                            out.push('\'');
                            i += 1;
                        } else {
                            break;
                        }
                    }
                }
            }
            self.pos += i;
            return Ok(Literal::Str(out));
        }
        if self.eat_keyword("true") {
            return Ok(Literal::Bool(true));
        }
        if self.eat_keyword("false") {
            return Ok(Literal::Bool(false));
        }
        let end = rest
            .char_indices()
            .find(|&(i, c)| !(c.is_ascii_digit() || c == '.' || (i == 0 && c == '-')))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        let text = &rest[..end];
        let valid = {
            let digits = text.strip_prefix('-').unwrap_or(text);
            let mut parts = digits.split('.');
            let int = parts.next().unwrap_or("");
            let frac = parts.next();
            !int.is_empty()
                && int.bytes().all(|b| b.is_ascii_digit())
                && parts.next().is_none()
                && frac.map_or(true, |f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
        };
        if !valid {
            return self.fail("literal");
        }
        let n: Number = serde_json::from_str(text).or_else(|_| self.fail("literal"))?;
        self.pos += end;
        Ok(Literal::Number(n))
    }

    fn condition(&mut self) -> PResult<Predicate> {
        self.skip_ws();
        for (kw, test) in [("exists", Test::Exists), ("missing", Test::Missing)] {
            let save = self.pos;
            if self.eat_keyword(kw) {
                if self.eat("(") {
                    let (var, path) = self.key_path()?;
                    self.expect(")")?;
                    return Ok(Predicate { var, path, test });
                }
                self.pos = save;
            }
        }
        let (var, path) = self.key_path()?;
        let negated = if self.eat("!=") {
            true
        } else if self.eat("=") {
            false
        } else {
            return self.fail("'=' or '!='");
        };
        let lit = self.literal()?;
        let test = if negated { Test::Ne(lit) } else { Test::Eq(lit) };
        Ok(Predicate { var, path, test })
    }

    fn conditions(&mut self) -> PResult<Vec<Predicate>> {
        let mut out = vec![self.condition()?];
        while self.eat_keyword("AND") {
            out.push(self.condition()?);
        }
        Ok(out)
    }

    fn node(&mut self, nodes: &mut Vec<NodePattern>) -> PResult<String> {
        self.expect("(")?;
        let var_at = {
            self.skip_ws();
            self.pos
        };
        let var = self.ident("variable")?;
        let kind = if self.eat(":") { Some(self.ident("type name")?) } else { None };
        self.expect(")")?;
        match nodes.iter_mut().find(|n| n.var == var) {
            Some(existing) => match (&existing.kind, kind) {
                (_, None) => {}
                (None, Some(k)) => existing.kind = Some(k),
                (Some(a), Some(b)) if *a == b => {}
                (Some(a), Some(_)) => {
                    return Err(ParseError { offset: var_at, expected: format!("type {a} for variable {var}") })
                }
            },
            None => nodes.push(NodePattern { var: var.clone(), kind }),
        }
        Ok(var)
    }

    fn pattern(&mut self) -> PResult<Pattern> {
        if !self.eat_keyword("MATCH") {
            return self.fail("MATCH");
        }
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        loop {
            let mut left = self.node(&mut nodes)?;
            while self.eat("-") {
                self.expect("[")?;
                self.expect(":")?;
                let rel = self.ident("relation type")?;
                self.expect("]")?;
                self.expect("->")?;
                let right = self.node(&mut nodes)?;
                edges.push(EdgePattern { from: left, rel, to: right.clone() });
                left = right;
            }
            if !self.eat(",") {
                break;
            }
        }
        let predicates = if self.eat_keyword("WHERE") { self.conditions()? } else { Vec::new() };
        for p in &predicates {
            if !nodes.iter().any(|n| n.var == p.var) {
                return self.fail(&format!("declared variable instead of {}", p.var));
            }
        }
        let anchor = if self.eat_keyword("ANCHOR") {
            self.skip_ws();
            let at = self.pos;
            let var = self.ident("variable")?;
            if !nodes.iter().any(|n| n.var == var) {
                return Err(ParseError { offset: at, expected: "a declared variable".into() });
            }
            var
        } else {
            nodes[0].var.clone()
        };
        if !self.at_end() {
            return self.fail("end of pattern");
        }
        Ok(Pattern { nodes, edges, predicates, anchor })
    }
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

pub fn parse_pattern(text: &str) -> Result<Pattern, ParseError> {
    Parser::new(text).pattern()
}

/// Parses an `AND`-joined condition list, as used by subscription
/// predicates over event payloads (`payload.type = 'goal'`).
pub fn parse_conditions(text: &str) -> Result<Vec<Predicate>, ParseError> {
    let mut p = Parser::new(text);
    let out = p.conditions()?;
    if !p.at_end() {
        return p.fail("AND or end of input");
    }
    Ok(out)
}
