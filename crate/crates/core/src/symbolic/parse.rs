use super::expr::{Atom, ExpressionTree, Linear};
use super::library::{CandidateFunction, CandidateLibrary, GAUSSIAN};
use super::SymbolicError;

/// Parses printer output (or hand-written formulas in the same grammar)
/// using the built-in primitives.
pub fn parse_expression(s: &str) -> Result<ExpressionTree, SymbolicError> {
    parse_expression_with(s, &CandidateLibrary::builtin())
}

pub fn parse_expression_with(s: &str, library: &CandidateLibrary) -> Result<ExpressionTree, SymbolicError> {
    let tokens = tokenize(s)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        library,
        end: s.len(),
    };
    let lin = p.expr()?;
    if let Some((pos, t)) = p.tokens.get(p.pos) {
        return Err(perr(*pos, format!("unexpected {t:?}")));
    }
    Ok(lin.to_tree())
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn perr(pos: usize, msg: impl Into<String>) -> SymbolicError {
    SymbolicError::Parse { pos, msg: msg.into() }
}

fn tokenize(s: &str) -> Result<Vec<(usize, Tok)>, SymbolicError> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let v: f64 = s[start..i]
                .parse()
                .map_err(|_| perr(start, format!("bad number `{}`", &s[start..i])))?;
            out.push((start, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(s[start..i].to_string())));
        } else if "+-*/^()".contains(c) {
            out.push((i, Tok::Op(c)));
            i += 1;
        } else {
            return Err(perr(i, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    library: &'a CandidateLibrary,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, op: char) -> Result<(), SymbolicError> {
        if self.eat(op) {
            Ok(())
        } else {
            Err(perr(self.here(), format!("expected `{op}`")))
        }
    }

    fn func(&self, name: &str) -> Result<CandidateFunction, SymbolicError> {
        self.library
            .get(name)
            .cloned()
            .ok_or_else(|| SymbolicError::UnknownFunction(name.to_string()))
    }

    fn expr(&mut self) -> Result<Linear, SymbolicError> {
        let mut acc = self.term()?;
        loop {
            if self.eat('+') {
                acc = acc.add(self.term()?);
            } else if self.eat('-') {
                acc = acc.add(self.term()?.scale(-1.0));
            } else {
                return Ok(acc);
            }
        }
    }

    fn term(&mut self) -> Result<Linear, SymbolicError> {
        let mut acc = self.unary()?;
        loop {
            let pos = self.here();
            if self.eat('*') {
                let rhs = self.unary()?;
                acc = if rhs.is_constant() {
                    acc.scale(rhs.constant)
                } else if acc.is_constant() {
                    rhs.scale(acc.constant)
                } else {
                    return Err(perr(pos, "product of two non-constant factors"));
                };
            } else if self.eat('/') {
                let rhs = self.unary()?;
                acc = if rhs.is_constant() && rhs.constant != 0.0 {
                    acc.scale(1.0 / rhs.constant)
                } else if acc.is_constant() {
                    self.reciprocal(rhs)?.scale(acc.constant)
                } else {
                    return Err(perr(pos, "quotient with a non-constant numerator and denominator"));
                };
            } else {
                return Ok(acc);
            }
        }
    }

    /// `1/u` mapped onto the reciprocal primitives.
    fn reciprocal(&self, u: Linear) -> Result<Linear, SymbolicError> {
        if u.constant == 0.0 && u.terms.len() == 1 {
            if let (k, Atom::Apply(f, inner)) = &u.terms[0] {
                let name = match f.name() {
                    "x^2" => Some("1/x^2"),
                    "x^3" => Some("1/x^3"),
                    "x^4" => Some("1/x^4"),
                    "sqrt" => Some("1/sqrt"),
                    _ => None,
                };
                if let Some(name) = name {
                    let g = self.func(name)?;
                    return Ok(Linear::apply(&g, (**inner).clone()).scale(1.0 / k));
                }
            }
        }
        Ok(Linear::apply(&self.func("1/x")?, u))
    }

    fn unary(&mut self) -> Result<Linear, SymbolicError> {
        if self.eat('-') {
            Ok(self.unary()?.scale(-1.0))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Linear, SymbolicError> {
        let base = self.primary()?;
        let pos = self.here();
        if !self.eat('^') {
            return Ok(base);
        }
        let neg = self.eat('-');
        let n = match self.tokens.get(self.pos) {
            Some((_, Tok::Num(v))) => *v,
            _ => return Err(perr(self.here(), "exponent must be a number")),
        };
        self.pos += 1;
        let n = if neg { -n } else { n };
        if base.is_constant() {
            return Ok(Linear::constant(base.constant.powf(n)));
        }
        let name = match n {
            1.0 => return Ok(base),
            2.0 => "x^2",
            3.0 => "x^3",
            4.0 => "x^4",
            0.5 => "sqrt",
            -0.5 => "1/sqrt",
            -1.0 => "1/x",
            -2.0 => "1/x^2",
            -3.0 => "1/x^3",
            -4.0 => "1/x^4",
            _ => return Err(perr(pos, format!("unsupported exponent {n}"))),
        };
        Ok(Linear::apply(&self.func(name)?, base))
    }

    fn primary(&mut self) -> Result<Linear, SymbolicError> {
        let pos = self.here();
        match self.tokens.get(self.pos).cloned() {
            Some((_, Tok::Num(v))) => {
                self.pos += 1;
                Ok(Linear::constant(v))
            }
            Some((_, Tok::Op('('))) => {
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(')')?;
                Ok(inner)
            }
            Some((_, Tok::Ident(name))) => {
                self.pos += 1;
                if let Some(i) = variable_index(&name) {
                    return i.map(Linear::var).ok_or_else(|| perr(pos, "variables are numbered from x1"));
                }
                self.expect('(')?;
                let arg = self.expr()?;
                self.expect(')')?;
                if name == "exp" {
                    if let Some(g) = self.as_gaussian(&arg)? {
                        return Ok(g);
                    }
                }
                Ok(Linear::apply(&self.func(&name)?, arg))
            }
            Some((_, t)) => Err(perr(pos, format!("unexpected {t:?}"))),
            None => Err(perr(pos, "unexpected end of input")),
        }
    }

    /// `exp(-k·(u)^2)` with `k > 0` is `gaussian(√k·u)`.
    fn as_gaussian(&self, arg: &Linear) -> Result<Option<Linear>, SymbolicError> {
        if arg.constant != 0.0 || arg.terms.len() != 1 {
            return Ok(None);
        }
        match &arg.terms[0] {
            (k, Atom::Apply(f, inner)) if *k < 0.0 && f.name() == "x^2" => {
                let g = self.func(GAUSSIAN)?;
                Ok(Some(Linear::apply(&g, (**inner).clone().scale((-k).sqrt()))))
            }
            _ => Ok(None),
        }
    }
}

/// `Some(Some(i))` for `x`/`x<n>`, `Some(None)` for `x0`.
fn variable_index(name: &str) -> Option<Option<usize>> {
    let rest = name.strip_prefix('x')?;
    if rest.is_empty() {
        return Some(Some(0));
    }
    let n: usize = rest.parse().ok()?;
    Some(n.checked_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::print_expression;
    use proptest::prelude::*;

    fn close(t: &ExpressionTree, u: &ExpressionTree, x: &[f64]) -> bool {
        match (t.eval(x), u.eval(x)) {
            (Ok(a), Ok(b)) => (a - b).abs() <= 1e-7 * (1.0 + a.abs()),
            // folding drops dead subtrees, so the folded form may be defined
            // where the original is not
            (Err(_), _) => true,
            _ => false,
        }
    }

    #[test]
    fn parses_reference_forms() {
        let t = parse_expression("0.39 - 0.34*tanh(1.42*x - 0.82)").unwrap();
        assert!((t.eval(&[0.82 / 1.42]).unwrap() - 0.39).abs() < 1e-12);
        assert_eq!(print_expression(&t, 2), "0.39 - 0.34*tanh(1.42*x - 0.82)");
        let g = parse_expression("47.13 + 1932.52*exp(-1.42*(x + 0.29)^2)").unwrap();
        assert_eq!(g.functions(), vec!["gaussian".to_string()]);
        assert!((g.eval(&[-0.29]).unwrap() - (47.13 + 1932.52)).abs() < 1e-9);
        assert_eq!(print_expression(&g, 6), "47.13 + 1932.52*exp(-1.42*(x + 0.29)^2)");
    }

    #[test]
    fn reciprocals_and_powers() {
        let t = parse_expression("1/sqrt(2*x) + 3/(x - 1)^2 - x^3").unwrap();
        let x = 2.5f64;
        let want = 3.0 / (x - 1.0).powi(2) + 1.0 / (2.0 * x).sqrt() - x.powi(3);
        assert!((t.eval(&[x]).unwrap() - want).abs() < 1e-12);
        assert_eq!(print_expression(&t, 3), "1/sqrt(2*x) + 3/(x - 1)^2 - x^3");
    }

    #[test]
    fn multi_variable() {
        let t = parse_expression("2 + 0.5*exp(x1) + sin(x2)").unwrap();
        let v = t.eval(&[0.0, 1.0]).unwrap();
        assert!((v - (2.5 + 1f64.sin())).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(parse_expression("x*x"), Err(SymbolicError::Parse { .. })));
        assert!(matches!(parse_expression("foo(x)"), Err(SymbolicError::UnknownFunction(_))));
        assert!(matches!(parse_expression("(x + 1"), Err(SymbolicError::Parse { .. })));
        assert!(matches!(parse_expression("x $ 2"), Err(SymbolicError::Parse { pos: 2, .. })));
        assert!(matches!(parse_expression("x0"), Err(SymbolicError::Parse { .. })));
    }

    fn primitive() -> impl Strategy<Value = &'static str> {
        prop::sample::select(vec![
            "x", "x^2", "x^3", "x^4", "1/x", "1/x^2", "1/x^3", "1/x^4", "sqrt", "1/sqrt", "exp", "log",
            "abs", "sin", "tan", "tanh", "sigmoid", "sign", "arcsin", "arctan", "arctanh", "0",
            "gaussian", "cosh",
        ])
    }

    fn coef() -> impl Strategy<Value = f64> {
        prop_oneof![Just(1.0), Just(-1.0), -3.0..3.0f64]
    }

    fn tree() -> impl Strategy<Value = ExpressionTree> {
        let leaf = || {
            (primitive(), coef(), coef(), coef(), coef()).prop_map(|(f, a, b, c, d)| {
                ExpressionTree::apply(crate::symbolic::builtin(f).unwrap(), a, b, c, d, ExpressionTree::Variable(0))
            })
        };
        let nested = (primitive(), coef(), coef(), coef(), coef(), leaf()).prop_map(|(f, a, b, c, d, arg)| {
            ExpressionTree::apply(crate::symbolic::builtin(f).unwrap(), a, b, c, d, arg)
        });
        prop::collection::vec(prop_oneof![leaf(), nested], 1..4).prop_map(ExpressionTree::Sum)
    }

    proptest! {
        #[test]
        fn exact_print_parse_round_trip(t in tree()) {
            let text = t.to_string();
            let back = parse_expression(&text).unwrap();
            for i in 0..100 {
                let x = [-2.0 + 4.0 * i as f64 / 99.0];
                prop_assert!(close(&t, &back, &x), "{} at {:?}: {:?} vs {:?}", text, x, t.eval(&x), back.eval(&x));
            }
        }

        #[test]
        fn printing_is_stable_under_fold(t in tree()) {
            prop_assert_eq!(print_expression(&t, 4), print_expression(&t.fold(), 4));
        }
    }
}
