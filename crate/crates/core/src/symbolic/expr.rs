use std::fmt;

use super::library::{builtin, CandidateFunction, GAUSSIAN, IDENTITY};
use super::SymbolicError;

/// Closed-form expression extracted from a fully locked network.
///
/// `Apply` evaluates `c·f(a·arg + b) + d`.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpressionTree {
    Constant(f64),
    Variable(usize),
    Apply {
        func: CandidateFunction,
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        arg: Box<ExpressionTree>,
    },
    Sum(Vec<ExpressionTree>),
}

impl ExpressionTree {
    pub fn apply(func: CandidateFunction, a: f64, b: f64, c: f64, d: f64, arg: ExpressionTree) -> Self {
        ExpressionTree::Apply {
            func,
            a,
            b,
            c,
            d,
            arg: Box::new(arg),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, SymbolicError> {
        self.eval_at(x, &mut String::from("root"))
    }

    fn eval_at(&self, x: &[f64], path: &mut String) -> Result<f64, SymbolicError> {
        match self {
            ExpressionTree::Constant(v) => Ok(*v),
            ExpressionTree::Variable(i) => x.get(*i).copied().ok_or_else(|| {
                SymbolicError::InvalidArg(format!("input has {} values, variable {i} requested", x.len()))
            }),
            ExpressionTree::Apply { func, a, b, c, d, arg } => {
                let len = path.len();
                path.push_str(".arg");
                let inner = arg.eval_at(x, path)?;
                path.truncate(len);
                let u = a * inner + b;
                if !func.accepts(u) {
                    return Err(SymbolicError::DomainViolation {
                        path: path.clone(),
                        func: func.name().to_string(),
                        value: u,
                    });
                }
                Ok(c * func.apply(u) + d)
            }
            ExpressionTree::Sum(children) => {
                let mut total = 0.0;
                for (k, child) in children.iter().enumerate() {
                    let len = path.len();
                    path.push_str(&format!("[{k}]"));
                    total += child.eval_at(x, path)?;
                    path.truncate(len);
                }
                Ok(total)
            }
        }
    }

    /// Constant-folded canonical form.
    pub fn fold(&self) -> ExpressionTree {
        Linear::from_tree(self).to_tree()
    }

    pub fn max_variable(&self) -> Option<usize> {
        match self {
            ExpressionTree::Constant(_) => None,
            ExpressionTree::Variable(i) => Some(*i),
            ExpressionTree::Apply { arg, .. } => arg.max_variable(),
            ExpressionTree::Sum(children) => children.iter().filter_map(|c| c.max_variable()).max(),
        }
    }

    /// Number of unary applications other than scaled variables.
    pub fn application_count(&self) -> usize {
        match self {
            ExpressionTree::Constant(_) | ExpressionTree::Variable(_) => 0,
            ExpressionTree::Apply { func, arg, .. } => {
                usize::from(!func.is_identity()) + arg.application_count()
            }
            ExpressionTree::Sum(children) => children.iter().map(|c| c.application_count()).sum(),
        }
    }

    /// Names of the applied primitives, outermost first.
    pub fn functions(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_functions(&mut out);
        out
    }

    fn collect_functions(&self, out: &mut Vec<String>) {
        match self {
            ExpressionTree::Apply { func, arg, .. } => {
                if !func.is_identity() {
                    out.push(func.name().to_string());
                }
                arg.collect_functions(out);
            }
            ExpressionTree::Sum(children) => children.iter().for_each(|c| c.collect_functions(out)),
            _ => {}
        }
    }
}

impl fmt::Display for ExpressionTree {
    /// Shortest round-trip decimal for every constant.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lin = Linear::from_tree(self);
        f.write_str(&Printer::new(None, &lin).linear(&lin, true))
    }
}

/// Infix rendering of the folded tree with constants rounded to
/// `precision` decimal places (trailing zeros trimmed).
pub fn print_expression(tree: &ExpressionTree, precision: usize) -> String {
    let lin = Linear::from_tree(tree);
    Printer::new(Some(precision.max(1)), &lin).linear(&lin, true)
}

/// Sum of scaled atoms plus a constant; the normal form used for folding,
/// printing and parsing.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub constant: f64,
    pub terms: Vec<(f64, Atom)>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Atom {
    Var(usize),
    Apply(CandidateFunction, Box<Linear>),
}

const EVEN: &[&str] = &["x^2", "x^4", "1/x^2", "1/x^4", "abs", "cosh", GAUSSIAN];
const ODD: &[&str] = &[
    IDENTITY, "x^3", "1/x", "1/x^3", "sin", "tan", "tanh", "sign", "arcsin", "arctan", "arctanh",
];

impl Atom {
    fn first_var(&self) -> usize {
        match self {
            Atom::Var(i) => *i,
            Atom::Apply(_, inner) => inner
                .terms
                .iter()
                .map(|(_, a)| a.first_var())
                .min()
                .unwrap_or(usize::MAX),
        }
    }
}

impl Linear {
    pub fn constant(v: f64) -> Self {
        Linear {
            constant: v,
            terms: Vec::new(),
        }
    }

    pub fn var(i: usize) -> Self {
        Linear {
            constant: 0.0,
            terms: vec![(1.0, Atom::Var(i))],
        }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn scale(mut self, s: f64) -> Self {
        if s == 0.0 {
            return Linear::constant(0.0);
        }
        self.constant *= s;
        for (c, _) in &mut self.terms {
            *c *= s;
        }
        self
    }

    pub fn add_const(mut self, v: f64) -> Self {
        self.constant += v;
        self
    }

    pub fn add(mut self, other: Linear) -> Self {
        self.constant += other.constant;
        for (c, atom) in other.terms {
            match self.terms.iter_mut().find(|(_, a)| *a == atom) {
                Some(slot) => slot.0 += c,
                None => self.terms.push((c, atom)),
            }
        }
        self.normalize();
        self
    }

    fn normalize(&mut self) {
        self.terms.retain(|(c, _)| *c != 0.0);
        let keys: Vec<(usize, u8, String, String)> = self
            .terms
            .iter()
            .map(|(_, a)| {
                let (kind, name) = match a {
                    Atom::Var(_) => (0u8, String::new()),
                    Atom::Apply(f, _) => (1u8, f.name().to_string()),
                };
                (a.first_var(), kind, name, Printer::exact_atom(a))
            })
            .collect();
        let mut idx: Vec<usize> = (0..self.terms.len()).collect();
        idx.sort_by(|&i, &j| keys[i].cmp(&keys[j]));
        let terms = std::mem::take(&mut self.terms);
        let mut slots: Vec<Option<(f64, Atom)>> = terms.into_iter().map(Some).collect();
        self.terms = idx.into_iter().map(|i| slots[i].take().expect("each index once")).collect();
    }

    /// `f(inner)` as a normalized linear form.
    pub fn apply(f: &CandidateFunction, inner: Linear) -> Linear {
        if f.is_zero() {
            return Linear::constant(0.0);
        }
        if f.is_identity() {
            return inner;
        }
        if inner.is_constant() && f.accepts(inner.constant) {
            return Linear::constant(f.apply(inner.constant));
        }
        let mut sign = 1.0;
        let mut inner = inner;
        let leading_negative = inner.terms.first().is_some_and(|(c, _)| *c < 0.0);
        if leading_negative && EVEN.contains(&f.name()) {
            inner = inner.scale(-1.0);
        } else if leading_negative && ODD.contains(&f.name()) {
            inner = inner.scale(-1.0);
            sign = -1.0;
        }
        Linear {
            constant: 0.0,
            terms: vec![(sign, Atom::Apply(f.clone(), Box::new(inner)))],
        }
    }

    pub fn from_tree(tree: &ExpressionTree) -> Linear {
        match tree {
            ExpressionTree::Constant(v) => Linear::constant(*v),
            ExpressionTree::Variable(i) => Linear::var(*i),
            ExpressionTree::Sum(children) => children
                .iter()
                .map(Linear::from_tree)
                .fold(Linear::constant(0.0), Linear::add),
            ExpressionTree::Apply { func, a, b, c, d, arg } => {
                if *c == 0.0 || func.is_zero() {
                    return Linear::constant(*d);
                }
                let inner = Linear::from_tree(arg).scale(*a).add_const(*b);
                Linear::apply(func, inner).scale(*c).add_const(*d)
            }
        }
    }

    pub fn to_tree(&self) -> ExpressionTree {
        let mut parts = Vec::new();
        if self.constant != 0.0 || self.terms.is_empty() {
            parts.push(ExpressionTree::Constant(self.constant));
        }
        parts.extend(self.terms.iter().map(|(c, a)| term_tree(*c, a)));
        if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            ExpressionTree::Sum(parts)
        }
    }
}

fn identity() -> CandidateFunction {
    builtin(IDENTITY).expect("identity primitive")
}

fn term_tree(coef: f64, atom: &Atom) -> ExpressionTree {
    match atom {
        Atom::Var(i) if coef == 1.0 => ExpressionTree::Variable(*i),
        Atom::Var(i) => ExpressionTree::apply(identity(), 1.0, 0.0, coef, 0.0, ExpressionTree::Variable(*i)),
        Atom::Apply(f, inner) => {
            let (a, arg) = if inner.terms.len() == 1 {
                let (k, at) = &inner.terms[0];
                (*k, term_tree(1.0, at))
            } else {
                (
                    1.0,
                    Linear {
                        constant: 0.0,
                        terms: inner.terms.clone(),
                    }
                    .to_tree(),
                )
            };
            ExpressionTree::apply(f.clone(), a, inner.constant, coef, 0.0, arg)
        }
    }
}

struct Printer {
    precision: Option<usize>,
    multi: bool,
}

fn max_var(l: &Linear) -> usize {
    l.terms
        .iter()
        .map(|(_, a)| match a {
            Atom::Var(i) => *i,
            Atom::Apply(_, inner) => max_var(inner),
        })
        .max()
        .unwrap_or(0)
}

impl Printer {
    fn new(precision: Option<usize>, l: &Linear) -> Self {
        Printer {
            precision,
            multi: max_var(l) > 0,
        }
    }

    fn exact_atom(a: &Atom) -> String {
        let p = Printer {
            precision: None,
            multi: true,
        };
        p.term(1.0, a).1
    }

    fn num(&self, v: f64) -> String {
        let s = match self.precision {
            None => format!("{v}"),
            Some(p) => {
                let s = format!("{v:.p$}");
                if s.contains('.') {
                    s.trim_end_matches('0').trim_end_matches('.').to_string()
                } else {
                    s
                }
            }
        };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    }

    fn var(&self, i: usize) -> String {
        if self.multi {
            format!("x{}", i + 1)
        } else {
            "x".into()
        }
    }

    fn linear(&self, l: &Linear, top: bool) -> String {
        let konst = (l.constant != 0.0 || l.terms.is_empty())
            .then(|| (l.constant < 0.0, self.num(l.constant.abs())));
        let mut parts: Vec<(bool, String)> = Vec::new();
        if top {
            parts.extend(konst.clone());
        }
        parts.extend(l.terms.iter().map(|(c, a)| self.term(*c, a)));
        if !top {
            parts.extend(konst);
        }
        let mut out = String::new();
        for (k, (neg, body)) in parts.into_iter().enumerate() {
            match (k, neg) {
                (0, true) => {
                    out.push('-');
                    out.push_str(&body);
                }
                (0, false) => out.push_str(&body),
                (_, true) => {
                    out.push_str(" - ");
                    out.push_str(&body);
                }
                (_, false) => {
                    out.push_str(" + ");
                    out.push_str(&body);
                }
            }
        }
        out
    }

    fn is_bare(&self, l: &Linear) -> bool {
        l.constant == 0.0 && l.terms.len() == 1 && l.terms[0].0 == 1.0 && matches!(l.terms[0].1, Atom::Var(_))
    }

    /// `x` or `(inner)`.
    fn base(&self, l: &Linear) -> String {
        if self.is_bare(l) {
            self.linear(l, false)
        } else {
            format!("({})", self.linear(l, false))
        }
    }

    fn term(&self, coef: f64, atom: &Atom) -> (bool, String) {
        let neg = coef < 0.0;
        let m = self.num(coef.abs());
        let scaled = |body: String| if m == "1" { body } else { format!("{m}*{body}") };
        match atom {
            Atom::Var(i) => (neg, scaled(self.var(*i))),
            Atom::Apply(f, inner) => match f.name() {
                "1/x" => (neg, format!("{m}/{}", self.base(inner))),
                "1/x^2" | "1/x^3" | "1/x^4" => {
                    (neg, format!("{m}/{}^{}", self.base(inner), &f.name()[4..]))
                }
                "1/sqrt" => (neg, format!("{m}/sqrt({})", self.linear(inner, false))),
                "x^2" | "x^3" | "x^4" => (neg, scaled(format!("{}^{}", self.base(inner), &f.name()[2..]))),
                GAUSSIAN => (neg, scaled(self.gaussian(inner))),
                name => (neg, scaled(format!("{name}({})", self.linear(inner, false)))),
            },
        }
    }

    /// `exp(-k²·(atom + s)²)` for a single-term argument `k·atom + k·s`.
    fn gaussian(&self, inner: &Linear) -> String {
        if inner.terms.len() != 1 {
            return format!("exp(-({})^2)", self.linear(inner, false));
        }
        let (k, atom) = &inner.terms[0];
        let shift = inner.constant / k;
        let unit = Linear {
            constant: shift,
            terms: vec![(1.0, atom.clone())],
        };
        let base = self.base(&unit);
        let k2 = self.num(k * k);
        if k2 == "1" {
            format!("exp(-{base}^2)")
        } else {
            format!("exp(-{k2}*{base}^2)")
        }
    }
}
