use std::fmt;
use std::sync::Arc;

use crate::optim::UnaryFn;

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type Predicate = Arc<dyn Fn(f64) -> bool + Send + Sync>;

/// A unary primitive that a learned activation can be snapped to.
///
/// `complexity` breaks R² ties: lower is preferred.
#[derive(Clone)]
pub struct CandidateFunction {
    name: Arc<str>,
    complexity: u32,
    eval: Scalar,
    derivative: Scalar,
    domain: Predicate,
}

impl CandidateFunction {
    pub fn new<F, D, P>(name: &str, complexity: u32, eval: F, derivative: D, domain: P) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64) -> f64 + Send + Sync + 'static,
        P: Fn(f64) -> bool + Send + Sync + 'static,
    {
        Self {
            name: Arc::from(name),
            complexity,
            eval: Arc::new(eval),
            derivative: Arc::new(derivative),
            domain: Arc::new(domain),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn complexity(&self) -> u32 {
        self.complexity
    }

    pub fn apply(&self, u: f64) -> f64 {
        (self.eval)(u)
    }

    pub fn apply_derivative(&self, u: f64) -> f64 {
        (self.derivative)(u)
    }

    pub fn accepts(&self, u: f64) -> bool {
        u.is_finite() && (self.domain)(u)
    }

    pub fn is_identity(&self) -> bool {
        &*self.name == IDENTITY
    }

    pub fn is_zero(&self) -> bool {
        &*self.name == ZERO
    }
}

impl UnaryFn for CandidateFunction {
    fn eval(&self, u: f64) -> f64 {
        self.apply(u)
    }

    fn derivative(&self, u: f64) -> f64 {
        self.apply_derivative(u)
    }

    fn in_domain(&self, u: f64) -> bool {
        self.accepts(u)
    }
}

impl fmt::Debug for CandidateFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CandidateFunction")
            .field("name", &self.name)
            .field("complexity", &self.complexity)
            .finish()
    }
}

impl PartialEq for CandidateFunction {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

pub const IDENTITY: &str = "x";
pub const ZERO: &str = "0";
pub const GAUSSIAN: &str = "gaussian";

const EXP_LIMIT: f64 = 709.0;

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn sign(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn any(_: f64) -> bool {
    true
}

fn nonzero(u: f64) -> bool {
    u != 0.0
}

/// The 24 built-in primitives, in a fixed order.
///
/// Complexity scores: polynomial degree for powers (reciprocals one higher),
/// 2 for `sqrt`/`abs`, 3 for `exp`/`log`/`sin`, 4 for the remaining
/// transcendental shapes, 5 for `sigmoid` (an affine image of `tanh`) and
/// `sign`, and 0 for the zero function.
pub fn candidate_library() -> Vec<CandidateFunction> {
    use CandidateFunction as C;
    vec![
        C::new(IDENTITY, 1, |u| u, |_| 1.0, any),
        C::new("x^2", 2, |u| u * u, |u| 2.0 * u, any),
        C::new("x^3", 3, |u| u * u * u, |u| 3.0 * u * u, any),
        C::new("x^4", 4, |u| u.powi(4), |u| 4.0 * u.powi(3), any),
        C::new("1/x", 2, |u| 1.0 / u, |u| -1.0 / (u * u), nonzero),
        C::new("1/x^2", 3, |u| 1.0 / (u * u), |u| -2.0 / u.powi(3), nonzero),
        C::new("1/x^3", 4, |u| 1.0 / u.powi(3), |u| -3.0 / u.powi(4), nonzero),
        C::new("1/x^4", 5, |u| 1.0 / u.powi(4), |u| -4.0 / u.powi(5), nonzero),
        C::new("sqrt", 2, f64::sqrt, |u| 0.5 / u.sqrt(), |u| u >= 0.0),
        C::new("1/sqrt", 3, |u| 1.0 / u.sqrt(), |u| -0.5 / (u * u.sqrt()), |u| u > 0.0),
        C::new("exp", 3, f64::exp, f64::exp, |u| u <= EXP_LIMIT),
        C::new("log", 3, f64::ln, |u| 1.0 / u, |u| u > 0.0),
        C::new("abs", 2, f64::abs, sign, any),
        C::new("sin", 3, f64::sin, f64::cos, any),
        C::new("tan", 4, f64::tan, |u| 1.0 / (u.cos() * u.cos()), |u| u.cos().abs() > 1e-9),
        C::new("tanh", 4, f64::tanh, |u| 1.0 - u.tanh() * u.tanh(), any),
        C::new("sigmoid", 5, sigmoid, |u| sigmoid(u) * (1.0 - sigmoid(u)), any),
        C::new("sign", 5, sign, |_| 0.0, any),
        C::new("arcsin", 4, f64::asin, |u| 1.0 / (1.0 - u * u).sqrt(), |u| u.abs() <= 1.0),
        C::new("arctan", 4, f64::atan, |u| 1.0 / (1.0 + u * u), any),
        C::new("arctanh", 4, f64::atanh, |u| 1.0 / (1.0 - u * u), |u| u.abs() < 1.0),
        C::new(ZERO, 0, |_| 0.0, |_| 0.0, any),
        C::new(GAUSSIAN, 4, |u| (-u * u).exp(), |u| -2.0 * u * (-u * u).exp(), any),
        C::new("cosh", 4, f64::cosh, f64::sinh, |u| u.abs() <= EXP_LIMIT),
    ]
}

/// A candidate list that accepts user-defined primitives next to the
/// built-ins.
#[derive(Debug, Clone)]
pub struct CandidateLibrary {
    functions: Vec<CandidateFunction>,
}

impl Default for CandidateLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl CandidateLibrary {
    pub fn builtin() -> Self {
        Self {
            functions: candidate_library(),
        }
    }

    pub fn empty() -> Self {
        Self { functions: Vec::new() }
    }

    /// Adds (or replaces, by name) a primitive.
    pub fn register(&mut self, f: CandidateFunction) {
        match self.functions.iter_mut().find(|g| g.name() == f.name()) {
            Some(slot) => *slot = f,
            None => self.functions.push(f),
        }
    }

    pub fn get(&self, name: &str) -> Option<&CandidateFunction> {
        self.functions.iter().find(|f| f.name() == name)
    }

    pub fn functions(&self) -> &[CandidateFunction] {
        &self.functions
    }

    /// Restricts the library to the named primitives, keeping library order.
    pub fn subset(&self, names: &[&str]) -> Self {
        Self {
            functions: self
                .functions
                .iter()
                .filter(|f| names.contains(&f.name()))
                .cloned()
                .collect(),
        }
    }
}

/// Built-in primitive by name.
pub fn builtin(name: &str) -> Option<CandidateFunction> {
    candidate_library().into_iter().find(|f| f.name() == name)
}
