use std::ops::Index;

use crate::scalar::{log_sum_exp, Scalar};

/// Log-domain, possibly unnormalized scores over a vocabulary. Masked
/// entries hold negative infinity; NaN and positive infinity never occur.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector<S: Scalar = f64>(Vec<S>);

impl<S: Scalar> LogitVector<S> {
    /// Panics on NaN or positive infinity.
    pub fn new(values: Vec<S>) -> Self {
        assert!(
            values.iter().all(|v| !v.is_nan() && *v != S::infinity()),
            "logits must be finite or -inf"
        );
        Self(values)
    }

    pub fn try_new(values: Vec<S>) -> Option<Self> {
        values
            .iter()
            .all(|v| !v.is_nan() && *v != S::infinity())
            .then_some(Self(values))
    }

    /// `ln p` for each probability; zeros become masked entries.
    pub fn from_probs(probs: &[S]) -> Self {
        Self::new(probs.iter().map(|&p| if p > S::zero() { p.ln() } else { S::neg_infinity() }).collect())
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![-S::lit(len as f64).ln(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.0
    }

    pub fn into_values(self) -> Vec<S> {
        self.0
    }

    pub fn get(&self, i: usize) -> Option<S> {
        self.0.get(i).copied()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.0[i] == S::neg_infinity()
    }

    pub fn is_all_masked(&self) -> bool {
        self.0.iter().all(|&v| v == S::neg_infinity())
    }

    pub fn unmasked(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.0.len()).filter(move |&i| !self.is_masked(i))
    }

    pub fn mask(&mut self, i: usize) {
        self.0[i] = S::neg_infinity();
    }

    pub fn log_sum_exp(&self) -> S {
        log_sum_exp(&self.0)
    }

    /// Shifted so that `log_sum_exp() == 0`. An all-masked vector is returned unchanged.
    pub fn log_softmax(&self) -> Self {
        let z = self.log_sum_exp();
        if z == S::neg_infinity() {
            return self.clone();
        }
        Self(self.0.iter().map(|&v| v - z).collect())
    }

    pub fn softmax(&self) -> Vec<S> {
        let z = self.log_sum_exp();
        if z == S::neg_infinity() {
            return vec![S::zero(); self.0.len()];
        }
        self.0.iter().map(|&v| (v - z).exp()).collect()
    }

    /// Highest entry, lowest index on ties; `None` if every entry is masked.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.0.iter().enumerate() {
            if v == S::neg_infinity() {
                continue;
            }
            match best {
                Some(b) if self.0[b] >= v => {}
                _ => best = Some(i),
            }
        }
        best
    }

    /// Indices of unmasked entries ordered by value descending, index ascending.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.unmasked().collect();
        idx.sort_by(|&a, &b| self.0[b].partial_cmp(&self.0[a]).expect("no NaN").then(a.cmp(&b)));
        idx
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self::new(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<T: Scalar>(&self) -> LogitVector<T> {
        LogitVector(
            self.0
                .iter()
                .map(|v| if *v == S::neg_infinity() { T::neg_infinity() } else { T::lit(v.as_f64()) })
                .collect(),
        )
    }
}

impl<S: Scalar> Index<usize> for LogitVector<S> {
    type Output = S;

    fn index(&self, i: usize) -> &S {
        &self.0[i]
    }
}
