use crate::space::Sequence;

/// `coeff * d log pi(y | x) / d theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleSeed {
    pub x: Sequence,
    pub y: Sequence,
    pub coeff: f64,
}

/// One coefficient per enumerated response of prompt `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSeed {
    pub x: Sequence,
    pub coeffs: Vec<f64>,
}

/// Linearization of a loss around the current log-probabilities: the loss
/// gradient is `sum coeff * grad log pi(y | x)` over all seeds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogProbSeeds {
    pub single: Vec<SingleSeed>,
    pub dense: Vec<DenseSeed>,
}

impl LogProbSeeds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: &Sequence, y: &Sequence, coeff: f64) {
        if coeff != 0.0 {
            self.single.push(SingleSeed {
                x: x.clone(),
                y: y.clone(),
                coeff,
            });
        }
    }

    pub fn push_dense(&mut self, x: &Sequence, coeffs: Vec<f64>) {
        self.dense.push(DenseSeed { x: x.clone(), coeffs });
    }

    pub fn is_empty(&self) -> bool {
        self.single.is_empty() && self.dense.is_empty()
    }
}
