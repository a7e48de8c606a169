use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Neuron nonlinearity σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    /// `min(max(u, 0), 1)`
    HardSigmoid,
    /// `1 / (1 + exp(-4 (u - 0.5)))`, a smooth stand-in for the hard sigmoid
    /// with the same value and unit slope at `u = 0.5`.
    ShiftedSigmoid,
}

impl ActivationKind {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            ActivationKind::HardSigmoid => u.clamp(0.0, 1.0),
            ActivationKind::ShiftedSigmoid => 1.0 / (1.0 + (-4.0 * (u - 0.5)).exp()),
        }
    }

    pub fn derivative(self, u: f64) -> f64 {
        match self {
            ActivationKind::HardSigmoid => {
                if u > 0.0 && u < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::ShiftedSigmoid => {
                let s = self.apply(u);
                4.0 * s * (1.0 - s)
            }
        }
    }

    /// True when `u` is within `h` of a point where the derivative jumps.
    pub fn near_kink(self, u: f64, h: f64) -> bool {
        match self {
            ActivationKind::HardSigmoid => u.abs() <= h || (u - 1.0).abs() <= h,
            ActivationKind::ShiftedSigmoid => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::HardSigmoid => "hard_sigmoid",
            ActivationKind::ShiftedSigmoid => "shifted_sigmoid",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard_sigmoid" | "hard" | "HardSigmoid" => Ok(ActivationKind::HardSigmoid),
            "shifted_sigmoid" | "sigmoid" | "ShiftedSigmoid" => Ok(ActivationKind::ShiftedSigmoid),
            other => Err(format!("unknown activation '{other}'")),
        }
    }
}

pub fn activate(u: &Tensor, kind: ActivationKind) -> Tensor {
    u.map(|v| kind.apply(v))
}

pub fn activate_prime(u: &Tensor, kind: ActivationKind) -> Tensor {
    u.map(|v| kind.derivative(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HARD: ActivationKind = ActivationKind::HardSigmoid;
    const SMOOTH: ActivationKind = ActivationKind::ShiftedSigmoid;

    #[test]
    fn hard_sigmoid_values() {
        let out = activate(&Tensor::vector(vec![-0.5, 0.3, 1.7]), HARD);
        assert_eq!(out.data(), &[0.0, 0.3, 1.0]);
    }

    #[test]
    fn hard_sigmoid_derivative() {
        assert_eq!(HARD.derivative(0.5), 1.0);
        assert_eq!(HARD.derivative(-2.0), 0.0);
        assert_eq!(HARD.derivative(1.5), 0.0);
    }

    #[test]
    fn shifted_sigmoid_derivative_matches_central_difference() {
        let h = 1e-6;
        let numeric = (SMOOTH.apply(0.5 + h) - SMOOTH.apply(0.5 - h)) / (2.0 * h);
        assert!((numeric - 1.0).abs() < 1e-9, "fd slope {numeric}");
        assert!((SMOOTH.derivative(0.5) - 1.0).abs() < 1e-15);
        for &u in &[-1.3, 0.0, 0.2, 0.77, 2.1] {
            let numeric = (SMOOTH.apply(u + h) - SMOOTH.apply(u - h)) / (2.0 * h);
            assert!((numeric - SMOOTH.derivative(u)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn hard_sigmoid_bounded(u in -1e3f64..1e3) {
            let v = HARD.apply(u);
            prop_assert!((0.0..=1.0).contains(&v));
            let d = HARD.derivative(u);
            prop_assert!(d == 0.0 || d == 1.0);
        }
    }
}
