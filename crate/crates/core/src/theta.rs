//! Exact rational quasi-momenta.
//!
//! Bloch frequencies are kept as reduced rationals so that fine-scale phase
//! factors e^{2iπθ·x/ε} are exactly periodic on integer boxes; floats would
//! break that commensurability.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A point of the dual unit torus with exact rational components in [0, 1).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BlochTheta {
    components: Vec<Ratio<i64>>,
}

impl BlochTheta {
    pub fn new(components: Vec<Ratio<i64>>) -> Self {
        let components = components.into_iter().map(reduce_mod_one).collect();
        Self { components }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(vec![Ratio::new(0, 1); dim])
    }

    pub fn from_ratio(num: i64, den: i64) -> Self {
        Self::new(vec![Ratio::new(num, den)])
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Ratio<i64>] {
        &self.components
    }

    /// Floating-point image, padded to the fixed coordinate width.
    pub fn as_f64(&self) -> Vec<f64> {
        self.components
            .iter()
            .map(|r| *r.numer() as f64 / *r.denom() as f64)
            .collect()
    }

    /// ca*a + cb*b reduced modulo 1, used for resonance momenta like 2θⁿ−θᵐ.
    pub fn combine(a: &Self, ca: i64, b: &Self, cb: i64) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(Error::GridMismatch(format!(
                "theta dimensions differ: {} vs {}",
                a.dim(),
                b.dim()
            )));
        }
        let comps = a
            .components
            .iter()
            .zip(&b.components)
            .map(|(x, y)| reduce_mod_one(x * ca + y * cb))
            .collect();
        Ok(Self::new(comps))
    }
}

fn reduce_mod_one(r: Ratio<i64>) -> Ratio<i64> {
    let den = *r.denom();
    let num = r.numer().rem_euclid(den);
    Ratio::new(num, den)
}

/// Best rational with denominator <= q_max within tol of x, if any.
pub fn snap_to_rational(x: f64, q_max: i64, tol: f64) -> Option<Ratio<i64>> {
    let x = x.rem_euclid(1.0);
    for q in 1..=q_max {
        let p = (x * q as f64).round();
        if (x - p / q as f64).abs() < tol {
            return Some(reduce_mod_one(Ratio::new(p as i64, q)));
        }
    }
    None
}

impl fmt::Display for BlochTheta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .components
            .iter()
            .map(|r| format!("{}/{}", r.numer(), r.denom()))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for BlochTheta {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut comps = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let ratio = if let Some((num, den)) = part.split_once('/') {
                let num: i64 = num.trim().parse().map_err(|_| bad_component(part))?;
                let den: i64 = den.trim().parse().map_err(|_| bad_component(part))?;
                if den <= 0 {
                    return Err(format!("theta component \"{part}\" must have a positive denominator"));
                }
                Ratio::new(num, den)
            } else if let Ok(int) = part.parse::<i64>() {
                Ratio::new(int, 1)
            } else {
                return Err(bad_component(part));
            };
            comps.push(ratio);
        }
        if comps.is_empty() {
            return Err("empty theta".to_string());
        }
        Ok(BlochTheta::new(comps))
    }
}

fn bad_component(part: &str) -> String {
    // Floats like 0.25 are rejected on purpose; suggest the exact form.
    if let Ok(x) = part.parse::<f64>() {
        if let Some(r) = snap_to_rational(x, 64, 1e-9) {
            return format!(
                "theta component \"{part}\" must be written as a rational, e.g. \"{}/{}\"",
                r.numer(),
                r.denom()
            );
        }
    }
    format!("theta component \"{part}\" is not a rational of the form p/q")
}

impl Serialize for BlochTheta {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BlochTheta {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduces_modulo_one() {
        let t = BlochTheta::from_ratio(5, 4);
        assert_eq!(t.components()[0], Ratio::new(1, 4));
        let t = BlochTheta::from_ratio(-1, 4);
        assert_eq!(t.components()[0], Ratio::new(3, 4));
    }

    #[test]
    fn combine_resonance_momentum() {
        let n = BlochTheta::from_ratio(1, 4);
        let m = BlochTheta::from_ratio(3, 4);
        let res = BlochTheta::combine(&n, 2, &m, -1).unwrap();
        assert_eq!(res.components()[0], Ratio::new(3, 4));
    }

    #[test]
    fn parse_and_display_round_trip() {
        let t: BlochTheta = "1/4,0/1".parse().unwrap();
        assert_eq!(t.to_string(), "1/4,0/1");
        assert_eq!(t.as_f64(), vec![0.25, 0.0]);
    }

    #[test]
    fn float_input_suggests_rational() {
        let err = "0.25".parse::<BlochTheta>().unwrap_err();
        assert!(err.contains("1/4"), "{err}");
    }

    #[test]
    fn snapping() {
        assert_eq!(snap_to_rational(0.5 + 1e-12, 64, 1e-9), Some(Ratio::new(1, 2)));
        assert_eq!(snap_to_rational(0.1234567, 64, 1e-9), None);
    }
}
