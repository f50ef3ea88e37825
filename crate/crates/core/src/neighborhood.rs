//! Fixed offset neighborhoods for the local attender.
//!
//! Offsets are `(di, dj)` = (row, column) displacements. A neighborhood always
//! contains the centre `(0, 0)` and keeps its offsets in lexicographic order,
//! so channel `k` of an attender map always refers to the same offset.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Offset = (i32, i32);

/// The five named patterns used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    N5,
    N9,
    N13,
    N17,
    N25,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [Pattern::N5, Pattern::N9, Pattern::N13, Pattern::N17, Pattern::N25];

    pub fn size(self) -> usize {
        match self {
            Pattern::N5 => 5,
            Pattern::N9 => 9,
            Pattern::N13 => 13,
            Pattern::N17 => 17,
            Pattern::N25 => 25,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.size())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "N5" => Ok(Pattern::N5),
            "N9" => Ok(Pattern::N9),
            "N13" => Ok(Pattern::N13),
            "N17" => Ok(Pattern::N17),
            "N25" => Ok(Pattern::N25),
            other => Err(Error::InvalidArgument(format!(
                "unknown neighborhood pattern {other:?}; expected one of N5, N9, N13, N17, N25"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Neighborhood {
    offsets: Vec<Offset>,
}

impl Neighborhood {
    pub fn named(pattern: Pattern) -> Self {
        let square = |r: i32| {
            (-r..=r).flat_map(move |di| (-r..=r).map(move |dj| (di, dj)))
        };
        let axis2 = [(-2, 0), (2, 0), (0, -2), (0, 2)];
        let diag2 = [(-2, -2), (-2, 2), (2, -2), (2, 2)];
        let offsets: Vec<Offset> = match pattern {
            Pattern::N5 => vec![(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)],
            Pattern::N9 => square(1).collect(),
            Pattern::N13 => square(1).chain(axis2).collect(),
            Pattern::N17 => square(1).chain(axis2).chain(diag2).collect(),
            Pattern::N25 => square(2).collect(),
        };
        Self::custom(offsets).expect("named patterns are valid")
    }

    /// Validate and canonicalize an arbitrary offset set.
    pub fn custom(mut offsets: Vec<Offset>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("neighborhood must not be empty".into()));
        }
        offsets.sort_unstable();
        if let Some(w) = offsets.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "duplicate offset {:?} in neighborhood",
                w[0]
            )));
        }
        if offsets.binary_search(&(0, 0)).is_err() {
            return Err(Error::InvalidArgument(
                "neighborhood must contain the centre offset (0,0)".into(),
            ));
        }
        Ok(Self { offsets })
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Channel index of the centre offset.
    pub fn center_index(&self) -> usize {
        self.offsets
            .binary_search(&(0, 0))
            .expect("centre offset is an invariant")
    }

    /// Largest Chebyshev distance of any offset from the centre.
    pub fn radius(&self) -> i32 {
        self.offsets
            .iter()
            .map(|&(di, dj)| di.abs().max(dj.abs()))
            .max()
            .unwrap_or(0)
    }

    /// Text form `n=<k>;(di,dj);…`.
    pub fn to_text(&self) -> String {
        let mut s = format!("n={}", self.offsets.len());
        for (di, dj) in &self.offsets {
            s.push_str(&format!(";({di},{dj})"));
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::Format(format!("neighborhood {text:?}: {why}"));
        let mut parts = text.trim().split(';');
        let header = parts.next().ok_or_else(|| bad("empty"))?;
        let n: usize = header
            .strip_prefix("n=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing n=<count> header"))?;
        let offsets = parts
            .map(|p| {
                let inner = p
                    .trim()
                    .strip_prefix('(')
                    .and_then(|p| p.strip_suffix(')'))
                    .ok_or_else(|| bad("offset not in (di,dj) form"))?;
                let (a, b) = inner.split_once(',').ok_or_else(|| bad("offset needs two parts"))?;
                let di = a.trim().parse().map_err(|_| bad("bad row offset"))?;
                let dj = b.trim().parse().map_err(|_| bad("bad column offset"))?;
                Ok((di, dj))
            })
            .collect::<Result<Vec<Offset>>>()?;
        if offsets.len() != n {
            return Err(bad("offset count does not match header"));
        }
        Self::custom(offsets)
    }
}

impl From<Pattern> for Neighborhood {
    fn from(p: Pattern) -> Self {
        Self::named(p)
    }
}

impl FromStr for Neighborhood {
    type Err = Error;

    /// Accepts either a pattern name (`N17`) or the `n=…` text form.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim_start().starts_with("n=") {
            Self::parse_text(s)
        } else {
            s.parse::<Pattern>().map(Self::named)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn as_set(n: &Neighborhood) -> HashSet<Offset> {
        n.offsets().iter().copied().collect()
    }

    #[test]
    fn named_cardinalities_and_radius() {
        for p in Pattern::ALL {
            let n = Neighborhood::named(p);
            assert_eq!(n.len(), p.size());
            assert!(n.radius() <= 2);
            assert_eq!(n.offsets()[n.center_index()], (0, 0));
        }
    }

    #[test]
    fn n5_is_cross() {
        let n = Neighborhood::named(Pattern::N5);
        let expected: HashSet<_> = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)].into();
        assert_eq!(as_set(&n), expected);
    }

    #[test]
    fn n25_is_full_square() {
        let n = Neighborhood::named(Pattern::N25);
        for di in -2..=2 {
            for dj in -2..=2 {
                assert!(n.offsets().contains(&(di, dj)));
            }
        }
    }

    #[test]
    fn named_patterns_symmetric() {
        for p in Pattern::ALL {
            let set = as_set(&Neighborhood::named(p));
            let rot: HashSet<_> = set.iter().map(|&(a, b)| (b, -a)).collect();
            let flip_rows: HashSet<_> = set.iter().map(|&(a, b)| (-a, b)).collect();
            let flip_cols: HashSet<_> = set.iter().map(|&(a, b)| (a, -b)).collect();
            assert_eq!(rot, set, "{p} not rotation symmetric");
            assert_eq!(flip_rows, set);
            assert_eq!(flip_cols, set);
        }
    }

    #[test]
    fn nested_patterns() {
        let sets: Vec<_> = Pattern::ALL.iter().map(|&p| as_set(&p.into())).collect();
        for w in sets.windows(2) {
            assert!(w[0].is_subset(&w[1]));
        }
    }

    #[test]
    fn custom_validation() {
        assert_eq!(Neighborhood::custom(vec![(0, 0)]).unwrap().len(), 1);
        assert!(Neighborhood::custom(vec![(0, 0), (0, 0)]).is_err());
        assert!(Neighborhood::custom(vec![]).is_err());
        assert!(Neighborhood::custom(vec![(1, 0)]).is_err());
        let a = Neighborhood::custom(vec![(1, 0), (0, 0), (-1, 3)]).unwrap();
        let b = Neighborhood::custom(vec![(-1, 3), (0, 0), (1, 0)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.offsets(), &[(-1, 3), (0, 0), (1, 0)]);
    }

    #[test]
    fn unknown_name_rejected() {
        assert!("N7".parse::<Pattern>().is_err());
        assert_eq!("n17".parse::<Pattern>().unwrap(), Pattern::N17);
    }

    #[test]
    fn text_form() {
        let n = Neighborhood::named(Pattern::N5);
        assert_eq!(n.to_text(), "n=5;(-1,0);(0,-1);(0,0);(0,1);(1,0)");
        assert!(Neighborhood::parse_text("n=2;(0,0)").is_err());
        assert!(Neighborhood::parse_text("(0,0)").is_err());
        assert!(Neighborhood::parse_text("n=1;(0;0)").is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(raw in proptest::collection::hash_set((-4i32..=4, -4i32..=4), 0..20)) {
            let mut offsets: Vec<_> = raw.into_iter().collect();
            if !offsets.contains(&(0, 0)) {
                offsets.push((0, 0));
            }
            let n = Neighborhood::custom(offsets).unwrap();
            let back = Neighborhood::parse_text(&n.to_text()).unwrap();
            prop_assert_eq!(back.offsets(), n.offsets());
            prop_assert_eq!(back.to_text(), n.to_text());
        }
    }
}
