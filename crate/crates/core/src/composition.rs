//! Per-step state proportions of a set of forecast sequences.

use crate::markov::State;

/// State proportions at each forecast step, with equal weight per member.
#[derive(Debug, Clone, PartialEq)]
pub enum Composition {
    /// The set had no members; there is nothing to apportion.
    Empty { horizon: usize },
    /// `proportions[t][s]`: share of members whose step `t + 1` is state `s`.
    Proportions(Vec<Vec<f64>>),
}

impl Composition {
    pub fn from_members<'a>(
        members: impl IntoIterator<Item = &'a [State]>,
        horizon: usize,
        m: usize,
    ) -> Self {
        let mut counts = vec![vec![0usize; m]; horizon];
        let mut n = 0usize;
        for seq in members {
            debug_assert_eq!(seq.len(), horizon);
            for (t, &s) in seq.iter().enumerate() {
                counts[t][s as usize] += 1;
            }
            n += 1;
        }
        if n == 0 {
            return Composition::Empty { horizon };
        }
        Composition::Proportions(
            counts
                .into_iter()
                .map(|row| row.into_iter().map(|c| c as f64 / n as f64).collect())
                .collect(),
        )
    }

    /// Like [`Composition::from_members`], but each member counts with its
    /// weight (e.g. probability mass). Members of zero total weight give an
    /// empty composition.
    pub fn from_weighted_members<'a>(
        members: impl IntoIterator<Item = (&'a [State], f64)>,
        horizon: usize,
        m: usize,
    ) -> Self {
        let mut acc = vec![vec![0.0; m]; horizon];
        let mut total = 0.0;
        for (seq, w) in members {
            debug_assert_eq!(seq.len(), horizon);
            for (t, &s) in seq.iter().enumerate() {
                acc[t][s as usize] += w;
            }
            total += w;
        }
        if total <= 0.0 {
            return Composition::Empty { horizon };
        }
        for row in &mut acc {
            row.iter_mut().for_each(|x| *x /= total);
        }
        Composition::Proportions(acc)
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Composition::Empty { .. })
    }

    /// Proportions at 1-based `step`, if nonempty.
    pub fn at_step(&self, step: usize) -> Option<&[f64]> {
        match self {
            Composition::Empty { .. } => None,
            Composition::Proportions(p) => p.get(step.checked_sub(1)?).map(|v| v.as_slice()),
        }
    }

    /// Shannon entropy (nats) of the step distribution; 0 for an empty set.
    pub fn entropy_at(&self, step: usize) -> f64 {
        self.at_step(step).map_or(0.0, |p| {
            p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
        })
    }

    pub fn horizon(&self) -> usize {
        match self {
            Composition::Empty { horizon } => *horizon,
            Composition::Proportions(p) => p.len(),
        }
    }
}
