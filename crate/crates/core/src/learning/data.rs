use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{EnvironmentSpec, Normalizer, State, NUM_FEATURES, STATE_DIM};
use crate::error::{Error, Result};
use crate::oracle::{respond_values, Label, OracleConfig};
use crate::rng::Rng;

/// A labelled paired comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub s1: State,
    pub s2: State,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryDataset {
    pub queries: Vec<Query>,
}

impl QueryDataset {
    pub fn new(queries: Vec<Query>) -> Self {
        QueryDataset { queries }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Pairs with a strict preference.
    pub fn pref(&self) -> impl Iterator<Item = &Query> {
        self.queries.iter().filter(|q| q.label != Label::Equal)
    }

    /// Pairs labelled equivalent.
    pub fn equiv(&self) -> impl Iterator<Item = &Query> {
        self.queries.iter().filter(|q| q.label == Label::Equal)
    }
}

/// Maps states to network inputs: min-max normalized states and base features.
#[derive(Clone, Debug)]
pub struct Featurizer {
    pub env: EnvironmentSpec,
    pub normalizer: Normalizer,
}

pub const CF_INPUT_DIM: usize = STATE_DIM + 1;

impl Featurizer {
    pub fn new(env: EnvironmentSpec, normalizer: Normalizer) -> Self {
        Featurizer { env, normalizer }
    }

    pub fn state_input(&self, s: &State) -> [f64; STATE_DIM] {
        self.normalizer.state(s)
    }

    pub fn base_values(&self, s: &State) -> Result<[f64; NUM_FEATURES]> {
        self.normalizer.features(&self.env, s)
    }

    /// `[normalized base feature i, normalized state]`.
    pub fn cf_input(&self, index: usize, s: &State) -> Result<[f64; CF_INPUT_DIM]> {
        let mut out = [0.0; CF_INPUT_DIM];
        out[0] = self.base_values(s)?[index];
        out[1..].copy_from_slice(&self.state_input(s));
        Ok(out)
    }
}

/// Draws `count` distinct unordered pairs of distinct entries of `pool`.
pub fn sample_pairs(pool: &[usize], count: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let max_pairs = pool.len() * pool.len().saturating_sub(1) / 2;
    while out.len() < count.min(max_pairs) {
        if let Some(p) = draw_pair(pool, rng, &mut seen) {
            out.push(p);
        }
    }
    out
}

fn draw_pair(pool: &[usize], rng: &mut Rng, seen: &mut HashSet<(usize, usize)>) -> Option<(usize, usize)> {
    let a = pool[rng.gen_range(0..pool.len())];
    let b = pool[rng.gen_range(0..pool.len())];
    if a == b || !seen.insert((a.min(b), a.max(b))) {
        return None;
    }
    Some((a, b))
}

/// A lazily extended sequence of oracle-labelled pairs drawn without
/// replacement from `pool`. Prefixes are stable: asking for more queries
/// never changes the ones already drawn.
pub struct QueryStream<'a, F> {
    states: &'a [State],
    pool: &'a [usize],
    value_fn: F,
    oracle: OracleConfig,
    pair_rng: Rng,
    label_rng: Rng,
    seen: HashSet<(usize, usize)>,
    items: Vec<(usize, usize, Label)>,
}

impl<'a, F> QueryStream<'a, F>
where
    F: Fn(usize) -> Result<f64>,
{
    /// `value_fn` maps a state index to the oracle's ground-truth value.
    pub fn new(states: &'a [State], pool: &'a [usize], value_fn: F, oracle: OracleConfig, pair_rng: Rng, label_rng: Rng) -> Self {
        QueryStream {
            states,
            pool,
            value_fn,
            oracle,
            pair_rng,
            label_rng,
            seen: HashSet::new(),
            items: Vec::new(),
        }
    }

    fn extend_one(&mut self) -> Result<()> {
        let max_pairs = self.pool.len() * self.pool.len().saturating_sub(1) / 2;
        if self.seen.len() >= max_pairs {
            return Err(Error::QueryBudgetExhausted {
                wanted: self.items.len() + 1,
                attempts: self.items.len(),
            });
        }
        let (a, b) = loop {
            if let Some(p) = draw_pair(self.pool, &mut self.pair_rng, &mut self.seen) {
                break p;
            }
        };
        let label = respond_values((self.value_fn)(a)?, (self.value_fn)(b)?, &self.oracle, &mut self.label_rng);
        self.items.push((a, b, label));
        Ok(())
    }

    pub fn ensure(&mut self, n: usize) -> Result<()> {
        while self.items.len() < n {
            self.extend_one()?;
        }
        Ok(())
    }

    fn to_query(&self, &(a, b, label): &(usize, usize, Label)) -> Query {
        Query {
            s1: self.states[a],
            s2: self.states[b],
            label,
        }
    }

    /// The first `n` labelled queries, equivalences included.
    pub fn prefix(&mut self, n: usize) -> Result<QueryDataset> {
        let items = self.prefix_items(n)?;
        Ok(QueryDataset::new(items.iter().map(|q| self.to_query(q)).collect()))
    }

    /// Like [`Self::prefix`], as `(state index, state index, label)`.
    pub fn prefix_items(&mut self, n: usize) -> Result<Vec<(usize, usize, Label)>> {
        self.ensure(n)?;
        Ok(self.items[..n].to_vec())
    }

    /// The first `n` queries not labelled equivalent, drawing replacements
    /// for every equivalence answer.
    pub fn non_equivalent(&mut self, n: usize) -> Result<QueryDataset> {
        let items = self.non_equivalent_items(n)?;
        Ok(QueryDataset::new(items.iter().map(|q| self.to_query(q)).collect()))
    }

    /// Like [`Self::non_equivalent`], as `(state index, state index, label)`.
    pub fn non_equivalent_items(&mut self, n: usize) -> Result<Vec<(usize, usize, Label)>> {
        let max_attempts = 1000 * n + 1000;
        let mut out = Vec::with_capacity(n);
        let mut k = 0;
        while out.len() < n {
            if k >= max_attempts {
                return Err(Error::QueryBudgetExhausted { wanted: n, attempts: k });
            }
            self.ensure(k + 1)?;
            let item = self.items[k];
            if item.2 != Label::Equal {
                out.push(item);
            }
            k += 1;
        }
        Ok(out)
    }
}
