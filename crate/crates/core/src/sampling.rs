//! Sources of randomness for tree growth and verification.
//!
//! All stochastic decisions go through [`Chooser`], so a session replays
//! exactly from its seed and tests can enumerate every outcome.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::ProbVec;
use crate::target::TokenId;
use crate::verify::accept_token;

pub trait Chooser {
    /// Draws a token from `dist`.
    fn draw(&mut self, dist: &ProbVec) -> Result<TokenId>;

    /// Accept/reject decision for a drafted `token` under target `p` and
    /// proposal `q`.
    fn accept(&mut self, p: &ProbVec, q: &ProbVec, token: TokenId) -> Result<bool>;
}

/// One uniform per decision, taken from a ChaCha stream.
pub struct RngChooser<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl<'a> RngChooser<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng }
    }
}

impl Chooser for RngChooser<'_> {
    fn draw(&mut self, dist: &ProbVec) -> Result<TokenId> {
        let u: f64 = self.rng.random();
        Ok(dist.sample_with(u) as TokenId)
    }

    fn accept(&mut self, p: &ProbVec, q: &ProbVec, token: TokenId) -> Result<bool> {
        let u: f64 = self.rng.random();
        accept_token(p, q, token, u)
    }
}

/// For deterministic paths that must never sample.
pub struct NoChooser;

impl Chooser for NoChooser {
    fn draw(&mut self, _: &ProbVec) -> Result<TokenId> {
        Err(Error::InvalidArgument("sampling requested in greedy mode".into()))
    }

    fn accept(&mut self, _: &ProbVec, _: &ProbVec, _: TokenId) -> Result<bool> {
        Err(Error::InvalidArgument("sampling requested in greedy mode".into()))
    }
}

/// Exhaustive enumeration of every decision sequence, weighted by its
/// probability. Each run follows a scripted prefix and then takes the
/// first option, recording the alternatives it skipped.
#[derive(Debug, Default)]
pub struct Enumerator {
    script: Vec<usize>,
    pos: usize,
    taken: Vec<usize>,
    arity: Vec<usize>,
    weight: f64,
    pending: Vec<Vec<usize>>,
    started: bool,
}

impl Enumerator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Prepares the next run; `false` once every branch has been visited.
    pub fn next_run(&mut self) -> bool {
        if self.started {
            for i in self.script.len()..self.taken.len() {
                for alt in 1..self.arity[i] {
                    let mut s = self.taken[..i].to_vec();
                    s.push(alt);
                    self.pending.push(s);
                }
            }
            match self.pending.pop() {
                Some(s) => self.script = s,
                None => return false,
            }
        }
        self.started = true;
        self.pos = 0;
        self.taken.clear();
        self.arity.clear();
        self.weight = 1.0;
        true
    }

    /// Probability of the run just completed.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    fn pick(&mut self, options: usize) -> usize {
        let k = if self.pos < self.script.len() {
            self.script[self.pos]
        } else {
            0
        };
        self.pos += 1;
        self.taken.push(k);
        self.arity.push(options);
        k
    }
}

impl Chooser for Enumerator {
    fn draw(&mut self, dist: &ProbVec) -> Result<TokenId> {
        let support: Vec<usize> = (0..dist.len()).filter(|&i| dist.get(i) > 0.0).collect();
        let k = self.pick(support.len());
        let t = support[k];
        self.weight *= dist.get(t);
        Ok(t as TokenId)
    }

    fn accept(&mut self, p: &ProbVec, q: &ProbVec, token: TokenId) -> Result<bool> {
        // settle prerequisites (range and proposal checks) first
        accept_token(p, q, token, 0.0)?;
        let a = (p.get(token as usize) / q.get(token as usize)).min(1.0);
        let options: Vec<(bool, f64)> = [(true, a), (false, 1.0 - a)]
            .into_iter()
            .filter(|(_, w)| *w > 0.0)
            .collect();
        let k = self.pick(options.len());
        self.weight *= options[k].1;
        Ok(options[k].0)
    }
}
