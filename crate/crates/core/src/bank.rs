//! Server-side spectral knowledge bank.
//!
//! Prototypes are kept in insertion order. Retrieval is an exact cosine scan
//! with ties broken by the lower bank position. Every prototype carries
//! retrieval statistics: a lifetime hit counter, the number of queries it has
//! been scanned by, and a sliding window of per-round `(queries, hits)` pairs
//! that drives pruning.
//!
//! Round protocol used by the orchestrator:
//! 1. clients query an immutable snapshot ([`KnowledgeBank::query`]) and keep a
//!    [`RetrievalLog`];
//! 2. the server merges logs in client-id order ([`KnowledgeBank::record`]);
//! 3. [`KnowledgeBank::close_round`] folds the round's statistics into the window;
//! 4. [`KnowledgeBank::insert_and_project`] appends the uploaded tokens;
//! 5. [`KnowledgeBank::prune`] drops prototypes whose windowed retrieval
//!    frequency fell below `delta`.
//!
//! Survivors keep their counters across pruning.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{l2_norm, SpectralToken};

#[derive(Debug, Error, PartialEq)]
pub enum BankError {
    #[error("knowledge bank is empty")]
    Empty,
    #[error("top-k needs k >= 1")]
    ZeroK,
    #[error("token dimension {got} does not match bank dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid bank configuration: {0}")]
    Config(String),
    #[error("retrieval log refers to position {index} but the bank holds {len} prototypes")]
    StaleLog { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, BankError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundStat {
    pub queries: u64,
    pub hits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub values: Vec<f64>,
    pub source_client: Option<usize>,
    pub inserted_round: u64,
    /// Monotone insertion sequence number; lower is older.
    pub seq: u64,
    pub retrieval_count: u64,
    pub queries_served: u64,
    pub rounds_resident: u64,
    history: VecDeque<RoundStat>,
    current: RoundStat,
}

impl Prototype {
    /// Windowed retrieval frequency, or `None` if no query was served in
    /// the last `window` closed rounds.
    pub fn frequency(&self, window: usize) -> Option<f64> {
        let (q, h) = self
            .history
            .iter()
            .rev()
            .take(window)
            .fold((0u64, 0u64), |(q, h), s| (q + s.queries, h + s.hits));
        (q > 0).then(|| h as f64 / q as f64)
    }

    fn hit_recently(&self) -> bool {
        self.current.hits > 0 || self.history.back().is_some_and(|s| s.hits > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Ball radius for the norm projection.
    pub rho: f64,
    /// Prune threshold on windowed retrieval frequency.
    pub delta: f64,
    /// Rounds of history used for frequencies and residency before pruning.
    pub window: usize,
    pub max_size: Option<usize>,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            delta: 0.05,
            window: 5,
            max_size: Some(512),
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(BankError::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(BankError::Config(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if self.window == 0 {
            return Err(BankError::Config("window must be >= 1".into()));
        }
        if self.max_size == Some(0) {
            return Err(BankError::Config("max_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Top-k prototypes for one query, most similar first.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub prototypes: Vec<Vec<f64>>,
    pub similarities: Vec<f64>,
    /// Bank positions; empty for a cold-start result.
    pub indices: Vec<usize>,
}

impl RetrievalResult {
    /// Stand-in used while the bank is empty: the query replicated `k` times.
    pub fn cold_start(query: &[f64], k: usize) -> Self {
        Self {
            prototypes: vec![query.to_vec(); k.max(1)],
            similarities: vec![1.0; k.max(1)],
            indices: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    /// Row-major `k × d` matrix of the retrieved prototypes.
    pub fn matrix(&self) -> Vec<f64> {
        self.prototypes.concat()
    }
}

/// Mean of the retrieved prototypes, not re-normalized.
pub fn barycenter(result: &RetrievalResult) -> Vec<f64> {
    let k = result.k() as f64;
    let mut mean = vec![0.0; result.dim()];
    for p in &result.prototypes {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k);
    mean
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Rescales `values` onto the ball of radius `rho` if it lies outside.
/// Rounding in `rho / n` can leave the norm an ulp above `rho`; the factor
/// is nudged down until the bound holds exactly.
pub fn project_onto_ball(values: &mut [f64], rho: f64) {
    let mut n = l2_norm(values);
    let mut nudge = 1.0;
    while n > rho {
        let s = rho / n * nudge;
        values.iter_mut().for_each(|v| *v *= s);
        n = l2_norm(values);
        nudge *= 1.0 - 4.0 * f64::EPSILON;
    }
}

/// Hits gathered by one client against a round snapshot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalLog {
    pub queries: u64,
    /// Hit count per snapshot position.
    pub hits: Vec<u64>,
}

impl RetrievalLog {
    pub fn new(bank_len: usize) -> Self {
        Self {
            queries: 0,
            hits: vec![0; bank_len],
        }
    }

    pub fn observe(&mut self, result: &RetrievalResult) {
        self.queries += 1;
        for &i in &result.indices {
            self.hits[i] += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBank {
    config: BankConfig,
    prototypes: Vec<Prototype>,
    round: u64,
    next_seq: u64,
    dim: Option<usize>,
}

impl KnowledgeBank {
    pub fn new(config: BankConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prototypes: Vec::new(),
            round: 0,
            next_seq: 0,
            dim: None,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn retrieval_counts(&self) -> Vec<u64> {
        self.prototypes.iter().map(|p| p.retrieval_count).collect()
    }

    /// Exact top-k by cosine similarity without touching any counter.
    pub fn query(&self, query: &[f64], k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(BankError::ZeroK);
        }
        if self.prototypes.is_empty() {
            return Err(BankError::Empty);
        }
        self.check_dim(query.len())?;
        let k = k.min(self.prototypes.len());
        // bounded insertion into a list kept in (similarity desc, index asc) order
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, p) in self.prototypes.iter().enumerate() {
            let sim = cosine(query, &p.values);
            if best.len() == k && sim <= best[k - 1].0 {
                continue;
            }
            let pos = best.iter().position(|&(s, _)| sim > s).unwrap_or(best.len());
            best.insert(pos, (sim, i));
            best.truncate(k);
        }
        Ok(RetrievalResult {
            prototypes: best.iter().map(|&(_, i)| self.prototypes[i].values.clone()).collect(),
            similarities: best.iter().map(|&(s, _)| s).collect(),
            indices: best.iter().map(|&(_, i)| i).collect(),
        })
    }

    /// [`KnowledgeBank::query`] that also counts the query and the hits.
    pub fn retrieve_topk(&mut self, query: &[f64], k: usize) -> Result<RetrievalResult> {
        let result = self.query(query, k)?;
        let mut log = RetrievalLog::new(self.len());
        log.observe(&result);
        self.record(&log)?;
        Ok(result)
    }

    /// Mean of every prototype, as a one-row result. Counts nothing.
    pub fn mean_embedding(&self) -> Result<RetrievalResult> {
        let first = self.prototypes.first().ok_or(BankError::Empty)?;
        let mut mean = vec![0.0; first.values.len()];
        for p in &self.prototypes {
            for (m, v) in mean.iter_mut().zip(&p.values) {
                *m += v;
            }
        }
        let n = self.prototypes.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(RetrievalResult {
            prototypes: vec![mean],
            similarities: vec![1.0],
            indices: Vec::new(),
        })
    }

    /// Folds a client's retrieval log into the open round.
    pub fn record(&mut self, log: &RetrievalLog) -> Result<()> {
        if log.hits.len() > self.prototypes.len() {
            return Err(BankError::StaleLog {
                index: log.hits.len() - 1,
                len: self.prototypes.len(),
            });
        }
        if log.queries == 0 {
            return Ok(());
        }
        for (i, p) in self.prototypes.iter_mut().enumerate() {
            let hits = log.hits.get(i).copied().unwrap_or(0);
            p.current.queries += log.queries;
            p.current.hits += hits;
            p.queries_served += log.queries;
            p.retrieval_count += hits;
        }
        Ok(())
    }

    /// Closes the open round: pushes its statistics into every prototype's
    /// window and advances residency.
    pub fn close_round(&mut self) {
        let cap = self.config.window;
        for p in &mut self.prototypes {
            p.history.push_back(std::mem::take(&mut p.current));
            while p.history.len() > cap {
                p.history.pop_front();
            }
            p.rounds_resident += 1;
        }
        self.round += 1;
    }

    /// Appends tokens in the given order, then rescales every prototype whose
    /// norm exceeds `rho` back onto the ball. Evicts down to `max_size` if set.
    pub fn insert_and_project(&mut self, tokens: &[SpectralToken]) -> Result<()> {
        for t in tokens {
            self.check_dim(t.dim())?;
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(BankError::Config("token has non-finite entries".into()));
            }
            self.dim = Some(t.dim());
            self.prototypes.push(Prototype {
                values: t.values.clone(),
                source_client: t.source_client,
                inserted_round: self.round,
                seq: self.next_seq,
                retrieval_count: 0,
                queries_served: 0,
                rounds_resident: 0,
                history: VecDeque::new(),
                current: RoundStat::default(),
            });
            self.next_seq += 1;
        }
        let rho = self.config.rho;
        for p in &mut self.prototypes {
            project_onto_ball(&mut p.values, rho);
        }
        if let Some(cap) = self.config.max_size {
            while self.prototypes.len() > cap {
                let window = self.config.window;
                let victim = (0..self.prototypes.len())
                    .min_by(|&a, &b| {
                        let (pa, pb) = (&self.prototypes[a], &self.prototypes[b]);
                        let fa = pa.frequency(window).unwrap_or(1.0);
                        let fb = pb.frequency(window).unwrap_or(1.0);
                        fa.total_cmp(&fb).then(pa.seq.cmp(&pb.seq))
                    })
                    .expect("bank is non-empty");
                self.prototypes.remove(victim);
            }
        }
        Ok(())
    }

    /// Removes prototypes resident for at least `window` closed rounds whose
    /// retrieval frequency over that window is below `delta`. Prototypes hit
    /// in the open or the latest closed round, and prototypes that served no
    /// query in the window, are kept. Returns the number removed.
    pub fn prune(&mut self, window: usize) -> usize {
        let window = window.max(1);
        let delta = self.config.delta;
        let before = self.prototypes.len();
        self.prototypes.retain(|p| {
            if p.rounds_resident < window as u64 || p.hit_recently() {
                return true;
            }
            match p.frequency(window) {
                Some(f) => f >= delta,
                None => true,
            }
        });
        before - self.prototypes.len()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        match self.dim {
            Some(expected) if expected != got => Err(BankError::Dimension { expected, got }),
            _ => Ok(()),
        }
    }

    /// Largest stored norm; 0 for an empty bank.
    pub fn max_norm(&self) -> f64 {
        self.prototypes.iter().map(|p| l2_norm(&p.values)).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> SpectralToken {
        SpectralToken::new(v).normalized()
    }

    fn random_token(d: usize, rng: &mut ChaCha8Rng) -> SpectralToken {
        unit((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn bank_with(tokens: &[SpectralToken], config: BankConfig) -> KnowledgeBank {
        let mut bank = KnowledgeBank::new(config).unwrap();
        bank.insert_and_project(tokens).unwrap();
        bank
    }

    /// Full sort of every prototype by (similarity desc, index asc).
    fn brute_force(bank: &KnowledgeBank, q: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(f64, usize)> = bank
            .prototypes()
            .iter()
            .enumerate()
            .map(|(i, p)| (cosine(q, &p.values), i))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        all.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn query_in_bank_comes_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens: Vec<_> = (0..6).map(|_| random_token(4, &mut rng)).collect();
        let mut bank = bank_with(&tokens, BankConfig::default());
        let r = bank.retrieve_topk(&tokens[3].values, 2).unwrap();
        assert_eq!(r.indices[0], 3);
        assert!((r.similarities[0] - 1.0).abs() < 1e-12);
        assert_eq!(bank.retrieval_counts()[3], 1);

        let all = bank.retrieve_topk(&tokens[0].values, 6).unwrap();
        assert_eq!(all.indices.len(), 6);
        assert!(all.similarities.windows(2).all(|w| w[0] >= w[1]));
        let more = bank.query(&tokens[0].values, 50).unwrap();
        assert_eq!(more.indices, all.indices);
    }

    #[test]
    fn ties_break_by_lowest_index() {
        let t = unit(vec![1.0, 0.0]);
        let bank = bank_with(&[unit(vec![0.0, 1.0]), t.clone(), t.clone(), t.clone()], BankConfig::default());
        let r = bank.query(&t.values, 2).unwrap();
        assert_eq!(r.indices, vec![1, 2]);
    }

    #[test]
    fn empty_bank_and_zero_k() {
        let bank = KnowledgeBank::new(BankConfig::default()).unwrap();
        assert_eq!(bank.query(&[1.0], 1), Err(BankError::Empty));
        let bank = bank_with(&[unit(vec![1.0])], BankConfig::default());
        assert_eq!(bank.query(&[1.0], 0), Err(BankError::ZeroK));
    }

    #[test]
    fn retrieval_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let m = rng.gen_range(1..40);
            let d = rng.gen_range(1..8);
            let mut tokens: Vec<_> = (0..m).map(|_| random_token(d, &mut rng)).collect();
            if m > 3 && rng.gen_bool(0.3) {
                tokens[m - 1] = tokens[1].clone();
            }
            let bank = bank_with(&tokens, BankConfig { max_size: None, ..BankConfig::default() });
            let q = random_token(d, &mut rng);
            let k = rng.gen_range(1..m + 3);
            assert_eq!(bank.query(&q.values, k).unwrap().indices, brute_force(&bank, &q.values, k));
        }
    }

    #[test]
    fn barycenter_cases() {
        let s = vec![0.6, 0.8];
        let one = RetrievalResult { prototypes: vec![s.clone()], similarities: vec![1.0], indices: vec![0] };
        assert_eq!(barycenter(&one), s);
        let pair = RetrievalResult {
            prototypes: vec![s.clone(), vec![-0.6, -0.8]],
            similarities: vec![1.0, -1.0],
            indices: vec![0, 1],
        };
        assert_eq!(barycenter(&pair), vec![0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| random_token(5, &mut rng).values).collect();
        let r = RetrievalResult { prototypes: rows.clone(), similarities: vec![0.0; 3], indices: vec![0, 1, 2] };
        let b = barycenter(&r);
        for j in 0..5 {
            let naive = (rows[0][j] + rows[1][j] + rows[2][j]) / 3.0;
            assert!((b[j] - naive).abs() < 1e-15);
        }
    }

    #[test]
    fn insert_projects_onto_ball() {
        let mut bank = KnowledgeBank::new(BankConfig::default()).unwrap();
        let u = unit(vec![3.0, 4.0]);
        bank.insert_and_project(&[u.clone(), SpectralToken::new(vec![0.0, 2.0]), SpectralToken::new(vec![0.3, 0.0])]).unwrap();
        assert_eq!(bank.len(), 3);
        assert_eq!(bank.prototypes()[0].values, u.values);
        assert_eq!(bank.prototypes()[1].values, vec![0.0, 1.0]);
        assert_eq!(bank.prototypes()[2].values, vec![0.3, 0.0]);
        assert!(bank.insert_and_project(&[SpectralToken::new(vec![1.0, 0.0, 0.0])]).is_err());
    }

    #[test]
    fn prune_respects_delta_and_immunity() {
        let cfg = BankConfig { delta: 0.0, window: 2, ..BankConfig::default() };
        let mut bank = bank_with(&[unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])], cfg);
        for _ in 0..5 {
            bank.retrieve_topk(&[1.0, 0.0], 1).unwrap();
            bank.close_round();
        }
        assert_eq!(bank.prune(2), 0);

        let cfg = BankConfig { delta: 0.1, window: 2, ..BankConfig::default() };
        let mut bank = bank_with(&[unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])], cfg);
        bank.retrieve_topk(&[1.0, 0.0], 1).unwrap();
        bank.close_round();
        assert_eq!(bank.prune(2), 0, "window has not elapsed");
        bank.retrieve_topk(&[1.0, 0.0], 1).unwrap();
        bank.close_round();
        assert_eq!(bank.prune(2), 1);
        assert_eq!(bank.prototypes()[0].values, vec![1.0, 0.0]);
        assert_eq!(bank.prototypes()[0].retrieval_count, 2);
    }

    #[test]
    fn max_size_evicts_lowest_frequency_then_oldest() {
        let cfg = BankConfig { max_size: Some(2), window: 3, ..BankConfig::default() };
        let mut bank = bank_with(&[unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])], cfg);
        bank.retrieve_topk(&[0.0, 1.0], 1).unwrap();
        bank.close_round();
        bank.insert_and_project(&[unit(vec![1.0, 1.0])]).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.prototypes()[0].values, vec![0.0, 1.0]);
    }

    /// Replays a query log from scratch: per prototype, which rounds it was
    /// resident in, how many queries those rounds had and how many hit it.
    #[test]
    fn prune_matches_trace_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let (window, delta, d) = (rng.gen_range(1..5), rng.gen_range(0.0..0.4), 3);
            let cfg = BankConfig { rho: 1.0, delta, window, max_size: None };
            let mut bank = KnowledgeBank::new(cfg).unwrap();
            // oracle state: id -> (alive, insert round, per-round (queries, hits))
            struct Entry {
                id: u64,
                alive: bool,
                log: Vec<(u64, u64)>,
            }
            let mut oracle: Vec<Entry> = Vec::new();
            let mut next_id = 0u64;
            let mut ids_in_bank: Vec<u64> = Vec::new();
            for round in 0..20 {
                let queries = if bank.is_empty() { 0 } else { rng.gen_range(0..6) };
                let mut round_hits = vec![0u64; bank.len()];
                for _ in 0..queries {
                    let q = random_token(d, &mut rng);
                    let k = rng.gen_range(1..3);
                    let r = bank.retrieve_topk(&q.values, k).unwrap();
                    for &i in &r.indices {
                        round_hits[i] += 1;
                    }
                }
                for (pos, id) in ids_in_bank.iter().enumerate() {
                    let e = oracle.iter_mut().find(|e| e.id == *id).unwrap();
                    e.log.push((queries, round_hits[pos]));
                }
                bank.close_round();
                let n_new = rng.gen_range(0..3);
                let new: Vec<_> = (0..n_new).map(|_| random_token(d, &mut rng)).collect();
                bank.insert_and_project(&new).unwrap();
                for _ in 0..n_new {
                    oracle.push(Entry { id: next_id, alive: true, log: Vec::new() });
                    ids_in_bank.push(next_id);
                    next_id += 1;
                }
                if round % 2 == 1 {
                    bank.prune(window);
                    for e in oracle.iter_mut().filter(|e| e.alive) {
                        if e.log.len() < window {
                            continue;
                        }
                        let recent = &e.log[e.log.len() - window..];
                        if recent.last().unwrap().1 > 0 {
                            continue;
                        }
                        let q: u64 = recent.iter().map(|r| r.0).sum();
                        let h: u64 = recent.iter().map(|r| r.1).sum();
                        if q > 0 && (h as f64 / q as f64) < delta {
                            e.alive = false;
                        }
                    }
                    ids_in_bank.retain(|id| oracle.iter().any(|e| e.id == *id && e.alive));
                }
                let expected: Vec<u64> = ids_in_bank.clone();
                assert_eq!(bank.len(), expected.len(), "trial {trial} round {round}");
                let seqs: Vec<u64> = bank.prototypes().iter().map(|p| p.seq).collect();
                assert_eq!(seqs, expected, "trial {trial} round {round}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn post_insert_norms_within_rho(
            rho in 0.1f64..3.0,
            vecs in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..20),
        ) {
            let mut bank = KnowledgeBank::new(BankConfig { rho, ..BankConfig::default() }).unwrap();
            let tokens: Vec<_> = vecs.into_iter().map(SpectralToken::new).collect();
            bank.insert_and_project(&tokens).unwrap();
            proptest::prop_assert!(bank.max_norm() <= rho * (1.0 + 1e-12));
        }

        #[test]
        fn retrieval_invariant_to_query_scale(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tokens: Vec<_> = (0..12).map(|_| random_token(5, &mut rng)).collect();
            let bank = bank_with(&tokens, BankConfig::default());
            let q = random_token(5, &mut rng).values;
            let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
            proptest::prop_assert_eq!(bank.query(&q, 4).unwrap().indices, bank.query(&scaled, 4).unwrap().indices);
        }
    }
}
