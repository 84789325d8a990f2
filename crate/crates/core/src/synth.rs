//! Sessions with planted interest structure: each session mixes items from
//! two disjoint pools, laid out on a timeline where gaps inside an interest
//! are short and the gap between interests is long.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{Dataset, Example, SessionRecord};
use crate::error::{ConfigError, DataError};
use crate::exec::ExecMode;

/// Seconds between consecutive session start times.
pub const SESSION_SPACING: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetRule {
    /// Target comes from the pool of the session's last item.
    LatestInterest,
    /// Target comes from either of the session's pools with equal odds.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Disjoint item sets, one per latent interest.
    pub pools: Vec<Vec<usize>>,
    pub sessions: usize,
    /// Inclusive range of items drawn from each of a session's two pools.
    pub items_per_interest: (usize, usize),
    /// Inclusive range of seconds between items of the same interest.
    pub intra_gap: (i64, i64),
    /// Inclusive range of seconds between the two interest blocks.
    pub inter_gap: (i64, i64),
    /// Two contiguous blocks when set, otherwise alternating items.
    pub chunked: bool,
    pub target_rule: TargetRule,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// `pool_count` pools of `pool_size` consecutive item ids.
    pub fn with_pools(pool_count: usize, pool_size: usize, sessions: usize, seed: u64) -> Self {
        SynthConfig {
            pools: (0..pool_count)
                .map(|p| (p * pool_size..(p + 1) * pool_size).collect())
                .collect(),
            sessions,
            items_per_interest: (3, 5),
            intra_gap: (5, 30),
            inter_gap: (1800, 7200),
            chunked: true,
            target_rule: TargetRule::LatestInterest,
            test_fraction: 0.1,
            seed,
        }
    }

    pub fn item_count(&self) -> usize {
        self.pools.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pools.len() < 2 {
            return Err(ConfigError::new("at least two pools are required"));
        }
        let mut seen = std::collections::HashSet::new();
        for pool in &self.pools {
            if pool.is_empty() {
                return Err(ConfigError::new("pools must be non-empty"));
            }
            if pool.iter().any(|i| !seen.insert(*i)) {
                return Err(ConfigError::new("pools must be disjoint"));
            }
        }
        let (lo, hi) = self.items_per_interest;
        if lo == 0 || lo > hi {
            return Err(ConfigError::new(
                "items per interest must be a non-empty range starting at 1 or more",
            ));
        }
        // the target must still have an unseen item in its pool
        if let Some(p) = self.pools.iter().find(|p| p.len() <= hi) {
            return Err(ConfigError::new(format!(
                "pool of {} items is too small to draw {hi} items plus a target",
                p.len()
            )));
        }
        let (a, b) = self.intra_gap;
        let (c, d) = self.inter_gap;
        if a <= 0 || a > b || c <= 0 || c > d {
            return Err(ConfigError::new("gap ranges must be positive and ordered"));
        }
        if b >= c {
            return Err(ConfigError::new(
                "intra-interest gaps must be shorter than the inter-interest gap",
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ConfigError::new("test fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Ground truth for one generated session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionLabels {
    /// Generating pool of each item, aligned with the session.
    pub item_pools: Vec<usize>,
    pub target_pool: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub examples: Vec<Example>,
    pub labels: Vec<SessionLabels>,
    pub item_count: usize,
    pub test_fraction: f64,
}

impl SynthCorpus {
    /// Index of the first test example; sessions are in time order.
    pub fn split_point(&self) -> usize {
        let n = self.examples.len();
        n - (n as f64 * self.test_fraction).round() as usize
    }

    pub fn to_dataset(&self) -> Dataset {
        let cut = self.split_point();
        Dataset {
            vocab: (0..self.item_count).map(|i| format!("i{i}")).collect(),
            train: self.examples[..cut].to_vec(),
            test: self.examples[cut..].to_vec(),
        }
    }

    pub fn test_labels(&self) -> &[SessionLabels] {
        &self.labels[self.split_point()..]
    }

    /// One line per session: id, item pools, target pool.
    pub fn format_labels(&self) -> String {
        let mut out = String::from("tmignn-labels 1\n");
        for (ex, l) in self.examples.iter().zip(&self.labels) {
            let pools: Vec<String> = l.item_pools.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(out, "{}\t{}\t{}", ex.prefix.session_id, pools.join(","), l.target_pool);
        }
        out
    }

    pub fn write_labels(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.format_labels()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (i64, i64)) -> i64 {
    rng.random_range(lo..=hi)
}

fn one_session(cfg: &SynthConfig, index: usize) -> (Example, SessionLabels) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let chosen: Vec<usize> = (0..cfg.pools.len())
        .collect::<Vec<_>>()
        .choose_multiple(&mut rng, 2)
        .copied()
        .collect();
    let (lo, hi) = cfg.items_per_interest;
    let blocks: Vec<Vec<usize>> = chosen
        .iter()
        .map(|&p| {
            let n = rng.random_range(lo..=hi);
            cfg.pools[p].choose_multiple(&mut rng, n).copied().collect()
        })
        .collect();

    // (item, pool) in presentation order
    let mut order: Vec<(usize, usize)> = Vec::new();
    if cfg.chunked {
        for (b, block) in blocks.iter().enumerate() {
            order.extend(block.iter().map(|&i| (i, chosen[b])));
        }
    } else {
        let longest = blocks[0].len().max(blocks[1].len());
        for k in 0..longest {
            for (b, block) in blocks.iter().enumerate() {
                if let Some(&i) = block.get(k) {
                    order.push((i, chosen[b]));
                }
            }
        }
    }

    let mut t = index as i64 * SESSION_SPACING;
    let mut timestamps = Vec::with_capacity(order.len());
    for k in 0..order.len() {
        if k > 0 {
            let boundary = cfg.chunked && k == blocks[0].len();
            t += draw(&mut rng, if boundary { cfg.inter_gap } else { cfg.intra_gap });
        }
        timestamps.push(t);
    }

    let last_pool = order.last().expect("non-empty").1;
    let target_pool = match cfg.target_rule {
        TargetRule::LatestInterest => last_pool,
        TargetRule::Uniform => *chosen.choose(&mut rng).expect("two pools"),
    };
    let unseen: Vec<usize> = cfg.pools[target_pool]
        .iter()
        .copied()
        .filter(|i| !order.iter().any(|(j, _)| j == i))
        .collect();
    let target = *unseen.choose(&mut rng).expect("validated pool size");

    let example = Example {
        prefix: SessionRecord {
            session_id: format!("syn{index}"),
            items: order.iter().map(|&(i, _)| i).collect(),
            timestamps,
        },
        target,
    };
    let labels = SessionLabels {
        item_pools: order.iter().map(|&(_, p)| p).collect(),
        target_pool,
    };
    (example, labels)
}

/// Generates the corpus. Each session draws from its own random stream, so
/// the result does not depend on `mode`.
pub fn generate(cfg: &SynthConfig, mode: ExecMode) -> Result<SynthCorpus, ConfigError> {
    cfg.validate()?;
    let indices: Vec<usize> = (0..cfg.sessions).collect();
    let (examples, labels) = mode.map(&indices, |&i| one_session(cfg, i)).into_iter().unzip();
    Ok(SynthCorpus {
        examples,
        labels,
        item_count: cfg.item_count(),
        test_fraction: cfg.test_fraction,
    })
}

/// Scores that rank the unseen items of the true target pool first (by
/// index), then everything else.
pub fn oracle_scores(cfg: &SynthConfig, session: &SessionRecord, labels: &SessionLabels) -> Vec<f64> {
    let mut scores = vec![0.0; cfg.item_count()];
    for &i in &cfg.pools[labels.target_pool] {
        if !session.items.contains(&i) {
            scores[i] = 1.0;
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(chunked: bool) -> SynthConfig {
        SynthConfig {
            items_per_interest: (3, 3),
            chunked,
            ..SynthConfig::with_pools(2, 10, 50, 7)
        }
    }

    #[test]
    fn chunked_layout() {
        let cfg = small(true);
        let c = generate(&cfg, ExecMode::Sequential).unwrap();
        for (ex, l) in c.examples.iter().zip(&c.labels) {
            assert_eq!(ex.prefix.len(), 6);
            let gaps: Vec<i64> = ex.prefix.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
            assert_eq!(gaps.iter().filter(|&&g| g >= cfg.inter_gap.0).count(), 1);
            assert!(gaps[2] >= cfg.inter_gap.0);
            assert_eq!(l.target_pool, l.item_pools[5]);
            assert!(cfg.pools[l.target_pool].contains(&ex.target));
            assert!(!ex.prefix.items.contains(&ex.target));
            assert_ne!(l.item_pools[0], l.item_pools[5]);
        }
    }

    #[test]
    fn interleaved_alternates() {
        let c = generate(&small(false), ExecMode::Sequential).unwrap();
        for l in &c.labels {
            assert!(l.item_pools.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn seeded_and_mode_independent() {
        let cfg = SynthConfig::with_pools(3, 12, 40, 3);
        let a = generate(&cfg, ExecMode::Sequential).unwrap();
        let b = generate(&cfg, ExecMode::Parallel).unwrap();
        assert_eq!(a, b);
        let other = generate(&SynthConfig { seed: 4, ..cfg }, ExecMode::Sequential).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn bad_configs() {
        let mut cfg = SynthConfig::with_pools(2, 5, 10, 1);
        assert!(cfg.validate().is_err(), "pool of 5 cannot hold 5 draws plus a target");
        cfg = SynthConfig::with_pools(2, 10, 10, 1);
        cfg.pools[1][0] = 0;
        assert!(cfg.validate().is_err());
        cfg = SynthConfig::with_pools(2, 10, 10, 1);
        cfg.intra_gap = (5, 4000);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn labels_sidecar() {
        let c = generate(&small(true), ExecMode::Sequential).unwrap();
        let text = c.format_labels();
        assert_eq!(text.lines().count(), 51);
        assert!(text.lines().nth(1).unwrap().starts_with("syn0\t"));
        let ds = c.to_dataset();
        assert_eq!((ds.train.len(), ds.test.len()), (45, 5));
    }

    proptest! {
        #[test]
        fn timestamps_strictly_increase(seed in 0u64..500, chunked: bool) {
            let cfg = SynthConfig { sessions: 5, chunked, ..SynthConfig::with_pools(3, 8, 5, seed) };
            let c = generate(&cfg, ExecMode::Sequential).unwrap();
            for ex in &c.examples {
                prop_assert!(ex.prefix.timestamps.windows(2).all(|w| w[0] < w[1]));
                let big = ex.prefix.timestamps.windows(2).filter(|w| w[1] - w[0] >= cfg.inter_gap.0).count();
                prop_assert_eq!(big, usize::from(chunked));
            }
        }
    }
}
