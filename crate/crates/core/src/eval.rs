//! Dataset splitting and top-K ranking evaluation (Recall@K, NDCG@K with
//! binary gains), plus the ablation sweep harness.

use crate::hin::InteractionMatrix;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) {
        assert!(
            (self.train + self.val + self.test - 1.0).abs() < 1e-9,
            "split fractions must sum to 1"
        );
    }
}

/// Per-user item-column sets; pairwise disjoint, union = the original sets.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Vec<u32>>,
    pub val: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
    /// Users whose interaction count was too small for the requested floor;
    /// their extra mass went to train.
    pub warned_users: Vec<u32>,
}

/// Per-user random partition at the configured ratios; every user keeps at
/// least one training interaction.
pub fn split(inter: &InteractionMatrix, cfg: &SplitConfig) -> Splits {
    cfg.validate();
    let mut train = Vec::with_capacity(inter.m());
    let mut val = Vec::with_capacity(inter.m());
    let mut test = Vec::with_capacity(inter.m());
    let mut warned = Vec::new();
    for (u, items) in inter.by_user.iter().enumerate() {
        let mut shuffled = items.clone();
        let mut rng = Rng::stream(cfg.seed, &[0x591, u as u64]);
        rng.shuffle(&mut shuffled);
        let n = shuffled.len();
        let mut n_val = (n as f64 * cfg.val).floor() as usize;
        let mut n_test = (n as f64 * cfg.test).floor() as usize;
        if n_val + n_test >= n && n > 0 {
            // keep >= 1 training interaction; shrink test first, then val
            warned.push(u as u32);
            while n_val + n_test >= n && n_test > 0 {
                n_test -= 1;
            }
            while n_val + n_test >= n && n_val > 0 {
                n_val -= 1;
            }
        }
        let mut t: Vec<u32> = shuffled[..n - n_val - n_test].to_vec();
        let mut v: Vec<u32> = shuffled[n - n_val - n_test..n - n_test].to_vec();
        let mut s: Vec<u32> = shuffled[n - n_test..].to_vec();
        t.sort_unstable();
        v.sort_unstable();
        s.sort_unstable();
        train.push(t);
        val.push(v);
        test.push(s);
    }
    Splits {
        train,
        val,
        test,
        warned_users: warned,
    }
}

/// All candidate items (columns not in the user's training set) sorted by
/// score descending, ties broken by ascending item index.
pub fn rank_items<F: Fn(usize) -> f64>(
    n_items: usize,
    train_items: &[u32],
    score: F,
) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = (0..n_items as u32)
        .filter(|c| train_items.binary_search(c).is_err())
        .map(|c| (score(c as usize), c))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    scored.into_iter().map(|(_, c)| c).collect()
}

/// |top-K intersect test| / |test|. Callers must exclude users with empty
/// test sets from averaging.
pub fn recall_at_k(ranked: &[u32], test_items: &[u32], k: usize) -> f64 {
    assert!(k >= 1);
    if test_items.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|c| test_items.binary_search(c).is_ok())
        .count();
    hits as f64 / test_items.len() as f64
}

/// Binary-gain DCG@K with log2(rank+1) discounts, normalized by the ideal
/// DCG for |test| items.
pub fn ndcg_at_k(ranked: &[u32], test_items: &[u32], k: usize) -> f64 {
    assert!(k >= 1);
    if test_items.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (rank0, c) in ranked.iter().take(k).enumerate() {
        if test_items.binary_search(c).is_ok() {
            dcg += 1.0 / ((rank0 + 2) as f64).log2();
        }
    }
    let ideal = k.min(test_items.len());
    let idcg: f64 = (0..ideal).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Metrics at one K averaged over users with non-empty test sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub n_users: usize,
}

#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// CSV with header `K,recall,ndcg,n_users`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("K,recall,ndcg,n_users\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6},{}\n", r.k, r.recall, r.ndcg, r.n_users));
        }
        out
    }
}

/// Rank every user against all non-train items and average the metrics.
/// The scorer maps (user row, item col) to a score. Panics if a user's
/// training item leaks into its ranking.
pub fn evaluate<F: Fn(usize, usize) -> f64>(
    n_items: usize,
    train_sets: &[Vec<u32>],
    test_sets: &[Vec<u32>],
    ks: &[usize],
    score: F,
) -> MetricReport {
    let mut sums: Vec<(f64, f64, usize)> = vec![(0.0, 0.0, 0); ks.len()];
    for (u, test) in test_sets.iter().enumerate() {
        if test.is_empty() {
            continue;
        }
        let train = &train_sets[u];
        let ranked = rank_items(n_items, train, |c| score(u, c));
        for c in &ranked {
            assert!(train.binary_search(c).is_err(), "train item leaked into ranking");
        }
        for (slot, &k) in sums.iter_mut().zip(ks) {
            slot.0 += recall_at_k(&ranked, test, k);
            slot.1 += ndcg_at_k(&ranked, test, k);
            slot.2 += 1;
        }
    }
    MetricReport {
        rows: ks
            .iter()
            .zip(sums)
            .map(|(&k, (r, n, c))| MetricRow {
                k,
                recall: if c == 0 { 0.0 } else { r / c as f64 },
                ndcg: if c == 0 { 0.0 } else { n / c as f64 },
                n_users: c,
            })
            .collect(),
    }
}

/// Axis of an ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    IntentCount,
    Layers,
    InterventionIters,
    TopK,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "k" => Some(AblationAxis::IntentCount),
            "L" => Some(AblationAxis::Layers),
            "iterations_n" | "n" => Some(AblationAxis::InterventionIters),
            "K" => Some(AblationAxis::TopK),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::IntentCount => "k",
            AblationAxis::Layers => "L",
            AblationAxis::InterventionIters => "iterations_n",
            AblationAxis::TopK => "K",
        }
    }
}

/// One full train+eval run per value; the runner owns the pipeline. Emits
/// CSV rows `axis,value,recall@20,ndcg@20`.
pub fn ablation_sweep<E, F>(
    axis: AblationAxis,
    values: &[usize],
    mut run: F,
) -> Result<String, E>
where
    F: FnMut(AblationAxis, usize) -> Result<MetricReport, E>,
{
    let mut csv = String::from("axis,value,recall@20,ndcg@20\n");
    for &v in values {
        let report = run(axis, v)?;
        let row = report
            .at(20)
            .or_else(|| report.rows.first())
            .copied()
            .unwrap_or(MetricRow {
                k: 20,
                recall: 0.0,
                ndcg: 0.0,
                n_users: 0,
            });
        csv.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            axis.name(),
            v,
            row.recall,
            row.ndcg
        ));
    }
    Ok(csv)
}
