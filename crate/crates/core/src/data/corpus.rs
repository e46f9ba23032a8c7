use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

/// A first-order Markov chain over a token inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub tokens: Vec<String>,
    /// Row `i` is the next-token distribution after `tokens[i]`.
    pub transitions: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    /// Inclusive document length range, in tokens.
    pub doc_len: (usize, usize),
    pub seed: u64,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Data(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::Data(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.tokens.len();
        if k == 0 {
            return Err(Error::Data(format!("{}: empty inventory", self.name)));
        }
        if self.transitions.len() != k || self.initial.len() != k {
            return Err(Error::Data(format!(
                "{}: table size does not match {k} tokens",
                self.name
            )));
        }
        check_distribution(&self.initial, &format!("{} initial distribution", self.name))?;
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Data(format!("{}: row {i} has {} entries", self.name, row.len())));
            }
            check_distribution(row, &format!("{} row {i}", self.name))?;
        }
        let (lo, hi) = self.doc_len;
        if lo == 0 || lo > hi {
            return Err(Error::Data(format!(
                "{}: invalid doc length range {lo}..={hi}",
                self.name
            )));
        }
        Ok(())
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}

/// `num_docs` documents sampled from the chain, one per line.
pub fn gen_domain_corpus(spec: &DomainSpec, num_docs: usize) -> Result<Vec<String>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let start = WeightedIndex::new(&spec.initial).map_err(|e| Error::Data(e.to_string()))?;
    let rows = spec
        .transitions
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| Error::Data(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = spec.doc_len;
    let mut docs = Vec::with_capacity(num_docs);
    for _ in 0..num_docs {
        let len = rng.gen_range(lo..=hi);
        let mut cur = start.sample(&mut rng);
        let mut words = Vec::with_capacity(len);
        words.push(spec.tokens[cur].as_str());
        for _ in 1..len {
            cur = rows[cur].sample(&mut rng);
            words.push(spec.tokens[cur].as_str());
        }
        docs.push(words.join(" "));
    }
    Ok(docs)
}

/// First 70% for pretraining, the rest held out.
pub fn split_70_30<T: Clone>(docs: &[T]) -> (Vec<T>, Vec<T>) {
    let cut = docs.len() * 7 / 10;
    (docs[..cut].to_vec(), docs[cut..].to_vec())
}

/// Shape of the preset three-domain world.
///
/// The inventory is split into a common block, a general-heavy block and one
/// block per domain. The general chain lives on common ∪ general-heavy. Each
/// domain chain starts in common ∪ its own block, copies a fraction `shared`
/// of the common rows and every general-heavy row verbatim from the general
/// chain, so it only wanders into the general-heavy block through copied rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub content_tokens: usize,
    /// Successors per row.
    pub branch: usize,
    /// Fraction of common rows a domain copies from the general chain.
    pub shared: f64,
    /// Fraction of the inventory in the general-heavy block.
    pub general_only: f64,
    /// Fraction of the inventory owned by each domain.
    pub domain_only: f64,
    pub doc_len: (usize, usize),
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            content_tokens: 195,
            branch: 3,
            shared: 0.5,
            general_only: 0.25,
            domain_only: 0.125,
            doc_len: (10, 14),
            seed: 7,
        }
    }
}

/// A general chain and two domain chains over one shared inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub vocab: Vocab,
    pub general: DomainSpec,
    pub dom_a: DomainSpec,
    pub dom_b: DomainSpec,
}

/// Geometric weights over `branch` successors drawn from `support`.
fn sparse_row<R: Rng>(rng: &mut R, k: usize, support: &[usize], branch: usize) -> Vec<f64> {
    let branch = branch.clamp(1, support.len());
    let raw: Vec<f64> = (0..branch).map(|i| 0.5f64.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    let mut row = vec![0.0; k];
    for (w, j) in raw.iter().zip(sample(rng, support.len(), branch).iter()) {
        row[support[j]] = w / total;
    }
    row
}

/// General rows, common block, always-copied block, copy fraction.
type Template<'a> = (&'a [Vec<f64>], &'a [usize], &'a [usize], f64);

fn chain<R: Rng>(
    rng: &mut R,
    k: usize,
    support: &[usize],
    branch: usize,
    template: Option<Template<'_>>,
    start: &[usize],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let inside: Vec<bool> = (0..k).map(|i| support.contains(&i)).collect();
    let rows = (0..k)
        .map(|i| {
            if !inside[i] {
                let mut r = vec![0.0; k];
                r[i] = 1.0;
                return r;
            }
            if let Some((general, common, always, shared)) = template {
                if always.contains(&i) || (common.contains(&i) && rng.gen::<f64>() < shared) {
                    return general[i].clone();
                }
            }
            sparse_row(rng, k, start, branch)
        })
        .collect();
    let mut initial = vec![0.0; k];
    start.iter().for_each(|&i| initial[i] = 1.0 / start.len() as f64);
    (rows, initial)
}

impl SyntheticWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        let k = config.content_tokens;
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        let n_general = (config.general_only * k as f64).round() as usize;
        let n_domain = (config.domain_only * k as f64).round() as usize;
        if k < 8
            || config.branch == 0
            || !frac_ok(config.shared)
            || !frac_ok(config.general_only)
            || !frac_ok(config.domain_only)
            || n_general + 2 * n_domain + config.branch > k
        {
            return Err(Error::config(format!("invalid world config {config:?}")));
        }
        let tokens: Vec<String> = (0..k).map(|i| format!("w{i:03}")).collect();
        let vocab = Vocab::from_tokens(tokens.iter().cloned())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        let (general_block, rest) = order.split_at(n_general);
        let (a_block, rest) = rest.split_at(n_domain);
        let (b_block, common) = rest.split_at(n_domain);
        let mut common = common.to_vec();
        common.sort_unstable();
        let with = |block: &[usize]| {
            let mut v: Vec<usize> = common.iter().chain(block).copied().collect();
            v.sort_unstable();
            v
        };
        let base_seed = config.seed.wrapping_mul(0x9e37_79b9);
        let general_support = with(general_block);
        let (general_rows, general_init) = chain(&mut rng, k, &general_support, config.branch, None, &general_support);
        let mut domain = |name: &str, block: &[usize], stream: u64| {
            let template = Some((general_rows.as_slice(), common.as_slice(), general_block, config.shared));
            let start = with(block);
            let mut support = start.clone();
            support.extend_from_slice(general_block);
            let (rows, initial) = chain(&mut rng, k, &support, config.branch, template, &start);
            DomainSpec {
                name: name.to_string(),
                tokens: tokens.clone(),
                transitions: rows,
                initial,
                doc_len: config.doc_len,
                seed: base_seed.wrapping_add(stream),
            }
        };
        let dom_a = domain("domA", a_block, 2);
        let dom_b = domain("domB", b_block, 3);
        let general = DomainSpec {
            name: "general".into(),
            tokens: tokens.clone(),
            transitions: general_rows.clone(),
            initial: general_init,
            doc_len: config.doc_len,
            seed: base_seed.wrapping_add(1),
        };
        for s in [&general, &dom_a, &dom_b] {
            s.validate()?;
        }
        Ok(SyntheticWorld {
            config,
            vocab,
            general,
            dom_a,
            dom_b,
        })
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        [&self.general, &self.dom_a, &self.dom_b]
            .into_iter()
            .find(|s| s.name == name)
    }
}
