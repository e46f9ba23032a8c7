use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{gen_domain_corpus, DomainSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub num_examples: usize,
    /// Probability that the planted markers agree with the label.
    pub signal: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            num_classes: 4,
            num_examples: 600,
            signal: 0.9,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub first: String,
    pub second: String,
}

impl Marker {
    pub fn count_in(&self, text: &str) -> usize {
        let words: Vec<&str> = text.split_whitespace().collect();
        words
            .windows(2)
            .filter(|w| w[0] == self.first && w[1] == self.second)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub id: usize,
    pub label: usize,
    pub text: String,
}

/// 60/20/20 train/dev/test split of the planted task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub num_classes: usize,
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    /// Bigrams the general chain emits and the domain chain never does.
    pub general_markers: Vec<Marker>,
    /// Bigrams neither chain emits, built from rows where the domain departs
    /// from the general chain.
    pub domain_markers: Vec<Marker>,
}

impl TaskSplits {
    /// Class `c` plants `general_markers[c / b]` and `domain_markers[c % b]`.
    pub fn families(num_classes: usize) -> (usize, usize) {
        let a = (num_classes as f64).sqrt().ceil() as usize;
        let b = num_classes.div_ceil(a);
        (a, b)
    }
}

fn pick_markers(
    general: &DomainSpec,
    domain: &DomainSpec,
    count_general: usize,
    count_domain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Marker>, Vec<Marker>)> {
    let k = general.tokens.len();
    let mut used = vec![false; k];
    let mut rows: Vec<usize> = (0..k)
        .filter(|&i| general.transitions[i] != domain.transitions[i])
        .collect();
    rows.shuffle(rng);
    let mut general_markers = Vec::new();
    let mut domain_markers = Vec::new();
    for &x in &rows {
        if used[x] {
            continue;
        }
        let g = &general.transitions[x];
        let d = &domain.transitions[x];
        let pick = if general_markers.len() < count_general {
            (0..k)
                .filter(|&y| g[y] > 0.0 && d[y] == 0.0 && !used[y] && y != x)
                .max_by(|a, b| g[*a].total_cmp(&g[*b]).then(b.cmp(a)))
        } else if domain_markers.len() < count_domain {
            let mut ys: Vec<usize> = (0..k)
                .filter(|&y| g[y] == 0.0 && d[y] == 0.0 && !used[y] && y != x)
                .collect();
            ys.shuffle(rng);
            ys.first().copied()
        } else {
            break;
        };
        let Some(y) = pick else { continue };
        used[x] = true;
        used[y] = true;
        let m = Marker {
            first: general.tokens[x].clone(),
            second: general.tokens[y].clone(),
        };
        if general_markers.len() < count_general {
            general_markers.push(m);
        } else {
            domain_markers.push(m);
        }
    }
    if general_markers.len() < count_general || domain_markers.len() < count_domain {
        return Err(Error::Data("chains differ too little to plant markers".into()));
    }
    Ok((general_markers, domain_markers))
}

/// Documents from `domain` with one general-family and one domain-family
/// marker planted; the label is the (general, domain) family pair.
pub fn gen_classification_task(general: &DomainSpec, domain: &DomainSpec, spec: &TaskSpec) -> Result<TaskSplits> {
    if spec.num_classes < 2 {
        return Err(Error::config("classification needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&spec.signal) {
        return Err(Error::config(format!("signal {} outside [0, 1]", spec.signal)));
    }
    if general.tokens != domain.tokens {
        return Err(Error::Data("general and domain chains must share an inventory".into()));
    }
    if domain.doc_len.0 < 4 {
        return Err(Error::Data(
            "documents need at least 4 tokens to carry two markers".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (a, b) = TaskSplits::families(spec.num_classes);
    let (general_markers, domain_markers) = pick_markers(general, domain, a, b, &mut rng)?;

    let mut background = domain.clone();
    background.seed = spec.seed.wrapping_mul(0x2545_f491).wrapping_add(17);
    let docs = gen_domain_corpus(&background, spec.num_examples)?;

    let mut examples = Vec::with_capacity(spec.num_examples);
    for (id, doc) in docs.into_iter().enumerate() {
        let label = rng.gen_range(0..spec.num_classes);
        let planted = if rng.gen::<f64>() < spec.signal {
            label
        } else {
            rng.gen_range(0..spec.num_classes)
        };
        let mut words: Vec<String> = doc.split(' ').map(String::from).collect();
        let n = words.len();
        let gm = &general_markers[planted / b];
        let dm = &domain_markers[planted % b];
        let (p, q) = loop {
            let p = rng.gen_range(0..n - 1);
            let q = rng.gen_range(0..n - 1);
            if p.abs_diff(q) >= 2 {
                break (p, q);
            }
        };
        words[p] = gm.first.clone();
        words[p + 1] = gm.second.clone();
        words[q] = dm.first.clone();
        words[q + 1] = dm.second.clone();
        examples.push(TaskExample {
            id,
            label,
            text: words.join(" "),
        });
    }
    let n = examples.len();
    let (t, d) = (n * 6 / 10, n * 8 / 10);
    let test = examples.split_off(d);
    let dev = examples.split_off(t);
    Ok(TaskSplits {
        num_classes: spec.num_classes,
        train: examples,
        dev,
        test,
        general_markers,
        domain_markers,
    })
}

/// `label<TAB>document` lines.
pub fn write_task_file(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in examples {
        writeln!(f, "{}\t{}", e.label, e.text)?;
    }
    Ok(())
}

/// Reads `label<TAB>document` lines; ids are 0-based line numbers.
pub fn read_task_file(path: &Path) -> Result<Vec<TaskExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, doc) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}:{}: missing tab", path.display(), i + 1)))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad label {label:?}", path.display(), i + 1)))?;
        out.push(TaskExample {
            id: i,
            label,
            text: doc.to_string(),
        });
    }
    Ok(out)
}
