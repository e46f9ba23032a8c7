use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MaskedBatch;
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{GmapModel, Sequence};

/// The loss a gradient check differentiates.
#[derive(Clone, Debug)]
pub enum CheckBatch {
    Mlm(MaskedBatch),
    Classify(Vec<(Sequence, usize)>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Entries probed per tensor; smaller tensors are probed in full.
    pub samples_per_param: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-4,
            tolerance: 1e-4,
            samples_per_param: 6,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradGroup {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// One group per trainable tensor; frozen tensors never appear.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub groups: Vec<GradGroup>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&GradGroup> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |g| g.max_rel_err)
    }

    pub fn ensure(&self, tolerance: f64) -> Result<()> {
        match self.worst() {
            Some(g) if g.max_rel_err.is_nan() || g.max_rel_err >= tolerance => Err(Error::GradCheck {
                param: g.name.clone(),
                rel_err: g.max_rel_err,
                tolerance,
            }),
            _ => Ok(()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,checked,max_rel_err,max_abs_err\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{:e},{:e}\n",
                g.name, g.checked, g.max_rel_err, g.max_abs_err
            ));
        }
        out
    }
}

fn loss_var(model: &GmapModel, g: &mut Graph, batch: &CheckBatch) -> Result<Var> {
    match batch {
        CheckBatch::Mlm(b) => model.mlm_loss(g, b, &mut Dropout::off()),
        CheckBatch::Classify(b) => model.classify_loss(g, b, &mut Dropout::off()),
    }
}

fn loss_value(model: &GmapModel, batch: &CheckBatch) -> Result<f64> {
    let mut g = Graph::inference();
    let l = loss_var(model, &mut g, batch)?;
    g.scalar(l)
}

/// Central differences against the analytic gradient for every trainable
/// tensor, without judging the result.
pub fn grad_check_report(model: &GmapModel, batch: &CheckBatch, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut analytic = model.clone();
    let mut g = Graph::new();
    let loss = loss_var(&analytic, &mut g, batch)?;
    analytic.store.clear_grads();
    g.backward(loss, &mut analytic.store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = model.clone();
    let mut report = GradReport::default();
    for (name, p) in analytic.store.iter() {
        if p.frozen {
            continue;
        }
        let grad = p.tensor.grad().expect("backward fills every unfrozen entry");
        let n = p.tensor.numel();
        let picks: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, cfg.samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let mut group = GradGroup {
            name: name.clone(),
            checked: picks.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for i in picks {
            let orig = probe.store.get(name)?.values()[i];
            probe.store.get_mut(name)?.values_mut()[i] = orig + cfg.h;
            let up = loss_value(&probe, batch)?;
            probe.store.get_mut(name)?.values_mut()[i] = orig - cfg.h;
            let down = loss_value(&probe, batch)?;
            probe.store.get_mut(name)?.values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let abs = (numeric - grad[i]).abs();
            let rel = abs / numeric.abs().max(grad[i].abs()).max(cfg.floor);
            group.max_abs_err = group.max_abs_err.max(abs);
            group.max_rel_err = group.max_rel_err.max(rel);
        }
        report.groups.push(group);
    }
    Ok(report)
}

/// As [`grad_check_report`], failing with the worst parameter's name when
/// any group reaches the tolerance.
pub fn grad_check(model: &GmapModel, batch: &CheckBatch, cfg: &GradCheckConfig) -> Result<GradReport> {
    let report = grad_check_report(model, batch, cfg)?;
    report.ensure(cfg.tolerance)?;
    Ok(report)
}
