use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{Backbone, DenoiseBatch, ParamGroup, ParameterGroups};
use crate::diffusion::NoiseSchedule;
use crate::error::{ensure, Error, Result};
use crate::glyphdata::Setting;
use crate::nn;

/// Per-tensor L2 norms of the gradient of a loss split into `micro` parts;
/// the parts' gradients are summed before taking norms, so `loss_of` must
/// return each part already weighted by its share of the full batch.
pub fn accumulated_grad_norms<F>(
    vars: &[(String, Var)],
    micro: usize,
    mut loss_of: F,
) -> Result<BTreeMap<String, f64>>
where
    F: FnMut(usize) -> Result<Tensor>,
{
    let mut acc: Vec<Option<Tensor>> = vec![None; vars.len()];
    for m in 0..micro {
        let loss = loss_of(m)?;
        nn::finite_scalar(&loss, "sensitivity loss")?;
        let grads = loss.backward()?;
        for (slot, (_, var)) in acc.iter_mut().zip(vars) {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.to_dtype(DType::F64)?;
                *slot = Some(match slot.take() {
                    Some(a) => (a + g)?,
                    None => g,
                });
            }
        }
    }
    let mut out = BTreeMap::new();
    for (slot, (name, _)) in acc.into_iter().zip(vars) {
        let norm = match slot {
            Some(g) => g.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt(),
            None => 0.0,
        };
        out.insert(name.clone(), norm);
    }
    Ok(out)
}

/// Baseline norms at or below this fraction of the largest baseline norm are
/// treated as zero: parameters whose true gradient vanishes (a conv bias
/// feeding a norm layer) only carry rounding noise.
pub const NEGLIGIBLE_NORM: f64 = 1e-10;

/// Mean over each group of the per-tensor ratio `setting / base`.
/// Tensors whose baseline norm is negligible have no defined ratio and are skipped.
pub fn group_ratios(
    base: &BTreeMap<String, f64>,
    setting: &BTreeMap<String, f64>,
    groups: &ParameterGroups,
) -> Result<BTreeMap<ParamGroup, f64>> {
    let floor = base.values().fold(0.0f64, |m, &v| m.max(v)) * NEGLIGIBLE_NORM;
    let mut sums: BTreeMap<ParamGroup, (f64, usize)> = BTreeMap::new();
    for (name, &g0) in base {
        let group = groups
            .group_of(name)
            .ok_or_else(|| Error::Internal(format!("parameter {name} has no group")))?;
        let g1 = *setting
            .get(name)
            .ok_or_else(|| Error::Internal(format!("parameter {name} missing from setting norms")))?;
        if g0 > floor {
            let e = sums.entry(group).or_default();
            e.0 += g1 / g0;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub batch_size: usize,
    pub micro_batches: usize,
    /// Per-group mean ratio against the SCSF baseline.
    pub ratios: BTreeMap<Setting, BTreeMap<ParamGroup, f64>>,
    /// Raw per-tensor gradient norms per setting.
    pub norms: BTreeMap<Setting, BTreeMap<String, f64>>,
}

impl SensitivityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Gradient magnitudes of the z0 loss for each setting's batch, relative to
/// the SCSF batch. Batches should share timesteps and noise so only the
/// character/style composition differs.
pub fn sensitivity_analysis(
    model: &Backbone,
    sched: &NoiseSchedule,
    batches: &BTreeMap<Setting, DenoiseBatch>,
    micro_batches: usize,
) -> Result<SensitivityReport> {
    ensure!(micro_batches >= 1, Config, "micro_batches must be >= 1");
    let base_batch = batches
        .get(&Setting::SCSF)
        .ok_or_else(|| Error::validation("sensitivity analysis needs an SCSF batch"))?;
    let batch_size = base_batch.len();
    let vars = model.store().named_vars();
    let mut norms = BTreeMap::new();
    for (&setting, batch) in batches {
        ensure!(!batch.is_empty(), Validation, "{setting} batch is empty");
        ensure!(
            batch.len() == batch_size,
            Validation,
            "{setting} batch has {} samples, SCSF has {batch_size}",
            batch.len()
        );
        let parts = micro_batches.min(batch.len());
        let bounds: Vec<usize> = (0..=parts).map(|i| i * batch.len() / parts).collect();
        let n = norms.entry(setting).or_insert_with(BTreeMap::new);
        *n = accumulated_grad_norms(&vars, parts, |m| {
            let part = batch.slice(bounds[m]..bounds[m + 1])?;
            let w = part.len() as f64 / batch.len() as f64;
            Ok((model.loss(&part, sched)? * w)?)
        })?;
    }
    let base = &norms[&Setting::SCSF];
    let ratios = norms
        .iter()
        .map(|(&s, n)| group_ratios(base, n, model.groups()).map(|r| (s, r)))
        .collect::<Result<_>>()?;
    Ok(SensitivityReport {
        batch_size,
        micro_batches,
        ratios,
        norms,
    })
}
