//! Central finite differences, used as the independent gradient oracle.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel};
use crate::params::ParamId;
use crate::tensor::{Float, Tensor};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad<T: Float>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, step: T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (step + step);
    }
    out
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// vanishing gradients from turning round-off into large ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Largest relative error across paired slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Denominator floor used by [`check_pipeline`].
pub const PIPELINE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
}

impl PipelineReport {
    /// `(family, samples, max relative error)` per parameter family.
    pub fn by_family(&self) -> Vec<(String, usize, f64)> {
        let mut out: Vec<(String, usize, f64)> = Vec::new();
        for s in &self.samples {
            let fam = family(&s.param).to_string();
            match out.iter_mut().find(|(f, _, _)| *f == fam) {
                Some(entry) => {
                    entry.1 += 1;
                    entry.2 = entry.2.max(s.rel_error);
                }
                None => out.push((fam, 1, s.rel_error)),
            }
        }
        out
    }
}

/// Family of a trainable parameter name: `static`, `experts`, `router`,
/// `mapper`, `head` or `comp_prompt`.
pub fn family(name: &str) -> &str {
    if name.starts_with("head.") {
        "head"
    } else if name.starts_with("comp_prompt.") {
        "comp_prompt"
    } else if name.contains(".mapper") {
        "mapper"
    } else if name.contains(".router.") {
        "router"
    } else if name.ends_with(".experts") {
        "experts"
    } else if name.ends_with(".static") {
        "static"
    } else {
        "other"
    }
}

/// Compares backpropagated gradients of the full training loss with
/// central differences on `samples` randomly chosen trainable scalars,
/// spread evenly over parameter families. Routing noise is switched off.
pub fn check_pipeline(
    config: &FusionConfig,
    batch: &[Instance],
    samples: usize,
    step: f64,
    lambda_imp: f64,
    gamma: f64,
    seed: u64,
) -> Result<PipelineReport> {
    let mut config = config.clone();
    config.prompt.noise_std = 0.0;
    let mut model = FusionModel::<f64>::new(&config)?;
    let refs: Vec<&Instance> = batch.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Move away from the symmetric initial point.
    for id in model.store().trainable_ids() {
        let p = model.store_mut().get_mut(id);
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }

    let loss_at = |m: &FusionModel<f64>| -> Result<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut pass = m.forward(&refs, true, &mut r)?;
        let (_, breakdown, _) = m.loss(&mut pass, &refs, lambda_imp, gamma)?;
        Ok(breakdown.total)
    };

    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut pass = model.forward(&refs, true, &mut r)?;
    let (total, _, _) = model.loss(&mut pass, &refs, lambda_imp, gamma)?;
    pass.graph.backward(total)?;
    model.store_mut().zero_grad();
    pass.graph.write_param_grads(model.store_mut())?;

    let mut families: Vec<(String, Vec<ParamId>)> = Vec::new();
    for id in model.store().trainable_ids() {
        let fam = family(&model.store().get(id).name).to_string();
        match families.iter_mut().find(|(f, _)| *f == fam) {
            Some((_, ids)) => ids.push(id),
            None => families.push((fam, vec![id])),
        }
    }
    if families.is_empty() {
        return Err(Error::Contract("model has no trainable parameters".into()));
    }
    let mut picks = Vec::with_capacity(samples);
    for i in 0..samples {
        let (_, ids) = &families[i % families.len()];
        let id = *ids.choose(&mut rng).expect("family is non-empty");
        let index = rng.gen_range(0..model.store().get(id).value.numel());
        picks.push((id, index));
    }

    let mut out = Vec::with_capacity(samples);
    for (id, index) in picks {
        let analytic = model.store().get(id).grad.as_ref().map_or(0.0, |g| g.data()[index]);
        let orig = model.store().get(id).value.data()[index];
        model.store_mut().get_mut(id).value.data_mut()[index] = orig + step;
        let up = loss_at(&model)?;
        model.store_mut().get_mut(id).value.data_mut()[index] = orig - step;
        let down = loss_at(&model)?;
        model.store_mut().get_mut(id).value.data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * step);
        out.push(GradSample {
            param: model.store().get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, PIPELINE_FLOOR),
        });
    }
    let max_rel_error = out.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(PipelineReport {
        samples: out,
        max_rel_error,
    })
}
