use rayon::prelude::*;

use crate::data::{streams, Rng};
use crate::error::{Error, Result};
use crate::network::{joint_loss, model_forward, LossWeights, ModelParams, NetConfig};
use crate::tensor::{Corruption, Graph, Tensor, IGNORE_LABEL};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub height: usize,
    pub width: usize,
    /// Elements probed per parameter tensor (the largest-gradient element
    /// is always among them).
    pub samples_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error. Central differences of a
    /// loss near 5 at step 1e-5 carry roundoff of order 1e-10, so gradients
    /// below the floor are compared in absolute terms (`tolerance · floor`).
    pub floor: f64,
    /// Overrides the residual scale so the attention path carries gradient.
    pub gamma: f64,
    pub corruption: Option<Corruption>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            samples_per_tensor: 8,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            gamma: 0.5,
            corruption: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupError> {
        self.groups.iter().filter(|g| !(g.max_rel_err < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

struct Problem {
    image: Tensor,
    labels: Vec<u8>,
    hw: (usize, usize),
}

fn loss_at(params: &ModelParams, cfg: &NetConfig, p: &Problem) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let img = g.constant(p.image.clone());
    let out = model_forward(&mut g, &bound, img, cfg)?;
    let terms = joint_loss(&mut g, &out, &p.labels, p.hw, LossWeights::from(cfg))?;
    Ok(g.value(terms.total).data()[0])
}

/// Compares reverse-mode gradients of the joint loss with central finite
/// differences on a random single-image problem.
pub fn gradcheck(cfg: &NetConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let (h, w) = (opts.height, opts.width);
    let mut rng = Rng::stream(seed, streams::GRADCHECK);
    let mut params = ModelParams::init(cfg, &mut rng)?;
    if let Some(gamma) = params.get_mut("dnl.gamma") {
        gamma.data_mut()[0] = opts.gamma;
    }
    // Non-zero biases and norm offsets so every term is exercised.
    for (name, t) in params.iter_mut() {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
    }
    let image = Tensor::new(
        vec![1, cfg.image_channels, h, w],
        (0..cfg.image_channels * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )?;
    let labels: Vec<u8> = (0..h * w)
        .map(|_| if rng.bernoulli(0.05) { IGNORE_LABEL } else { rng.below(cfg.num_classes as u64) as u8 })
        .collect();
    let problem = Problem { image, labels, hw: (h, w) };

    let mut g = match opts.corruption {
        Some(c) => Graph::with_corruption(c),
        None => Graph::new(),
    };
    let bound = params.bind(&mut g, true);
    let img = g.constant(problem.image.clone());
    let out = model_forward(&mut g, &bound, img, cfg)?;
    let terms = joint_loss(&mut g, &out, &problem.labels, problem.hw, LossWeights::from(cfg))?;
    g.backward(terms.total)?;
    let grads = bound.grads(&g);

    let mut probes = Vec::new();
    for (t, ((name, p), grad)) in params.iter().zip(&grads).enumerate() {
        let n = p.numel();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        order.truncate(opts.samples_per_tensor.min(n));
        let peak = (0..n)
            .max_by(|&a, &b| grad.data()[a].abs().total_cmp(&grad.data()[b].abs()))
            .unwrap_or(0);
        if !order.contains(&peak) {
            order.push(peak);
        }
        probes.extend(order.into_iter().map(|i| (t, name.to_string(), i)));
    }

    let results = probes
        .par_iter()
        .map(|(t, name, i)| {
            let mut shifted = params.clone();
            let x = shifted.get(name).expect("name").data()[*i];
            shifted.get_mut(name).expect("name").data_mut()[*i] = x + opts.step;
            let up = loss_at(&shifted, cfg, &problem)?;
            shifted.get_mut(name).expect("name").data_mut()[*i] = x - opts.step;
            let down = loss_at(&shifted, cfg, &problem)?;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads[*t].data()[*i];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("{name}[{i}]: analytic {analytic}, numeric {numeric}")));
            }
            Ok((*t, err))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups: Vec<GroupError> =
        params.names().map(|n| GroupError { name: n.to_string(), max_rel_err: 0.0, checked: 0 }).collect();
    for (t, err) in results {
        groups[t].max_rel_err = groups[t].max_rel_err.max(err);
        groups[t].checked += 1;
    }
    Ok(GradcheckReport { groups, tolerance: opts.tolerance })
}
