//! Synthetic stripe classification and a momentum-SGD loop, used as an
//! end-to-end optimisability check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, Graph, Rng, Tensor};

use super::backbone::AxWin;
use super::params::ParamStore;

/// Class 0 has horizontal stripes, class 1 vertical ones.
#[derive(Clone, Debug, PartialEq)]
pub struct StripeDataset<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripeSpec {
    pub samples: usize,
    pub size: usize,
    /// Stripe period in pixels (half on, half off).
    pub period: usize,
    pub noise: f64,
}

impl Default for StripeSpec {
    fn default() -> Self {
        StripeSpec { samples: 64, size: 64, period: 8, noise: 0.1 }
    }
}

impl<T: Element> StripeDataset<T> {
    /// Balanced classes, random stripe phase per image, additive Gaussian
    /// noise. Pixel values are `±1` before noise.
    pub fn generate(spec: StripeSpec, seed: u64) -> Self {
        let mut rng = Rng::fork(seed, "stripes");
        let mut images = Vec::with_capacity(spec.samples);
        let mut labels = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let label = i % 2;
            let phase = rng.below(spec.period);
            let img = Tensor::from_fn([1, spec.size, spec.size, 3], |[_, y, x, _]| {
                let t = if label == 0 { y } else { x };
                let on = ((t + phase) % spec.period) < spec.period / 2;
                T::from_f64(if on { 1.0 } else { -1.0 } + spec.noise * rng.normal())
            });
            images.push(img);
            labels.push(label);
        }
        StripeDataset { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let imgs: Vec<Tensor<T>> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let x = Tensor::stack(&imgs)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.01, momentum: 0.9 }
    }
}

/// `v ← μ·v + g; p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>) -> Self {
        Sgd { config, velocity: params.values().iter().map(|v| Tensor::zeros(v.shape())).collect() }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        let lr = T::from_f64(self.config.lr);
        let mu = T::from_f64(self.config.momentum);
        for ((p, v), g) in params.values_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub data: StripeSpec,
    /// Stop once the full-dataset loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 500,
            batch: 8,
            seed: 0,
            sgd: SgdConfig::default(),
            data: StripeSpec::default(),
            target_loss: Some(0.1),
        }
    }
}

/// Full-dataset loss measured after `step` updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mini-batch loss of every step, before its update.
    pub step_losses: Vec<f64>,
    /// Full-dataset loss at step 0, after every epoch and at the end.
    pub evals: Vec<EvalPoint>,
    pub steps: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Mean cross-entropy and accuracy over the whole dataset, in mini-batches.
pub fn evaluate<T: Element>(
    model: &AxWin,
    params: &ParamStore<T>,
    data: &StripeDataset<T>,
    batch: usize,
) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let out = model.forward(params, &x)?;
        let (loss, probs) = ops::cross_entropy(&out.logits, &labels)?;
        total += loss.as_f64() * chunk.len() as f64;
        let k = probs.shape().c();
        for (row, &l) in probs.data().chunks(k).zip(&labels) {
            let best = (0..k).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap_or(0);
            correct += (best == l) as usize;
        }
    }
    let n = data.len() as f64;
    Ok((total / n, correct as f64 / n))
}

/// Trains `params` in place. Batches are drawn from a per-epoch shuffle.
pub fn train<T: Element>(
    model: &AxWin,
    params: &mut ParamStore<T>,
    data: &StripeDataset<T>,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EvalPoint),
) -> Result<TrainReport> {
    let mut opt = Sgd::new(cfg.sgd, params);
    let mut rng = Rng::fork(cfg.seed, "batches");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = data.len().div_ceil(cfg.batch.max(1));
    let mut step_losses = Vec::with_capacity(cfg.max_steps);
    let mut evals = Vec::new();
    let mut record = |step: usize, params: &ParamStore<T>, evals: &mut Vec<EvalPoint>| -> Result<f64> {
        let (loss, accuracy) = evaluate(model, params, data, cfg.batch)?;
        let point = EvalPoint { step, loss, accuracy };
        on_eval(&point);
        evals.push(point);
        Ok(loss)
    };
    let reached = |loss: f64| cfg.target_loss.is_some_and(|t| loss < t);
    let mut last = record(0, params, &mut evals)?;
    let mut step = 0;
    while step < cfg.max_steps && !reached(last) {
        if step % per_epoch == 0 {
            rng.shuffle(&mut order);
        }
        let k = step % per_epoch;
        let chunk = &order[k * cfg.batch..((k + 1) * cfg.batch).min(data.len())];
        let (x, labels) = data.batch(chunk)?;
        let mut g = Graph::new();
        let xv = g.input(x);
        let pv = params.bind(&mut g);
        let f = model.record(&mut g, &pv, xv)?;
        let loss = g.cross_entropy(f.logits, &labels)?;
        let lv = g.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        step_losses.push(lv);
        let mut grads = g.backward(loss)?;
        let gs: Vec<Tensor<T>> = pv
            .iter()
            .zip(params.values())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        opt.step(params, &gs);
        step += 1;
        if step % per_epoch == 0 || step == cfg.max_steps {
            last = record(step, params, &mut evals)?;
        }
    }
    let end = *evals.last().expect("initial evaluation");
    Ok(TrainReport { step_losses, evals, steps: step, final_loss: end.loss, final_accuracy: end.accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stripes_are_balanced_and_oriented() {
        let d = StripeDataset::<f64>::generate(StripeSpec { noise: 0.0, ..Default::default() }, 1);
        assert_eq!(d.len(), 64);
        assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), 32);
        let h = &d.images[0];
        assert!((0..64).all(|x| h.at(0, 5, x, 0) == h.at(0, 5, 0, 0)));
        let v = &d.images[1];
        assert!((0..64).all(|y| v.at(0, y, 5, 1) == v.at(0, 0, 5, 1)));
    }

    #[test]
    fn sgd_momentum_update() {
        let mut l = super::super::params::ParamLayout::new();
        l.add("w", [1, 1, 1, 1], super::super::params::Init::Ones);
        let mut p = l.init::<f64>(0);
        let mut opt = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.5 }, &p);
        let g = vec![Tensor::scalar(1.0)];
        opt.step(&mut p, &g);
        assert!((p.values()[0].item() - 0.9).abs() < 1e-12);
        opt.step(&mut p, &g);
        assert!((p.values()[0].item() - 0.75).abs() < 1e-12);
    }
}
