//! Local training on a client: TCB-GD under a fixed threshold, or plain SGD
//! under a fixed mask for the baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::{eval_mask, Mask, Threshold};
use crate::nn::{loss_and_grad, tcb_loss_and_grad, GradVector};
use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub eta: f64,
    pub steps: usize,
    /// `None` (or a size at least the local dataset) means full-batch steps.
    pub batch_size: Option<usize>,
}

/// What a client sends back: `delta = init - x_final` on its initial mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: Vec<f64>,
    pub mask: Mask,
    /// Mean minibatch loss over the local steps.
    pub train_loss: f64,
}

/// Deterministic minibatches: a fresh seeded shuffle at every local epoch.
struct Minibatches<'a> {
    data: &'a Dataset,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> Minibatches<'a> {
    fn new(data: &'a Dataset, batch_size: Option<usize>, seed: u64) -> Self {
        let batch = batch_size.unwrap_or(data.len()).clamp(1, data.len());
        Self {
            data,
            batch,
            order: (0..data.len()).collect(),
            cursor: data.len(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn full_batch(&self) -> bool {
        self.batch == self.data.len()
    }

    fn next_indices(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let s = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        s
    }
}

fn check_inputs(data: &Dataset, cfg: &LocalTraining) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("client has no training samples".into()));
    }
    if !(cfg.eta >= 0.0 && cfg.eta.is_finite()) {
        return Err(Error::invalid(format!(
            "local rate {} must be finite and >= 0",
            cfg.eta
        )));
    }
    if cfg.batch_size == Some(0) {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(())
}

fn sgd_loop<G>(
    init: &ParamVector,
    data: &Dataset,
    cfg: &LocalTraining,
    seed: u64,
    mut grad_at: G,
    on_step: &mut dyn FnMut(usize, &ParamVector),
) -> Result<(ParamVector, f64)>
where
    G: FnMut(&ParamVector, &Dataset) -> Result<(f64, GradVector)>,
{
    let mut batches = Minibatches::new(data, cfg.batch_size, seed);
    let mut x = init.clone();
    let mut loss_sum = 0.0;
    on_step(0, &x);
    for k in 0..cfg.steps {
        let (loss, grad) = if batches.full_batch() {
            grad_at(&x, data)?
        } else {
            let batch = data.subset(batches.next_indices());
            grad_at(&x, &batch)?
        };
        loss_sum += loss;
        let next = x
            .values()
            .iter()
            .zip(grad.values())
            .map(|(v, g)| v - cfg.eta * g)
            .collect::<Vec<_>>();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k + 1 });
        }
        x = x.with_values(next)?;
        on_step(k + 1, &x);
    }
    let mean_loss = if cfg.steps == 0 {
        0.0
    } else {
        loss_sum / cfg.steps as f64
    };
    Ok((x, mean_loss))
}

fn restricted_delta(init: &ParamVector, last: &ParamVector, mask: &Mask) -> Vec<f64> {
    init.values()
        .iter()
        .zip(last.values())
        .zip(mask.bits())
        .map(|((a, b), &keep)| if keep { a - b } else { 0.0 })
        .collect()
}

/// FIARSE local update: `K` steps of threshold-controlled biased gradient
/// descent with the threshold frozen for the whole round.
pub fn local_train_fiarse(
    client_id: usize,
    init: &ParamVector,
    th: &Threshold,
    data: &Dataset,
    cfg: &LocalTraining,
    seed: u64,
) -> Result<ClientUpdate> {
    local_train_fiarse_observed(client_id, init, th, data, cfg, seed, &mut |_, _| {})
}

/// As [`local_train_fiarse`], calling `on_step(k, x_k)` for `k = 0..=K`.
pub fn local_train_fiarse_observed(
    client_id: usize,
    init: &ParamVector,
    th: &Threshold,
    data: &Dataset,
    cfg: &LocalTraining,
    seed: u64,
    on_step: &mut dyn FnMut(usize, &ParamVector),
) -> Result<ClientUpdate> {
    check_inputs(data, cfg)?;
    let mask = eval_mask(init, th)?;
    if let Some(j) = init
        .values()
        .iter()
        .zip(mask.bits())
        .position(|(v, &keep)| !keep && *v != 0.0)
    {
        return Err(Error::invalid(format!(
            "initial parameters are not masked: index {j} is below threshold but nonzero"
        )));
    }
    let (last, train_loss) = sgd_loop(
        init,
        data,
        cfg,
        seed,
        |x, batch| tcb_loss_and_grad(x, th, batch).map(|(l, g, _)| (l, g)),
        on_step,
    )?;
    Ok(ClientUpdate {
        client_id,
        delta: restricted_delta(init, &last, &mask),
        mask,
        train_loss,
    })
}

/// Plain SGD on `init ⊙ m` with the mask held constant.
pub fn local_train_fixed_mask(
    client_id: usize,
    init: &ParamVector,
    m: &Mask,
    data: &Dataset,
    cfg: &LocalTraining,
    seed: u64,
) -> Result<ClientUpdate> {
    check_inputs(data, cfg)?;
    let start = m.apply_params(init)?;
    let (last, train_loss) = sgd_loop(
        &start,
        data,
        cfg,
        seed,
        |x, batch| loss_and_grad(x, m, batch),
        &mut |_, _| {},
    )?;
    Ok(ClientUpdate {
        client_id,
        delta: restricted_delta(&start, &last, m),
        mask: m.clone(),
        train_loss,
    })
}
