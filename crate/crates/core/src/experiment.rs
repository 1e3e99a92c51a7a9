//! Round loop: sample, extract, train locally, aggregate, step, measure.

use std::fs::File;
use std::sync::Arc;

use log::{debug, info};

use crate::baselines::{fedrolex_mask, heterofl_mask, RollState};
use crate::client::{local_train_fiarse, local_train_fixed_mask, ClientUpdate, LocalTraining};
use crate::config::{ExperimentConfig, Method};
use crate::data::{dirichlet_partition, gen_synthetic, global_test, ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::exec::{map_ordered, Schedule};
use crate::masking::{CapacityProfile, Mask, MaskScope, Threshold};
use crate::metrics::{report_round, MaskHistory, RoundReport};
use crate::nn::evaluate;
use crate::params::{init_params, LayerLayout, ParamVector};
use crate::report::MetricRow;
use crate::seed::{derive_seed, Stream};
use crate::server::{
    aggregate_indexwise, aggregate_nested, extract_submodel, global_step, sample_clients,
};

/// What the server hands to every client of one capacity tier this round.
#[derive(Clone, Debug)]
pub struct TierPlan {
    pub gamma: f64,
    pub params: ParamVector,
    pub mask: Mask,
    /// Present for magnitude-based methods.
    pub threshold: Option<Threshold>,
}

/// Everything that happened in one round, handed to observers.
pub struct RoundRecord<'a> {
    pub round: usize,
    pub participants: &'a [usize],
    pub plans: &'a [TierPlan],
    pub updates: &'a [ClientUpdate],
    pub before: &'a ParamVector,
    pub after: &'a ParamVector,
    pub exploration_rate: f64,
    pub churn: &'a [Option<f64>],
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricRow>,
    /// `(round, report)` for every evaluated round.
    pub reports: Vec<(usize, RoundReport)>,
    pub final_params: ParamVector,
    /// Global-test accuracy of submodels extracted from the final model at
    /// the training tiers and every extra sweep capacity.
    pub sweep: Vec<(f64, f64)>,
}

pub struct Experiment {
    cfg: ExperimentConfig,
    layout: Arc<LayerLayout>,
    clients: Vec<ClientDataset>,
    global_test: Dataset,
    profile: CapacityProfile,
    tiers: Vec<f64>,
    client_tier: Vec<usize>,
    schedule: Schedule,
}

impl Experiment {
    /// Builds the data, partition and model layout for `cfg`.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let data = match &cfg.data.csv {
            Some(path) => {
                let d = Dataset::from_csv(File::open(path)?, cfg.data.classes)?;
                if d.dim() != cfg.data.dim {
                    return Err(Error::config(
                        "data.dim",
                        format!("csv has {} features but dim is {}", d.dim(), cfg.data.dim),
                    ));
                }
                d
            }
            None => gen_synthetic(
                cfg.data.classes,
                cfg.data.dim,
                cfg.data.samples,
                derive_seed(cfg.seed, Stream::Data, 0, 0),
                cfg.data.spread,
            )?,
        };
        Self::with_dataset(cfg, &data)
    }

    /// As [`Experiment::new`] but with samples supplied by the caller.
    pub fn with_dataset(cfg: ExperimentConfig, data: &Dataset) -> Result<Self> {
        let layout = Arc::new(LayerLayout::mlp(&cfg.widths(), true)?);
        let clients = dirichlet_partition(
            data,
            cfg.clients,
            cfg.data.alpha,
            derive_seed(cfg.seed, Stream::Partition, 0, 0),
        )?;
        let global_test = global_test(&clients)?;
        let profile = CapacityProfile::new(
            cfg.client_gammas(),
            MaskScope::new(cfg.granularity(), cfg.mask_biases),
        )?;
        // surface shard/unit problems before the first round
        profile.scope().units(&layout)?;
        let tiers = profile.tiers();
        let client_tier = profile
            .gammas()
            .iter()
            .map(|g| tiers.iter().position(|t| t == g).expect("tier exists"))
            .collect();
        Ok(Self {
            cfg,
            layout,
            clients,
            global_test,
            profile,
            tiers,
            client_tier,
            schedule: Schedule::default(),
        })
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn global_test(&self) -> &Dataset {
        &self.global_test
    }

    pub fn tiers(&self) -> &[f64] {
        &self.tiers
    }

    pub fn client_tier(&self) -> &[usize] {
        &self.client_tier
    }

    pub fn initial_params(&self) -> ParamVector {
        init_params(
            self.layout.clone(),
            derive_seed(self.cfg.seed, Stream::Init, 0, 0),
        )
    }

    fn local_steps(&self, client: usize) -> usize {
        match (self.cfg.local_steps, self.cfg.local_epochs) {
            (Some(k), _) => k,
            (None, Some(epochs)) => {
                let n = self.clients[client].train.len();
                let batch = self.cfg.batch_size.unwrap_or(n).clamp(1, n.max(1));
                epochs * n.div_ceil(batch)
            }
            (None, None) => 1,
        }
    }

    /// Mask used to evaluate the tier-`gamma` submodel of `x`.
    pub fn eval_mask(&self, x: &ParamVector, gamma: f64) -> Result<Mask> {
        match self.cfg.method {
            Method::Fiarse | Method::PruningGreedy => {
                Ok(extract_submodel(x, gamma, self.profile.scope())?.mask)
            }
            Method::Heterofl | Method::Fedrolex => {
                heterofl_mask(&self.layout, gamma, self.cfg.mask_biases)
            }
        }
    }

    fn plan_tiers(&self, x: &ParamVector, rolls: &mut [RollState]) -> Result<Vec<TierPlan>> {
        let mut plans = Vec::with_capacity(self.tiers.len());
        for (r, &gamma) in self.tiers.iter().enumerate() {
            let plan = match self.cfg.method {
                Method::Fiarse | Method::PruningGreedy => {
                    let sub = extract_submodel(x, gamma, self.profile.scope())?;
                    TierPlan {
                        gamma,
                        params: sub.params,
                        mask: sub.mask,
                        threshold: Some(sub.threshold),
                    }
                }
                Method::Heterofl => {
                    let mask = heterofl_mask(&self.layout, gamma, self.cfg.mask_biases)?;
                    TierPlan {
                        gamma,
                        params: mask.apply_params(x)?,
                        mask,
                        threshold: None,
                    }
                }
                Method::Fedrolex => {
                    let (mask, next) =
                        fedrolex_mask(&self.layout, gamma, &rolls[r], self.cfg.mask_biases)?;
                    rolls[r] = next;
                    TierPlan {
                        gamma,
                        params: mask.apply_params(x)?,
                        mask,
                        threshold: None,
                    }
                }
            };
            plans.push(plan);
        }
        Ok(plans)
    }

    fn train_client(&self, round: usize, client: usize, plan: &TierPlan) -> Result<ClientUpdate> {
        let cfg = LocalTraining {
            eta: self.cfg.eta_local,
            steps: self.local_steps(client),
            batch_size: self.cfg.batch_size,
        };
        let data = &self.clients[client].train;
        let seed = derive_seed(self.cfg.seed, Stream::LocalTraining, round, client);
        let update = match (&self.cfg.method, &plan.threshold) {
            (Method::Fiarse, Some(th)) => {
                local_train_fiarse(client, &plan.params, th, data, &cfg, seed)
            }
            _ => local_train_fixed_mask(client, &plan.params, &plan.mask, data, &cfg, seed),
        }
        .map_err(|e| match e {
            Error::Diverged { step } => Error::NonFinite {
                round,
                client: Some(client),
                what: format!("parameters after local step {step}"),
            },
            other => other,
        })?;
        if update.delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite {
                round,
                client: Some(client),
                what: "local update".into(),
            });
        }
        Ok(update)
    }

    pub fn run(&self) -> Result<RunOutput> {
        self.run_for(self.cfg.rounds)
    }

    pub fn run_for(&self, rounds: usize) -> Result<RunOutput> {
        self.run_observed(rounds, &mut |_| {})
    }

    /// Runs `rounds` rounds from the seeded initial model, calling
    /// `observer` after every global step.
    pub fn run_observed(
        &self,
        rounds: usize,
        observer: &mut dyn FnMut(&RoundRecord<'_>),
    ) -> Result<RunOutput> {
        let cfg = &self.cfg;
        let mut x = self.initial_params();
        let mut rolls = vec![RollState::new(&self.layout); self.tiers.len()];
        let mut history = MaskHistory::new(self.layout.d(), self.tiers.len());
        let mut rows = Vec::new();
        let mut reports = Vec::new();

        for t in 0..rounds {
            let participants = sample_clients(
                cfg.clients,
                cfg.participants,
                derive_seed(cfg.seed, Stream::Sampling, t, 0),
            )?;
            let plans = self.plan_tiers(&x, &mut rolls)?;

            let results = map_ordered(self.schedule, &participants, |&c| {
                self.train_client(t, c, &plans[self.client_tier[c]])
            });
            let updates = results.into_iter().collect::<Result<Vec<_>>>()?;

            let agg = match cfg.method {
                Method::Fedrolex => aggregate_indexwise(&updates)?,
                _ => aggregate_nested(&updates)?,
            };
            let next = global_step(&x, &agg, cfg.eta_global).map_err(|_| Error::NonFinite {
                round: t,
                client: None,
                what: "global model after aggregation".into(),
            })?;

            history.record_round(updates.iter().map(|u| &u.mask));
            let tier_masks: Vec<Mask> = plans.iter().map(|p| p.mask.clone()).collect();
            let churn = history.record_tier_masks(&tier_masks)?;
            let exploration = history.exploration_rate();

            observer(&RoundRecord {
                round: t,
                participants: &participants,
                plans: &plans,
                updates: &updates,
                before: &x,
                after: &next,
                exploration_rate: exploration,
                churn: &churn,
            });
            x = next;

            let done = t + 1;
            if done % cfg.eval_every == 0 || done == rounds {
                let report = self.evaluate_tiers(&x)?;
                for (r, tier) in report.tiers.iter().enumerate() {
                    let losses: Vec<f64> = updates
                        .iter()
                        .filter(|u| self.client_tier[u.client_id] == r)
                        .map(|u| u.train_loss)
                        .collect();
                    rows.push(MetricRow {
                        round: done,
                        method: cfg.method.name().to_string(),
                        tier: tier.gamma,
                        local_acc: tier.local_acc,
                        global_acc: tier.global_acc,
                        exploration_rate: exploration,
                        mask_churn: churn[r],
                        train_loss: (!losses.is_empty())
                            .then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                    });
                }
                debug!(
                    "round {done}: global mean {:.4}, exploration {:.4}",
                    report.global_mean, exploration
                );
                reports.push((done, report));
            }
        }

        let mut gammas = self.tiers.clone();
        gammas.extend(&cfg.sweep);
        gammas.sort_by(f64::total_cmp);
        gammas.dedup();
        let sweep = map_ordered(self.schedule, &gammas, |&g| -> Result<(f64, f64)> {
            Ok((g, evaluate(&x, &self.eval_mask(&x, g)?, &self.global_test)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        info!("finished {rounds} rounds of {}", cfg.method.name());

        Ok(RunOutput {
            rows,
            reports,
            final_params: x,
            sweep,
        })
    }

    /// Per-tier local and global accuracy of the submodels of `x`.
    pub fn evaluate_tiers(&self, x: &ParamVector) -> Result<RoundReport> {
        let masks = map_ordered(self.schedule, &self.tiers, |&g| {
            self.eval_mask(x, g).map(|m| (g, m))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        report_round(
            x,
            &masks,
            &self.clients,
            &self.client_tier,
            &self.global_test,
        )
    }
}
