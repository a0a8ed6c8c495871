use serde::Serialize;

use super::config::TrainConfig;
use super::trainer::{evaluate, train};
use crate::data::{Conversation, Dataset, Split};
use crate::error::Result;
use crate::exec::Exec;
use crate::model::{Ablations, Variant};

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub name: String,
    pub variant: String,
    pub ablations: String,
    pub num_layers: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub validation_weighted_f1: f64,
    /// Scores on the test split (the validation split when there is no test split).
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub chance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTable {
    pub rows: Vec<RunRow>,
}

impl RunTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,variant,ablations,num_layers,alpha,beta,mu,seed,config_hash,epochs,validation_weighted_f1,weighted_f1,accuracy,chance\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},\"{}\",{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.name,
                r.variant,
                r.ablations,
                r.num_layers,
                r.alpha,
                r.beta,
                r.mu,
                r.seed,
                r.config_hash,
                r.epochs,
                r.validation_weighted_f1,
                r.weighted_f1,
                r.accuracy,
                r.chance
            ));
        }
        out
    }
}

/// The eight harness configurations: the full model, one removal per
/// component, and every attention variant at its reference layer count.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = vec![("full".to_string(), base.clone())];
    for (name, ablations) in [
        ("-icn", Ablations { icn: true, ..Ablations::NONE }),
        ("-ban", Ablations { ban: true, ..Ablations::NONE }),
        ("-can", Ablations { can: true, ..Ablations::NONE }),
    ] {
        let mut c = base.clone();
        c.model.ablations = ablations;
        out.push((name.to_string(), c));
    }
    for v in Variant::ALL {
        let mut c = base.clone();
        c.model.variant = v;
        c.model.num_layers = v.table_layers(base.layer_profile);
        c.model.ablations = Ablations::NONE;
        out.push((format!("variant:{v}"), c));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn held_out(dataset: &Dataset) -> Vec<Conversation> {
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        dataset.split(Split::Validation)
    } else {
        test
    }
}

/// Train and evaluate one named configuration.
pub fn run_one(dataset: &Dataset, name: &str, cfg: &TrainConfig) -> Result<RunRow> {
    let outcome = train(dataset, cfg)?;
    let report = evaluate(&held_out(dataset), &outcome.params, cfg)?;
    Ok(RunRow {
        name: name.to_string(),
        variant: cfg.model.variant.to_string(),
        ablations: cfg.model.ablations.to_string(),
        num_layers: cfg.model.num_layers,
        alpha: cfg.alpha,
        beta: cfg.beta,
        mu: cfg.model.mu,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epochs: outcome.report.epochs,
        best_epoch: outcome.report.best_epoch,
        validation_weighted_f1: outcome.report.weighted_f1,
        weighted_f1: report.weighted_f1,
        accuracy: report.accuracy,
        chance: 1.0 / cfg.model.num_classes as f64,
    })
}

/// Run named configurations, independently and possibly concurrently.
/// Rows come back sorted by name.
pub fn run_all(dataset: &Dataset, configs: &[(String, TrainConfig)], exec: Exec) -> Result<RunTable> {
    let rows = exec.map(configs, |(name, cfg)| run_one(dataset, name, cfg));
    let mut rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(RunTable { rows })
}

pub fn ablation_run(dataset: &Dataset, base: &TrainConfig, exec: Exec) -> Result<RunTable> {
    run_all(dataset, &ablation_configs(base), exec)
}

/// Every combination of the given connection/head loss weights.
pub fn sweep_configs(base: &TrainConfig, alphas: &[f64], betas: &[f64], mus: &[f64]) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            for &mu in mus {
                let mut c = base.clone();
                c.alpha = alpha;
                c.beta = beta;
                c.model.mu = mu;
                out.push((format!("alpha={alpha},beta={beta},mu={mu}"), c));
            }
        }
    }
    out
}

pub fn sweep(dataset: &Dataset, base: &TrainConfig, alphas: &[f64], betas: &[f64], mus: &[f64], exec: Exec) -> Result<RunTable> {
    run_all(dataset, &sweep_configs(base, alphas, betas, mus), exec)
}
