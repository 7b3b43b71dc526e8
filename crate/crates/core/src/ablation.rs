//! Trains and evaluates several framework variants on one shared data split.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, kfold_split, train_test_split, FoldSplit, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::prompting::{SegmentOptions, Variant};
use crate::report::{ablation_table, RunSummary};
use crate::training::{train, Progress, TrainConfig, TrainHistory};
use crate::volume_io::CaseArchive;

/// How cases are divided between training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Seeded hold-out split with this training fraction.
    Split(f64),
    /// Seeded k-fold cross-validation.
    Cv(usize),
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::Split(0.8)
    }
}

/// A split plus the folds to evaluate. A hold-out split is stored as the two
/// folds `[test, train]` and evaluates fold 0 only.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub split: FoldSplit,
    pub eval_folds: Vec<usize>,
}

impl Protocol {
    pub fn plan(self, case_ids: &[String], seed: u64) -> Result<Plan> {
        match self {
            Protocol::Split(frac) => {
                let (train, test) = train_test_split(case_ids, frac, seed)?;
                if test.is_empty() {
                    return Err(Error::input("hold-out split leaves no test cases"));
                }
                Ok(Plan {
                    split: FoldSplit { folds: vec![test, train] },
                    eval_folds: vec![0],
                })
            }
            Protocol::Cv(k) => {
                if k < 2 {
                    return Err(Error::input("cross-validation needs at least 2 folds"));
                }
                let split = kfold_split(case_ids, k, seed)?;
                Ok(Plan {
                    eval_folds: (0..k).collect(),
                    split,
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    /// One report per evaluated fold.
    pub reports: Vec<MetricsReport>,
    pub histories: Vec<TrainHistory>,
}

impl VariantResult {
    /// All folds pooled into a single report.
    pub fn pooled(&self) -> MetricsReport {
        let (label, seed) = match self.reports.first() {
            Some(r) => (r.variant.clone(), r.seed),
            None => (self.variant.name().to_string(), 0),
        };
        let mut out = MetricsReport::new(label, 0, seed);
        for r in &self.reports {
            out.cases.extend(r.cases.iter().cloned());
            out.failed.extend(r.failed.iter().cloned());
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblationResult {
    pub split_hash: String,
    pub runs: Vec<VariantResult>,
    /// Set when a variant failed; earlier variants are kept.
    pub failure: Option<(Variant, String)>,
}

impl AblationResult {
    pub fn summaries(&self) -> Vec<RunSummary> {
        self.runs.iter().map(|r| RunSummary::from_report(&r.pooled())).collect()
    }

    pub fn table(&self) -> String {
        ablation_table(&self.summaries())
    }

    /// Long-format CSV over every variant and fold.
    pub fn to_csv(&self) -> String {
        let mut s = crate::evaluation::REPORT_COLUMNS.join(",");
        s.push('\n');
        for run in &self.runs {
            for r in &run.reports {
                s.push_str(&r.csv_rows());
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub segment: SegmentOptions,
    pub protocol: Protocol,
    pub variants: Vec<Variant>,
}

/// Trains one variant on `train_cases` from the seed in `cfg`.
pub fn train_variant(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    variant: Variant,
    train_cases: &[CaseArchive],
    progress: impl FnMut(Progress),
) -> Result<(Model, AttentionParams, TrainHistory)> {
    let mut model = Model::build(model_cfg.clone(), cfg.seed)?;
    let mut attention = AttentionParams::zeros(model_cfg.prompt_embed_dim);
    let history = train(&mut model, &mut attention, train_cases, &[], cfg, variant, progress)?;
    Ok((model, attention, history))
}

fn select(cases: &[(String, CaseArchive)], ids: &[String]) -> Vec<(String, CaseArchive)> {
    ids.iter()
        .filter_map(|id| cases.iter().find(|(c, _)| c == id).cloned())
        .collect()
}

/// Every variant sees the same split, model initialization and training
/// seed. A failing variant stops the run; results so far are returned.
pub fn ablation_run(
    cases: &[(String, CaseArchive)],
    cfg: &AblationConfig,
    mut progress: impl FnMut(Variant, usize, Progress),
) -> Result<AblationResult> {
    if cfg.variants.is_empty() {
        return Err(Error::input("no variants to compare"));
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.segment.validate()?;
    let ids: Vec<String> = cases.iter().map(|(id, _)| id.clone()).collect();
    let plan = cfg.protocol.plan(&ids, cfg.train.seed)?;
    let mut result = AblationResult {
        split_hash: plan.split.hash(),
        ..Default::default()
    };
    for &variant in &cfg.variants {
        let mut run = VariantResult {
            variant,
            reports: Vec::new(),
            histories: Vec::new(),
        };
        let outcome = (|| -> Result<()> {
            for &fold in &plan.eval_folds {
                let (train_ids, test_ids) = plan.split.train_test(fold);
                let train_cases: Vec<CaseArchive> = select(cases, &train_ids).into_iter().map(|(_, c)| c).collect();
                let (model, attention, history) =
                    train_variant(&cfg.model, &cfg.train, variant, &train_cases, |p| progress(variant, fold, p))?;
                let opts = SegmentOptions { variant, ..cfg.segment };
                let report = evaluate_dataset(&model, &attention, &select(cases, &test_ids), &opts, fold, cfg.train.seed)?;
                run.histories.push(history);
                run.reports.push(report);
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            result.failure = Some((variant, e.to_string()));
            if !run.reports.is_empty() {
                result.runs.push(run);
            }
            return Ok(result);
        }
        result.runs.push(run);
    }
    Ok(result)
}
