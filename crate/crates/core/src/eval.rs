//! Recall@1, balance-weight calibration and the ablation runner.

use serde::{Deserialize, Serialize};

use crate::config::{Config, Toggles};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::langgraph::Category;
use crate::matcher::{calibrate_beta, BetaSearch};
use crate::model::{Inference, Model};
use crate::train::{train_stage_one, train_stage_two, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: Category,
    pub correct: usize,
    pub total: usize,
}

impl CategoryAccuracy {
    /// Percentage, zero for an empty category.
    pub fn accuracy(&self) -> f64 {
        percent(self.correct, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// Percentage of phrases grounded correctly.
    pub recall_at_1: f64,
    /// One entry per category, in [`Category::ALL`] order.
    pub per_category: Vec<CategoryAccuracy>,
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// Tallies predicted boxes against ground truth, one slice per sample.
pub fn score_boxes<'a, I>(samples: I, iou_threshold: f64) -> EvalReport
where
    I: IntoIterator<Item = (&'a [BBox], &'a [BBox], &'a [Category])>,
{
    let mut per_category: Vec<CategoryAccuracy> =
        Category::ALL.iter().map(|&category| CategoryAccuracy { category, correct: 0, total: 0 }).collect();
    for (pred, gt, cats) in samples {
        for ((p, g), c) in pred.iter().zip(gt).zip(cats) {
            let slot = &mut per_category[c.index()];
            slot.total += 1;
            if iou(p, g) >= iou_threshold {
                slot.correct += 1;
            }
        }
    }
    let correct = per_category.iter().map(|c| c.correct).sum();
    let total = per_category.iter().map(|c| c.total).sum();
    EvalReport { correct, total, recall_at_1: percent(correct, total), per_category }
}

/// Network outputs of every example, reusable across balance weights.
pub fn infer_all(model: &Model, data: &[Example], toggles: &Toggles) -> Result<Vec<Inference>> {
    data.iter().map(|ex| model.infer(&ex.input, toggles)).collect()
}

pub fn score_inferences(infs: &[Inference], data: &[Example], beta: f64, iou_threshold: f64) -> EvalReport {
    let preds: Vec<Vec<BBox>> = infs.iter().map(|inf| inf.decode(beta).phrases.iter().map(|p| p.bbox).collect()).collect();
    score_boxes(
        preds.iter().zip(data).map(|(p, ex)| (p.as_slice(), ex.gt.as_slice(), ex.categories.as_slice())),
        iou_threshold,
    )
}

pub fn evaluate(model: &Model, data: &[Example], toggles: &Toggles, beta: f64, iou_threshold: f64) -> Result<EvalReport> {
    Ok(score_inferences(&infer_all(model, data, toggles)?, data, beta, iou_threshold))
}

/// Grid search of the balance weight on precomputed inferences.
pub fn calibrate(infs: &[Inference], data: &[Example], step: f64, iou_threshold: f64) -> Result<BetaSearch> {
    calibrate_beta(step, |beta| Ok(score_inferences(infs, data, beta, iou_threshold).recall_at_1))
}

/// One trained and evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub toggles: Toggles,
    pub k: usize,
    pub beta: f64,
    pub report: EvalReport,
}

impl AblationRow {
    pub fn csv_header() -> String {
        let mut cols = vec!["config".to_owned(), "toggles".into(), "K".into(), "beta".into(), "recall_at_1".into()];
        cols.extend(Category::ALL.iter().map(|c| c.name().to_owned()));
        cols.join(",")
    }

    pub fn csv_line(&self) -> String {
        let mut cols = vec![
            self.config.clone(),
            self.toggles.label(),
            self.k.to_string(),
            format!("{:.2}", self.beta),
            format!("{:.2}", self.report.recall_at_1),
        ];
        cols.extend(self.report.per_category.iter().map(|c| format!("{:.2}", c.accuracy())));
        cols.join(",")
    }
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = AblationRow::csv_header();
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub const PGN_ONLY: Toggles = Toggles { pgn: true, pp: false, vogn: false, sp: false, pgn_relation: true, vogn_relation: true };
pub const PGN_PP: Toggles = Toggles { pgn: true, pp: true, vogn: false, sp: false, pgn_relation: true, vogn_relation: true };

/// Trains and evaluates the ablation configurations on shared data. Every
/// configuration with the phrase graph starts its second stage from the same
/// first-stage checkpoint; the +VOGN row is the full model decoded without
/// edge scores.
pub struct AblationRunner<'a> {
    pub config: Config,
    pub train: &'a [Example],
    pub val: &'a [Example],
    stage_one: Option<Model>,
    full: Option<(Model, Vec<Inference>)>,
    log: Box<dyn FnMut(&str) + 'a>,
}

impl<'a> AblationRunner<'a> {
    pub fn new(config: Config, train: &'a [Example], val: &'a [Example]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if val.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        Ok(AblationRunner { config, train, val, stage_one: None, full: None, log: Box::new(|_| {}) })
    }

    /// Progress messages go to `log`.
    pub fn with_log(mut self, log: impl FnMut(&str) + 'a) -> Self {
        self.log = Box::new(log);
        self
    }

    fn fresh(&self, toggles: &Toggles) -> Result<Model> {
        let mut cfg = self.config.model.clone();
        cfg.toggles = *toggles;
        Model::new(cfg, crate::synth::vocabulary())
    }

    fn stage_one_model(&mut self, toggles: &Toggles) -> Result<Model> {
        let mut model = self.fresh(toggles)?;
        (self.log)(&format!("stage one [{}]", toggles.label()));
        let c = &self.config;
        train_stage_one(&mut model, self.train, toggles, &c.loss, &c.optimizer, c.eval.label_threshold)?;
        Ok(model)
    }

    fn shared_stage_one(&mut self) -> Result<Model> {
        if self.stage_one.is_none() {
            let m = self.stage_one_model(&PGN_ONLY)?;
            self.stage_one = Some(m);
        }
        Ok(self.stage_one.clone().expect("just trained"))
    }

    fn stage_two(&mut self, mut model: Model, toggles: &Toggles, k: usize) -> Result<Model> {
        model.config.toggles = *toggles;
        model.config.top_k = k;
        (self.log)(&format!("stage two [{}] K={k}", toggles.label()));
        let c = &self.config;
        train_stage_two(&mut model, self.train, toggles, &c.loss, &c.optimizer, c.eval.label_threshold)?;
        Ok(model)
    }

    fn row(&self, name: &str, toggles: Toggles, k: usize, beta: f64, infs: &[Inference]) -> AblationRow {
        let report = score_inferences(infs, self.val, beta, self.config.eval.iou_threshold);
        AblationRow { config: name.to_owned(), toggles, k, beta, report }
    }

    /// Full model at top-K `k`: its inferences and calibrated balance weight.
    fn full_at(&mut self, k: usize) -> Result<(Vec<Inference>, BetaSearch)> {
        let base = self.shared_stage_one()?;
        let model = self.stage_two(base, &Toggles::FULL, k)?;
        let infs = infer_all(&model, self.val, &Toggles::FULL)?;
        let search = calibrate(&infs, self.val, self.config.eval.beta_step, self.config.eval.iou_threshold)?;
        if k == self.config.model.top_k {
            self.full = Some((model, infs.clone()));
        }
        Ok((infs, search))
    }

    /// Baseline, +PGN, +PP, +VOGN and +SP.
    pub fn main_rows(&mut self) -> Result<(Vec<AblationRow>, BetaSearch)> {
        let k = self.config.model.top_k;
        let mut rows = Vec::new();

        let baseline = self.stage_one_model(&Toggles::BASELINE)?;
        let infs = infer_all(&baseline, self.val, &Toggles::BASELINE)?;
        rows.push(self.row("Baseline", Toggles::BASELINE, 1, 0.0, &infs));

        let pgn = self.shared_stage_one()?;
        let infs = infer_all(&pgn, self.val, &PGN_ONLY)?;
        rows.push(self.row("+PGN", PGN_ONLY, 1, 0.0, &infs));

        let pp = self.stage_two(pgn, &PGN_PP, k)?;
        let infs = infer_all(&pp, self.val, &PGN_PP)?;
        rows.push(self.row("+PP", PGN_PP, k, 0.0, &infs));

        let (infs, search) = self.full_at(k)?;
        let no_sp = Toggles { sp: false, ..Toggles::FULL };
        rows.push(self.row("+VOGN", no_sp, k, 0.0, &infs));
        rows.push(self.row("+SP", Toggles::FULL, k, search.best, &infs));
        Ok((rows, search))
    }

    /// Full model without the relation feature in phrase or visual messages.
    pub fn relation_rows(&mut self) -> Result<Vec<AblationRow>> {
        let k = self.config.model.top_k;
        let mut rows = Vec::new();
        let no_phrase_rel = Toggles { pgn_relation: false, ..Toggles::FULL };
        let base = self.stage_one_model(&Toggles { pgn_relation: false, ..PGN_ONLY })?;
        let model = self.stage_two(base, &no_phrase_rel, k)?;
        rows.push(self.calibrated_row("w/o phrase relation feature", &model, no_phrase_rel, k)?);

        let no_visual_rel = Toggles { vogn_relation: false, ..Toggles::FULL };
        let base = self.shared_stage_one()?;
        let model = self.stage_two(base, &no_visual_rel, k)?;
        rows.push(self.calibrated_row("w/o visual relation feature", &model, no_visual_rel, k)?);
        Ok(rows)
    }

    fn calibrated_row(&self, name: &str, model: &Model, toggles: Toggles, k: usize) -> Result<AblationRow> {
        let infs = infer_all(model, self.val, &toggles)?;
        let search = calibrate(&infs, self.val, self.config.eval.beta_step, self.config.eval.iou_threshold)?;
        Ok(self.row(name, toggles, k, search.best, &infs))
    }

    /// Full model at each top-K of the sweep, plus the default K.
    pub fn k_sweep(&mut self) -> Result<Vec<AblationRow>> {
        let default_k = self.config.model.top_k;
        let mut ks = self.config.eval.k_sweep.clone();
        if !ks.contains(&default_k) {
            ks.push(default_k);
        }
        ks.sort_unstable();
        let mut rows = Vec::new();
        for k in ks {
            if k > self.config.world.proposals {
                return Err(Error::TooFewProposals { k, m: self.config.world.proposals });
            }
            let (infs, search) = match (&self.full, k == default_k) {
                (Some((_, infs)), true) => {
                    let infs = infs.clone();
                    let s = calibrate(&infs, self.val, self.config.eval.beta_step, self.config.eval.iou_threshold)?;
                    (infs, s)
                }
                _ => self.full_at(k)?,
            };
            rows.push(self.row(&format!("K={k}"), Toggles::FULL, k, search.best, &infs));
        }
        Ok(rows)
    }

    /// The trained full model at the default K, once [`Self::main_rows`] ran.
    pub fn full_model(&self) -> Option<&Model> {
        self.full.as_ref().map(|(m, _)| m)
    }
}
