//! Run configuration, loadable from TOML. Every field has a default so a
//! config file only needs to list what it changes.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which pipeline components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Phrase graph message passing.
    pub pgn: bool,
    /// Second-stage matching on pruned, refined proposals.
    pub pp: bool,
    /// Visual object graph message passing.
    pub vogn: bool,
    /// Structured prediction with edge scores.
    pub sp: bool,
    /// Feed the refined relation feature into phrase messages and attention.
    pub pgn_relation: bool,
    /// Feed the refined visual relation feature into object messages and attention.
    pub vogn_relation: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::FULL
    }
}

impl Toggles {
    pub const FULL: Toggles = Toggles { pgn: true, pp: true, vogn: true, sp: true, pgn_relation: true, vogn_relation: true };
    pub const BASELINE: Toggles = Toggles { pgn: false, pp: false, vogn: false, sp: false, pgn_relation: true, vogn_relation: true };

    /// Whether training needs the second stage at all.
    pub fn needs_stage_two(&self) -> bool {
        self.pp || self.vogn || self.sp
    }

    /// Whether the edge matching head is trained and used.
    pub fn uses_edges(&self) -> bool {
        self.vogn || self.sp
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.pgn {
            parts.push(if self.pgn_relation { "pgn" } else { "pgn(no-rel)" });
        }
        if self.pp {
            parts.push("pp");
        }
        if self.vogn {
            parts.push(if self.vogn_relation { "vogn" } else { "vogn(no-rel)" });
        }
        if self.sp {
            parts.push("sp");
        }
        if parts.is_empty() {
            "none".to_owned()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub word_dim: usize,
    /// Width of phrase, relation and object features.
    pub hidden: usize,
    pub spatial_dim: usize,
    pub appearance_dim: usize,
    /// Samples per side when cropping the coordinate map.
    pub roi_resolution: usize,
    /// Side of the coordinate map.
    pub coord_map: usize,
    /// Side of the resized union mask.
    pub mask_grid: usize,
    /// Side of the grid boxes are rasterized on before resizing.
    pub mask_source_grid: usize,
    /// Proposals kept per phrase after pruning.
    pub top_k: usize,
    /// Phrase counts below this are solved exhaustively.
    pub exhaustive_below: usize,
    pub toggles: Toggles,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 32,
            hidden: 32,
            spatial_dim: 16,
            appearance_dim: 16,
            roi_resolution: 4,
            coord_map: 16,
            mask_grid: 64,
            mask_source_grid: 128,
            top_k: 5,
            exhaustive_below: 6,
            toggles: Toggles::FULL,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("spatial_dim", self.spatial_dim),
            ("appearance_dim", self.appearance_dim),
            ("roi_resolution", self.roi_resolution),
            ("coord_map", self.coord_map),
            ("mask_grid", self.mask_grid),
            ("mask_source_grid", self.mask_source_grid),
            ("top_k", self.top_k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config("hidden must be a positive even number".into()));
        }
        if self.coord_map < 2 {
            return Err(Error::Config("coord_map must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub prune_reg: f64,
    pub node_match: f64,
    pub edge_match: f64,
    pub node_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { prune_reg: 0.1, node_match: 1.0, edge_match: 1.0, node_reg: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.prune_reg, self.node_match, self.edge_match, self.node_reg] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config("loss weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage1_milestones: Vec<usize>,
    pub stage2_milestones: Vec<usize>,
    /// Upper bound on the global L2 norm of each batch gradient; zero disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_factor: 0.1,
            batch_size: 8,
            stage1_iters: 2000,
            stage2_iters: 4000,
            stage1_milestones: vec![667, 1333],
            stage2_milestones: vec![1333, 2667],
            clip_norm: 10.0,
            seed: 11,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub canvas: f64,
    /// Inclusive range of mentioned objects per scene.
    pub phrases: [usize; 2],
    /// Probability that a scene contains look-alike distractor objects.
    pub ambiguity: f64,
    /// Inclusive range of look-alikes added to an ambiguous scene.
    pub duplicates: [usize; 2],
    /// Probability that a phrase refers to a group of two objects.
    pub multi_object: f64,
    pub appearance_noise: f64,
    pub proposal_noise: f64,
    pub proposals: usize,
    /// Proposals placed around real objects with low overlap.
    pub near_distractors: usize,
    pub edge_drop: f64,
    pub node_drop: f64,
    pub span_jitter: f64,
    /// Scale of the perturbation applied to the proposal copied from each
    /// object; zero keeps exact copies.
    pub jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            canvas: 100.0,
            phrases: [2, 5],
            ambiguity: 0.7,
            duplicates: [1, 2],
            multi_object: 0.05,
            appearance_noise: 0.3,
            proposal_noise: 0.1,
            proposals: 20,
            near_distractors: 6,
            edge_drop: 0.15,
            node_drop: 0.05,
            span_jitter: 0.1,
            jitter: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.ambiguity, self.multi_object, self.edge_drop, self.node_drop, self.span_jitter];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.phrases[0] == 0 || self.phrases[0] > self.phrases[1] {
            return Err(Error::Config("phrases range must be non-empty and start at 1 or more".into()));
        }
        if self.duplicates[0] > self.duplicates[1] {
            return Err(Error::Config("duplicates range is empty".into()));
        }
        if !(self.canvas.is_finite() && self.canvas > 0.0) {
            return Err(Error::Config("canvas must be positive".into()));
        }
        if self.appearance_noise < 0.0 || self.proposal_noise < 0.0 || self.jitter < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Largest number of objects a scene can hold.
    pub fn max_objects(&self) -> usize {
        let per_phrase = if self.multi_object > 0.0 { 2 } else { 1 };
        self.phrases[1] * per_phrase + if self.ambiguity > 0.0 { self.duplicates[1] } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    /// JSONL files read instead of generating the matching split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: 2000, val: 500, test: 500, seed: 2024, train_path: None, val_path: None, test_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beta_step: f64,
    pub iou_threshold: f64,
    pub label_threshold: f64,
    /// K values swept by the ablation runner.
    pub k_sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { beta_step: 0.05, iou_threshold: 0.5, label_threshold: 0.5, k_sweep: vec![2, 10] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.world.validate()?;
        if !(self.eval.beta_step > 0.0 && self.eval.beta_step <= 1.0) {
            return Err(Error::Config("beta_step must lie in (0, 1]".into()));
        }
        if self.model.top_k > self.world.proposals {
            return Err(Error::TooFewProposals { k: self.model.top_k, m: self.world.proposals });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn dataset_paths_are_optional() {
        let cfg = Config::from_toml("[data]\nval_path = \"data/val.jsonl\"\n").unwrap();
        assert_eq!(cfg.data.val_path.as_deref(), Some(std::path::Path::new("data/val.jsonl")));
        assert!(cfg.data.train_path.is_none());
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = Config::from_toml("[model]\ntop_k = 3\n[optimizer]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.model.top_k, 3);
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.optimizer.lr, 0.01);
        assert_eq!(cfg.loss.prune_reg, 0.1);
    }

    #[test]
    fn rejects_k_above_m() {
        let err = Config::from_toml("[model]\ntop_k = 30\n").unwrap_err();
        assert!(matches!(err, Error::TooFewProposals { k: 30, m: 20 }));
    }

    #[test]
    fn rejects_bad_decay() {
        assert!(Config::from_toml("[optimizer]\ndecay_factor = 1.5\n").is_err());
    }
}
