use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::learners::{TrainConfig, Variant};
use crate::mlti::MixConfig;
use crate::taskgen::{BankSpec, TargetKind};
use crate::theorylab::{PartnerMode, TaylorForm};

/// The only schema version this build reads.
pub const SCHEMA_VERSION: u32 = 1;

/// Meta-learning algorithm of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Learner {
    Maml,
    Anil,
    Metasgd,
    Protonet,
}

impl Learner {
    pub fn name(self) -> &'static str {
        match self {
            Learner::Maml => "maml",
            Learner::Anil => "anil",
            Learner::Metasgd => "metasgd",
            Learner::Protonet => "protonet",
        }
    }

    /// The MAML-family variant, or `None` for ProtoNet.
    pub fn variant(self) -> Option<Variant> {
        match self {
            Learner::Maml => Some(Variant::Maml),
            Learner::Anil => Some(Variant::Anil),
            Learner::Metasgd => Some(Variant::Metasgd),
            Learner::Protonet => None,
        }
    }
}

/// Pool sizes for `sweep_tasks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Meta-train pool sizes, ascending.
    pub pool_sizes: Vec<usize>,
    /// Also write `plot.svg`.
    pub plot: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            pool_sizes: vec![4, 8, 16, 32],
            plot: true,
        }
    }
}

/// Parameters of the lemma checks run by the `theory` verb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilons: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
    pub form: TaylorForm,
    pub partner: PartnerMode,
    pub tasks: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Random instances for the variance-ordering check.
    pub variance_instances: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 2.0,
            epsilons: vec![0.4, 0.2, 0.1, 0.05],
            n_mc: 1_000_000,
            seed: 0,
            form: TaylorForm::Exact,
            partner: PartnerMode::Both,
            tasks: 4,
            per_class: 10,
            input_dim: 5,
            hidden_dim: 8,
            variance_instances: 20,
        }
    }
}

/// One experiment: bank, learner, training and interpolation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub run_id: String,
    pub learner: Learner,
    pub bank: BankSpec,
    /// Seed of the bank content and pool split, shared by every training seed.
    pub bank_seed: u64,
    pub seeds: Vec<u64>,
    pub test_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Query rows per class, in training and at meta-test.
    pub q_queries: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// Output width of the ProtoNet embedding.
    pub embed_dim: usize,
    /// Layers shared across tasks; defaults to every hidden layer.
    pub shared_prefix: Option<usize>,
    /// Training loss is recorded every this many iterations.
    pub log_every: usize,
    pub train: TrainConfig,
    pub mix: MixConfig,
    pub sweep: SweepConfig,
    /// Meta-test bank of `cross-domain`.
    pub target_bank: Option<BankSpec>,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: "run".into(),
            learner: Learner::Maml,
            bank: BankSpec::GaussianClasses {
                classes: 48,
                dim: 16,
                radius: 1.0,
                noise: 1.0,
                samples_per_class: None,
                shift: 0.0,
                train_count: 8,
                test_count: 16,
            },
            bank_seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            test_episodes: 2000,
            n_way: 5,
            k_shot: 1,
            q_queries: 5,
            hidden: vec![32, 32],
            embed_dim: 16,
            shared_prefix: None,
            log_every: 100,
            train: TrainConfig::default(),
            mix: MixConfig::default(),
            sweep: SweepConfig::default(),
            target_bank: None,
            theory: TheoryConfig::default(),
        }
    }
}

impl RunConfig {
    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let out = match (self.learner, self.bank.target_kind()) {
            (Learner::Protonet, _) => self.embed_dim,
            (_, TargetKind::Scalar) => 1,
            (_, TargetKind::Classes) => self.n_way,
        };
        let mut dims = vec![self.bank.input_dim()];
        dims.extend(&self.hidden);
        dims.push(out);
        dims
    }

    pub fn prefix(&self) -> usize {
        self.shared_prefix.unwrap_or(self.hidden.len())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '"']) {
            return bad(format!("run_id {:?} must be non-empty without commas, quotes or newlines", self.run_id));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return bad(format!("seeds must be distinct, got {:?}", self.seeds));
        }
        if self.test_episodes < 100 {
            return bad(format!("test_episodes must be >= 100, got {}", self.test_episodes));
        }
        if self.n_way == 0 || self.k_shot == 0 || self.q_queries == 0 {
            return bad("n_way, k_shot and q_queries must be >= 1".into());
        }
        if self.hidden.contains(&0) || self.embed_dim == 0 {
            return bad("layer widths must be >= 1".into());
        }
        if self.prefix() >= self.dims().len() - 1 {
            return bad(format!(
                "shared_prefix {} must leave the output layer task-specific",
                self.prefix()
            ));
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        if self.learner == Learner::Protonet && self.bank.target_kind() == TargetKind::Scalar {
            return bad("protonet needs a classification bank".into());
        }
        self.train.validate()?;
        self.mix.validate(self.prefix())?;
        let sizes = &self.sweep.pool_sizes;
        if sizes.is_empty() || sizes.contains(&0) || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("sweep.pool_sizes must be ascending and positive, got {sizes:?}"));
        }
        Ok(())
    }

    /// Parses a config document, applies `key=value` overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if !doc.contains_key("schema_version") {
            return Err(HarnessError::Config("schema_version is required".into()));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_table(doc)
    }

    /// `self` with overrides applied, validated.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut doc = toml::Table::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_table(doc)
    }

    fn from_table(doc: toml::Table) -> Result<Self, HarnessError> {
        let config: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// The config with every default written out.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets the dotted `path` to `value`, creating intermediate tables. The value
/// is read as a TOML literal and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), HarnessError> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return Err(HarnessError::Config(format!("override {assignment:?} is not key=value")));
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HarnessError::Config(format!("override path {path:?} has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut table = doc;
    for key in parents {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            HarnessError::Config(format!("override {path:?}: {key} is not a table"))
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_resolved_text() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse(&c.resolved(), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        let base = RunConfig::default().resolved();
        assert!(RunConfig::parse(&format!("{base}\nbogus = 1\n"), &[]).is_err());
        let nested = base.replace("[train]", "[train]\nwarmup = 3");
        assert!(RunConfig::parse(&nested, &[]).is_err());
        let v2 = base.replace("schema_version = 1", "schema_version = 2");
        assert!(RunConfig::parse(&v2, &[]).is_err());
        assert!(RunConfig::parse("learner = \"maml\"", &[]).is_err());
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let base = RunConfig::default().resolved();
        let c = RunConfig::parse(
            &base,
            &[
                "train.iterations=7".into(),
                "mix.mode=cross".into(),
                "run_id=abc".into(),
                "seeds=[3, 4]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.mix.mode, crate::mlti::MixMode::Cross);
        assert_eq!(c.run_id, "abc");
        assert_eq!(c.seeds, vec![3, 4]);
        assert!(RunConfig::parse(&base, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::parse(&base, &["noequals".into()]).is_err());
        assert!(RunConfig::parse(&base, &["run_id.x=1".into()]).is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        for o in ["seeds=[]", "seeds=[1, 1]", "test_episodes=99", "sweep.pool_sizes=[8, 4]", "mix.layer_max=5"] {
            assert!(RunConfig::default().with_overrides(&[o.into()]).is_err(), "{o}");
        }
    }
}
