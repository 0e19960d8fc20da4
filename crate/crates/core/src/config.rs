//! Run configuration: a flat `key=value` file with a fixed key schema.
//! Unknown keys are rejected; CLI flags override file values.

use thiserror::Error;

use crate::synth::{AspectSpec, SynthConfig};

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error("{file}:{line}: expected key=value, got `{text}`")]
    Malformed {
        file: String,
        line: usize,
        text: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub dim: usize,
    pub k: usize,
    pub iters_l: usize,
    pub layers_l: usize,
    pub delta: f64,
    pub lambda_d: f64,
    pub lambda_theta: f64,
    pub lambda_z: f64,
    pub l2: f64,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub negatives: usize,
    pub sg_lr: f64,
    pub sg_epochs: usize,
    pub sg_pairs: usize,
    pub lr: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub intervention_iters: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub five_core: bool,
    pub eval_ks: Vec<usize>,
    pub dump_corpus: bool,
    /// Initialize stage-2 ID embeddings from the fused pretrained vectors.
    pub init_from_pretrain: bool,
    /// Amplify each item's chunk matching its pretrained-geometry cluster by
    /// (1 + tilt), associating intent chunks with item clusters at init.
    /// 0 disables the seeding.
    pub intent_seed_tilt: f64,
    /// Keep the aspect context vectors frozen during intervention; when
    /// false they are re-derived from the current tables each iteration.
    pub freeze_aspects: bool,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_aspects: Vec<AspectSpec>,
    pub synth_skew: f64,
    pub synth_intents: usize,
    pub synth_interactions: usize,
    pub synth_confound: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            seed: 0,
            dim: 64,
            k: 4,
            iters_l: 2,
            layers_l: 2,
            delta: 0.5,
            lambda_d: 1.0,
            lambda_theta: 1.0,
            lambda_z: 1.0,
            l2: 1e-4,
            walks_per_node: 10,
            walk_length: 21,
            window: 2,
            negatives: 3,
            sg_lr: 0.025,
            sg_epochs: 2,
            sg_pairs: 2000,
            lr: 0.01,
            epochs: 2000,
            eval_every: 10,
            patience: 50,
            intervention_iters: 140,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            five_core: true,
            eval_ks: vec![20, 40],
            dump_corpus: false,
            init_from_pretrain: true,
            intent_seed_tilt: 2.0,
            freeze_aspects: true,
            synth_users: synth.n_users,
            synth_items: synth.n_items,
            synth_aspects: synth.aspect_types,
            synth_skew: synth.skew_exponent,
            synth_intents: synth.true_intents,
            synth_interactions: synth.interactions_per_user,
            synth_confound: synth.confound_strength,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_aspects(key: &str, value: &str) -> Result<Vec<AspectSpec>, ConfigError> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let cols: Vec<&str> = part.split(':').collect();
        let [name, card, missing] = cols.as_slice() else {
            return Err(ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            });
        };
        out.push(AspectSpec {
            name: name.to_string(),
            cardinality: parse(key, card)?,
            missing_rate: parse(key, missing)?,
        });
    }
    Ok(out)
}

impl RunConfig {
    /// Apply one `key=value` assignment. Every key in `snapshot` is settable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "iters_l" => self.iters_l = parse(key, value)?,
            "layers_L" => self.layers_l = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "lambda_d" => self.lambda_d = parse(key, value)?,
            "lambda_theta" => self.lambda_theta = parse(key, value)?,
            "lambda_z" => self.lambda_z = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "walks_per_node" => self.walks_per_node = parse(key, value)?,
            "walk_length" => self.walk_length = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "negatives" => self.negatives = parse(key, value)?,
            "sg_lr" => self.sg_lr = parse(key, value)?,
            "sg_epochs" => self.sg_epochs = parse(key, value)?,
            "sg_pairs" => self.sg_pairs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "intervention_iters" => self.intervention_iters = parse(key, value)?,
            "split_train" => self.split_train = parse(key, value)?,
            "split_val" => self.split_val = parse(key, value)?,
            "split_test" => self.split_test = parse(key, value)?,
            "five_core" => self.five_core = parse(key, value)?,
            "eval_ks" => {
                self.eval_ks = value
                    .split(',')
                    .map(|v| parse(key, v))
                    .collect::<Result<_, _>>()?;
            }
            "dump_corpus" => self.dump_corpus = parse(key, value)?,
            "init_from_pretrain" => self.init_from_pretrain = parse(key, value)?,
            "intent_seed_tilt" => self.intent_seed_tilt = parse(key, value)?,
            "freeze_aspects" => self.freeze_aspects = parse(key, value)?,
            "synth_users" => self.synth_users = parse(key, value)?,
            "synth_items" => self.synth_items = parse(key, value)?,
            "synth_aspects" => self.synth_aspects = parse_aspects(key, value)?,
            "synth_skew" => self.synth_skew = parse(key, value)?,
            "synth_intents" => self.synth_intents = parse(key, value)?,
            "synth_interactions" => self.synth_interactions = parse(key, value)?,
            "synth_confound" => self.synth_confound = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, text: &str, file: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed {
                    file: file.to_string(),
                    line: lineno + 1,
                    text: raw.to_string(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dim == 0 || !self.dim.is_multiple_of(self.k) {
            return Err(ConfigError::Invalid(format!(
                "dim {} must be a positive multiple of k {}",
                self.dim, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(ConfigError::Invalid("delta must be in [0, 1]".into()));
        }
        if (self.split_train + self.split_val + self.split_test - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid("split fractions must sum to 1".into()));
        }
        if [self.lambda_d, self.lambda_theta, self.lambda_z, self.l2]
            .iter()
            .any(|v| *v < 0.0)
        {
            return Err(ConfigError::Invalid("loss weights must be >= 0".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(ConfigError::Invalid("eval_ks must be positive".into()));
        }
        if self.walks_per_node == 0 || self.walk_length < 2 || self.window == 0 {
            return Err(ConfigError::Invalid("degenerate walk config".into()));
        }
        if self.intervention_iters == 0 {
            return Err(ConfigError::Invalid(
                "intervention_iters must be >= 1".into(),
            ));
        }
        self.synth().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// All keys in fixed order; re-parsing the snapshot reproduces the config.
    pub fn snapshot(&self) -> String {
        let aspects = self
            .synth_aspects
            .iter()
            .map(|a| format!("{}:{}:{}", a.name, a.cardinality, a.missing_rate))
            .collect::<Vec<_>>()
            .join(",");
        let ks = self
            .eval_ks
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "seed={}\ndim={}\nk={}\niters_l={}\nlayers_L={}\ndelta={}\n\
             lambda_d={}\nlambda_theta={}\nlambda_z={}\nl2={}\n\
             walks_per_node={}\nwalk_length={}\nwindow={}\nnegatives={}\n\
             sg_lr={}\nsg_epochs={}\nsg_pairs={}\nlr={}\nepochs={}\n\
             eval_every={}\npatience={}\nintervention_iters={}\n\
             split_train={}\nsplit_val={}\nsplit_test={}\nfive_core={}\n\
             eval_ks={}\ndump_corpus={}\ninit_from_pretrain={}\nintent_seed_tilt={}\nfreeze_aspects={}\nsynth_users={}\nsynth_items={}\n\
             synth_aspects={}\nsynth_skew={}\nsynth_intents={}\n\
             synth_interactions={}\nsynth_confound={}\n",
            self.seed,
            self.dim,
            self.k,
            self.iters_l,
            self.layers_l,
            self.delta,
            self.lambda_d,
            self.lambda_theta,
            self.lambda_z,
            self.l2,
            self.walks_per_node,
            self.walk_length,
            self.window,
            self.negatives,
            self.sg_lr,
            self.sg_epochs,
            self.sg_pairs,
            self.lr,
            self.epochs,
            self.eval_every,
            self.patience,
            self.intervention_iters,
            self.split_train,
            self.split_val,
            self.split_test,
            self.five_core,
            ks,
            self.dump_corpus,
            self.init_from_pretrain,
            self.intent_seed_tilt,
            self.freeze_aspects,
            self.synth_users,
            self.synth_items,
            aspects,
            self.synth_skew,
            self.synth_intents,
            self.synth_interactions,
            self.synth_confound,
        )
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_users: self.synth_users,
            n_items: self.synth_items,
            aspect_types: self.synth_aspects.clone(),
            skew_exponent: self.synth_skew,
            true_intents: self.synth_intents,
            interactions_per_user: self.synth_interactions,
            confound_strength: self.synth_confound,
            seed: self.seed,
        }
    }
}
