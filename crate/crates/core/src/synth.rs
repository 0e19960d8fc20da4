//! Confounded synthetic HIN generator. Plants a known bias: item attributes
//! follow a Zipf popularity law with per-aspect missing rates, each user has
//! one true intent tied to attribute values of the primary aspect, and a
//! configurable fraction of interactions is driven by the globally dominant
//! attribute instead of the user's intent. Ground truth is emitted alongside
//! so debiasing claims can be tested.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::hin::{Hin, HinBuilder, HinError, Schema, TypeId};
use crate::rng::Rng;

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Hin(#[from] HinError),
}

#[derive(Clone, Debug)]
pub struct AspectSpec {
    pub name: String,
    pub cardinality: usize,
    /// Fraction of items with no attribute of this type.
    pub missing_rate: f64,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// First entry is the primary aspect that intents attach to.
    pub aspect_types: Vec<AspectSpec>,
    /// Zipf exponent for attribute popularity; 0 = uniform.
    pub skew_exponent: f64,
    pub true_intents: usize,
    pub interactions_per_user: usize,
    /// Probability that an exposure follows the majority attribute instead
    /// of the user's true intent.
    pub confound_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 300,
            n_items: 500,
            aspect_types: vec![
                AspectSpec {
                    name: "A".into(),
                    cardinality: 40,
                    missing_rate: 0.1,
                },
                AspectSpec {
                    name: "D".into(),
                    cardinality: 20,
                    missing_rate: 0.2,
                },
                AspectSpec {
                    name: "G".into(),
                    cardinality: 10,
                    missing_rate: 0.05,
                },
            ],
            skew_exponent: 1.5,
            true_intents: 4,
            interactions_per_user: 30,
            confound_strength: 0.4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_users == 0 || self.n_items == 0 || self.interactions_per_user == 0 {
            return Err(SynthError::Infeasible("zero-sized dimension".into()));
        }
        if self.aspect_types.is_empty() {
            return Err(SynthError::Infeasible("no aspect types".into()));
        }
        if self.true_intents == 0 || self.true_intents > self.aspect_types[0].cardinality {
            return Err(SynthError::Infeasible(format!(
                "true_intents {} exceeds primary aspect cardinality {}",
                self.true_intents, self.aspect_types[0].cardinality
            )));
        }
        if !(0.0..=1.0).contains(&self.confound_strength)
            || self
                .aspect_types
                .iter()
                .any(|a| !(0.0..=1.0).contains(&a.missing_rate))
        {
            return Err(SynthError::Infeasible("rates must lie in [0, 1]".into()));
        }
        if self.skew_exponent < 0.0 {
            return Err(SynthError::Infeasible("negative skew exponent".into()));
        }
        Ok(())
    }
}

/// Oracle for the generated dataset.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Per user: true intent index.
    pub user_intent: Vec<usize>,
    /// Per item, per aspect type: attribute value rank, or missing.
    pub item_attributes: Vec<Vec<Option<usize>>>,
    /// Per intent: preferred attribute values of the primary aspect.
    pub intent_attribute_map: Vec<Vec<usize>>,
    /// The primary-aspect value held by the most items.
    pub majority_value: usize,
    /// Per interaction: (user, item, confound-driven).
    pub drivers: Vec<(u32, u32, bool)>,
}

impl GroundTruth {
    /// `user\tintent` lines, then `item\taspect_type\tattr|MISSING` lines.
    pub fn to_text(&self, cfg: &SynthConfig) -> String {
        let mut out = String::new();
        for (u, g) in self.user_intent.iter().enumerate() {
            let _ = writeln!(out, "u{u}\t{g}");
        }
        for (i, attrs) in self.item_attributes.iter().enumerate() {
            for (t, a) in attrs.iter().enumerate() {
                let name = &cfg.aspect_types[t].name;
                match a {
                    Some(v) => {
                        let _ = writeln!(out, "i{i}\t{name}\t{v}");
                    }
                    None => {
                        let _ = writeln!(out, "i{i}\t{name}\tMISSING");
                    }
                }
            }
        }
        out
    }

    pub fn parse(text: &str, aspect_names: &[String]) -> GroundTruth {
        let mut user_intent = Vec::new();
        let mut item_attrs: Vec<Vec<Option<usize>>> = Vec::new();
        for line in text.lines() {
            let cols: Vec<&str> = line.split('\t').collect();
            match cols.as_slice() {
                [_, intent] => {
                    user_intent.push(intent.parse().unwrap_or(0));
                }
                [item, aspect, value] => {
                    let i: usize = item.trim_start_matches('i').parse().unwrap_or(0);
                    if item_attrs.len() <= i {
                        item_attrs.resize(i + 1, vec![None; aspect_names.len()]);
                    }
                    let Some(t) = aspect_names.iter().position(|n| n == aspect) else {
                        continue;
                    };
                    item_attrs[i][t] = if *value == "MISSING" {
                        None
                    } else {
                        value.parse().ok()
                    };
                }
                _ => {}
            }
        }
        GroundTruth {
            user_intent,
            item_attributes: item_attrs,
            intent_attribute_map: Vec::new(),
            majority_value: 0,
            drivers: Vec::new(),
        }
    }
}

/// The generated dataset plus its oracle, before any filtering.
pub struct SynthData {
    pub cfg: SynthConfig,
    pub hin: Hin,
    pub truth: GroundTruth,
    pub metapath_text: String,
}

fn zipf_cumulative(card: usize, exponent: f64) -> Vec<f64> {
    let mut cum = Vec::with_capacity(card);
    let mut total = 0.0;
    for r in 0..card {
        total += 1.0 / ((r + 1) as f64).powf(exponent);
        cum.push(total);
    }
    cum
}

/// Generate the dataset in memory.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData, SynthError> {
    cfg.validate()?;
    let n_aspects = cfg.aspect_types.len();

    // item attributes: Zipf over value ranks, independent missingness
    let mut item_attributes: Vec<Vec<Option<usize>>> = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let mut attrs = Vec::with_capacity(n_aspects);
        for (t, spec) in cfg.aspect_types.iter().enumerate() {
            let mut rng = Rng::stream(cfg.seed, &[0xa77, i as u64, t as u64]);
            if rng.next_f64() < spec.missing_rate {
                attrs.push(None);
            } else {
                let cum = zipf_cumulative(spec.cardinality, cfg.skew_exponent);
                attrs.push(Some(rng.weighted(&cum)));
            }
        }
        item_attributes.push(attrs);
    }

    // intent -> preferred primary-aspect values, round-robin over popularity
    // ranks so every intent holds both popular and unpopular values
    let primary_card = cfg.aspect_types[0].cardinality;
    let mut intent_attribute_map: Vec<Vec<usize>> = vec![Vec::new(); cfg.true_intents];
    for v in 0..primary_card {
        intent_attribute_map[v % cfg.true_intents].push(v);
    }

    // majority value: the primary-aspect value held by the most items
    let mut value_counts = vec![0usize; primary_card];
    for attrs in &item_attributes {
        if let Some(v) = attrs[0] {
            value_counts[v] += 1;
        }
    }
    let majority_value = value_counts
        .iter()
        .enumerate()
        .max_by_key(|&(v, &c)| (c, std::cmp::Reverse(v)))
        .map(|(v, _)| v)
        .unwrap_or(0);

    // candidate pools
    let majority_items: Vec<u32> = (0..cfg.n_items)
        .filter(|&i| item_attributes[i][0] == Some(majority_value))
        .map(|i| i as u32)
        .collect();
    let mut intent_items: Vec<Vec<u32>> = vec![Vec::new(); cfg.true_intents];
    for (i, attrs) in item_attributes.iter().enumerate() {
        if let Some(v) = attrs[0] {
            intent_items[v % cfg.true_intents].push(i as u32);
        }
    }
    for (g, pool) in intent_items.iter().enumerate() {
        if pool.len() < cfg.interactions_per_user {
            return Err(SynthError::Infeasible(format!(
                "intent {g} has only {} matching items for {} interactions per user",
                pool.len(),
                cfg.interactions_per_user
            )));
        }
    }
    if cfg.confound_strength > 0.0 && majority_items.is_empty() {
        return Err(SynthError::Infeasible("no majority-attribute items".into()));
    }

    // user intents and interactions
    let mut user_intent = Vec::with_capacity(cfg.n_users);
    let mut drivers = Vec::new();
    for u in 0..cfg.n_users {
        let mut rng = Rng::stream(cfg.seed, &[0x5e1, u as u64]);
        let g = rng.below(cfg.true_intents);
        user_intent.push(g);
        let mut chosen: Vec<u32> = Vec::with_capacity(cfg.interactions_per_user);
        let mut attempts = 0usize;
        while chosen.len() < cfg.interactions_per_user {
            attempts += 1;
            if attempts > cfg.interactions_per_user * 200 {
                return Err(SynthError::Infeasible(format!(
                    "cannot draw {} distinct items for user {u}",
                    cfg.interactions_per_user
                )));
            }
            let confounded = rng.next_f64() < cfg.confound_strength;
            let pool = if confounded {
                &majority_items
            } else {
                &intent_items[g]
            };
            let item = pool[rng.below(pool.len())];
            if chosen.contains(&item) {
                continue;
            }
            chosen.push(item);
            drivers.push((u as u32, item, confounded));
        }
    }

    // assemble the graph
    let mut schema = Schema::new();
    schema.add_node_type("U")?;
    schema.add_node_type("I")?;
    for spec in &cfg.aspect_types {
        schema.add_node_type(&spec.name)?;
    }
    schema.add_edge_kind("UI", "U", "I")?;
    for spec in &cfg.aspect_types {
        schema.add_edge_kind(&format!("I{}", spec.name), "I", &spec.name)?;
    }
    let mut b = HinBuilder::new(schema)?;
    for u in 0..cfg.n_users {
        b.add_node("U", &format!("u{u}"))?;
    }
    for i in 0..cfg.n_items {
        b.add_node("I", &format!("i{i}"))?;
    }
    for spec in &cfg.aspect_types {
        for v in 0..spec.cardinality {
            b.add_node(&spec.name, &format!("{}{v}", spec.name))?;
        }
    }
    for &(u, i, _) in &drivers {
        b.add_edge(&format!("u{u}"), &format!("i{i}"), "UI")?;
    }
    for (i, attrs) in item_attributes.iter().enumerate() {
        for (t, attr) in attrs.iter().enumerate() {
            if let Some(v) = attr {
                let name = &cfg.aspect_types[t].name;
                b.add_edge(&format!("i{i}"), &format!("{name}{v}"), &format!("I{name}"))?;
            }
        }
    }
    let hin = b.build(false)?;

    // meta paths: interaction palindromes through every aspect, both item-
    // and aspect-rooted rotations
    let mut mp = String::new();
    mp.push_str("U I U\n");
    for spec in &cfg.aspect_types {
        let _ = writeln!(mp, "U I {} I U", spec.name);
    }
    mp.push_str("I U I\n");
    for spec in &cfg.aspect_types {
        let _ = writeln!(mp, "I {} I", spec.name);
    }
    for spec in &cfg.aspect_types {
        let _ = writeln!(mp, "{} I {}", spec.name, spec.name);
    }

    Ok(SynthData {
        cfg: cfg.clone(),
        hin,
        truth: GroundTruth {
            user_intent,
            item_attributes,
            intent_attribute_map,
            majority_value,
            drivers,
        },
        metapath_text: mp,
    })
}

/// Write the dataset in the ingestion formats plus ground truth, driver log,
/// and skew report.
pub fn generate_to_dir(cfg: &SynthConfig, dir: &Path) -> Result<SynthData, SynthError> {
    let data = generate(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| HinError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let write = |name: &str, text: &str| -> Result<(), SynthError> {
        crate::hin::write_text(&dir.join(name), text)?;
        Ok(())
    };
    write("nodes.tsv", &data.hin.to_node_text())?;
    write("edges.tsv", &data.hin.to_edge_text())?;
    write("schema.txt", &data.hin.schema().to_text())?;
    write("metapaths.txt", &data.metapath_text)?;
    let mut inter = String::new();
    for &(u, i, _) in &data.truth.drivers {
        let _ = writeln!(inter, "u{u}\ti{i}");
    }
    write("interactions.tsv", &inter)?;
    write("ground_truth.tsv", &data.truth.to_text(cfg))?;
    let mut log = String::new();
    for &(u, i, confounded) in &data.truth.drivers {
        let _ = writeln!(
            log,
            "u{u}\ti{i}\t{}",
            if confounded { "confound" } else { "intent" }
        );
    }
    write("gen_log.tsv", &log)?;
    write("skew_report.csv", &skew_report(&data.hin))?;
    Ok(data)
}

/// Per-aspect distribution summary of any loaded graph:
/// `aspect,kind,key,value` rows with `missing` (items lacking the aspect),
/// `head_mass` (connection share of the top half of values by popularity),
/// and one `hist` row per aspect value.
pub fn skew_report(hin: &Hin) -> String {
    let ik = hin.schema().interaction_kind().clone();
    let item_type = ik.target_type;
    let items = hin.nodes_of_type(item_type);
    let mut out = String::from("aspect,kind,key,value\n");
    for (t, name) in hin.schema().node_types() {
        if t == ik.source_type || t == item_type {
            continue;
        }
        let values = hin.nodes_of_type(t);
        if values.is_empty() {
            continue;
        }
        let missing = items
            .iter()
            .filter(|&&i| hin.degree_of_type(i, t) == 0)
            .count();
        let mut counts: Vec<(usize, String)> = values
            .iter()
            .map(|&v| (hin.degree_of_type(v, item_type), hin.label(v).to_string()))
            .collect();
        counts.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let total: usize = counts.iter().map(|c| c.0).sum();
        let head: usize = counts
            .iter()
            .take(counts.len().div_ceil(2))
            .map(|c| c.0)
            .sum();
        let head_mass = if total == 0 {
            0.0
        } else {
            head as f64 / total as f64
        };
        let _ = writeln!(out, "{name},missing,,{missing}");
        let _ = writeln!(out, "{name},head_mass,,{head_mass:.6}");
        for (count, label) in &counts {
            let _ = writeln!(out, "{name},hist,{label},{count}");
        }
    }
    out
}

/// Head share of a single aspect type (popularity mass of the top half of
/// values); convenience for property tests.
pub fn head_mass(hin: &Hin, aspect: TypeId) -> f64 {
    let ik = hin.schema().interaction_kind().clone();
    let mut counts: Vec<usize> = hin
        .nodes_of_type(aspect)
        .iter()
        .map(|&v| hin.degree_of_type(v, ik.target_type))
        .collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let head: usize = counts.iter().take(counts.len().div_ceil(2)).sum();
    head as f64 / total as f64
}
