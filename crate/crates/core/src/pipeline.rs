//! Stage orchestration over persisted artifacts. Each stage reads its
//! predecessor's checkpoint directory, writes plain-text artifacts plus a
//! manifest (config snapshot and input content hashes, no timestamps), and
//! is byte-identical across runs for a fixed seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eval::{self, MetricReport, SplitConfig, Splits};
use crate::hetsg::{
    fuse_embeddings, node_means, ContextBank, FusionParams, SkipGramConfig, SkipGramTrainer,
};
use crate::hin::{load_hin, Hin, HinError, InteractionMatrix, MetaPath};
use crate::intents::{DisentangleConfig, IntentGraph};
use crate::intervention::{
    debias_gradients, intervened_score, intervention_trace, sample_debias_pairs, AspectBank,
    InterventionConfig, InterventionTraceRow,
};
use crate::model::{
    derive, score_pair, Derived, ModelState, ObjectiveConfig, TrainConfig, TrainError, Trainer,
};
use crate::synth::{generate_to_dir, SynthError};
use crate::walks::{generate_corpus, WalkConfig, WalkCorpus};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Hin(#[from] HinError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("missing checkpoint file {0}")]
    MissingCheckpoint(String),
    #[error("malformed checkpoint {file}: {reason}")]
    BadCheckpoint { file: String, reason: String },
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
}

impl PipelineError {
    /// Stable machine-readable error code for the CLI's error line.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Io { .. } => "io",
            PipelineError::Hin(_) => "hin",
            PipelineError::Synth(_) => "synth",
            PipelineError::Config(_) => "config",
            PipelineError::Train(_) => "train",
            PipelineError::MissingCheckpoint(_) => "missing-checkpoint",
            PipelineError::BadCheckpoint { .. } => "bad-checkpoint",
            PipelineError::Incompatible(_) => "incompatible",
            PipelineError::UnknownUser(_) => "unknown-user",
        }
    }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Combined content hash of the given files, order-sensitive.
pub fn content_hash(paths: &[PathBuf]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in paths {
        if let Ok(bytes) = fs::read(p) {
            h = h.rotate_left(13) ^ fnv1a(&bytes);
        }
    }
    format!("{h:016x}")
}

fn write_manifest(
    dir: &Path,
    stage: &str,
    mode: &str,
    inputs: &[PathBuf],
    cfg: &RunConfig,
) -> Result<(), PipelineError> {
    let text = format!(
        "stage={stage}\nmode={mode}\nseed={}\ninput_hash={}\n",
        cfg.seed,
        content_hash(inputs)
    );
    write(&dir.join("manifest.txt"), &text)?;
    write(&dir.join("hyperparams.txt"), &cfg.snapshot())
}

/// Everything loadable from a data directory plus the derived training
/// structures (splits are re-derived deterministically from the seed).
pub struct LoadedData {
    pub hin: Hin,
    pub paths: Vec<MetaPath>,
    pub inter: InteractionMatrix,
    pub splits: Splits,
    pub graph: IntentGraph,
    pub corpus: WalkCorpus,
}

pub fn data_files(data: &Path) -> Vec<PathBuf> {
    ["nodes.tsv", "edges.tsv", "schema.txt", "metapaths.txt"]
        .iter()
        .map(|f| data.join(f))
        .collect()
}

pub fn load_data(data: &Path, cfg: &RunConfig) -> Result<LoadedData, PipelineError> {
    let hin = load_hin(
        &data.join("nodes.tsv"),
        &[&data.join("edges.tsv")],
        &data.join("schema.txt"),
        cfg.five_core,
    )?;
    let mp_text = read(&data.join("metapaths.txt"))?;
    let paths = hin.parse_metapaths(&mp_text, "metapaths.txt")?;
    let report = hin.validate_metapaths(&paths);
    if let Some(bad) = report.iter().find(|c| !c.valid) {
        return Err(PipelineError::Incompatible(format!(
            "invalid meta path: {bad}"
        )));
    }
    if let Some(longest) = paths.iter().map(|p| p.types.len()).max() {
        if cfg.walk_length < longest {
            return Err(PipelineError::Incompatible(format!(
                "walk_length {} shorter than the longest meta path ({longest})",
                cfg.walk_length
            )));
        }
    }
    let inter = hin.interactions();
    let splits = eval::split(
        &inter,
        &SplitConfig {
            train: cfg.split_train,
            val: cfg.split_val,
            test: cfg.split_test,
            seed: cfg.seed,
        },
    );
    let graph = IntentGraph::from_user_sets(inter.m(), inter.n(), &splits.train);
    let corpus = generate_corpus(
        &hin,
        &paths,
        &WalkConfig {
            walks_per_node: cfg.walks_per_node,
            walk_length: cfg.walk_length,
            seed: cfg.seed,
        },
    );
    Ok(LoadedData {
        hin,
        paths,
        inter,
        splits,
        graph,
        corpus,
    })
}

fn sg_config(cfg: &RunConfig) -> SkipGramConfig {
    SkipGramConfig {
        dim: cfg.dim,
        window: cfg.window,
        negatives: cfg.negatives,
        lr: cfg.sg_lr,
        epochs: cfg.sg_epochs,
        seed: cfg.seed,
    }
}

fn dcfg(cfg: &RunConfig) -> DisentangleConfig {
    DisentangleConfig {
        k: cfg.k,
        iters_l: cfg.iters_l,
        layers_l: cfg.layers_l,
        dim: cfg.dim,
    }
}

// ---------------------------------------------------------------------------
// checkpoint serialization

fn floats_to_line(prefix: &str, vals: &[f64]) -> String {
    let mut line = String::from(prefix);
    for v in vals {
        let _ = write!(line, "\t{v}");
    }
    line.push('\n');
    line
}

fn parse_floats(cols: &[&str]) -> Result<Vec<f64>, String> {
    cols.iter()
        .map(|c| c.parse::<f64>().map_err(|e| format!("{c}: {e}")))
        .collect()
}

/// Fused context bank in the embedding TSV format
/// (`<node_type>\t<node_id>\t<v...>`; the aspect rows carry the type name in
/// both columns since there is one vector per aspect type).
pub fn context_bank_text(hin: &Hin, bank: &ContextBank) -> String {
    let ik = hin.schema().interaction_kind().clone();
    let uname = hin.schema().type_name(ik.source_type).to_string();
    let iname = hin.schema().type_name(ik.target_type).to_string();
    let mut out = String::new();
    for (row, &v) in bank.users.iter().enumerate() {
        out.push_str(&floats_to_line(
            &format!("{uname}\t{}", hin.label(v)),
            bank.user_vec(row),
        ));
    }
    for (col, &v) in bank.items.iter().enumerate() {
        out.push_str(&floats_to_line(
            &format!("{iname}\t{}", hin.label(v)),
            bank.item_vec(col),
        ));
    }
    for (a, name) in bank.aspect_names.iter().enumerate() {
        out.push_str(&floats_to_line(&format!("{name}\t{name}"), bank.aspect_vec(a)));
    }
    out
}

fn save_sg_tables(dir: &Path, sg: &SkipGramTrainer, hin: &Hin) -> Result<(), PipelineError> {
    let mut out = String::new();
    for (pi, table) in sg.emb.tables.iter().enumerate() {
        for (row, &node) in table.nodes.iter().enumerate() {
            out.push_str(&floats_to_line(
                &format!("{pi}\tT\t{}", hin.label(node)),
                table.target_vec(row),
            ));
            out.push_str(&floats_to_line(
                &format!("{pi}\tC\t{}", hin.label(node)),
                table.context_vec(row),
            ));
        }
    }
    write(&dir.join("sg.tsv"), &out)
}

fn load_sg_tables(
    dir: &Path,
    sg: &mut SkipGramTrainer,
    hin: &Hin,
) -> Result<(), PipelineError> {
    let path = dir.join("sg.tsv");
    if !path.exists() {
        return Err(PipelineError::MissingCheckpoint(path.display().to_string()));
    }
    let text = read(&path)?;
    let fname = path.display().to_string();
    let bad = |reason: String| PipelineError::BadCheckpoint {
        file: fname.clone(),
        reason,
    };
    for line in text.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(bad(format!("short line `{line}`")));
        }
        let pi: usize = cols[0].parse().map_err(|_| bad(format!("path `{}`", cols[0])))?;
        let table = sg
            .emb
            .tables
            .get_mut(pi)
            .ok_or_else(|| bad(format!("path index {pi} out of range")))?;
        let node = hin
            .node_by_label(cols[2])
            .ok_or_else(|| bad(format!("unknown node `{}`", cols[2])))?;
        let Some(row) = table.row(node) else {
            return Err(bad(format!("node `{}` absent from path {pi} vocab", cols[2])));
        };
        let vals = parse_floats(&cols[3..]).map_err(&bad)?;
        if vals.len() != table.dim {
            return Err(bad(format!("dim {} != {}", vals.len(), table.dim)));
        }
        let off = row * table.dim;
        match cols[1] {
            "T" => table.target[off..off + table.dim].copy_from_slice(&vals),
            "C" => table.context[off..off + table.dim].copy_from_slice(&vals),
            other => return Err(bad(format!("bad table tag `{other}`"))),
        }
    }
    Ok(())
}

fn save_model(
    dir: &Path,
    state: &ModelState,
    hin: &Hin,
    inter: &InteractionMatrix,
) -> Result<(), PipelineError> {
    let d = state.dim();
    let ik = hin.schema().interaction_kind().clone();
    let uname = hin.schema().type_name(ik.source_type).to_string();
    let iname = hin.schema().type_name(ik.target_type).to_string();
    let mut emb = String::new();
    for (row, &v) in inter.users.iter().enumerate() {
        emb.push_str(&floats_to_line(
            &format!("{uname}\t{}", hin.label(v)),
            &state.user_ids[row * d..(row + 1) * d],
        ));
    }
    for (col, &v) in inter.items.iter().enumerate() {
        emb.push_str(&floats_to_line(
            &format!("{iname}\t{}", hin.label(v)),
            &state.item_ids[col * d..(col + 1) * d],
        ));
    }
    write(&dir.join("embeddings.tsv"), &emb)?;

    let mut layers = String::new();
    let c = state.dcfg.chunk_len();
    for (t, lp) in state.layers.iter().enumerate() {
        for r in 0..c {
            layers.push_str(&floats_to_line(
                &format!("{t}\tw\t{r}"),
                &lp.w[r * c..(r + 1) * c],
            ));
        }
        layers.push_str(&floats_to_line(&format!("{t}\tb\t0"), &lp.b));
    }
    write(&dir.join("layers.tsv"), &layers)?;

    let mut fusion = String::new();
    for (t, (m, b)) in &state.fusion.per_type {
        let name = hin.schema().type_name(*t);
        for r in 0..d {
            fusion.push_str(&floats_to_line(
                &format!("{name}\tM\t{r}"),
                &m[r * d..(r + 1) * d],
            ));
        }
        fusion.push_str(&floats_to_line(&format!("{name}\tb\t0"), b));
    }
    write(&dir.join("fusion.tsv"), &fusion)
}

fn load_model(
    dir: &Path,
    cfg: &RunConfig,
    hin: &Hin,
    inter: &InteractionMatrix,
) -> Result<ModelState, PipelineError> {
    let d = cfg.dim;
    let mut state = ModelState::init(hin, inter.m(), inter.n(), dcfg(cfg), cfg.delta, cfg.seed);
    let bad = |file: &Path, reason: String| PipelineError::BadCheckpoint {
        file: file.display().to_string(),
        reason,
    };

    let emb_path = dir.join("embeddings.tsv");
    if !emb_path.exists() {
        return Err(PipelineError::MissingCheckpoint(
            emb_path.display().to_string(),
        ));
    }
    let ik = hin.schema().interaction_kind().clone();
    let uname = hin.schema().type_name(ik.source_type).to_string();
    for line in read(&emb_path)?.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(bad(&emb_path, format!("short line `{line}`")));
        }
        let node = hin
            .node_by_label(cols[1])
            .ok_or_else(|| bad(&emb_path, format!("unknown node `{}`", cols[1])))?;
        let vals = parse_floats(&cols[2..]).map_err(|r| bad(&emb_path, r))?;
        if vals.len() != d {
            return Err(bad(&emb_path, format!("dim {} != {d}", vals.len())));
        }
        if cols[0] == uname {
            let row = inter
                .user_row(node)
                .ok_or_else(|| bad(&emb_path, format!("`{}` not a user", cols[1])))?;
            state.user_ids[row * d..(row + 1) * d].copy_from_slice(&vals);
        } else {
            let col = inter
                .item_col(node)
                .ok_or_else(|| bad(&emb_path, format!("`{}` not an item", cols[1])))?;
            state.item_ids[col * d..(col + 1) * d].copy_from_slice(&vals);
        }
    }

    let layers_path = dir.join("layers.tsv");
    let c = state.dcfg.chunk_len();
    for line in read(&layers_path)?.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(bad(&layers_path, format!("short line `{line}`")));
        }
        let t: usize = cols[0]
            .parse()
            .map_err(|_| bad(&layers_path, format!("layer `{}`", cols[0])))?;
        if t >= state.layers.len() {
            return Err(PipelineError::Incompatible(format!(
                "checkpoint has layer {t} but config expects {} layers",
                state.layers.len()
            )));
        }
        let r: usize = cols[2]
            .parse()
            .map_err(|_| bad(&layers_path, format!("row `{}`", cols[2])))?;
        let vals = parse_floats(&cols[3..]).map_err(|rr| bad(&layers_path, rr))?;
        match cols[1] {
            "w" => {
                if vals.len() != c || r >= c {
                    return Err(PipelineError::Incompatible(
                        "layer shape mismatch with dim/k".into(),
                    ));
                }
                state.layers[t].w[r * c..(r + 1) * c].copy_from_slice(&vals);
            }
            "b" => state.layers[t].b.copy_from_slice(&vals),
            other => return Err(bad(&layers_path, format!("bad tag `{other}`"))),
        }
    }

    let fusion_path = dir.join("fusion.tsv");
    for line in read(&fusion_path)?.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(bad(&fusion_path, format!("short line `{line}`")));
        }
        let t = hin
            .schema()
            .type_id(cols[0])
            .map_err(|_| bad(&fusion_path, format!("unknown type `{}`", cols[0])))?;
        let r: usize = cols[2]
            .parse()
            .map_err(|_| bad(&fusion_path, format!("row `{}`", cols[2])))?;
        let vals = parse_floats(&cols[3..]).map_err(|rr| bad(&fusion_path, rr))?;
        let (m, b) = state.fusion.per_type.get_mut(&t).unwrap();
        match cols[1] {
            "M" => {
                if vals.len() != d || r >= d {
                    return Err(PipelineError::Incompatible("fusion shape mismatch".into()));
                }
                m[r * d..(r + 1) * d].copy_from_slice(&vals);
            }
            "b" => b.copy_from_slice(&vals),
            other => return Err(bad(&fusion_path, format!("bad tag `{other}`"))),
        }
    }
    Ok(state)
}

fn save_aspects(dir: &Path, aspects: &AspectBank) -> Result<(), PipelineError> {
    let mut out = String::new();
    for (a, name) in aspects.names.iter().enumerate() {
        out.push_str(&floats_to_line(name, aspects.vec(a)));
    }
    write(&dir.join("aspects.tsv"), &out)
}

fn load_aspects(dir: &Path, dim: usize) -> Result<Option<AspectBank>, PipelineError> {
    let path = dir.join("aspects.tsv");
    if !path.exists() {
        return Ok(None);
    }
    let mut names = Vec::new();
    let mut vecs = Vec::new();
    for line in read(&path)?.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != dim + 1 {
            return Err(PipelineError::BadCheckpoint {
                file: path.display().to_string(),
                reason: format!("expected {} columns, got {}", dim + 1, cols.len()),
            });
        }
        names.push(cols[0].to_string());
        vecs.extend(parse_floats(&cols[1..]).map_err(|r| PipelineError::BadCheckpoint {
            file: path.display().to_string(),
            reason: r,
        })?);
    }
    Ok(Some(AspectBank { dim, names, vecs }))
}

fn loss_trace_csv(trace: &[crate::model::TraceRow]) -> String {
    let mut out = String::from("epoch,component,value\n");
    for row in trace {
        let _ = writeln!(out, "{},{},{:.10}", row.epoch, row.component, row.value);
    }
    out
}

fn intervention_trace_csv(rows: &[InterventionTraceRow]) -> String {
    let mut out = String::from("iteration,aspect,included_fraction,mean_effect,L_d\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            r.iteration, r.aspect, r.included_fraction, r.mean_effect, r.debias_loss
        );
    }
    out
}

/// Read the config snapshot stored with a checkpoint.
pub fn load_checkpoint_config(dir: &Path) -> Result<RunConfig, PipelineError> {
    let path = dir.join("hyperparams.txt");
    if !path.exists() {
        return Err(PipelineError::MissingCheckpoint(path.display().to_string()));
    }
    let mut cfg = RunConfig::default();
    cfg.apply_file(&read(&path)?, &path.display().to_string())?;
    Ok(cfg)
}

fn checkpoint_mode(dir: &Path) -> Result<String, PipelineError> {
    let text = read(&dir.join("manifest.txt"))?;
    for line in text.lines() {
        if let Some(mode) = line.strip_prefix("mode=") {
            return Ok(mode.to_string());
        }
    }
    Ok("plain".to_string())
}

// ---------------------------------------------------------------------------
// stages

/// Generate the synthetic confounded dataset into `out`.
pub fn cmd_synth(out: &Path, cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    generate_to_dir(&cfg.synth(), out)?;
    write_manifest(out, "synth", "data", &[], cfg)
}

/// Stage 1: walk corpus + skip-gram pretraining.
pub fn cmd_pretrain(data: &Path, out: &Path, cfg: &RunConfig) -> Result<(), PipelineError> {
    cfg.validate()?;
    let loaded = load_data(data, cfg)?;
    let (emb, losses) = crate::hetsg::train_skipgram(
        &loaded.hin,
        &loaded.corpus,
        &loaded.paths,
        &sg_config(cfg),
    );
    // reuse the trainer shell for serialization
    let mut sg = SkipGramTrainer::new(&loaded.hin, &loaded.corpus, &loaded.paths, sg_config(cfg));
    sg.emb = emb;
    save_sg_tables(out, &sg, &loaded.hin)?;
    let means = node_means(&loaded.hin, &sg.emb);
    let params = FusionParams::identity_init(&loaded.hin, cfg.dim, cfg.seed ^ 0xf00);
    let bank = fuse_embeddings(&loaded.hin, &means, &params);
    write(&out.join("context_bank.tsv"), &context_bank_text(&loaded.hin, &bank))?;
    let mut loss_text = String::from("epoch,component,value\n");
    for (e, l) in losses.iter().enumerate() {
        let _ = writeln!(loss_text, "{e},sg,{l:.10}");
    }
    write(&out.join("loss_trace.csv"), &loss_text)?;
    if cfg.dump_corpus {
        write(
            &out.join("corpus.txt"),
            &loaded.corpus.to_text(&loaded.hin, &loaded.paths),
        )?;
    }
    write_manifest(out, "pretrain", "pretrain", &data_files(data), cfg)
}

fn build_trainer<'a>(
    loaded: &'a LoadedData,
    cfg: &RunConfig,
    pretrain: &Path,
) -> Result<Trainer<'a>, PipelineError> {
    let mut sg = SkipGramTrainer::new(&loaded.hin, &loaded.corpus, &loaded.paths, sg_config(cfg));
    load_sg_tables(pretrain, &mut sg, &loaded.hin)?;
    let mut state = ModelState::init(
        &loaded.hin,
        loaded.inter.m(),
        loaded.inter.n(),
        dcfg(cfg),
        cfg.delta,
        cfg.seed,
    );
    if cfg.init_from_pretrain {
        // fine-tune on top of the pretrained geometry: ID embeddings start
        // from the fused context vectors where coverage exists
        let means = node_means(&loaded.hin, &sg.emb);
        let bank = fuse_embeddings(&loaded.hin, &means, &state.fusion);
        debug_assert_eq!(bank.users, loaded.inter.users);
        debug_assert_eq!(bank.items, loaded.inter.items);
        let d = cfg.dim;
        for (row, &v) in bank.users.iter().enumerate() {
            if means.coverage(v) > 0 {
                state.user_ids[row * d..(row + 1) * d].copy_from_slice(bank.user_vec(row));
            }
        }
        for (col, &v) in bank.items.iter().enumerate() {
            if means.coverage(v) > 0 {
                state.item_ids[col * d..(col + 1) * d].copy_from_slice(bank.item_vec(col));
            }
        }
        if cfg.k > 1 && cfg.intent_seed_tilt > 0.0 {
            // associate chunk j with the j-th cluster of the pretrained item
            // geometry by tilting chunk energies toward the item's cluster
            let n = loaded.inter.n();
            let clusters =
                crate::intents::kmeans_rows(&state.item_ids, n, d, cfg.k, cfg.seed);
            let c = d / cfg.k;
            let boost = 1.0 + cfg.intent_seed_tilt;
            for (i, &cl) in clusters.iter().enumerate() {
                for x in &mut state.item_ids[i * d + cl * c..i * d + (cl + 1) * c] {
                    *x *= boost;
                }
            }
        }
    }
    let ocfg = ObjectiveConfig {
        lambda_d: cfg.lambda_d,
        lambda_theta: cfg.lambda_theta,
        lambda_z: cfg.lambda_z,
        l2: cfg.l2,
    };
    let tcfg = TrainConfig {
        lr: cfg.lr,
        max_epochs: cfg.epochs,
        eval_every: cfg.eval_every,
        patience: cfg.patience,
        sg_pairs: cfg.sg_pairs,
        sg_lr: cfg.sg_lr,
        seed: cfg.seed,
    };
    Ok(Trainer::new(
        &loaded.hin,
        &loaded.graph,
        &loaded.splits.train,
        &loaded.splits.val,
        state,
        sg,
        ocfg,
        tcfg,
    ))
}

fn run_intervention(
    trainer: &mut Trainer,
    cfg: &RunConfig,
) -> Result<(AspectBank, Vec<InterventionTraceRow>), PipelineError> {
    let means = trainer.node_means();
    let bank = fuse_embeddings(trainer.hin, &means, &trainer.state.fusion);
    let aspects = AspectBank::snapshot(&bank);
    let icfg = InterventionConfig::uniform(aspects.n(), cfg.intervention_iters);
    let graph = trainer.graph;
    let train_sets = trainer.train_sets.to_vec();
    let n_items = graph.n;
    let seed = cfg.seed;
    let freeze = cfg.freeze_aspects;
    let mut rows: Vec<InterventionTraceRow> = Vec::new();
    let mut current = aspects.clone();
    {
        let rows_ref = &mut rows;
        let current_ref = &mut current;
        let mut cb = |state: &ModelState, der: &Derived, epoch: usize| {
            if !freeze {
                // follow the still-training tables: re-derive c_a each round
                *current_ref = AspectBank::snapshot(&der.bank);
            }
            let pairs = sample_debias_pairs(&train_sets, n_items, seed, epoch as u64);
            let (loss, grads) = debias_gradients(state, graph, der, current_ref, &pairs);
            if epoch.is_multiple_of(10) || epoch + 1 == icfg.iterations_n {
                rows_ref.extend(intervention_trace(
                    state,
                    der,
                    current_ref,
                    &pairs,
                    epoch,
                    loss,
                ));
            }
            (loss, grads)
        };
        trainer.run(icfg.iterations_n, Some(&mut cb))?;
    }
    Ok((aspects, rows))
}

/// Stage 2 (and optionally stage 3 when `joint`): ranking optimization.
pub fn cmd_train(
    data: &Path,
    pretrain: &Path,
    out: &Path,
    cfg: &RunConfig,
    joint: bool,
) -> Result<(), PipelineError> {
    cfg.validate()?;
    check_compat(pretrain, cfg)?;
    let loaded = load_data(data, cfg)?;
    let mut trainer = build_trainer(&loaded, cfg, pretrain)?;
    trainer.run(cfg.epochs, None)?;
    let mode = if joint {
        let (aspects, rows) = run_intervention(&mut trainer, cfg)?;
        save_aspects(out, &aspects)?;
        write(&out.join("intervention_trace.csv"), &intervention_trace_csv(&rows))?;
        "intervened"
    } else {
        "plain"
    };
    save_model(out, &trainer.state, &loaded.hin, &loaded.inter)?;
    save_sg_tables(out, &trainer.sg, &loaded.hin)?;
    write(&out.join("loss_trace.csv"), &loss_trace_csv(&trainer.trace))?;
    let stage = if joint { "train+intervene" } else { "train" };
    write_manifest(out, stage, mode, &data_files(data), cfg)
}

/// Stage 3: backdoor-adjustment fine-tuning from a stage-2 checkpoint.
pub fn cmd_intervene(
    data: &Path,
    train_ckpt: &Path,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(), PipelineError> {
    cfg.validate()?;
    check_compat(train_ckpt, cfg)?;
    let loaded = load_data(data, cfg)?;
    let mut trainer = build_trainer(&loaded, cfg, train_ckpt)?;
    trainer.state = load_model(train_ckpt, cfg, &loaded.hin, &loaded.inter)?;
    let (aspects, rows) = run_intervention(&mut trainer, cfg)?;
    save_model(out, &trainer.state, &loaded.hin, &loaded.inter)?;
    save_sg_tables(out, &trainer.sg, &loaded.hin)?;
    save_aspects(out, &aspects)?;
    write(&out.join("intervention_trace.csv"), &intervention_trace_csv(&rows))?;
    write(&out.join("loss_trace.csv"), &loss_trace_csv(&trainer.trace))?;
    write_manifest(out, "intervene", "intervened", &data_files(data), cfg)
}

/// Structural compatibility between this config and an upstream checkpoint.
fn check_compat(ckpt: &Path, cfg: &RunConfig) -> Result<(), PipelineError> {
    let up = load_checkpoint_config(ckpt)?;
    let mut mismatches = Vec::new();
    if up.dim != cfg.dim {
        mismatches.push(format!("dim {} vs {}", up.dim, cfg.dim));
    }
    if up.seed != cfg.seed {
        mismatches.push(format!("seed {} vs {}", up.seed, cfg.seed));
    }
    if up.walks_per_node != cfg.walks_per_node || up.walk_length != cfg.walk_length {
        mismatches.push("walk config".into());
    }
    if up.five_core != cfg.five_core {
        mismatches.push("five_core".into());
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Incompatible(mismatches.join("; ")))
    }
}

/// A loaded model ready to score pairs (plain or intervened path).
pub struct LoadedModel {
    pub state: ModelState,
    pub der: Derived,
    pub aspects: Option<AspectBank>,
}

impl LoadedModel {
    pub fn score(&self, u: usize, i: usize) -> f64 {
        match &self.aspects {
            Some(aspects) => intervened_score(&self.state, &self.der, aspects, u, i),
            None => score_pair(&self.state, &self.der, u, i),
        }
    }
}

pub fn load_model_dir(
    model_dir: &Path,
    loaded: &LoadedData,
    cfg: &RunConfig,
) -> Result<LoadedModel, PipelineError> {
    let state = load_model(model_dir, cfg, &loaded.hin, &loaded.inter)?;
    let mut sg = SkipGramTrainer::new(&loaded.hin, &loaded.corpus, &loaded.paths, sg_config(cfg));
    load_sg_tables(model_dir, &mut sg, &loaded.hin)?;
    let means = node_means(&loaded.hin, &sg.emb);
    let der = derive(&state, &loaded.graph, &loaded.hin, &means)?;
    let aspects = if checkpoint_mode(model_dir)? == "intervened" {
        load_aspects(model_dir, cfg.dim)?
    } else {
        None
    };
    Ok(LoadedModel {
        state,
        der,
        aspects,
    })
}

/// Rank against all non-train items and write `metrics.csv`.
pub fn cmd_eval(
    data: &Path,
    model_dir: &Path,
    out: &Path,
    cfg: &RunConfig,
) -> Result<MetricReport, PipelineError> {
    cfg.validate()?;
    let loaded = load_data(data, cfg)?;
    let model = load_model_dir(model_dir, &loaded, cfg)?;
    let report = eval::evaluate(
        loaded.inter.n(),
        &loaded.splits.train,
        &loaded.splits.test,
        &cfg.eval_ks,
        |u, i| model.score(u, i),
    );
    write(&out.join("metrics.csv"), &report.to_csv())?;
    write_manifest(out, "eval", "metrics", &data_files(data), cfg)?;
    Ok(report)
}

/// Top-N recommendations for one user, excluding their training items.
/// Returns lines `rank\titem_label\tscore`.
pub fn cmd_recommend(
    data: &Path,
    model_dir: &Path,
    user_label: &str,
    top: usize,
    cfg: &RunConfig,
) -> Result<String, PipelineError> {
    cfg.validate()?;
    let loaded = load_data(data, cfg)?;
    let model = load_model_dir(model_dir, &loaded, cfg)?;
    let node = loaded
        .hin
        .node_by_label(user_label)
        .ok_or_else(|| PipelineError::UnknownUser(user_label.to_string()))?;
    let row = loaded
        .inter
        .user_row(node)
        .ok_or_else(|| PipelineError::UnknownUser(user_label.to_string()))?;
    let ranked = eval::rank_items(loaded.inter.n(), &loaded.splits.train[row], |i| {
        model.score(row, i)
    });
    let mut out = String::new();
    for (rank, &col) in ranked.iter().take(top).enumerate() {
        let label = loaded.hin.label(loaded.inter.items[col as usize]);
        let _ = writeln!(out, "{}\t{label}\t{:.6}", rank + 1, model.score(row, col as usize));
    }
    Ok(out)
}

/// One full train(+intervene)+eval run per axis value; emits ablation.csv.
pub fn cmd_ablate(
    data: &Path,
    pretrain: &Path,
    out: &Path,
    axis: eval::AblationAxis,
    values: &[usize],
    cfg: &RunConfig,
) -> Result<String, PipelineError> {
    cfg.validate()?;
    let csv = eval::ablation_sweep(axis, values, |axis, value| {
        let mut run_cfg = cfg.clone();
        match axis {
            eval::AblationAxis::IntentCount => {
                run_cfg.k = value;
                if !run_cfg.dim.is_multiple_of(value) {
                    return Err(PipelineError::Config(ConfigError::Invalid(format!(
                        "dim {} not divisible by swept k {value}",
                        run_cfg.dim
                    ))));
                }
            }
            eval::AblationAxis::Layers => run_cfg.layers_l = value,
            eval::AblationAxis::InterventionIters => run_cfg.intervention_iters = value,
            eval::AblationAxis::TopK => run_cfg.eval_ks = vec![value],
        }
        if !run_cfg.eval_ks.contains(&20) {
            run_cfg.eval_ks.push(20);
        }
        let tag = format!("{}_{value}", axis.name());
        let stage_dir = out.join(&tag);
        let intervene = axis == eval::AblationAxis::InterventionIters;
        cmd_train(data, pretrain, &stage_dir.join("train"), &run_cfg, intervene)?;
        let report = cmd_eval(data, &stage_dir.join("train"), &stage_dir.join("eval"), &run_cfg)?;
        let row = report
            .at(if axis == eval::AblationAxis::TopK { value } else { 20 })
            .copied();
        Ok(MetricReport {
            rows: row.into_iter().collect(),
        })
    })?;
    write(&out.join("ablation.csv"), &csv)?;
    write_manifest(out, "ablate", "metrics", &data_files(data), cfg)?;
    Ok(csv)
}
