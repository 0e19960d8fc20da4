//! Typed heterogeneous graph: schema, ingestion from TSV edge lists,
//! meta-path validation, and the binary user-item interaction matrix.
//!
//! File formats:
//! - node file: `<type>\t<id>` per line
//! - edge file: `<src_id>\t<dst_id>\t<kind>` per line
//! - schema file: `nodetype <name>` / `edgekind <name> <src_type> <dst_type>`
//!   lines; the *first* `edgekind` declares the user-item interaction relation
//! - meta-path file: one path per line as space-separated type names

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Index into the schema's node-type table.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct TypeId(pub u32);

/// Dense internal node index, stable for one loaded graph.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Error, Debug)]
pub enum HinError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed line: {text}")]
    Parse {
        file: String,
        line: usize,
        text: String,
    },
    #[error("unknown node type `{0}`")]
    UnknownNodeType(String),
    #[error("duplicate node type `{0}` in schema")]
    DuplicateNodeType(String),
    #[error("duplicate edge kind `{0}` in schema")]
    DuplicateEdgeKind(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("unknown edge kind `{0}`")]
    UnknownEdgeKind(String),
    #[error("edge references missing node `{0}`")]
    MissingNode(String),
    #[error("edge ({src}, {dst}) violates kind `{kind}` ({expected})")]
    SchemaViolation {
        src: String,
        dst: String,
        kind: String,
        expected: String,
    },
    #[error("schema needs at least two node types and one edge kind")]
    DegenerateSchema,
    #[error("graph is empty after core filtering")]
    EmptyAfterFiltering,
}

/// Relation between two node types. Stored once per unordered pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypedEdgeKind {
    pub name: String,
    pub source_type: TypeId,
    pub target_type: TypeId,
}

/// Node-type and edge-kind declarations for one graph.
#[derive(Clone, Debug, Default)]
pub struct Schema {
    type_names: Vec<String>,
    kinds: Vec<TypedEdgeKind>,
}

impl Schema {
    pub fn new() -> Self {
        Schema::default()
    }

    pub fn add_node_type(&mut self, name: &str) -> Result<TypeId, HinError> {
        if self.type_names.iter().any(|t| t == name) {
            return Err(HinError::DuplicateNodeType(name.to_string()));
        }
        self.type_names.push(name.to_string());
        Ok(TypeId(self.type_names.len() as u32 - 1))
    }

    pub fn add_edge_kind(&mut self, name: &str, src: &str, dst: &str) -> Result<u32, HinError> {
        if self.kinds.iter().any(|k| k.name == name) {
            return Err(HinError::DuplicateEdgeKind(name.to_string()));
        }
        let source_type = self.type_id(src)?;
        let target_type = self.type_id(dst)?;
        self.kinds.push(TypedEdgeKind {
            name: name.to_string(),
            source_type,
            target_type,
        });
        Ok(self.kinds.len() as u32 - 1)
    }

    pub fn type_id(&self, name: &str) -> Result<TypeId, HinError> {
        self.type_names
            .iter()
            .position(|t| t == name)
            .map(|i| TypeId(i as u32))
            .ok_or_else(|| HinError::UnknownNodeType(name.to_string()))
    }

    pub fn type_name(&self, t: TypeId) -> &str {
        &self.type_names[t.0 as usize]
    }

    pub fn node_types(&self) -> impl Iterator<Item = (TypeId, &str)> {
        self.type_names
            .iter()
            .enumerate()
            .map(|(i, n)| (TypeId(i as u32), n.as_str()))
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn kinds(&self) -> &[TypedEdgeKind] {
        &self.kinds
    }

    pub fn kind_id(&self, name: &str) -> Result<u32, HinError> {
        self.kinds
            .iter()
            .position(|k| k.name == name)
            .map(|i| i as u32)
            .ok_or_else(|| HinError::UnknownEdgeKind(name.to_string()))
    }

    /// The first declared edge kind is the user-item interaction relation.
    pub fn interaction_kind(&self) -> &TypedEdgeKind {
        &self.kinds[0]
    }

    /// True when some kind connects `a` and `b` (in either direction).
    pub fn connects(&self, a: TypeId, b: TypeId) -> bool {
        self.kinds.iter().any(|k| {
            (k.source_type == a && k.target_type == b)
                || (k.source_type == b && k.target_type == a)
        })
    }

    /// |A| + |R| > 2 and at least one relation declared.
    pub fn validate(&self) -> Result<(), HinError> {
        if self.type_names.len() < 2 || self.kinds.is_empty() {
            return Err(HinError::DegenerateSchema);
        }
        Ok(())
    }

    pub fn parse(text: &str, file: &str) -> Result<Self, HinError> {
        let mut schema = Schema::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            match (tag, rest.as_slice()) {
                ("nodetype", [name]) => {
                    schema.add_node_type(name)?;
                }
                ("edgekind", [name, src, dst]) => {
                    schema.add_edge_kind(name, src, dst)?;
                }
                _ => {
                    return Err(HinError::Parse {
                        file: file.to_string(),
                        line: lineno + 1,
                        text: raw.to_string(),
                    })
                }
            }
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for name in &self.type_names {
            out.push_str(&format!("nodetype {name}\n"));
        }
        for k in &self.kinds {
            out.push_str(&format!(
                "edgekind {} {} {}\n",
                k.name,
                self.type_name(k.source_type),
                self.type_name(k.target_type)
            ));
        }
        out
    }
}

/// An ordered list of node types; consecutive pairs must be declared relations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaPath {
    pub types: Vec<TypeId>,
}

impl MetaPath {
    pub fn new(types: Vec<TypeId>) -> Self {
        MetaPath { types }
    }

    pub fn start_type(&self) -> TypeId {
        self.types[0]
    }

    /// Palindromic paths (UMU, IAI, ...) cycle during walks and are the ones
    /// usable for user/user or item/item similarity.
    pub fn is_symmetric(&self) -> bool {
        let rev: Vec<TypeId> = self.types.iter().rev().cloned().collect();
        rev == self.types
    }

    /// Required node type at walk position `pos` (0-based), cycling symmetric
    /// paths with period len-1 and clamping asymmetric paths at their end.
    pub fn type_at(&self, pos: usize) -> Option<TypeId> {
        let n = self.types.len();
        if pos < n {
            return Some(self.types[pos]);
        }
        if self.is_symmetric() && n >= 2 {
            return Some(self.types[pos % (n - 1)]);
        }
        None
    }

    pub fn name(&self, schema: &Schema) -> String {
        self.types
            .iter()
            .map(|&t| schema.type_name(t))
            .collect::<Vec<_>>()
            .join("")
    }
}

/// One entry of a meta-path validation report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaPathCheck {
    pub path: String,
    pub valid: bool,
    /// Step index of the first undeclared consecutive type pair, if any.
    pub first_offense: Option<usize>,
    pub symmetric: bool,
}

impl fmt::Display for MetaPathCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            write!(f, "{}: valid (symmetric: {})", self.path, self.symmetric)
        } else {
            write!(
                f,
                "{}: invalid at step {}",
                self.path,
                self.first_offense.unwrap_or(0)
            )
        }
    }
}

/// Binary implicit-feedback interaction matrix derived from the interaction
/// edge kind. Rows and columns are dense indices into `users` / `items`.
#[derive(Clone, Debug)]
pub struct InteractionMatrix {
    pub users: Vec<NodeId>,
    pub items: Vec<NodeId>,
    /// Per user row, sorted item column indices.
    pub by_user: Vec<Vec<u32>>,
    /// Per item column, sorted user row indices.
    pub by_item: Vec<Vec<u32>>,
}

impl InteractionMatrix {
    pub fn m(&self) -> usize {
        self.users.len()
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn n_edges(&self) -> usize {
        self.by_user.iter().map(|v| v.len()).sum()
    }

    /// All (user_row, item_col) pairs in fixed (user, item) order.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.n_edges());
        for (u, items) in self.by_user.iter().enumerate() {
            for &i in items {
                out.push((u as u32, i));
            }
        }
        out
    }

    pub fn user_row(&self, node: NodeId) -> Option<usize> {
        self.users.binary_search(&node).ok()
    }

    pub fn item_col(&self, node: NodeId) -> Option<usize> {
        self.items.binary_search(&node).ok()
    }
}

/// Immutable typed multigraph. Adjacency is symmetric and grouped by the
/// neighbor's node type for O(1) walk lookups.
#[derive(Clone, Debug)]
pub struct Hin {
    schema: Schema,
    labels: Vec<String>,
    types: Vec<TypeId>,
    by_label: HashMap<String, NodeId>,
    /// Per node: neighbor lists grouped by neighbor type, sorted, duplicate-free.
    adj_by_type: Vec<BTreeMap<TypeId, Vec<NodeId>>>,
    /// Canonical edge list (src < dst), sorted, with kind index.
    edges: Vec<(NodeId, NodeId, u32)>,
}

impl Hin {
    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_type(&self, v: NodeId) -> TypeId {
        self.types[v.idx()]
    }

    pub fn label(&self, v: NodeId) -> &str {
        &self.labels[v.idx()]
    }

    pub fn node_by_label(&self, label: &str) -> Option<NodeId> {
        self.by_label.get(label).copied()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.labels.len() as u32).map(NodeId)
    }

    pub fn nodes_of_type(&self, t: TypeId) -> Vec<NodeId> {
        self.nodes().filter(|&v| self.node_type(v) == t).collect()
    }

    pub fn edges(&self) -> &[(NodeId, NodeId, u32)] {
        &self.edges
    }

    /// Neighbor set of `v` restricted to nodes of type `t`, sorted by id.
    pub fn neighbors_of_type(&self, v: NodeId, t: TypeId) -> Result<&[NodeId], HinError> {
        let adj = self
            .adj_by_type
            .get(v.idx())
            .ok_or_else(|| HinError::MissingNode(format!("#{}", v.0)))?;
        Ok(adj.get(&t).map(|v| v.as_slice()).unwrap_or(&[]))
    }

    pub fn degree_of_type(&self, v: NodeId, t: TypeId) -> usize {
        self.adj_by_type[v.idx()].get(&t).map_or(0, |n| n.len())
    }

    /// Parse meta paths, one per line of space-separated type names.
    pub fn parse_metapaths(&self, text: &str, file: &str) -> Result<Vec<MetaPath>, HinError> {
        let mut out = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut types = Vec::new();
            for name in line.split_whitespace() {
                types.push(self.schema.type_id(name)?);
            }
            if types.len() < 2 {
                return Err(HinError::Parse {
                    file: file.to_string(),
                    line: lineno + 1,
                    text: raw.to_string(),
                });
            }
            out.push(MetaPath::new(types));
        }
        Ok(out)
    }

    /// Mark each path valid/invalid with the first offending type pair.
    pub fn validate_metapaths(&self, paths: &[MetaPath]) -> Vec<MetaPathCheck> {
        paths
            .iter()
            .map(|p| {
                let mut first_offense = None;
                for (i, pair) in p.types.windows(2).enumerate() {
                    if !self.schema.connects(pair[0], pair[1]) {
                        first_offense = Some(i + 1);
                        break;
                    }
                }
                MetaPathCheck {
                    path: p.name(&self.schema),
                    valid: first_offense.is_none() && p.types.len() >= 2,
                    first_offense,
                    symmetric: p.is_symmetric(),
                }
            })
            .collect()
    }

    /// Interaction matrix over the first declared edge kind.
    pub fn interactions(&self) -> InteractionMatrix {
        let kind = 0u32;
        let ik = self.schema.interaction_kind().clone();
        let users = self.nodes_of_type(ik.source_type);
        let items = self.nodes_of_type(ik.target_type);
        let urow: HashMap<NodeId, u32> = users
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i as u32))
            .collect();
        let icol: HashMap<NodeId, u32> = items
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i as u32))
            .collect();
        let mut by_user = vec![Vec::new(); users.len()];
        let mut by_item = vec![Vec::new(); items.len()];
        for &(a, b, k) in &self.edges {
            if k != kind {
                continue;
            }
            let (u, i) = if self.node_type(a) == ik.source_type {
                (a, b)
            } else {
                (b, a)
            };
            let (ur, ic) = (urow[&u], icol[&i]);
            by_user[ur as usize].push(ic);
            by_item[ic as usize].push(ur);
        }
        for v in &mut by_user {
            v.sort_unstable();
        }
        for v in &mut by_item {
            v.sort_unstable();
        }
        InteractionMatrix {
            users,
            items,
            by_user,
            by_item,
        }
    }

    /// Serialize back to the ingestion formats (nodes.tsv + edges.tsv text).
    pub fn to_node_text(&self) -> String {
        let mut out = String::new();
        for v in self.nodes() {
            out.push_str(&format!(
                "{}\t{}\n",
                self.schema.type_name(self.node_type(v)),
                self.label(v)
            ));
        }
        out
    }

    pub fn to_edge_text(&self) -> String {
        let mut out = String::new();
        for &(a, b, k) in &self.edges {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                self.label(a),
                self.label(b),
                self.schema.kinds()[k as usize].name
            ));
        }
        out
    }
}

/// In-memory builder used by both the file loader and the synthetic generator.
pub struct HinBuilder {
    schema: Schema,
    labels: Vec<String>,
    types: Vec<TypeId>,
    by_label: HashMap<String, NodeId>,
    edges: Vec<(NodeId, NodeId, u32)>,
}

impl HinBuilder {
    pub fn new(schema: Schema) -> Result<Self, HinError> {
        schema.validate()?;
        Ok(HinBuilder {
            schema,
            labels: Vec::new(),
            types: Vec::new(),
            by_label: HashMap::new(),
            edges: Vec::new(),
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn add_node(&mut self, type_name: &str, label: &str) -> Result<NodeId, HinError> {
        let t = self.schema.type_id(type_name)?;
        if self.by_label.contains_key(label) {
            return Err(HinError::DuplicateNode(label.to_string()));
        }
        let id = NodeId(self.labels.len() as u32);
        self.labels.push(label.to_string());
        self.types.push(t);
        self.by_label.insert(label.to_string(), id);
        Ok(id)
    }

    pub fn add_edge(&mut self, src: &str, dst: &str, kind: &str) -> Result<(), HinError> {
        let k = self.schema.kind_id(kind)?;
        let a = *self
            .by_label
            .get(src)
            .ok_or_else(|| HinError::MissingNode(src.to_string()))?;
        let b = *self
            .by_label
            .get(dst)
            .ok_or_else(|| HinError::MissingNode(dst.to_string()))?;
        let decl = &self.schema.kinds()[k as usize];
        let (ta, tb) = (self.types[a.idx()], self.types[b.idx()]);
        let fits = (ta == decl.source_type && tb == decl.target_type)
            || (ta == decl.target_type && tb == decl.source_type);
        if !fits {
            return Err(HinError::SchemaViolation {
                src: src.to_string(),
                dst: dst.to_string(),
                kind: kind.to_string(),
                expected: format!(
                    "{}-{}",
                    self.schema.type_name(decl.source_type),
                    self.schema.type_name(decl.target_type)
                ),
            });
        }
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        self.edges.push((lo, hi, k));
        Ok(())
    }

    /// Finalize: dedupe edges, optionally 5-core filter, build adjacency.
    pub fn build(self, five_core: bool) -> Result<Hin, HinError> {
        let HinBuilder {
            schema,
            labels,
            types,
            by_label: _,
            mut edges,
        } = self;

        edges.sort_unstable();
        edges.dedup();

        let keep = if five_core {
            core_filter(&schema, &types, &edges)?
        } else {
            vec![true; labels.len()]
        };

        // compact surviving nodes to dense ids
        let mut remap = vec![None; labels.len()];
        let mut new_labels = Vec::new();
        let mut new_types = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = Some(NodeId(new_labels.len() as u32));
                new_labels.push(labels[i].clone());
                new_types.push(types[i]);
            }
        }
        let mut new_edges = Vec::with_capacity(edges.len());
        for &(a, b, k) in &edges {
            if let (Some(na), Some(nb)) = (remap[a.idx()], remap[b.idx()]) {
                let (lo, hi) = if na <= nb { (na, nb) } else { (nb, na) };
                new_edges.push((lo, hi, k));
            }
        }
        new_edges.sort_unstable();
        new_edges.dedup();

        let by_label: HashMap<String, NodeId> = new_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), NodeId(i as u32)))
            .collect();

        let mut adj_by_type: Vec<BTreeMap<TypeId, Vec<NodeId>>> =
            vec![BTreeMap::new(); new_labels.len()];
        for &(a, b, _) in &new_edges {
            let (ta, tb) = (new_types[a.idx()], new_types[b.idx()]);
            adj_by_type[a.idx()].entry(tb).or_default().push(b);
            if a != b {
                adj_by_type[b.idx()].entry(ta).or_default().push(a);
            }
        }
        for adj in &mut adj_by_type {
            for list in adj.values_mut() {
                list.sort_unstable();
                list.dedup();
            }
        }

        Ok(Hin {
            schema,
            labels: new_labels,
            types: new_types,
            by_label,
            adj_by_type,
            edges: new_edges,
        })
    }
}

/// Iterated k-core on the interaction relation: drop users/items with fewer
/// than 5 interactions until fixpoint. When a user-user kind exists, users
/// additionally need at least 5 friends.
fn core_filter(
    schema: &Schema,
    types: &[TypeId],
    edges: &[(NodeId, NodeId, u32)],
) -> Result<Vec<bool>, HinError> {
    const MIN: usize = 5;
    let ik = schema.interaction_kind();
    let (ut, it) = (ik.source_type, ik.target_type);
    let friend_kind: Option<u32> = schema
        .kinds()
        .iter()
        .position(|k| k.source_type == ut && k.target_type == ut)
        .map(|i| i as u32);

    let mut keep = vec![true; types.len()];
    loop {
        let mut inter_deg = vec![0usize; types.len()];
        let mut friend_deg = vec![0usize; types.len()];
        for &(a, b, k) in edges {
            if !keep[a.idx()] || !keep[b.idx()] {
                continue;
            }
            if k == 0 {
                inter_deg[a.idx()] += 1;
                inter_deg[b.idx()] += 1;
            }
            if Some(k) == friend_kind {
                friend_deg[a.idx()] += 1;
                friend_deg[b.idx()] += 1;
            }
        }
        let mut changed = false;
        for (i, &t) in types.iter().enumerate() {
            if !keep[i] {
                continue;
            }
            let drop = if t == ut {
                inter_deg[i] < MIN || (friend_kind.is_some() && friend_deg[i] < MIN)
            } else if t == it {
                inter_deg[i] < MIN
            } else {
                false
            };
            if drop {
                keep[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let any_user = types
        .iter()
        .enumerate()
        .any(|(i, &t)| keep[i] && t == ut);
    let any_item = types
        .iter()
        .enumerate()
        .any(|(i, &t)| keep[i] && t == it);
    if !any_user || !any_item {
        return Err(HinError::EmptyAfterFiltering);
    }
    Ok(keep)
}

fn read(path: &Path) -> Result<String, HinError> {
    fs::read_to_string(path).map_err(|source| HinError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), HinError> {
    let mut f = fs::File::create(path).map_err(|source| HinError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(text.as_bytes()).map_err(|source| HinError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a graph from a schema file, a node file, and one or more edge files.
pub fn load_hin(
    node_file: &Path,
    edge_files: &[&Path],
    schema_file: &Path,
    five_core: bool,
) -> Result<Hin, HinError> {
    let schema = Schema::parse(&read(schema_file)?, &schema_file.display().to_string())?;
    let mut builder = HinBuilder::new(schema)?;

    let node_text = read(node_file)?;
    let node_name = node_file.display().to_string();
    for (lineno, raw) in node_text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(t), Some(id), None) => {
                builder.add_node(t, id)?;
            }
            _ => {
                return Err(HinError::Parse {
                    file: node_name.clone(),
                    line: lineno + 1,
                    text: raw.to_string(),
                })
            }
        }
    }

    for edge_file in edge_files {
        let text = read(edge_file)?;
        let fname = edge_file.display().to_string();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(src), Some(dst), Some(kind), None) => {
                    builder.add_edge(src, dst, kind)?;
                }
                _ => {
                    return Err(HinError::Parse {
                        file: fname.clone(),
                        line: lineno + 1,
                        text: raw.to_string(),
                    })
                }
            }
        }
    }

    builder.build(five_core)
}
