//! Serving cost model: operator graphs with per-device costs, critical-path
//! latency under a placement, named consolidation plans, and placement search.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use petgraph::algo::toposort;
use petgraph::graph::{DiGraph, NodeIndex};
use petgraph::visit::EdgeRef;
use petgraph::Direction;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    EmbeddingLookup,
    Projection,
    FeaturePreprocess,
    TransformerEncoder,
    MlpHead,
    Other,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::EmbeddingLookup,
        OpKind::Projection,
        OpKind::FeaturePreprocess,
        OpKind::TransformerEncoder,
        OpKind::MlpHead,
        OpKind::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::Projection => "projection",
            OpKind::FeaturePreprocess => "feature_preprocess",
            OpKind::TransformerEncoder => "transformer_encoder",
            OpKind::MlpHead => "mlp_head",
            OpKind::Other => "other",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Graph(format!("unknown op kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Device {
    Cpu,
    Gpu,
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Device::Cpu => "CPU",
            Device::Gpu => "GPU",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpNode {
    pub id: String,
    pub kind: OpKind,
    pub cpu_cost_us: f64,
    /// `None`: CPU only.
    pub gpu_cost_us: Option<f64>,
    pub output_bytes: f64,
}

impl OpNode {
    pub fn cost_on(&self, d: Device) -> Option<f64> {
        match d {
            Device::Cpu => Some(self.cpu_cost_us),
            Device::Gpu => self.gpu_cost_us,
        }
    }
}

/// Validated acyclic operator graph.
#[derive(Clone, Debug)]
pub struct OpGraph {
    graph: DiGraph<OpNode, ()>,
    order: Vec<NodeIndex>,
    stage: Vec<usize>,
}

impl OpGraph {
    pub fn new(nodes: Vec<OpNode>, edges: &[(String, String)]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let mut graph = DiGraph::new();
        let mut index = HashMap::new();
        for n in nodes {
            let costs = [Some(n.cpu_cost_us), n.gpu_cost_us, Some(n.output_bytes)];
            if costs.iter().flatten().any(|c| !(c.is_finite() && *c >= 0.0)) {
                return Err(Error::Graph(format!("node `{}` has a negative or non-finite cost", n.id)));
            }
            let id = n.id.clone();
            if index.insert(id.clone(), graph.add_node(n)).is_some() {
                return Err(Error::Graph(format!("duplicate node `{id}`")));
            }
        }
        for (a, b) in edges {
            let find = |s: &String| index.get(s).copied().ok_or_else(|| Error::Graph(format!("edge references unknown node `{s}`")));
            graph.add_edge(find(a)?, find(b)?, ());
        }
        let order = toposort(&graph, None).map_err(|c| Error::Cycle(graph[c.node_id()].id.clone()))?;
        let mut stage = vec![0; graph.node_count()];
        for &v in &order {
            for e in graph.edges_directed(v, Direction::Outgoing) {
                stage[e.target().index()] = stage[e.target().index()].max(stage[v.index()] + 1);
            }
        }
        Ok(Self { graph, order, stage })
    }

    pub fn len(&self) -> usize {
        self.graph.node_count()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.node_count() == 0
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &OpNode> {
        self.graph.node_weights()
    }

    pub fn node(&self, i: usize) -> &OpNode {
        &self.graph[NodeIndex::new(i)]
    }

    pub fn kinds(&self) -> BTreeSet<OpKind> {
        self.nodes().map(|n| n.kind).collect()
    }

    /// Longest-path depth from a source.
    pub fn stage(&self, i: usize) -> usize {
        self.stage[i]
    }

    /// Nodes with no consumers.
    pub fn sinks(&self) -> Vec<usize> {
        self.graph
            .node_indices()
            .filter(|&v| self.graph.edges_directed(v, Direction::Outgoing).next().is_none())
            .map(|v| v.index())
            .collect()
    }

    /// A copy with every node of `kind` costing zero on both devices.
    pub fn zero_cost(&self, kind: OpKind) -> Self {
        let mut g = self.clone();
        for n in g.graph.node_weights_mut().filter(|n| n.kind == kind) {
            n.cpu_cost_us = 0.0;
            n.gpu_cost_us = n.gpu_cost_us.map(|_| 0.0);
        }
        g
    }

    pub fn scaled_cost(&self, node: usize, factor: f64) -> Self {
        let mut g = self.clone();
        let n = &mut g.graph[NodeIndex::new(node)];
        n.cpu_cost_us *= factor;
        n.gpu_cost_us = n.gpu_cost_us.map(|c| c * factor);
        g
    }
}

/// Parses `node <id> <kind> <cpu_us> <gpu_us|-> <out_bytes>` and
/// `edge <src> <dst>` lines; `#` starts a comment.
pub fn parse_graph(text: &str) -> Result<OpGraph> {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| Error::parse(line_no, format!("{what} `{s}` is not a non-negative number")))
        };
        match f.as_slice() {
            ["node", id, kind, cpu, gpu, bytes] => nodes.push(OpNode {
                id: id.to_string(),
                kind: kind.parse().map_err(|e: Error| Error::parse(line_no, e.to_string()))?,
                cpu_cost_us: num(cpu, "cpu cost")?,
                gpu_cost_us: if *gpu == "-" { None } else { Some(num(gpu, "gpu cost")?) },
                output_bytes: num(bytes, "output bytes")?,
            }),
            ["edge", a, b] => edges.push((a.to_string(), b.to_string())),
            _ => return Err(Error::parse(line_no, format!("unrecognised line `{line}`"))),
        }
    }
    OpGraph::new(nodes, &edges)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferModel {
    pub overhead_us: f64,
    pub bandwidth_bytes_per_us: f64,
    /// Crossing edges between the same two stages share one overhead.
    pub coalesce: bool,
}

impl Default for TransferModel {
    fn default() -> Self {
        Self {
            overhead_us: 8.0,
            bandwidth_bytes_per_us: 1000.0,
            coalesce: true,
        }
    }
}

impl TransferModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.overhead_us >= 0.0) || !(self.bandwidth_bytes_per_us > 0.0) {
            return Err(Error::Config("transfer model needs overhead >= 0 and bandwidth > 0".into()));
        }
        Ok(())
    }

    /// Parses `overhead=U,bw=B[,coalesce=true|false]`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut t = TransferModel::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("transfer field `{part}` is not key=value")))?;
            let bad = || Error::Config(format!("bad transfer value `{part}`"));
            match k.trim() {
                "overhead" => t.overhead_us = v.trim().parse().map_err(|_| bad())?,
                "bw" => t.bandwidth_bytes_per_us = v.trim().parse().map_err(|_| bad())?,
                "coalesce" => t.coalesce = v.trim().parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown transfer field `{k}`"))),
            }
        }
        t.validate()?;
        Ok(t)
    }
}

/// Device per node, indexed like the graph.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Placement(pub Vec<Device>);

impl Placement {
    pub fn all(g: &OpGraph, d: Device) -> Self {
        Placement(g.nodes().map(|n| if n.cost_on(d).is_some() { d } else { Device::Cpu }).collect())
    }

    /// GPU for every eligible node whose kind is in `gpu_kinds`.
    pub fn by_kind(g: &OpGraph, gpu_kinds: &[OpKind]) -> Self {
        Placement(
            g.nodes()
                .map(|n| if gpu_kinds.contains(&n.kind) && n.gpu_cost_us.is_some() { Device::Gpu } else { Device::Cpu })
                .collect(),
        )
    }

    pub fn describe(&self, g: &OpGraph) -> String {
        let mut by_kind: BTreeMap<OpKind, BTreeSet<Device>> = BTreeMap::new();
        for (n, d) in g.nodes().zip(&self.0) {
            by_kind.entry(n.kind).or_default().insert(*d);
        }
        by_kind
            .iter()
            .map(|(k, ds)| format!("{}={}", k.name(), ds.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("+")))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Critical-path latency: node weight is the cost on its device; each
/// device-crossing edge adds the delay of its transfer group. Groups are keyed
/// by (source stage, destination stage, direction); a coalesced group costs
/// `overhead + Σbytes / bw`, otherwise `Σ(overhead + bytes / bw)`.
pub fn plan_latency(g: &OpGraph, p: &Placement, t: &TransferModel) -> Result<f64> {
    t.validate()?;
    if p.0.len() != g.len() {
        return Err(Error::Placement(format!("placement covers {} of {} nodes", p.0.len(), g.len())));
    }
    let mut cost = Vec::with_capacity(g.len());
    for (n, &d) in g.nodes().zip(&p.0) {
        cost.push(n.cost_on(d).ok_or_else(|| Error::Placement(format!("node `{}` cannot run on {d}", n.id)))?);
    }
    let mut groups: HashMap<(usize, usize, Device), f64> = HashMap::new();
    for e in g.graph.edge_references() {
        let (a, b) = (e.source().index(), e.target().index());
        if p.0[a] != p.0[b] {
            let bytes = g.node(a).output_bytes / t.bandwidth_bytes_per_us;
            let per_edge = if t.coalesce { bytes } else { t.overhead_us + bytes };
            *groups.entry((g.stage[a], g.stage[b], p.0[a])).or_insert(if t.coalesce { t.overhead_us } else { 0.0 }) += per_edge;
        }
    }
    let mut finish = vec![0.0f64; g.len()];
    for &v in &g.order {
        let ready = g
            .graph
            .edges_directed(v, Direction::Incoming)
            .map(|e| {
                let a = e.source().index();
                let delay = if p.0[a] != p.0[v.index()] {
                    groups[&(g.stage[a], g.stage[v.index()], p.0[a])]
                } else {
                    0.0
                };
                finish[a] + delay
            })
            .fold(0.0, f64::max);
        finish[v.index()] = ready + cost[v.index()];
    }
    Ok(g.sinks().into_iter().map(|s| finish[s]).fold(0.0, f64::max))
}

/// Named consolidation plans: label, description, GPU kinds.
pub const NAMED_PLANS: [(&str, &str, &[OpKind]); 5] = [
    ("a'", "CPU only, with transformer", &[]),
    (
        "b",
        "GPU only",
        &[
            OpKind::EmbeddingLookup,
            OpKind::Projection,
            OpKind::FeaturePreprocess,
            OpKind::TransformerEncoder,
            OpKind::MlpHead,
            OpKind::Other,
        ],
    ),
    (
        "c",
        "lookup on CPU, rest on GPU",
        &[OpKind::Projection, OpKind::FeaturePreprocess, OpKind::TransformerEncoder, OpKind::MlpHead, OpKind::Other],
    ),
    (
        "d",
        "lookup + projection on CPU, rest on GPU",
        &[OpKind::FeaturePreprocess, OpKind::TransformerEncoder, OpKind::MlpHead, OpKind::Other],
    ),
    (
        "e",
        "lookup + projection + preprocessing on CPU, rest on GPU",
        &[OpKind::TransformerEncoder, OpKind::MlpHead, OpKind::Other],
    ),
];

pub const REQUIRED_KINDS: [OpKind; 5] = [
    OpKind::EmbeddingLookup,
    OpKind::Projection,
    OpKind::FeaturePreprocess,
    OpKind::TransformerEncoder,
    OpKind::MlpHead,
];

#[derive(Clone, Debug, PartialEq)]
pub struct PlanRow {
    pub label: &'static str,
    pub description: &'static str,
    pub placement: Placement,
    pub latency_us: f64,
    /// Relative to the transformer-free all-CPU baseline, in percent.
    pub increase_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedReport {
    pub baseline_us: f64,
    pub rows: Vec<PlanRow>,
}

impl NamedReport {
    pub fn render(&self) -> String {
        let mut s = format!("{:<4} {:<56} {:>12} {:>10}\n", "plan", "placement", "latency_us", "increase");
        s += &format!("{:<4} {:<56} {:>12.2} {:>10}\n", "a", "CPU only, no transformer (baseline)", self.baseline_us, "-");
        for r in &self.rows {
            s += &format!("{:<4} {:<56} {:>12.2} {:>+9.1}%\n", r.label, r.description, r.latency_us, r.increase_pct);
        }
        s
    }
}

/// Latency increase of each named plan over the all-CPU plan with transformer
/// nodes excluded (costed at zero).
pub fn evaluate_named_plans(g: &OpGraph, t: &TransferModel) -> Result<NamedReport> {
    let kinds = g.kinds();
    let missing: Vec<&str> = REQUIRED_KINDS.iter().filter(|k| !kinds.contains(k)).map(|k| k.name()).collect();
    if !missing.is_empty() {
        return Err(Error::Graph(format!("graph lacks kinds: {}", missing.join(", "))));
    }
    let base_graph = g.zero_cost(OpKind::TransformerEncoder);
    let baseline_us = plan_latency(&base_graph, &Placement::all(g, Device::Cpu), t)?;
    if baseline_us <= 0.0 {
        return Err(Error::Graph("baseline latency is zero".into()));
    }
    let rows = NAMED_PLANS
        .iter()
        .map(|&(label, description, gpu)| {
            let placement = Placement::by_kind(g, gpu);
            let latency_us = plan_latency(g, &placement, t)?;
            Ok(PlanRow {
                label,
                description,
                placement,
                latency_us,
                increase_pct: 100.0 * (latency_us / baseline_us - 1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NamedReport { baseline_us, rows })
}

/// Label of the named plan with exactly this assignment, if any.
pub fn named_plan_of(g: &OpGraph, p: &Placement) -> Option<&'static str> {
    NAMED_PLANS.iter().find(|(_, _, gpu)| Placement::by_kind(g, gpu) == *p).map(|(l, _, _)| *l)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Exhaustive,
    Greedy,
    /// Nothing to choose: every node is CPU-only.
    Trivial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub placement: Placement,
    pub latency_us: f64,
    pub mode: SearchMode,
    pub evaluated: u64,
    /// The evaluation budget ran out before the search finished.
    pub truncated: bool,
}

pub const EXHAUSTIVE_LIMIT: usize = 20;

/// Minimum-latency placement. Exhaustive over free nodes when there are at
/// most [`EXHAUSTIVE_LIMIT`], otherwise per-kind greedy then single-node hill
/// climbing. `budget` caps latency evaluations.
pub fn search_placement(g: &OpGraph, t: &TransferModel, budget: u64) -> Result<SearchResult> {
    let free: Vec<usize> = (0..g.len()).filter(|&i| g.node(i).gpu_cost_us.is_some()).collect();
    let cpu = Placement::all(g, Device::Cpu);
    if free.is_empty() {
        return Ok(SearchResult {
            latency_us: plan_latency(g, &cpu, t)?,
            placement: cpu,
            mode: SearchMode::Trivial,
            evaluated: 1,
            truncated: false,
        });
    }
    let mut s = Searcher {
        g,
        t,
        budget,
        evaluated: 0,
        best: (f64::INFINITY, cpu.clone()),
    };
    if free.len() <= EXHAUSTIVE_LIMIT {
        for mask in 0u64..(1u64 << free.len()) {
            let mut p = cpu.clone();
            for (bit, &i) in free.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    p.0[i] = Device::Gpu;
                }
            }
            if !s.offer(&p)? {
                return Ok(s.finish(SearchMode::Exhaustive, true));
            }
        }
        return Ok(s.finish(SearchMode::Exhaustive, false));
    }

    let gpu = Placement::all(g, Device::Gpu);
    for p in [&cpu, &gpu] {
        if !s.offer(p)? {
            return Ok(s.finish(SearchMode::Greedy, true));
        }
    }
    let mut current = s.best.1.clone();
    let kinds: Vec<OpKind> = g.kinds().into_iter().collect();
    for k in kinds {
        for d in [Device::Cpu, Device::Gpu] {
            let mut p = current.clone();
            for &i in free.iter().filter(|&&i| g.node(i).kind == k) {
                p.0[i] = d;
            }
            if !s.offer(&p)? {
                return Ok(s.finish(SearchMode::Greedy, true));
            }
            current = s.best.1.clone();
        }
    }
    loop {
        let before = s.best.0;
        for &i in &free {
            let mut p = s.best.1.clone();
            p.0[i] = match p.0[i] {
                Device::Cpu => Device::Gpu,
                Device::Gpu => Device::Cpu,
            };
            if !s.offer(&p)? {
                return Ok(s.finish(SearchMode::Greedy, true));
            }
        }
        if s.best.0 >= before {
            return Ok(s.finish(SearchMode::Greedy, false));
        }
    }
}

struct Searcher<'a> {
    g: &'a OpGraph,
    t: &'a TransferModel,
    budget: u64,
    evaluated: u64,
    best: (f64, Placement),
}

impl Searcher<'_> {
    /// Evaluates `p`; `false` once the budget is spent. Ties keep the
    /// earlier placement.
    fn offer(&mut self, p: &Placement) -> Result<bool> {
        if self.evaluated >= self.budget {
            return Ok(false);
        }
        self.evaluated += 1;
        let l = plan_latency(self.g, p, self.t)?;
        if l < self.best.0 {
            self.best = (l, p.clone());
        }
        Ok(true)
    }

    fn finish(self, mode: SearchMode, truncated: bool) -> SearchResult {
        SearchResult {
            latency_us: self.best.0,
            placement: self.best.1,
            mode,
            evaluated: self.evaluated,
            truncated,
        }
    }
}
