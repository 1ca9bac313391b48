//! Partitioned multi-task networks.
//!
//! Parameters split into a shared encoder trunk, per-task encoder tails and
//! decoders, and one independent decoder per self-auxiliary route. A route
//! `s->t` feeds the input through task `t`'s encoder and predicts task `s`'s
//! labels, so its gradient reaches `shared` and `task:t` parameters but never
//! `task:s`.

mod checkpoint;
mod spec;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile};
pub use spec::{Activation, ArchitectureConfig, LossKind, TaskKind, TaskSpec};

use crate::diffcore::{evaluate, Graph, Inputs, NodeId, ParamId, ParameterStore, Partition, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Identifies a training route: a primary task or a self-auxiliary clone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RouteId {
    Primary(usize),
    SelfAux { source: usize, target: usize },
}

impl RouteId {
    /// Task whose data and labels the route consumes.
    pub fn source(self) -> usize {
        match self {
            RouteId::Primary(t) => t,
            RouteId::SelfAux { source, .. } => source,
        }
    }

    /// Task whose encoder the route runs through; also its normalisation group.
    pub fn target(self) -> usize {
        match self {
            RouteId::Primary(t) => t,
            RouteId::SelfAux { target, .. } => target,
        }
    }

    pub fn is_primary(self) -> bool {
        matches!(self, RouteId::Primary(_))
    }
}

impl fmt::Display for RouteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteId::Primary(t) => write!(f, "{t}"),
            RouteId::SelfAux { source, target } => write!(f, "{source}->{target}"),
        }
    }
}

impl std::str::FromStr for RouteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid route `{s}`"));
        match s.split_once("->") {
            Some((a, b)) => Ok(RouteId::SelfAux {
                source: a.trim().parse().map_err(|_| bad())?,
                target: b.trim().parse().map_err(|_| bad())?,
            }),
            None => s.trim().parse().map(RouteId::Primary).map_err(|_| bad()),
        }
    }
}

impl Serialize for RouteId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RouteId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Route {
    pub id: RouteId,
    pub source_task: usize,
    pub target_task: usize,
}

impl From<RouteId> for Route {
    fn from(id: RouteId) -> Self {
        Route {
            id,
            source_task: id.source(),
            target_task: id.target(),
        }
    }
}

/// Per-route loss weights consumed by a composite loss graph.
pub type RouteWeights = BTreeMap<RouteId, f64>;

/// A loss graph plus the node holding each route's unweighted loss.
pub struct LossGraph {
    pub graph: Graph,
    pub route_losses: BTreeMap<RouteId, NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtlModel {
    arch: ArchitectureConfig,
    tasks: Vec<TaskSpec>,
    pub params: ParameterStore,
    routes: BTreeMap<RouteId, Vec<ParamId>>,
}

fn dense_ids(prefix: &str) -> (ParamId, ParamId) {
    (ParamId::new(format!("{prefix}/w")), ParamId::new(format!("{prefix}/b")))
}

fn dense(g: &mut Graph, h: NodeId, prefix: &str) -> NodeId {
    let (w, b) = dense_ids(prefix);
    let w = g.param(w);
    let b = g.param(b);
    let z = g.matmul(h, w);
    g.add(z, b)
}

fn enc_prefix(arch: &ArchitectureConfig, target: usize, layer: usize) -> String {
    if layer < arch.shared_depth {
        format!("shared/enc{layer}")
    } else {
        format!("task{target}/enc{layer}")
    }
}

fn dec_prefix(route: RouteId, layer: usize) -> String {
    match route {
        RouteId::Primary(t) => format!("task{t}/dec{layer}"),
        RouteId::SelfAux { source, target } => format!("aux{source}-{target}/dec{layer}"),
    }
}

fn init_dense(
    store: &mut ParameterStore,
    seed: u64,
    prefix: &str,
    role: &str,
    fan_in: usize,
    fan_out: usize,
    partition: Partition,
) -> Result<()> {
    let (w_id, b_id) = dense_ids(prefix);
    let mut rng = rng::stream(seed, &format!("init/{role}"));
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    store.insert(w_id, Tensor::matrix(fan_in, fan_out, w)?, partition)?;
    store.insert(b_id, Tensor::zeros(vec![fan_out]), partition)?;
    Ok(())
}

/// Builds a model with `T` primary and `T·(T−1)` self-auxiliary routes.
///
/// Initialisation streams are keyed by task *names*, so the same task gets
/// identical weights in a single-task and a multi-task model built from
/// the same seed.
pub fn build_model(arch: &ArchitectureConfig, tasks: &[TaskSpec], seed: u64) -> Result<MtlModel> {
    arch.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("at least one task is required".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.id != i {
            return Err(Error::Config(format!(
                "task ids must be dense: position {i} has id {}",
                t.id
            )));
        }
        t.validate()?;
    }
    let mut params = ParameterStore::new();
    let mut routes = BTreeMap::new();
    let width = arch.hidden_width;
    let enc_in = |layer: usize| if layer == 0 { arch.input_dim } else { width };
    let dec_in = if arch.total_encoder_depth == 0 {
        arch.input_dim
    } else {
        width
    };

    for layer in 0..arch.shared_depth {
        let prefix = format!("shared/enc{layer}");
        init_dense(
            &mut params,
            seed,
            &prefix,
            &prefix,
            enc_in(layer),
            width,
            Partition::Shared,
        )?;
    }
    for task in tasks {
        for layer in arch.shared_depth..arch.total_encoder_depth {
            let prefix = enc_prefix(arch, task.id, layer);
            let role = format!("task:{}/enc{layer}", task.name);
            init_dense(
                &mut params,
                seed,
                &prefix,
                &role,
                enc_in(layer),
                width,
                Partition::Task(task.id),
            )?;
        }
    }

    let mut route_ids: Vec<RouteId> = tasks.iter().map(|t| RouteId::Primary(t.id)).collect();
    for target in tasks {
        for source in tasks.iter().filter(|s| s.id != target.id) {
            route_ids.push(RouteId::SelfAux {
                source: source.id,
                target: target.id,
            });
        }
    }

    for &route in &route_ids {
        let source = &tasks[route.source()];
        let target = &tasks[route.target()];
        let (partition, role_base) = match route {
            RouteId::Primary(t) => (Partition::Task(t), format!("task:{}", source.name)),
            RouteId::SelfAux { source: s, target: t } => (
                Partition::SelfAux { source: s, target: t },
                format!("aux:{}->{}", source.name, target.name),
            ),
        };
        for layer in 0..arch.decoder_depth {
            let fan_in = if layer == 0 { dec_in } else { width };
            let fan_out = if layer + 1 == arch.decoder_depth {
                source.output_dim()
            } else {
                width
            };
            let prefix = dec_prefix(route, layer);
            let role = format!("{role_base}/dec{layer}");
            init_dense(&mut params, seed, &prefix, &role, fan_in, fan_out, partition)?;
        }
        let mut path = Vec::new();
        for layer in 0..arch.total_encoder_depth {
            let (w, b) = dense_ids(&enc_prefix(arch, target.id, layer));
            path.extend([w, b]);
        }
        for layer in 0..arch.decoder_depth {
            let (w, b) = dense_ids(&dec_prefix(route, layer));
            path.extend([w, b]);
        }
        routes.insert(route, path);
    }

    Ok(MtlModel {
        arch: arch.clone(),
        tasks: tasks.to_vec(),
        params,
        routes,
    })
}

impl MtlModel {
    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn route_ids(&self) -> impl Iterator<Item = RouteId> + '_ {
        self.routes.keys().copied()
    }

    pub fn self_aux_routes(&self) -> Vec<RouteId> {
        self.routes.keys().copied().filter(|r| !r.is_primary()).collect()
    }

    /// Ordered parameter path of a route.
    pub fn route_params(&self, route: RouteId) -> Result<&[ParamId]> {
        self.routes
            .get(&route)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownRoute(route.to_string()))
    }

    pub fn route(&self, id: RouteId) -> Result<Route> {
        self.route_params(id)?;
        Ok(id.into())
    }

    pub(crate) fn from_parts(arch: ArchitectureConfig, tasks: Vec<TaskSpec>, params: ParameterStore) -> Result<Self> {
        let template = build_model(&arch, &tasks, 0)?;
        let mut routes = template.routes;
        // A stripped model carries no self-aux decoders; drop those routes.
        routes.retain(|_, path| path.iter().all(|id| params.contains(id)));
        for (id, entry) in template.params.iter() {
            if let Some(p) = params.get(id) {
                if p.shape() != entry.tensor.shape() || params.partition(id) != Some(entry.partition) {
                    return Err(Error::Config(format!("parameter {id} does not match the architecture")));
                }
            } else if entry.partition == Partition::Shared || matches!(entry.partition, Partition::Task(_)) {
                return Err(Error::Config(format!("missing parameter {id}")));
            }
        }
        Ok(MtlModel {
            arch,
            tasks,
            params,
            routes,
        })
    }

    /// Encoder output node of `target` on input node `x`. `cache` memoises
    /// encoder outputs per target task, `shared` the shared trunk.
    fn encoder_output(
        &self,
        g: &mut Graph,
        x: NodeId,
        target: usize,
        cache: &mut BTreeMap<usize, NodeId>,
        shared: &mut Option<NodeId>,
    ) -> NodeId {
        if let Some(&node) = cache.get(&target) {
            return node;
        }
        let act = self.arch.activation;
        let trunk = match *shared {
            Some(node) => node,
            None => {
                let mut h = x;
                for layer in 0..self.arch.shared_depth {
                    let z = dense(g, h, &format!("shared/enc{layer}"));
                    h = act.apply(g, z);
                }
                *shared = Some(h);
                h
            }
        };
        let mut h = trunk;
        for layer in self.arch.shared_depth..self.arch.total_encoder_depth {
            let z = dense(g, h, &enc_prefix(&self.arch, target, layer));
            h = act.apply(g, z);
        }
        cache.insert(target, h);
        h
    }

    /// Encoder + decoder for one route on input node `x`, returning the
    /// prediction node.
    fn route_output(
        &self,
        g: &mut Graph,
        x: NodeId,
        route: RouteId,
        cache: &mut BTreeMap<usize, NodeId>,
        shared: &mut Option<NodeId>,
    ) -> Result<NodeId> {
        self.route_params(route)?;
        let act = self.arch.activation;
        let encoded = self.encoder_output(g, x, route.target(), cache, shared);
        let mut h = encoded;
        for layer in 0..self.arch.decoder_depth {
            h = dense(g, h, &dec_prefix(route, layer));
            if layer + 1 < self.arch.decoder_depth {
                h = act.apply(g, h);
            }
        }
        Ok(h)
    }

    /// Prediction graph for one route: input `x`, output predictions shaped
    /// by the source task's head.
    pub fn prediction_graph(&self, route: RouteId) -> Result<Graph> {
        let mut g = Graph::new();
        let x = g.input("x");
        let out = self.route_output(&mut g, x, route, &mut BTreeMap::new(), &mut None)?;
        g.set_output(out);
        Ok(g)
    }

    /// Composite loss graph `Σ_r w_r · L_r` over the given routes.
    ///
    /// Inputs are `x` and `y{task}` labels. Encoder activations are shared
    /// between routes with the same target.
    pub fn loss_graph(&self, weights: &RouteWeights) -> Result<LossGraph> {
        if weights.is_empty() {
            return Err(Error::Contract("loss graph needs at least one route".into()));
        }
        let mut g = Graph::new();
        let x = g.input("x");
        let mut labels: BTreeMap<usize, NodeId> = BTreeMap::new();
        let mut cache = BTreeMap::new();
        let mut shared = None;
        let mut route_losses = BTreeMap::new();
        let mut total: Option<NodeId> = None;
        for (&route, &w) in weights {
            let pred = self.route_output(&mut g, x, route, &mut cache, &mut shared)?;
            let src = route.source();
            let y = *labels.entry(src).or_insert_with(|| g.input(label_key(src)));
            let loss = match self.tasks[src].loss() {
                LossKind::MeanSquaredError => g.mse(pred, y),
                LossKind::SoftmaxCrossEntropy => g.softmax_cross_entropy(pred, y),
            };
            route_losses.insert(route, loss);
            let weighted = g.scale(loss, w);
            total = Some(match total {
                Some(acc) => g.add(acc, weighted),
                None => weighted,
            });
        }
        g.set_output(total.expect("non-empty"));
        Ok(LossGraph { graph: g, route_losses })
    }

    /// Predictions of `route` on `x` of shape `(batch, input_dim)`.
    pub fn forward(&self, route: RouteId, x: &Tensor) -> Result<Tensor> {
        let (_, cols) = x.dims2()?;
        if x.shape().len() != 2 || cols != self.arch.input_dim {
            return Err(Error::Dimension(format!(
                "expected (batch, {}) input, got {:?}",
                self.arch.input_dim,
                x.shape()
            )));
        }
        let g = self.prediction_graph(route)?;
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), x.clone());
        evaluate(&g, &self.params, &inputs)
    }

    /// Encoder features `(batch, hidden_width)` of `task` on `x`.
    pub fn encode(&self, task: usize, x: &Tensor) -> Result<Tensor> {
        if task >= self.tasks.len() {
            return Err(Error::UnknownRoute(RouteId::Primary(task).to_string()));
        }
        let mut g = Graph::new();
        let xn = g.input("x");
        let h = self.encoder_output(&mut g, xn, task, &mut BTreeMap::new(), &mut None);
        g.set_output(h);
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), x.clone());
        evaluate(&g, &self.params, &inputs)
    }

    /// Inference path of a primary task; never touches self-aux parameters.
    pub fn predict_primary(&self, task: usize, x: &Tensor) -> Result<Tensor> {
        if task >= self.tasks.len() {
            return Err(Error::UnknownRoute(RouteId::Primary(task).to_string()));
        }
        self.forward(RouteId::Primary(task), x)
    }

    /// Copy without self-auxiliary decoders or routes: the deployable model.
    pub fn without_self_aux(&self) -> MtlModel {
        let mut out = self.clone();
        out.params.retain(|p| !matches!(p, Partition::SelfAux { .. }));
        out.routes.retain(|r, _| r.is_primary());
        out
    }

    /// Scalar parameter count of the inference model (shared + task-specific).
    pub fn inference_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, e)| matches!(e.partition, Partition::Shared | Partition::Task(_)))
            .map(|(_, e)| e.tensor.len())
            .sum()
    }
}

pub fn label_key(task: usize) -> String {
    format!("y{task}")
}
