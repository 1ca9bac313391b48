use std::collections::BTreeMap;

use super::coeffs::{normalize, CoefficientSet};
use crate::datasets::Batch;
use crate::diffcore::{backward_from, forward, sgd_step, AdamConfig, AdamState, GradientMap, ParameterStore};
use crate::error::{Error, Result};
use crate::model::{LossGraph, MtlModel, RouteId, RouteWeights};
use crate::relationships::{RelationshipMatrix, RelationshipMethod};

/// Per-route unweighted losses read off an evaluated loss graph.
pub(crate) fn route_loss_values(
    lg: &LossGraph,
    eval: &crate::diffcore::Evaluation<'_>,
) -> Result<BTreeMap<RouteId, f64>> {
    lg.route_losses
        .iter()
        .map(|(&r, &node)| Ok((r, eval.value(node).item()?)))
        .collect()
}

/// Composite loss, its gradient and the per-route losses at `params`.
pub(crate) fn loss_and_gradient(
    model: &MtlModel,
    params: &ParameterStore,
    weights: &RouteWeights,
    batch: &Batch,
) -> Result<(f64, GradientMap, BTreeMap<RouteId, f64>)> {
    let lg = model.loss_graph(weights)?;
    let eval = forward(&lg.graph, params, &batch.inputs)?;
    let losses = route_loss_values(&lg, &eval)?;
    let grads = backward_from(&lg.graph, &eval)?;
    Ok((eval.output().item()?, grads, losses))
}

fn primary_weights(model: &MtlModel) -> RouteWeights {
    (0..model.num_tasks()).map(|t| (RouteId::Primary(t), 1.0)).collect()
}

/// Unweighted sum of primary-task losses; self-auxiliaries are excluded.
pub fn validation_loss(model: &MtlModel, val: &Batch) -> Result<f64> {
    if val.rows == 0 {
        return Err(Error::Config("validation batch is empty".into()));
    }
    let lg = model.loss_graph(&primary_weights(model))?;
    forward(&lg.graph, &model.params, &val.inputs)?.output().item()
}

/// ω_t = 1; ω_{s→t} = 1 iff `A_t^{s,t} > A_t^{t}`.
pub fn saal_enumeration(rel: &RelationshipMatrix) -> Result<CoefficientSet> {
    if rel.method != RelationshipMethod::Enumeration {
        return Err(Error::Config(format!(
            "enumeration strategy needs an enumeration matrix, got {}",
            rel.method
        )));
    }
    let detail = rel
        .enumeration
        .as_ref()
        .ok_or_else(|| Error::Config("enumeration matrix lacks baseline performances".into()))?;
    let n = rel.num_tasks();
    let mut set = CoefficientSet::default();
    for t in 0..n {
        set.set(RouteId::Primary(t), 1.0)?;
        let alone = detail.single[t];
        for s in (0..n).filter(|&s| s != t) {
            let paired =
                detail.pair[s][t].ok_or_else(|| Error::Config(format!("enumeration matrix missing pair {s}->{t}")))?;
            set.set(
                RouteId::SelfAux { source: s, target: t },
                if paired > alone { 1.0 } else { 0.0 },
            )?;
        }
    }
    Ok(set)
}

/// ∂L^train/∂ω_q of every route in `coeffs`, differentiated through the
/// normalisation: `(L_q − Σ_{r∈group} ω̄_r L_r) / S_t`.
fn coefficient_gradient(coeffs: &CoefficientSet, losses: &BTreeMap<RouteId, f64>) -> Result<BTreeMap<RouteId, f64>> {
    let mut out = BTreeMap::new();
    for (target, routes) in coeffs.groups() {
        let sum: f64 = routes.iter().map(|&r| coeffs.get(r).unwrap_or(0.0)).sum();
        if !(sum > 0.0) {
            return Err(Error::DegenerateGroup { target });
        }
        let loss = |r: &RouteId| losses.get(r).copied().ok_or_else(|| Error::MissingLoss(r.to_string()));
        let mut mean = 0.0;
        for r in &routes {
            mean += coeffs.get(*r).unwrap_or(0.0) / sum * loss(r)?;
        }
        for r in &routes {
            out.insert(*r, (loss(r)? - mean) / sum);
        }
    }
    Ok(out)
}

/// Finite-difference hypergradient `dL^val/dω` through one virtual SGD step.
///
/// θ′ = θ − η∇L^train(θ, ω̄); g = ∇L^val(θ′); θ± = θ ± ε·g;
/// `h_q = −η·(∂_q L^train(θ+) − ∂_q L^train(θ−)) / 2ε`.
/// Routes at ω = 0 are still evaluated at θ± so they can recover.
pub fn hypergradient(
    model: &MtlModel,
    coeffs: &CoefficientSet,
    train: &Batch,
    val: &Batch,
    eta: f64,
    epsilon: f64,
) -> Result<BTreeMap<RouteId, f64>> {
    if !(epsilon > 0.0) || !(eta > 0.0) {
        return Err(Error::Contract(format!(
            "eta and epsilon must be positive, got {eta} and {epsilon}"
        )));
    }
    let norm = normalize(coeffs)?;
    let (_, g_train, _) = loss_and_gradient(model, &model.params, &norm.active_weights(), train)?;
    let mut virt = model.params.clone();
    sgd_step(&mut virt, &g_train, eta)?;
    let (_, g_val, _) = loss_and_gradient(model, &virt, &primary_weights(model), val)?;
    drop(virt);

    let all_routes = model.loss_graph(norm.as_set().as_weights())?;
    let route_losses_at = |sign: f64| -> Result<BTreeMap<RouteId, f64>> {
        let mut shifted = model.params.clone();
        for (id, g) in &g_val {
            let p = shifted.get_mut(id).expect("gradient of a model parameter");
            for (w, d) in p.values_mut().iter_mut().zip(g.values()) {
                *w += sign * epsilon * d;
            }
        }
        route_loss_values(&all_routes, &forward(&all_routes.graph, &shifted, &train.inputs)?)
    };
    let plus = coefficient_gradient(coeffs, &route_losses_at(1.0)?)?;
    let minus = coefficient_gradient(coeffs, &route_losses_at(-1.0)?)?;
    let mut out = BTreeMap::new();
    for (r, p) in plus {
        let h = -eta * (p - minus[&r]) / (2.0 * epsilon);
        if !h.is_finite() {
            return Err(Error::Numeric(format!("non-finite hypergradient for route {r}")));
        }
        out.insert(r, h);
    }
    Ok(out)
}

/// Result of one coefficient update.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightUpdate {
    pub coefficients: CoefficientSet,
    pub hypergradient: BTreeMap<RouteId, f64>,
}

/// One Adam step on raw ω along the hypergradient, projected onto ω ≥ 0.
/// The model is never modified.
#[allow(clippy::too_many_arguments)]
pub fn saal_weight_update(
    model: &MtlModel,
    coeffs: &CoefficientSet,
    train: &Batch,
    val: &Batch,
    eta: f64,
    epsilon: f64,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<WeightUpdate> {
    let hg = hypergradient(model, coeffs, train, val, eta, epsilon)?;
    state.advance();
    let mut next = CoefficientSet::default();
    for (route, h) in &hg {
        let mut w = [coeffs.get(*route).unwrap_or(0.0)];
        state.update(&route.to_string(), &mut w, &[*h], cfg)?;
        next.set(*route, w[0].max(0.0))?;
    }
    Ok(WeightUpdate {
        coefficients: next,
        hypergradient: hg,
    })
}
