use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RouteId, RouteWeights};

/// Raw task coefficients ω over primary and self-auxiliary routes.
///
/// A route takes part in training iff its coefficient is positive.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoefficientJson", into = "CoefficientJson")]
pub struct CoefficientSet {
    weights: RouteWeights,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientJson {
    primary: BTreeMap<String, f64>,
    #[serde(default)]
    aux: BTreeMap<String, f64>,
}

impl TryFrom<CoefficientJson> for CoefficientSet {
    type Error = Error;

    fn try_from(json: CoefficientJson) -> Result<Self> {
        let mut set = CoefficientSet::default();
        for (key, w) in json.primary.iter().chain(&json.aux) {
            let route: RouteId = key.parse()?;
            let in_primary = json.primary.contains_key(key);
            if route.is_primary() != in_primary {
                return Err(Error::Config(format!("route `{key}` listed under the wrong section")));
            }
            set.set(route, *w)?;
        }
        Ok(set)
    }
}

impl From<CoefficientSet> for CoefficientJson {
    fn from(set: CoefficientSet) -> Self {
        let (primary, aux) = set.weights.into_iter().partition::<Vec<_>, _>(|(r, _)| r.is_primary());
        let text = |v: Vec<(RouteId, f64)>| v.into_iter().map(|(r, w)| (r.to_string(), w)).collect();
        CoefficientJson {
            primary: text(primary),
            aux: text(aux),
        }
    }
}

impl CoefficientSet {
    /// Every listed route at `value`.
    pub fn uniform(routes: impl IntoIterator<Item = RouteId>, value: f64) -> Result<Self> {
        let mut set = Self::default();
        for r in routes {
            set.set(r, value)?;
        }
        Ok(set)
    }

    pub fn set(&mut self, route: RouteId, value: f64) -> Result<()> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Config(format!(
                "coefficient for {route} must be finite and >= 0, got {value}"
            )));
        }
        if let RouteId::SelfAux { source, target } = route {
            if source == target {
                return Err(Error::Config(format!("self-auxiliary {route} needs distinct tasks")));
            }
        }
        self.weights.insert(route, value);
        Ok(())
    }

    pub fn get(&self, route: RouteId) -> Option<f64> {
        self.weights.get(&route).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RouteId, f64)> + '_ {
        self.weights.iter().map(|(&r, &w)| (r, w))
    }

    pub fn routes(&self) -> impl Iterator<Item = RouteId> + '_ {
        self.weights.keys().copied()
    }

    pub fn active_routes(&self) -> impl Iterator<Item = RouteId> + '_ {
        self.iter().filter(|(_, w)| *w > 0.0).map(|(r, _)| r)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_weights(&self) -> &RouteWeights {
        &self.weights
    }

    /// Target groups: each target task with the routes feeding its encoder.
    pub fn groups(&self) -> BTreeMap<usize, Vec<RouteId>> {
        let mut groups: BTreeMap<usize, Vec<RouteId>> = BTreeMap::new();
        for r in self.weights.keys() {
            groups.entry(r.target()).or_default().push(*r);
        }
        groups
    }
}

/// Coefficients normalised so every target group sums to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormalizedCoefficients(CoefficientSet);

impl NormalizedCoefficients {
    pub fn get(&self, route: RouteId) -> Option<f64> {
        self.0.get(route)
    }

    pub fn iter(&self) -> impl Iterator<Item = (RouteId, f64)> + '_ {
        self.0.iter()
    }

    pub fn as_set(&self) -> &CoefficientSet {
        &self.0
    }

    pub fn group_sum(&self, target: usize) -> f64 {
        self.iter().filter(|(r, _)| r.target() == target).map(|(_, w)| w).sum()
    }

    /// Weights of the routes that take part in training.
    pub fn active_weights(&self) -> RouteWeights {
        self.iter().filter(|(_, w)| *w > 0.0).collect()
    }
}

/// `ω̄_r = ω_r / Σ_{q ∈ group(target(r))} ω_q`.
pub fn normalize(coeffs: &CoefficientSet) -> Result<NormalizedCoefficients> {
    let mut out = CoefficientSet::default();
    for (target, routes) in coeffs.groups() {
        let sum: f64 = routes.iter().map(|r| coeffs.weights[r]).sum();
        if !(sum > 0.0) {
            return Err(Error::DegenerateGroup { target });
        }
        for r in routes {
            out.weights.insert(r, coeffs.weights[&r] / sum);
        }
    }
    Ok(NormalizedCoefficients(out))
}

/// `Σ_t (ω̄_t·L_t + Σ_{s≠t} ω̄_{s→t}·L_{s→t})`; zero-coefficient routes need no loss.
pub fn composite_train_loss(losses: &BTreeMap<RouteId, f64>, coeffs: &NormalizedCoefficients) -> Result<f64> {
    let mut total = 0.0;
    for (route, w) in coeffs.iter().filter(|(_, w)| *w > 0.0) {
        let l = losses
            .get(&route)
            .ok_or_else(|| Error::MissingLoss(route.to_string()))?;
        total += w * l;
    }
    Ok(total)
}

/// Unit primaries, no self-auxiliaries.
pub fn equal_weights(num_tasks: usize) -> CoefficientSet {
    CoefficientSet {
        weights: (0..num_tasks).map(|t| (RouteId::Primary(t), 1.0)).collect(),
    }
}

/// `ω^e · ω^w` on identical index sets, to be re-normalised before use.
pub fn saal_combined(omega_e: &CoefficientSet, omega_w: &NormalizedCoefficients) -> Result<CoefficientSet> {
    if !omega_e.routes().eq(omega_w.0.routes()) {
        return Err(Error::Config("combined strategy needs identical route sets".into()));
    }
    let weights = omega_e.iter().map(|(r, e)| (r, e * omega_w.0.weights[&r])).collect();
    Ok(CoefficientSet { weights })
}
