//! Task-coefficient machinery: composite losses, normalisation, the three
//! self-auxiliary strategies and the baseline weighting/gradient methods.
//!
//! Every training strategy implements [`Strategy`] and is created by name
//! through a [`StrategyRegistry`].

mod baselines;
mod coeffs;
mod saal;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use baselines::{
    dwa_weights, pcgrad, pcgrad_project, uncertainty_log_var_gradient, uncertainty_loss_weights, uncertainty_weights,
};
pub use coeffs::{
    composite_train_loss, equal_weights, normalize, saal_combined, CoefficientSet, NormalizedCoefficients,
};
pub(crate) use saal::loss_and_gradient;
pub use saal::{hypergradient, saal_enumeration, saal_weight_update, validation_loss, WeightUpdate};

use crate::datasets::Batch;
use crate::diffcore::{AdamConfig, AdamState, GradientMap, Partition};
use crate::error::{Error, Result};
use crate::model::{MtlModel, RouteId, RouteWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Equal,
    Uncertainty,
    Dwa,
    Pcgrad,
    SaalE,
    SaalW,
    SaalEw,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Equal,
        StrategyKind::Uncertainty,
        StrategyKind::Dwa,
        StrategyKind::Pcgrad,
        StrategyKind::SaalE,
        StrategyKind::SaalW,
        StrategyKind::SaalEw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Equal => "equal",
            StrategyKind::Uncertainty => "uncertainty",
            StrategyKind::Dwa => "dwa",
            StrategyKind::Pcgrad => "pcgrad",
            StrategyKind::SaalE => "saal_e",
            StrategyKind::SaalW => "saal_w",
            StrategyKind::SaalEw => "saal_ew",
        }
    }

    /// Whether the strategy consumes enumeration coefficients.
    pub fn needs_enumeration(self) -> bool {
        matches!(self, StrategyKind::SaalE | StrategyKind::SaalEw)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Everything a strategy sees for one training batch.
pub struct StepContext<'a> {
    pub model: &'a MtlModel,
    pub train: &'a Batch,
    /// Next batch of the cyclic validation iterator.
    pub val: &'a Batch,
    /// Current model learning rate.
    pub eta: f64,
    /// Stream for randomised methods (PCGrad ordering).
    pub rng: &'a mut ChaCha8Rng,
}

/// Gradient to commit for one batch plus the losses that produced it.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: GradientMap,
    pub route_losses: BTreeMap<RouteId, f64>,
}

pub trait Strategy: Send {
    fn name(&self) -> &str;

    /// Computes the parameter gradient for one batch, updating any internal
    /// coefficient state first.
    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepOutput>;

    /// Called after each epoch with the mean training loss of every route.
    fn end_epoch(&mut self, _mean_losses: &BTreeMap<RouteId, f64>) -> Result<()> {
        Ok(())
    }

    /// Current raw coefficients, for logging.
    fn coefficients(&self) -> CoefficientSet;
}

/// What a factory needs to build a strategy for a run.
#[derive(Clone, Debug)]
pub struct StrategyInit {
    pub num_tasks: usize,
    /// Boolean coefficients from the enumeration oracle.
    pub enumeration: Option<CoefficientSet>,
    pub omega_lr: f64,
    pub dwa_temperature: f64,
}

impl StrategyInit {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            enumeration: None,
            omega_lr: 1e-4,
            dwa_temperature: 2.0,
        }
    }

    fn all_routes(&self) -> Vec<RouteId> {
        let t = self.num_tasks;
        let prim = (0..t).map(RouteId::Primary);
        let aux = (0..t).flat_map(|target| {
            (0..t)
                .filter(move |&s| s != target)
                .map(move |source| RouteId::SelfAux { source, target })
        });
        prim.chain(aux).collect()
    }

    fn enumeration(&self) -> Result<&CoefficientSet> {
        let e = self
            .enumeration
            .as_ref()
            .ok_or_else(|| Error::Config("strategy needs enumeration coefficients".into()))?;
        let expected: std::collections::BTreeSet<RouteId> = self.all_routes().into_iter().collect();
        if !e.routes().eq(expected.iter().copied()) {
            return Err(Error::Config(format!(
                "enumeration coefficients must cover all {} routes",
                expected.len()
            )));
        }
        Ok(e)
    }
}

pub type StrategyFactory = Box<dyn Fn(&StrategyInit) -> Result<Box<dyn Strategy>> + Send + Sync>;

/// Name → factory table for training strategies.
pub struct StrategyRegistry {
    factories: BTreeMap<String, StrategyFactory>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding every [`StrategyKind`].
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        for kind in StrategyKind::ALL {
            r.register(kind.name(), move |init| builtin_strategy(kind, init));
        }
        r
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn(&StrategyInit) -> Result<Box<dyn Strategy>> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.into(), Box::new(factory));
    }

    pub fn create(&self, name: &str, init: &StrategyInit) -> Result<Box<dyn Strategy>> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{name}`")))?;
        f(init)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

fn builtin_strategy(kind: StrategyKind, init: &StrategyInit) -> Result<Box<dyn Strategy>> {
    if init.num_tasks == 0 {
        return Err(Error::Config("strategy needs at least one task".into()));
    }
    Ok(match kind {
        StrategyKind::Equal => Box::new(Fixed::new(kind, equal_weights(init.num_tasks))?),
        StrategyKind::SaalE => Box::new(Fixed::new(kind, init.enumeration()?.clone())?),
        StrategyKind::Uncertainty => Box::new(Uncertainty {
            log_vars: vec![0.0; init.num_tasks],
        }),
        StrategyKind::Dwa => Box::new(Dwa {
            num_tasks: init.num_tasks,
            temperature: init.dwa_temperature,
            history: Vec::new(),
            current: equal_weights(init.num_tasks),
        }),
        StrategyKind::Pcgrad => Box::new(PcGrad {
            num_tasks: init.num_tasks,
        }),
        StrategyKind::SaalW => Box::new(SaalWeighted::new(
            kind,
            CoefficientSet::uniform(init.all_routes(), 1.0)?,
            None,
            init,
        )),
        StrategyKind::SaalEw => {
            let mask = init.enumeration()?.clone();
            let omega = CoefficientSet::uniform(mask.active_routes(), 1.0)?;
            Box::new(SaalWeighted::new(kind, omega, Some(mask), init))
        }
    })
}

/// Constant coefficients: equal weighting and the enumeration strategy.
struct Fixed {
    kind: StrategyKind,
    raw: CoefficientSet,
    weights: RouteWeights,
}

impl Fixed {
    fn new(kind: StrategyKind, raw: CoefficientSet) -> Result<Self> {
        let weights = normalize(&raw)?.active_weights();
        Ok(Self { kind, raw, weights })
    }
}

impl Strategy for Fixed {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepOutput> {
        let (loss, grads, route_losses) = loss_and_gradient(ctx.model, &ctx.model.params, &self.weights, ctx.train)?;
        Ok(StepOutput {
            loss,
            grads,
            route_losses,
        })
    }

    fn coefficients(&self) -> CoefficientSet {
        self.raw.clone()
    }
}

struct Uncertainty {
    log_vars: Vec<f64>,
}

impl Strategy for Uncertainty {
    fn name(&self) -> &str {
        StrategyKind::Uncertainty.name()
    }

    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepOutput> {
        let weights: RouteWeights = uncertainty_loss_weights(&self.log_vars)
            .into_iter()
            .enumerate()
            .map(|(t, w)| (RouteId::Primary(t), w))
            .collect();
        let (_, grads, route_losses) = loss_and_gradient(ctx.model, &ctx.model.params, &weights, ctx.train)?;
        let losses: Vec<f64> = (0..self.log_vars.len())
            .map(|t| route_losses[&RouteId::Primary(t)])
            .collect();
        let loss = uncertainty_weights(&losses, &self.log_vars)?;
        let grad = uncertainty_log_var_gradient(&losses, &self.log_vars);
        for (s, g) in self.log_vars.iter_mut().zip(grad) {
            *s -= ctx.eta * g;
        }
        if self.log_vars.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("uncertainty log-variance diverged".into()));
        }
        Ok(StepOutput {
            loss,
            grads,
            route_losses,
        })
    }

    fn coefficients(&self) -> CoefficientSet {
        let mut set = CoefficientSet::default();
        for (t, w) in uncertainty_loss_weights(&self.log_vars).into_iter().enumerate() {
            set.set(RouteId::Primary(t), w)
                .expect("exp weights are finite and positive");
        }
        set
    }
}

struct Dwa {
    num_tasks: usize,
    temperature: f64,
    history: Vec<Vec<f64>>,
    current: CoefficientSet,
}

impl Strategy for Dwa {
    fn name(&self) -> &str {
        StrategyKind::Dwa.name()
    }

    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepOutput> {
        let (loss, grads, route_losses) =
            loss_and_gradient(ctx.model, &ctx.model.params, self.current.as_weights(), ctx.train)?;
        Ok(StepOutput {
            loss,
            grads,
            route_losses,
        })
    }

    fn end_epoch(&mut self, mean_losses: &BTreeMap<RouteId, f64>) -> Result<()> {
        let row = (0..self.num_tasks)
            .map(|t| {
                mean_losses
                    .get(&RouteId::Primary(t))
                    .copied()
                    .ok_or_else(|| Error::MissingLoss(t.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.history.push(row);
        self.current = dwa_weights(&self.history, self.num_tasks, self.temperature)?;
        Ok(())
    }

    fn coefficients(&self) -> CoefficientSet {
        self.current.clone()
    }
}

struct PcGrad {
    num_tasks: usize,
}

impl Strategy for PcGrad {
    fn name(&self) -> &str {
        StrategyKind::Pcgrad.name()
    }

    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepOutput> {
        let mut shared = Vec::with_capacity(self.num_tasks);
        let mut grads = GradientMap::new();
        let mut route_losses = BTreeMap::new();
        let mut loss = 0.0;
        for t in 0..self.num_tasks {
            let weights = RouteWeights::from([(RouteId::Primary(t), 1.0)]);
            let (l, g, rl) = loss_and_gradient(ctx.model, &ctx.model.params, &weights, ctx.train)?;
            loss += l;
            route_losses.extend(rl);
            let (sh, own): (GradientMap, GradientMap) = g
                .into_iter()
                .partition(|(id, _)| ctx.model.params.partition(id) == Some(Partition::Shared));
            shared.push(sh);
            grads.extend(own);
        }
        grads.extend(pcgrad(&shared, ctx.rng)?);
        Ok(StepOutput {
            loss,
            grads,
            route_losses,
        })
    }

    fn coefficients(&self) -> CoefficientSet {
        equal_weights(self.num_tasks)
    }
}

/// Hypergradient-driven coefficients (`saal_w`), optionally restricted to
/// the routes enabled by enumeration (`saal_ew`).
///
/// For `saal_ew`, `ω^e·normalize(ω^w)` re-normalised equals `ω^w`
/// normalised over the enabled routes only, so `omega` holds just those.
struct SaalWeighted {
    kind: StrategyKind,
    omega: CoefficientSet,
    mask: Option<CoefficientSet>,
    adam: AdamState,
    cfg: AdamConfig,
    warned_primary: bool,
}

impl SaalWeighted {
    fn new(kind: StrategyKind, omega: CoefficientSet, mask: Option<CoefficientSet>, init: &StrategyInit) -> Self {
        Self {
            kind,
            omega,
            mask,
            adam: AdamState::new(),
            cfg: AdamConfig::with_lr(init.omega_lr),
            warned_primary: false,
        }
    }
}

impl Strategy for SaalWeighted {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn step(&mut self, ctx: StepContext<'_>) -> Result<StepOutput> {
        let update = saal_weight_update(
            ctx.model,
            &self.omega,
            ctx.train,
            ctx.val,
            ctx.eta,
            ctx.eta,
            &mut self.adam,
            &self.cfg,
        )?;
        self.omega = update.coefficients;
        if !self.warned_primary {
            if let Some((r, _)) = self.omega.iter().find(|(r, w)| r.is_primary() && *w == 0.0) {
                log::warn!("{}: coefficient of primary task {r} reached zero", self.kind);
                self.warned_primary = true;
            }
        }
        let weights = normalize(&self.omega)?.active_weights();
        let (loss, grads, route_losses) = loss_and_gradient(ctx.model, &ctx.model.params, &weights, ctx.train)?;
        Ok(StepOutput {
            loss,
            grads,
            route_losses,
        })
    }

    fn coefficients(&self) -> CoefficientSet {
        match &self.mask {
            None => self.omega.clone(),
            Some(mask) => {
                let mut out = mask.clone();
                for (r, w) in self.omega.iter() {
                    out.set(r, w).expect("coefficients stay non-negative");
                }
                for r in mask
                    .routes()
                    .filter(|r| self.omega.get(*r).is_none())
                    .collect::<Vec<_>>()
                {
                    out.set(r, 0.0).expect("zero is valid");
                }
                out
            }
        }
    }
}
