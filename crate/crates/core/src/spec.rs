//! Model-spec files: a JSON schema describing a model, its truncation,
//! the checks to run, and solver/simulation settings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::Label;
use crate::ctmc::{RateMatrix, SolveMethod, SolverOptions, State, StateSpace};
use crate::models::{
    self, CustomerType, Discipline, Kernel, ModelError, QueueModel, ReactingSystemSpec,
};
use crate::network::{self, NetworkError, NodeSpec, RoutingKernel};

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("{0} requires the network command")]
    NetworkOnly(String),
    #[error("the network command requires a jackson model, got {0}")]
    NotANetwork(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Root of a model-spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpecFile {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "TruncationSpec::is_default")]
    pub truncation: TruncationSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<String>,
    #[serde(default, skip_serializing_if = "SolverSpec::is_default")]
    pub solver: SolverSpec,
    #[serde(default, skip_serializing_if = "SimSpec::is_default")]
    pub sim: SimSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSpec {
    /// Single bound for one-dimensional spaces.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<u32>,
    /// Per-dimension bounds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<u32>>,
}

impl TruncationSpec {
    fn is_default(&self) -> bool {
        self.bound.is_none() && self.bounds.is_none()
    }

    pub fn single(&self, default: u32) -> u32 {
        self.bound
            .or_else(|| self.bounds.as_ref().and_then(|b| b.first().copied()))
            .unwrap_or(default)
    }

    pub fn multi(&self, n: usize, default: u32) -> Vec<u32> {
        match &self.bounds {
            Some(b) if b.len() == n => b.clone(),
            _ => vec![self.bound.unwrap_or(default); n],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_method() -> String {
    "auto".into()
}
fn default_tol() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    200_000
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec { method: default_method(), tol: default_tol(), max_iter: default_max_iter() }
    }
}

impl SolverSpec {
    fn is_default(&self) -> bool {
        self == &SolverSpec::default()
    }

    pub fn options(&self) -> Result<SolverOptions, SpecError> {
        let method = match self.method.as_str() {
            "auto" => SolveMethod::Auto,
            "direct" => SolveMethod::Direct,
            "power" => SolveMethod::Power,
            other => {
                return Err(SpecError::Schema {
                    path: "solver.method".into(),
                    reason: format!("unknown method {other:?} (expected auto, direct, power)"),
                })
            }
        };
        Ok(SolverOptions { method, tol: self.tol, max_iter: self.max_iter, ..Default::default() })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub departures: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub events: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
}

impl SimSpec {
    fn is_default(&self) -> bool {
        self == &SimSpec::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    BirthDeath {
        up: Vec<f64>,
        down: Vec<f64>,
    },
    Mm1 {
        lambda: f64,
        mu: f64,
    },
    Mms {
        lambda: f64,
        mu: f64,
        s: u32,
    },
    BatchService {
        lambda: f64,
        mu: f64,
        batch_dist: Vec<f64>,
        counting: String,
    },
    Symmetric {
        types: Vec<SymmetricTypeSpec>,
        discipline: String,
        n_max: usize,
    },
    Reacting {
        bounds: Vec<u32>,
        types: Vec<String>,
        alpha: BTreeMap<String, f64>,
        arrivals: BTreeMap<String, Vec<(usize, usize, f64)>>,
        departures: BTreeMap<String, Vec<(usize, usize, f64)>>,
        #[serde(default)]
        internal: Vec<(usize, usize, f64)>,
    },
    SelfReacting {
        bounds: Vec<u32>,
        types: Vec<String>,
        departures: BTreeMap<String, Vec<(usize, usize, f64)>>,
        routing: Vec<Vec<f64>>,
        arrivals: BTreeMap<String, Vec<(usize, usize, f64)>>,
        #[serde(default)]
        internal: Vec<(usize, usize, f64)>,
    },
    BatchMovement {
        bounds: Vec<u32>,
        types: Vec<Vec<u32>>,
        routing: Vec<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        phi: Option<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        psi: Option<Vec<f64>>,
    },
    Whittle {
        bounds: Vec<u32>,
        w: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        phi: Option<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        psi: Option<Vec<f64>>,
    },
    Jackson {
        lambda: Vec<f64>,
        mu: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        s: Option<Vec<u32>>,
        routing: Vec<Vec<f64>>,
    },
    Explicit {
        #[serde(skip_serializing_if = "Option::is_none")]
        bounds: Option<Vec<u32>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        states: Option<Vec<Vec<u32>>>,
        rates: Vec<(usize, usize, f64)>,
        #[serde(default)]
        family: BTreeMap<String, Vec<(usize, usize, f64)>>,
        #[serde(default)]
        gamma: BTreeMap<String, String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetricTypeSpec {
    pub name: String,
    pub alpha: f64,
    pub stage_rates: Vec<f64>,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::BirthDeath { .. } => "birth_death",
            ModelKind::Mm1 { .. } => "mm1",
            ModelKind::Mms { .. } => "mms",
            ModelKind::BatchService { .. } => "batch_service",
            ModelKind::Symmetric { .. } => "symmetric",
            ModelKind::Reacting { .. } => "reacting",
            ModelKind::SelfReacting { .. } => "self_reacting",
            ModelKind::BatchMovement { .. } => "batch_movement",
            ModelKind::Whittle { .. } => "whittle",
            ModelKind::Jackson { .. } => "jackson",
            ModelKind::Explicit { .. } => "explicit",
        }
    }
}

/// Parses and validates a spec file, reporting the JSON path of the first
/// offending field.
pub fn parse_spec(text: &str) -> Result<ModelSpecFile, SpecError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: ModelSpecFile =
        serde_path_to_error::deserialize(de).map_err(|e| SpecError::Schema {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
    spec.validate()?;
    Ok(spec)
}

pub fn print_spec(spec: &ModelSpecFile) -> String {
    serde_json::to_string_pretty(spec).expect("spec serializes")
}

impl ModelSpecFile {
    /// Field-level semantic validation with JSON paths in the messages.
    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |path: &str, reason: String| SpecError::Schema { path: path.into(), reason };
        let positive = |path: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(bad(path, format!("must be a positive finite rate, got {v}")))
            }
        };
        match &self.model {
            ModelKind::Mm1 { lambda, mu } => {
                positive("model.lambda", *lambda)?;
                positive("model.mu", *mu)?;
            }
            ModelKind::Mms { lambda, mu, s } => {
                positive("model.lambda", *lambda)?;
                positive("model.mu", *mu)?;
                if *s == 0 {
                    return Err(bad("model.s", "must be at least 1".into()));
                }
            }
            ModelKind::BatchService { lambda, mu, batch_dist, counting } => {
                positive("model.lambda", *lambda)?;
                positive("model.mu", *mu)?;
                if batch_dist.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(bad("model.batch_dist", "probabilities must be in [0, 1]".into()));
                }
                if counting != "all" && counting != "full_batches" {
                    return Err(bad(
                        "model.counting",
                        format!("unknown mode {counting:?} (expected all or full_batches)"),
                    ));
                }
            }
            ModelKind::BirthDeath { up, down } => {
                if up.iter().chain(down).any(|&r| !(r.is_finite() && r >= 0.0)) {
                    return Err(bad("model.up", "rates must be finite and >= 0".into()));
                }
            }
            ModelKind::Symmetric { types, discipline, .. } => {
                for (k, t) in types.iter().enumerate() {
                    positive(&format!("model.types[{k}].alpha"), t.alpha)?;
                    for (j, &eta) in t.stage_rates.iter().enumerate() {
                        positive(&format!("model.types[{k}].stage_rates[{j}]"), eta)?;
                    }
                }
                if discipline != "ps" && discipline != "lcfs" && discipline != "fcfs" {
                    return Err(bad(
                        "model.discipline",
                        format!("unknown discipline {discipline:?} (expected ps, lcfs, fcfs)"),
                    ));
                }
            }
            ModelKind::Jackson { lambda, mu, s, routing } => {
                if lambda.len() != mu.len() || routing.len() != mu.len() {
                    return Err(bad(
                        "model.routing",
                        "lambda, mu, routing must have one entry per node".into(),
                    ));
                }
                if let Some(s) = s {
                    if s.len() != mu.len() {
                        return Err(bad("model.s", "must have one entry per node".into()));
                    }
                }
                for (i, &m) in mu.iter().enumerate() {
                    positive(&format!("model.mu[{i}]"), m)?;
                }
                for (i, &l) in lambda.iter().enumerate() {
                    if !(l.is_finite() && l >= 0.0) {
                        return Err(bad(&format!("model.lambda[{i}]"), "must be >= 0".into()));
                    }
                }
            }
            ModelKind::Whittle { w, .. } => {
                for (i, &wi) in w.iter().enumerate() {
                    positive(&format!("model.w[{i}]"), wi)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn triples_to_rates(
    space: &std::sync::Arc<StateSpace>,
    triples: &[(usize, usize, f64)],
) -> RateMatrix {
    let mut q = RateMatrix::zeros(space.clone());
    for &(i, j, r) in triples {
        q.add(i, j, r);
    }
    q
}

fn triples_to_kernel(
    space: &std::sync::Arc<StateSpace>,
    triples: &[(usize, usize, f64)],
) -> Kernel {
    let mut k = Kernel::zeros(space.clone());
    for &(i, j, p) in triples {
        k.add(i, j, p);
    }
    k
}

/// Outcome of building a spec: a single labeled chain or a network.
pub enum Built {
    Single(QueueModel),
    Network { nodes: Vec<NodeSpec>, routing: RoutingKernel },
}

/// Builds the model described by the spec.
pub fn build(spec: &ModelSpecFile) -> Result<Built, SpecError> {
    let model = match &spec.model {
        ModelKind::BirthDeath { up, down } => models::build_birth_death(up, down)?,
        ModelKind::Mm1 { lambda, mu } => {
            models::build_mm1(*lambda, *mu, spec.truncation.single(128))?
        }
        ModelKind::Mms { lambda, mu, s } => {
            models::build_mms(*lambda, *mu, *s, spec.truncation.single(128))?
        }
        ModelKind::BatchService { lambda, mu, batch_dist, counting } => {
            let mode = if counting == "all" {
                models::DepartureCounting::All
            } else {
                models::DepartureCounting::FullBatches
            };
            models::build_batch_service(
                *lambda,
                *mu,
                batch_dist,
                mode,
                spec.truncation.single(128),
            )?
        }
        ModelKind::Symmetric { types, discipline, n_max } => {
            let params = models::SymmetricQueueParams {
                types: types
                    .iter()
                    .map(|t| CustomerType {
                        name: t.name.clone(),
                        alpha: t.alpha,
                        stage_rates: t.stage_rates.clone(),
                    })
                    .collect(),
                discipline: match discipline.as_str() {
                    "ps" => Discipline::ProcessorSharing,
                    "lcfs" => Discipline::PreemptiveLcfs,
                    _ => Discipline::Fcfs,
                },
            };
            models::build_symmetric_queue(&params, *n_max)?
        }
        ModelKind::Reacting { bounds, types, alpha, arrivals, departures, internal } => {
            let space = StateSpace::enumerate_box(bounds);
            let rss = ReactingSystemSpec {
                space: space.clone(),
                types: types.clone(),
                arrivals: types
                    .iter()
                    .map(|t| {
                        let triples = arrivals.get(t).map(|v| v.as_slice()).unwrap_or(&[]);
                        (t.clone(), triples_to_kernel(&space, triples))
                    })
                    .collect(),
                departures: types
                    .iter()
                    .map(|t| {
                        let triples = departures.get(t).map(|v| v.as_slice()).unwrap_or(&[]);
                        (t.clone(), triples_to_rates(&space, triples))
                    })
                    .collect(),
                internal: triples_to_rates(&space, internal),
            };
            models::build_reacting_system(&rss, alpha)?
        }
        ModelKind::SelfReacting { bounds, types, departures, routing, arrivals, internal } => {
            let space = StateSpace::enumerate_box(bounds);
            let srs = models::SelfReactingSpec {
                space: space.clone(),
                types: types.clone(),
                departures: types
                    .iter()
                    .map(|t| {
                        let triples = departures.get(t).map(|v| v.as_slice()).unwrap_or(&[]);
                        triples_to_rates(&space, triples)
                    })
                    .collect(),
                routing: models::Routing::Global(routing.clone()),
                arrivals: types
                    .iter()
                    .map(|t| {
                        let triples = arrivals.get(t).map(|v| v.as_slice()).unwrap_or(&[]);
                        triples_to_kernel(&space, triples)
                    })
                    .collect(),
                internal: triples_to_rates(&space, internal),
            };
            models::build_self_reacting(&srs)?
        }
        ModelKind::BatchMovement { bounds, types, routing, phi, psi } => {
            let space = StateSpace::enumerate_box(bounds);
            let bm = models::BatchMovementSpec {
                bounds: bounds.clone(),
                types: types.clone(),
                routing: routing.clone(),
                phi: phi.clone().unwrap_or_else(|| vec![1.0; space.len()]),
                psi: psi.clone(),
            };
            models::build_batch_movement_network(&bm)?.0
        }
        ModelKind::Whittle { bounds, w, phi, psi } => {
            let space = StateSpace::enumerate_box(bounds);
            let ws = models::WhittleSpec {
                bounds: bounds.clone(),
                w: w.clone(),
                phi: phi.clone().unwrap_or_else(|| vec![1.0; space.len()]),
                psi: psi.clone().unwrap_or_else(|| vec![1.0; space.len()]),
            };
            models::build_whittle(&ws)?.0
        }
        ModelKind::Jackson { lambda, mu, s, routing } => {
            let servers = s.clone().unwrap_or_else(|| vec![1; mu.len()]);
            let bounds = spec.truncation.multi(mu.len(), 40);
            let (nodes, routing) =
                network::build_jackson(lambda, mu, &servers, routing, &bounds)?;
            return Ok(Built::Network { nodes, routing });
        }
        ModelKind::Explicit { bounds, states, rates, family, gamma } => {
            let space = match (bounds, states) {
                (Some(b), _) => StateSpace::enumerate_box(b),
                (None, Some(list)) => {
                    let dim = list.first().map(|s| s.len()).unwrap_or(0);
                    StateSpace::from_states(
                        dim,
                        list.iter().map(|c| State(c.clone())).collect(),
                    )
                    .map_err(ModelError::from)?
                }
                (None, None) => {
                    return Err(SpecError::Schema {
                        path: "model".into(),
                        reason: "explicit model needs bounds or states".into(),
                    })
                }
            };
            let q = triples_to_rates(&space, rates);
            let parts: BTreeMap<Label, RateMatrix> = family
                .iter()
                .map(|(name, triples)| (Label::new(name.clone()), triples_to_rates(&space, triples)))
                .collect();
            let gamma_map: BTreeMap<Label, Label> = if gamma.is_empty() {
                parts.keys().map(|l| (l.clone(), l.clone())).collect()
            } else {
                gamma
                    .iter()
                    .map(|(a, b)| (Label::new(a.clone()), Label::new(b.clone())))
                    .collect()
            };
            let fam = crate::balance::SubTransitionFamily::new(q, parts, gamma_map)
                .map_err(ModelError::from)?;
            QueueModel::new(space, fam)
        }
    };
    Ok(Built::Single(model))
}
