//! Machine-readable reports for the command-line driver.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::balance::{
    check_gamma_reversibility, quasi_reversible, Label, MembershipPredicate,
};
use crate::ctmc::{stationary_residual, Measure};
use crate::models::QueueModel;
use crate::network::{verify_product_form, TrafficOptions};
use crate::reversal::{is_reversible, kelly_check, reverse, KellyVerdict};
use crate::sim::{simulate, BurkeConfig, RngStream, StopRule};
use crate::spec::{build, Built, ModelSpecFile, SpecError};

pub const SCHEMA_VERSION: u32 = 1;

/// Exit codes of the command driver.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INPUT_ERROR: i32 = 2;
pub const EXIT_SOLVER_FAILURE: i32 = 3;

#[derive(Clone, Debug, Serialize)]
pub struct CheckVerdict {
    pub name: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    pub tol: f64,
    pub detail: Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub model_kind: String,
    pub spec_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub checks: Vec<CheckVerdict>,
    pub artifacts: Value,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    Reverse,
    Check,
    Network,
    Simulate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Reverse => "reverse",
            Command::Check => "check",
            Command::Network => "network",
            Command::Simulate => "simulate",
        }
    }
}

/// Overrides from the command line; `None` falls back to the spec file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<std::path::PathBuf>,
}

pub fn spec_hash(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    format!("{:x}", hasher.finalize())
}

fn pi_rows(model_space: &crate::ctmc::StateSpace, pi: &Measure) -> Value {
    let rows: Vec<Value> = (0..pi.len())
        .map(|i| json!({ "state": model_space.state(i).coords(), "weight": pi.weight(i) }))
        .collect();
    Value::Array(rows)
}

fn write_pi_csv(
    dir: &Path,
    space: &crate::ctmc::StateSpace,
    pi: &Measure,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(dir.join("pi.csv"))?;
    writeln!(f, "state,weight")?;
    for i in 0..pi.len() {
        writeln!(f, "{},{:.17e}", space.state(i), pi.weight(i))?;
    }
    Ok(())
}

/// Runs one command against a parsed spec and produces the report plus the
/// process exit code.
pub fn run(
    spec: &ModelSpecFile,
    spec_text: &str,
    command: Command,
    overrides: &Overrides,
) -> (Report, i32) {
    let mut report = Report {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.name().to_string(),
        model_kind: spec.model.name().to_string(),
        spec_sha256: spec_hash(spec_text),
        seed: None,
        checks: Vec::new(),
        artifacts: Value::Null,
        pass: true,
    };
    let code = match run_inner(spec, command, overrides, &mut report) {
        Ok(()) => {
            if report.pass {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            report.pass = false;
            report.artifacts = json!({ "error": e.to_string() });
            classify_error(&e)
        }
    };
    (report, code)
}

fn classify_error(e: &SpecError) -> i32 {
    use crate::ctmc::CtmcError;
    use crate::models::ModelError;
    use crate::network::NetworkError;
    match e {
        SpecError::Schema { .. } | SpecError::NetworkOnly(_) | SpecError::NotANetwork(_) => {
            EXIT_INPUT_ERROR
        }
        SpecError::Model(ModelError::Ctmc(
            CtmcError::SolverDidNotConverge { .. } | CtmcError::NotIrreducible,
        )) => EXIT_SOLVER_FAILURE,
        SpecError::Network(
            NetworkError::NoConvergence { .. } | NetworkError::NodeNotQuasiReversible { .. },
        ) => EXIT_SOLVER_FAILURE,
        SpecError::Network(NetworkError::Ctmc(
            CtmcError::SolverDidNotConverge { .. } | CtmcError::NotIrreducible,
        )) => EXIT_SOLVER_FAILURE,
        _ => EXIT_INPUT_ERROR,
    }
}

fn run_inner(
    spec: &ModelSpecFile,
    command: Command,
    overrides: &Overrides,
    report: &mut Report,
) -> Result<(), SpecError> {
    let tol = overrides.tol.unwrap_or(spec.solver.tol.max(1e-12) * 100.0);
    let solver = spec.solver.options()?;
    if command == Command::Network {
        let (nodes, routing) = match build(spec)? {
            Built::Network { nodes, routing } => (nodes, routing),
            Built::Single(_) => return Err(SpecError::NotANetwork(spec.model.name().into())),
        };
        let topts = TrafficOptions { solver, ..Default::default() };
        let pf_tol = overrides.tol.unwrap_or(1e-6);
        let pf = verify_product_form(&nodes, &routing, pf_tol, &topts)
            .map_err(SpecError::Network)?;
        report.pass = pf.pass && pf.quasi_ok.values().all(|&ok| ok);
        report.checks.push(CheckVerdict {
            name: "product_form".into(),
            pass: pf.pass,
            residual: Some(pf.tv_distance),
            tol: pf_tol,
            detail: json!({ "leak_bound": pf.leak_bound, "balance_residual": pf.residual }),
        });
        for (node, ok) in &pf.quasi_ok {
            report.checks.push(CheckVerdict {
                name: format!("quasi_reversible[node {node}]"),
                pass: *ok,
                residual: None,
                tol,
                detail: Value::Null,
            });
        }
        let key = |m: &BTreeMap<(usize, String), f64>| -> Value {
            Value::Object(
                m.iter()
                    .map(|((i, t), v)| (format!("{i}:{t}"), json!(v)))
                    .collect(),
            )
        };
        report.artifacts = json!({
            "alpha": key(&pf.alpha),
            "beta": key(&pf.beta),
            "tv_distance": pf.tv_distance,
            "residual": pf.residual,
            "leak_bound": pf.leak_bound,
        });
        return Ok(());
    }

    let model = match build(spec)? {
        Built::Single(m) => m,
        Built::Network { .. } => return Err(SpecError::NetworkOnly(spec.model.name().into())),
    };
    match command {
        Command::Solve => {
            let pi = model.solve(&solver).map_err(crate::models::ModelError::from)?;
            let residual = stationary_residual(model.q(), &pi);
            let closed_dev = model.closed_form_pi.as_ref().and_then(|cf| {
                cf.is_normalized().then(|| {
                    (0..pi.len())
                        .map(|i| (cf.weight(i) - pi.weight(i)).abs())
                        .fold(0.0f64, f64::max)
                })
            });
            report.checks.push(CheckVerdict {
                name: "stationary_residual".into(),
                pass: residual <= solver.tol,
                residual: Some(residual),
                tol: solver.tol,
                detail: Value::Null,
            });
            report.pass = residual <= solver.tol;
            report.artifacts = json!({
                "pi": pi_rows(model.space(), &pi),
                "residual": residual,
                "closed_form_max_abs_dev": closed_dev,
                "states": model.space().len(),
            });
            if let Some(dir) = &overrides.out_dir {
                std::fs::create_dir_all(dir).ok();
                write_pi_csv(dir, model.space(), &pi).ok();
            }
        }
        Command::Reverse => {
            let pi = model.solve(&solver).map_err(crate::models::ModelError::from)?;
            let reversed = reverse(model.q(), &pi).map_err(crate::models::ModelError::from)?;
            let reversible = is_reversible(model.q(), &pi, tol);
            let kelly = kelly_check(model.q(), &reversed, &pi, tol)
                .map_err(crate::models::ModelError::from)?;
            report.checks.push(CheckVerdict {
                name: "kelly".into(),
                pass: kelly.passed(),
                residual: None,
                tol,
                detail: json!(format!("{kelly:?}")),
            });
            report.pass = kelly.passed();
            let rates: Vec<Value> = reversed
                .entries()
                .map(|(i, j, r)| json!([i, j, r]))
                .collect();
            report.artifacts = json!({
                "reversible": reversible,
                "reversed_rates": rates,
                "states": model.space().len(),
            });
        }
        Command::Check => {
            let names: Vec<String> = if spec.checks.is_empty() {
                vec!["family".into(), "reversible".into(), "kelly".into(), "quasi".into(), "gamma".into()]
            } else {
                spec.checks.clone()
            };
            let pi = model.solve(&solver).map_err(crate::models::ModelError::from)?;
            for name in &names {
                let verdict = run_check(&model, &pi, name, tol)?;
                report.pass &= verdict.pass;
                report.checks.push(verdict);
            }
            report.artifacts = json!({ "states": model.space().len() });
        }
        Command::Simulate => {
            let seed = overrides
                .seed
                .or(spec.sim.seed)
                .or_else(|| std::env::var("QREV_SEED").ok().and_then(|s| s.parse().ok()))
                .unwrap_or(0);
            report.seed = Some(seed);
            let config = BurkeConfig {
                departures: spec.sim.departures.unwrap_or(100_000),
                seed,
                replications: spec.sim.replications.unwrap_or(1),
                solver: solver.clone(),
                ..Default::default()
            };
            let burke = crate::sim::burke_report(&model, &config)
                .map_err(|e| SpecError::Schema { path: "sim".into(), reason: e.to_string() })?;
            report.checks.push(CheckVerdict {
                name: "poisson_departures".into(),
                pass: burke.poisson_pass,
                residual: Some(1.0 - burke.ks.p_value),
                tol: 0.99,
                detail: json!({
                    "ks_p": burke.ks.p_value,
                    "lag1": burke.lag1_autocorr,
                    "lag1_bound": burke.lag1_bound,
                }),
            });
            report.pass = burke.poisson_pass;
            report.artifacts = json!({
                "rate_estimate": burke.rate_estimate,
                "rate_stderr": burke.rate_stderr,
                "ci": [burke.ci_low, burke.ci_high],
                "n_departures": burke.n_departures,
                "ks_d": burke.ks.statistic,
                "ks_p": burke.ks.p_value,
                "lag1_autocorr": burke.lag1_autocorr,
                "lag1_bound": burke.lag1_bound,
                "future_corr": burke.future_corr,
                "future_bound": burke.future_bound,
            });
            if let Some(dir) = &overrides.out_dir {
                std::fs::create_dir_all(dir).ok();
                let demo_events = spec.sim.events.unwrap_or(10_000);
                if let Ok(traj) = simulate(
                    &model,
                    0,
                    StopRule::Events(demo_events),
                    RngStream::with_stream(seed, 1_000_000),
                ) {
                    if let Ok(f) = std::fs::File::create(dir.join("trajectory.csv")) {
                        traj.to_csv(model.space(), std::io::BufWriter::new(f)).ok();
                    }
                }
            }
        }
        Command::Network => unreachable!(),
    }
    Ok(())
}

fn run_check(
    model: &QueueModel,
    pi: &Measure,
    name: &str,
    tol: f64,
) -> Result<CheckVerdict, SpecError> {
    let mask = model.interior_mask();
    let verdict = match name {
        "family" => {
            let v = model.family().validate(tol);
            CheckVerdict {
                name: name.into(),
                pass: v.pass,
                residual: None,
                tol,
                detail: json!(format!("{:?}", v.worst)),
            }
        }
        "reversible" => {
            let ok = is_reversible(model.q(), pi, tol);
            CheckVerdict { name: name.into(), pass: ok, residual: None, tol, detail: Value::Null }
        }
        "kelly" => {
            // certify the closed form when one is attached, else the
            // numerically solved distribution certifies itself
            let reference = model.closed_form_pi.as_ref().filter(|m| m.is_normalized());
            let measure = reference.unwrap_or(pi);
            let guess = reverse(model.q(), measure).map_err(crate::models::ModelError::from)?;
            let kelly = kelly_check(model.q(), &guess, measure, tol)
                .map_err(crate::models::ModelError::from)?;
            let pass = matches!(kelly, KellyVerdict::Pass);
            CheckVerdict {
                name: name.into(),
                pass,
                residual: None,
                tol,
                detail: json!(format!("{kelly:?}")),
            }
        }
        "quasi" => {
            let betas = quasi_reversible(
                model.departure_parts().into_iter(),
                pi,
                tol,
                mask.as_deref(),
            )
            .map_err(crate::models::ModelError::from)?;
            let detail = match &betas {
                Some(b) => {
                    let m: BTreeMap<String, f64> =
                        b.iter().map(|(l, &v)| (l.to_string(), v)).collect();
                    json!({ "beta": m })
                }
                None => Value::Null,
            };
            CheckVerdict {
                name: name.into(),
                pass: betas.is_some(),
                residual: None,
                tol,
                detail,
            }
        }
        "gamma" => {
            let mut preds: BTreeMap<Label, MembershipPredicate> = BTreeMap::new();
            for label in model.family().labels() {
                if label.as_str() == "a" || label.as_str().starts_with("a:") {
                    preds.insert(label.clone(), MembershipPredicate::constant_exit());
                } else if label.as_str() == "d" || label.as_str().starts_with("d:") {
                    preds.insert(label.clone(), MembershipPredicate::reversed_constant_exit());
                }
            }
            let rep = check_gamma_reversibility(model.family(), pi, &preds, tol, mask.as_deref())
                .map_err(crate::models::ModelError::from)?;
            let detail: Vec<Value> = rep
                .labels
                .iter()
                .map(|v| {
                    json!({
                        "label": v.label.to_string(),
                        "forward": v.forward_member,
                        "reversed": v.reversed_member,
                        "ok": v.implication_ok,
                    })
                })
                .collect();
            CheckVerdict {
                name: name.into(),
                pass: rep.pass,
                residual: None,
                tol,
                detail: json!({ "labels": detail, "orbits": rep.orbits.len() }),
            }
        }
        "local" => {
            let w = crate::balance::PairPartition::singletons(model.q());
            let rep = crate::balance::check_local_balance(model.q(), pi, &w, tol);
            let failed: Vec<&str> = rep
                .blocks
                .iter()
                .filter(|b| !b.pass)
                .map(|b| b.name.as_str())
                .take(10)
                .collect();
            CheckVerdict {
                name: name.into(),
                pass: rep.pass,
                residual: Some(rep.stationary_residual),
                tol,
                detail: json!({ "blocks": rep.blocks.len(), "failed": failed }),
            }
        }
        other => {
            return Err(SpecError::Schema {
                path: "checks".into(),
                reason: format!(
                    "unknown check {other:?} (expected family, reversible, kelly, quasi, gamma, local)"
                ),
            })
        }
    };
    Ok(verdict)
}
